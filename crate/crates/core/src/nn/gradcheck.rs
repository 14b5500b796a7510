//! Central finite-difference checks of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore, Precision};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Scalars to probe. Every tensor gets at least one probe when possible.
    pub samples: usize,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            samples: 128,
            precision: Precision::F64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Probe {
    pub param: String,
    pub offset: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub probes: Vec<Probe>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&Probe> {
        self.probes
            .iter()
            .max_by(|a, b| a.relative_error.total_cmp(&b.relative_error))
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn eval<F>(params: &ParamStore, forward: &F) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::new(params);
    let loss = forward(&mut g)?;
    let t = g.value(loss);
    if t.len() != 1 {
        return Err(Error::shape("grad_check", "loss must be scalar"));
    }
    Ok(t.item())
}

/// Compares backward-pass gradients with `(f(θ+ε) − f(θ−ε)) / 2ε` on a sample
/// of parameter scalars. `forward` must be deterministic.
pub fn grad_check<F>(params: &ParamStore, forward: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut work = params.clone();
    work.set_precision(Precision::F64);

    let (loss0, analytic) = {
        let mut g = Graph::new(&work);
        let loss = forward(&mut g)?;
        let back = g.backward(loss)?;
        (g.value(loss).item(), back.params)
    };
    let again = eval(&work, &forward)?;
    if again.to_bits() != loss0.to_bits() {
        return Err(Error::NonDeterministic(format!(
            "two forward passes gave {loss0} and {again}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sizes: Vec<(ParamId, usize)> = work.ids().map(|id| (id, work.value(id).len())).collect();
    let total: usize = sizes.iter().map(|s| s.1).sum();
    let mut targets: Vec<(ParamId, usize)> = Vec::new();
    if total <= cfg.samples {
        for &(id, n) in &sizes {
            targets.extend((0..n).map(|o| (id, o)));
        }
    } else {
        for &(id, n) in &sizes {
            if n > 0 && targets.len() < cfg.samples {
                targets.push((id, sample(&mut rng, n, 1).index(0)));
            }
        }
        let remaining = cfg.samples - targets.len();
        let mut flat = sample(&mut rng, total, remaining).into_vec();
        flat.sort_unstable();
        for f in flat {
            let mut rest = f;
            for &(id, n) in &sizes {
                if rest < n {
                    targets.push((id, rest));
                    break;
                }
                rest -= n;
            }
        }
    }

    let mut probes = Vec::with_capacity(targets.len());
    let mut max_err: f64 = 0.0;
    for (id, offset) in targets {
        let orig = work.value(id).data()[offset];
        let (mut hi, mut lo) = (orig + cfg.eps, orig - cfg.eps);
        if cfg.precision == Precision::F32 {
            hi = hi as f32 as f64;
            lo = lo as f32 as f64;
        }
        work.value_mut(id).data_mut()[offset] = hi;
        let f_hi = eval(&work, &forward)?;
        work.value_mut(id).data_mut()[offset] = lo;
        let f_lo = eval(&work, &forward)?;
        work.value_mut(id).data_mut()[offset] = orig;

        let numeric = (f_hi - f_lo) / (hi - lo);
        let a = analytic.get(id).map_or(0.0, |t| t.data()[offset]);
        let err = relative_error(a, numeric);
        max_err = max_err.max(err);
        probes.push(Probe {
            param: work.name(id).to_string(),
            offset,
            analytic: a,
            numeric,
            relative_error: err,
        });
    }
    Ok(GradCheckReport {
        max_relative_error: max_err,
        probes,
    })
}
