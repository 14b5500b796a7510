//! Modal interaction: co-attention between the title and object streams,
//! initial/interactive feature fusion, item initialization and the
//! attention-weighted aggregation of an item's triples.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{EncodedSequence, SurfaceFeatures};
use crate::error::{Error, Result};
use crate::nn::{CoAttentionLayer, EncoderConfig, Graph, ParamStore, Var, LEAKY_RELU_SLOPE};

/// How each stream's initial and interactive features are combined.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionAlgorithm {
    #[default]
    Mean,
    SoftSampling,
    HardSampling,
    /// No fusion: only the interactive features flow on.
    Off,
}

impl FusionAlgorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionAlgorithm::Mean => "mean",
            FusionAlgorithm::SoftSampling => "soft_sampling",
            FusionAlgorithm::HardSampling => "hard_sampling",
            FusionAlgorithm::Off => "off",
        }
    }
}

impl fmt::Display for FusionAlgorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionAlgorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "soft_sampling" => Ok(Self::SoftSampling),
            "hard_sampling" => Ok(Self::HardSampling),
            "off" => Ok(Self::Off),
            _ => Err(Error::InvalidInput(format!("unknown fusion algorithm `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Stacked co-attention layers.
#[derive(Debug, Clone)]
pub struct Interactor {
    layers: Vec<CoAttentionLayer>,
}

/// Interactive features of both streams plus every layer's cross-attention
/// matrices (one per head).
pub struct CoAttendOutput {
    pub text: Var,
    pub image: Var,
    pub text_weights: Vec<Vec<Var>>,
    pub image_weights: Vec<Vec<Var>>,
}

impl Interactor {
    pub fn new(cfg: &EncoderConfig) -> Self {
        Self {
            layers: (0..cfg.n_layers)
                .map(|l| {
                    CoAttentionLayer::new(
                        &format!("interactor.layer{l}"),
                        cfg.hidden_text,
                        cfg.hidden_image,
                        cfg.hidden_text,
                        cfg.n_heads_text,
                        cfg.ffn_multiplier,
                    )
                })
                .collect(),
        }
    }

    pub fn init(&self, store: &mut ParamStore, std: f64, rng: &mut impl Rng) -> Result<()> {
        for l in &self.layers {
            l.init(store, std, rng)?;
        }
        Ok(())
    }

    /// Image-conditioned text features and text-conditioned image features.
    pub fn co_attend(&self, g: &mut Graph, text: &EncodedSequence, image: &EncodedSequence) -> Result<CoAttendOutput> {
        let mut out = CoAttendOutput {
            text: text.states,
            image: image.states,
            text_weights: Vec::new(),
            image_weights: Vec::new(),
        };
        for l in &self.layers {
            let r = l.forward(g, out.text, &text.mask, out.image, &image.mask)?;
            out.text = r.text;
            out.image = r.image;
            out.text_weights.push(r.text_weights);
            out.image_weights.push(r.image_weights);
        }
        Ok(out)
    }
}

/// Per-channel logistic gate `sigmoid(w*h0 + u*hx + b)` of one stream.
#[derive(Debug, Clone)]
pub struct FusionGate {
    w: String,
    u: String,
    b: String,
    width: usize,
}

impl FusionGate {
    pub fn new(prefix: &str, width: usize) -> Self {
        Self {
            w: format!("{prefix}.w"),
            u: format!("{prefix}.u"),
            b: format!("{prefix}.b"),
            width,
        }
    }

    /// Zero init: the gate starts at 0.5 everywhere.
    pub fn init(&self, store: &mut ParamStore) -> Result<()> {
        for name in [&self.w, &self.u, &self.b] {
            store.add_zeros(name, &[self.width])?;
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, h0: Var, hx: Var) -> Result<Var> {
        let w = g.param(&self.w)?;
        let u = g.param(&self.u)?;
        let b = g.param(&self.b)?;
        let a = g.mul_row(h0, w)?;
        let c = g.mul_row(hx, u)?;
        let s = g.add(a, c)?;
        let s = g.add_row(s, b)?;
        Ok(g.sigmoid(s))
    }
}

/// Fuses initial features `h0` with interactive features `hx`.
///
/// Hard sampling picks `h0` per element with probability `gate` in training
/// and uses the expectation in evaluation.
pub fn iffm_fuse(
    g: &mut Graph,
    h0: Var,
    hx: Var,
    algorithm: FusionAlgorithm,
    gate: &FusionGate,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<Var> {
    if g.value(h0).dims2() != g.value(hx).dims2() {
        return Err(Error::shape("iffm_fuse", "initial and interactive shapes differ"));
    }
    match algorithm {
        FusionAlgorithm::Off => Ok(hx),
        FusionAlgorithm::Mean => {
            let s = g.add(h0, hx)?;
            Ok(g.scale(s, 0.5))
        }
        FusionAlgorithm::SoftSampling => soft_blend(g, h0, hx, gate),
        FusionAlgorithm::HardSampling => match mode {
            Mode::Eval => soft_blend(g, h0, hx, gate),
            Mode::Train => {
                let p = gate.forward(g, h0, hx)?;
                let take: Vec<bool> = g.value(p).data().iter().map(|&pk| rng.random::<f64>() < pk).collect();
                g.hard_select(p, h0, hx, &take)
            }
        },
    }
}

fn soft_blend(g: &mut Graph, h0: Var, hx: Var, gate: &FusionGate) -> Result<Var> {
    let p = gate.forward(g, h0, hx)?;
    let d = g.sub(h0, hx)?;
    let pd = g.mul(p, d)?;
    g.add(hx, pd)
}

/// Mean over the valid text rows and the valid image rows mapped through
/// `w0` (`hidden_image x hidden_text`).
pub fn init_item_representation(
    g: &mut Graph,
    text: Var,
    text_mask: &[bool],
    image: Var,
    image_mask: &[bool],
    w0: Var,
) -> Result<Var> {
    let t_rows: Vec<usize> = (0..text_mask.len()).filter(|&i| text_mask[i]).collect();
    let i_rows: Vec<usize> = (0..image_mask.len()).filter(|&i| image_mask[i]).collect();
    let mut parts = Vec::new();
    if !t_rows.is_empty() {
        parts.push(g.select_rows(text, &t_rows)?);
    }
    if !i_rows.is_empty() {
        let im = g.select_rows(image, &i_rows)?;
        parts.push(g.matmul(im, w0)?);
    }
    if parts.is_empty() {
        return Err(Error::InvalidInput(
            "item has neither title nor image positions to initialize from".into(),
        ));
    }
    let all = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };
    let rows: Vec<usize> = (0..g.value(all).rows()).collect();
    g.mean_rows(all, &rows)
}

/// Graph nodes of the triple attention: per head, triple representations
/// `[X x h]`, importances `[1 x X]` and attention `[1 x X]`.
#[derive(Debug, Clone, Default)]
pub struct TripleAttentionVars {
    pub representations: Vec<Var>,
    pub importance: Vec<Var>,
    pub attention: Vec<Var>,
}

/// Plain values of [`TripleAttentionVars`], indexed `[head][triple]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TripleAttention {
    pub representations: Vec<Vec<Vec<f64>>>,
    pub importance: Vec<Vec<f64>>,
    pub attention: Vec<Vec<f64>>,
}

impl TripleAttentionVars {
    pub fn read(&self, g: &Graph) -> TripleAttention {
        TripleAttention {
            representations: self
                .representations
                .iter()
                .map(|&t| {
                    let v = g.value(t);
                    (0..v.rows()).map(|r| v.row_slice(r).to_vec()).collect()
                })
                .collect(),
            importance: self.importance.iter().map(|&b| g.value(b).data().to_vec()).collect(),
            attention: self.attention.iter().map(|&a| g.value(a).data().to_vec()).collect(),
        }
    }
}

/// Item initialization and knowledge aggregation parameters.
#[derive(Debug, Clone)]
pub struct StructureAggregator {
    w0: String,
    w3: String,
    heads: Vec<(String, String)>,
    hidden_text: usize,
    hidden_image: usize,
}

pub struct Aggregated {
    pub c_star: Var,
    pub attention: TripleAttentionVars,
}

impl StructureAggregator {
    pub fn new(cfg: &EncoderConfig) -> Self {
        Self {
            w0: "structagg.w0".into(),
            w3: "structagg.w3".into(),
            heads: (0..cfg.agg_heads)
                .map(|m| (format!("structagg.head{m}.w1"), format!("structagg.head{m}.w2")))
                .collect(),
            hidden_text: cfg.hidden_text,
            hidden_image: cfg.hidden_image,
        }
    }

    pub fn init(&self, store: &mut ParamStore, std: f64, rng: &mut impl Rng) -> Result<()> {
        let h = self.hidden_text;
        store.add_normal(&self.w0, &[self.hidden_image, h], std, rng)?;
        store.add_normal(&self.w3, &[h, h], std, rng)?;
        for (w1, w2) in &self.heads {
            store.add_normal(w1, &[3 * h, h], std, rng)?;
            store.add_normal(w2, &[1, h], std, rng)?;
        }
        Ok(())
    }

    pub fn w0(&self, g: &mut Graph) -> Result<Var> {
        g.param(&self.w0)
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    /// `c* = W3 c + elu(mean_m sum_x a_x^m t_x^m)` with
    /// `t_x^m = W1^m [c | p_x | v_x]`, `b_x^m = leaky_relu(W2^m t_x^m)` and
    /// `a^m = softmax_x(b^m)`. Without triples the aggregate is zero.
    pub fn aggregate(&self, g: &mut Graph, c: Var, surface: &SurfaceFeatures) -> Result<Aggregated> {
        let w3 = g.param(&self.w3)?;
        let base = g.matmul(c, w3)?;
        let n = surface.len();
        if n == 0 {
            return Ok(Aggregated {
                c_star: base,
                attention: TripleAttentionVars::default(),
            });
        }
        let cs = g.select_rows(c, &vec![0; n])?;
        let p = if n == 1 { surface.relations[0] } else { g.concat_rows(&surface.relations)? };
        let v = if n == 1 { surface.tails[0] } else { g.concat_rows(&surface.tails)? };
        let z = g.concat_cols(&[cs, p, v])?;
        let mut att = TripleAttentionVars::default();
        let mut total: Option<Var> = None;
        for (w1, w2) in &self.heads {
            let w1 = g.param(w1)?;
            let w2 = g.param(w2)?;
            let t = g.matmul(z, w1)?;
            let b = g.matmul_bt(w2, t)?;
            let b = g.leaky_relu(b, LEAKY_RELU_SLOPE);
            let a = g.softmax(b, None)?;
            let head = g.matmul(a, t)?;
            total = Some(match total {
                Some(acc) => g.add(acc, head)?,
                None => head,
            });
            att.representations.push(t);
            att.importance.push(b);
            att.attention.push(a);
        }
        let total = total.ok_or_else(|| Error::Config("structure aggregation needs at least one head".into()))?;
        let agg = g.scale(total, 1.0 / self.heads.len() as f64);
        let agg = g.elu(agg);
        let c_star = g.add(base, agg)?;
        Ok(Aggregated { c_star, attention: att })
    }
}
