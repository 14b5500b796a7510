mod common;

use std::collections::HashSet;

use k3m::corruption::{apply_corruption, balanced_split, Action, CorruptionKind, CorruptionSetting, Split};
use k3m::data_model::{generate_synthetic_corpus, Corpus, GenConfig};
use k3m::encoders::{mask_count, mask_objects_seeded, mask_tokens_seeded, SurfaceFeatures};
use k3m::interaction::{iffm_fuse, FusionAlgorithm, FusionGate, Mode, StructureAggregator};
use k3m::nn::{EncoderConfig, Graph, ParamStore, Precision, Tensor};
use k3m::tasks::{accuracy, lpm_loss_values, rank_at_k, softmax_values, transe_score_values};
use k3m::trainer::Schedule;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn corpus(n_items: usize, n_classes: usize, seed: u64) -> Corpus {
    let gen = GenConfig {
        n_items,
        n_classes,
        ..GenConfig::default()
    };
    generate_synthetic_corpus(&gen, seed).unwrap()
}

fn kind() -> impl Strategy<Value = CorruptionKind> {
    prop::sample::select(CorruptionKind::ALL.to_vec())
}

fn row(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn corruption_touches_only_planned_items(k in kind(), ratio in 0u32..=100, seed in 0u64..1000) {
        let clean = corpus(60, 3, seed);
        let setting = CorruptionSetting::new(k, ratio).unwrap();
        let (dirty, manifest) = apply_corruption(&clean, setting, seed).unwrap();
        let planned: usize = clean
            .by_class()
            .iter()
            .map(|m| setting.plan(m.len()).iter().map(|p| p.1).sum::<usize>())
            .sum();
        let touched = manifest.entries.iter().filter(|e| e.action != Action::None).count();
        prop_assert_eq!(touched, planned);
        for (a, b) in clean.items.iter().zip(&dirty.items) {
            let action = manifest.action(a.id).unwrap();
            if action == Action::None {
                prop_assert_eq!(a, b);
            }
            prop_assert_eq!(&a.triples, &b.triples);
        }
    }

    #[test]
    fn noise_never_copies_from_self(k in prop::sample::select(vec![
        CorruptionKind::Tnr, CorruptionKind::Inr, CorruptionKind::Tinr, CorruptionKind::Mnr,
    ]), seed in 0u64..1000) {
        let clean = corpus(40, 4, seed);
        let (_, manifest) = apply_corruption(&clean, CorruptionSetting::new(k, 100).unwrap(), seed).unwrap();
        for e in &manifest.entries {
            let sources = match e.action {
                Action::ReplaceTitle { source } | Action::ReplaceImage { source } => vec![source],
                Action::ReplaceBoth { title_source, image_source } => vec![title_source, image_source],
                _ => vec![],
            };
            prop_assert!(sources.iter().all(|&s| s != e.item_id));
        }
    }

    #[test]
    fn splits_partition_items(k in kind(), ratio in 0u32..=100, seed in 0u64..1000) {
        let clean = corpus(50, 5, seed);
        let (dirty, manifest) = apply_corruption(&clean, CorruptionSetting::new(k, ratio).unwrap(), seed).unwrap();
        let split = balanced_split(&dirty, &manifest, seed).unwrap();
        let mut seen = HashSet::new();
        for s in [Split::Train, Split::Dev, Split::Test] {
            for id in split.ids(s) {
                prop_assert!(seen.insert(id));
            }
        }
        prop_assert_eq!(seen.len(), dirty.items.len());
    }

    #[test]
    fn corruption_is_deterministic(k in kind(), ratio in 0u32..=100, seed in 0u64..1000) {
        let clean = corpus(30, 3, 1);
        let s = CorruptionSetting::new(k, ratio).unwrap();
        let a = apply_corruption(&clean, s, seed).unwrap();
        let b = apply_corruption(&clean, s, seed).unwrap();
        prop_assert_eq!(a.0, b.0);
        prop_assert_eq!(a.1, b.1);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn masking_selects_exact_count(len in 0usize..80, ratio in 0.0f64..=1.0, seed: u64) {
        let seq: Vec<usize> = (0..len).map(|i| 5 + i % 20).collect();
        let m = mask_tokens_seeded(&seq, ratio, 25, seed);
        prop_assert_eq!(m.mask_positions.len(), mask_count(len, ratio));
        prop_assert!(m.mask_positions.windows(2).all(|w| w[0] < w[1]));
        let labels: Vec<usize> = m.mask_positions.iter().map(|&p| seq[p]).collect();
        prop_assert_eq!(m.labels, labels);
        prop_assert!(mask_count(len, ratio) <= len);
    }

    #[test]
    fn object_masking_only_zeroes(seed: u64) {
        let c = corpus(12, 2, seed % 50);
        let objects = &c.items[(seed % 12) as usize].objects;
        let m = mask_objects_seeded(objects, 0.15, seed);
        prop_assert_eq!(m.mask_positions.len(), mask_count(objects.len(), 0.15));
        for i in 0..objects.len() {
            let f = &m.objects.features[i];
            if !m.mask_positions.contains(&i) {
                prop_assert_eq!(f, &objects.features[i]);
            } else {
                prop_assert!(f == &objects.features[i] || f.iter().all(|&x| x == 0.0));
            }
        }
        prop_assert_eq!(&m.objects.labels, &objects.labels);
    }

    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-30.0f64..30.0, 1..20)) {
        let p = softmax_values(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn argmax_ignores_a_shift(rows in prop::collection::vec(prop::collection::vec(0i32..6, 4), 1..10), shift in -50.0f64..50.0) {
        let scores: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|&x| x as f64).collect()).collect();
        let shifted: Vec<Vec<f64>> = scores.iter().map(|r| r.iter().map(|x| x + shift.round()).collect()).collect();
        let labels: Vec<usize> = (0..scores.len()).map(|i| i % 4).collect();
        prop_assert_eq!(accuracy(&scores, &labels).unwrap(), accuracy(&shifted, &labels).unwrap());
    }

    #[test]
    fn rank_at_k_survives_monotone_maps(rows in prop::collection::vec(prop::collection::vec(0i32..8, 10), 1..12), k in 1usize..=10) {
        let scores: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|&x| x as f64).collect()).collect();
        let mapped: Vec<Vec<f64>> = scores.iter().map(|r| r.iter().map(|x| (x * 0.7).exp() + 3.0).collect()).collect();
        let truth: Vec<usize> = (0..scores.len()).map(|i| (i * 7) % 10).collect();
        prop_assert_eq!(rank_at_k(&scores, &truth, k).unwrap(), rank_at_k(&mapped, &truth, k).unwrap());
        prop_assert!(rank_at_k(&scores, &truth, k).unwrap() <= rank_at_k(&scores, &truth, 10).unwrap());
    }

    #[test]
    fn hinge_is_monotone(pos in 0.0f64..4.0, neg in 0.0f64..4.0, d in 0.0f64..2.0, margin in 0.0f64..2.0) {
        let base = lpm_loss_values(&[pos], &[vec![neg]], margin);
        prop_assert!(base >= 0.0);
        prop_assert!(lpm_loss_values(&[pos], &[vec![neg + d]], margin) <= base);
        prop_assert!(lpm_loss_values(&[pos + d], &[vec![neg]], margin) >= base);
    }

    #[test]
    fn transe_score_is_a_norm(c in row(6), p in row(6)) {
        let v: Vec<f64> = c.iter().zip(&p).map(|(a, b)| a + b).collect();
        prop_assert!(transe_score_values(&c, &p, &v).abs() < 1e-12);
        let shifted: Vec<f64> = v.iter().map(|x| x + 1.0).collect();
        prop_assert!((transe_score_values(&c, &p, &shifted) - 6.0).abs() < 1e-9);
    }

    #[test]
    fn mean_fusion_is_symmetric(a in row(5), b in row(5)) {
        let gate = FusionGate::new("g", 5);
        let mut store = ParamStore::with_precision(Precision::F64);
        gate.init(&mut store).unwrap();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::row(a.clone()));
        let y = g.input(Tensor::row(b.clone()));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let xy = iffm_fuse(&mut g, x, y, FusionAlgorithm::Mean, &gate, Mode::Eval, &mut rng).unwrap();
        let yx = iffm_fuse(&mut g, y, x, FusionAlgorithm::Mean, &gate, Mode::Eval, &mut rng).unwrap();
        prop_assert_eq!(g.value(xy).data(), g.value(yx).data());
        let soft = iffm_fuse(&mut g, x, y, FusionAlgorithm::SoftSampling, &gate, Mode::Eval, &mut rng).unwrap();
        for ((s, p), q) in g.value(soft).data().iter().zip(&a).zip(&b) {
            prop_assert!(*s >= p.min(*q) - 1e-12 && *s <= p.max(*q) + 1e-12);
        }
    }

    #[test]
    fn schedule_is_continuous(base in 1e-5f64..1e-2, total in 1u64..500, frac in 0.0f64..=1.0) {
        let s = Schedule::with_warmup_fraction(base, frac, total).unwrap();
        let mut prev = s.lr(0);
        if s.warmup_steps > 0 {
            prop_assert_eq!(prev, 0.0);
        }
        for t in 1..=total {
            let lr = s.lr(t);
            prop_assert!(lr >= 0.0 && lr <= base * (1.0 + 1e-12));
            prop_assert!((lr - prev).abs() <= base * 1.000001);
            prev = lr;
        }
        if s.warmup_steps < total {
            prop_assert_eq!(s.lr(total), 0.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn aggregation_ignores_triple_order(seed: u64, x in 1usize..8) {
        let enc = EncoderConfig { hidden_text: 6, hidden_image: 6, agg_heads: 3, ..common::micro_encoder() };
        let agg = StructureAggregator::new(&enc);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::with_precision(Precision::F64);
        agg.init(&mut store, 0.5, &mut rng).unwrap();
        let gen = |k: usize| Tensor::row((0..6).map(|j| ((seed as usize + 31 * k + 7 * j) % 17) as f64 / 8.0 - 1.0).collect());
        let c = gen(100);
        let p: Vec<Tensor> = (0..x).map(gen).collect();
        let v: Vec<Tensor> = (0..x).map(|k| gen(k + 50)).collect();
        let run = |order: &[usize]| {
            let mut g = Graph::new(&store);
            let cv = g.input(c.clone());
            let surface = SurfaceFeatures {
                relations: order.iter().map(|&i| g.input(p[i].clone())).collect(),
                tails: order.iter().map(|&i| g.input(v[i].clone())).collect(),
            };
            let out = agg.aggregate(&mut g, cv, &surface).unwrap();
            let att = out.attention.read(&g).attention;
            (g.value(out.c_star).data().to_vec(), att)
        };
        let forward: Vec<usize> = (0..x).collect();
        let reversed: Vec<usize> = (0..x).rev().collect();
        let (a, att) = run(&forward);
        let (b, _) = run(&reversed);
        for (u, w) in a.iter().zip(&b) {
            prop_assert!((u - w).abs() < 1e-9);
        }
        for head in att {
            prop_assert!((head.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
