use indexmap::IndexMap;
use proptest::prelude::*;

use mimalign::config::Config;
use mimalign::data::{decode_corpus, encode_corpus, synth_dataset};
use mimalign::eval::{holdout_split, mean_iou, per_class_iou};
use mimalign::optim::{adamw_step, AdamWConfig, LrSchedule, OptimizerState};
use mimalign::teacher::Teacher;
use mimalign::tensor::{ParamStore, TensorBlob};
use mimalign::vit::{cls_attention_map, embed, forward, init_params, patchify, ViTConfig, VitParams};

fn vit_configs() -> impl Strategy<Value = ViTConfig> {
    (1usize..4, prop::sample::select(vec![4usize, 8]), 1usize..4, 1usize..4, 1usize..3, 1usize..4).prop_map(
        |(grid, patch, channels, head_dim, heads, depth)| ViTConfig {
            image_size: grid * patch,
            patch_size: patch,
            channels,
            embed_dim: head_dim * heads * 2,
            depth,
            heads,
            mlp_ratio: 2.0,
        },
    )
}

/// Parameter count written out term by term.
fn count_oracle(c: &ViTConfig) -> usize {
    let d = c.embed_dim;
    let hidden = (d as f64 * c.mlp_ratio) as usize;
    let tokens = (c.image_size / c.patch_size).pow(2) + 1;
    let patch_dim = c.patch_size * c.patch_size * c.channels;
    let embed = patch_dim * d + d + d + tokens * d;
    let block = 2 * d + (3 * d * d + 3 * d) + (d * d + d) + 2 * d + (hidden * d + hidden) + (d * hidden + d);
    embed + c.depth * block + 2 * d
}

fn image(c: &ViTConfig, seed: u64) -> TensorBlob {
    let n = c.image_size * c.image_size * c.channels;
    let data = (0..n).map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f32 / 1000.0).collect();
    TensorBlob::new(vec![c.image_size, c.image_size, c.channels], data).unwrap()
}

#[test]
fn reference_teacher_has_113600_parameters() {
    let c = Config::default().teacher_vit();
    assert_eq!(init_params(&c, 0).unwrap().numel(), 113_600);
    assert_eq!(count_oracle(&c), 113_600);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn parameter_count_matches_closed_form(c in vit_configs(), seed: u64) {
        prop_assert_eq!(init_params(&c, seed).unwrap().numel(), count_oracle(&c));
    }

    #[test]
    fn attention_rows_are_distributions(c in vit_configs(), seed: u64) {
        let store = init_params(&c, seed).unwrap();
        let p = VitParams::<f32>::from_store(&store, &c, "").unwrap();
        let tokens = embed(&patchify(&image(&c, seed), &c).unwrap(), &p, &c).unwrap();
        let (_, rec) = forward(tokens, &p, &c, true).unwrap();
        let rec = rec.unwrap();
        for head in rec.layers.iter().flatten() {
            for r in 0..head.rows {
                let row = head.row(r);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                prop_assert!((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() <= 1e-5);
            }
        }
        for layer in 0..c.depth {
            let map = cls_attention_map(&rec, layer).unwrap();
            let g = c.image_size / c.patch_size;
            prop_assert_eq!(map.shape(), &[g, g]);
            prop_assert!(map.data().iter().map(|&v| v as f64).sum::<f64>() <= 1.0 + 1e-5);
        }
    }

    #[test]
    fn schedule_bounds_and_shape(base in 1e-5f64..1.0, ratio in 0.0f64..1.0, warmup in 0u64..50, extra in 1u64..500) {
        let (min, total) = (base * ratio, warmup + extra);
        let s = LrSchedule::new(base, min, warmup, total).unwrap();
        let lrs: Vec<f64> = (0..=total).map(|t| s.lr_at(t).unwrap()).collect();
        prop_assert!(lrs.iter().all(|&l| (0.0..=base * (1.0 + 1e-12)).contains(&l)));
        let w = warmup as usize;
        prop_assert!(lrs[..w.max(1)].windows(2).all(|p| p[1] >= p[0]));
        prop_assert!(lrs[w..].windows(2).all(|p| p[1] <= p[0] + 1e-18));
        prop_assert!((lrs[w] - base).abs() <= 1e-12 * base);
        prop_assert!((lrs[total as usize] - min).abs() <= 1e-12 * base);
    }

    #[test]
    fn decoupled_decay_is_exact(ws in prop::collection::vec(-10.0f32..10.0, 1..40), lr in 1e-6f64..1e-1, wd in 0.0f64..0.5) {
        let mut store = ParamStore::new();
        store.insert("w", TensorBlob::new(vec![ws.len()], ws.clone()).unwrap(), true).unwrap();
        let grads = IndexMap::from([("w".to_owned(), TensorBlob::zeros(&[ws.len()]))]);
        let mut state = OptimizerState::new(&store, AdamWConfig { weight_decay: wd, ..Default::default() });
        adamw_step(&mut store, &grads, &mut state, lr).unwrap();
        for (w, got) in ws.iter().zip(store.get("w").unwrap().data()) {
            prop_assert_eq!((*w as f64 * (1.0 - lr * wd)) as f32, *got);
        }
    }

    #[test]
    fn holdout_is_disjoint_and_complete(n in 2usize..500, frac in 0.01f64..0.99, seed: u64) {
        let (train, test) = holdout_split(n, frac, seed).unwrap();
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert!(!test.is_empty() && !train.is_empty());
    }

    #[test]
    fn iou_is_a_fraction(pairs in prop::collection::vec((0usize..5, 0usize..5), 1..200)) {
        let (pred, truth): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        for v in per_class_iou(&pred, &truth, 5).into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let m = mean_iou(&pred, &truth, 5);
        prop_assert!((0.0..=1.0).contains(&m));
        prop_assert_eq!(mean_iou(&truth, &truth, 5), 1.0);
    }

    #[test]
    fn synthetic_corpus_roundtrips(seed: u64, count in 1usize..24, classes in 2usize..=8) {
        let ds = synth_dataset(seed, count, classes, 16).unwrap();
        let bytes = encode_corpus(&ds.corpus).unwrap();
        let back = decode_corpus(&bytes).unwrap();
        prop_assert_eq!(&back, &ds.corpus);
        prop_assert!(ds.corpus.images.iter().flat_map(|i| i.data()).all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn hog_ignores_constant_offsets(seed: u64, offset in -2.0f32..2.0) {
        let c = ViTConfig { image_size: 16, patch_size: 8, channels: 3, ..ViTConfig::vit_micro() };
        let t = Teacher::hog_like(16, 8, 3, 9, 4).unwrap();
        let img = image(&c, seed);
        let shifted = TensorBlob::new(img.shape().to_vec(), img.data().iter().map(|v| v + offset).collect()).unwrap();
        let (a, b) = (t.extract(&img).unwrap(), t.extract(&shifted).unwrap());
        for (x, y) in a.data.iter().zip(&b.data) {
            prop_assert!((x - y).abs() <= 1e-5);
        }
    }

    #[test]
    fn config_text_roundtrips(seed: u64, steps in 1u64..100_000, lr in 1e-6f64..1.0, seeds in prop::collection::vec(0u64..100, 1..5)) {
        let mut cfg = Config::default();
        cfg.seed = seed;
        cfg.total_steps = steps;
        cfg.base_lr = lr;
        cfg.ablate_seeds = seeds;
        let back = Config::parse(&cfg.serialize()).unwrap();
        prop_assert_eq!(back.digest(), cfg.digest());
        prop_assert_eq!(back, cfg);
    }
}
