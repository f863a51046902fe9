mod common;

use common::*;
use l2d_core::base_lm::BaseLm;
use l2d_core::diffusion_path::{build_vocab, DiffusionPath, GateShape, InitMode, KvSource, PathConfig, PathQuery};
use l2d_core::numerics::Tensor;
use l2d_core::params::ParamRole;
use l2d_core::L2dError;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand_x(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::<f64>::randn(&[dim], 3.0, &mut rng).into_vec()
}

#[test]
fn vocab_rows_have_fixed_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let emb = Tensor::<f64>::randn(&[50, 32], 1.0, &mut rng);
    let w = Tensor::<f64>::randn(&[32, 256], 0.1, &mut rng);
    let v = build_vocab(&emb, &w).unwrap();
    assert!(v.norms().iter().all(|n| (n - 16.0).abs() < 1e-5));

    let scaled = Tensor::from_fn(&[32, 256], |i| w.data()[i] * 10.0);
    let v10 = build_vocab(&emb, &scaled).unwrap();
    assert!(v.table().max_abs_diff(v10.table()) < 1e-12);
}

#[test]
fn vocab_normalization_is_idempotent() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let raw = Tensor::<f64>::randn(&[6, 4], 1.0, &mut rng);
    let normed = build_vocab(&raw, &Tensor::from_fn(&[4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 })).unwrap();
    let again = build_vocab(
        normed.table(),
        &Tensor::from_fn(&[4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 }),
    )
    .unwrap();
    assert!(normed.table().max_abs_diff(again.table()) < 1e-12);
}

#[test]
fn degenerate_projection_is_an_error() {
    let emb = Tensor::<f64>::full(&[3, 4], 1.0);
    let w = Tensor::<f64>::zeros(&[4, 2]);
    assert!(matches!(
        build_vocab(&emb, &w),
        Err(L2dError::DegenerateProjection { token: 0, .. })
    ));
}

#[test]
fn init_requires_frozen_base_and_positive_rank() {
    let base = BaseLm::<f64>::init(tiny_base_config(), 0).unwrap();
    assert!(matches!(
        DiffusionPath::init_from_main(&base, tiny_path_config(), 0),
        Err(L2dError::Contract(_))
    ));
    let base = random_base::<f64>(tiny_base_config(), 0);
    let cfg = PathConfig {
        lora_rank: 0,
        ..tiny_path_config()
    };
    assert!(matches!(
        DiffusionPath::init_from_main(&base, cfg, 0),
        Err(L2dError::Config(_))
    ));
}

#[test]
fn lora_init_copies_main_weights_exactly() {
    let base = random_base::<f64>(tiny_base_config(), 3);
    let path = DiffusionPath::init_from_main(&base, tiny_path_config(), 4).unwrap();
    let mut copies = 0;
    for (name, p) in path.params().iter() {
        match p.role {
            ParamRole::FrozenCopy => {
                let src = name.strip_prefix("final.").unwrap_or(name);
                assert_eq!(p.value.data(), base.params().tensor(src).data(), "{name}");
                assert!(!p.trainable);
                copies += 1;
            }
            ParamRole::Lora if name.ends_with("lora_b") => {
                assert!(p.value.data().iter().all(|&v| v == 0.0));
            }
            _ => {}
        }
    }
    assert_eq!(copies, 2 * 8 + 2);

    let scratch = DiffusionPath::init_from_main(
        &base,
        PathConfig {
            init_mode: InitMode::Scratch,
            ..tiny_path_config()
        },
        4,
    )
    .unwrap();
    let wq = "blocks.0.attn.wq";
    assert_ne!(scratch.params().tensor(wq).data(), base.params().tensor(wq).data());
}

#[test]
fn full_and_lora_modes_agree_at_initialization() {
    let base = random_base::<f64>(tiny_base_config(), 5);
    let (_, cache) = base.forward_sequence(&[1, 2, 3, 4]).unwrap();
    let lora = DiffusionPath::init_from_main(&base, tiny_path_config(), 6).unwrap();
    let full = DiffusionPath::init_from_main(
        &base,
        PathConfig {
            init_mode: InitMode::Full,
            ..tiny_path_config()
        },
        6,
    )
    .unwrap();
    // give the zero-initialized nets some output so the blocks matter
    let mut lora = lora;
    let mut full = full;
    for name in ["cond.w2", "gate.w2"] {
        let v = Tensor::from_fn(lora.params().tensor(name).shape(), |i| {
            ((i * 7) % 11) as f64 * 0.05 - 0.25
        });
        lora.params_mut().get_mut(name).unwrap().value = v.clone();
        full.params_mut().get_mut(name).unwrap().value = v;
    }
    let q = PathQuery {
        x: rand_x(8, 1),
        t: 0.6,
        class_id: 1,
        target: 3,
    };
    let a = lora.forward(&base, &cache, std::slice::from_ref(&q)).unwrap();
    let b = full.forward(&base, &cache, &[q]).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-12);
    let trainable_full = full
        .params()
        .iter()
        .filter(|(_, p)| p.role == ParamRole::FrozenCopy && p.trainable)
        .count();
    assert_eq!(trainable_full, 2 * 8 + 2);
}

#[test]
fn output_gate_vanishes_at_zero_for_every_class() {
    let base = random_base::<f64>(tiny_base_config(), 7);
    for shape in [GateShape::Vector, GateShape::Scalar] {
        let cfg = PathConfig {
            gate_shape: shape,
            ..tiny_path_config()
        };
        let path = random_path(&base, cfg, 8);
        for c in 0..=2 {
            let tc = path.time_condition(&base, 0.0, c).unwrap();
            assert!(tc.output_gate.iter().all(|&w| w == 0.0));
            let later = path.time_condition(&base, 0.4, c).unwrap();
            assert!(later.output_gate.iter().any(|&w| w != 0.0));
        }
        let a = path.time_condition(&base, 0.0, 0).unwrap();
        let b = path.time_condition(&base, 0.0, 1).unwrap();
        assert_ne!(a.blocks[0][0], b.blocks[0][0]);
        assert_eq!(a, path.time_condition(&base, 0.0, 0).unwrap());
    }
}

#[test]
fn forward_at_zero_equals_main_path_logits() {
    let base = random_base::<f64>(tiny_base_config(), 9);
    let tokens = [3u32, 1, 4, 1, 5, 2, 6];
    let (logits, cache) = base.forward_sequence(&tokens).unwrap();
    for kv in [KvSource::SameBlock, KvSource::LastBlock] {
        let path = random_path(
            &base,
            PathConfig {
                kv_source: kv,
                ..tiny_path_config()
            },
            10,
        );
        for k in 1..tokens.len() {
            let q = PathQuery {
                x: rand_x(8, k as u64),
                t: 0.0,
                class_id: k % 3,
                target: k,
            };
            let out = path.forward(&base, &cache, &[q]).unwrap();
            let diff = out
                .row(0)
                .iter()
                .zip(logits.row(k - 1))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff <= 1e-12, "target {k}: {diff}");
        }
    }
}

#[test]
fn batched_queries_match_single_queries() {
    let base = random_base::<f64>(tiny_base_config(), 11);
    let (_, cache) = base.forward_sequence(&[1, 2, 3, 4, 5, 6]).unwrap();
    let path = random_path(&base, tiny_path_config(), 12);
    let queries: Vec<PathQuery> = (1..=6)
        .map(|k| PathQuery {
            x: rand_x(8, 100 + k as u64),
            t: k as f64 / 7.0,
            class_id: k % 3,
            target: k,
        })
        .collect();
    let joint = path.forward(&base, &cache, &queries).unwrap();
    for (i, q) in queries.iter().enumerate() {
        let single = path.forward(&base, &cache, std::slice::from_ref(q)).unwrap();
        let diff = single
            .row(0)
            .iter()
            .zip(joint.row(i))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-5, "{diff}");
    }
}

#[test]
fn missing_cache_positions_are_rejected() {
    let base = random_base::<f64>(tiny_base_config(), 13);
    let (_, cache) = base.forward_sequence(&[1, 2]).unwrap();
    let path = random_path(&base, tiny_path_config(), 14);
    for target in [0, 3] {
        let q = PathQuery {
            x: rand_x(8, 0),
            t: 0.5,
            class_id: 0,
            target,
        };
        assert!(matches!(
            path.forward(&base, &cache, &[q]),
            Err(L2dError::MissingCache { .. })
        ));
    }
}

#[test]
fn checkpoint_round_trip_and_base_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("path.ckpt");
    let base = random_base::<f32>(tiny_base_config(), 15);
    let path = random_path(&base, tiny_path_config(), 16);
    path.save(&file).unwrap();
    let back = DiffusionPath::<f32>::load(&file, &base).unwrap();
    assert_eq!(back.params().digest(), path.params().digest());
    assert_eq!(back.config(), path.config());

    let other = random_base::<f32>(tiny_base_config(), 17);
    assert!(matches!(
        DiffusionPath::<f32>::load(&file, &other),
        Err(L2dError::Checkpoint(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// Context at or after the target never reaches the target's logits.
    #[test]
    fn target_logits_ignore_later_context(seed in 0u64..500, k in 1usize..6, tok in 0u32..8, t in 0.0f64..1.0) {
        let base = random_base::<f64>(tiny_base_config(), seed);
        let path = random_path(&base, tiny_path_config(), seed + 1);
        let mut tokens = vec![1u32, 5, 2, 7, 3, 6, 0];
        let q = PathQuery { x: rand_x(8, seed), t, class_id: 1, target: k };
        let (_, cache) = base.forward_sequence(&tokens).unwrap();
        let before = path.forward(&base, &cache, std::slice::from_ref(&q)).unwrap();
        for p in k..tokens.len() {
            tokens[p] = (tokens[p] + tok + 1) % 8;
        }
        let (_, cache) = base.forward_sequence(&tokens).unwrap();
        let after = path.forward(&base, &cache, &[q]).unwrap();
        prop_assert_eq!(before.data(), after.data());
    }

    #[test]
    fn t_zero_identity_holds_for_random_draws(seed in 0u64..500, k in 1usize..7) {
        let base = random_base::<f64>(tiny_base_config(), seed);
        let path = random_path(&base, tiny_path_config(), seed + 7);
        let tokens: Vec<u32> = (0..7).map(|i| ((seed + 3 * i) % 8) as u32).collect();
        let (logits, cache) = base.forward_sequence(&tokens).unwrap();
        let q = PathQuery { x: rand_x(8, seed + 9), t: 0.0, class_id: 2, target: k };
        let out = path.forward(&base, &cache, &[q]).unwrap();
        let diff = out.row(0).iter().zip(logits.row(k - 1)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(diff <= 1e-6);
    }
}
