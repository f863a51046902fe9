#![allow(dead_code)]

use l2d_core::base_lm::{BaseLm, BaseLmConfig, PositionEncoding};
use l2d_core::data::LmSequence;
use l2d_core::diffusion_path::{DiffusionPath, PathConfig};
use l2d_core::numerics::{Scalar, Tensor};
use l2d_core::params::ParamStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_base_config() -> BaseLmConfig {
    BaseLmConfig {
        vocab_size: 8,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        max_seq_len: 16,
        position_encoding: PositionEncoding::Rotary,
        mlp_ratio: 2,
        rope_base: 10_000.0,
    }
}

pub fn tiny_path_config() -> PathConfig {
    PathConfig {
        diffusion_dim: 8,
        time_dim: 8,
        cond_hidden: 8,
        lora_rank: 2,
        lora_alpha: 4.0,
        n_classes: 2,
        sigma: 4.0,
        ..PathConfig::default()
    }
}

/// Overwrites every tensor with N(0, std^2) draws.
pub fn randomize<F: Scalar>(store: &mut ParamStore<F>, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, p) in store.iter_mut() {
        p.value = Tensor::randn(p.value.shape(), std, &mut rng);
    }
}

/// A frozen main path with non-trivial random weights.
pub fn random_base<F: Scalar>(cfg: BaseLmConfig, seed: u64) -> BaseLm<F> {
    let mut base = BaseLm::<F>::init(cfg, seed).unwrap();
    randomize(base.params_mut().unwrap(), 0.5, seed + 1000);
    base.freeze();
    base
}

/// A path whose every parameter, including zero-initialized ones, is random.
pub fn random_path<F: Scalar>(base: &BaseLm<F>, cfg: PathConfig, seed: u64) -> DiffusionPath<F> {
    let mut path = DiffusionPath::init_from_main(base, cfg, seed).unwrap();
    randomize(path.params_mut(), 0.3, seed + 2000);
    path
}

pub fn random_sequences(n: usize, len: usize, vocab: u32, classes: usize, seed: u64) -> Vec<LmSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| LmSequence {
            tokens: (0..len).map(|_| rng.random_range(0..vocab)).collect(),
            target_mask: None,
            class_id: rng.random_range(0..=classes),
        })
        .collect()
}
