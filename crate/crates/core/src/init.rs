//! Parameter initialization.
//!
//! Residual-branch projections start at zero so every block is exactly the
//! identity map; interpolation factors, decays and bonuses follow per-channel
//! ramps that depend on layer depth. The embedding starts tiny and is
//! followed by a LayerNorm, which lets early updates move it quickly.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::blocks::{BlockParams, ChannelMixParams, LayerNormParams, TimeMixParams};
use crate::error::Result;
use crate::model::{Model, ModelConfig, Parameters};
use crate::scalar::Scalar;
use crate::tensor::{Matrix, Vector};
use crate::wkv::WkvParams;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    pub seed: u64,
    /// Half-width of the uniform embedding init.
    pub embed_scale: f64,
    /// Standard deviation of the time-mix output and channel-mix value weights.
    pub gain_out: f64,
    /// Head weights are drawn from `N(0, head_gain / sqrt(dim))`.
    pub head_gain: f64,
}

impl Default for InitSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            embed_scale: 1e-4,
            gain_out: 2.0,
            head_gain: 0.5,
        }
    }
}

impl InitSpec {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }
}

/// `(i / s)^(1 - l/L)` for channel `i` of `s`, layer `l` of `L`.
fn depth_ramp(i: usize, s: usize, layer: usize, layers: usize) -> f64 {
    let exponent = 1.0 - layer as f64 / layers as f64;
    (i as f64 / s as f64).powf(exponent)
}

/// `l / (L - 1)`, or 0 for a single-layer model.
fn depth_fraction(layer: usize, layers: usize) -> f64 {
    if layers <= 1 {
        0.0
    } else {
        layer as f64 / (layers - 1) as f64
    }
}

pub fn mix_k_init(i: usize, s: usize, layer: usize, layers: usize) -> f64 {
    depth_ramp(i, s, layer, layers)
}

pub fn mix_v_init(i: usize, s: usize, layer: usize, layers: usize) -> f64 {
    depth_ramp(i, s, layer, layers) + 0.3 * depth_fraction(layer, layers)
}

pub fn mix_r_init(i: usize, s: usize, layer: usize, layers: usize) -> f64 {
    0.5 * depth_ramp(i, s, layer, layers)
}

/// Stored decay parameter: `-5 + 8 (i / (d-1))^(0.7 + 1.3 l/(L-1))`, with `d`
/// the number of WKV channels.
pub fn decay_init(i: usize, channels: usize, layer: usize, layers: usize) -> f64 {
    let frac = if channels <= 1 {
        0.0
    } else {
        i as f64 / (channels - 1) as f64
    };
    -5.0 + 8.0 * frac.powf(0.7 + 1.3 * depth_fraction(layer, layers))
}

/// Zigzag bonus: `0.5 (((i+1) mod 3) - 1) + ln 0.3`.
pub fn bonus_init(i: usize) -> f64 {
    0.5 * (((i + 1) % 3) as f64 - 1.0) + 0.3f64.ln()
}

fn normal_matrix<T: Scalar, R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Matrix<T> {
    let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
    Matrix::from_fn(rows, cols, |_, _| T::of(dist.sample(rng)))
}

/// Parameters as prescribed for training from scratch.
pub fn init_model<T: Scalar>(cfg: &ModelConfig, spec: &InitSpec) -> Result<Model<T>> {
    cfg.validate()?;
    if !(spec.embed_scale > 0.0) {
        return Err(crate::Error::InvalidConfig("embed_scale must be positive".into()));
    }
    let (d, h, n_layers) = (cfg.dim, cfg.ffn_dim, cfg.layers);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let a = spec.embed_scale;
    let emb = Matrix::from_fn(cfg.vocab, d, |_, _| loop {
        // Open interval (-a, a).
        let x = rng.random_range(-a..a);
        if x != -a {
            break T::of(x);
        }
    });

    let mut blocks = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let vec = |f: &dyn Fn(usize) -> f64| Vector::from_fn(d, |i| T::of(f(i)));
        let att = TimeMixParams {
            receptance: Matrix::zeros(d, d),
            key: Matrix::zeros(d, d),
            value: Matrix::zeros(d, d),
            output: normal_matrix(d, d, spec.gain_out, &mut rng),
            mix_r: vec(&|i| mix_r_init(i, d, l, n_layers)),
            mix_k: vec(&|i| mix_k_init(i, d, l, n_layers)),
            mix_v: vec(&|i| mix_v_init(i, d, l, n_layers)),
            wkv: WkvParams {
                decay: vec(&|i| decay_init(i, d, l, n_layers)),
                bonus: vec(&bonus_init),
            },
        };
        let ffn = ChannelMixParams {
            receptance: Matrix::zeros(d, d),
            key: Matrix::zeros(h, d),
            value: normal_matrix(d, h, spec.gain_out, &mut rng),
            mix_r: vec(&|i| mix_k_init(i, d, l, n_layers)),
            mix_k: vec(&|i| mix_k_init(i, d, l, n_layers)),
        };
        blocks.push(BlockParams {
            ln1: LayerNormParams::unit(d),
            ln2: LayerNormParams::unit(d),
            att,
            ffn,
        });
    }
    let head = normal_matrix(cfg.vocab, d, spec.head_gain / (d as f64).sqrt(), &mut rng);
    Model::new(
        *cfg,
        Parameters {
            emb,
            ln0: LayerNormParams::unit(d),
            blocks,
            ln_out: LayerNormParams::unit(d),
            head,
        },
    )
}

/// Conventional `N(0, 0.02)` embedding, the baseline for the small-init
/// comparison.
pub fn init_embedding_baseline<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Matrix<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    normal_matrix(cfg.vocab, cfg.dim, 0.02, &mut rng)
}

/// A block with every parameter random, for exercising code paths that the
/// zero init would hide.
pub fn random_block<T: Scalar, R: Rng>(d: usize, h: usize, scale: f64, rng: &mut R) -> BlockParams<T> {
    let mut m = |r: usize, c: usize| Matrix::from_fn(r, c, |_, _| T::of(rng.random_range(-scale..scale)));
    let (wr, wk, wv, wo) = (m(d, d), m(d, d), m(d, d), m(d, d));
    let (fr, fk, fv) = (m(d, d), m(h, d), m(d, h));
    let mut v = |lo: f64, hi: f64| Vector::from_fn(d, |_| T::of(rng.random_range(lo..hi)));
    BlockParams {
        ln1: LayerNormParams {
            weight: v(0.5, 1.5),
            bias: v(-0.3, 0.3),
        },
        ln2: LayerNormParams {
            weight: v(0.5, 1.5),
            bias: v(-0.3, 0.3),
        },
        att: TimeMixParams {
            receptance: wr,
            key: wk,
            value: wv,
            output: wo,
            mix_r: v(0.0, 1.0),
            mix_k: v(0.0, 1.0),
            mix_v: v(0.0, 1.0),
            wkv: WkvParams {
                decay: v(-2.0, 1.0),
                bonus: v(-1.0, 1.0),
            },
        },
        ffn: ChannelMixParams {
            receptance: fr,
            key: fk,
            value: fv,
            mix_r: v(0.0, 1.0),
            mix_k: v(0.0, 1.0),
        },
    }
}

/// A model with every parameter random (no zero projections).
pub fn init_random<T: Scalar>(cfg: &ModelConfig, seed: u64, scale: f64) -> Result<Model<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, h) = (cfg.dim, cfg.ffn_dim);
    let emb = Matrix::from_fn(cfg.vocab, d, |_, _| T::of(rng.random_range(-1.0..1.0)));
    let blocks = (0..cfg.layers)
        .map(|_| random_block(d, h, scale, &mut rng))
        .collect();
    let head = Matrix::from_fn(cfg.vocab, d, |_, _| T::of(rng.random_range(-scale..scale)));
    let mut ln = || LayerNormParams {
        weight: Vector::from_fn(d, |_| T::of(rng.random_range(0.5..1.5))),
        bias: Vector::from_fn(d, |_| T::of(rng.random_range(-0.3..0.3))),
    };
    let (ln0, ln_out) = (ln(), ln());
    Model::new(
        *cfg,
        Parameters {
            emb,
            ln0,
            blocks,
            ln_out,
            head,
        },
    )
}
