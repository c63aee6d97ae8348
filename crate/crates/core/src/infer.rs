//! Token-at-a-time decoding.
//!
//! Each layer carries five vectors of width D: the previous normalized input
//! of the time-mix and channel-mix sub-blocks, and the WKV numerator,
//! denominator and shared exponent. Memory does not grow with sequence length.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::interpolate;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::{matvec, sigmoid, squared_relu, Vector};
use crate::wkv::WkvState;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerState<T> {
    pub tm_prev_x: Vector<T>,
    pub cm_prev_x: Vector<T>,
    pub wkv: WkvState<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceState<T> {
    pub layers: Vec<LayerState<T>>,
}

impl<T: Scalar> InferenceState<T> {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.dim;
        Self {
            layers: (0..cfg.layers)
                .map(|_| LayerState {
                    tm_prev_x: Vector::zeros(d),
                    cm_prev_x: Vector::zeros(d),
                    wkv: WkvState::initial(d),
                })
                .collect(),
        }
    }

    /// Always `5 · D · L`.
    pub fn scalar_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                l.tm_prev_x.len() + l.cm_prev_x.len() + l.wkv.num.len() + l.wkv.den.len() + l.wkv.shexp.len()
            })
            .sum()
    }

    /// Every entry is finite, except shared exponents that are still at the
    /// empty-prefix sentinel.
    pub fn is_well_formed(&self) -> bool {
        self.layers.iter().all(|l| {
            l.tm_prev_x.is_finite()
                && l.cm_prev_x.is_finite()
                && l.wkv.num.is_finite()
                && l.wkv.den.iter().all(|&x| x.is_finite() && x >= T::zero())
                && l.wkv.shexp.iter().all(|&x| x.is_finite() || x == T::neg_infinity())
        })
    }

    /// Copy of the whole recurrent memory.
    pub fn snapshot(&self) -> Self {
        self.clone()
    }

    pub fn restore(&mut self, snapshot: &Self) {
        self.clone_from(snapshot);
    }
}

pub fn init_state<T: Scalar>(cfg: &ModelConfig) -> InferenceState<T> {
    InferenceState::new(cfg)
}

/// Consumes one token and returns the logits for the next one.
pub fn forward_step<T: Scalar>(
    model: &Model<T>,
    token: u32,
    state: &mut InferenceState<T>,
) -> Result<Vector<T>> {
    model.check_token(token)?;
    let p = &model.params;
    let mut x = p.ln0.forward(p.emb.row(token as usize));
    for (b, s) in p.blocks.iter().zip(state.layers.iter_mut()) {
        let att = &b.att;
        let a = b.ln1.forward(&x);
        let xr = interpolate(&a, &s.tm_prev_x, &att.mix_r);
        let xk = interpolate(&a, &s.tm_prev_x, &att.mix_k);
        let xv = interpolate(&a, &s.tm_prev_x, &att.mix_v);
        s.tm_prev_x = a;
        let r = matvec(&att.receptance, &xr)?;
        let k = matvec(&att.key, &xk)?;
        let v = matvec(&att.value, &xv)?;
        let w = att.wkv.effective_decay();
        let wkv = s.wkv.advance_with_decay(&k, &v, &w, &att.wkv.bonus);
        let gated = Vector::from_fn(wkv.len(), |i| sigmoid(r[i]) * wkv[i]);
        let out = matvec(&att.output, &gated)?;
        for (xi, oi) in x.iter_mut().zip(out.iter()) {
            *xi += *oi;
        }

        let ffn = &b.ffn;
        let c = b.ln2.forward(&x);
        let xr = interpolate(&c, &s.cm_prev_x, &ffn.mix_r);
        let xk = interpolate(&c, &s.cm_prev_x, &ffn.mix_k);
        s.cm_prev_x = c;
        let r = matvec(&ffn.receptance, &xr)?;
        let act = matvec(&ffn.key, &xk)?.map(squared_relu);
        let val = matvec(&ffn.value, &act)?;
        for i in 0..x.len() {
            x[i] += sigmoid(r[i]) * val[i];
        }
    }
    let x = p.ln_out.forward(&x);
    matvec(&p.head, &x)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    /// 0 selects greedy decoding.
    pub temperature: f64,
    /// Nucleus mass in (0, 1].
    pub top_p: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_p: 1.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn greedy() -> Self {
        Self {
            temperature: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig("temperature must be >= 0".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::InvalidConfig("top_p must be in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

/// First index of the maximum.
pub fn argmax<T: Scalar>(logits: &[T]) -> u32 {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate() {
        if x > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Temperature 0 is argmax; otherwise nucleus sampling from the
/// temperature-scaled softmax.
pub fn sample<T: Scalar, R: Rng>(logits: &[T], sc: &SamplerConfig, rng: &mut R) -> u32 {
    if sc.temperature == 0.0 {
        return argmax(logits);
    }
    let scaled: Vec<f64> = logits.iter().map(|x| x.f64() / sc.temperature).collect();
    let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<(usize, f64)> = scaled.iter().map(|x| (x - m).exp()).enumerate().collect();
    let z: f64 = probs.iter().map(|p| p.1).sum();
    for p in &mut probs {
        p.1 /= z;
    }
    if sc.top_p < 1.0 {
        // Stable sort keeps lower indices first among ties.
        probs.sort_by(|a, b| b.1.total_cmp(&a.1));
        let mut mass = 0.0;
        let mut keep = probs.len();
        for (n, p) in probs.iter().enumerate() {
            mass += p.1;
            if mass >= sc.top_p {
                keep = n + 1;
                break;
            }
        }
        probs.truncate(keep);
    }
    let total: f64 = probs.iter().map(|p| p.1).sum();
    let mut u = rng.random::<f64>() * total;
    for &(i, p) in &probs {
        if u < p {
            return i as u32;
        }
        u -= p;
    }
    probs.last().map_or(0, |p| p.0 as u32)
}

/// Feeds `prompt` through `state`, then samples `n` bytes, calling `on_byte`
/// as each is produced. Requires a byte-level vocabulary (≤ 256).
pub fn generate_from<T: Scalar>(
    model: &Model<T>,
    state: &mut InferenceState<T>,
    prompt: &[u8],
    n: usize,
    sc: &SamplerConfig,
    mut on_byte: impl FnMut(u8),
) -> Result<Vec<u8>> {
    sc.validate()?;
    if model.config.vocab > 256 {
        return Err(Error::InvalidConfig(format!(
            "byte generation needs vocab <= 256, model has {}",
            model.config.vocab
        )));
    }
    if prompt.is_empty() {
        return Err(Error::InvalidConfig("prompt must contain at least one byte".into()));
    }
    let mut rng = sc.rng();
    let mut logits = Vector::zeros(0);
    for &b in prompt {
        logits = forward_step(model, b as u32, state)?;
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let tok = sample(&logits, sc, &mut rng);
        let byte = tok as u8;
        out.push(byte);
        on_byte(byte);
        if i + 1 < n {
            logits = forward_step(model, tok, state)?;
        }
    }
    Ok(out)
}

pub fn generate<T: Scalar>(
    model: &Model<T>,
    prompt: &[u8],
    n: usize,
    sc: &SamplerConfig,
    on_byte: impl FnMut(u8),
) -> Result<Vec<u8>> {
    let mut state = InferenceState::new(&model.config);
    generate_from(model, &mut state, prompt, n, sc, on_byte)
}
