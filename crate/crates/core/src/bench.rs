//! Generation timing, a quadratic-attention baseline decoder and the
//! power-law fitter.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infer::{argmax, forward_step, InferenceState};
use crate::model::{Model, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::{flops, matvec, Matrix, Vector};

pub const CSV_HEADER: &str = "token_index,cumulative_ms,per_token_ms,state_scalars";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub token_index: usize,
    pub cumulative_ms: f64,
    pub per_token_ms: f64,
    /// Scalars held in recurrent state or attention cache after this token.
    pub state_scalars: usize,
    /// Instrumented product flops spent on this token.
    pub flops: u64,
}

/// Something that consumes one token at a time and keeps a memory of the past.
pub trait Decoder {
    /// Returns the next token (greedy).
    fn step(&mut self, token: u32) -> Result<u32>;
    fn state_scalars(&self) -> usize;
}

pub struct RwkvDecoder<'a, T> {
    pub model: &'a Model<T>,
    pub state: InferenceState<T>,
}

impl<'a, T: Scalar> RwkvDecoder<'a, T> {
    pub fn new(model: &'a Model<T>) -> Self {
        Self {
            model,
            state: InferenceState::new(&model.config),
        }
    }
}

impl<T: Scalar> Decoder for RwkvDecoder<'_, T> {
    fn step(&mut self, token: u32) -> Result<u32> {
        let logits = forward_step(self.model, token, &mut self.state)?;
        Ok(argmax(&logits))
    }

    fn state_scalars(&self) -> usize {
        self.state.scalar_count()
    }
}

/// Runs `warmup` untimed steps, then times `n_tokens` greedy steps.
pub fn run_decoder<D: Decoder>(dec: &mut D, n_tokens: usize, warmup: usize) -> Result<Vec<BenchRecord>> {
    let mut token = 0;
    for _ in 0..warmup {
        token = dec.step(token)?;
    }
    let mut out = Vec::with_capacity(n_tokens);
    let mut cumulative = 0.0;
    for i in 0..n_tokens {
        flops::reset();
        let start = Instant::now();
        token = dec.step(token)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        cumulative += ms;
        out.push(BenchRecord {
            token_index: i,
            cumulative_ms: cumulative,
            per_token_ms: ms,
            state_scalars: dec.state_scalars(),
            flops: flops::count(),
        });
    }
    Ok(out)
}

/// Times greedy decoding with the recurrent state.
pub fn bench_generation<T: Scalar>(model: &Model<T>, n_tokens: usize, warmup: usize) -> Result<Vec<BenchRecord>> {
    if n_tokens < 100 {
        return Err(Error::InvalidConfig("benchmark needs at least 100 tokens".into()));
    }
    run_decoder(&mut RwkvDecoder::new(model), n_tokens, warmup)
}

pub const BASELINE_MAX_TOKENS: usize = 4096;

/// Single-head softmax attention with a key/value cache that grows by one
/// row per layer and token. Pre-norm is omitted; weights are random.
pub struct AttentionDecoder<T> {
    dim: usize,
    emb: Matrix<T>,
    layers: Vec<[Matrix<T>; 4]>,
    head: Matrix<T>,
    keys: Vec<Vec<Vector<T>>>,
    values: Vec<Vec<Vector<T>>>,
}

impl<T: Scalar> AttentionDecoder<T> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.dim;
        let a = 1.0 / (d as f64).sqrt();
        let mut m = |r: usize, c: usize| Matrix::from_fn(r, c, |_, _| T::of(rng.random_range(-a..a)));
        let emb = m(cfg.vocab, d);
        let layers = (0..cfg.layers).map(|_| [m(d, d), m(d, d), m(d, d), m(d, d)]).collect();
        let head = m(cfg.vocab, d);
        Ok(Self {
            dim: d,
            emb,
            layers,
            head,
            keys: vec![Vec::new(); cfg.layers],
            values: vec![Vec::new(); cfg.layers],
        })
    }

    /// Cached tokens so far.
    pub fn len(&self) -> usize {
        self.keys.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Softmax attention of one query over all cached keys and values.
pub fn attend<T: Scalar>(q: &[T], keys: &[Vector<T>], values: &[Vector<T>]) -> Vector<T> {
    let d = q.len();
    let scale = T::one() / T::of(d as f64).sqrt();
    let scores: Vec<T> = keys
        .iter()
        .map(|k| q.iter().zip(k.iter()).fold(T::zero(), |s, (&a, &b)| s + a * b) * scale)
        .collect();
    let m = scores.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let weights: Vec<T> = scores.iter().map(|&s| (s - m).exp()).collect();
    let z = weights.iter().fold(T::zero(), |a, &b| a + b);
    let mut out = Vector::zeros(d);
    for (w, v) in weights.iter().zip(values) {
        let w = *w / z;
        for (o, &x) in out.iter_mut().zip(v.iter()) {
            *o += w * x;
        }
    }
    flops::add(4 * (keys.len() * d) as u64);
    out
}

impl<T: Scalar> Decoder for AttentionDecoder<T> {
    fn step(&mut self, token: u32) -> Result<u32> {
        if token as usize >= self.emb.rows() {
            return Err(Error::TokenOutOfRange {
                token,
                vocab: self.emb.rows(),
            });
        }
        if self.len() >= BASELINE_MAX_TOKENS {
            return Err(Error::ContextOverflow {
                len: self.len() + 1,
                ctx_len: BASELINE_MAX_TOKENS,
            });
        }
        let mut x = Vector::from(self.emb.row(token as usize).to_vec());
        for (l, [wq, wk, wv, wo]) in self.layers.iter().enumerate() {
            let q = matvec(wq, &x)?;
            self.keys[l].push(matvec(wk, &x)?);
            self.values[l].push(matvec(wv, &x)?);
            let a = attend(&q, &self.keys[l], &self.values[l]);
            let o = matvec(wo, &a)?;
            for (xi, oi) in x.iter_mut().zip(o.iter()) {
                *xi += *oi;
            }
        }
        Ok(argmax(&matvec(&self.head, &x)?))
    }

    /// `2 · t · D · L`.
    fn state_scalars(&self) -> usize {
        2 * self.len() * self.dim * self.layers.len()
    }
}

pub fn bench_baseline_attention<T: Scalar>(cfg: &ModelConfig, n_tokens: usize) -> Result<Vec<BenchRecord>> {
    if n_tokens > BASELINE_MAX_TOKENS {
        return Err(Error::InvalidConfig(format!(
            "baseline is limited to {BASELINE_MAX_TOKENS} tokens"
        )));
    }
    run_decoder(&mut AttentionDecoder::<T>::new(cfg, 0)?, n_tokens, 0)
}

pub fn write_csv<W: Write>(records: &[BenchRecord], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{},{:.6},{:.6},{}",
            r.token_index, r.cumulative_ms, r.per_token_ms, r.state_scalars
        )?;
    }
    Ok(())
}

/// A gnuplot script drawing cumulative time against token index for each CSV.
pub fn plot_script(csv_paths: &[&str], output_png: &str) -> String {
    let mut s = format!(
        "set datafile separator ','\nset key left top\nset xlabel 'token'\nset ylabel 'cumulative ms'\nset terminal pngcairo size 900,600\nset output '{output_png}'\nplot "
    );
    let series: Vec<String> = csv_paths
        .iter()
        .map(|p| format!("'{p}' using 1:2 skip 1 with lines title '{p}'"))
        .collect();
    s.push_str(&series.join(", \\\n     "));
    s.push('\n');
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares of `y` on `x`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidPoints(format!("{} x values, {} y values", xs.len(), ys.len())));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 {
        return Err(Error::InvalidPoints("all x values are equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 {
        1.0
    } else {
        let mut ss_res = 0.0;
        for (&x, &y) in xs.iter().zip(ys) {
            let e = y - (intercept + slope * x);
            ss_res += e * e;
        }
        (1.0 - ss_res / syy).clamp(0.0, 1.0)
    };
    Ok(LinearFit {
        slope,
        intercept,
        r_squared,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub exponent: f64,
    /// Natural log of the prefactor.
    pub log_intercept: f64,
    pub r_squared: f64,
}

impl PowerLawFit {
    pub fn predict(&self, x: f64) -> f64 {
        (self.log_intercept + self.exponent * x.ln()).exp()
    }
}

/// Least-squares line through `(ln x, ln y)`.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<PowerLawFit> {
    if points.len() < 2 {
        return Err(Error::InvalidPoints(format!("got {} points", points.len())));
    }
    if let Some(p) = points.iter().find(|p| !(p.0 > 0.0 && p.1 > 0.0 && p.0.is_finite() && p.1.is_finite())) {
        return Err(Error::InvalidPoints(format!("({}, {})", p.0, p.1)));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let f = linear_fit(&xs, &ys)?;
    Ok(PowerLawFit {
        exponent: f.slope,
        log_intercept: f.intercept,
        r_squared: f.r_squared,
    })
}
