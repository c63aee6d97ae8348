//! Quick invariant suites, run by `rwkv selftest`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::infer::{forward_step, generate, InferenceState, SamplerConfig};
use crate::init::{init_model, init_random, InitSpec};
use crate::model::{Model, ModelConfig};
use crate::tensor::{Matrix, Vector};
use crate::train::{backward, loss};
use crate::weights::{from_bytes, to_bytes};
use crate::wkv::{wkv_parallel, WkvParams};

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn suite(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> SuiteResult {
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    SuiteResult { name, passed, detail }
}

fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-300);
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

fn random_tokens(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> Vec<u32> {
    (0..n).map(|_| rng.random_range(0..vocab as u32)).collect()
}

fn mode_equivalence() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for case in 0..20 {
        let (vocab, dim, layers) = (rng.random_range(2..32), rng.random_range(1..16), rng.random_range(1..3));
        let cfg = ModelConfig::new(vocab, dim, layers, 64);
        let m = init_random::<f64>(&cfg, case, 0.5)?;
        let len = rng.random_range(1..64);
        let tokens = random_tokens(&mut rng, len, cfg.vocab);
        let par = m.forward_parallel(&tokens)?;
        let mut s = InferenceState::new(&cfg);
        for (t, &tok) in tokens.iter().enumerate() {
            worst = worst.max(max_rel_err(&forward_step(&m, tok, &mut s)?, par.row(t)));
        }
    }
    Ok((worst <= 1e-10, format!("max rel err {worst:.2e}")))
}

fn wkv_brute_force(k: &Matrix<f64>, v: &Matrix<f64>, p: &WkvParams<f64>) -> Matrix<f64> {
    let w = p.effective_decay();
    Matrix::from_fn(k.rows(), k.cols(), |t, i| {
        let (mut num, mut den) = (0.0, 0.0);
        for j in 0..t {
            let e = (-((t - 1 - j) as f64) * w[i] + k.get(j, i)).exp();
            num += e * v.get(j, i);
            den += e;
        }
        let e = (p.bonus[i] + k.get(t, i)).exp();
        (num + e * v.get(t, i)) / (den + e)
    })
}

fn wkv_oracle() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (t, d) = (rng.random_range(1..12), rng.random_range(1..6));
        let k = Matrix::from_fn(t, d, |_, _| rng.random_range(-3.0..3.0));
        let v = Matrix::from_fn(t, d, |_, _| rng.random_range(-3.0..3.0));
        let p = WkvParams::new(
            Vector::from_fn(d, |_| rng.random_range(-3.0..1.0)),
            Vector::from_fn(d, |_| rng.random_range(-2.0..2.0)),
        )?;
        let got = wkv_parallel(&k, &v, &p)?;
        worst = worst.max(max_rel_err(got.as_slice(), wkv_brute_force(&k, &v, &p).as_slice()));
    }
    Ok((worst <= 1e-12, format!("max rel err {worst:.2e}")))
}

fn stability() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (t, d) = (1024, 4);
    let mags = [10.0, 100.0, 1000.0];
    let k = Matrix::<f64>::from_fn(t, d, |_, _| {
        let m = mags[rng.random_range(0..3)];
        if rng.random::<bool>() { m } else { -m }
    });
    let v = Matrix::<f64>::from_fn(t, d, |_, _| rng.random_range(-1.0..1.0));
    let p = WkvParams::new(Vector::filled(d, -1.0), Vector::filled(d, 0.5))?;
    let out = wkv_parallel(&k, &v, &p)?;
    let ok = out.as_slice().iter().all(|x| x.is_finite() && x.abs() <= 1.0 + 1e-12);
    Ok((ok, format!("{t} steps, |k| up to 1000")))
}

fn gradients() -> Result<(bool, String)> {
    let cfg = ModelConfig::new(8, 4, 1, 16);
    let m = init_random::<f64>(&cfg, 14, 0.5)?;
    let row: Vec<u32> = (0..9).map(|i| (i * 3 + 1) % 8).collect();
    let (_, g) = backward(&m, std::slice::from_ref(&row), 1e-3)?;
    let f = |m: &Model<f64>| -> Result<f64> {
        let logits = m.forward_parallel(&row[..row.len() - 1])?;
        Ok(loss(&logits, &row[1..], 1e-3)?.total)
    };
    let h = 1e-5;
    let mut worst = 0.0f64;
    let n = g.tensors().len();
    for ti in 0..n {
        let analytic = g.tensors()[ti].data[0];
        let (mut mp, mut mm) = (m.clone(), m.clone());
        mp.params.tensors_mut()[ti].data[0] += h;
        mm.params.tensors_mut()[ti].data[0] -= h;
        let fd = (f(&mp)? - f(&mm)?) / (2.0 * h);
        worst = worst.max((analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6));
    }
    Ok((worst <= 1e-4, format!("{n} tensors, max rel err {worst:.2e}")))
}

fn identity_at_init() -> Result<(bool, String)> {
    let cfg = ModelConfig::byte_level(16, 3, 32);
    let m = init_model::<f64>(&cfg, &InitSpec::with_seed(15))?;
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = Matrix::from_fn(20, 16, |_, _| rng.random_range(-2.0..2.0));
    let mut worst = 0.0f64;
    for b in &m.params.blocks {
        let y = crate::blocks::block_forward(&x, b)?;
        for (a, b) in y.as_slice().iter().zip(x.as_slice()) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok((worst == 0.0, format!("max abs deviation {worst:e}")))
}

fn state_and_generation() -> Result<(bool, String)> {
    let cfg = ModelConfig::byte_level(8, 2, 64);
    let m = init_random::<f64>(&cfg, 16, 0.5)?;
    let mut s = InferenceState::new(&cfg);
    let mut ok = s.scalar_count() == 5 * 8 * 2;
    for i in 0..300 {
        forward_step(&m, (i * 31 % 256) as u32, &mut s)?;
        ok &= s.scalar_count() == 80 && s.is_well_formed();
    }
    let sc = SamplerConfig::greedy();
    ok &= generate(&m, b"ab", 16, &sc, |_| {})? == generate(&m, b"ab", 16, &sc, |_| {})?;
    Ok((ok, "5DL scalars, 300 steps, greedy replay".into()))
}

fn serialization() -> Result<(bool, String)> {
    let m = init_random::<f64>(&ModelConfig::new(12, 4, 2, 16), 17, 0.5)?;
    let back: Model<f64> = from_bytes(&to_bytes(&m))?;
    Ok((back == m, "bit-exact round trip".into()))
}

/// Runs every suite; the overall check passes when all of them do.
pub fn run_all() -> Vec<SuiteResult> {
    vec![
        suite("mode-equivalence", mode_equivalence),
        suite("wkv-oracle", wkv_oracle),
        suite("stability", stability),
        suite("gradients", gradients),
        suite("identity-at-init", identity_at_init),
        suite("state-and-generation", state_and_generation),
        suite("serialization", serialization),
    ]
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_suites_pass() {
        for r in super::run_all() {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }
}
