//! The WKV operator.
//!
//! For one channel with effective decay `w ≥ 0` and bonus `u`, output row `t`
//! is the weighted average
//!
//! ```text
//! wkv_t = (Σ_{i<t} e^{-(t-1-i)w + k_i} v_i + e^{u+k_t} v_t)
//!       / (Σ_{i<t} e^{-(t-1-i)w + k_i}     + e^{u+k_t})
//! ```
//!
//! Numerator and denominator of the prefix sum are stored scaled by a shared
//! exponent `p` (the running maximum of the term exponents), so no `e^{k}` is
//! ever formed directly and any finite key is safe.
//!
//! The stored decay parameter `s` is mapped to the effective decay through
//! `w = exp(s)`, which keeps `w` positive for every real `s`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Matrix, Vector};

#[derive(Clone, Debug, PartialEq)]
pub struct WkvParams<T> {
    /// Stored decay parameter `s`; the effective decay is `exp(s)`.
    pub decay: Vector<T>,
    /// Bonus `u` applied to the current token.
    pub bonus: Vector<T>,
}

impl<T: Scalar> WkvParams<T> {
    pub fn new(decay: Vector<T>, bonus: Vector<T>) -> Result<Self> {
        if decay.len() != bonus.len() {
            return Err(Error::ShapeMismatch {
                op: "WkvParams::new",
                left: (decay.len(), 1),
                right: (bonus.len(), 1),
            });
        }
        Ok(Self { decay, bonus })
    }

    pub fn channels(&self) -> usize {
        self.decay.len()
    }

    /// `w = exp(s)` per channel.
    pub fn effective_decay(&self) -> Vector<T> {
        self.decay.map(|s| s.exp())
    }
}

/// Prefix-sum state of the recurrence: the true numerator is
/// `num · e^{shexp}` and the true denominator `den · e^{shexp}`.
#[derive(Clone, Debug, PartialEq)]
pub struct WkvState<T> {
    pub num: Vector<T>,
    pub den: Vector<T>,
    /// Shared exponent; `-inf` marks the empty prefix.
    pub shexp: Vector<T>,
}

impl<T: Scalar> WkvState<T> {
    /// Empty prefix: `num = den = 0`, `shexp = -inf`.
    pub fn initial(channels: usize) -> Self {
        Self {
            num: Vector::zeros(channels),
            den: Vector::zeros(channels),
            shexp: Vector::filled(channels, T::neg_infinity()),
        }
    }

    pub fn channels(&self) -> usize {
        self.num.len()
    }

    /// Consumes one `(k, v)` row, returning the output for it.
    pub fn advance(&mut self, k: &[T], v: &[T], params: &WkvParams<T>) -> Vector<T> {
        let w = params.effective_decay();
        self.advance_with_decay(k, v, &w, &params.bonus)
    }

    pub(crate) fn advance_with_decay(&mut self, k: &[T], v: &[T], w: &[T], u: &[T]) -> Vector<T> {
        debug_assert_eq!(k.len(), self.channels());
        Vector::from_fn(k.len(), |c| {
            let (y, _) = step_channel(
                &mut self.num[c],
                &mut self.den[c],
                &mut self.shexp[c],
                k[c],
                v[c],
                w[c],
                u[c],
            );
            y
        })
    }
}

/// One stabilized step for a single channel. Returns the output and the log
/// of the full (unscaled) denominator, which the backward pass needs.
#[inline]
fn step_channel<T: Scalar>(
    num: &mut T,
    den: &mut T,
    shexp: &mut T,
    k: T,
    v: T,
    w: T,
    u: T,
) -> (T, T) {
    let p = *shexp;
    let uk = u + k;
    let q = p.max(uk);
    // exp(-inf - q) = 0 reproduces the empty-prefix start.
    let e_prev = (p - q).exp();
    let e_cur = (uk - q).exp();
    let d = e_prev * *den + e_cur;
    let y = (e_prev * *num + e_cur * v) / d;
    let log_den = q + d.ln();

    let q2 = (p - w).max(k);
    let e_prev = (p - w - q2).exp();
    let e_cur = (k - q2).exp();
    *num = e_prev * *num + e_cur * v;
    *den = e_prev * *den + e_cur;
    *shexp = q2;
    (y, log_den)
}

/// One recurrence step as a pure function: `(wkv_t, state')`.
pub fn wkv_step<T: Scalar>(
    state: &WkvState<T>,
    k: &[T],
    v: &[T],
    params: &WkvParams<T>,
) -> (Vector<T>, WkvState<T>) {
    let mut next = state.clone();
    let out = next.advance(k, v, params);
    (out, next)
}

fn check_inputs<T: Scalar>(
    op: &'static str,
    k: &Matrix<T>,
    v: &Matrix<T>,
    params: &WkvParams<T>,
) -> Result<()> {
    if k.shape() != v.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: k.shape(),
            right: v.shape(),
        });
    }
    if k.cols() != params.channels() {
        return Err(Error::ShapeMismatch {
            op,
            left: k.shape(),
            right: (params.channels(), 1),
        });
    }
    if !k.is_finite() || !v.is_finite() || !params.decay.is_finite() || !params.bonus.is_finite() {
        return Err(Error::NonFinite { op });
    }
    Ok(())
}

/// Output rows and per-row log-denominators for a whole `T×d` sequence.
pub(crate) fn wkv_forward_stats<T: Scalar>(
    k: &Matrix<T>,
    v: &Matrix<T>,
    params: &WkvParams<T>,
) -> (Matrix<T>, Matrix<T>) {
    let (rows, d) = k.shape();
    let w = params.effective_decay();
    let u = &params.bonus;
    let mut num = vec![T::zero(); d];
    let mut den = vec![T::zero(); d];
    let mut shexp = vec![T::neg_infinity(); d];
    let mut out = Matrix::zeros(rows, d);
    let mut log_den = Matrix::zeros(rows, d);
    for t in 0..rows {
        let (kr, vr) = (k.row(t), v.row(t));
        for c in 0..d {
            let (y, ld) = step_channel(
                &mut num[c],
                &mut den[c],
                &mut shexp[c],
                kr[c],
                vr[c],
                w[c],
                u[c],
            );
            out.set(t, c, y);
            log_den.set(t, c, ld);
        }
    }
    (out, log_den)
}

/// Evaluates every row of the operator for `K, V: T×d`. Time is scanned
/// in order; channels are independent.
pub fn wkv_parallel<T: Scalar>(
    k: &Matrix<T>,
    v: &Matrix<T>,
    params: &WkvParams<T>,
) -> Result<Matrix<T>> {
    check_inputs("wkv_parallel", k, v, params)?;
    if k.rows() == 0 {
        return Err(Error::InvalidConfig("wkv_parallel needs T >= 1".into()));
    }
    Ok(wkv_forward_stats(k, v, params).0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct WkvGrads<T> {
    pub k: Matrix<T>,
    pub v: Matrix<T>,
    /// Gradient w.r.t. the stored decay parameter `s` (chain rule through `exp`).
    pub decay: Vector<T>,
    pub bonus: Vector<T>,
}

/// Gradients of `Σ_t grad_out_t · wkv_t` with respect to keys, values, the
/// stored decay parameter and the bonus.
///
/// A reverse scan keeps, per channel, the future sums
/// `A_j = Σ_{t>j} e^{-(t-1-j)w} g_t / D_t` (and the `wkv_t`-weighted and
/// lag-weighted variants) scaled by a shared exponent, mirroring the forward
/// stabilization. `e^{k_j} · A_j` is then a sum of terms each bounded by
/// `|g_t|`, so nothing overflows.
pub fn wkv_backward<T: Scalar>(
    k: &Matrix<T>,
    v: &Matrix<T>,
    params: &WkvParams<T>,
    grad_out: &Matrix<T>,
) -> Result<WkvGrads<T>> {
    check_inputs("wkv_backward", k, v, params)?;
    if grad_out.shape() != k.shape() {
        return Err(Error::ShapeMismatch {
            op: "wkv_backward",
            left: k.shape(),
            right: grad_out.shape(),
        });
    }
    let (rows, d) = k.shape();
    let (y, log_den) = wkv_forward_stats(k, v, params);
    let w = params.effective_decay();
    let u = &params.bonus;

    let mut gk = Matrix::zeros(rows, d);
    let mut gv = Matrix::zeros(rows, d);
    let mut g_decay = Vector::zeros(d);
    let mut g_bonus = Vector::zeros(d);

    for c in 0..d {
        let (wc, uc) = (w[c], u[c]);
        // Future sums over t > j, all scaled by e^{r}.
        let mut r = T::neg_infinity();
        let mut acc_g = T::zero();
        let mut acc_gy = T::zero();
        let mut lag_g = T::zero();
        let mut lag_gy = T::zero();
        let mut dw = T::zero();
        let mut du = T::zero();
        for j in (0..rows).rev() {
            let (kj, vj, yj, ldj) = (k.get(j, c), v.get(j, c), y.get(j, c), log_den.get(j, c));
            let gj = grad_out.get(j, c);

            let cur = (uc + kj - ldj).exp() * gj;
            let past = (kj + r).exp();
            gv.set(j, c, cur + past * acc_g);
            let cur_k = cur * (vj - yj);
            gk.set(j, c, cur_k + past * (vj * acc_g - acc_gy));
            du += cur_k;
            dw -= past * (vj * lag_g - lag_gy);

            // Fold row j into the sums for t > j - 1.
            let r_new = (-ldj).max(r - wc);
            let s_old = (r - wc - r_new).exp();
            let s_new = (-ldj - r_new).exp();
            lag_g = s_old * (lag_g + acc_g);
            lag_gy = s_old * (lag_gy + acc_gy);
            acc_g = s_new * gj + s_old * acc_g;
            acc_gy = s_new * gj * yj + s_old * acc_gy;
            r = r_new;
        }
        g_decay[c] = dw * wc;
        g_bonus[c] = du;
    }

    Ok(WkvGrads {
        k: gk,
        v: gv,
        decay: g_decay,
        bonus: g_bonus,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Term-by-term evaluation straight from the definition, no rescaling.
    fn brute_force(k: &Matrix<f64>, v: &Matrix<f64>, p: &WkvParams<f64>) -> Matrix<f64> {
        let w: Vec<f64> = p.decay.iter().map(|s| s.exp()).collect();
        Matrix::from_fn(k.rows(), k.cols(), |t, c| {
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..t {
                let e = (-((t - 1 - i) as f64) * w[c] + k.get(i, c)).exp();
                num += e * v.get(i, c);
                den += e;
            }
            let e = (p.bonus[c] + k.get(t, c)).exp();
            (num + e * v.get(t, c)) / (den + e)
        })
    }

    /// Exact log-sum-exp over the whole prefix for each row.
    fn log_space_prefix(k: &Matrix<f64>, v: &Matrix<f64>, p: &WkvParams<f64>) -> Matrix<f64> {
        let w: Vec<f64> = p.decay.iter().map(|s| s.exp()).collect();
        Matrix::from_fn(k.rows(), k.cols(), |t, c| {
            let ex: Vec<f64> = (0..=t)
                .map(|i| {
                    if i == t {
                        p.bonus[c] + k.get(t, c)
                    } else {
                        -((t - 1 - i) as f64) * w[c] + k.get(i, c)
                    }
                })
                .collect();
            let m = ex.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let (mut num, mut den) = (0.0, 0.0);
            for (i, e) in ex.iter().enumerate() {
                let z = (e - m).exp();
                num += z * v.get(i, c);
                den += z;
            }
            num / den
        })
    }

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Matrix<f64> {
        Matrix::from_fn(r, c, |_, _| rng.random_range(lo..hi))
    }

    fn rand_params(rng: &mut ChaCha8Rng, d: usize) -> WkvParams<f64> {
        WkvParams::new(
            Vector::from_fn(d, |_| rng.random_range(-1.0..1.0)),
            Vector::from_fn(d, |_| rng.random_range(-1.0..1.0)),
        )
        .unwrap()
    }

    fn max_rel(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
        a.as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-300))
            .fold(0.0, f64::max)
    }

    #[test]
    fn single_row_returns_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = rand_mat(&mut rng, 1, 3, -4.0, 4.0);
        let v = rand_mat(&mut rng, 1, 3, -4.0, 4.0);
        let out = wkv_parallel(&k, &v, &rand_params(&mut rng, 3)).unwrap();
        for c in 0..3 {
            assert!((out.get(0, c) - v.get(0, c)).abs() <= 1e-15 * v.get(0, c).abs());
        }
    }

    #[test]
    fn equal_weights_give_plain_average() {
        // w = exp(-inf) = 0, u = 0, k = 0
        let p = WkvParams::new(Vector::from(vec![f64::NEG_INFINITY]), Vector::zeros(1)).unwrap();
        let k = Matrix::zeros(2, 1);
        let v = Matrix::from_vec(2, 1, vec![1.0, 3.0]).unwrap();
        let out = wkv_forward_stats(&k, &v, &p).0;
        assert_eq!(out.get(1, 0), 2.0);
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let k = rand_mat(&mut rng, 4, 2, -1.0, 1.0);
            let v = rand_mat(&mut rng, 4, 2, -1.0, 1.0);
            let p = rand_params(&mut rng, 2);
            let got = wkv_parallel(&k, &v, &p).unwrap();
            assert!(max_rel(&got, &brute_force(&k, &v, &p)) <= 1e-12);
        }
    }

    #[test]
    fn first_step_from_initial_state() {
        let p = WkvParams::new(Vector::from(vec![0.3, -2.0]), Vector::from(vec![0.1, 0.5])).unwrap();
        let s0 = WkvState::initial(2);
        let (y, s1) = wkv_step(&s0, &[1.5, -7.0], &[2.0, -3.0], &p);
        assert_eq!(&*y, &[2.0, -3.0]);
        assert_eq!(&*s1.num, &[2.0, -3.0]);
        assert_eq!(&*s1.den, &[1.0, 1.0]);
        assert_eq!(&*s1.shexp, &[1.5, -7.0]);
    }

    #[test]
    fn extreme_keys_stay_finite() {
        let p = WkvParams::new(Vector::from(vec![-0.5, 1.0]), Vector::from(vec![0.2, -0.3])).unwrap();
        let k = Matrix::from_vec(4, 2, vec![1000.0, -1000.0, -1000.0, 1000.0, 3.0, 999.0, -999.0, 0.0])
            .unwrap();
        let v = Matrix::from_vec(4, 2, vec![1.0, 2.0, -1.0, 0.5, 4.0, -2.0, 0.25, 3.0]).unwrap();
        let mut state = WkvState::initial(2);
        let oracle = log_space_prefix(&k, &v, &p);
        for t in 0..4 {
            let y = state.advance(k.row(t), v.row(t), &p);
            assert!(y.is_finite());
            assert!(state.num.is_finite() && state.den.is_finite() && state.shexp.is_finite());
            for c in 0..2 {
                let e = oracle.get(t, c);
                assert!((y[c] - e).abs() <= 1e-12 * e.abs().max(1.0), "t={t} c={c}");
            }
        }
    }

    #[test]
    fn rollout_equals_parallel() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (t, d) = (256, 5);
        let k = rand_mat(&mut rng, t, d, -3.0, 3.0);
        let v = rand_mat(&mut rng, t, d, -3.0, 3.0);
        let p = rand_params(&mut rng, d);
        let par = wkv_parallel(&k, &v, &p).unwrap();
        let mut state = WkvState::initial(d);
        for r in 0..t {
            let (y, next) = wkv_step(&state, k.row(r), v.row(r), &p);
            state = next;
            for c in 0..d {
                let e = par.get(r, c);
                assert!((y[c] - e).abs() <= 1e-10 * e.abs().max(1e-300));
            }
        }
    }

    #[test]
    fn non_finite_input_rejected() {
        let p = WkvParams::new(Vector::zeros(1), Vector::zeros(1)).unwrap();
        let k = Matrix::from_vec(1, 1, vec![f64::NAN]).unwrap();
        let v = Matrix::zeros(1, 1);
        assert!(matches!(wkv_parallel(&k, &v, &p), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let k = rand_mat(&mut rng, 5, 3, -1.0, 1.0);
        let v = rand_mat(&mut rng, 5, 3, -1.0, 1.0);
        let g = wkv_backward(&k, &v, &rand_params(&mut rng, 3), &Matrix::zeros(5, 3)).unwrap();
        assert!(g.k.as_slice().iter().chain(g.v.as_slice()).all(|&x| x == 0.0));
        assert!(g.decay.iter().chain(g.bonus.iter()).all(|&x| x == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (t, d) = (6, 3);
        let k = rand_mat(&mut rng, t, d, -1.0, 1.0);
        let v = rand_mat(&mut rng, t, d, -1.0, 1.0);
        let p = rand_params(&mut rng, d);
        let g = rand_mat(&mut rng, t, d, -1.0, 1.0);
        let f = |k: &Matrix<f64>, v: &Matrix<f64>, p: &WkvParams<f64>| -> f64 {
            let y = brute_force(k, v, p);
            y.as_slice().iter().zip(g.as_slice()).map(|(a, b)| a * b).sum()
        };
        let grads = wkv_backward(&k, &v, &p, &g).unwrap();
        let h = 1e-5;
        let check = |analytic: f64, plus: f64, minus: f64| {
            let fd = (plus - minus) / (2.0 * h);
            let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-8);
            assert!(rel <= 1e-5, "fd {fd} analytic {analytic}");
        };
        for i in 0..t * d {
            for which in 0..2 {
                let (mut kp, mut km, mut vp, mut vm) = (k.clone(), k.clone(), v.clone(), v.clone());
                let analytic = if which == 0 {
                    kp.as_mut_slice()[i] += h;
                    km.as_mut_slice()[i] -= h;
                    grads.k.as_slice()[i]
                } else {
                    vp.as_mut_slice()[i] += h;
                    vm.as_mut_slice()[i] -= h;
                    grads.v.as_slice()[i]
                };
                check(analytic, f(&kp, &vp, &p), f(&km, &vm, &p));
            }
        }
        for c in 0..d {
            let (mut pp, mut pm) = (p.clone(), p.clone());
            pp.decay[c] += h;
            pm.decay[c] -= h;
            check(grads.decay[c], f(&k, &v, &pp), f(&k, &v, &pm));
            let (mut pp, mut pm) = (p.clone(), p.clone());
            pp.bonus[c] += h;
            pm.bonus[c] -= h;
            check(grads.bonus[c], f(&k, &v, &pp), f(&k, &v, &pm));
        }
    }

    #[test]
    fn value_gradient_is_convex_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (t, d) = (7, 2);
        let k = rand_mat(&mut rng, t, d, -2.0, 2.0);
        let v = rand_mat(&mut rng, t, d, -2.0, 2.0);
        let p = rand_params(&mut rng, d);
        for row in 0..t {
            let mut g = Matrix::zeros(t, d);
            for c in 0..d {
                g.set(row, c, 1.0);
            }
            let grads = wkv_backward(&k, &v, &p, &g).unwrap();
            for c in 0..d {
                let mut sum = 0.0;
                for i in 0..t {
                    let wgt = grads.v.get(i, c);
                    assert!(wgt >= 0.0);
                    if i > row {
                        assert_eq!(wgt, 0.0);
                    }
                    sum += wgt;
                }
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn key_shift_invariance(seed in any::<u64>(), shift in -500.0f64..500.0, chan in 0usize..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = rand_mat(&mut rng, 12, 3, -2.0, 2.0);
            let v = rand_mat(&mut rng, 12, 3, -2.0, 2.0);
            let p = rand_params(&mut rng, 3);
            let mut ks = k.clone();
            for t in 0..12 {
                ks.set(t, chan, k.get(t, chan) + shift);
            }
            let a = wkv_parallel(&k, &v, &p).unwrap();
            let b = wkv_parallel(&ks, &v, &p).unwrap();
            for t in 0..12 {
                for c in 0..3 {
                    let (x, y) = (a.get(t, c), b.get(t, c));
                    prop_assert!((x - y).abs() <= 1e-10 * x.abs().max(y.abs()).max(1e-12));
                }
            }
        }

        #[test]
        fn output_within_value_range(seed in any::<u64>(), scale in 0.1f64..300.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = rand_mat(&mut rng, 20, 2, -scale, scale);
            let v = rand_mat(&mut rng, 20, 2, -5.0, 5.0);
            let p = rand_params(&mut rng, 2);
            let out = wkv_parallel(&k, &v, &p).unwrap();
            for c in 0..2 {
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for t in 0..20 {
                    lo = lo.min(v.get(t, c));
                    hi = hi.max(v.get(t, c));
                    let y = out.get(t, c);
                    prop_assert!(y >= lo - 1e-12 && y <= hi + 1e-12);
                }
            }
        }
    }
}
