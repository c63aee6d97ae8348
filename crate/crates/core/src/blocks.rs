//! Residual block: token shift, time mixing and channel mixing.
//!
//! Wiring is pre-norm: `y = x + time_mix(ln1(x))`, `out = y + channel_mix(ln2(y))`.
//! Each sub-block shifts its own (normalized) input by one position.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{
    layer_norm_backward, layer_norm_rows, matmul, matmul_at, matmul_bt, sigmoid, squared_relu,
    LnCache, Matrix, Vector, LN_EPS,
};
use crate::wkv::{wkv_backward, wkv_forward_stats, WkvParams};

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<T> {
    pub weight: Vector<T>,
    pub bias: Vector<T>,
}

impl<T: Scalar> LayerNormParams<T> {
    /// `weight = 1`, `bias = 0`.
    pub fn unit(d: usize) -> Self {
        Self {
            weight: Vector::filled(d, T::one()),
            bias: Vector::zeros(d),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Vector::zeros(self.weight.len()),
            bias: Vector::zeros(self.bias.len()),
        }
    }

    pub fn forward(&self, x: &[T]) -> Vector<T> {
        crate::tensor::layer_norm(x, &self.weight, &self.bias, T::of(LN_EPS))
    }

    pub(crate) fn forward_rows(&self, x: &Matrix<T>) -> (Matrix<T>, Vec<LnCache<T>>) {
        layer_norm_rows(x, &self.weight, &self.bias, T::of(LN_EPS))
    }

    /// Backward over all rows; parameter gradients accumulate into `grad`.
    pub(crate) fn backward_rows(
        &self,
        dy: &Matrix<T>,
        caches: &[LnCache<T>],
        grad: &mut LayerNormParams<T>,
    ) -> Matrix<T> {
        let mut dx = Matrix::zeros(dy.rows(), dy.cols());
        for (t, cache) in caches.iter().enumerate() {
            let row = layer_norm_backward(dy.row(t), &self.weight, cache, &mut grad.weight, &mut grad.bias);
            dx.row_mut(t).copy_from_slice(&row);
        }
        dx
    }
}

/// Time-mixing weights. Projections are stored `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeMixParams<T> {
    pub receptance: Matrix<T>,
    pub key: Matrix<T>,
    pub value: Matrix<T>,
    pub output: Matrix<T>,
    pub mix_r: Vector<T>,
    pub mix_k: Vector<T>,
    pub mix_v: Vector<T>,
    pub wkv: WkvParams<T>,
}

/// Channel-mixing weights; `key` is `ffn × d` and `value` is `d × ffn`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelMixParams<T> {
    pub receptance: Matrix<T>,
    pub key: Matrix<T>,
    pub value: Matrix<T>,
    pub mix_r: Vector<T>,
    pub mix_k: Vector<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub ln1: LayerNormParams<T>,
    pub ln2: LayerNormParams<T>,
    pub att: TimeMixParams<T>,
    pub ffn: ChannelMixParams<T>,
}

impl<T: Scalar> TimeMixParams<T> {
    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix<T>| Matrix::zeros(m.rows(), m.cols());
        let zv = |v: &Vector<T>| Vector::zeros(v.len());
        Self {
            receptance: z(&self.receptance),
            key: z(&self.key),
            value: z(&self.value),
            output: z(&self.output),
            mix_r: zv(&self.mix_r),
            mix_k: zv(&self.mix_k),
            mix_v: zv(&self.mix_v),
            wkv: WkvParams {
                decay: zv(&self.wkv.decay),
                bonus: zv(&self.wkv.bonus),
            },
        }
    }
}

impl<T: Scalar> ChannelMixParams<T> {
    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix<T>| Matrix::zeros(m.rows(), m.cols());
        Self {
            receptance: z(&self.receptance),
            key: z(&self.key),
            value: z(&self.value),
            mix_r: Vector::zeros(self.mix_r.len()),
            mix_k: Vector::zeros(self.mix_k.len()),
        }
    }
}

impl<T: Scalar> BlockParams<T> {
    pub fn zeros_like(&self) -> Self {
        Self {
            ln1: self.ln1.zeros_like(),
            ln2: self.ln2.zeros_like(),
            att: self.att.zeros_like(),
            ffn: self.ffn.zeros_like(),
        }
    }
}

/// Row `t` of the result is row `t-1` of `x`; row 0 is zero.
pub fn token_shift<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for t in 1..x.rows() {
        out.row_mut(t).copy_from_slice(x.row(t - 1));
    }
    out
}

/// `mu ⊙ x + (1 - mu) ⊙ prev`, one row.
#[inline]
pub(crate) fn interpolate<T: Scalar>(x: &[T], prev: &[T], mu: &[T]) -> Vector<T> {
    Vector::from_fn(x.len(), |i| mu[i] * x[i] + (T::one() - mu[i]) * prev[i])
}

fn interpolate_rows<T: Scalar>(x: &Matrix<T>, prev: &Matrix<T>, mu: &[T]) -> Matrix<T> {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for t in 0..x.rows() {
        out.row_mut(t).copy_from_slice(&interpolate(x.row(t), prev.row(t), mu));
    }
    out
}

/// Splits the gradient of an interpolated input between the current rows
/// (returned) and the shifted rows (added one position earlier into the same
/// result); accumulates the `mu` gradient.
fn interpolate_backward<T: Scalar>(
    d_mixed: &Matrix<T>,
    x: &Matrix<T>,
    shifted: &Matrix<T>,
    mu: &[T],
    d_mu: &mut [T],
    dx: &mut Matrix<T>,
) {
    let rows = x.rows();
    for t in 0..rows {
        let (g, xr, sr) = (d_mixed.row(t), x.row(t), shifted.row(t));
        for i in 0..g.len() {
            d_mu[i] += g[i] * (xr[i] - sr[i]);
        }
        let row = dx.row_mut(t);
        for i in 0..g.len() {
            row[i] += mu[i] * g[i];
        }
        if t > 0 {
            let prev = dx.row_mut(t - 1);
            for i in 0..g.len() {
                prev[i] += (T::one() - mu[i]) * g[i];
            }
        }
    }
}

fn sigmoid_grad_rows<T: Scalar>(d_s: &Matrix<T>, s: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(s.rows(), s.cols());
    for ((o, &g), &sv) in out.as_mut_slice().iter_mut().zip(d_s.as_slice()).zip(s.as_slice()) {
        *o = g * sv * (T::one() - sv);
    }
    out
}

fn hadamard<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    let mut out = a.clone();
    for (o, &y) in out.as_mut_slice().iter_mut().zip(b.as_slice()) {
        *o *= y;
    }
    out
}

fn add_assign<T: Scalar>(acc: &mut Matrix<T>, m: &Matrix<T>) {
    for (a, &b) in acc.as_mut_slice().iter_mut().zip(m.as_slice()) {
        *a += b;
    }
}

#[derive(Clone, Debug)]
pub struct TimeMixCache<T> {
    x: Matrix<T>,
    shifted: Matrix<T>,
    xr: Matrix<T>,
    xk: Matrix<T>,
    xv: Matrix<T>,
    sr: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    wkv: Matrix<T>,
    gated: Matrix<T>,
}

pub fn time_mix_forward<T: Scalar>(x: &Matrix<T>, p: &TimeMixParams<T>) -> Result<Matrix<T>> {
    Ok(time_mix_forward_cached(x, p)?.0)
}

pub fn time_mix_forward_cached<T: Scalar>(
    x: &Matrix<T>,
    p: &TimeMixParams<T>,
) -> Result<(Matrix<T>, TimeMixCache<T>)> {
    let shifted = token_shift(x);
    let xr = interpolate_rows(x, &shifted, &p.mix_r);
    let xk = interpolate_rows(x, &shifted, &p.mix_k);
    let xv = interpolate_rows(x, &shifted, &p.mix_v);
    let sr = matmul_bt(&xr, &p.receptance)?.map(sigmoid);
    let k = matmul_bt(&xk, &p.key)?;
    let v = matmul_bt(&xv, &p.value)?;
    let wkv = wkv_forward_stats(&k, &v, &p.wkv).0;
    let gated = hadamard(&sr, &wkv);
    let out = matmul_bt(&gated, &p.output)?;
    Ok((
        out,
        TimeMixCache {
            x: x.clone(),
            shifted,
            xr,
            xk,
            xv,
            sr,
            k,
            v,
            wkv,
            gated,
        },
    ))
}

/// Returns the input gradient; parameter gradients accumulate into `grad`.
pub fn time_mix_backward<T: Scalar>(
    d_out: &Matrix<T>,
    p: &TimeMixParams<T>,
    c: &TimeMixCache<T>,
    grad: &mut TimeMixParams<T>,
) -> Result<Matrix<T>> {
    add_assign(&mut grad.output, &matmul_at(d_out, &c.gated)?);
    let d_gated = matmul(d_out, &p.output)?;
    let d_sr = hadamard(&d_gated, &c.wkv);
    let d_wkv = hadamard(&d_gated, &c.sr);
    let dr = sigmoid_grad_rows(&d_sr, &c.sr);

    let wg = wkv_backward(&c.k, &c.v, &p.wkv, &d_wkv)?;
    for i in 0..wg.decay.len() {
        grad.wkv.decay[i] += wg.decay[i];
        grad.wkv.bonus[i] += wg.bonus[i];
    }

    add_assign(&mut grad.receptance, &matmul_at(&dr, &c.xr)?);
    add_assign(&mut grad.key, &matmul_at(&wg.k, &c.xk)?);
    add_assign(&mut grad.value, &matmul_at(&wg.v, &c.xv)?);
    let d_xr = matmul(&dr, &p.receptance)?;
    let d_xk = matmul(&wg.k, &p.key)?;
    let d_xv = matmul(&wg.v, &p.value)?;

    let mut dx = Matrix::zeros(c.x.rows(), c.x.cols());
    interpolate_backward(&d_xr, &c.x, &c.shifted, &p.mix_r, &mut grad.mix_r, &mut dx);
    interpolate_backward(&d_xk, &c.x, &c.shifted, &p.mix_k, &mut grad.mix_k, &mut dx);
    interpolate_backward(&d_xv, &c.x, &c.shifted, &p.mix_v, &mut grad.mix_v, &mut dx);
    Ok(dx)
}

#[derive(Clone, Debug)]
pub struct ChannelMixCache<T> {
    x: Matrix<T>,
    shifted: Matrix<T>,
    xr: Matrix<T>,
    xk: Matrix<T>,
    sr: Matrix<T>,
    pre: Matrix<T>,
    act: Matrix<T>,
    val: Matrix<T>,
}

pub fn channel_mix_forward<T: Scalar>(x: &Matrix<T>, p: &ChannelMixParams<T>) -> Result<Matrix<T>> {
    Ok(channel_mix_forward_cached(x, p)?.0)
}

pub fn channel_mix_forward_cached<T: Scalar>(
    x: &Matrix<T>,
    p: &ChannelMixParams<T>,
) -> Result<(Matrix<T>, ChannelMixCache<T>)> {
    let shifted = token_shift(x);
    let xr = interpolate_rows(x, &shifted, &p.mix_r);
    let xk = interpolate_rows(x, &shifted, &p.mix_k);
    let sr = matmul_bt(&xr, &p.receptance)?.map(sigmoid);
    let pre = matmul_bt(&xk, &p.key)?;
    let act = pre.map(squared_relu);
    let val = matmul_bt(&act, &p.value)?;
    let out = hadamard(&sr, &val);
    Ok((
        out,
        ChannelMixCache {
            x: x.clone(),
            shifted,
            xr,
            xk,
            sr,
            pre,
            act,
            val,
        },
    ))
}

pub fn channel_mix_backward<T: Scalar>(
    d_out: &Matrix<T>,
    p: &ChannelMixParams<T>,
    c: &ChannelMixCache<T>,
    grad: &mut ChannelMixParams<T>,
) -> Result<Matrix<T>> {
    let d_sr = hadamard(d_out, &c.val);
    let d_val = hadamard(d_out, &c.sr);
    add_assign(&mut grad.value, &matmul_at(&d_val, &c.act)?);
    let mut d_pre = matmul(&d_val, &p.value)?;
    let two = T::of(2.0);
    for (g, &z) in d_pre.as_mut_slice().iter_mut().zip(c.pre.as_slice()) {
        *g *= two * z.max(T::zero());
    }
    let dr = sigmoid_grad_rows(&d_sr, &c.sr);
    add_assign(&mut grad.key, &matmul_at(&d_pre, &c.xk)?);
    add_assign(&mut grad.receptance, &matmul_at(&dr, &c.xr)?);
    let d_xk = matmul(&d_pre, &p.key)?;
    let d_xr = matmul(&dr, &p.receptance)?;

    let mut dx = Matrix::zeros(c.x.rows(), c.x.cols());
    interpolate_backward(&d_xr, &c.x, &c.shifted, &p.mix_r, &mut grad.mix_r, &mut dx);
    interpolate_backward(&d_xk, &c.x, &c.shifted, &p.mix_k, &mut grad.mix_k, &mut dx);
    Ok(dx)
}

#[derive(Clone, Debug)]
pub struct BlockCache<T> {
    ln1: Vec<LnCache<T>>,
    ln2: Vec<LnCache<T>>,
    att: TimeMixCache<T>,
    ffn: ChannelMixCache<T>,
}

pub fn block_forward<T: Scalar>(x: &Matrix<T>, bp: &BlockParams<T>) -> Result<Matrix<T>> {
    Ok(block_forward_cached(x, bp)?.0)
}

pub fn block_forward_cached<T: Scalar>(
    x: &Matrix<T>,
    bp: &BlockParams<T>,
) -> Result<(Matrix<T>, BlockCache<T>)> {
    let (a, ln1) = bp.ln1.forward_rows(x);
    let (tm, att) = time_mix_forward_cached(&a, &bp.att)?;
    let mut y = x.clone();
    add_assign(&mut y, &tm);
    let (b, ln2) = bp.ln2.forward_rows(&y);
    let (cm, ffn) = channel_mix_forward_cached(&b, &bp.ffn)?;
    add_assign(&mut y, &cm);
    Ok((y, BlockCache { ln1, ln2, att, ffn }))
}

pub fn block_backward<T: Scalar>(
    d_out: &Matrix<T>,
    bp: &BlockParams<T>,
    c: &BlockCache<T>,
    grad: &mut BlockParams<T>,
) -> Result<Matrix<T>> {
    let d_b = channel_mix_backward(d_out, &bp.ffn, &c.ffn, &mut grad.ffn)?;
    let mut d_y = bp.ln2.backward_rows(&d_b, &c.ln2, &mut grad.ln2);
    add_assign(&mut d_y, d_out);
    let d_a = time_mix_backward(&d_y, &bp.att, &c.att, &mut grad.att)?;
    let mut d_x = bp.ln1.backward_rows(&d_a, &c.ln1, &mut grad.ln1);
    add_assign(&mut d_x, &d_y);
    Ok(d_x)
}
