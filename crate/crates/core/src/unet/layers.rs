//! Layer kernels with hand-written backward passes.
//!
//! Activations are channel-major `[C][B][L]`: row `c` of a `C x (B*L)`
//! matrix holds channel `c` of every sample back to back, which turns a
//! convolution over the whole batch into one matrix product.

use crate::real::{sigmoid, Real};

#[derive(Debug, Clone, PartialEq)]
pub struct Act<F> {
    pub c: usize,
    pub b: usize,
    pub l: usize,
    pub data: Vec<F>,
}

impl<F: Real> Act<F> {
    pub fn zeros(c: usize, b: usize, l: usize) -> Self {
        Self {
            c,
            b,
            l,
            data: vec![F::ZERO; c * b * l],
        }
    }

    #[inline]
    pub fn row(&self, c: usize, b: usize) -> &[F] {
        let start = (c * self.b + b) * self.l;
        &self.data[start..start + self.l]
    }

    #[inline]
    pub fn row_mut(&mut self, c: usize, b: usize) -> &mut [F] {
        let start = (c * self.b + b) * self.l;
        &mut self.data[start..start + self.l]
    }

    pub fn add_assign(&mut self, other: &Act<F>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, &b)| *a += b);
    }

    /// Stacks channels of `self` above channels of `other`.
    pub fn concat(&self, other: &Act<F>) -> Act<F> {
        debug_assert_eq!((self.b, self.l), (other.b, other.l));
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Act {
            c: self.c + other.c,
            b: self.b,
            l: self.l,
            data,
        }
    }

    /// Inverse of [`Act::concat`] for gradients: splits after `first` channels.
    pub fn split(self, first: usize) -> (Act<F>, Act<F>) {
        let n = first * self.b * self.l;
        let mut data = self.data;
        let rest = data.split_off(n);
        (
            Act {
                c: first,
                b: self.b,
                l: self.l,
                data,
            },
            Act {
                c: self.c - first,
                b: self.b,
                l: self.l,
                data: rest,
            },
        )
    }

    /// Per `(b, c)` temporal mean, laid out `[b][c]`.
    pub fn mean_pool(&self) -> Vec<F> {
        let mut out = vec![F::ZERO; self.b * self.c];
        let inv = F::from_f64(1.0 / self.l as f64);
        for c in 0..self.c {
            for b in 0..self.b {
                let s: F = self.row(c, b).iter().copied().sum();
                out[b * self.c + c] = s * inv;
            }
        }
        out
    }
}

/// Geometry of a 1D convolution with `k` taps, stride `stride`, zero padding `k / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_len(&self, l: usize) -> usize {
        let pad = self.k / 2;
        (l + 2 * pad - self.k) / self.stride + 1
    }
}

pub struct ConvCache<F> {
    col: Vec<F>,
    in_l: usize,
}

fn im2col<F: Real>(x: &Act<F>, g: &ConvGeom, out_l: usize) -> Vec<F> {
    let pad = g.k / 2;
    let n = x.b * out_l;
    let mut col = vec![F::ZERO; g.cin * g.k * n];
    for ci in 0..g.cin {
        for kk in 0..g.k {
            let dst_row = &mut col[(ci * g.k + kk) * n..(ci * g.k + kk + 1) * n];
            for b in 0..x.b {
                let src = x.row(ci, b);
                let dst = &mut dst_row[b * out_l..(b + 1) * out_l];
                for (o, d) in dst.iter_mut().enumerate() {
                    let pos = (o * g.stride + kk) as isize - pad as isize;
                    if pos >= 0 && (pos as usize) < x.l {
                        *d = src[pos as usize];
                    }
                }
            }
        }
    }
    col
}

pub fn conv_forward<F: Real>(x: &Act<F>, w: &[F], bias: &[F], g: &ConvGeom) -> (Act<F>, ConvCache<F>) {
    debug_assert_eq!(x.c, g.cin);
    debug_assert_eq!(w.len(), g.cout * g.cin * g.k);
    let out_l = g.out_len(x.l);
    let n = x.b * out_l;
    let col = im2col(x, g, out_l);
    let mut y = Act::zeros(g.cout, x.b, out_l);
    for (co, row) in y.data.chunks_exact_mut(n).enumerate() {
        row.iter_mut().for_each(|v| *v = bias[co]);
    }
    let ck = g.cin * g.k;
    F::gemm(
        g.cout,
        ck,
        n,
        F::ONE,
        w,
        (ck as isize, 1),
        &col,
        (n as isize, 1),
        F::ONE,
        &mut y.data,
        (n as isize, 1),
    );
    (y, ConvCache { col, in_l: x.l })
}

/// Accumulates weight and bias gradients; returns the input gradient when
/// `need_dx` is set.
pub fn conv_backward<F: Real>(
    dy: &Act<F>,
    cache: &ConvCache<F>,
    w: &[F],
    g: &ConvGeom,
    dw: &mut [F],
    db: &mut [F],
    need_dx: bool,
) -> Option<Act<F>> {
    let out_l = dy.l;
    let n = dy.b * out_l;
    let ck = g.cin * g.k;
    F::gemm(
        g.cout,
        n,
        ck,
        F::ONE,
        &dy.data,
        (n as isize, 1),
        &cache.col,
        (1, n as isize),
        F::ONE,
        dw,
        (ck as isize, 1),
    );
    for (co, row) in dy.data.chunks_exact(n).enumerate() {
        db[co] += row.iter().copied().sum();
    }
    if !need_dx {
        return None;
    }
    let mut dcol = vec![F::ZERO; ck * n];
    F::gemm(
        ck,
        g.cout,
        n,
        F::ONE,
        w,
        (1, ck as isize),
        &dy.data,
        (n as isize, 1),
        F::ZERO,
        &mut dcol,
        (n as isize, 1),
    );
    let pad = g.k / 2;
    let mut dx = Act::zeros(g.cin, dy.b, cache.in_l);
    for ci in 0..g.cin {
        for kk in 0..g.k {
            let src_row = &dcol[(ci * g.k + kk) * n..(ci * g.k + kk + 1) * n];
            for b in 0..dy.b {
                let src = &src_row[b * out_l..(b + 1) * out_l];
                let dst = dx.row_mut(ci, b);
                for (o, &v) in src.iter().enumerate() {
                    let pos = (o * g.stride + kk) as isize - pad as isize;
                    if pos >= 0 && (pos as usize) < cache.in_l {
                        dst[pos as usize] += v;
                    }
                }
            }
        }
    }
    Some(dx)
}

pub const NORM_EPS: f64 = 1e-5;

pub struct NormCache<F> {
    xhat: Vec<F>,
    inv_std: Vec<F>,
}

/// Group normalization over `(channels in group) x L` per sample.
pub fn group_norm_forward<F: Real>(
    x: &Act<F>,
    gamma: &[F],
    beta: &[F],
    groups: usize,
) -> (Act<F>, NormCache<F>) {
    let cpg = x.c / groups;
    let count = F::from_f64((cpg * x.l) as f64);
    let eps = F::from_f64(NORM_EPS);
    let mut xhat = vec![F::ZERO; x.data.len()];
    let mut inv_std = vec![F::ZERO; x.b * groups];
    let mut y = Act::zeros(x.c, x.b, x.l);
    for b in 0..x.b {
        for g in 0..groups {
            let chans = g * cpg..(g + 1) * cpg;
            let mut mean = F::ZERO;
            for c in chans.clone() {
                mean += x.row(c, b).iter().copied().sum::<F>();
            }
            mean = mean / count;
            let mut var = F::ZERO;
            for c in chans.clone() {
                var += x.row(c, b).iter().map(|&v| (v - mean) * (v - mean)).sum::<F>();
            }
            var = var / count;
            let inv = F::ONE / (var + eps).sqrt();
            inv_std[b * groups + g] = inv;
            for c in chans {
                let start = (c * x.b + b) * x.l;
                for j in start..start + x.l {
                    let h = (x.data[j] - mean) * inv;
                    xhat[j] = h;
                    y.data[j] = h * gamma[c] + beta[c];
                }
            }
        }
    }
    (y, NormCache { xhat, inv_std })
}

pub fn group_norm_backward<F: Real>(
    dy: &Act<F>,
    cache: &NormCache<F>,
    gamma: &[F],
    groups: usize,
    dgamma: &mut [F],
    dbeta: &mut [F],
) -> Act<F> {
    let cpg = dy.c / groups;
    let count = F::from_f64((cpg * dy.l) as f64);
    let mut dx = Act::zeros(dy.c, dy.b, dy.l);
    for b in 0..dy.b {
        for g in 0..groups {
            let chans = g * cpg..(g + 1) * cpg;
            let mut sum1 = F::ZERO;
            let mut sum2 = F::ZERO;
            for c in chans.clone() {
                let start = (c * dy.b + b) * dy.l;
                let mut dgc = F::ZERO;
                let mut dbc = F::ZERO;
                for j in start..start + dy.l {
                    let d = dy.data[j];
                    let h = cache.xhat[j];
                    dgc += d * h;
                    dbc += d;
                    let dh = d * gamma[c];
                    sum1 += dh;
                    sum2 += dh * h;
                }
                dgamma[c] += dgc;
                dbeta[c] += dbc;
            }
            let inv = cache.inv_std[b * groups + g];
            let scale = inv / count;
            for c in chans {
                let start = (c * dy.b + b) * dy.l;
                for j in start..start + dy.l {
                    let dh = dy.data[j] * gamma[c];
                    dx.data[j] = scale * (count * dh - sum1 - cache.xhat[j] * sum2);
                }
            }
        }
    }
    dx
}

/// `y = h * (1 + scale[b, c]) + shift[b, c]`; `film` is `[b][2C]`, scales first.
pub fn film_forward<F: Real>(h: &Act<F>, film: &[F]) -> Act<F> {
    let mut y = Act::zeros(h.c, h.b, h.l);
    for c in 0..h.c {
        for b in 0..h.b {
            let scale = F::ONE + film[b * 2 * h.c + c];
            let shift = film[b * 2 * h.c + h.c + c];
            let src = h.row(c, b);
            y.row_mut(c, b)
                .iter_mut()
                .zip(src)
                .for_each(|(o, &v)| *o = v * scale + shift);
        }
    }
    y
}

/// Returns `(dh, dfilm)`.
pub fn film_backward<F: Real>(dy: &Act<F>, h: &Act<F>, film: &[F]) -> (Act<F>, Vec<F>) {
    let mut dh = Act::zeros(h.c, h.b, h.l);
    let mut dfilm = vec![F::ZERO; film.len()];
    for c in 0..h.c {
        for b in 0..h.b {
            let scale = F::ONE + film[b * 2 * h.c + c];
            let d = dy.row(c, b);
            let hv = h.row(c, b);
            let mut ds = F::ZERO;
            let mut dt = F::ZERO;
            for ((o, &dv), &x) in dh.row_mut(c, b).iter_mut().zip(d).zip(hv) {
                *o = dv * scale;
                ds += dv * x;
                dt += dv;
            }
            dfilm[b * 2 * h.c + c] = ds;
            dfilm[b * 2 * h.c + h.c + c] = dt;
        }
    }
    (dh, dfilm)
}

#[inline]
pub fn silu<F: Real>(x: F) -> F {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<F: Real>(x: F) -> F {
    let s = sigmoid(x);
    s + x * s * (F::ONE - s)
}

pub fn silu_slice<F: Real>(x: &[F]) -> Vec<F> {
    x.iter().map(|&v| silu(v)).collect()
}

/// `dy * silu'(pre)` in place on `dy`.
pub fn silu_backward_inplace<F: Real>(dy: &mut [F], pre: &[F]) {
    dy.iter_mut().zip(pre).for_each(|(d, &x)| *d *= silu_grad(x));
}

pub fn upsample_forward<F: Real>(x: &Act<F>) -> Act<F> {
    let mut y = Act::zeros(x.c, x.b, 2 * x.l);
    for c in 0..x.c {
        for b in 0..x.b {
            let src = x.row(c, b);
            for (j, o) in y.row_mut(c, b).iter_mut().enumerate() {
                *o = src[j / 2];
            }
        }
    }
    y
}

pub fn upsample_backward<F: Real>(dy: &Act<F>) -> Act<F> {
    let mut dx = Act::zeros(dy.c, dy.b, dy.l / 2);
    for c in 0..dy.c {
        for b in 0..dy.b {
            let src = dy.row(c, b);
            for (j, o) in dx.row_mut(c, b).iter_mut().enumerate() {
                *o = src[2 * j] + src[2 * j + 1];
            }
        }
    }
    dx
}

/// Batched `y = x W^T + b`: `x` is `[batch][din]`, `W` is `[dout][din]`.
pub fn linear_forward<F: Real>(x: &[F], w: &[F], bias: &[F], batch: usize, din: usize, dout: usize) -> Vec<F> {
    let mut y: Vec<F> = (0..batch).flat_map(|_| bias.iter().copied()).collect();
    F::gemm(
        batch,
        din,
        dout,
        F::ONE,
        x,
        (din as isize, 1),
        w,
        (1, din as isize),
        F::ONE,
        &mut y,
        (dout as isize, 1),
    );
    y
}

/// Accumulates `dW`, `db`; returns `dx`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<F: Real>(
    dy: &[F],
    x: &[F],
    w: &[F],
    batch: usize,
    din: usize,
    dout: usize,
    dw: &mut [F],
    db: &mut [F],
) -> Vec<F> {
    F::gemm(
        dout,
        batch,
        din,
        F::ONE,
        dy,
        (1, dout as isize),
        x,
        (din as isize, 1),
        F::ONE,
        dw,
        (din as isize, 1),
    );
    for row in dy.chunks_exact(dout) {
        db.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
    }
    let mut dx = vec![F::ZERO; batch * din];
    F::gemm(
        batch,
        dout,
        din,
        F::ONE,
        dy,
        (dout as isize, 1),
        w,
        (din as isize, 1),
        F::ZERO,
        &mut dx,
        (din as isize, 1),
    );
    dx
}

/// Sinusoidal embedding of an integer step.
pub fn timestep_embedding<F: Real>(t: usize, dim: usize) -> Vec<F> {
    let half = dim / 2;
    let mut out = vec![F::ZERO; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = F::from_f64(arg.sin());
        out[half + i] = F::from_f64(arg.cos());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn act(c: usize, b: usize, l: usize, seed: u64) -> Act<f64> {
        let mut s = seed;
        let data = (0..c * b * l)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Act { c, b, l, data }
    }

    /// Direct sliding-window convolution used as an independent reference.
    fn conv_naive(x: &Act<f64>, w: &[f64], bias: &[f64], g: &ConvGeom) -> Act<f64> {
        let out_l = g.out_len(x.l);
        let pad = (g.k / 2) as isize;
        let mut y = Act::zeros(g.cout, x.b, out_l);
        for co in 0..g.cout {
            for b in 0..x.b {
                for o in 0..out_l {
                    let mut acc = bias[co];
                    for ci in 0..g.cin {
                        for kk in 0..g.k {
                            let pos = (o * g.stride + kk) as isize - pad;
                            if pos >= 0 && (pos as usize) < x.l {
                                acc += w[(co * g.cin + ci) * g.k + kk] * x.row(ci, b)[pos as usize];
                            }
                        }
                    }
                    y.row_mut(co, b)[o] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_evaluation() {
        for (stride, k) in [(1, 3), (2, 3), (1, 1), (1, 5)] {
            let g = ConvGeom { cin: 3, cout: 4, k, stride };
            let x = act(3, 2, 8, 1);
            let w = act(4, 3, k, 2).data;
            let bias = vec![0.1, -0.2, 0.3, 0.0];
            let (y, _) = conv_forward(&x, &w, &bias, &g);
            let reference = conv_naive(&x, &w, &bias, &g);
            assert_eq!((y.c, y.b, y.l), (reference.c, reference.b, reference.l));
            for (a, b) in y.data.iter().zip(&reference.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stride_two_halves_length() {
        let g = ConvGeom { cin: 1, cout: 1, k: 3, stride: 2 };
        assert_eq!(g.out_len(128), 64);
        assert_eq!(g.out_len(16), 8);
    }

    #[test]
    fn upsample_round_trip_of_gradients() {
        let x = act(2, 3, 4, 7);
        let y = upsample_forward(&x);
        assert_eq!(y.l, 8);
        assert_eq!(y.row(1, 2)[5], x.row(1, 2)[2]);
        let back = upsample_backward(&y);
        for (a, b) in back.data.iter().zip(&x.data) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_then_split() {
        let a = act(2, 3, 4, 1);
        let b = act(5, 3, 4, 2);
        let (x, y) = a.concat(&b).split(2);
        assert_eq!(x, a);
        assert_eq!(y, b);
    }

    #[test]
    fn group_norm_output_statistics() {
        let x = act(4, 2, 16, 3);
        let (y, _) = group_norm_forward(&x, &[1.0; 4], &[0.0; 4], 2);
        for b in 0..2 {
            for g in 0..2 {
                let vals: Vec<f64> = (2 * g..2 * g + 2).flat_map(|c| y.row(c, b).to_vec()).collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
                assert!(mean.abs() < 1e-12);
                assert!((var - 1.0).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn mean_pool_matches_direct_sum() {
        let x = act(3, 2, 5, 9);
        let pooled = x.mean_pool();
        for b in 0..2 {
            for c in 0..3 {
                let direct: f64 = (0..5).map(|j| x.data[(c * 2 + b) * 5 + j]).sum::<f64>() / 5.0;
                assert!((pooled[b * 3 + c] - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_matches_naive() {
        let x = act(1, 2, 3, 4).data; // batch 2, din 3
        let w = act(4, 1, 3, 5).data; // dout 4
        let bias = vec![0.5, 0.0, -0.5, 1.0];
        let y = linear_forward(&x, &w, &bias, 2, 3, 4);
        for b in 0..2 {
            for o in 0..4 {
                let direct: f64 = bias[o] + (0..3).map(|i| w[o * 3 + i] * x[b * 3 + i]).sum::<f64>();
                assert!((y[b * 4 + o] - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn silu_derivative_matches_difference_quotient() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.7, 4.0] {
            let h = 1e-6;
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((fd - silu_grad(x)).abs() < 1e-8);
        }
    }
}
