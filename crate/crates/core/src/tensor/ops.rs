use std::rc::Rc;

use super::{Rng, Tensor};
use crate::error::{Error, Result};

// Raw row-major kernels.

/// c[m,n] = a[m,k] * b[k,n]
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    mm_acc(a, k, 1, b, &mut c, m, k, n);
    c
}

/// c[m,n] += A * b[k,n], where A[i,p] = a[i * ars + p * acs].
///
/// Every output sums over `p` in ascending order with separate multiply and
/// add, so all code paths agree bitwise with the plain triple loop.
#[allow(clippy::too_many_arguments)]
fn mm_acc(a: &[f64], ars: usize, acs: usize, b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked above.
        unsafe { mm_acc_avx2(a, ars, acs, b, c, m, k, n) };
        return;
    }
    mm_tiles::<4, 4>(a, ars, acs, b, c, m, k, n);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
#[allow(clippy::too_many_arguments)]
unsafe fn mm_acc_avx2(a: &[f64], ars: usize, acs: usize, b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    mm_tiles::<4, 4>(a, ars, acs, b, c, m, k, n);
}

/// Register-blocked over `R` x `W` output tiles.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn mm_tiles<const R: usize, const W: usize>(a: &[f64], ars: usize, acs: usize, b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    if k == 0 {
        return;
    }
    let mut pack = vec![0.0; k * R];
    for i in (0..m).step_by(R) {
        let rows = R.min(m - i);
        for p in 0..k {
            for r in 0..R {
                pack[p * R + r] = if r < rows { a[(i + r) * ars + p * acs] } else { 0.0 };
            }
        }
        for j in (0..n).step_by(W) {
            let cols = W.min(n - j);
            let mut acc = [[0.0f64; W]; R];
            for r in 0..rows {
                acc[r][..cols].copy_from_slice(&c[(i + r) * n + j..(i + r) * n + j + cols]);
            }
            if cols == W {
                for (av, brow) in pack.chunks_exact(R).zip(b.chunks_exact(n)) {
                    let bv: &[f64; W] = brow[j..j + W].try_into().unwrap();
                    for r in 0..R {
                        for q in 0..W {
                            acc[r][q] += av[r] * bv[q];
                        }
                    }
                }
            } else {
                for (av, brow) in pack.chunks_exact(R).zip(b.chunks_exact(n)) {
                    for r in 0..R {
                        for q in 0..cols {
                            acc[r][q] += av[r] * brow[j + q];
                        }
                    }
                }
            }
            for r in 0..rows {
                c[(i + r) * n + j..(i + r) * n + j + cols].copy_from_slice(&acc[r][..cols]);
            }
        }
    }
}

/// c[m,n] = a[m,k] * b[n,k]^T
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut bt = vec![0.0; k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b[j * k + p];
        }
    }
    let mut c = vec![0.0; m * n];
    mm_acc(a, k, 1, &bt, &mut c, m, k, n);
    c
}

/// c[m,n] = a[k,m]^T * b[k,n]
fn mm_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    mm_acc(a, 1, m, b, &mut c, m, k, n);
    c
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Splits a shape around `axis` into (outer, axis_len, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn last_dim(t: &Tensor, op: &str) -> Result<usize> {
    t.shape()
        .last()
        .copied()
        .ok_or_else(|| Error::Dimension(format!("{op}: scalar input has no last axis")))
}

fn check_finite(op: &str, v: &[f64]) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("{op}: non-finite input")));
    }
    Ok(())
}

pub(crate) fn erf(x: f64) -> f64 {
    libm::erf(x)
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let v = self
            .values()
            .iter()
            .zip(other.values())
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor::from_op(
            v,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|g| vec![Some(g.to_vec()), Some(g.to_vec())]),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let v = self
            .values()
            .iter()
            .zip(other.values())
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor::from_op(
            v,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|g| vec![Some(g.to_vec()), Some(g.iter().map(|x| -x).collect())]),
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let v = self
            .values()
            .iter()
            .zip(other.values())
            .map(|(a, b)| a * b)
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            v,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let ga = g.iter().zip(b.values()).map(|(g, y)| g * y).collect();
                let gb = g.iter().zip(a.values()).map(|(g, x)| g * x).collect();
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    pub fn scale(&self, s: f64) -> Tensor {
        let v = self.values().iter().map(|x| x * s).collect();
        Tensor::from_op(
            v,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g| vec![Some(g.iter().map(|x| x * s).collect())]),
        )
    }

    pub fn sum(&self) -> Tensor {
        let n = self.numel();
        Tensor::from_op(
            vec![self.values().iter().sum()],
            Vec::new(),
            vec![self.clone()],
            Box::new(move |g| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        let s = self.values().iter().sum::<f64>() / n as f64;
        Tensor::from_op(
            vec![s],
            Vec::new(),
            vec![self.clone()],
            Box::new(move |g| vec![Some(vec![g[0] / n as f64; n])]),
        )
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::Dimension(format!(
                "reshape: cannot view {:?} as {:?}",
                self.shape(),
                shape
            )));
        }
        Ok(Tensor::from_op(
            self.values().to_vec(),
            shape,
            vec![self.clone()],
            Box::new(|g| vec![Some(g.to_vec())]),
        ))
    }

    /// Matrix product of `[M,K]` and `[K,N]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!(
                "matmul: incompatible shapes {sa:?} and {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let v = mm(self.values(), other.values(), m, k, n);
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            v,
            vec![m, n],
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let ga = mm_nt(g, b.values(), m, n, k);
                let gb = mm_tn(a.values(), g, m, k, n);
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    /// Batched matrix product of `[G,M,K]` and `[G,K,N]`.
    pub fn bmm(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::Dimension(format!(
                "bmm: incompatible shapes {sa:?} and {sb:?}"
            )));
        }
        let (gs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut v = Vec::with_capacity(gs * m * n);
        for g in 0..gs {
            let a = &self.values()[g * m * k..(g + 1) * m * k];
            let b = &other.values()[g * k * n..(g + 1) * k * n];
            v.extend(mm(a, b, m, k, n));
        }
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            v,
            vec![gs, m, n],
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let mut ga = Vec::with_capacity(gs * m * k);
                let mut gb = Vec::with_capacity(gs * k * n);
                for i in 0..gs {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let ai = &a.values()[i * m * k..(i + 1) * m * k];
                    let bi = &b.values()[i * k * n..(i + 1) * k * n];
                    ga.extend(mm_nt(gi, bi, m, n, k));
                    gb.extend(mm_tn(ai, gi, m, k, n));
                }
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.shape().len();
        let mut seen = vec![false; rank];
        if axes.len() != rank
            || axes
                .iter()
                .any(|&a| a >= rank || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::Dimension(format!(
                "permute: {axes:?} is not a permutation of {rank} axes"
            )));
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let index = Rc::new(permute_index(&in_shape, axes));
        let v = index.iter().map(|&src| self.values()[src]).collect();
        let idx = Rc::clone(&index);
        Ok(Tensor::from_op(
            v,
            out_shape,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; g.len()];
                for (o, &src) in idx.iter().enumerate() {
                    gx[src] = g[o];
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Result<Tensor> {
        let rank = self.shape().len();
        if rank < 2 {
            return Err(Error::Dimension("transpose_last2: rank < 2".into()));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(&axes)
    }

    /// Adds a `[N]` bias to every row of a `[..., N]` tensor.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let n = last_dim(self, "add_bias")?;
        if bias.shape() != [n] {
            return Err(Error::Dimension(format!(
                "add_bias: bias {:?} does not match last axis of {:?}",
                bias.shape(),
                self.shape()
            )));
        }
        let v = self
            .values()
            .chunks(n)
            .flat_map(|row| row.iter().zip(bias.values()).map(|(x, b)| x + b))
            .collect();
        Ok(Tensor::from_op(
            v,
            self.shape().to_vec(),
            vec![self.clone(), bias.clone()],
            Box::new(move |g| {
                let mut gb = vec![0.0; n];
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                vec![Some(g.to_vec()), Some(gb)]
            }),
        ))
    }

    /// `x W + b` over the last axis: `[..., K] x [K, N] + [N] -> [..., N]`.
    pub fn linear(&self, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let k = last_dim(self, "linear")?;
        let rows = self.numel() / k.max(1);
        if weight.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "linear: weight must be 2-d, got {:?}",
                weight.shape()
            )));
        }
        let n = weight.shape()[1];
        let mut out_shape = self.shape().to_vec();
        *out_shape.last_mut().unwrap() = n;
        self.reshape(vec![rows, k])?
            .matmul(weight)?
            .add_bias(bias)?
            .reshape(out_shape)
    }

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.shape().len() {
            return Err(Error::Dimension(format!(
                "softmax: axis {axis} out of range for {:?}",
                self.shape()
            )));
        }
        check_finite("softmax", self.values())?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let x = self.values();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * len * inner + k * inner + i;
                let max = (0..len).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..len {
                    let e = (x[at(k)] - max).exp();
                    y[at(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    y[at(k)] /= z;
                }
            }
        }
        let out = Rc::new(y.clone());
        Ok(Tensor::from_op(
            y,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * len * inner + k * inner + i;
                        let dot: f64 = (0..len).map(|k| g[at(k)] * out[at(k)]).sum();
                        for k in 0..len {
                            gx[at(k)] = out[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Softmax over the last axis of a `[B, ..., Lk]` tensor where keys with
    /// `keep[b * Lk + k] == false` receive probability exactly zero.
    pub fn masked_softmax(&self, keep: &[bool]) -> Result<Tensor> {
        let lk = last_dim(self, "masked_softmax")?;
        let b = self.shape()[0];
        if keep.len() != b * lk {
            return Err(Error::Dimension(format!(
                "masked_softmax: mask of {} entries for batch {b} x keys {lk}",
                keep.len()
            )));
        }
        check_finite("masked_softmax", self.values())?;
        let rows = self.numel() / lk;
        let rows_per_batch = rows / b;
        let x = self.values();
        let mut y = vec![0.0; x.len()];
        for r in 0..rows {
            let m = &keep[(r / rows_per_batch) * lk..(r / rows_per_batch + 1) * lk];
            let xr = &x[r * lk..(r + 1) * lk];
            let yr = &mut y[r * lk..(r + 1) * lk];
            let max = xr
                .iter()
                .zip(m)
                .filter(|(_, &k)| k)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut z = 0.0;
            for k in 0..lk {
                if m[k] {
                    yr[k] = (xr[k] - max).exp();
                    z += yr[k];
                }
            }
            yr.iter_mut().for_each(|v| *v /= z);
        }
        let out = Rc::new(y.clone());
        Ok(Tensor::from_op(
            y,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; g.len()];
                for r in 0..rows {
                    let gr = &g[r * lk..(r + 1) * lk];
                    let yr = &out[r * lk..(r + 1) * lk];
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for k in 0..lk {
                        gx[r * lk + k] = yr[k] * (gr[k] - dot);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Layer normalization over the last axis with biased variance.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let d = last_dim(self, "layer_norm")?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::Dimension(format!(
                "layer_norm: gamma {:?} / beta {:?} must be [{d}]",
                gamma.shape(),
                beta.shape()
            )));
        }
        if eps <= 0.0 {
            return Err(Error::Parameter(format!(
                "layer_norm: eps must be > 0, got {eps}"
            )));
        }
        let rows = self.numel() / d;
        let mut xhat = vec![0.0; self.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let xr = &self.values()[r * d..(r + 1) * d];
            let mu = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for k in 0..d {
                xhat[r * d + k] = (xr[k] - mu) * is;
            }
        }
        let y = xhat
            .chunks(d)
            .flat_map(|row| {
                row.iter()
                    .zip(gamma.values())
                    .zip(beta.values())
                    .map(|((x, g), b)| x * g + b)
            })
            .collect();
        let gm = gamma.clone();
        Ok(Tensor::from_op(
            y,
            self.shape().to_vec(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; g.len()];
                let mut gg = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let xr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dx = 0.0;
                    let mut mean_dx_x = 0.0;
                    for k in 0..d {
                        let dxh = gr[k] * gm.values()[k];
                        mean_dx += dxh;
                        mean_dx_x += dxh * xr[k];
                        gg[k] += gr[k] * xr[k];
                        gbeta[k] += gr[k];
                    }
                    mean_dx /= d as f64;
                    mean_dx_x /= d as f64;
                    for k in 0..d {
                        let dxh = gr[k] * gm.values()[k];
                        gx[r * d + k] = inv_std[r] * (dxh - mean_dx - xr[k] * mean_dx_x);
                    }
                }
                vec![Some(gx), Some(gg), Some(gbeta)]
            }),
        ))
    }

    /// Gaussian error linear unit, `x * Phi(x)` with the exact error function.
    pub fn gelu(&self) -> Tensor {
        let v = self
            .values()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + erf(x * std::f64::consts::FRAC_1_SQRT_2)))
            .collect();
        let x = self.clone();
        Tensor::from_op(
            v,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g| {
                let inv_sqrt_2pi = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
                let gx = g
                    .iter()
                    .zip(x.values())
                    .map(|(g, &x)| {
                        let cdf = 0.5 * (1.0 + erf(x * std::f64::consts::FRAC_1_SQRT_2));
                        let pdf = inv_sqrt_2pi * (-0.5 * x * x).exp();
                        g * (cdf + x * pdf)
                    })
                    .collect();
                vec![Some(gx)]
            }),
        )
    }

    pub fn tanh(&self) -> Tensor {
        let y: Vec<f64> = self.values().iter().map(|x| x.tanh()).collect();
        let out = Rc::new(y.clone());
        Tensor::from_op(
            y,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g| {
                vec![Some(
                    g.iter()
                        .zip(out.iter())
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect(),
                )]
            }),
        )
    }

    /// Inverted dropout. One uniform draw per element; `rate == 0` is the identity.
    pub fn dropout(&self, rate: f64, rng: &mut Rng) -> Result<Tensor> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!(
                "dropout rate must be in [0,1), got {rate}"
            )));
        }
        if rate == 0.0 {
            return Ok(self.clone());
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Rc<Vec<f64>> = Rc::new(
            (0..self.numel())
                .map(|_| if rng.uniform() >= rate { keep } else { 0.0 })
                .collect(),
        );
        let v = self
            .values()
            .iter()
            .zip(mask.iter())
            .map(|(x, m)| x * m)
            .collect();
        Ok(Tensor::from_op(
            v,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g| {
                vec![Some(
                    g.iter().zip(mask.iter()).map(|(g, m)| g * m).collect(),
                )]
            }),
        ))
    }

    /// Row lookup into a `[V, d]` table; output shape is `ids_shape + [d]`.
    pub fn embedding(&self, ids: &[usize], ids_shape: &[usize]) -> Result<Tensor> {
        if self.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "embedding: table must be 2-d, got {:?}",
                self.shape()
            )));
        }
        if ids_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::Dimension(format!(
                "embedding: {} ids for shape {ids_shape:?}",
                ids.len()
            )));
        }
        let (vocab, d) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Vocabulary {
                id: bad,
                size: vocab,
            });
        }
        let mut v = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            v.extend_from_slice(&self.values()[i * d..(i + 1) * d]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        let ids: Rc<Vec<usize>> = Rc::new(ids.to_vec());
        Ok(Tensor::from_op(
            v,
            shape,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gt = vec![0.0; vocab * d];
                for (r, &i) in ids.iter().enumerate() {
                    gt[i * d..(i + 1) * d]
                        .iter_mut()
                        .zip(&g[r * d..(r + 1) * d])
                        .for_each(|(a, b)| *a += b);
                }
                vec![Some(gt)]
            }),
        ))
    }

    /// Gathers `indices` along `axis`; the output's `axis` has length `indices.len()`.
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "index_select: axis {axis} out of range for {shape:?}"
            )));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(Error::Dimension(format!(
                "index_select: index {bad} out of range for axis of length {len}"
            )));
        }
        let m = indices.len();
        let mut v = Vec::with_capacity(outer * m * inner);
        for o in 0..outer {
            for &i in indices {
                let start = o * len * inner + i * inner;
                v.extend_from_slice(&self.values()[start..start + inner]);
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = m;
        let indices: Rc<Vec<usize>> = Rc::new(indices.to_vec());
        let n = self.numel();
        Ok(Tensor::from_op(
            v,
            out_shape,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; n];
                for o in 0..outer {
                    for (j, &i) in indices.iter().enumerate() {
                        let dst = o * len * inner + i * inner;
                        let src = o * m * inner + j * inner;
                        gx[dst..dst + inner]
                            .iter_mut()
                            .zip(&g[src..src + inner])
                            .for_each(|(a, b)| *a += b);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }
}

/// For each output position (row-major), the flat input offset it reads.
fn permute_index(in_shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n: usize = in_shape.iter().product();
    let mut index = Vec::with_capacity(n);
    let mut counter = vec![0usize; out_shape.len()];
    for _ in 0..n {
        index.push(counter.iter().zip(&src_strides).map(|(c, s)| c * s).sum());
        for ax in (0..counter.len()).rev() {
            counter[ax] += 1;
            if counter[ax] < out_shape[ax] {
                break;
            }
            counter[ax] = 0;
        }
    }
    index
}

/// Mean over the batch of `-sum_k target_k * log softmax(logits)_k`.
///
/// `target` is a `[B, K]` row-major matrix of probability rows.
pub fn cross_entropy_soft(logits: &Tensor, target: &[f64]) -> Result<Tensor> {
    let s = logits.shape();
    if s.len() != 2 {
        return Err(Error::Dimension(format!(
            "cross_entropy_soft: logits must be [B,K], got {s:?}"
        )));
    }
    let (b, k) = (s[0], s[1]);
    if target.len() != b * k {
        return Err(Error::Dimension(format!(
            "cross_entropy_soft: target has {} entries for logits {s:?}",
            target.len()
        )));
    }
    for (r, row) in target.chunks(k).enumerate() {
        if row.iter().any(|&t| !(0.0..=1.0).contains(&t)) {
            return Err(Error::Validation(format!(
                "target row {r} has entries outside [0,1]"
            )));
        }
        let total: f64 = row.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!(
                "target row {r} sums to {total}, not 1"
            )));
        }
    }
    check_finite("cross_entropy_soft", logits.values())?;
    let mut probs = vec![0.0; b * k];
    let mut loss = 0.0;
    for r in 0..b {
        let row = &logits.values()[r * k..(r + 1) * k];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        for c in 0..k {
            let logp = row[c] - lse;
            probs[r * k + c] = logp.exp();
            let t = target[r * k + c];
            if t != 0.0 {
                loss -= t * logp;
            }
        }
    }
    loss /= b as f64;
    let target = target.to_vec();
    Ok(Tensor::from_op(
        vec![loss],
        Vec::new(),
        vec![logits.clone()],
        Box::new(move |g| {
            let scale = g[0] / b as f64;
            vec![Some(
                probs
                    .iter()
                    .zip(&target)
                    .map(|(p, t)| (p - t) * scale)
                    .collect(),
            )]
        }),
    ))
}
