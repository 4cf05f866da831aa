//! Layer kernels with explicit forward and backward passes.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::spec::pool_factors;
use crate::error::{Error, Result};
use crate::volume::Dims;

/// Multi-channel activation: `channels` planes, each laid out like a volume.
#[derive(Clone, Debug, PartialEq)]
pub struct Act {
    pub channels: usize,
    pub dims: Dims,
    pub data: Vec<f64>,
}

impl Act {
    pub fn zeros(channels: usize, dims: Dims) -> Self {
        Act {
            channels,
            dims,
            data: vec![0.0; channels * dims.len()],
        }
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.dims.len();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.dims.len();
        &mut self.data[c * n..(c + 1) * n]
    }
}

pub(crate) fn he_normal<R: Rng>(rng: &mut R, n: usize, fan_in: usize, gain: f64) -> Vec<f64> {
    let std = gain * (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| normal.sample(rng)).collect()
}

/// Same-padded 3×3×3 convolution, stride 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv3d {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[out][in][kz][ky][kx]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Overlap of an axis of length `n` with itself shifted by `delta`:
/// output positions `lo..hi` read input positions `lo + delta..hi + delta`.
#[inline]
fn valid_range(n: usize, delta: isize) -> (usize, usize) {
    let lo = (-delta).max(0) as usize;
    let hi = (n as isize - delta).min(n as isize).max(0) as usize;
    (lo, hi.max(lo))
}

impl Conv3d {
    pub fn new<R: Rng>(in_channels: usize, out_channels: usize, gain: f64, rng: &mut R) -> Self {
        Conv3d {
            in_channels,
            out_channels,
            weight: he_normal(rng, out_channels * in_channels * 27, in_channels * 27, gain),
            bias: vec![0.0; out_channels],
        }
    }

    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        Conv3d {
            in_channels,
            out_channels,
            weight: vec![0.0; out_channels * in_channels * 27],
            bias: vec![0.0; out_channels],
        }
    }

    #[inline]
    fn w_index(&self, oc: usize, ic: usize, k: usize) -> usize {
        (oc * self.in_channels + ic) * 27 + k
    }

    pub fn forward(&self, x: &Act) -> Act {
        debug_assert_eq!(x.channels, self.in_channels);
        let dims = x.dims;
        let (w, h, d) = (dims.w(), dims.h(), dims.d());
        let mut out = Act::zeros(self.out_channels, dims);
        for oc in 0..self.out_channels {
            let o = out.plane_mut(oc);
            o.fill(self.bias[oc]);
            for ic in 0..self.in_channels {
                let inp = x.plane(ic);
                for k in 0..27 {
                    let wt = self.weight[self.w_index(oc, ic, k)];
                    let (dz, dy, dx) = (k as isize / 9 - 1, (k as isize / 3) % 3 - 1, k as isize % 3 - 1);
                    let (z0, z1) = valid_range(d, dz);
                    let (y0, y1) = valid_range(h, dy);
                    let (x0, x1) = valid_range(w, dx);
                    for z in z0..z1 {
                        let zs = (z as isize + dz) as usize;
                        for y in y0..y1 {
                            let ys = (y as isize + dy) as usize;
                            let ob = (z * h + y) * w;
                            let ib = (zs * h + ys) * w;
                            let src = &inp[(ib + x0).wrapping_add_signed(dx)..(ib + x1).wrapping_add_signed(dx)];
                            for (a, &b) in o[ob + x0..ob + x1].iter_mut().zip(src) {
                                *a += wt * b;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients into `dw`/`db` and returns the input
    /// gradient.
    pub fn backward(&self, x: &Act, dy: &Act, dw: &mut [f64], db: &mut [f64]) -> Act {
        let dims = x.dims;
        let (w, h, d) = (dims.w(), dims.h(), dims.d());
        let mut dx = Act::zeros(self.in_channels, dims);
        for oc in 0..self.out_channels {
            let g = dy.plane(oc);
            db[oc] += g.iter().sum::<f64>();
            for ic in 0..self.in_channels {
                let inp = x.plane(ic);
                let base = ic * dims.len();
                for k in 0..27 {
                    let wi = self.w_index(oc, ic, k);
                    let wt = self.weight[wi];
                    let (dz, dyy, dxx) = (k as isize / 9 - 1, (k as isize / 3) % 3 - 1, k as isize % 3 - 1);
                    let (z0, z1) = valid_range(d, dz);
                    let (y0, y1) = valid_range(h, dyy);
                    let (x0, x1) = valid_range(w, dxx);
                    let mut acc = 0.0;
                    for z in z0..z1 {
                        let zs = (z as isize + dz) as usize;
                        for y in y0..y1 {
                            let ys = (y as isize + dyy) as usize;
                            let ob = (z * h + y) * w;
                            let ib = (zs * h + ys) * w;
                            let lo = (ib + x0).wrapping_add_signed(dxx);
                            let hi = (ib + x1).wrapping_add_signed(dxx);
                            let gs = &g[ob + x0..ob + x1];
                            acc += gs.iter().zip(&inp[lo..hi]).map(|(a, b)| a * b).sum::<f64>();
                            for (t, &gv) in dx.data[base + lo..base + hi].iter_mut().zip(gs) {
                                *t += wt * gv;
                            }
                        }
                    }
                    dw[wi] += acc;
                }
            }
        }
        dx
    }
}

pub fn relu_inplace(a: &mut Act) {
    for v in &mut a.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Max pooling with per-axis factors; records the winning input index of
/// every output voxel.
pub fn maxpool_forward(x: &Act, pool: usize) -> (Act, Vec<usize>) {
    let k = pool_factors(x.dims, pool);
    let od = Dims([x.dims.w() / k[0], x.dims.h() / k[1], x.dims.d() / k[2]]);
    let mut out = Act::zeros(x.channels, od);
    let mut argmax = vec![0usize; x.channels * od.len()];
    if k == [1, 1, 1] {
        out.data.copy_from_slice(&x.data);
        for (i, a) in argmax.iter_mut().enumerate() {
            *a = i;
        }
        return (out, argmax);
    }
    let n_in = x.dims.len();
    for c in 0..x.channels {
        let inp = x.plane(c);
        for oz in 0..od.d() {
            for oy in 0..od.h() {
                for ox in 0..od.w() {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for kz in 0..k[2] {
                        for ky in 0..k[1] {
                            for kx in 0..k[0] {
                                let i = x.dims.index(ox * k[0] + kx, oy * k[1] + ky, oz * k[2] + kz);
                                if inp[i] > best {
                                    best = inp[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    let o = c * od.len() + od.index(ox, oy, oz);
                    out.data[o] = best;
                    argmax[o] = c * n_in + best_i;
                }
            }
        }
    }
    (out, argmax)
}

pub fn maxpool_backward(dy: &Act, argmax: &[usize], in_channels: usize, in_dims: Dims) -> Act {
    let mut dx = Act::zeros(in_channels, in_dims);
    for (g, &i) in dy.data.iter().zip(argmax) {
        dx.data[i] += g;
    }
    dx
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

/// Saved state of a training-mode batch-norm forward.
pub struct BnBatchCache {
    pub xhat: Vec<Act>,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var_unbiased: Vec<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Inference mode: an affine map per channel from running statistics.
    pub fn forward_infer(&self, x: &Act) -> Act {
        let mut out = x.clone();
        for c in 0..self.channels() {
            let s = self.gamma[c] / (self.running_var[c] + BN_EPS).sqrt();
            let m = self.running_mean[c];
            let b = self.beta[c];
            for v in out.plane_mut(c) {
                *v = s * (*v - m) + b;
            }
        }
        out
    }

    pub fn backward_infer(&self, dy: &Act, dgamma: &mut [f64], dbeta: &mut [f64], x: &Act) -> Act {
        let mut dx = dy.clone();
        for c in 0..self.channels() {
            let inv = 1.0 / (self.running_var[c] + BN_EPS).sqrt();
            let m = self.running_mean[c];
            let mut sg = 0.0;
            let mut sb = 0.0;
            for (g, &xv) in dy.plane(c).iter().zip(x.plane(c)) {
                sg += g * (xv - m) * inv;
                sb += g;
            }
            dgamma[c] += sg;
            dbeta[c] += sb;
            let s = self.gamma[c] * inv;
            for v in dx.plane_mut(c) {
                *v *= s;
            }
        }
        dx
    }

    /// Training mode over a whole batch using batch statistics.
    pub fn forward_train(&self, xs: &[Act]) -> (Vec<Act>, BnBatchCache) {
        let channels = self.channels();
        let n_per = xs[0].dims.len();
        let count = (xs.len() * n_per) as f64;
        let mut mean = vec![0.0; channels];
        let mut var = vec![0.0; channels];
        for c in 0..channels {
            let m = xs.iter().map(|x| x.plane(c).iter().sum::<f64>()).sum::<f64>() / count;
            let v = xs
                .iter()
                .map(|x| x.plane(c).iter().map(|&t| (t - m) * (t - m)).sum::<f64>())
                .sum::<f64>()
                / count;
            mean[c] = m;
            var[c] = v;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = Vec::with_capacity(xs.len());
        let mut outs = Vec::with_capacity(xs.len());
        for x in xs {
            let mut xh = x.clone();
            let mut o = x.clone();
            for c in 0..channels {
                let (m, s) = (mean[c], inv_std[c]);
                let (g, b) = (self.gamma[c], self.beta[c]);
                for (h, ov) in xh.plane_mut(c).iter_mut().zip(o.plane_mut(c)) {
                    *h = (*h - m) * s;
                    *ov = g * *h + b;
                }
            }
            xhat.push(xh);
            outs.push(o);
        }
        let var_unbiased = if count > 1.0 {
            var.iter().map(|v| v * count / (count - 1.0)).collect()
        } else {
            var.clone()
        };
        (
            outs,
            BnBatchCache {
                xhat,
                inv_std,
                mean,
                var_unbiased,
            },
        )
    }

    pub fn update_running(&mut self, cache: &BnBatchCache) {
        for c in 0..self.channels() {
            self.running_mean[c] = (1.0 - BN_MOMENTUM) * self.running_mean[c] + BN_MOMENTUM * cache.mean[c];
            self.running_var[c] = (1.0 - BN_MOMENTUM) * self.running_var[c] + BN_MOMENTUM * cache.var_unbiased[c];
        }
    }

    pub fn backward_train(&self, cache: &BnBatchCache, dys: &[Act], dgamma: &mut [f64], dbeta: &mut [f64]) -> Vec<Act> {
        let channels = self.channels();
        let n_per = dys[0].dims.len();
        let count = (dys.len() * n_per) as f64;
        let mut sum_dy = vec![0.0; channels];
        let mut sum_dy_xhat = vec![0.0; channels];
        for (dy, xh) in dys.iter().zip(&cache.xhat) {
            for c in 0..channels {
                for (g, h) in dy.plane(c).iter().zip(xh.plane(c)) {
                    sum_dy[c] += g;
                    sum_dy_xhat[c] += g * h;
                }
            }
        }
        for c in 0..channels {
            dgamma[c] += sum_dy_xhat[c];
            dbeta[c] += sum_dy[c];
        }
        dys.iter()
            .zip(&cache.xhat)
            .map(|(dy, xh)| {
                let mut dx = dy.clone();
                for c in 0..channels {
                    let k = self.gamma[c] * cache.inv_std[c] / count;
                    let (sd, sdx) = (sum_dy[c], sum_dy_xhat[c]);
                    for (v, h) in dx.plane_mut(c).iter_mut().zip(xh.plane(c)) {
                        *v = k * (count * *v - sd - h * sdx);
                    }
                }
                dx
            })
            .collect()
    }
}

/// Fully connected layer, `weight` is `[out][in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn new<R: Rng>(inputs: usize, outputs: usize, gain: f64, rng: &mut R) -> Self {
        Dense {
            inputs,
            outputs,
            weight: he_normal(rng, inputs * outputs, inputs, gain),
            bias: vec![0.0; outputs],
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|o| {
                let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
                self.bias[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    pub fn backward(&self, x: &[f64], dy: &[f64], dw: &mut [f64], db: &mut [f64]) -> Vec<f64> {
        let mut dx = vec![0.0; self.inputs];
        for (o, &g) in dy.iter().enumerate() {
            db[o] += g;
            if g == 0.0 {
                continue;
            }
            let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
            let drow = &mut dw[o * self.inputs..(o + 1) * self.inputs];
            for ((d, &xv), (t, &wv)) in drow.iter_mut().zip(x).zip(dx.iter_mut().zip(row)) {
                *d += g * xv;
                *t += g * wv;
            }
        }
        dx
    }
}

fn row_softmax(s: &DMatrix<f64>) -> DMatrix<f64> {
    let mut a = s.clone();
    for r in 0..a.nrows() {
        let m = (0..a.ncols()).map(|c| a[(r, c)]).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for c in 0..a.ncols() {
            let e = (a[(r, c)] - m).exp();
            a[(r, c)] = e;
            z += e;
        }
        for c in 0..a.ncols() {
            a[(r, c)] /= z;
        }
    }
    a
}

/// Scaled dot-product attention, `softmax(Q·Kᵀ/√d_k)·V` with a row-wise
/// softmax.
pub fn attention_head(q: &DMatrix<f64>, k: &DMatrix<f64>, v: &DMatrix<f64>, d_k: usize) -> Result<DMatrix<f64>> {
    Ok(attention_with_weights(q, k, v, d_k)?.0)
}

/// Attention output together with the softmax weight matrix.
pub fn attention_with_weights(
    q: &DMatrix<f64>,
    k: &DMatrix<f64>,
    v: &DMatrix<f64>,
    d_k: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if d_k == 0 {
        return Err(Error::InvalidArgument("d_k must be positive".into()));
    }
    if q.ncols() != k.ncols() {
        return Err(Error::Shape(format!(
            "query width {} != key width {}",
            q.ncols(),
            k.ncols()
        )));
    }
    if k.nrows() != v.nrows() {
        return Err(Error::Shape(format!("{} keys but {} values", k.nrows(), v.nrows())));
    }
    let scores = (q * k.transpose()) / (d_k as f64).sqrt();
    let a = row_softmax(&scores);
    Ok((&a * v, a))
}

/// One self-attention head with its own query/key/value projections
/// (`channels × key_dim` each).
#[derive(Clone, Debug, PartialEq)]
pub struct AttnHead {
    pub channels: usize,
    pub key_dim: usize,
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
}

pub struct AttnCache {
    pub x: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub a: DMatrix<f64>,
}

impl AttnHead {
    pub fn new<R: Rng>(channels: usize, key_dim: usize, rng: &mut R) -> Self {
        let std = (1.0 / channels as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let mut draw = |n| (0..n).map(|_| normal.sample(rng)).collect::<Vec<f64>>();
        AttnHead {
            channels,
            key_dim,
            wq: draw(channels * key_dim),
            wk: draw(channels * key_dim),
            wv: draw(channels * key_dim),
        }
    }

    pub fn zeros(channels: usize, key_dim: usize) -> Self {
        AttnHead {
            channels,
            key_dim,
            wq: vec![0.0; channels * key_dim],
            wk: vec![0.0; channels * key_dim],
            wv: vec![0.0; channels * key_dim],
        }
    }

    fn mat(&self, w: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.channels, self.key_dim, w)
    }

    /// `x` is `positions × channels`; returns `positions × key_dim`.
    pub fn forward(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, AttnCache) {
        let q = x * self.mat(&self.wq);
        let k = x * self.mat(&self.wk);
        let v = x * self.mat(&self.wv);
        let (out, a) = attention_with_weights(&q, &k, &v, self.key_dim).expect("consistent shapes");
        (
            out,
            AttnCache {
                x: x.clone(),
                q,
                k,
                v,
                a,
            },
        )
    }

    /// Returns `dx` and accumulates projection gradients (row-major
    /// `channels × key_dim`).
    pub fn backward(
        &self,
        cache: &AttnCache,
        dout: &DMatrix<f64>,
        dwq: &mut [f64],
        dwk: &mut [f64],
        dwv: &mut [f64],
    ) -> DMatrix<f64> {
        let scale = 1.0 / (self.key_dim as f64).sqrt();
        let dv = cache.a.transpose() * dout;
        let da = dout * cache.v.transpose();
        // softmax backward, row-wise: dS = A ⊙ (dA − rowsum(dA ⊙ A))
        let mut ds = da.clone();
        for r in 0..ds.nrows() {
            let dot: f64 = (0..ds.ncols()).map(|c| da[(r, c)] * cache.a[(r, c)]).sum();
            for c in 0..ds.ncols() {
                ds[(r, c)] = cache.a[(r, c)] * (da[(r, c)] - dot) * scale;
            }
        }
        let dq = &ds * &cache.k;
        let dk = ds.transpose() * &cache.q;
        let xt = cache.x.transpose();
        for (dst, g) in [(dwq, xt.clone() * &dq), (dwk, xt.clone() * &dk), (dwv, &xt * &dv)] {
            for r in 0..self.channels {
                for c in 0..self.key_dim {
                    dst[r * self.key_dim + c] += g[(r, c)];
                }
            }
        }
        dq * self.mat(&self.wq).transpose() + dk * self.mat(&self.wk).transpose() + dv * self.mat(&self.wv).transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_act(c: usize, dims: Dims, rng: &mut ChaCha8Rng) -> Act {
        Act {
            channels: c,
            dims,
            data: (0..c * dims.len()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    /// Direct zero-padded convolution.
    fn conv_oracle(conv: &Conv3d, x: &Act) -> Act {
        let dims = x.dims;
        let mut out = Act::zeros(conv.out_channels, dims);
        for oc in 0..conv.out_channels {
            for z in 0..dims.d() as isize {
                for y in 0..dims.h() as isize {
                    for xx in 0..dims.w() as isize {
                        let mut s = conv.bias[oc];
                        for ic in 0..conv.in_channels {
                            for kz in -1..=1isize {
                                for ky in -1..=1isize {
                                    for kx in -1..=1isize {
                                        let p = [xx + kx, y + ky, z + kz];
                                        if !dims.contains([p[0] as i64, p[1] as i64, p[2] as i64]) {
                                            continue;
                                        }
                                        let k = ((kz + 1) * 9 + (ky + 1) * 3 + (kx + 1)) as usize;
                                        s += conv.weight[conv.w_index(oc, ic, k)]
                                            * x.plane(ic)[dims.index(p[0] as usize, p[1] as usize, p[2] as usize)];
                                    }
                                }
                            }
                        }
                        out.plane_mut(oc)[dims.index(xx as usize, y as usize, z as usize)] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let conv = Conv3d {
            bias: vec![0.1, -0.2, 0.3],
            ..Conv3d::new(2, 3, 1.0, &mut rng)
        };
        let x = random_act(2, Dims::new(5, 4, 3), &mut rng);
        let a = conv.forward(&x);
        let b = conv_oracle(&conv, &x);
        for (u, v) in a.data.iter().zip(&b.data) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let conv = Conv3d::new(2, 2, 1.0, &mut rng);
        let x = random_act(2, Dims::new(4, 3, 3), &mut rng);
        let r = random_act(2, x.dims, &mut rng);
        let loss = |c: &Conv3d, x: &Act| -> f64 { c.forward(x).data.iter().zip(&r.data).map(|(a, b)| a * b).sum() };
        let mut dw = vec![0.0; conv.weight.len()];
        let mut db = vec![0.0; 2];
        let dx = conv.backward(&x, &r, &mut dw, &mut db);
        let h = 1e-6;
        for i in [0, 7, 30, 80, 107] {
            let mut cp = conv.clone();
            cp.weight[i] += h;
            let up = loss(&cp, &x);
            cp.weight[i] -= 2.0 * h;
            let dn = loss(&cp, &x);
            assert!(((up - dn) / (2.0 * h) - dw[i]).abs() < 1e-6);
        }
        for i in [0, 5, 17, 40, 71] {
            let mut xp = x.clone();
            xp.data[i] += h;
            let up = loss(&conv, &xp);
            xp.data[i] -= 2.0 * h;
            let dn = loss(&conv, &xp);
            assert!(((up - dn) / (2.0 * h) - dx.data[i]).abs() < 1e-6);
        }
        let sum_r1: f64 = r.plane(1).iter().sum();
        assert!((db[1] - sum_r1).abs() < 1e-12);
    }

    #[test]
    fn maxpool_picks_maxima_and_routes_gradient() {
        let dims = Dims::new(4, 2, 1);
        let x = Act {
            channels: 1,
            dims,
            data: vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 7.0, -1.0],
        };
        let (out, arg) = maxpool_forward(&x, 2);
        assert_eq!(out.dims, Dims::new(2, 1, 1));
        assert_eq!(out.data, vec![5.0, 7.0]);
        let dy = Act {
            channels: 1,
            dims: out.dims,
            data: vec![1.0, 2.0],
        };
        let dx = maxpool_backward(&dy, &arg, 1, dims);
        assert_eq!(dx.data, vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn batchnorm_inference_with_unit_statistics_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut bn = BatchNorm::new(2);
        bn.running_var = vec![1.0 - BN_EPS; 2];
        let x = random_act(2, Dims::cube(3), &mut rng);
        let y = bn.forward_infer(&x);
        for (a, b) in x.data.iter().zip(&y.data) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn batchnorm_train_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut bn = BatchNorm::new(2);
        bn.gamma = vec![1.3, 0.7];
        bn.beta = vec![0.1, -0.4];
        let xs: Vec<Act> = (0..3).map(|_| random_act(2, Dims::new(2, 2, 1), &mut rng)).collect();
        let rs: Vec<Act> = (0..3).map(|_| random_act(2, Dims::new(2, 2, 1), &mut rng)).collect();
        let loss = |bn: &BatchNorm, xs: &[Act]| -> f64 {
            let (ys, _) = bn.forward_train(xs);
            ys.iter()
                .zip(&rs)
                .map(|(y, r)| y.data.iter().zip(&r.data).map(|(a, b)| a * b).sum::<f64>())
                .sum()
        };
        let (_, cache) = bn.forward_train(&xs);
        let mut dg = vec![0.0; 2];
        let mut dbt = vec![0.0; 2];
        let dxs = bn.backward_train(&cache, &rs, &mut dg, &mut dbt);
        let h = 1e-6;
        for s in 0..3 {
            for i in 0..8 {
                let mut xp = xs.clone();
                xp[s].data[i] += h;
                let up = loss(&bn, &xp);
                xp[s].data[i] -= 2.0 * h;
                let dn = loss(&bn, &xp);
                assert!(((up - dn) / (2.0 * h) - dxs[s].data[i]).abs() < 1e-6);
            }
        }
        let mut bp = bn.clone();
        bp.gamma[0] += h;
        let up = loss(&bp, &xs);
        bp.gamma[0] -= 2.0 * h;
        let dn = loss(&bp, &xs);
        assert!(((up - dn) / (2.0 * h) - dg[0]).abs() < 1e-6);
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = Dense::new(5, 3, 1.0, &mut rng);
        let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r = [0.3, -1.2, 0.5];
        let loss = |d: &Dense, x: &[f64]| d.forward(x).iter().zip(&r).map(|(a, b)| a * b).sum::<f64>();
        let mut dw = vec![0.0; 15];
        let mut db = vec![0.0; 3];
        let dx = d.backward(&x, &r, &mut dw, &mut db);
        let h = 1e-6;
        for i in 0..5 {
            let mut xp = x.clone();
            xp[i] += h;
            let up = loss(&d, &xp);
            xp[i] -= 2.0 * h;
            assert!(((up - loss(&d, &xp)) / (2.0 * h) - dx[i]).abs() < 1e-8);
        }
        for i in 0..15 {
            let mut dp = d.clone();
            dp.weight[i] += h;
            let up = loss(&dp, &x);
            dp.weight[i] -= 2.0 * h;
            assert!(((up - loss(&dp, &x)) / (2.0 * h) - dw[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn uniform_attention_averages_value_rows() {
        let q = DMatrix::zeros(1, 3);
        let k = DMatrix::zeros(4, 3);
        let v = DMatrix::from_row_slice(4, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let out = attention_head(&q, &k, &v, 3).unwrap();
        assert!((out[(0, 0)] - 4.0).abs() < 1e-12);
        assert!((out[(0, 1)] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn sharp_match_selects_value_row() {
        let big = 60.0;
        let q = DMatrix::from_row_slice(1, 2, &[big, 0.0]);
        let k = DMatrix::from_row_slice(3, 2, &[0.0, big, big, 0.0, -big, 0.0]);
        let v = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 9.0, -3.0, 0.0, 5.0]);
        let out = attention_head(&q, &k, &v, 2).unwrap();
        assert!((out[(0, 0)] - 9.0).abs() < 1e-9);
        assert!((out[(0, 1)] + 3.0).abs() < 1e-9);
    }

    #[test]
    fn attention_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut m = |r, c| DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0));
        let (q, k, v) = (m(3, 4), m(3, 4), m(3, 4));
        let out = attention_head(&q, &k, &v, 4).unwrap();
        for i in 0..3 {
            let s: Vec<f64> = (0..3)
                .map(|j| (0..4).map(|t| q[(i, t)] * k[(j, t)]).sum::<f64>() / 2.0)
                .collect();
            let z: f64 = s.iter().map(|x| x.exp()).sum();
            let w: Vec<f64> = s.iter().map(|x| x.exp() / z).collect();
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for c in 0..4 {
                let o: f64 = (0..3).map(|j| w[j] * v[(j, c)]).sum();
                assert!((out[(i, c)] - o).abs() < 1e-9);
            }
        }
        assert!(attention_head(&q, &m(3, 2), &v, 4).is_err());
        assert!(attention_head(&q, &k, &m(2, 4), 4).is_err());
    }

    #[test]
    fn attn_head_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let head = AttnHead::new(3, 2, &mut rng);
        let x = DMatrix::from_fn(4, 3, |_, _| rng.gen_range(-1.0..1.0));
        let r = DMatrix::from_fn(4, 2, |_, _| rng.gen_range(-1.0..1.0));
        let loss = |h: &AttnHead, x: &DMatrix<f64>| h.forward(x).0.component_mul(&r).sum();
        let (_, cache) = head.forward(&x);
        let (mut dq, mut dk, mut dv) = (vec![0.0; 6], vec![0.0; 6], vec![0.0; 6]);
        let dx = head.backward(&cache, &r, &mut dq, &mut dk, &mut dv);
        let h = 1e-6;
        for i in 0..6 {
            for (which, grad) in [(0, &dq), (1, &dk), (2, &dv)] {
                let mut hp = head.clone();
                let w = match which {
                    0 => &mut hp.wq,
                    1 => &mut hp.wk,
                    _ => &mut hp.wv,
                };
                w[i] += h;
                let up = loss(&hp, &x);
                let w = match which {
                    0 => &mut hp.wq,
                    1 => &mut hp.wk,
                    _ => &mut hp.wv,
                };
                w[i] -= 2.0 * h;
                let dn = loss(&hp, &x);
                assert!(((up - dn) / (2.0 * h) - grad[i]).abs() < 1e-7, "param {which}/{i}");
            }
        }
        for r_ in 0..4 {
            for c in 0..3 {
                let mut xp = x.clone();
                xp[(r_, c)] += h;
                let up = loss(&head, &xp);
                xp[(r_, c)] -= 2.0 * h;
                assert!(((up - loss(&head, &xp)) / (2.0 * h) - dx[(r_, c)]).abs() < 1e-7);
            }
        }
    }
}
