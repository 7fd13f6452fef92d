//! Normalization and convolution operations.

use super::kernels::{matmul, matmul_nt, matmul_tn};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Group statistics: `xhat = (x - mean) / sqrt(var + eps)` over each
/// contiguous block of `block` values. Zero-variance blocks normalize to
/// exactly zero.
fn normalize_blocks(x: &[f64], block: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(x.len() / block);
    for (src, dst) in x.chunks(block).zip(xhat.chunks_mut(block)) {
        let n = block as f64;
        let mean = src.iter().sum::<f64>() / n;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std.push(inv);
        // rounding residue of a constant block
        if var <= (4.0 * f64::EPSILON * mean.abs()).powi(2) {
            continue;
        }
        for (d, s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * inv;
        }
    }
    (xhat, inv_std)
}

/// Backward of [`normalize_blocks`] given the gradient wrt `xhat`.
fn normalize_blocks_backward(dxhat: &[f64], xhat: &[f64], inv_std: &[f64], block: usize) -> Vec<f64> {
    let mut dx = vec![0.0; dxhat.len()];
    let n = block as f64;
    for (b, ((dh, xh), out)) in dxhat
        .chunks(block)
        .zip(xhat.chunks(block))
        .zip(dx.chunks_mut(block))
        .enumerate()
    {
        let mean_d = dh.iter().sum::<f64>() / n;
        let mean_dx = dh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
        let inv = inv_std[b];
        for ((o, d), h) in out.iter_mut().zip(dh).zip(xh) {
            *o = inv * (d - mean_d - h * mean_dx);
        }
    }
    dx
}

impl Tape {
    /// Normalizes over the last dimension, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let n = self.value(x).cols();
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let (xhat, inv_std) = normalize_blocks(self.value(x).data(), n, eps);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut y = xhat.clone();
        for row in y.chunks_mut(n) {
            for j in 0..n {
                row[j] = row[j] * g[j] + b[j];
            }
        }
        let value = Tensor::from_parts(self.shape(x).to_vec(), y);
        Ok(self.record(
            &[x, gain, bias],
            value,
            Box::new(move |grad, inp, _, needs| {
                let gv = inp[1].data();
                let gx = needs[0].then(|| {
                    let mut dxhat = grad.data().to_vec();
                    for row in dxhat.chunks_mut(n) {
                        for j in 0..n {
                            row[j] *= gv[j];
                        }
                    }
                    let dx = normalize_blocks_backward(&dxhat, &xhat, &inv_std, n);
                    Tensor::from_parts(inp[0].shape().to_vec(), dx)
                });
                let (mut dg, mut db) = (vec![0.0; n], vec![0.0; n]);
                if needs[1] || needs[2] {
                    for (gr, xr) in grad.data().chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += gr[j] * xr[j];
                            db[j] += gr[j];
                        }
                    }
                }
                vec![
                    gx,
                    needs[1].then(|| Tensor::from_parts(inp[1].shape().to_vec(), dg)),
                    needs[2].then(|| Tensor::from_parts(inp[2].shape().to_vec(), db)),
                ]
            }),
        ))
    }

    /// Group normalization of a channel-first tensor `[C, ...]`.
    pub fn group_norm(&mut self, x: Var, groups: usize, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let channels = shape.first().copied().unwrap_or(0);
        if groups == 0 || channels % groups != 0 {
            return Err(Error::invalid(format!(
                "group_norm: {channels} channels not divisible into {groups} groups"
            )));
        }
        if self.value(gain).len() != channels || self.value(bias).len() != channels {
            return Err(Error::shape("group_norm", &shape, self.shape(gain)));
        }
        let spatial = self.value(x).len() / channels;
        let block = spatial * channels / groups;
        let (xhat, inv_std) = normalize_blocks(self.value(x).data(), block, eps);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut y = xhat.clone();
        for (c, row) in y.chunks_mut(spatial).enumerate() {
            for v in row.iter_mut() {
                *v = *v * g[c] + b[c];
            }
        }
        let value = Tensor::from_parts(shape.clone(), y);
        Ok(self.record(
            &[x, gain, bias],
            value,
            Box::new(move |grad, inp, _, needs| {
                let gv = inp[1].data();
                let gx = needs[0].then(|| {
                    let mut dxhat = grad.data().to_vec();
                    for (c, row) in dxhat.chunks_mut(spatial).enumerate() {
                        for v in row.iter_mut() {
                            *v *= gv[c];
                        }
                    }
                    let dx = normalize_blocks_backward(&dxhat, &xhat, &inv_std, block);
                    Tensor::from_parts(shape.clone(), dx)
                });
                let (mut dg, mut db) = (vec![0.0; channels], vec![0.0; channels]);
                if needs[1] || needs[2] {
                    for (c, (gr, xr)) in grad.data().chunks(spatial).zip(xhat.chunks(spatial)).enumerate() {
                        dg[c] = gr.iter().zip(xr).map(|(a, b)| a * b).sum();
                        db[c] = gr.iter().sum();
                    }
                }
                vec![
                    gx,
                    needs[1].then(|| Tensor::from_parts(inp[1].shape().to_vec(), dg)),
                    needs[2].then(|| Tensor::from_parts(inp[2].shape().to_vec(), db)),
                ]
            }),
        ))
    }

    /// Depthwise 1-D convolution of `x[C, L]` with `kernel[C, width]`.
    ///
    /// Causal mode pads `width - 1` zeros on the left, so output `t` only
    /// sees inputs `<= t`; otherwise padding is split around the centre.
    /// Output length always equals `L`.
    pub fn conv1d(&mut self, x: Var, kernel: Var, causal: bool) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 2 || sk.len() != 2 || sx[0] != sk[0] {
            return Err(Error::shape("conv1d", &sx, &sk));
        }
        let (channels, len, width) = (sx[0], sx[1], sk[1]);
        if width == 0 {
            return Err(Error::invalid("conv1d: kernel width must be positive"));
        }
        let pad = if causal { width - 1 } else { (width - 1) / 2 };
        let xs = self.value(x).data();
        let ks = self.value(kernel).data();
        let mut y = vec![0.0; channels * len];
        for c in 0..channels {
            for j in 0..width {
                let kv = ks[c * width + j];
                for t in 0..len {
                    let src = t + j;
                    if src < pad || src - pad >= len {
                        continue;
                    }
                    y[c * len + t] += kv * xs[c * len + src - pad];
                }
            }
        }
        let value = Tensor::from_parts(sx.clone(), y);
        Ok(self.record(
            &[x, kernel],
            value,
            Box::new(move |g, inp, _, needs| {
                let (xs, ks, gs) = (inp[0].data(), inp[1].data(), g.data());
                let mut gx = vec![0.0; channels * len];
                let mut gk = vec![0.0; channels * width];
                for c in 0..channels {
                    for j in 0..width {
                        let kv = ks[c * width + j];
                        let mut acc = 0.0;
                        for t in 0..len {
                            let src = t + j;
                            if src < pad || src - pad >= len {
                                continue;
                            }
                            let gv = gs[c * len + t];
                            gx[c * len + src - pad] += kv * gv;
                            acc += gv * xs[c * len + src - pad];
                        }
                        gk[c * width + j] = acc;
                    }
                }
                vec![
                    needs[0].then(|| Tensor::from_parts(vec![channels, len], gx)),
                    needs[1].then(|| Tensor::from_parts(vec![channels, width], gk)),
                ]
            }),
        ))
    }

    /// 3-D cross-correlation of `volume[Cin, D, H, W]` with
    /// `weights[Cout, Cin, k, k, k]` plus per-output-channel `bias`.
    pub fn conv3d(&mut self, volume: Var, weights: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let sv = self.shape(volume).to_vec();
        let sw = self.shape(weights).to_vec();
        if sv.len() != 4 || sw.len() != 5 || sw[1] != sv[0] || sw[2] != sw[3] || sw[3] != sw[4] {
            return Err(Error::shape("conv3d", &sv, &sw));
        }
        if self.value(bias).len() != sw[0] {
            return Err(Error::shape("conv3d", &sw, self.shape(bias)));
        }
        if stride == 0 {
            return Err(Error::invalid("conv3d: stride must be positive"));
        }
        let kw = sw[2];
        let mut out_dims = [0usize; 3];
        for a in 0..3 {
            let span = sv[a + 1] + 2 * padding;
            if span < kw || !(span - kw).is_multiple_of(stride) {
                return Err(Error::invalid(format!(
                    "conv3d: extent {} with padding {padding}, kernel {kw}, stride {stride} gives a non-integral output",
                    sv[a + 1]
                )));
            }
            out_dims[a] = (span - kw) / stride + 1;
        }
        let geom = Conv3dGeom {
            cin: sv[0],
            cout: sw[0],
            in_dims: [sv[1], sv[2], sv[3]],
            out_dims,
            k: kw,
            stride,
            padding,
        };
        let (ol, kk) = (geom.out_len(), geom.cin * geom.k3());
        let cols = geom.im2col(self.value(volume).data());
        let mut out = matmul(self.value(weights).data(), &cols, geom.cout, kk, ol);
        let b = self.value(bias).data();
        for (co, row) in out.chunks_mut(ol).enumerate() {
            for v in row {
                *v += b[co];
            }
        }
        let value = Tensor::from_parts(vec![geom.cout, out_dims[0], out_dims[1], out_dims[2]], out);
        Ok(self.record(
            &[volume, weights, bias],
            value,
            Box::new(move |g, inp, _, needs| {
                let gs = g.data();
                let gv = needs[0].then(|| {
                    let gcols = matmul_tn(inp[1].data(), gs, geom.cout, kk, ol);
                    Tensor::from_parts(inp[0].shape().to_vec(), geom.col2im(&gcols))
                });
                let gw = needs[1].then(|| Tensor::from_parts(inp[1].shape().to_vec(), matmul_nt(gs, &cols, geom.cout, ol, kk)));
                let gb = needs[2].then(|| {
                    let sums = gs.chunks(ol).map(|row| row.iter().sum()).collect();
                    Tensor::from_parts(inp[2].shape().to_vec(), sums)
                });
                vec![gv, gw, gb]
            }),
        ))
    }
}

#[derive(Clone, Copy)]
struct Conv3dGeom {
    cin: usize,
    cout: usize,
    in_dims: [usize; 3],
    out_dims: [usize; 3],
    k: usize,
    stride: usize,
    padding: usize,
}

impl Conv3dGeom {
    fn k3(&self) -> usize {
        self.k * self.k * self.k
    }

    fn in_len(&self) -> usize {
        self.in_dims.iter().product()
    }

    fn out_len(&self) -> usize {
        self.out_dims.iter().product()
    }

    /// Range of output positions along one axis whose input index
    /// `o * stride + tap - padding` falls inside `[0, extent)`.
    fn valid(&self, tap: usize, extent: usize, out: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.padding);
        // o * s + tap >= p
        let lo = if tap >= p { 0 } else { (p - tap).div_ceil(s) };
        // o * s + tap - p <= extent - 1
        let hi = if extent + p > tap {
            ((extent + p - tap - 1) / s + 1).min(out)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    /// Visits every contiguous run of one im2col row:
    /// `f(row, out_offset, in_offset, count)` where `row = ci * k³ + tap`.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let [id, ih, iw] = self.in_dims;
        let [od, oh, ow] = self.out_dims;
        let (s, p, k) = (self.stride, self.padding, self.k);
        for ci in 0..self.cin {
            let in_base = ci * self.in_len();
            for kz in 0..k {
                let (z0, z1) = self.valid(kz, id, od);
                for ky in 0..k {
                    let (y0, y1) = self.valid(ky, ih, oh);
                    for kx in 0..k {
                        let (x0, x1) = self.valid(kx, iw, ow);
                        if x1 <= x0 {
                            continue;
                        }
                        let row = ci * self.k3() + (kz * k + ky) * k + kx;
                        for oz in z0..z1 {
                            let iz = oz * s + kz - p;
                            for oy in y0..y1 {
                                let iy = oy * s + ky - p;
                                let ix = x0 * s + kx - p;
                                f(row, (oz * oh + oy) * ow + x0, in_base + (iz * ih + iy) * iw + ix, x1 - x0);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Patch matrix `[cin * k³, out_len]`; padded taps stay zero.
    fn im2col(&self, vs: &[f64]) -> Vec<f64> {
        let ol = self.out_len();
        let mut cols = vec![0.0; self.cin * self.k3() * ol];
        let s = self.stride;
        self.for_each_run(|row, o, i, n| {
            let dst = &mut cols[row * ol + o..row * ol + o + n];
            if s == 1 {
                dst.copy_from_slice(&vs[i..i + n]);
            } else {
                for (t, d) in dst.iter_mut().enumerate() {
                    *d = vs[i + t * s];
                }
            }
        });
        cols
    }

    /// Adjoint of [`Self::im2col`]: scatter-adds patch rows into a volume.
    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let ol = self.out_len();
        let mut gv = vec![0.0; self.cin * self.in_len()];
        let s = self.stride;
        self.for_each_run(|row, o, i, n| {
            let src = &cols[row * ol + o..row * ol + o + n];
            if s == 1 {
                for (d, v) in gv[i..i + n].iter_mut().zip(src) {
                    *d += v;
                }
            } else {
                for (t, v) in src.iter().enumerate() {
                    gv[i + t * s] += v;
                }
            }
        });
        gv
    }
}
