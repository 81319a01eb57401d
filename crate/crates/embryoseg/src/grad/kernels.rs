//! Forward and backward compute kernels.
//!
//! Convolutions come in three fixed flavors matching the network family:
//! stride-1 odd-kernel convolutions with symmetric zero padding, 2x
//! downsampling convolutions (kernel 2, stride 2), and 2x transposed
//! upsampling convolutions (kernel 2, stride 2). Parallelism is per output
//! (or input, for input gradients) channel so each element is written by
//! exactly one thread.

use rayon::prelude::*;

use crate::vol::BoxSpec;

use super::tensor::Tensor;

/// Stride-1 3D convolution with symmetric zero padding `pad`.
/// `x: (Ci, D, H, W)`, `w: (Co, Ci, k, k, k)`, `b: (Co)`.
pub fn conv3d(x: &Tensor, w: &Tensor, b: &Tensor, pad: usize) -> Tensor {
    let (ci, d, h, wd) = x.dims4();
    let (co, ci2, k, _, _) = w.dims5();
    assert_eq!(ci, ci2, "conv3d channel mismatch");
    assert!(d + 2 * pad + 1 > k && h + 2 * pad + 1 > k && wd + 2 * pad + 1 > k);
    let od = d + 2 * pad + 1 - k;
    let oh = h + 2 * pad + 1 - k;
    let ow = wd + 2 * pad + 1 - k;
    let mut out = Tensor::zeros(&[co, od, oh, ow]);
    let xs = &x.data;
    let ws = &w.data;
    out.data
        .par_chunks_mut(od * oh * ow)
        .enumerate()
        .for_each(|(oc, oslab)| {
            oslab.fill(b.data[oc]);
            for oz in 0..od {
                for oy in 0..oh {
                    let orow = &mut oslab[(oz * oh + oy) * ow..(oz * oh + oy) * ow + ow];
                    for ic in 0..ci {
                        for kz in 0..k {
                            let iz = oz + kz;
                            if iz < pad || iz - pad >= d {
                                continue;
                            }
                            let iz = iz - pad;
                            for ky in 0..k {
                                let iy = oy + ky;
                                if iy < pad || iy - pad >= h {
                                    continue;
                                }
                                let iy = iy - pad;
                                let xoff = ((ic * d + iz) * h + iy) * wd;
                                let xrow = &xs[xoff..xoff + wd];
                                let wbase = (((oc * ci + ic) * k + kz) * k + ky) * k;
                                for kx in 0..k {
                                    let wv = ws[wbase + kx];
                                    let ox0 = pad.saturating_sub(kx);
                                    let ox1 = (wd + pad - kx).min(ow);
                                    if ox0 >= ox1 {
                                        continue;
                                    }
                                    let src = &xrow[ox0 + kx - pad..ox1 + kx - pad];
                                    let dst = &mut orow[ox0..ox1];
                                    for (o, s) in dst.iter_mut().zip(src) {
                                        *o += wv * s;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    out
}

/// Gradient of [`conv3d`] with respect to its input.
pub fn conv3d_grad_input(gout: &Tensor, w: &Tensor, x_shape: &[usize], pad: usize) -> Tensor {
    let (co, od, oh, ow) = gout.dims4();
    let (_, ci, k, _, _) = w.dims5();
    let (d, h, wd) = (x_shape[1], x_shape[2], x_shape[3]);
    let mut dx = Tensor::zeros(x_shape);
    let gs = &gout.data;
    let ws = &w.data;
    dx.data
        .par_chunks_mut(d * h * wd)
        .enumerate()
        .for_each(|(ic, xslab)| {
            for iz in 0..d {
                for iy in 0..h {
                    let xrow = &mut xslab[(iz * h + iy) * wd..(iz * h + iy) * wd + wd];
                    for oc in 0..co {
                        for kz in 0..k {
                            let oz = iz + pad;
                            if oz < kz || oz - kz >= od {
                                continue;
                            }
                            let oz = oz - kz;
                            for ky in 0..k {
                                let oy = iy + pad;
                                if oy < ky || oy - ky >= oh {
                                    continue;
                                }
                                let oy = oy - ky;
                                let goff = ((oc * od + oz) * oh + oy) * ow;
                                let grow = &gs[goff..goff + ow];
                                let wbase = (((oc * ci + ic) * k + kz) * k + ky) * k;
                                for kx in 0..k {
                                    let wv = ws[wbase + kx];
                                    // ox = ix + pad - kx must lie in [0, ow)
                                    let ix0 = kx.saturating_sub(pad);
                                    let ix1 = (ow + kx).saturating_sub(pad).min(wd);
                                    if ix0 >= ix1 {
                                        continue;
                                    }
                                    let src = &grow[ix0 + pad - kx..ix1 + pad - kx];
                                    let dst = &mut xrow[ix0..ix1];
                                    for (o, s) in dst.iter_mut().zip(src) {
                                        *o += wv * s;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    dx
}

/// Gradient of [`conv3d`] with respect to its weights.
pub fn conv3d_grad_weight(gout: &Tensor, x: &Tensor, w_shape: &[usize], pad: usize) -> Tensor {
    let (co, od, oh, ow) = gout.dims4();
    let (ci, d, h, wd) = x.dims4();
    let k = w_shape[2];
    let mut dw = Tensor::zeros(w_shape);
    let gs = &gout.data;
    let xs = &x.data;
    dw.data
        .par_chunks_mut(ci * k * k * k)
        .enumerate()
        .for_each(|(oc, wslab)| {
            for oz in 0..od {
                for oy in 0..oh {
                    let goff = ((oc * od + oz) * oh + oy) * ow;
                    let grow = &gs[goff..goff + ow];
                    for ic in 0..ci {
                        for kz in 0..k {
                            let iz = oz + kz;
                            if iz < pad || iz - pad >= d {
                                continue;
                            }
                            let iz = iz - pad;
                            for ky in 0..k {
                                let iy = oy + ky;
                                if iy < pad || iy - pad >= h {
                                    continue;
                                }
                                let iy = iy - pad;
                                let xoff = ((ic * d + iz) * h + iy) * wd;
                                let xrow = &xs[xoff..xoff + wd];
                                let wbase = ((ic * k + kz) * k + ky) * k;
                                for kx in 0..k {
                                    let ox0 = pad.saturating_sub(kx);
                                    let ox1 = (wd + pad - kx).min(ow);
                                    if ox0 >= ox1 {
                                        continue;
                                    }
                                    let a = &grow[ox0..ox1];
                                    let bseg = &xrow[ox0 + kx - pad..ox1 + kx - pad];
                                    let mut acc = 0.0;
                                    for (g, xv) in a.iter().zip(bseg) {
                                        acc += g * xv;
                                    }
                                    wslab[wbase + kx] += acc;
                                }
                            }
                        }
                    }
                }
            }
        });
    dw
}

/// Per-output-channel sum of the output gradient (bias gradient).
pub fn grad_bias(gout: &Tensor) -> Tensor {
    let (co, od, oh, ow) = gout.dims4();
    let n = od * oh * ow;
    let data: Vec<f64> = (0..co)
        .map(|oc| gout.data[oc * n..(oc + 1) * n].iter().sum())
        .collect();
    Tensor::from_vec(&[co], data)
}

/// 2x downsampling convolution: kernel 2, stride 2, no padding.
/// `x: (Ci, D, H, W)` with even dims, `w: (Co, Ci, 2, 2, 2)`.
pub fn down2(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (ci, d, h, wd) = x.dims4();
    let (co, _, _, _, _) = w.dims5();
    assert!(d % 2 == 0 && h % 2 == 0 && wd % 2 == 0, "down2 needs even dims");
    let (od, oh, ow) = (d / 2, h / 2, wd / 2);
    let mut out = Tensor::zeros(&[co, od, oh, ow]);
    let xs = &x.data;
    let ws = &w.data;
    out.data
        .par_chunks_mut(od * oh * ow)
        .enumerate()
        .for_each(|(oc, oslab)| {
            oslab.fill(b.data[oc]);
            for oz in 0..od {
                for oy in 0..oh {
                    let orow = &mut oslab[(oz * oh + oy) * ow..(oz * oh + oy) * ow + ow];
                    for ic in 0..ci {
                        for dz in 0..2 {
                            for dy in 0..2 {
                                let xoff = ((ic * d + 2 * oz + dz) * h + 2 * oy + dy) * wd;
                                let xrow = &xs[xoff..xoff + wd];
                                let wbase = (((oc * ci + ic) * 2 + dz) * 2 + dy) * 2;
                                let (w0, w1) = (ws[wbase], ws[wbase + 1]);
                                for (ox, o) in orow.iter_mut().enumerate() {
                                    *o += w0 * xrow[2 * ox] + w1 * xrow[2 * ox + 1];
                                }
                            }
                        }
                    }
                }
            }
        });
    out
}

/// Gradient of [`down2`] with respect to its input.
pub fn down2_grad_input(gout: &Tensor, w: &Tensor, x_shape: &[usize]) -> Tensor {
    let (co, od, oh, ow) = gout.dims4();
    let ci = x_shape[0];
    let (d, h, wd) = (x_shape[1], x_shape[2], x_shape[3]);
    let mut dx = Tensor::zeros(x_shape);
    let gs = &gout.data;
    let ws = &w.data;
    dx.data
        .par_chunks_mut(d * h * wd)
        .enumerate()
        .for_each(|(ic, xslab)| {
            for iz in 0..d {
                let (oz, dz) = (iz / 2, iz % 2);
                if oz >= od {
                    continue;
                }
                for iy in 0..h {
                    let (oy, dy) = (iy / 2, iy % 2);
                    if oy >= oh {
                        continue;
                    }
                    let xrow = &mut xslab[(iz * h + iy) * wd..(iz * h + iy) * wd + wd];
                    for oc in 0..co {
                        let goff = ((oc * od + oz) * oh + oy) * ow;
                        let grow = &gs[goff..goff + ow];
                        let wbase = (((oc * ci + ic) * 2 + dz) * 2 + dy) * 2;
                        let (w0, w1) = (ws[wbase], ws[wbase + 1]);
                        for (ox, g) in grow.iter().enumerate() {
                            xrow[2 * ox] += w0 * g;
                            xrow[2 * ox + 1] += w1 * g;
                        }
                    }
                }
            }
        });
    dx
}

/// Gradient of [`down2`] with respect to its weights.
pub fn down2_grad_weight(gout: &Tensor, x: &Tensor) -> Tensor {
    let (co, od, oh, ow) = gout.dims4();
    let (ci, d, h, wd) = x.dims4();
    let mut dw = Tensor::zeros(&[co, ci, 2, 2, 2]);
    let gs = &gout.data;
    let xs = &x.data;
    dw.data
        .par_chunks_mut(ci * 8)
        .enumerate()
        .for_each(|(oc, wslab)| {
            for oz in 0..od {
                for oy in 0..oh {
                    let goff = ((oc * od + oz) * oh + oy) * ow;
                    let grow = &gs[goff..goff + ow];
                    for ic in 0..ci {
                        for dz in 0..2 {
                            for dy in 0..2 {
                                let xoff = ((ic * d + 2 * oz + dz) * h + 2 * oy + dy) * wd;
                                let xrow = &xs[xoff..xoff + wd];
                                let (mut a0, mut a1) = (0.0, 0.0);
                                for (ox, g) in grow.iter().enumerate() {
                                    a0 += g * xrow[2 * ox];
                                    a1 += g * xrow[2 * ox + 1];
                                }
                                let wbase = ((ic * 2 + dz) * 2 + dy) * 2;
                                wslab[wbase] += a0;
                                wslab[wbase + 1] += a1;
                            }
                        }
                    }
                }
            }
        });
    dw
}

/// 2x transposed (upsampling) convolution: kernel 2, stride 2.
/// `x: (Ci, D, H, W)`, `w: (Ci, Co, 2, 2, 2)`, output `(Co, 2D, 2H, 2W)`.
pub fn up2(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (ci, d, h, wd) = x.dims4();
    let (_, co, _, _, _) = w.dims5();
    let (od, oh, ow) = (2 * d, 2 * h, 2 * wd);
    let mut out = Tensor::zeros(&[co, od, oh, ow]);
    let xs = &x.data;
    let ws = &w.data;
    out.data
        .par_chunks_mut(od * oh * ow)
        .enumerate()
        .for_each(|(oc, oslab)| {
            oslab.fill(b.data[oc]);
            for z in 0..od {
                let (iz, dz) = (z / 2, z % 2);
                for y in 0..oh {
                    let (iy, dy) = (y / 2, y % 2);
                    let orow = &mut oslab[(z * oh + y) * ow..(z * oh + y) * ow + ow];
                    for ic in 0..ci {
                        let xoff = ((ic * d + iz) * h + iy) * wd;
                        let xrow = &xs[xoff..xoff + wd];
                        let wbase = (((ic * co + oc) * 2 + dz) * 2 + dy) * 2;
                        let (w0, w1) = (ws[wbase], ws[wbase + 1]);
                        for (ix, xv) in xrow.iter().enumerate() {
                            orow[2 * ix] += w0 * xv;
                            orow[2 * ix + 1] += w1 * xv;
                        }
                    }
                }
            }
        });
    out
}

/// Gradient of [`up2`] with respect to its input.
pub fn up2_grad_input(gout: &Tensor, w: &Tensor, x_shape: &[usize]) -> Tensor {
    let (co, _, oh, ow) = gout.dims4();
    let ci = x_shape[0];
    let (d, h, wd) = (x_shape[1], x_shape[2], x_shape[3]);
    let mut dx = Tensor::zeros(x_shape);
    let gs = &gout.data;
    let ws = &w.data;
    dx.data
        .par_chunks_mut(d * h * wd)
        .enumerate()
        .for_each(|(ic, xslab)| {
            for iz in 0..d {
                for iy in 0..h {
                    let xrow = &mut xslab[(iz * h + iy) * wd..(iz * h + iy) * wd + wd];
                    for oc in 0..co {
                        for dz in 0..2 {
                            for dy in 0..2 {
                                let goff = ((oc * 2 * d + 2 * iz + dz) * oh + 2 * iy + dy) * ow;
                                let grow = &gs[goff..goff + ow];
                                let wbase = (((ic * co + oc) * 2 + dz) * 2 + dy) * 2;
                                let (w0, w1) = (ws[wbase], ws[wbase + 1]);
                                for (ix, xv) in xrow.iter_mut().enumerate() {
                                    *xv += w0 * grow[2 * ix] + w1 * grow[2 * ix + 1];
                                }
                            }
                        }
                    }
                }
            }
        });
    dx
}

/// Gradient of [`up2`] with respect to its weights.
pub fn up2_grad_weight(gout: &Tensor, x: &Tensor) -> Tensor {
    let (co, _, oh, ow) = gout.dims4();
    let (ci, d, h, wd) = x.dims4();
    let mut dw = Tensor::zeros(&[ci, co, 2, 2, 2]);
    let gs = &gout.data;
    let xs = &x.data;
    dw.data
        .par_chunks_mut(co * 8)
        .enumerate()
        .for_each(|(ic, wslab)| {
            for oc in 0..co {
                for dz in 0..2 {
                    for dy in 0..2 {
                        let (mut a0, mut a1) = (0.0, 0.0);
                        for iz in 0..d {
                            for iy in 0..h {
                                let xoff = ((ic * d + iz) * h + iy) * wd;
                                let xrow = &xs[xoff..xoff + wd];
                                let goff = ((oc * 2 * d + 2 * iz + dz) * oh + 2 * iy + dy) * ow;
                                let grow = &gs[goff..goff + ow];
                                for (ix, xv) in xrow.iter().enumerate() {
                                    a0 += xv * grow[2 * ix];
                                    a1 += xv * grow[2 * ix + 1];
                                }
                            }
                        }
                        let wbase = ((oc * 2 + dz) * 2 + dy) * 2;
                        wslab[wbase] = a0;
                        wslab[wbase + 1] = a1;
                    }
                }
            }
        });
    dw
}

/// PReLU with one learnable slope per channel.
pub fn prelu(x: &Tensor, a: &Tensor) -> Tensor {
    let (c, d, h, w) = x.dims4();
    let n = d * h * w;
    let mut out = Tensor::zeros(&x.shape);
    for ch in 0..c {
        let s = a.data[ch];
        for i in ch * n..(ch + 1) * n {
            let v = x.data[i];
            out.data[i] = if v >= 0.0 { v } else { s * v };
        }
    }
    out
}

/// Gradients of [`prelu`] with respect to input and slopes.
pub fn prelu_grad(gout: &Tensor, x: &Tensor, a: &Tensor) -> (Tensor, Tensor) {
    let (c, d, h, w) = x.dims4();
    let n = d * h * w;
    let mut dx = Tensor::zeros(&x.shape);
    let mut da = Tensor::zeros(&[c]);
    for ch in 0..c {
        let s = a.data[ch];
        let mut acc = 0.0;
        for i in ch * n..(ch + 1) * n {
            let v = x.data[i];
            let g = gout.data[i];
            if v >= 0.0 {
                dx.data[i] = g;
            } else {
                dx.data[i] = g * s;
                acc += g * v;
            }
        }
        da.data[ch] = acc;
    }
    (dx, da)
}

/// Per-channel instance normalization: `y = gamma * (x - mu) / sqrt(var + eps) + beta`.
pub fn instance_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
    let (c, d, h, w) = x.dims4();
    let n = d * h * w;
    let mut out = Tensor::zeros(&x.shape);
    for ch in 0..c {
        let xa = &x.data[ch * n..(ch + 1) * n];
        let mu = xa.iter().sum::<f64>() / n as f64;
        let var = xa.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + eps).sqrt();
        let (g, b) = (gamma.data[ch], beta.data[ch]);
        for (o, &v) in out.data[ch * n..(ch + 1) * n].iter_mut().zip(xa) {
            *o = g * (v - mu) * inv + b;
        }
    }
    out
}

/// Gradients of [`instance_norm`] with respect to input, gamma, and beta.
pub fn instance_norm_grad(
    gout: &Tensor,
    x: &Tensor,
    gamma: &Tensor,
    eps: f64,
) -> (Tensor, Tensor, Tensor) {
    let (c, d, h, w) = x.dims4();
    let n = d * h * w;
    let nf = n as f64;
    let mut dx = Tensor::zeros(&x.shape);
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for ch in 0..c {
        let xa = &x.data[ch * n..(ch + 1) * n];
        let ga = &gout.data[ch * n..(ch + 1) * n];
        let mu = xa.iter().sum::<f64>() / nf;
        let var = xa.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / nf;
        let inv = 1.0 / (var + eps).sqrt();
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for (gv, &xv) in ga.iter().zip(xa) {
            let xh = (xv - mu) * inv;
            sum_g += gv;
            sum_gx += gv * xh;
        }
        dgamma.data[ch] = sum_gx;
        dbeta.data[ch] = sum_g;
        let gsc = gamma.data[ch] * inv;
        for ((o, gv), &xv) in dx.data[ch * n..(ch + 1) * n]
            .iter_mut()
            .zip(ga)
            .zip(xa)
        {
            let xh = (xv - mu) * inv;
            *o = gsc * (gv - sum_g / nf - xh * sum_gx / nf);
        }
    }
    (dx, dgamma, dbeta)
}

/// Channel softmax over a `(C, D, H, W)` tensor.
pub fn softmax_channels(x: &Tensor) -> Tensor {
    let (c, d, h, w) = x.dims4();
    let n = d * h * w;
    let mut out = Tensor::zeros(&x.shape);
    for i in 0..n {
        let mut m = f64::NEG_INFINITY;
        for ch in 0..c {
            m = m.max(x.data[ch * n + i]);
        }
        let mut z = 0.0;
        for ch in 0..c {
            let e = (x.data[ch * n + i] - m).exp();
            out.data[ch * n + i] = e;
            z += e;
        }
        for ch in 0..c {
            out.data[ch * n + i] /= z;
        }
    }
    out
}

/// Gradient of [`softmax_channels`] given the forward output `y`.
pub fn softmax_channels_grad(gout: &Tensor, y: &Tensor) -> Tensor {
    let (c, d, h, w) = y.dims4();
    let n = d * h * w;
    let mut dx = Tensor::zeros(&y.shape);
    for i in 0..n {
        let mut dot = 0.0;
        for ch in 0..c {
            dot += gout.data[ch * n + i] * y.data[ch * n + i];
        }
        for ch in 0..c {
            dx.data[ch * n + i] = y.data[ch * n + i] * (gout.data[ch * n + i] - dot);
        }
    }
    dx
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(&x.shape);
    for (o, &v) in out.data.iter_mut().zip(&x.data) {
        *o = 1.0 / (1.0 + (-v).exp());
    }
    out
}

/// Gradient of [`sigmoid`] given the forward output `y`.
pub fn sigmoid_grad(gout: &Tensor, y: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(&y.shape);
    for ((o, &g), &yv) in dx.data.iter_mut().zip(&gout.data).zip(&y.data) {
        *o = g * yv * (1.0 - yv);
    }
    dx
}

/// Channel concatenation of two `(C, D, H, W)` tensors with equal spatial dims.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let (ca, d, h, w) = a.dims4();
    let (cb, d2, h2, w2) = b.dims4();
    assert_eq!((d, h, w), (d2, h2, w2), "concat spatial mismatch");
    let mut data = Vec::with_capacity((ca + cb) * d * h * w);
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor::from_vec(&[ca + cb, d, h, w], data)
}

/// Single-channel view `(1, D, H, W)` of channel `c`.
pub fn select_channel(x: &Tensor, c: usize) -> Tensor {
    let (_, d, h, w) = x.dims4();
    let n = d * h * w;
    Tensor::from_vec(&[1, d, h, w], x.data[c * n..(c + 1) * n].to_vec())
}

/// Align-corners trilinear resampling of every channel of a `(C, D, H, W)`
/// tensor to `target` spatial shape.
pub fn resample3d(x: &Tensor, target: [usize; 3]) -> Tensor {
    let (c, d, h, w) = x.dims4();
    let [td, th, tw] = target;
    let tz = axis_table(td, d);
    let ty = axis_table(th, h);
    let tx = axis_table(tw, w);
    let n_in = d * h * w;
    let n_out = td * th * tw;
    let mut out = Tensor::zeros(&[c, td, th, tw]);
    out.data
        .par_chunks_mut(n_out)
        .enumerate()
        .for_each(|(ch, oslab)| {
            let xs = &x.data[ch * n_in..(ch + 1) * n_in];
            let mut i = 0;
            for &(z0, z1, fz) in &tz {
                for &(y0, y1, fy) in &ty {
                    for &(x0, x1, fx) in &tx {
                        let g = |zz: usize, yy: usize, xx: usize| xs[(zz * h + yy) * w + xx];
                        let c00 = g(z0, y0, x0) + (g(z0, y0, x1) - g(z0, y0, x0)) * fx;
                        let c01 = g(z0, y1, x0) + (g(z0, y1, x1) - g(z0, y1, x0)) * fx;
                        let c10 = g(z1, y0, x0) + (g(z1, y0, x1) - g(z1, y0, x0)) * fx;
                        let c11 = g(z1, y1, x0) + (g(z1, y1, x1) - g(z1, y1, x0)) * fx;
                        let c0 = c00 + (c01 - c00) * fy;
                        let c1 = c10 + (c11 - c10) * fy;
                        oslab[i] = c0 + (c1 - c0) * fz;
                        i += 1;
                    }
                }
            }
        });
    out
}

/// Gradient of [`resample3d`]: scatters each output gradient back onto the
/// 8 source corners with the same trilinear weights.
pub fn resample3d_grad(gout: &Tensor, x_shape: &[usize]) -> Tensor {
    let (c, td, th, tw) = gout.dims4();
    let (d, h, w) = (x_shape[1], x_shape[2], x_shape[3]);
    let tz = axis_table(td, d);
    let ty = axis_table(th, h);
    let tx = axis_table(tw, w);
    let n_in = d * h * w;
    let n_out = td * th * tw;
    let mut dx = Tensor::zeros(x_shape);
    dx.data
        .par_chunks_mut(n_in)
        .enumerate()
        .for_each(|(ch, xslab)| {
            let gs = &gout.data[ch * n_out..(ch + 1) * n_out];
            let mut i = 0;
            for &(z0, z1, fz) in &tz {
                for &(y0, y1, fy) in &ty {
                    for &(x0, x1, fx) in &tx {
                        let g = gs[i];
                        i += 1;
                        let (wz0, wz1) = (1.0 - fz, fz);
                        let (wy0, wy1) = (1.0 - fy, fy);
                        let (wx0, wx1) = (1.0 - fx, fx);
                        xslab[(z0 * h + y0) * w + x0] += g * wz0 * wy0 * wx0;
                        xslab[(z0 * h + y0) * w + x1] += g * wz0 * wy0 * wx1;
                        xslab[(z0 * h + y1) * w + x0] += g * wz0 * wy1 * wx0;
                        xslab[(z0 * h + y1) * w + x1] += g * wz0 * wy1 * wx1;
                        xslab[(z1 * h + y0) * w + x0] += g * wz1 * wy0 * wx0;
                        xslab[(z1 * h + y0) * w + x1] += g * wz1 * wy0 * wx1;
                        xslab[(z1 * h + y1) * w + x0] += g * wz1 * wy1 * wx0;
                        xslab[(z1 * h + y1) * w + x1] += g * wz1 * wy1 * wx1;
                    }
                }
            }
        });
    dx
}

fn axis_table(t: usize, s: usize) -> Vec<(usize, usize, f64)> {
    let r = if t <= 1 {
        0.0
    } else {
        (s - 1) as f64 / (t - 1) as f64
    };
    (0..t)
        .map(|i| {
            let c = i as f64 * r;
            let i0 = (c.floor() as usize).min(s - 1);
            let i1 = (i0 + 1).min(s - 1);
            (i0, i1, c - i0 as f64)
        })
        .collect()
}

/// Crops the box described by `spec` from every channel; out-of-bounds
/// regions are zero-filled.
pub fn crop_box(x: &Tensor, spec: &BoxSpec) -> Tensor {
    let (c, d, h, w) = x.dims4();
    let [bd, bh, bw] = spec.size;
    let mut out = Tensor::zeros(&[c, bd, bh, bw]);
    let (z0, z1, bz) = spec.src_range(0);
    let (y0, y1, by) = spec.src_range(1);
    let (x0, x1, bx) = spec.src_range(2);
    let nx = x1 - x0;
    for ch in 0..c {
        for (dz, z) in (z0..z1).enumerate() {
            for (dy, y) in (y0..y1).enumerate() {
                let src = ((ch * d + z) * h + y) * w + x0;
                let dst = ((ch * bd + bz + dz) * bh + by + dy) * bw + bx;
                out.data[dst..dst + nx].copy_from_slice(&x.data[src..src + nx]);
            }
        }
    }
    out
}

/// Gradient of [`crop_box`]: scatters the box gradient back into a
/// full-size zero tensor.
pub fn crop_box_grad(gout: &Tensor, spec: &BoxSpec, x_shape: &[usize]) -> Tensor {
    let mut dx = Tensor::zeros(x_shape);
    scatter_box(gout, spec, &mut dx);
    dx
}

/// Zero-pads a box-sized tensor back to `full_shape` spatial dims using the
/// box bookkeeping (the inverse of [`crop_box`] on the in-bounds region).
pub fn pad_back_box(x: &Tensor, spec: &BoxSpec, full_shape: [usize; 3]) -> Tensor {
    let c = x.shape[0];
    let mut out = Tensor::zeros(&[c, full_shape[0], full_shape[1], full_shape[2]]);
    scatter_box(x, spec, &mut out);
    out
}

/// Gradient of [`pad_back_box`]: crops the full-size gradient to the box.
pub fn pad_back_box_grad(gout: &Tensor, spec: &BoxSpec) -> Tensor {
    crop_box(gout, spec)
}

fn scatter_box(boxed: &Tensor, spec: &BoxSpec, full: &mut Tensor) {
    let (c, bd, bh, bw) = boxed.dims4();
    let (_, d, h, w) = full.dims4();
    let (z0, z1, bz) = spec.src_range(0);
    let (y0, y1, by) = spec.src_range(1);
    let (x0, x1, bx) = spec.src_range(2);
    let nx = x1 - x0;
    for ch in 0..c {
        for (dz, z) in (z0..z1).enumerate() {
            for (dy, y) in (y0..y1).enumerate() {
                let dst = ((ch * d + z) * h + y) * w + x0;
                let src = ((ch * bd + bz + dz) * bh + by + dy) * bw + bx;
                full.data[dst..dst + nx].copy_from_slice(&boxed.data[src..src + nx]);
            }
        }
    }
}
