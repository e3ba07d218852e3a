//! Dense compute kernels backing the tape ops. Parallel paths split work
//! over disjoint output slices with a fixed per-slice accumulation order,
//! so results are bit-identical at any thread count.

use rayon::prelude::*;

use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

#[inline]
fn clamp_range(lo: isize, hi: isize, max: isize) -> (usize, usize) {
    let lo = lo.clamp(0, max) as usize;
    let hi = hi.clamp(0, max) as usize;
    (lo, hi.max(lo))
}

pub fn conv2d_out_shape(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Vec<usize>> {
    if x.len() != 4 || w.len() != 4 {
        return Err(Error::shape("conv2d", format!("input {:?}, weight {:?}", x, w)));
    }
    let (n, c, h, ww) = (x[0], x[1], x[2], x[3]);
    let (o, wc, kh, kw) = (w[0], w[1], w[2], w[3]);
    if c != wc {
        return Err(Error::shape(
            "conv2d",
            format!("input channels {} vs weight channels {}", c, wc),
        ));
    }
    if stride == 0 {
        return Err(Error::shape("conv2d", "stride must be at least 1".to_string()));
    }
    if h + 2 * pad < kh || ww + 2 * pad < kw {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {}x{} larger than padded input {}x{}", kh, kw, h + 2 * pad, ww + 2 * pad),
        ));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (ww + 2 * pad - kw) / stride + 1;
    Ok(vec![n, o, oh, ow])
}

pub fn conv2d_forward(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let out_shape = conv2d_out_shape(x.shape(), w.shape(), stride, pad)?;
    let (_n, c, h, iw) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let mut out = Tensor::zeros(&out_shape);
    let xd = x.data();
    let wd = w.data();
    out.data_mut()
        .par_chunks_mut(o * oh * ow)
        .enumerate()
        .for_each(|(ni, out_n)| {
            for oi in 0..o {
                let out_plane = &mut out_n[oi * oh * ow..(oi + 1) * oh * ow];
                for ci in 0..c {
                    let x_plane = &xd[(ni * c + ci) * h * iw..(ni * c + ci + 1) * h * iw];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = wd[((oi * c + ci) * kh + ky) * kw + kx];
                            if stride == 1 {
                                let (oy_lo, oy_hi) = clamp_range(
                                    pad as isize - ky as isize,
                                    h as isize + pad as isize - ky as isize,
                                    oh as isize,
                                );
                                let (ox_lo, ox_hi) = clamp_range(
                                    pad as isize - kx as isize,
                                    iw as isize + pad as isize - kx as isize,
                                    ow as isize,
                                );
                                if ox_lo >= ox_hi {
                                    continue;
                                }
                                for oy in oy_lo..oy_hi {
                                    let iy = oy + ky - pad;
                                    let ix = ox_lo + kx - pad;
                                    let orow = &mut out_plane[oy * ow + ox_lo..oy * ow + ox_hi];
                                    let xrow = &x_plane[iy * iw + ix..iy * iw + ix + (ox_hi - ox_lo)];
                                    for (od, &xv) in orow.iter_mut().zip(xrow) {
                                        *od += wv * xv;
                                    }
                                }
                            } else {
                                for oy in 0..oh {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for ox in 0..ow {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix >= iw as isize {
                                            continue;
                                        }
                                        out_plane[oy * ow + ox] +=
                                            wv * x_plane[iy as usize * iw + ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Gradient of the convolution output with respect to its input.
pub fn conv2d_backward_input(
    x_shape: &[usize],
    w: &Tensor,
    gout: &Tensor,
    stride: usize,
    pad: usize,
) -> Tensor {
    let (_n, c, h, iw) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (o, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (oh, ow) = (gout.shape()[2], gout.shape()[3]);
    let mut gx = Tensor::zeros(x_shape);
    let wd = w.data();
    let gd = gout.data();
    gx.data_mut()
        .par_chunks_mut(c * h * iw)
        .enumerate()
        .for_each(|(ni, gx_n)| {
            for ci in 0..c {
                let gx_plane = &mut gx_n[ci * h * iw..(ci + 1) * h * iw];
                for oi in 0..o {
                    let g_plane = &gd[(ni * o + oi) * oh * ow..(ni * o + oi + 1) * oh * ow];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = wd[((oi * c + ci) * kh + ky) * kw + kx];
                            if stride == 1 {
                                let (oy_lo, oy_hi) = clamp_range(
                                    pad as isize - ky as isize,
                                    h as isize + pad as isize - ky as isize,
                                    oh as isize,
                                );
                                let (ox_lo, ox_hi) = clamp_range(
                                    pad as isize - kx as isize,
                                    iw as isize + pad as isize - kx as isize,
                                    ow as isize,
                                );
                                if ox_lo >= ox_hi {
                                    continue;
                                }
                                for oy in oy_lo..oy_hi {
                                    let iy = oy + ky - pad;
                                    let ix = ox_lo + kx - pad;
                                    let grow = &g_plane[oy * ow + ox_lo..oy * ow + ox_hi];
                                    let xrow =
                                        &mut gx_plane[iy * iw + ix..iy * iw + ix + (ox_hi - ox_lo)];
                                    for (xd, &gv) in xrow.iter_mut().zip(grow) {
                                        *xd += wv * gv;
                                    }
                                }
                            } else {
                                for oy in 0..oh {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for ox in 0..ow {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix >= iw as isize {
                                            continue;
                                        }
                                        gx_plane[iy as usize * iw + ix as usize] +=
                                            wv * g_plane[oy * ow + ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    gx
}

/// Gradient of the convolution output with respect to the weights.
pub fn conv2d_backward_weight(
    x: &Tensor,
    w_shape: &[usize],
    gout: &Tensor,
    stride: usize,
    pad: usize,
) -> Tensor {
    let (n, c, h, iw) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (_, _, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
    let o = w_shape[0];
    let (oh, ow) = (gout.shape()[2], gout.shape()[3]);
    let mut gw = Tensor::zeros(w_shape);
    let xd = x.data();
    let gd = gout.data();
    gw.data_mut()
        .par_chunks_mut(c * kh * kw)
        .enumerate()
        .for_each(|(oi, gw_o)| {
            for ci in 0..c {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut acc = 0.0;
                        for ni in 0..n {
                            let g_plane = &gd[(ni * o + oi) * oh * ow..(ni * o + oi + 1) * oh * ow];
                            let x_plane = &xd[(ni * c + ci) * h * iw..(ni * c + ci + 1) * h * iw];
                            if stride == 1 {
                                let (oy_lo, oy_hi) = clamp_range(
                                    pad as isize - ky as isize,
                                    h as isize + pad as isize - ky as isize,
                                    oh as isize,
                                );
                                let (ox_lo, ox_hi) = clamp_range(
                                    pad as isize - kx as isize,
                                    iw as isize + pad as isize - kx as isize,
                                    ow as isize,
                                );
                                if ox_lo >= ox_hi {
                                    continue;
                                }
                                for oy in oy_lo..oy_hi {
                                    let iy = oy + ky - pad;
                                    let ix = ox_lo + kx - pad;
                                    let grow = &g_plane[oy * ow + ox_lo..oy * ow + ox_hi];
                                    let xrow = &x_plane[iy * iw + ix..iy * iw + ix + (ox_hi - ox_lo)];
                                    for (&gv, &xv) in grow.iter().zip(xrow) {
                                        acc += gv * xv;
                                    }
                                }
                            } else {
                                for oy in 0..oh {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for ox in 0..ow {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix >= iw as isize {
                                            continue;
                                        }
                                        acc += g_plane[oy * ow + ox]
                                            * x_plane[iy as usize * iw + ix as usize];
                                    }
                                }
                            }
                        }
                        gw_o[(ci * kh + ky) * kw + kx] = acc;
                    }
                }
            }
        });
    gw
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = Tensor::zeros(&[m, n]);
    let ad = a.data();
    let bd = b.data();
    let od = out.data_mut();
    for i in 0..m {
        let orow = &mut od[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = ad[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[kk * n..(kk + 1) * n];
            for (ov, &bv) in orow.iter_mut().zip(brow) {
                *ov += av * bv;
            }
        }
    }
    Ok(out)
}

pub fn transpose2(x: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 2 {
        return Err(Error::shape("transpose2", format!("{:?}", x.shape())));
    }
    let (m, n) = (x.shape()[0], x.shape()[1]);
    let mut out = Tensor::zeros(&[n, m]);
    let xd = x.data();
    let od = out.data_mut();
    for i in 0..m {
        for j in 0..n {
            od[j * m + i] = xd[i * n + j];
        }
    }
    Ok(out)
}

pub fn sum_pool2_forward(x: &Tensor, k: usize) -> Result<Tensor> {
    if x.shape().len() != 4 {
        return Err(Error::shape("sum_pool2", format!("{:?}", x.shape())));
    }
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::shape(
            "sum_pool2",
            format!("window {} must evenly divide {}x{}", k, h, w),
        ));
    }
    let (oh, ow) = (h / k, w / k);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let xd = x.data();
    let od = out.data_mut();
    for p in 0..n * c {
        let x_plane = &xd[p * h * w..(p + 1) * h * w];
        let o_plane = &mut od[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ky in 0..k {
                let row = &x_plane[(oy * k + ky) * w..(oy * k + ky + 1) * w];
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for &v in &row[ox * k..(ox + 1) * k] {
                        acc += v;
                    }
                    o_plane[oy * ow + ox] += acc;
                }
            }
        }
    }
    Ok(out)
}

pub fn sum_pool2_backward(x_shape: &[usize], gout: &Tensor, k: usize) -> Tensor {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (oh, ow) = (h / k, w / k);
    let mut gx = Tensor::zeros(x_shape);
    let gd = gout.data();
    let gxd = gx.data_mut();
    for p in 0..n * c {
        let g_plane = &gd[p * oh * ow..(p + 1) * oh * ow];
        let gx_plane = &mut gxd[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                gx_plane[y * w + x] = g_plane[(y / k) * ow + x / k];
            }
        }
    }
    gx
}
