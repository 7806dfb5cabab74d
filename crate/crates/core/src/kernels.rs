//! Raw NCHW compute kernels used by the tape. No graph bookkeeping here.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stride, symmetric zero padding, dilation and group count of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self { stride: 1, padding: 0, dilation: 1, groups: 1 }
    }
}

impl ConvSpec {
    pub fn output_len(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }
}

/// Square pooling window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolSpec {
    pub fn output_len(&self, input: usize) -> usize {
        (input + 2 * self.padding - self.kernel) / self.stride + 1
    }
}

pub(crate) fn dims4(t: &Tensor, what: &str) -> Result<[usize; 4]> {
    match *t.shape() {
        [b, c, h, w] => Ok([b, c, h, w]),
        ref s => Err(Error::Shape(format!("{what} expects a 4-d NCHW tensor, got {s:?}"))),
    }
}

/// Output positions `o` in `0..out_len` for which `o * stride + offset` lies in `0..in_len`.
fn valid_range(offset: isize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    let last = in_len as isize - 1 - offset;
    let hi = if last < 0 { 0 } else { (last / s + 1).min(out_len as isize) };
    let lo = lo.min(out_len as isize);
    (lo as usize, hi.max(lo) as usize)
}

struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    cin_g: usize,
    cout_g: usize,
}

fn conv_geom(x: &Tensor, weight: &Tensor, spec: &ConvSpec) -> Result<ConvGeom> {
    let [batch, cin, h, w] = dims4(x, "conv2d input")?;
    let [cout, cin_g, kh, kw] = dims4(weight, "conv2d kernel")?;
    if spec.groups == 0 || spec.stride == 0 || spec.dilation == 0 {
        return Err(Error::Shape(format!("conv2d: invalid spec {spec:?}")));
    }
    if cin % spec.groups != 0 || cout % spec.groups != 0 {
        return Err(Error::Shape(format!(
            "conv2d: channels in={cin} out={cout} not divisible by groups={}",
            spec.groups
        )));
    }
    if cin / spec.groups != cin_g {
        return Err(Error::Shape(format!(
            "conv2d: kernel expects {cin_g} input channels per group, input has {} (groups={})",
            cin / spec.groups,
            spec.groups
        )));
    }
    let (ho, wo) = match (spec.output_len(h, kh), spec.output_len(w, kw)) {
        (Some(ho), Some(wo)) => (ho, wo),
        _ => {
            return Err(Error::Shape(format!(
                "conv2d: kernel {kh}x{kw} (dilation {}) larger than padded input {h}x{w}",
                spec.dilation
            )))
        }
    };
    Ok(ConvGeom { batch, cin, h, w, cout, kh, kw, ho, wo, cin_g, cout_g: cout / spec.groups })
}

/// `y[i] += a · x[i]` over the shorter of the two slices.
fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    for (y, x) in y.iter_mut().zip(x) {
        *y += a * x;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(a, b)| a * b).sum()
}

/// Cross-correlation of `x` (B×C×H×W) with `weight` (O×C/g×kh×kw).
pub fn conv2d(x: &Tensor, weight: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let g = conv_geom(x, weight, spec)?;
    let mut out = vec![0.0; g.batch * g.cout * g.ho * g.wo];
    let xd = x.data();
    let wd = weight.data();
    let (s, p, d) = (spec.stride, spec.padding as isize, spec.dilation);
    let pointwise = g.kh == 1 && g.kw == 1 && s == 1 && p == 0;
    for b in 0..g.batch {
        for grp in 0..spec.groups {
            for oc in 0..g.cout_g {
                let oc_abs = grp * g.cout_g + oc;
                let out_plane = &mut out[(b * g.cout + oc_abs) * g.ho * g.wo..][..g.ho * g.wo];
                for ic in 0..g.cin_g {
                    let ic_abs = grp * g.cin_g + ic;
                    let x_plane = &xd[(b * g.cin + ic_abs) * g.h * g.w..][..g.h * g.w];
                    let k_base = (oc_abs * g.cin_g + ic) * g.kh * g.kw;
                    if pointwise {
                        axpy(out_plane, x_plane, wd[k_base]);
                        continue;
                    }
                    for ky in 0..g.kh {
                        let offy = (ky * d) as isize - p;
                        let (oy_lo, oy_hi) = valid_range(offy, s, g.h, g.ho);
                        for kx in 0..g.kw {
                            let wv = wd[k_base + ky * g.kw + kx];
                            let offx = (kx * d) as isize - p;
                            let (ox_lo, ox_hi) = valid_range(offx, s, g.w, g.wo);
                            if ox_lo >= ox_hi {
                                continue;
                            }
                            let ix_lo = ((ox_lo * s) as isize + offx) as usize;
                            for oy in oy_lo..oy_hi {
                                let iy = (oy * s) as isize + offy;
                                let x_row = &x_plane[iy as usize * g.w..][..g.w];
                                let o_row = &mut out_plane[oy * g.wo..][ox_lo..ox_hi];
                                if s == 1 {
                                    axpy(o_row, &x_row[ix_lo..], wv);
                                } else {
                                    for (o, x) in o_row.iter_mut().zip(x_row[ix_lo..].iter().step_by(s)) {
                                        *o += wv * x;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[g.batch, g.cout, g.ho, g.wo], out)
}

/// Gradients of [`conv2d`] with respect to its input and kernel given the output gradient.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    spec: &ConvSpec,
    want_input: bool,
    want_weight: bool,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let g = conv_geom(x, weight, spec)?;
    let xd = x.data();
    let wd = weight.data();
    let gd = grad_out.data();
    let mut dx = want_input.then(|| vec![0.0; xd.len()]);
    let mut dw = want_weight.then(|| vec![0.0; wd.len()]);
    let (s, p, d) = (spec.stride, spec.padding as isize, spec.dilation);
    let pointwise = g.kh == 1 && g.kw == 1 && s == 1 && p == 0;
    for b in 0..g.batch {
        for grp in 0..spec.groups {
            for oc in 0..g.cout_g {
                let oc_abs = grp * g.cout_g + oc;
                let g_plane = &gd[(b * g.cout + oc_abs) * g.ho * g.wo..][..g.ho * g.wo];
                for ic in 0..g.cin_g {
                    let ic_abs = grp * g.cin_g + ic;
                    let x_off = (b * g.cin + ic_abs) * g.h * g.w;
                    let k_base = (oc_abs * g.cin_g + ic) * g.kh * g.kw;
                    if pointwise {
                        let plane = g.h * g.w;
                        if let Some(dx) = dx.as_mut() {
                            axpy(&mut dx[x_off..][..plane], g_plane, wd[k_base]);
                        }
                        if let Some(dw) = dw.as_mut() {
                            dw[k_base] += dot(g_plane, &xd[x_off..][..plane]);
                        }
                        continue;
                    }
                    for ky in 0..g.kh {
                        let offy = (ky * d) as isize - p;
                        let (oy_lo, oy_hi) = valid_range(offy, s, g.h, g.ho);
                        for kx in 0..g.kw {
                            let offx = (kx * d) as isize - p;
                            let (ox_lo, ox_hi) = valid_range(offx, s, g.w, g.wo);
                            if ox_lo >= ox_hi {
                                continue;
                            }
                            let ix_lo = ((ox_lo * s) as isize + offx) as usize;
                            let wv = wd[k_base + ky * g.kw + kx];
                            let mut acc = 0.0;
                            for oy in oy_lo..oy_hi {
                                let iy = ((oy * s) as isize + offy) as usize;
                                let g_row = &g_plane[oy * g.wo..][ox_lo..ox_hi];
                                let row_off = x_off + iy * g.w;
                                if let Some(dx) = dx.as_mut() {
                                    let dx_row = &mut dx[row_off..][..g.w];
                                    if s == 1 {
                                        axpy(&mut dx_row[ix_lo..], g_row, wv);
                                    } else {
                                        for (dxv, gv) in dx_row[ix_lo..].iter_mut().step_by(s).zip(g_row) {
                                            *dxv += wv * gv;
                                        }
                                    }
                                }
                                if dw.is_some() {
                                    let x_row = &xd[row_off..][..g.w];
                                    acc += if s == 1 {
                                        dot(g_row, &x_row[ix_lo..])
                                    } else {
                                        g_row.iter().zip(x_row[ix_lo..].iter().step_by(s)).map(|(a, b)| a * b).sum()
                                    };
                                }
                            }
                            if let Some(dw) = dw.as_mut() {
                                dw[k_base + ky * g.kw + kx] += acc;
                            }
                        }
                    }
                }
            }
        }
    }
    let dx = dx.map(|v| Tensor::new(x.shape(), v)).transpose()?;
    let dw = dw.map(|v| Tensor::new(weight.shape(), v)).transpose()?;
    Ok((dx, dw))
}

/// Max pooling; returns the output and, per output element, the flat input index of its maximum.
/// Padded positions never win.
pub fn max_pool2d(x: &Tensor, spec: &PoolSpec) -> Result<(Tensor, Vec<usize>)> {
    let [b, c, h, w] = dims4(x, "max_pool2d")?;
    let (ho, wo) = (spec.output_len(h), spec.output_len(w));
    let xd = x.data();
    let pad = spec.padding as isize;
    let window = |o: usize, len: usize| valid_range((o * spec.stride) as isize - pad, 1, len, spec.kernel);
    let cols: Vec<(usize, usize)> = (0..wo).map(|ox| window(ox, w)).collect();
    let rows: Vec<(usize, usize)> = (0..ho).map(|oy| window(oy, h)).collect();
    let mut out = Vec::with_capacity(b * c * ho * wo);
    let mut arg = Vec::with_capacity(b * c * ho * wo);
    // Row pass: max over the horizontal window for every input row; column pass over rows.
    // Both keep the first maximum, so ties resolve in row-major window order.
    let mut row_max = vec![(f64::NEG_INFINITY, 0usize); h * wo];
    for plane in 0..b * c {
        let base = plane * h * w;
        for iy in 0..h {
            let x_row = &xd[base + iy * w..][..w];
            for (ox, &(lo, hi)) in cols.iter().enumerate() {
                let start = ox * spec.stride + lo - spec.padding;
                let mut best = (x_row[start], start);
                for ix in start + 1..start + (hi - lo) {
                    if x_row[ix] > best.0 {
                        best = (x_row[ix], ix);
                    }
                }
                row_max[iy * wo + ox] = (best.0, base + iy * w + best.1);
            }
        }
        for (oy, &(lo, hi)) in rows.iter().enumerate() {
            let start = oy * spec.stride + lo - spec.padding;
            for ox in 0..wo {
                let mut best = row_max[start * wo + ox];
                for iy in start + 1..start + (hi - lo) {
                    let cand = row_max[iy * wo + ox];
                    if cand.0 > best.0 {
                        best = cand;
                    }
                }
                out.push(best.0);
                arg.push(best.1);
            }
        }
    }
    Ok((Tensor::new(&[b, c, ho, wo], out)?, arg))
}

/// Average pooling that always divides by the full window size (padding counts as zeros).
pub fn avg_pool2d(x: &Tensor, spec: &PoolSpec) -> Result<Tensor> {
    let [b, c, h, w] = dims4(x, "avg_pool2d")?;
    let (ho, wo) = (spec.output_len(h), spec.output_len(w));
    let xd = x.data();
    let norm = 1.0 / (spec.kernel * spec.kernel) as f64;
    let mut out = vec![0.0; b * c * ho * wo];
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for_window(spec, h, w, oy, ox, |iy, ix| acc += xd[base + iy * w + ix]);
                out[(plane * ho + oy) * wo + ox] = acc * norm;
            }
        }
    }
    Tensor::new(&[b, c, ho, wo], out)
}

pub fn avg_pool2d_backward(input_shape: &[usize], grad_out: &Tensor, spec: &PoolSpec) -> Tensor {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (ho, wo) = (grad_out.shape()[2], grad_out.shape()[3]);
    let planes = input_shape[0] * input_shape[1];
    let norm = 1.0 / (spec.kernel * spec.kernel) as f64;
    let gd = grad_out.data();
    let mut dx = Tensor::zeros(input_shape);
    let dxd = dx.data_mut();
    for plane in 0..planes {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let g = gd[(plane * ho + oy) * wo + ox] * norm;
                for_window(spec, h, w, oy, ox, |iy, ix| dxd[base + iy * w + ix] += g);
            }
        }
    }
    dx
}

fn for_window(
    spec: &PoolSpec,
    h: usize,
    w: usize,
    oy: usize,
    ox: usize,
    mut f: impl FnMut(usize, usize),
) {
    for ky in 0..spec.kernel {
        let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        for kx in 0..spec.kernel {
            let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
            if ix >= 0 && ix < w as isize {
                f(iy as usize, ix as usize);
            }
        }
    }
}
