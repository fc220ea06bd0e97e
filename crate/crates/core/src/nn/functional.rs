//! Differentiable layer kernels on `[N, C, H, W]` tensors.

use crate::autodiff::kernels::gemm;
use crate::autodiff::{Function, Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};

fn dims4(op: &str, s: &[usize]) -> Result<[usize; 4]> {
    match *s {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(shape_err!("{op}: expected [N, C, H, W], got {s:?}")),
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let hw = self.ho * self.wo;
        for ci in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &x[(ci * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= self.w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let hw = self.ho * self.wo;
        for ci in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut dx[(ci * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

struct Conv2d {
    geom: ConvGeom,
}

impl Function for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let gm = self.geom;
        let n = x[0].shape()[0];
        let o = x[1].shape()[0];
        let ck = gm.c * gm.kh * gm.kw;
        let hw = gm.ho * gm.wo;
        let in_len = gm.c * gm.h * gm.w;
        let mut cols = vec![0.0; ck * hw];
        let mut dcols = vec![0.0; ck * hw];
        let mut dw = needs[1].then(|| vec![0.0; o * ck]);
        let mut dx = needs[0].then(|| vec![0.0; n * in_len]);
        for s in 0..n {
            let gs = &g.data()[s * o * hw..(s + 1) * o * hw];
            if let Some(dw) = dw.as_mut() {
                gm.im2col(&x[0].data()[s * in_len..(s + 1) * in_len], &mut cols);
                gemm(o, hw, ck, 1.0, gs, false, &cols, true, 1.0, dw);
            }
            if let Some(dx) = dx.as_mut() {
                gemm(ck, o, hw, 1.0, x[1].data(), true, gs, false, 0.0, &mut dcols);
                gm.col2im(&dcols, &mut dx[s * in_len..(s + 1) * in_len]);
            }
        }
        let db = needs[2].then(|| {
            let mut db = vec![0.0; o];
            for s in 0..n {
                for (oc, acc) in db.iter_mut().enumerate() {
                    *acc += g.data()[(s * o + oc) * hw..][..hw].iter().sum::<f64>();
                }
            }
            Tensor::from_parts(vec![o], db)
        });
        vec![
            dx.map(|d| Tensor::from_parts(x[0].shape().to_vec(), d)),
            dw.map(|d| Tensor::from_parts(x[1].shape().to_vec(), d)),
            db,
        ]
    }
}

/// Cross-correlation of `x[N, C, H, W]` with `w[O, C, kh, kw]` plus `b[O]`,
/// zero padding `pad` on every side.
pub fn conv2d(tape: &mut Tape, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
    let [n, c, h, wd] = dims4("conv2d", tape.shape(x))?;
    let [o, ci, kh, kw] = dims4("conv2d weight", tape.shape(w))?;
    if ci != c {
        return Err(shape_err!("conv2d: input has {c} channels, weight expects {ci}"));
    }
    if tape.shape(b) != [o] {
        return Err(shape_err!("conv2d: bias shape {:?}, expected [{o}]", tape.shape(b)));
    }
    if stride == 0 {
        return Err(Error::Domain("conv2d: stride must be positive".into()));
    }
    if kh > h + 2 * pad || kw > wd + 2 * pad {
        return Err(shape_err!("conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd} (pad {pad})"));
    }
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let geom = ConvGeom { c, h, w: wd, kh, kw, stride, pad, ho, wo };
    let ck = c * kh * kw;
    let hw = ho * wo;
    let in_len = c * h * wd;
    let mut out = vec![0.0; n * o * hw];
    let mut cols = vec![0.0; ck * hw];
    let (xv, wv, bv) = (tape.value(x).data(), tape.value(w).data(), tape.value(b).data());
    for s in 0..n {
        let os = &mut out[s * o * hw..(s + 1) * o * hw];
        for (oc, chunk) in os.chunks_mut(hw).enumerate() {
            chunk.fill(bv[oc]);
        }
        geom.im2col(&xv[s * in_len..(s + 1) * in_len], &mut cols);
        gemm(o, ck, hw, 1.0, wv, false, &cols, false, 1.0, os);
    }
    let out = Tensor::from_parts(vec![n, o, ho, wo], out);
    Ok(tape.apply(&[x, w, b], out, Conv2d { geom }))
}

struct GroupNorm {
    groups: usize,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Function for GroupNorm {
    fn name(&self) -> &'static str {
        "group_norm"
    }

    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let [n, c, h, w] = dims4("group_norm", x[0].shape()).expect("checked in forward");
        let gamma = x[1].data();
        let hw = h * w;
        let cg = c / self.groups;
        let m = (cg * hw) as f64;
        let gd = g.data();
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        let mut dx = vec![0.0; n * c * hw];
        for s in 0..n {
            for grp in 0..self.groups {
                let base = (s * c + grp * cg) * hw;
                let len = cg * hw;
                let mut sum_d = 0.0;
                let mut sum_dx = 0.0;
                for i in 0..len {
                    let ch = grp * cg + i / hw;
                    let dy = gd[base + i];
                    let xh = self.xhat[base + i];
                    dgamma[ch] += dy * xh;
                    dbeta[ch] += dy;
                    let dxh = dy * gamma[ch];
                    sum_d += dxh;
                    sum_dx += dxh * xh;
                }
                let inv = self.inv_std[s * self.groups + grp];
                for i in 0..len {
                    let ch = grp * cg + i / hw;
                    let dxh = gd[base + i] * gamma[ch];
                    let xh = self.xhat[base + i];
                    dx[base + i] = inv / m * (m * dxh - sum_d - xh * sum_dx);
                }
            }
        }
        vec![
            needs[0].then(|| Tensor::from_parts(x[0].shape().to_vec(), dx)),
            needs[1].then(|| Tensor::from_parts(vec![c], dgamma)),
            needs[2].then(|| Tensor::from_parts(vec![c], dbeta)),
        ]
    }
}

/// Per-(sample, group) standardisation followed by a per-channel affine map.
pub fn group_norm(tape: &mut Tape, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
    let [n, c, h, w] = dims4("group_norm", tape.shape(x))?;
    if groups == 0 || c % groups != 0 {
        return Err(shape_err!("group_norm: {c} channels not divisible into {groups} groups"));
    }
    if tape.shape(gamma) != [c] || tape.shape(beta) != [c] {
        return Err(shape_err!("group_norm: affine parameters must have shape [{c}]"));
    }
    let hw = h * w;
    let cg = c / groups;
    let len = cg * hw;
    let xv = tape.value(x).data();
    let (gv, bv) = (tape.value(gamma).data(), tape.value(beta).data());
    let mut xhat = vec![0.0; n * c * hw];
    let mut inv_std = vec![0.0; n * groups];
    let mut out = vec![0.0; n * c * hw];
    for s in 0..n {
        for grp in 0..groups {
            let base = (s * c + grp * cg) * hw;
            let seg = &xv[base..base + len];
            let mean = seg.iter().sum::<f64>() / len as f64;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len as f64;
            let denom = var + eps;
            if denom <= 0.0 {
                return Err(Error::Domain("group_norm: zero variance with eps = 0".into()));
            }
            let inv = 1.0 / denom.sqrt();
            inv_std[s * groups + grp] = inv;
            for i in 0..len {
                let ch = grp * cg + i / hw;
                let xh = (seg[i] - mean) * inv;
                xhat[base + i] = xh;
                out[base + i] = gv[ch] * xh + bv[ch];
            }
        }
    }
    let out = Tensor::from_parts(vec![n, c, h, w], out);
    Ok(tape.apply(&[x, gamma, beta], out, GroupNorm { groups, xhat, inv_std }))
}

/// Spatial mean: `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool(tape: &mut Tape, x: Var) -> Result<Var> {
    let [n, c, h, w] = dims4("global_avg_pool", tape.shape(x))?;
    if h == 0 || w == 0 {
        return Err(shape_err!("global_avg_pool: empty spatial extent"));
    }
    let y = tape.reshape(x, &[n, c, h * w])?;
    tape.reduce(crate::autodiff::Reduction::Mean, y, &[2])
}

/// Non-overlapping partition of `len` into `parts` contiguous ranges.
fn partition(len: usize, parts: usize, i: usize) -> (usize, usize) {
    (i * len / parts, (i + 1) * len / parts)
}

struct AdaptivePool {
    grid: usize,
}

impl Function for AdaptivePool {
    fn name(&self) -> &'static str {
        "adaptive_avg_pool"
    }

    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let [n, c, h, w] = dims4("adaptive_avg_pool", x[0].shape()).expect("checked");
        let s = self.grid;
        let mut dx = vec![0.0; n * c * h * w];
        for plane in 0..n * c {
            for gy in 0..s {
                let (y0, y1) = partition(h, s, gy);
                for gx in 0..s {
                    let (x0, x1) = partition(w, s, gx);
                    let share = g.data()[(plane * s + gy) * s + gx] / ((y1 - y0) * (x1 - x0)) as f64;
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            dx[(plane * h + y) * w + xx] += share;
                        }
                    }
                }
            }
        }
        vec![Some(Tensor::from_parts(x[0].shape().to_vec(), dx))]
    }
}

/// Averages each cell of an `S x S` partition of the spatial grid.
pub fn adaptive_avg_pool(tape: &mut Tape, x: Var, grid: usize) -> Result<Var> {
    let [n, c, h, w] = dims4("adaptive_avg_pool", tape.shape(x))?;
    if grid == 0 || grid > h.min(w) {
        return Err(shape_err!("adaptive_avg_pool: grid {grid} does not fit {h}x{w}"));
    }
    let s = grid;
    let xv = tape.value(x).data();
    let mut out = vec![0.0; n * c * s * s];
    for plane in 0..n * c {
        for gy in 0..s {
            let (y0, y1) = partition(h, s, gy);
            for gx in 0..s {
                let (x0, x1) = partition(w, s, gx);
                let mut acc = 0.0;
                for y in y0..y1 {
                    acc += xv[(plane * h + y) * w + x0..(plane * h + y) * w + x1].iter().sum::<f64>();
                }
                out[(plane * s + gy) * s + gx] = acc / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    let out = Tensor::from_parts(vec![n, c, s, s], out);
    Ok(tape.apply(&[x], out, AdaptivePool { grid }))
}

/// Corner-aligned sample positions: `(lo, hi, frac)` per output index.
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    (0..output)
        .map(|i| {
            let pos = if output > 1 && input > 1 {
                i as f64 * (input - 1) as f64 / (output - 1) as f64
            } else {
                0.0
            };
            let lo = (pos.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

struct Upsample {
    ys: Vec<(usize, usize, f64)>,
    xs: Vec<(usize, usize, f64)>,
}

impl Function for Upsample {
    fn name(&self) -> &'static str {
        "bilinear_upsample"
    }

    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let [n, c, h, w] = dims4("bilinear_upsample", x[0].shape()).expect("checked");
        let (oh, ow) = (self.ys.len(), self.xs.len());
        let mut dx = vec![0.0; n * c * h * w];
        for plane in 0..n * c {
            let src = &mut dx[plane * h * w..(plane + 1) * h * w];
            for (oy, &(y0, y1, fy)) in self.ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in self.xs.iter().enumerate() {
                    let gv = g.data()[(plane * oh + oy) * ow + ox];
                    src[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                    src[y0 * w + x1] += gv * (1.0 - fy) * fx;
                    src[y1 * w + x0] += gv * fy * (1.0 - fx);
                    src[y1 * w + x1] += gv * fy * fx;
                }
            }
        }
        vec![Some(Tensor::from_parts(x[0].shape().to_vec(), dx))]
    }
}

/// Bilinear resize with output corners pinned to input corners.
pub fn bilinear_upsample(tape: &mut Tape, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
    let [n, c, h, w] = dims4("bilinear_upsample", tape.shape(x))?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(shape_err!("bilinear_upsample: empty extent"));
    }
    let ys = bilinear_taps(h, out_h);
    let xs = bilinear_taps(w, out_w);
    let out = resize_bilinear_planes(tape.value(x).data(), n * c, h, w, &ys, &xs);
    let out = Tensor::from_parts(vec![n, c, out_h, out_w], out);
    Ok(tape.apply(&[x], out, Upsample { ys, xs }))
}

fn resize_bilinear_planes(
    data: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    ys: &[(usize, usize, f64)],
    xs: &[(usize, usize, f64)],
) -> Vec<f64> {
    let (oh, ow) = (ys.len(), xs.len());
    let mut out = vec![0.0; planes * oh * ow];
    for plane in 0..planes {
        let src = &data[plane * h * w..(plane + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                out[(plane * oh + oy) * ow + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Corner-aligned bilinear resize of raw planes, outside any tape.
pub fn resize_bilinear(data: &[f64], planes: usize, h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    resize_bilinear_planes(data, planes, h, w, &bilinear_taps(h, out_h), &bilinear_taps(w, out_w))
}

struct ToRows;

impl Function for ToRows {
    fn name(&self) -> &'static str {
        "to_rows"
    }

    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let [n, c, h, w] = dims4("to_rows", x[0].shape()).expect("checked");
        let hw = h * w;
        let mut dx = vec![0.0; n * c * hw];
        for s in 0..n {
            for p in 0..hw {
                for ch in 0..c {
                    dx[(s * c + ch) * hw + p] = g.data()[(s * hw + p) * c + ch];
                }
            }
        }
        vec![Some(Tensor::from_parts(x[0].shape().to_vec(), dx))]
    }
}

/// Channels-last flattening: `[N, C, H, W] -> [N * H * W, C]`.
pub fn to_rows(tape: &mut Tape, x: Var) -> Result<Var> {
    let [n, c, h, w] = dims4("to_rows", tape.shape(x))?;
    let hw = h * w;
    let xv = tape.value(x).data();
    let mut out = vec![0.0; n * c * hw];
    for s in 0..n {
        for ch in 0..c {
            for p in 0..hw {
                out[(s * hw + p) * c + ch] = xv[(s * c + ch) * hw + p];
            }
        }
    }
    let out = Tensor::from_parts(vec![n * hw, c], out);
    Ok(tape.apply(&[x], out, ToRows))
}

struct NormalizeRows {
    norms: Vec<f64>,
}

impl Function for NormalizeRows {
    fn name(&self) -> &'static str {
        "l2_normalize_rows"
    }

    fn backward(&self, _: &[&Tensor], y: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let d = y.shape()[1];
        let mut dx = vec![0.0; y.len()];
        for (r, &norm) in self.norms.iter().enumerate() {
            let yr = &y.data()[r * d..(r + 1) * d];
            let gr = &g.data()[r * d..(r + 1) * d];
            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
            for i in 0..d {
                dx[r * d + i] = (gr[i] - yr[i] * dot) / norm;
            }
        }
        vec![Some(Tensor::from_parts(y.shape().to_vec(), dx))]
    }
}

/// Scales every row of `x[N, D]` to unit L2 norm. A zero row is an error.
pub fn l2_normalize_rows(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 2 {
        return Err(shape_err!("l2_normalize_rows: expected [N, D], got {s:?}"));
    }
    let d = s[1];
    let mut out = tape.value(x).clone();
    let mut norms = Vec::with_capacity(s[0]);
    for row in out.data_mut().chunks_mut(d.max(1)) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= f64::MIN_POSITIVE {
            return Err(Error::Domain("l2_normalize_rows: zero vector (dead projection)".into()));
        }
        for v in row.iter_mut() {
            *v /= norm;
        }
        norms.push(norm);
    }
    Ok(tape.apply(&[x], out, NormalizeRows { norms }))
}

/// `x W^T + b` for `x[N, in]`, `W[out, in]`, `b[out]`.
pub fn linear(tape: &mut Tape, w: Var, b: Var, x: Var) -> Result<Var> {
    let (sw, sx) = (tape.shape(w), tape.shape(x));
    if sw.len() != 2 || sx.len() != 2 || sw[1] != sx[1] {
        return Err(shape_err!("linear: weight {:?} incompatible with input {:?}", sw, sx));
    }
    let wt = tape.transpose(w)?;
    let y = tape.matmul(x, wt)?;
    tape.add_row_bias(y, b)
}
