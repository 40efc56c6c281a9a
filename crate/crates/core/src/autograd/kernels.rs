//! Forward and backward compute kernels for the structured ops.
//!
//! All loops run in a fixed order so results are bitwise deterministic.
//! Accumulations are plain left-to-right sums; nothing here is threaded.

/// C[m×n] = A[m×k] · B[k×n]
pub fn matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// dA[m×k] = G[m×n] · Bᵀ (B is k×n)
pub fn matmul_g_bt(m: usize, k: usize, n: usize, g: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += grow[j] * brow[j];
            }
            orow[p] = acc;
        }
    }
    out
}

/// dB[k×n] = Aᵀ · G[m×n] (A is m×k)
pub fn matmul_at_g(m: usize, k: usize, n: usize, a: &[f64], g: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * grow[j];
            }
        }
    }
    out
}

pub struct ConvDims {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Cross-correlation: out[co,oy,ox] = Σ_{ci,ky,kx} x[ci, oy·s+ky−p, ox·s+kx−p] · k[co,ci,ky,kx]
pub fn conv2d_forward(d: &ConvDims, x: &[f64], kernel: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; d.c_out * d.oh * d.ow];
    for co in 0..d.c_out {
        let och = &mut out[co * d.oh * d.ow..(co + 1) * d.oh * d.ow];
        for ci in 0..d.c_in {
            let xch = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
            let kch = &kernel[(co * d.c_in + ci) * d.kh * d.kw..(co * d.c_in + ci + 1) * d.kh * d.kw];
            for ky in 0..d.kh {
                for kx in 0..d.kw {
                    let kv = kch[ky * d.kw + kx];
                    for oy in 0..d.oh {
                        let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let xrow = &xch[iy as usize * d.w..(iy as usize + 1) * d.w];
                        let orow = &mut och[oy * d.ow..(oy + 1) * d.ow];
                        for ox in 0..d.ow {
                            let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                            if ix >= 0 && ix < d.w as isize {
                                orow[ox] += kv * xrow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient wrt the input.
pub fn conv2d_dx(d: &ConvDims, kernel: &[f64], g: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; d.c_in * d.h * d.w];
    for co in 0..d.c_out {
        let gch = &g[co * d.oh * d.ow..(co + 1) * d.oh * d.ow];
        for ci in 0..d.c_in {
            let dxch = &mut dx[ci * d.h * d.w..(ci + 1) * d.h * d.w];
            let kch = &kernel[(co * d.c_in + ci) * d.kh * d.kw..(co * d.c_in + ci + 1) * d.kh * d.kw];
            for ky in 0..d.kh {
                for kx in 0..d.kw {
                    let kv = kch[ky * d.kw + kx];
                    for oy in 0..d.oh {
                        let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let grow = &gch[oy * d.ow..(oy + 1) * d.ow];
                        let dxrow = &mut dxch[iy as usize * d.w..(iy as usize + 1) * d.w];
                        for ox in 0..d.ow {
                            let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                            if ix >= 0 && ix < d.w as isize {
                                dxrow[ix as usize] += kv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Gradient wrt the kernel.
pub fn conv2d_dk(d: &ConvDims, x: &[f64], g: &[f64]) -> Vec<f64> {
    let mut dk = vec![0.0; d.c_out * d.c_in * d.kh * d.kw];
    for co in 0..d.c_out {
        let gch = &g[co * d.oh * d.ow..(co + 1) * d.oh * d.ow];
        for ci in 0..d.c_in {
            let xch = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
            let dkch = &mut dk[(co * d.c_in + ci) * d.kh * d.kw..(co * d.c_in + ci + 1) * d.kh * d.kw];
            for ky in 0..d.kh {
                for kx in 0..d.kw {
                    let mut acc = 0.0;
                    for oy in 0..d.oh {
                        let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let xrow = &xch[iy as usize * d.w..(iy as usize + 1) * d.w];
                        let grow = &gch[oy * d.ow..(oy + 1) * d.ow];
                        for ox in 0..d.ow {
                            let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                            if ix >= 0 && ix < d.w as isize {
                                acc += grow[ox] * xrow[ix as usize];
                            }
                        }
                    }
                    dkch[ky * d.kw + kx] += acc;
                }
            }
        }
    }
    dk
}

/// Max-subtracted softmax along the middle extent of an (outer, len, inner) view.
pub fn softmax_forward(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for r in 0..inner {
            let base = o * len * inner + r;
            let mut max = f64::NEG_INFINITY;
            for i in 0..len {
                max = max.max(x[base + i * inner]);
            }
            let mut sum = 0.0;
            for i in 0..len {
                let e = (x[base + i * inner] - max).exp();
                out[base + i * inner] = e;
                sum += e;
            }
            for i in 0..len {
                out[base + i * inner] /= sum;
            }
        }
    }
    out
}

/// dx = s ⊙ (g − Σ g·s), per softmax slice.
pub fn softmax_backward(s: &[f64], g: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut dx = vec![0.0; s.len()];
    for o in 0..outer {
        for r in 0..inner {
            let base = o * len * inner + r;
            let mut dot = 0.0;
            for i in 0..len {
                let idx = base + i * inner;
                dot += g[idx] * s[idx];
            }
            for i in 0..len {
                let idx = base + i * inner;
                dx[idx] = s[idx] * (g[idx] - dot);
            }
        }
    }
    dx
}

/// Sample positions for bilinear interpolation, align-corners-false.
/// Returns (lo index, hi index, weight of hi) for every output coordinate.
fn bilinear_taps(out_len: usize, in_len: usize, scale: f64) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) / scale - 0.5;
            let lo = src.floor();
            let t = src - lo;
            let lo = lo as isize;
            let i0 = lo.clamp(0, in_len as isize - 1) as usize;
            let i1 = (lo + 1).clamp(0, in_len as isize - 1) as usize;
            (i0, i1, t)
        })
        .collect()
}

/// Bilinear resize of a [c, h, w] volume by ×2 (`up`) or ×0.5.
pub fn resize_forward(x: &[f64], c: usize, h: usize, w: usize, up: bool) -> Vec<f64> {
    let (oh, ow) = if up { (h * 2, w * 2) } else { (h / 2, w / 2) };
    let scale = if up { 2.0 } else { 0.5 };
    let ty = bilinear_taps(oh, h, scale);
    let tx = bilinear_taps(ow, w, scale);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let xch = &x[ch * h * w..(ch + 1) * h * w];
        let och = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            let r0 = &xch[y0 * w..y0 * w + w];
            let r1 = &xch[y1 * w..y1 * w + w];
            let orow = &mut och[oy * ow..(oy + 1) * ow];
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let top = r0[x0] * (1.0 - wx) + r0[x1] * wx;
                let bot = r1[x0] * (1.0 - wx) + r1[x1] * wx;
                orow[ox] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}

/// Adjoint of `resize_forward`: scatter the output gradient through the taps.
pub fn resize_backward(g: &[f64], c: usize, h: usize, w: usize, up: bool) -> Vec<f64> {
    let (oh, ow) = if up { (h * 2, w * 2) } else { (h / 2, w / 2) };
    let scale = if up { 2.0 } else { 0.5 };
    let ty = bilinear_taps(oh, h, scale);
    let tx = bilinear_taps(ow, w, scale);
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        let gch = &g[ch * oh * ow..(ch + 1) * oh * ow];
        let dxch = &mut dx[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            let grow = &gch[oy * ow..(oy + 1) * ow];
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let gv = grow[ox];
                dxch[y0 * w + x0] += gv * (1.0 - wy) * (1.0 - wx);
                dxch[y0 * w + x1] += gv * (1.0 - wy) * wx;
                dxch[y1 * w + x0] += gv * wy * (1.0 - wx);
                dxch[y1 * w + x1] += gv * wy * wx;
            }
        }
    }
    dx
}
