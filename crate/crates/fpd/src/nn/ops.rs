//! Layer forward/backward kernels: same-padding convolution, dense layers,
//! ReLU, layer normalization, LSTM step, and softmax helpers.
//!
//! All kernels are plain loops ordered so the innermost dimension is
//! contiguous. Parallel loops own disjoint output slices, which keeps
//! results bitwise reproducible.

use rayon::prelude::*;

use super::tensor::{NnError, Tensor};

const LN_EPS: f64 = 1e-5;

/// Threshold below which rayon dispatch costs more than it saves.
const PAR_MIN_WORK: usize = 1 << 14;

/// Dot product with eight independent accumulators so the loop pipelines and
/// vectorizes; the summation order is fixed, keeping results reproducible.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let ita = a.chunks_exact(8);
    let itb = b.chunks_exact(8);
    let (ra, rb) = (ita.remainder(), itb.remainder());
    for (ca, cb) in ita.zip(itb) {
        for k in 0..8 {
            acc[k] = ca[k].mul_add(cb[k], acc[k]);
        }
    }
    let mut total = ((acc[0] + acc[1]) + (acc[2] + acc[3]))
        + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        total = x.mul_add(*y, total);
    }
    total
}

/// `y += a * x` over equal-length slices.
#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = xi.mul_add(a, *yi);
    }
}

fn dims4(t: &Tensor, what: &str) -> Result<[usize; 4], NnError> {
    match t.shape() {
        &[a, b, c, d] => Ok([a, b, c, d]),
        s => Err(NnError::Shape(format!("{what} must be rank 4, got {s:?}"))),
    }
}

fn dims2(t: &Tensor, what: &str) -> Result<[usize; 2], NnError> {
    match t.shape() {
        &[a, b] => Ok([a, b]),
        s => Err(NnError::Shape(format!("{what} must be rank 2, got {s:?}"))),
    }
}

/// Leading dimension as rows, everything else flattened to features.
fn rows_feats(t: &Tensor, what: &str) -> Result<(usize, usize), NnError> {
    match t.shape() {
        [] => Err(NnError::Shape(format!("{what} must have a batch dim"))),
        [n, rest @ ..] => Ok((*n, rest.iter().product())),
    }
}

// ---------------------------------------------------------------------------
// Convolution (stride 1, zero "same" padding, odd kernels)
// ---------------------------------------------------------------------------

/// Cross-correlation of `x: (N, C_in, H, W)` with `kernels:
/// (C_out, C_in, KH, KW)`, preserving the spatial dims.
pub fn conv2d_forward(x: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<Tensor, NnError> {
    let [n, c_in, h, w] = dims4(x, "conv input")?;
    let [c_out, kc_in, kh, kw] = dims4(kernels, "conv kernels")?;
    if kc_in != c_in {
        return Err(NnError::Shape(format!(
            "kernels expect {kc_in} input channels, input has {c_in}"
        )));
    }
    if bias.shape() != [c_out] {
        return Err(NnError::Shape("conv bias must be (C_out,)".into()));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(NnError::Shape("same padding needs odd kernel sides".into()));
    }
    let (ph, pw) = (kh / 2, kw / 2);
    let mut y = Tensor::zeros(&[n, c_out, h, w]);
    let plane = h * w;
    let xd = x.data();
    let kd = kernels.data();
    let bd = bias.data();

    let work = |(idx, yp): (usize, &mut [f64])| {
        let (ni, co) = (idx / c_out, idx % c_out);
        yp.fill(bd[co]);
        for ci in 0..c_in {
            let xp = &xd[(ni * c_in + ci) * plane..(ni * c_in + ci + 1) * plane];
            for u in 0..kh {
                // rows where the shifted input row stays in bounds
                let i_lo = ph.saturating_sub(u);
                let i_hi = (h + ph).saturating_sub(u).min(h);
                for v in 0..kw {
                    let kv = kd[((co * c_in + ci) * kh + u) * kw + v];
                    if kv == 0.0 {
                        continue;
                    }
                    let j_lo = pw.saturating_sub(v);
                    let j_hi = (w + pw).saturating_sub(v).min(w);
                    for i in i_lo..i_hi {
                        let xrow = &xp[(i + u - ph) * w..(i + u - ph + 1) * w];
                        let yrow = &mut yp[i * w..(i + 1) * w];
                        axpy(
                            &mut yrow[j_lo..j_hi],
                            kv,
                            &xrow[j_lo + v - pw..j_hi + v - pw],
                        );
                    }
                }
            }
        }
    };

    if n * c_out * plane >= PAR_MIN_WORK {
        y.data_mut().par_chunks_mut(plane).enumerate().for_each(work);
    } else {
        y.data_mut().chunks_mut(plane).enumerate().for_each(work);
    }
    Ok(y)
}

/// Gradients of [`conv2d_forward`]. Returns `(dx, dkernels, dbias)`;
/// `dx` is skipped when `need_dx` is false (input layer).
pub fn conv2d_backward(
    x: &Tensor,
    kernels: &Tensor,
    dy: &Tensor,
    need_dx: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor), NnError> {
    let [n, c_in, h, w] = dims4(x, "conv input")?;
    let [c_out, _, kh, kw] = dims4(kernels, "conv kernels")?;
    if dy.shape() != [n, c_out, h, w] {
        return Err(NnError::Shape(format!(
            "conv dy shape {:?} does not match output",
            dy.shape()
        )));
    }
    let (ph, pw) = (kh / 2, kw / 2);
    let plane = h * w;
    let xd = x.data();
    let kd = kernels.data();
    let dyd = dy.data();

    let mut dbias = Tensor::zeros(&[c_out]);
    for co in 0..c_out {
        let mut acc = 0.0;
        for ni in 0..n {
            acc += dyd[(ni * c_out + co) * plane..(ni * c_out + co + 1) * plane]
                .iter()
                .sum::<f64>();
        }
        dbias.data_mut()[co] = acc;
    }

    // dkernels: each co row owned by one task.
    let mut dkern = Tensor::zeros(&[c_out, c_in, kh, kw]);
    let krow = c_in * kh * kw;
    let kwork = |(co, dkp): (usize, &mut [f64])| {
        for ni in 0..n {
            let dyp = &dyd[(ni * c_out + co) * plane..(ni * c_out + co + 1) * plane];
            for ci in 0..c_in {
                let xp = &xd[(ni * c_in + ci) * plane..(ni * c_in + ci + 1) * plane];
                for u in 0..kh {
                    let i_lo = ph.saturating_sub(u);
                    let i_hi = (h + ph).saturating_sub(u).min(h);
                    for v in 0..kw {
                        let j_lo = pw.saturating_sub(v);
                        let j_hi = (w + pw).saturating_sub(v).min(w);
                        let mut acc = 0.0;
                        for i in i_lo..i_hi {
                            let xrow = &xp[(i + u - ph) * w..(i + u - ph + 1) * w];
                            let dyrow = &dyp[i * w..(i + 1) * w];
                            acc += dot(&dyrow[j_lo..j_hi], &xrow[j_lo + v - pw..j_hi + v - pw]);
                        }
                        dkp[(ci * kh + u) * kw + v] += acc;
                    }
                }
            }
        }
    };
    if c_out * n * plane >= PAR_MIN_WORK {
        dkern.data_mut().par_chunks_mut(krow).enumerate().for_each(kwork);
    } else {
        dkern.data_mut().chunks_mut(krow).enumerate().for_each(kwork);
    }

    let dx = if need_dx {
        let mut dx = Tensor::zeros(&[n, c_in, h, w]);
        let xwork = |(idx, dxp): (usize, &mut [f64])| {
            let (ni, ci) = (idx / c_in, idx % c_in);
            for co in 0..c_out {
                let dyp = &dyd[(ni * c_out + co) * plane..(ni * c_out + co + 1) * plane];
                for u in 0..kh {
                    // dx[i] pulls from dy[i + ph - u]
                    let i_lo = u.saturating_sub(ph);
                    let i_hi = (h + u).saturating_sub(ph).min(h);
                    for v in 0..kw {
                        let kv = kd[((co * c_in + ci) * kh + u) * kw + v];
                        if kv == 0.0 {
                            continue;
                        }
                        let j_lo = v.saturating_sub(pw);
                        let j_hi = (w + v).saturating_sub(pw).min(w);
                        for i in i_lo..i_hi {
                            let dyrow = &dyp[(i + ph - u) * w..(i + ph - u + 1) * w];
                            let dxrow = &mut dxp[i * w..(i + 1) * w];
                            axpy(
                                &mut dxrow[j_lo..j_hi],
                                kv,
                                &dyrow[j_lo + pw - v..j_hi + pw - v],
                            );
                        }
                    }
                }
            }
        };
        if n * c_in * plane >= PAR_MIN_WORK {
            dx.data_mut().par_chunks_mut(plane).enumerate().for_each(xwork);
        } else {
            dx.data_mut().chunks_mut(plane).enumerate().for_each(xwork);
        }
        Some(dx)
    } else {
        None
    };

    Ok((dx, dkern, dbias))
}

// ---------------------------------------------------------------------------
// Dense
// ---------------------------------------------------------------------------

/// Affine map `y = x W^T + b` with `x: (N, In)`, `w: (Out, In)`.
pub fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, NnError> {
    let [n, d_in] = dims2(x, "dense input")?;
    let [d_out, w_in] = dims2(w, "dense weight")?;
    if w_in != d_in {
        return Err(NnError::Shape(format!(
            "dense weight expects {w_in} inputs, got {d_in}"
        )));
    }
    if b.shape() != [d_out] {
        return Err(NnError::Shape("dense bias must be (Out,)".into()));
    }
    let mut y = Tensor::zeros(&[n, d_out]);
    let xd = x.data();
    let wd = w.data();
    let bd = b.data();
    let work = |(ni, yrow): (usize, &mut [f64])| {
        let xrow = &xd[ni * d_in..(ni + 1) * d_in];
        for o in 0..d_out {
            let wrow = &wd[o * d_in..(o + 1) * d_in];
            yrow[o] = bd[o] + dot(xrow, wrow);
        }
    };
    if n * d_out * d_in >= PAR_MIN_WORK {
        y.data_mut().par_chunks_mut(d_out).enumerate().for_each(work);
    } else {
        y.data_mut().chunks_mut(d_out).enumerate().for_each(work);
    }
    Ok(y)
}

/// Gradients of [`dense_forward`]: `(dx, dw, db)`.
pub fn dense_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    need_dx: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor), NnError> {
    let [n, d_in] = dims2(x, "dense input")?;
    let [d_out, _] = dims2(w, "dense weight")?;
    if dy.shape() != [n, d_out] {
        return Err(NnError::Shape("dense dy shape mismatch".into()));
    }
    let xd = x.data();
    let wd = w.data();
    let dyd = dy.data();

    let mut db = Tensor::zeros(&[d_out]);
    for ni in 0..n {
        for o in 0..d_out {
            db.data_mut()[o] += dyd[ni * d_out + o];
        }
    }

    let mut dw = Tensor::zeros(&[d_out, d_in]);
    let wwork = |(o, dwrow): (usize, &mut [f64])| {
        for ni in 0..n {
            let g = dyd[ni * d_out + o];
            if g == 0.0 {
                continue;
            }
            axpy(dwrow, g, &xd[ni * d_in..(ni + 1) * d_in]);
        }
    };
    if d_out * n * d_in >= PAR_MIN_WORK {
        dw.data_mut().par_chunks_mut(d_in).enumerate().for_each(wwork);
    } else {
        dw.data_mut().chunks_mut(d_in).enumerate().for_each(wwork);
    }

    let dx = if need_dx {
        let mut dx = Tensor::zeros(&[n, d_in]);
        let xwork = |(ni, dxrow): (usize, &mut [f64])| {
            for o in 0..d_out {
                let g = dyd[ni * d_out + o];
                if g == 0.0 {
                    continue;
                }
                axpy(dxrow, g, &wd[o * d_in..(o + 1) * d_in]);
            }
        };
        if n * d_out * d_in >= PAR_MIN_WORK {
            dx.data_mut().par_chunks_mut(d_in).enumerate().for_each(xwork);
        } else {
            dx.data_mut().chunks_mut(d_in).enumerate().for_each(xwork);
        }
        Some(dx)
    } else {
        None
    };
    Ok((dx, dw, db))
}

// ---------------------------------------------------------------------------
// ReLU
// ---------------------------------------------------------------------------

pub fn relu_forward(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for v in y.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    y
}

pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    debug_assert_eq!(x.shape(), dy.shape());
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Layer normalization
// ---------------------------------------------------------------------------

/// Normalizes each sample's feature vector to mean 0 / variance 1, then
/// applies the per-feature affine `gain, offset`. The input is treated as
/// `(N, F)` with all trailing dims flattened into F.
pub fn layer_norm_forward(x: &Tensor, gain: &Tensor, offset: &Tensor) -> Result<Tensor, NnError> {
    let (n, f) = rows_feats(x, "layer-norm input")?;
    if gain.shape() != [f] || offset.shape() != [f] {
        return Err(NnError::Shape(format!(
            "layer-norm gain/offset must be ({f},), got {:?}",
            gain.shape()
        )));
    }
    let mut y = Tensor::zeros(x.shape());
    let xd = x.data();
    let gd = gain.data();
    let od = offset.data();
    let work = |(ni, yrow): (usize, &mut [f64])| {
        let xrow = &xd[ni * f..(ni + 1) * f];
        let mean = xrow.iter().sum::<f64>() / f as f64;
        let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / f as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for i in 0..f {
            yrow[i] = gd[i] * (xrow[i] - mean) * inv + od[i];
        }
    };
    if n * f >= PAR_MIN_WORK {
        y.data_mut().par_chunks_mut(f).enumerate().for_each(work);
    } else {
        y.data_mut().chunks_mut(f).enumerate().for_each(work);
    }
    Ok(y)
}

/// Gradients of [`layer_norm_forward`]: `(dx, dgain, doffset)`.
pub fn layer_norm_backward(
    x: &Tensor,
    gain: &Tensor,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor), NnError> {
    let (n, f) = rows_feats(x, "layer-norm input")?;
    if dy.shape() != x.shape() {
        return Err(NnError::Shape("layer-norm dy shape mismatch".into()));
    }
    let xd = x.data();
    let gd = gain.data();
    let dyd = dy.data();
    let mut dx = Tensor::zeros(x.shape());
    let mut dgain = Tensor::zeros(&[f]);
    let mut doffset = Tensor::zeros(&[f]);

    let work = |(ni, dxrow): (usize, &mut [f64])| {
        let xrow = &xd[ni * f..(ni + 1) * f];
        let dyrow = &dyd[ni * f..(ni + 1) * f];
        let fl = f as f64;
        let mean = xrow.iter().sum::<f64>() / fl;
        let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / fl;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        // sums of dxhat and dxhat * xhat over the row
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for i in 0..f {
            let xhat = (xrow[i] - mean) * inv;
            let dxhat = dyrow[i] * gd[i];
            s1 += dxhat;
            s2 += dxhat * xhat;
        }
        for i in 0..f {
            let xhat = (xrow[i] - mean) * inv;
            let dxhat = dyrow[i] * gd[i];
            dxrow[i] = inv * (dxhat - s1 / fl - xhat * s2 / fl);
        }
    };
    if n * f >= PAR_MIN_WORK {
        dx.data_mut().par_chunks_mut(f).enumerate().for_each(work);
    } else {
        dx.data_mut().chunks_mut(f).enumerate().for_each(work);
    }

    for ni in 0..n {
        let xrow = &xd[ni * f..(ni + 1) * f];
        let dyrow = &dyd[ni * f..(ni + 1) * f];
        let fl = f as f64;
        let mean = xrow.iter().sum::<f64>() / fl;
        let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / fl;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        let dg = dgain.data_mut();
        let doff = doffset.data_mut();
        for i in 0..f {
            dg[i] += dyrow[i] * (xrow[i] - mean) * inv;
            doff[i] += dyrow[i];
        }
    }
    Ok((dx, dgain, doffset))
}

// ---------------------------------------------------------------------------
// LSTM
// ---------------------------------------------------------------------------

/// Weights of a single LSTM cell; rows are gate-major `[i, f, g, o]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub w_ih: Tensor, // (4H, In)
    pub w_hh: Tensor, // (4H, H)
    pub b: Tensor,    // (4H,)
}

/// Everything the backward pass needs from one forward step.
#[derive(Debug, Clone)]
pub struct LstmCache {
    pub x: Tensor,
    pub h_in: Tensor,
    pub c_in: Tensor,
    gates: Tensor, // (N, 4H) post-activation [i, f, g, o]
    tanh_c: Tensor,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// One gated recurrence step: returns `(h', c', cache)`.
pub fn lstm_step_forward(
    x: &Tensor,
    h: &Tensor,
    c: &Tensor,
    params: &LstmParams,
) -> Result<(Tensor, Tensor, LstmCache), NnError> {
    let [n, _d_in] = dims2(x, "lstm input")?;
    let [four_h, _] = dims2(&params.w_ih, "lstm w_ih")?;
    let hidden = four_h / 4;
    if h.shape() != [n, hidden] || c.shape() != [n, hidden] {
        return Err(NnError::Shape(format!(
            "lstm state must be (N, {hidden}), got h {:?} c {:?}",
            h.shape(),
            c.shape()
        )));
    }
    // z = x W_ih^T + h W_hh^T + b
    let mut z = dense_forward(x, &params.w_ih, &params.b)?;
    let hz = dense_forward(h, &params.w_hh, &Tensor::zeros(&[four_h]))?;
    z.add_assign(&hz);

    let mut gates = Tensor::zeros(&[n, four_h]);
    let mut c_out = Tensor::zeros(&[n, hidden]);
    let mut h_out = Tensor::zeros(&[n, hidden]);
    let mut tanh_c = Tensor::zeros(&[n, hidden]);
    for ni in 0..n {
        let zrow = &z.data()[ni * four_h..(ni + 1) * four_h];
        let crow = &c.data()[ni * hidden..(ni + 1) * hidden];
        for k in 0..hidden {
            let ig = sigmoid(zrow[k]);
            let fg = sigmoid(zrow[hidden + k]);
            let gg = zrow[2 * hidden + k].tanh();
            let og = sigmoid(zrow[3 * hidden + k]);
            let cn = fg * crow[k] + ig * gg;
            let tc = cn.tanh();
            let base = ni * four_h;
            gates.data_mut()[base + k] = ig;
            gates.data_mut()[base + hidden + k] = fg;
            gates.data_mut()[base + 2 * hidden + k] = gg;
            gates.data_mut()[base + 3 * hidden + k] = og;
            c_out.data_mut()[ni * hidden + k] = cn;
            tanh_c.data_mut()[ni * hidden + k] = tc;
            h_out.data_mut()[ni * hidden + k] = og * tc;
        }
    }
    let cache = LstmCache {
        x: x.clone(),
        h_in: h.clone(),
        c_in: c.clone(),
        gates,
        tanh_c,
    };
    Ok((h_out, c_out, cache))
}

/// Backward through one step. `dh` and `dc` are the gradients flowing into
/// `h'` and `c'`; returns `(dx, dh_in, dc_in)` and accumulates parameter
/// gradients into `dparams`.
pub fn lstm_step_backward(
    params: &LstmParams,
    cache: &LstmCache,
    dh: &Tensor,
    dc: &Tensor,
    dparams: &mut LstmParams,
) -> Result<(Tensor, Tensor, Tensor), NnError> {
    let [n, hidden] = dims2(dh, "lstm dh")?;
    let four_h = 4 * hidden;
    let mut dz = Tensor::zeros(&[n, four_h]);
    let mut dc_in = Tensor::zeros(&[n, hidden]);
    for ni in 0..n {
        let base = ni * four_h;
        let g = &cache.gates.data()[base..base + four_h];
        for k in 0..hidden {
            let (ig, fg, gg, og) = (g[k], g[hidden + k], g[2 * hidden + k], g[3 * hidden + k]);
            let tc = cache.tanh_c.data()[ni * hidden + k];
            let dh_k = dh.data()[ni * hidden + k];
            let dc_total = dc.data()[ni * hidden + k] + dh_k * og * (1.0 - tc * tc);
            let c_prev = cache.c_in.data()[ni * hidden + k];
            let d_i = dc_total * gg;
            let d_f = dc_total * c_prev;
            let d_g = dc_total * ig;
            let d_o = dh_k * tc;
            dz.data_mut()[base + k] = d_i * ig * (1.0 - ig);
            dz.data_mut()[base + hidden + k] = d_f * fg * (1.0 - fg);
            dz.data_mut()[base + 2 * hidden + k] = d_g * (1.0 - gg * gg);
            dz.data_mut()[base + 3 * hidden + k] = d_o * og * (1.0 - og);
            dc_in.data_mut()[ni * hidden + k] = dc_total * fg;
        }
    }
    let (dx, dw_ih, db) = dense_backward(&cache.x, &params.w_ih, &dz, true)?;
    let (dh_in, dw_hh, _) = dense_backward(&cache.h_in, &params.w_hh, &dz, true)?;
    dparams.w_ih.add_assign(&dw_ih);
    dparams.w_hh.add_assign(&dw_hh);
    dparams.b.add_assign(&db);
    Ok((dx.expect("need_dx"), dh_in.expect("need_dx"), dc_in))
}

// ---------------------------------------------------------------------------
// Softmax helpers (row-wise over the last dimension)
// ---------------------------------------------------------------------------

pub fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn log_softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|&v| v - log_sum).collect()
}
