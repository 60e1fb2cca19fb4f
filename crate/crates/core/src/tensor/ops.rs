//! Forward operations and their backward rules.
//!
//! Accumulation order is part of each op's contract and is fixed, which
//! pins bitwise determinism. Reductions over the flat index run
//! left-to-right. The hot kernels accumulate in fixed small groups so the
//! loops vectorize without losing determinism: matmul folds k in blocks of
//! four (block-internal products combine left-to-right, blocks accumulate
//! in order), 3x3 convolution combines the three horizontal taps of one
//! (channel, row) pair before accumulating, and long dot products stripe
//! across four lanes that combine as (l0+l1)+(l2+l3) at the end.

use std::collections::HashMap;

use super::{kernels, pass_slot, shape_err, Tensor};
use crate::error::{Error, Result};

const BCE_CLAMP: f64 = 1e-7;

pub(crate) enum Op {
    Matmul { a: Tensor, b: Tensor },
    Transpose { x: Tensor },
    Reshape { x: Tensor },
    ConcatChannels { parts: Vec<Tensor> },
    Conv2d { x: Tensor, w: Tensor, b: Tensor, padding: usize },
    Relu { x: Tensor },
    Sigmoid { x: Tensor },
    Add { a: Tensor, b: Tensor },
    Sub { a: Tensor, b: Tensor },
    Mul { a: Tensor, b: Tensor },
    MulChannel { x: Tensor, s: Tensor },
    Scale { x: Tensor, k: f64 },
    SoftmaxRows { x: Tensor },
    AvgPoolGlobal { x: Tensor },
    MaxPool2x2 { x: Tensor },
    UpsampleNearest2x { x: Tensor },
    BceLoss { pred: Tensor, target: Tensor },
    Sum { x: Tensor },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Matmul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::ConcatChannels { .. } => "concat_channels",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::MulChannel { .. } => "mul_channel",
            Op::Scale { .. } => "scale",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::AvgPoolGlobal { .. } => "avg_pool_global",
            Op::MaxPool2x2 { .. } => "max_pool_2x2",
            Op::UpsampleNearest2x { .. } => "upsample_nearest_2x",
            Op::BceLoss { .. } => "bce_loss",
            Op::Sum { .. } => "sum",
        }
    }

    pub(crate) fn inputs(&self) -> Vec<&Tensor> {
        match self {
            Op::Matmul { a, b } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
                vec![a, b]
            }
            Op::Transpose { x }
            | Op::Reshape { x }
            | Op::Relu { x }
            | Op::Sigmoid { x }
            | Op::Scale { x, .. }
            | Op::SoftmaxRows { x }
            | Op::AvgPoolGlobal { x }
            | Op::MaxPool2x2 { x }
            | Op::UpsampleNearest2x { x }
            | Op::Sum { x } => vec![x],
            Op::ConcatChannels { parts } => parts.iter().collect(),
            Op::Conv2d { x, w, b, .. } => vec![x, w, b],
            Op::MulChannel { x, s } => vec![x, s],
            Op::BceLoss { pred, target } => vec![pred, target],
        }
    }

    /// Propagate `g` (gradient w.r.t. `out`) into the in-pass buffers of the
    /// inputs that are on the tape.
    pub(crate) fn backward(&self, out: &Tensor, g: &[f64], pass: &mut HashMap<u64, Vec<f64>>) {
        match self {
            Op::Matmul { a, b } => {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                if a.requires_grad() {
                    let bd = b.data();
                    let da = pass_slot(pass, a);
                    // dA[i,k] += sum_j g[i,j] * B[k,j]
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            da[i * k + kk] +=
                                kernels::dot_striped(grow, &bd[kk * n..(kk + 1) * n]);
                        }
                    }
                }
                if b.requires_grad() {
                    let ad = a.data();
                    let db = pass_slot(pass, b);
                    // dB[k,j] += sum_i A[i,k] * g[i,j]
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let av = ad[i * k + kk];
                            let brow = &mut db[kk * n..(kk + 1) * n];
                            for (dv, gv) in brow.iter_mut().zip(grow) {
                                *dv += av * gv;
                            }
                        }
                    }
                }
            }
            Op::Transpose { x } => {
                if x.requires_grad() {
                    let (m, n) = (x.shape()[0], x.shape()[1]);
                    let dx = pass_slot(pass, x);
                    for i in 0..m {
                        for j in 0..n {
                            dx[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if x.requires_grad() {
                    let dx = pass_slot(pass, x);
                    for (d, gv) in dx.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::ConcatChannels { parts } => {
                let mut offset = 0;
                for p in parts {
                    let len = p.numel();
                    if p.requires_grad() {
                        let dp = pass_slot(pass, p);
                        for (d, gv) in dp.iter_mut().zip(&g[offset..offset + len]) {
                            *d += gv;
                        }
                    }
                    offset += len;
                }
            }
            Op::Conv2d { x, w, b, padding } => {
                conv2d_backward(x, w, b, *padding, out, g, pass);
            }
            Op::Relu { x } => {
                if x.requires_grad() {
                    let xd = x.data();
                    let dx = pass_slot(pass, x);
                    for i in 0..xd.len() {
                        if xd[i] > 0.0 {
                            dx[i] += g[i];
                        }
                    }
                }
            }
            Op::Sigmoid { x } => {
                if x.requires_grad() {
                    let yd = out.data();
                    let dx = pass_slot(pass, x);
                    for i in 0..yd.len() {
                        dx[i] += g[i] * yd[i] * (1.0 - yd[i]);
                    }
                }
            }
            Op::Add { a, b } => {
                for t in [a, b] {
                    if t.requires_grad() {
                        let dt = pass_slot(pass, t);
                        for (d, gv) in dt.iter_mut().zip(g) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Sub { a, b } => {
                if a.requires_grad() {
                    let da = pass_slot(pass, a);
                    for (d, gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if b.requires_grad() {
                    let db = pass_slot(pass, b);
                    for (d, gv) in db.iter_mut().zip(g) {
                        *d -= gv;
                    }
                }
            }
            Op::Mul { a, b } => {
                if a.requires_grad() {
                    let bd = b.data();
                    let da = pass_slot(pass, a);
                    for i in 0..bd.len() {
                        da[i] += g[i] * bd[i];
                    }
                }
                if b.requires_grad() {
                    let ad = a.data();
                    let db = pass_slot(pass, b);
                    for i in 0..ad.len() {
                        db[i] += g[i] * ad[i];
                    }
                }
            }
            Op::MulChannel { x, s } => {
                let c = x.shape()[0];
                let hw = x.shape()[1] * x.shape()[2];
                if x.requires_grad() {
                    let sd = s.data();
                    let dx = pass_slot(pass, x);
                    for ch in 0..c {
                        let sv = sd[ch];
                        for i in 0..hw {
                            dx[ch * hw + i] += g[ch * hw + i] * sv;
                        }
                    }
                }
                if s.requires_grad() {
                    let xd = x.data();
                    let ds = pass_slot(pass, s);
                    for ch in 0..c {
                        let mut acc = 0.0;
                        for i in 0..hw {
                            acc += g[ch * hw + i] * xd[ch * hw + i];
                        }
                        ds[ch] += acc;
                    }
                }
            }
            Op::Scale { x, k } => {
                if x.requires_grad() {
                    let dx = pass_slot(pass, x);
                    for (d, gv) in dx.iter_mut().zip(g) {
                        *d += k * gv;
                    }
                }
            }
            Op::SoftmaxRows { x } => {
                if x.requires_grad() {
                    let yd = out.data();
                    let (n, d) = (x.shape()[0], x.shape()[1]);
                    let dx = pass_slot(pass, x);
                    for r in 0..n {
                        let yrow = &yd[r * d..(r + 1) * d];
                        let grow = &g[r * d..(r + 1) * d];
                        let mut dot = 0.0;
                        for (yv, gv) in yrow.iter().zip(grow) {
                            dot += yv * gv;
                        }
                        let drow = &mut dx[r * d..(r + 1) * d];
                        for j in 0..d {
                            drow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::AvgPoolGlobal { x } => {
                if x.requires_grad() {
                    let c = x.shape()[0];
                    let hw = x.shape()[1] * x.shape()[2];
                    let inv = 1.0 / hw as f64;
                    let dx = pass_slot(pass, x);
                    for ch in 0..c {
                        let gv = g[ch] * inv;
                        for i in 0..hw {
                            dx[ch * hw + i] += gv;
                        }
                    }
                }
            }
            Op::MaxPool2x2 { x } => {
                if x.requires_grad() {
                    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                    let (ho, wo) = (h / 2, w / 2);
                    let xd = x.data();
                    let dx = pass_slot(pass, x);
                    for ch in 0..c {
                        for i in 0..ho {
                            for j in 0..wo {
                                // Recompute the argmax; ties go to the first
                                // position in (di, dj) scan order, matching
                                // the forward pass.
                                let mut best = f64::NEG_INFINITY;
                                let mut best_idx = 0;
                                for di in 0..2 {
                                    for dj in 0..2 {
                                        let idx = (ch * h + 2 * i + di) * w + 2 * j + dj;
                                        if xd[idx] > best {
                                            best = xd[idx];
                                            best_idx = idx;
                                        }
                                    }
                                }
                                dx[best_idx] += g[(ch * ho + i) * wo + j];
                            }
                        }
                    }
                }
            }
            Op::UpsampleNearest2x { x } => {
                if x.requires_grad() {
                    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                    let w2 = 2 * w;
                    let dx = pass_slot(pass, x);
                    for ch in 0..c {
                        for i in 0..h {
                            for j in 0..w {
                                let mut acc = 0.0;
                                for di in 0..2 {
                                    for dj in 0..2 {
                                        acc += g[(ch * 2 * h + 2 * i + di) * w2 + 2 * j + dj];
                                    }
                                }
                                dx[(ch * h + i) * w + j] += acc;
                            }
                        }
                    }
                }
            }
            Op::BceLoss { pred, target } => {
                if pred.requires_grad() {
                    let pd = pred.data();
                    let td = target.data();
                    let n = pd.len() as f64;
                    let g0 = g[0] / n;
                    let lo = BCE_CLAMP;
                    let hi = 1.0 - BCE_CLAMP;
                    let dp = pass_slot(pass, pred);
                    for i in 0..pd.len() {
                        let p = pd[i];
                        // Clamping zeroes the gradient outside [lo, hi].
                        if p >= lo && p <= hi {
                            dp[i] += g0 * (p - td[i]) / (p * (1.0 - p));
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if x.requires_grad() {
                    let dx = pass_slot(pass, x);
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
        }
    }
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    padding: usize,
    out: &Tensor,
    g: &[f64],
    pass: &mut HashMap<u64, Vec<f64>>,
) {
    let (ci, h, wid) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let (ho, wo) = (out.shape()[1], out.shape()[2]);
    let p = padding as isize;

    if b.requires_grad() {
        let db = pass_slot(pass, b);
        for o in 0..co {
            let mut acc = 0.0;
            for gv in &g[o * ho * wo..(o + 1) * ho * wo] {
                acc += gv;
            }
            db[o] += acc;
        }
    }
    if w.requires_grad() {
        let xd = x.data();
        let dw = pass_slot(pass, w);
        for o in 0..co {
            let gplane = &g[o * ho * wo..(o + 1) * ho * wo];
            for c in 0..ci {
                if k == 3 {
                    for di in 0..3usize {
                        let off_i = di as isize - p;
                        let (i0, i1) = valid_range(off_i, h, ho);
                        let mut acc = [0.0f64; 3];
                        for i in i0..i1 {
                            let xi = (i as isize + off_i) as usize;
                            kernels::conv3_row_dw(
                                &gplane[i * wo..(i + 1) * wo],
                                &xd[(c * h + xi) * wid..(c * h + xi + 1) * wid],
                                p,
                                &mut acc,
                            );
                        }
                        for dj in 0..3 {
                            dw[((o * ci + c) * 3 + di) * 3 + dj] += acc[dj];
                        }
                    }
                    continue;
                }
                for di in 0..k {
                    let off_i = di as isize - p;
                    let (i0, i1) = valid_range(off_i, h, ho);
                    for dj in 0..k {
                        let off_j = dj as isize - p;
                        let (j0, j1) = valid_range(off_j, wid, wo);
                        let mut acc = 0.0;
                        for i in i0..i1 {
                            let xi = (i as isize + off_i) as usize;
                            let xrow = &xd[(c * h + xi) * wid..(c * h + xi + 1) * wid];
                            let grow = &gplane[i * wo..(i + 1) * wo];
                            let xs = (j0 as isize + off_j) as usize;
                            let len = j1 - j0;
                            for (gv, xv) in grow[j0..j1].iter().zip(&xrow[xs..xs + len]) {
                                acc += gv * xv;
                            }
                        }
                        dw[((o * ci + c) * k + di) * k + dj] += acc;
                    }
                }
            }
        }
    }
    if x.requires_grad() {
        let wd = w.data();
        let dx = pass_slot(pass, x);
        for o in 0..co {
            let gplane = &g[o * ho * wo..(o + 1) * ho * wo];
            for c in 0..ci {
                if k == 3 {
                    let w9 = &wd[(o * ci + c) * 9..(o * ci + c) * 9 + 9];
                    for di in 0..3usize {
                        let off_i = di as isize - p;
                        let (i0, i1) = valid_range(off_i, h, ho);
                        // The input gradient is the correlation of g with
                        // the horizontally flipped taps at mirrored padding.
                        let taps = [w9[di * 3 + 2], w9[di * 3 + 1], w9[di * 3]];
                        for i in i0..i1 {
                            let xi = (i as isize + off_i) as usize;
                            kernels::conv3_row(
                                &mut dx[(c * h + xi) * wid..(c * h + xi + 1) * wid],
                                &gplane[i * wo..(i + 1) * wo],
                                taps,
                                2 - p,
                            );
                        }
                    }
                    continue;
                }
                for di in 0..k {
                    let off_i = di as isize - p;
                    let (i0, i1) = valid_range(off_i, h, ho);
                    for dj in 0..k {
                        let off_j = dj as isize - p;
                        let (j0, j1) = valid_range(off_j, wid, wo);
                        let wv = wd[((o * ci + c) * k + di) * k + dj];
                        for i in i0..i1 {
                            let xi = (i as isize + off_i) as usize;
                            let dxrow = &mut dx[(c * h + xi) * wid..(c * h + xi + 1) * wid];
                            let grow = &gplane[i * wo..(i + 1) * wo];
                            let xs = (j0 as isize + off_j) as usize;
                            let len = j1 - j0;
                            for (dv, gv) in dxrow[xs..xs + len].iter_mut().zip(&grow[j0..j1]) {
                                *dv += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Output index range [start, end) such that `idx + off` stays within
/// `0..input_extent`, clipped to `0..output_extent`.
fn valid_range(off: isize, input_extent: usize, output_extent: usize) -> (usize, usize) {
    let start = (-off).max(0) as usize;
    let end = (input_extent as isize - off).clamp(0, output_extent as isize) as usize;
    (start, end.max(start))
}

impl Tensor {
    /// Matrix product of rank-2 tensors: `[M,K] x [K,N] -> [M,N]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(shape_err(
                "matmul",
                format!("expects rank-2 inputs, got {:?} and {:?}", self.shape(), other.shape()),
            ));
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (other.shape()[0], other.shape()[1]);
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!("inner dims disagree: {:?} x {:?}", self.shape(), other.shape()),
            ));
        }
        let ad = self.data();
        let bd = other.data();
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(&ad, &bd, &mut out, m, k, n);
        drop(ad);
        drop(bd);
        Tensor::from_op(
            vec![m, n],
            out,
            Op::Matmul {
                a: self.clone(),
                b: other.clone(),
            },
        )
    }

    /// Rank-2 transpose.
    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(shape_err(
                "transpose",
                format!("expects a rank-2 input, got {:?}", self.shape()),
            ));
        }
        let (m, n) = (self.shape()[0], self.shape()[1]);
        let xd = self.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xd[i * n + j];
            }
        }
        drop(xd);
        Tensor::from_op(vec![n, m], out, Op::Transpose { x: self.clone() })
    }

    /// Same data, new shape (element counts must match).
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(shape_err(
                "reshape",
                format!("cannot reshape {:?} into {:?}", self.shape(), shape),
            ));
        }
        Tensor::from_op(shape.to_vec(), self.to_vec(), Op::Reshape { x: self.clone() })
    }

    /// Concatenate rank-3 `[C_i,H,W]` tensors along the channel axis.
    pub fn concat_channels(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(shape_err("concat_channels", "no inputs"));
        }
        let (h, w) = (parts[0].shape().get(1), parts[0].shape().get(2));
        let mut channels = 0;
        for p in parts {
            if p.rank() != 3 || p.shape().get(1) != h || p.shape().get(2) != w {
                return Err(shape_err(
                    "concat_channels",
                    format!("incompatible part shape {:?}", p.shape()),
                ));
            }
            channels += p.shape()[0];
        }
        let mut out = Vec::with_capacity(channels * h.unwrap() * w.unwrap());
        for p in parts {
            out.extend_from_slice(&p.data());
        }
        Tensor::from_op(
            vec![channels, *h.unwrap(), *w.unwrap()],
            out,
            Op::ConcatChannels {
                parts: parts.to_vec(),
            },
        )
    }

    /// 2-D cross-correlation with bias: `x [C_in,H,W]`, `w [C_out,C_in,k,k]`,
    /// `b [C_out]`, square odd kernel, zero padding.
    /// Output is `[C_out, H+2p-k+1, W+2p-k+1]`.
    pub fn conv2d(&self, w: &Tensor, b: &Tensor, padding: usize) -> Result<Tensor> {
        if self.rank() != 3 || w.rank() != 4 || b.rank() != 1 {
            return Err(shape_err(
                "conv2d",
                format!(
                    "expects x rank 3, w rank 4, b rank 1; got {:?}, {:?}, {:?}",
                    self.shape(),
                    w.shape(),
                    b.shape()
                ),
            ));
        }
        let (ci, h, wid) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (co, wci, k, k2) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        if wci != ci {
            return Err(shape_err(
                "conv2d",
                format!("input has {} channels but kernel expects {}", ci, wci),
            ));
        }
        if k != k2 || k % 2 == 0 {
            return Err(shape_err("conv2d", format!("kernel must be square and odd, got {}x{}", k, k2)));
        }
        if b.shape()[0] != co {
            return Err(shape_err(
                "conv2d",
                format!("bias length {} != {} output channels", b.shape()[0], co),
            ));
        }
        let p = padding as isize;
        let ho = h as isize + 2 * p - k as isize + 1;
        let wo = wid as isize + 2 * p - k as isize + 1;
        if ho < 1 || wo < 1 {
            return Err(shape_err(
                "conv2d",
                format!("output would be {}x{} for input {}x{}", ho, wo, h, wid),
            ));
        }
        let (ho, wo) = (ho as usize, wo as usize);

        let xd = self.data();
        let wd = w.data();
        let bd = b.data();
        let mut out = vec![0.0; co * ho * wo];
        if k == 3 {
            for o in 0..co {
                let plane = &mut out[o * ho * wo..(o + 1) * ho * wo];
                plane.fill(bd[o]);
                for c in 0..ci {
                    let w9 = &wd[(o * ci + c) * 9..(o * ci + c) * 9 + 9];
                    for di in 0..3usize {
                        let off_i = di as isize - p;
                        let (i0, i1) = valid_range(off_i, h, ho);
                        let taps = [w9[di * 3], w9[di * 3 + 1], w9[di * 3 + 2]];
                        for i in i0..i1 {
                            let xi = (i as isize + off_i) as usize;
                            kernels::conv3_row(
                                &mut plane[i * wo..(i + 1) * wo],
                                &xd[(c * h + xi) * wid..(c * h + xi + 1) * wid],
                                taps,
                                p,
                            );
                        }
                    }
                }
            }
        } else {
            for o in 0..co {
                let plane = &mut out[o * ho * wo..(o + 1) * ho * wo];
                plane.fill(bd[o]);
                for c in 0..ci {
                    for di in 0..k {
                        let off_i = di as isize - p;
                        let (i0, i1) = valid_range(off_i, h, ho);
                        for dj in 0..k {
                            let off_j = dj as isize - p;
                            let (j0, j1) = valid_range(off_j, wid, wo);
                            let wv = wd[((o * ci + c) * k + di) * k + dj];
                            for i in i0..i1 {
                                let xi = (i as isize + off_i) as usize;
                                let xrow = &xd[(c * h + xi) * wid..(c * h + xi + 1) * wid];
                                let orow = &mut plane[i * wo..(i + 1) * wo];
                                let xs = (j0 as isize + off_j) as usize;
                                let len = j1 - j0;
                                for (ov, xv) in orow[j0..j1].iter_mut().zip(&xrow[xs..xs + len]) {
                                    *ov += wv * xv;
                                }
                            }
                        }
                    }
                }
            }
        }
        drop(xd);
        drop(wd);
        drop(bd);
        Tensor::from_op(
            vec![co, ho, wo],
            out,
            Op::Conv2d {
                x: self.clone(),
                w: w.clone(),
                b: b.clone(),
                padding,
            },
        )
    }

    pub fn relu(&self) -> Result<Tensor> {
        let out = self.data().iter().map(|v| v.max(0.0)).collect();
        Tensor::from_op(self.shape().to_vec(), out, Op::Relu { x: self.clone() })
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        let out = self.data().iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        Tensor::from_op(self.shape().to_vec(), out, Op::Sigmoid { x: self.clone() })
    }

    fn elementwise_check(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err(
                op,
                format!("shapes {:?} and {:?} differ", self.shape(), other.shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise_check(other, "add")?;
        let out = self.data().iter().zip(other.data().iter()).map(|(a, b)| a + b).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::Add {
                a: self.clone(),
                b: other.clone(),
            },
        )
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise_check(other, "sub")?;
        let out = self.data().iter().zip(other.data().iter()).map(|(a, b)| a - b).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::Sub {
                a: self.clone(),
                b: other.clone(),
            },
        )
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise_check(other, "mul")?;
        let out = self.data().iter().zip(other.data().iter()).map(|(a, b)| a * b).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::Mul {
                a: self.clone(),
                b: other.clone(),
            },
        )
    }

    /// Broadcast a per-channel vector `s [C]` over the spatial extent of
    /// `self [C,H,W]` and multiply elementwise. This is the only broadcast
    /// the engine supports.
    pub fn mul_channel(&self, s: &Tensor) -> Result<Tensor> {
        if self.rank() != 3 || s.rank() != 1 || s.shape()[0] != self.shape()[0] {
            return Err(shape_err(
                "mul_channel",
                format!("x {:?} with channel vector {:?}", self.shape(), s.shape()),
            ));
        }
        let hw = self.shape()[1] * self.shape()[2];
        let xd = self.data();
        let sd = s.data();
        let mut out = vec![0.0; xd.len()];
        for c in 0..self.shape()[0] {
            let sv = sd[c];
            for i in 0..hw {
                out[c * hw + i] = xd[c * hw + i] * sv;
            }
        }
        drop(xd);
        drop(sd);
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::MulChannel {
                x: self.clone(),
                s: s.clone(),
            },
        )
    }

    /// Multiply every element by the constant `k`.
    pub fn scale(&self, k: f64) -> Result<Tensor> {
        let out = self.data().iter().map(|v| v * k).collect();
        Tensor::from_op(self.shape().to_vec(), out, Op::Scale { x: self.clone(), k })
    }

    /// Row-wise softmax of a rank-2 tensor, computed with row-max
    /// subtraction.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(shape_err(
                "softmax_rows",
                format!("expects a rank-2 input, got {:?}", self.shape()),
            ));
        }
        let (n, d) = (self.shape()[0], self.shape()[1]);
        let xd = self.data();
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &xd[r * d..(r + 1) * d];
            let mut m = f64::NEG_INFINITY;
            for v in row {
                m = m.max(*v);
            }
            let orow = &mut out[r * d..(r + 1) * d];
            for (o, v) in orow.iter_mut().zip(row) {
                *o = kernels::exp_fast(v - m);
            }
            let mut sum = 0.0;
            for o in orow.iter() {
                sum += *o;
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        drop(xd);
        Tensor::from_op(vec![n, d], out, Op::SoftmaxRows { x: self.clone() })
    }

    /// Per-channel spatial mean: `[C,H,W] -> [C]`.
    pub fn avg_pool_global(&self) -> Result<Tensor> {
        if self.rank() != 3 {
            return Err(shape_err(
                "avg_pool_global",
                format!("expects a rank-3 input, got {:?}", self.shape()),
            ));
        }
        let c = self.shape()[0];
        let hw = self.shape()[1] * self.shape()[2];
        let xd = self.data();
        let mut out = vec![0.0; c];
        for ch in 0..c {
            let mut acc = 0.0;
            for v in &xd[ch * hw..(ch + 1) * hw] {
                acc += v;
            }
            out[ch] = acc / hw as f64;
        }
        drop(xd);
        Tensor::from_op(vec![c], out, Op::AvgPoolGlobal { x: self.clone() })
    }

    /// 2x2 max pooling with stride 2; H and W must be even.
    pub fn max_pool_2x2(&self) -> Result<Tensor> {
        if self.rank() != 3 {
            return Err(shape_err(
                "max_pool_2x2",
                format!("expects a rank-3 input, got {:?}", self.shape()),
            ));
        }
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err(
                "max_pool_2x2",
                format!("spatial extents must be even, got {}x{}", h, w),
            ));
        }
        let (ho, wo) = (h / 2, w / 2);
        let xd = self.data();
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    for di in 0..2 {
                        for dj in 0..2 {
                            let v = xd[(ch * h + 2 * i + di) * w + 2 * j + dj];
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    out[(ch * ho + i) * wo + j] = best;
                }
            }
        }
        drop(xd);
        Tensor::from_op(vec![c, ho, wo], out, Op::MaxPool2x2 { x: self.clone() })
    }

    /// Nearest-neighbour 2x upsampling: each value becomes a 2x2 block.
    pub fn upsample_nearest_2x(&self) -> Result<Tensor> {
        if self.rank() != 3 {
            return Err(shape_err(
                "upsample_nearest_2x",
                format!("expects a rank-3 input, got {:?}", self.shape()),
            ));
        }
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (ho, wo) = (2 * h, 2 * w);
        let xd = self.data();
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for i in 0..ho {
                let xrow = &xd[(ch * h + i / 2) * w..(ch * h + i / 2 + 1) * w];
                let orow = &mut out[(ch * ho + i) * wo..(ch * ho + i + 1) * wo];
                for j in 0..wo {
                    orow[j] = xrow[j / 2];
                }
            }
        }
        drop(xd);
        Tensor::from_op(
            vec![c, ho, wo],
            out,
            Op::UpsampleNearest2x { x: self.clone() },
        )
    }

    /// Mean binary cross-entropy against a {0,1} target of equal shape.
    /// Predictions are clamped to `[1e-7, 1-1e-7]` before the logs.
    pub fn bce_loss(&self, target: &Tensor) -> Result<Tensor> {
        self.elementwise_check(target, "bce_loss")?;
        if target.requires_grad() {
            return Err(Error::Usage("bce_loss target must not require gradients".into()));
        }
        let td = target.data();
        if !td.iter().all(|v| *v == 0.0 || *v == 1.0) {
            return Err(Error::Validation(
                "bce_loss target values must all be exactly 0 or 1".into(),
            ));
        }
        let pd = self.data();
        let n = pd.len() as f64;
        let lo = BCE_CLAMP;
        let hi = 1.0 - BCE_CLAMP;
        let mut acc = 0.0;
        for (p, t) in pd.iter().zip(td.iter()) {
            let pc = p.clamp(lo, hi);
            acc -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
        }
        drop(pd);
        drop(td);
        Tensor::from_op(
            Vec::new(),
            vec![acc / n],
            Op::BceLoss {
                pred: self.clone(),
                target: target.clone(),
            },
        )
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self) -> Result<Tensor> {
        let mut acc = 0.0;
        for v in self.data().iter() {
            acc += v;
        }
        Tensor::from_op(Vec::new(), vec![acc], Op::Sum { x: self.clone() })
    }
}
