//! Hot inner loops shared by the forward ops and their backward rules.
//!
//! Each kernel has a fixed, documented accumulation order (see the module
//! docs in `ops`), chosen so the loops stay order-deterministic while still
//! exposing enough independent lanes to vectorize.

/// Branch-free exp, accurate to ~1e-13 relative and exact at 0, written so
/// the softmax row loop auto-vectorizes. Range reduction `x = n ln2 + r`,
/// degree-10 Taylor on `r`, exponent-bit scaling. Inputs must stay within
/// roughly [-708, 708]; softmax feeds it `x - max <= 0`.
#[inline]
pub(super) fn exp_fast(x: f64) -> f64 {
    const LOG2_E: f64 = std::f64::consts::LOG2_E;
    // ln2 split for an exact-ish reduction.
    const LN2_HI: f64 = 0.693_147_180_369_123_816_49e0;
    const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
    let x = x.max(-708.0);
    let n = (x * LOG2_E).round();
    let r = (x - n * LN2_HI) - n * LN2_LO;
    // Taylor: sum_{k<=10} r^k / k!
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (1.0 / 6.0
                    + r * (1.0 / 24.0
                        + r * (1.0 / 120.0
                            + r * (1.0 / 720.0
                                + r * (1.0 / 5040.0
                                    + r * (1.0 / 40320.0
                                        + r * (1.0 / 362880.0 + r * (1.0 / 3628800.0))))))))));
    // 2^n via the exponent field; n is within [-1022, 1024] after the clamp.
    let bits = ((n as i64 + 1023) as u64) << 52;
    p * f64::from_bits(bits)
}

/// `out[i,:] += A[i,:] * B` row by row, folding k in blocks of four.
pub(super) fn matmul_acc(ad: &[f64], bd: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        let mut kk = 0;
        while kk + 4 <= k {
            let (a0, a1, a2, a3) = (arow[kk], arow[kk + 1], arow[kk + 2], arow[kk + 3]);
            let (b0, rest) = bd[kk * n..].split_at(n);
            let (b1, rest) = rest.split_at(n);
            let (b2, rest) = rest.split_at(n);
            let b3 = &rest[..n];
            for ((((o, x0), x1), x2), x3) in
                orow.iter_mut().zip(b0).zip(b1).zip(b2).zip(b3)
            {
                *o += a0 * x0 + a1 * x1 + a2 * x2 + a3 * x3;
            }
            kk += 4;
        }
        while kk < k {
            let av = arow[kk];
            let brow = &bd[kk * n..(kk + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
            kk += 1;
        }
    }
}

/// Dot product striped over four lanes; lanes combine as (l0+l1)+(l2+l3).
pub(super) fn dot_striped(x: &[f64], y: &[f64]) -> f64 {
    let chunks = x.len() / 4;
    let (mut l0, mut l1, mut l2, mut l3) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for c in 0..chunks {
        let xi = &x[4 * c..4 * c + 4];
        let yi = &y[4 * c..4 * c + 4];
        l0 += xi[0] * yi[0];
        l1 += xi[1] * yi[1];
        l2 += xi[2] * yi[2];
        l3 += xi[3] * yi[3];
    }
    let mut acc = (l0 + l1) + (l2 + l3);
    for i in 4 * chunks..x.len() {
        acc += x[i] * y[i];
    }
    acc
}

/// One 3-tap horizontal correlation row:
/// `out[j] += w0*x[j-pad] + w1*x[j+1-pad] + w2*x[j+2-pad]` over valid taps.
pub(super) fn conv3_row(orow: &mut [f64], xrow: &[f64], taps: [f64; 3], pad: isize) {
    let wo = orow.len();
    let wid = xrow.len() as isize;
    let lo = pad.clamp(0, wo as isize) as usize;
    let hi = (wid - 2 + pad).clamp(lo as isize, wo as isize) as usize;
    for j in (0..lo).chain(hi..wo) {
        let mut acc = orow[j];
        for (dj, wv) in taps.iter().enumerate() {
            let xi = j as isize + dj as isize - pad;
            if xi >= 0 && xi < wid {
                acc += wv * xrow[xi as usize];
            }
        }
        orow[j] = acc;
    }
    if hi > lo {
        let xs = (lo as isize - pad) as usize;
        let xwin = &xrow[xs..xs + (hi - lo) + 2];
        let [w0, w1, w2] = taps;
        for (j, o) in orow[lo..hi].iter_mut().enumerate() {
            *o += w0 * xwin[j] + w1 * xwin[j + 1] + w2 * xwin[j + 2];
        }
    }
}

/// Kernel-gradient dots for one row pair: `acc[dj] += sum_j g[j] * x[j+dj-pad]`.
pub(super) fn conv3_row_dw(grow: &[f64], xrow: &[f64], pad: isize, acc: &mut [f64; 3]) {
    let wo = grow.len();
    let wid = xrow.len() as isize;
    let lo = pad.clamp(0, wo as isize) as usize;
    let hi = (wid - 2 + pad).clamp(lo as isize, wo as isize) as usize;
    for j in (0..lo).chain(hi..wo) {
        for dj in 0..3 {
            let xi = j as isize + dj as isize - pad;
            if xi >= 0 && xi < wid {
                acc[dj] += grow[j] * xrow[xi as usize];
            }
        }
    }
    if hi > lo {
        let xs = (lo as isize - pad) as usize;
        let xwin = &xrow[xs..xs + (hi - lo) + 2];
        let (mut a0, mut a1, mut a2) = (0.0f64, 0.0f64, 0.0f64);
        for (j, g) in grow[lo..hi].iter().enumerate() {
            a0 += g * xwin[j];
            a1 += g * xwin[j + 1];
            a2 += g * xwin[j + 2];
        }
        acc[0] += a0;
        acc[1] += a1;
        acc[2] += a2;
    }
}
