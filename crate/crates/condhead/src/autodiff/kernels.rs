//! Shared numeric kernels.
//!
//! Both the tape forward pass and the tape-free inference path call into
//! these, so trained and frozen models evaluate bit-identically. Reductions
//! whose operand order is not fixed by the data layout (softmax normalizer,
//! expert aggregation) accumulate in sorted order, which makes them invariant
//! to expert permutation at the bit level.

/// out[m,n] = a[m,k] · b[k,n]
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,k] += g[m,n] · b[k,n]ᵀ  (dA of a matmul)
pub fn matmul_acc_nt(g: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (p, o) in orow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (gv, bv) in grow.iter().zip(brow.iter()) {
                acc += gv * bv;
            }
            *o += acc;
        }
    }
}

/// out[k,n] += a[m,k]ᵀ · g[m,n]  (dB of a matmul)
pub fn matmul_acc_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow.iter()) {
                *o += av * gv;
            }
        }
    }
}

/// Row-broadcast bias add: mat[r,c] + bias[c].
pub fn add_bias_rows(mat: &[f64], bias: &[f64], out: &mut [f64]) {
    let cols = bias.len();
    for (orow, mrow) in out.chunks_mut(cols).zip(mat.chunks(cols)) {
        for ((o, &m), &b) in orow.iter_mut().zip(mrow.iter()).zip(bias.iter()) {
            *o = m + b;
        }
    }
}

pub fn relu(x: &[f64], out: &mut [f64]) {
    for (o, &v) in out.iter_mut().zip(x.iter()) {
        *o = if v > 0.0 { v } else { 0.0 };
    }
}

/// 3×3 cross-correlation, stride 1, zero padding 1 (spatial size preserved).
///
/// x: [c_in, s, s], k: [c_out, c_in, 3, 3], bias: [c_out], out: [c_out, s, s].
pub fn conv3x3(x: &[f64], k: &[f64], bias: &[f64], c_in: usize, c_out: usize, s: usize, out: &mut [f64]) {
    let plane = s * s;
    for o in 0..c_out {
        let oplane = &mut out[o * plane..(o + 1) * plane];
        oplane.fill(bias[o]);
        for c in 0..c_in {
            let xplane = &x[c * plane..(c + 1) * plane];
            let kbase = (o * c_in + c) * 9;
            for di in 0..3usize {
                for dj in 0..3usize {
                    let w = k[kbase + di * 3 + dj];
                    if w == 0.0 {
                        continue;
                    }
                    // output rows where the shifted input row is in range
                    let (i_lo, i_hi) = shift_range(di, s);
                    let (j_lo, j_hi) = shift_range(dj, s);
                    for i in i_lo..i_hi {
                        let xi = (i + di - 1) * s;
                        let orow = &mut oplane[i * s + j_lo..i * s + j_hi];
                        let xrow = &xplane[xi + j_lo + dj - 1..xi + j_hi + dj - 1];
                        for (ov, &xv) in orow.iter_mut().zip(xrow.iter()) {
                            *ov += w * xv;
                        }
                    }
                }
            }
        }
    }
}

// Valid output index range for a kernel tap offset d ∈ {0,1,2} with pad 1:
// input index = out + d - 1 must lie in [0, s).
fn shift_range(d: usize, s: usize) -> (usize, usize) {
    let lo = if d == 0 { 1 } else { 0 };
    let hi = if d == 2 { s - 1 } else { s };
    (lo, hi)
}

/// dX of conv3x3: scatter g through the kernel taps.
pub fn conv3x3_acc_dx(g: &[f64], k: &[f64], c_in: usize, c_out: usize, s: usize, dx: &mut [f64]) {
    let plane = s * s;
    for o in 0..c_out {
        let gplane = &g[o * plane..(o + 1) * plane];
        for c in 0..c_in {
            let dxplane = &mut dx[c * plane..(c + 1) * plane];
            let kbase = (o * c_in + c) * 9;
            for di in 0..3usize {
                for dj in 0..3usize {
                    let w = k[kbase + di * 3 + dj];
                    if w == 0.0 {
                        continue;
                    }
                    let (i_lo, i_hi) = shift_range(di, s);
                    let (j_lo, j_hi) = shift_range(dj, s);
                    for i in i_lo..i_hi {
                        let xi = (i + di - 1) * s;
                        let grow = &gplane[i * s + j_lo..i * s + j_hi];
                        let dxrow = &mut dxplane[xi + j_lo + dj - 1..xi + j_hi + dj - 1];
                        for (dv, &gv) in dxrow.iter_mut().zip(grow.iter()) {
                            *dv += w * gv;
                        }
                    }
                }
            }
        }
    }
}

/// dK of conv3x3: correlate input with the output gradient.
pub fn conv3x3_acc_dk(x: &[f64], g: &[f64], c_in: usize, c_out: usize, s: usize, dk: &mut [f64]) {
    let plane = s * s;
    for o in 0..c_out {
        let gplane = &g[o * plane..(o + 1) * plane];
        for c in 0..c_in {
            let xplane = &x[c * plane..(c + 1) * plane];
            let kbase = (o * c_in + c) * 9;
            for di in 0..3usize {
                for dj in 0..3usize {
                    let (i_lo, i_hi) = shift_range(di, s);
                    let (j_lo, j_hi) = shift_range(dj, s);
                    let mut acc = 0.0;
                    for i in i_lo..i_hi {
                        let xi = (i + di - 1) * s;
                        let grow = &gplane[i * s + j_lo..i * s + j_hi];
                        let xrow = &xplane[xi + j_lo + dj - 1..xi + j_hi + dj - 1];
                        for (&gv, &xv) in grow.iter().zip(xrow.iter()) {
                            acc += gv * xv;
                        }
                    }
                    dk[kbase + di * 3 + dj] += acc;
                }
            }
        }
    }
}

/// dBias of conv3x3: per-channel sum of the output gradient.
pub fn conv3x3_acc_db(g: &[f64], c_out: usize, s: usize, db: &mut [f64]) {
    let plane = s * s;
    for o in 0..c_out {
        let mut acc = 0.0;
        for &gv in &g[o * plane..(o + 1) * plane] {
            acc += gv;
        }
        db[o] += acc;
    }
}

/// Max-stabilized softmax with temperature. The exponential normalizer is
/// summed in sorted order so permuting the logits permutes the output
/// bit-exactly.
pub fn softmax_temp(z: &[f64], tau: f64, out: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for (o, &v) in out.iter_mut().zip(z.iter()) {
        *o = ((v - max) / tau).exp();
    }
    let mut terms: Vec<f64> = out.to_vec();
    terms.sort_unstable_by(f64::total_cmp);
    let mut sum = 0.0;
    for t in terms {
        sum += t;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// out[i] = Σ_h w[h]·items[h][i], accumulated per coordinate in sorted order
/// so the result is invariant to how the (w, item) pairs are ordered.
pub fn weighted_sum(w: &[f64], items: &[&[f64]], out: &mut [f64]) {
    let h = w.len();
    let mut terms = vec![0.0f64; h];
    for (i, o) in out.iter_mut().enumerate() {
        for (t, (&wh, item)) in terms.iter_mut().zip(w.iter().zip(items.iter())) {
            *t = wh * item[i];
        }
        terms.sort_unstable_by(f64::total_cmp);
        let mut acc = 0.0;
        for &t in &terms {
            acc += t;
        }
        *o = acc;
    }
}

/// Mean smooth-L1: 0.5·d² for |d| < 1, |d| − 0.5 otherwise, d = pred − target.
pub fn smooth_l1_mean(pred: &[f64], target: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&p, &t) in pred.iter().zip(target.iter()) {
        let d = p - t;
        acc += if d.abs() < 1.0 {
            0.5 * d * d
        } else {
            d.abs() - 0.5
        };
    }
    acc / pred.len() as f64
}

/// Mean binary cross-entropy on logits, computed in log-space:
/// max(z,0) − z·t + ln(1 + e^{−|z|}).
pub fn bce_logits_mean(logits: &[f64], targets: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&z, &t) in logits.iter().zip(targets.iter()) {
        acc += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
    }
    acc / logits.len() as f64
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Dot product over equal-length slices (fixed left-to-right order).
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        acc += x * y;
    }
    acc
}

/// L2 norm.
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}
