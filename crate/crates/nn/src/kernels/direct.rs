//! Register-blocked direct convolution for wide rows and channel counts
//! that are multiples of [`CO_BLOCK`]. Input is pre-padded so every tap reads
//! a contiguous row segment; the inner block keeps `CO_BLOCK × W_BLOCK`
//! accumulators in registers.

pub const CO_BLOCK: usize = 4;
pub const W_BLOCK: usize = 16;
const GRAD_LANES: usize = 8;
const GRAD_KERNEL: usize = 3;

/// Whether [`conv_blocked`] handles this geometry.
pub fn supported(out_ch: usize, w: usize, kernel: usize) -> bool {
    out_ch.is_multiple_of(CO_BLOCK) && w.is_multiple_of(W_BLOCK) && kernel == 3
}

/// Whether [`conv_weight_grad`] handles this geometry.
pub fn grad_supported(out_ch: usize, w: usize, kernel: usize) -> bool {
    out_ch.is_multiple_of(CO_BLOCK) && w.is_multiple_of(GRAD_LANES) && kernel == GRAD_KERNEL
}

/// Zero-pads `C × D × H × W` by `pad` on every spatial side.
pub fn pad_input(x: &[f32], channels: usize, dims: [usize; 3], pad: usize, out: &mut Vec<f32>) {
    let [dn, hn, wn] = dims;
    let (dp, hp, wp) = (dn + 2 * pad, hn + 2 * pad, wn + 2 * pad);
    out.clear();
    out.resize(channels * dp * hp * wp, 0.0);
    for c in 0..channels {
        for d in 0..dn {
            for h in 0..hn {
                let src = ((c * dn + d) * hn + h) * wn;
                let dst = ((c * dp + d + pad) * hp + h + pad) * wp + pad;
                out[dst..dst + wn].copy_from_slice(&x[src..src + wn]);
            }
        }
    }
}

/// `y[co] (+)= Σ_ci Σ_tap wr[ci][tap][co] · xp[ci][shifted]`.
///
/// `xp` is the padded input, `wr` the weights laid out `in × k³ × out`,
/// `dims` the unpadded spatial size (also the output size).
#[allow(clippy::too_many_arguments)]
pub fn conv_blocked(
    xp: &[f32],
    in_ch: usize,
    wr: &[f32],
    out_ch: usize,
    kernel: usize,
    dims: [usize; 3],
    y: &mut [f32],
    accumulate: bool,
) {
    #[cfg(target_arch = "x86_64")]
    {
        if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
            // SAFETY: the required CPU features were detected at runtime.
            unsafe { conv_blocked_avx2(xp, in_ch, wr, out_ch, kernel, dims, y, accumulate) };
            return;
        }
    }
    conv_blocked_impl(xp, in_ch, wr, out_ch, kernel, dims, y, accumulate);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
#[allow(clippy::too_many_arguments)]
unsafe fn conv_blocked_avx2(
    xp: &[f32],
    in_ch: usize,
    wr: &[f32],
    out_ch: usize,
    kernel: usize,
    dims: [usize; 3],
    y: &mut [f32],
    accumulate: bool,
) {
    conv_blocked_impl(xp, in_ch, wr, out_ch, kernel, dims, y, accumulate);
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn conv_blocked_impl(
    xp: &[f32],
    in_ch: usize,
    wr: &[f32],
    out_ch: usize,
    kernel: usize,
    dims: [usize; 3],
    y: &mut [f32],
    accumulate: bool,
) {
    let [dn, hn, wn] = dims;
    let pad = kernel - 1;
    let (dp, hp, wp) = (dn + pad, hn + pad, wn + pad);
    let taps = kernel * kernel * kernel;
    let s = dn * hn * wn;
    assert!(xp.len() >= in_ch * dp * hp * wp);
    assert!(wr.len() >= in_ch * taps * out_ch);
    assert!(y.len() >= out_ch * s);
    for d in 0..dn {
        for h in 0..hn {
            for cb in (0..out_ch).step_by(CO_BLOCK) {
                for w0 in (0..wn).step_by(W_BLOCK) {
                    let mut acc = [[0f32; W_BLOCK]; CO_BLOCK];
                    for c in 0..in_ch {
                        for kd in 0..kernel {
                            for kh in 0..kernel {
                                let row = ((c * dp + d + kd) * hp + h + kh) * wp + w0;
                                let tap0 = (c * taps + (kd * kernel + kh) * kernel) * out_ch + cb;
                                for kw in 0..kernel {
                                    let xs: &[f32; W_BLOCK] = xp[row + kw..row + kw + W_BLOCK].try_into().unwrap();
                                    let wo = tap0 + kw * out_ch;
                                    let wv: &[f32; CO_BLOCK] = wr[wo..wo + CO_BLOCK].try_into().unwrap();
                                    for j in 0..CO_BLOCK {
                                        for l in 0..W_BLOCK {
                                            acc[j][l] = wv[j].mul_add(xs[l], acc[j][l]);
                                        }
                                    }
                                }
                            }
                        }
                    }
                    for (j, a) in acc.iter().enumerate() {
                        let o = (cb + j) * s + (d * hn + h) * wn + w0;
                        let dst = &mut y[o..o + W_BLOCK];
                        if accumulate {
                            dst.iter_mut().zip(a).for_each(|(t, v)| *t += v);
                        } else {
                            dst.copy_from_slice(a);
                        }
                    }
                }
            }
        }
    }
}

/// Rearranges `out × in × k³` weights into the `in × k³ × out` layout used by
/// [`conv_blocked`]. With `flip_transpose`, produces the weights of the
/// adjoint convolution instead (`out` and `in` swapped, kernel reversed).
pub fn rearrange_weights(
    w: &[f32],
    out_ch: usize,
    in_ch: usize,
    kernel: usize,
    flip_transpose: bool,
    dst: &mut Vec<f32>,
) {
    let taps = kernel * kernel * kernel;
    dst.clear();
    dst.resize(w.len(), 0.0);
    for o in 0..out_ch {
        for c in 0..in_ch {
            for t in 0..taps {
                let v = w[(o * in_ch + c) * taps + t];
                if flip_transpose {
                    // adjoint: input channel `o`, output channel `c`, tap reversed
                    dst[(o * taps + (taps - 1 - t)) * in_ch + c] = v;
                } else {
                    dst[(c * taps + t) * out_ch + o] = v;
                }
            }
        }
    }
}

/// `dw[co][ci][tap] += Σ_p dy[co][p] · xp[ci][p + shift(tap)]` for 3×3×3
/// kernels; `xp` is the input padded by one voxel per side.
pub fn conv_weight_grad(xp: &[f32], in_ch: usize, dy: &[f32], out_ch: usize, dims: [usize; 3], dw: &mut [f32]) {
    #[cfg(target_arch = "x86_64")]
    {
        if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
            // SAFETY: the required CPU features were detected at runtime.
            unsafe { conv_weight_grad_avx2(xp, in_ch, dy, out_ch, dims, dw) };
            return;
        }
    }
    conv_weight_grad_impl(xp, in_ch, dy, out_ch, dims, dw);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn conv_weight_grad_avx2(xp: &[f32], in_ch: usize, dy: &[f32], out_ch: usize, dims: [usize; 3], dw: &mut [f32]) {
    conv_weight_grad_impl(xp, in_ch, dy, out_ch, dims, dw);
}

#[inline(always)]
fn conv_weight_grad_impl(xp: &[f32], in_ch: usize, dy: &[f32], out_ch: usize, dims: [usize; 3], dw: &mut [f32]) {
    const K: usize = GRAD_KERNEL;
    const L: usize = GRAD_LANES;
    let [dn, hn, wn] = dims;
    let (dp, hp, wp) = (dn + K - 1, hn + K - 1, wn + K - 1);
    let s = dn * hn * wn;
    let taps = K * K * K;
    assert!(xp.len() >= in_ch * dp * hp * wp);
    assert!(dy.len() >= out_ch * s);
    assert!(dw.len() >= out_ch * in_ch * taps);
    for c in 0..in_ch {
        for kd in 0..K {
            for kh in 0..K {
                for cb in (0..out_ch).step_by(CO_BLOCK) {
                    let mut acc = [[[0f32; L]; K]; CO_BLOCK];
                    for d in 0..dn {
                        for h in 0..hn {
                            let row = ((c * dp + d + kd) * hp + h + kh) * wp;
                            let orow = (d * hn + h) * wn;
                            for w0 in (0..wn).step_by(L) {
                                let mut xs = [[0f32; L]; K];
                                for (kw, x) in xs.iter_mut().enumerate() {
                                    *x = xp[row + w0 + kw..row + w0 + kw + L].try_into().unwrap();
                                }
                                for (j, a) in acc.iter_mut().enumerate() {
                                    let o = (cb + j) * s + orow + w0;
                                    let dv: &[f32; L] = dy[o..o + L].try_into().unwrap();
                                    for kw in 0..K {
                                        for l in 0..L {
                                            a[kw][l] = dv[l].mul_add(xs[kw][l], a[kw][l]);
                                        }
                                    }
                                }
                            }
                        }
                    }
                    for (j, a) in acc.iter().enumerate() {
                        for (kw, lanes) in a.iter().enumerate() {
                            let t = (kd * K + kh) * K + kw;
                            dw[((cb + j) * in_ch + c) * taps + t] += lanes.iter().sum::<f32>();
                        }
                    }
                }
            }
        }
    }
}
