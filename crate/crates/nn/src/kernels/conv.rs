use super::{direct, gemm, Scratch};

/// Above this many (input × output) channel pairs the GEMM path wins.
const DIRECT_CONV_MAX_PAIRS: usize = 8;

/// Geometry of a stride-1, same-padded cubic convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub dims: [usize; 3],
}

impl ConvGeom {
    pub fn spatial(&self) -> usize {
        self.dims.iter().product()
    }

    fn taps(&self) -> usize {
        self.kernel * self.kernel * self.kernel
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.taps()
    }

    fn direct(&self) -> bool {
        self.in_ch * self.out_ch <= DIRECT_CONV_MAX_PAIRS && self.kernel > 1
    }
}

/// Visits every (kernel tap, output row) pair that overlaps the input,
/// handing the callback the tap index, the output row offset, the input row
/// offset, and the valid `w` range `[lo, hi)` relative to the output row.
/// Input column for output column `w` is `w + kw - pad`.
fn for_each_row_shift(dims: [usize; 3], kernel: usize, mut f: impl FnMut(usize, usize, usize, usize, usize, isize)) {
    let [d_n, h_n, w_n] = dims;
    let pad = (kernel / 2) as isize;
    for kd in 0..kernel {
        for kh in 0..kernel {
            for kw in 0..kernel {
                let tap = (kd * kernel + kh) * kernel + kw;
                let shift_w = kw as isize - pad;
                let lo = (-shift_w).max(0) as usize;
                let hi = (w_n as isize - shift_w).min(w_n as isize).max(0) as usize;
                if lo >= hi {
                    continue;
                }
                for d in 0..d_n {
                    let sd = d as isize + kd as isize - pad;
                    if sd < 0 || sd >= d_n as isize {
                        continue;
                    }
                    for h in 0..h_n {
                        let sh = h as isize + kh as isize - pad;
                        if sh < 0 || sh >= h_n as isize {
                            continue;
                        }
                        let out_row = (d * h_n + h) * w_n;
                        let in_row = (sd as usize * h_n + sh as usize) * w_n;
                        f(tap, out_row, in_row, lo, hi, shift_w);
                    }
                }
            }
        }
    }
}

fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let s = g.spatial();
    let taps = g.taps();
    cols.iter_mut().for_each(|v| *v = 0.0);
    for c in 0..g.in_ch {
        let xc = &x[c * s..(c + 1) * s];
        for_each_row_shift(g.dims, g.kernel, |tap, out_row, in_row, lo, hi, shift| {
            let row = &mut cols[(c * taps + tap) * s..(c * taps + tap + 1) * s];
            let src = (in_row as isize + lo as isize + shift) as usize;
            row[out_row + lo..out_row + hi].copy_from_slice(&xc[src..src + (hi - lo)]);
        });
    }
}

fn col2im_add(cols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let s = g.spatial();
    let taps = g.taps();
    for c in 0..g.in_ch {
        let dxc = &mut dx[c * s..(c + 1) * s];
        for_each_row_shift(g.dims, g.kernel, |tap, out_row, in_row, lo, hi, shift| {
            let row = &cols[(c * taps + tap) * s..(c * taps + tap + 1) * s];
            let dst = (in_row as isize + lo as isize + shift) as usize;
            for (o, i) in dxc[dst..dst + (hi - lo)]
                .iter_mut()
                .zip(&row[out_row + lo..out_row + hi])
            {
                *o += i;
            }
        });
    }
}

/// `out = conv(x, w) + bias` for one sample. `w` is `out_ch × in_ch × k³`.
pub fn conv3d_forward(
    x: &[f32],
    w: &[f32],
    bias: Option<&[f32]>,
    g: &ConvGeom,
    out: &mut [f32],
    scratch: &mut Scratch,
) {
    let s = g.spatial();
    debug_assert_eq!(x.len(), g.in_ch * s);
    debug_assert_eq!(w.len(), g.out_ch * g.patch_len());
    debug_assert_eq!(out.len(), g.out_ch * s);
    for (o, row) in out.chunks_mut(s).enumerate() {
        let b = bias.map_or(0.0, |b| b[o]);
        row.iter_mut().for_each(|v| *v = b);
    }
    if direct::supported(g.out_ch, g.dims[2], g.kernel) {
        direct::pad_input(x, g.in_ch, g.dims, g.kernel / 2, &mut scratch.padded);
        direct::rearrange_weights(w, g.out_ch, g.in_ch, g.kernel, false, &mut scratch.weights);
        direct::conv_blocked(
            &scratch.padded,
            g.in_ch,
            &scratch.weights,
            g.out_ch,
            g.kernel,
            g.dims,
            out,
            true,
        );
        return;
    }
    if g.direct() {
        let taps = g.taps();
        for o in 0..g.out_ch {
            let orow = &mut out[o * s..(o + 1) * s];
            for c in 0..g.in_ch {
                let xc = &x[c * s..(c + 1) * s];
                let wk = &w[(o * g.in_ch + c) * taps..(o * g.in_ch + c + 1) * taps];
                for_each_row_shift(g.dims, g.kernel, |tap, out_row, in_row, lo, hi, shift| {
                    let wt = wk[tap];
                    let src = (in_row as isize + lo as isize + shift) as usize;
                    for (y, xv) in orow[out_row + lo..out_row + hi]
                        .iter_mut()
                        .zip(&xc[src..src + (hi - lo)])
                    {
                        *y += wt * xv;
                    }
                });
            }
        }
        return;
    }
    let k = g.patch_len();
    let cols: &[f32] = if g.kernel == 1 {
        x
    } else {
        scratch.cols.resize(k * s, 0.0);
        im2col(x, g, &mut scratch.cols);
        &scratch.cols
    };
    gemm(g.out_ch, k, s, w, (k, 1), cols, (s, 1), 1.0, out);
}

/// Accumulates gradients for one sample into `dx`, `dw`, `db` (each optional).
#[allow(clippy::too_many_arguments)]
pub fn conv3d_backward(
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    g: &ConvGeom,
    dx: Option<&mut [f32]>,
    dw: Option<&mut [f32]>,
    db: Option<&mut [f32]>,
    scratch: &mut Scratch,
) {
    let s = g.spatial();
    if let Some(db) = db {
        for (o, row) in dy.chunks(s).enumerate() {
            db[o] += row.iter().sum::<f32>();
        }
    }
    let mut dx = dx;
    let mut dw = dw;
    if let Some(dwv) = dw.as_deref_mut() {
        if direct::grad_supported(g.out_ch, g.dims[2], g.kernel) {
            direct::pad_input(x, g.in_ch, g.dims, g.kernel / 2, &mut scratch.padded);
            direct::conv_weight_grad(&scratch.padded, g.in_ch, dy, g.out_ch, g.dims, dwv);
            dw = None;
        }
    }
    if let Some(dxv) = dx.as_deref_mut() {
        if direct::supported(g.in_ch, g.dims[2], g.kernel) {
            direct::pad_input(dy, g.out_ch, g.dims, g.kernel / 2, &mut scratch.padded);
            direct::rearrange_weights(w, g.out_ch, g.in_ch, g.kernel, true, &mut scratch.weights);
            direct::conv_blocked(
                &scratch.padded,
                g.out_ch,
                &scratch.weights,
                g.in_ch,
                g.kernel,
                g.dims,
                dxv,
                true,
            );
            dx = None;
        }
    }
    if g.direct() {
        let taps = g.taps();
        for o in 0..g.out_ch {
            let dyo = &dy[o * s..(o + 1) * s];
            for c in 0..g.in_ch {
                let base = (o * g.in_ch + c) * taps;
                let xc = &x[c * s..(c + 1) * s];
                if let Some(dw) = dw.as_deref_mut() {
                    let dwk = &mut dw[base..base + taps];
                    for_each_row_shift(g.dims, g.kernel, |tap, out_row, in_row, lo, hi, shift| {
                        let src = (in_row as isize + lo as isize + shift) as usize;
                        let acc: f32 = dyo[out_row + lo..out_row + hi]
                            .iter()
                            .zip(&xc[src..src + (hi - lo)])
                            .map(|(a, b)| a * b)
                            .sum();
                        dwk[tap] += acc;
                    });
                }
                if let Some(dx) = dx.as_deref_mut() {
                    let wk = &w[base..base + taps];
                    let dxc = &mut dx[c * s..(c + 1) * s];
                    for_each_row_shift(g.dims, g.kernel, |tap, out_row, in_row, lo, hi, shift| {
                        let wt = wk[tap];
                        let dst = (in_row as isize + lo as isize + shift) as usize;
                        for (t, gy) in dxc[dst..dst + (hi - lo)]
                            .iter_mut()
                            .zip(&dyo[out_row + lo..out_row + hi])
                        {
                            *t += wt * gy;
                        }
                    });
                }
            }
        }
        return;
    }
    let k = g.patch_len();
    if let Some(dw) = dw {
        let cols: &[f32] = if g.kernel == 1 {
            x
        } else {
            scratch.cols.resize(k * s, 0.0);
            im2col(x, g, &mut scratch.cols);
            &scratch.cols
        };
        // dW(out × k) += dY(out × s) · colsᵀ(s × k)
        gemm(g.out_ch, s, k, dy, (s, 1), cols, (1, s), 1.0, dw);
    }
    if let Some(dx) = dx {
        if g.kernel == 1 {
            // dX(in × s) += Wᵀ(in × out) · dY(out × s)
            gemm(g.in_ch, g.out_ch, s, w, (1, k), dy, (s, 1), 1.0, dx);
        } else {
            scratch.cols.resize(k * s, 0.0);
            gemm(k, g.out_ch, s, w, (1, k), dy, (s, 1), 0.0, &mut scratch.cols);
            col2im_add(&scratch.cols, g, dx);
        }
    }
}

/// Geometry of a kernel-2, stride-2 transposed convolution (exact 2× upsampling).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UpGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    /// Input spatial dims; output is twice each.
    pub dims: [usize; 3],
}

impl UpGeom {
    pub fn in_spatial(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn out_dims(&self) -> [usize; 3] {
        self.dims.map(|v| v * 2)
    }

    /// Output voxel written by kernel tap `tap` (a·4 + b·2 + c) from input `voxel`.
    fn out_index(&self, tap: usize, voxel: usize) -> usize {
        let [_, h_n, w_n] = self.dims;
        let (d, rem) = (voxel / (h_n * w_n), voxel % (h_n * w_n));
        let (h, w) = (rem / w_n, rem % w_n);
        let (a, b, c) = (tap / 4, (tap / 2) % 2, tap % 2);
        ((2 * d + a) * 2 * h_n + 2 * h + b) * 2 * w_n + 2 * w + c
    }
}

/// Weight layout `in_ch × out_ch × 2×2×2`.
pub fn conv_transpose2_forward(
    x: &[f32],
    w: &[f32],
    bias: Option<&[f32]>,
    g: &UpGeom,
    out: &mut [f32],
    scratch: &mut Scratch,
) {
    let s = g.in_spatial();
    let rows = g.out_ch * 8;
    let scratch = &mut scratch.cols;
    scratch.resize(rows * s, 0.0);
    // Z(rows × s) = Wᵀ(rows × in) · X(in × s)
    gemm(rows, g.in_ch, s, w, (1, rows), x, (s, 1), 0.0, scratch);
    let so = s * 8;
    for o in 0..g.out_ch {
        let b = bias.map_or(0.0, |b| b[o]);
        let oc = &mut out[o * so..(o + 1) * so];
        for tap in 0..8 {
            let z = &scratch[(o * 8 + tap) * s..(o * 8 + tap + 1) * s];
            for (v, zv) in z.iter().enumerate() {
                oc[g.out_index(tap, v)] = zv + b;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2_backward(
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    g: &UpGeom,
    dx: Option<&mut [f32]>,
    dw: Option<&mut [f32]>,
    db: Option<&mut [f32]>,
    scratch: &mut Scratch,
) {
    let s = g.in_spatial();
    let so = s * 8;
    let rows = g.out_ch * 8;
    let scratch = &mut scratch.cols;
    if let Some(db) = db {
        for (o, row) in dy.chunks(so).enumerate() {
            db[o] += row.iter().sum::<f32>();
        }
    }
    scratch.resize(rows * s, 0.0);
    for o in 0..g.out_ch {
        let dyc = &dy[o * so..(o + 1) * so];
        for tap in 0..8 {
            let z = &mut scratch[(o * 8 + tap) * s..(o * 8 + tap + 1) * s];
            for (v, zv) in z.iter_mut().enumerate() {
                *zv = dyc[g.out_index(tap, v)];
            }
        }
    }
    if let Some(dw) = dw {
        // dW(in × rows) += X(in × s) · dZᵀ(s × rows)
        gemm(g.in_ch, s, rows, x, (s, 1), scratch, (1, s), 1.0, dw);
    }
    if let Some(dx) = dx {
        // dX(in × s) += W(in × rows) · dZ(rows × s)
        gemm(g.in_ch, rows, s, w, (rows, 1), scratch, (s, 1), 1.0, dx);
    }
}
