//! Per-sample compute kernels on raw slices. Layouts are channel-major
//! `C × D × H × W`, row-major within a channel.

pub mod conv;
pub mod direct;
pub mod norm;
pub mod pool;

/// Reusable buffers for the convolution kernels.
#[derive(Debug, Default)]
pub struct Scratch {
    pub cols: Vec<f32>,
    pub padded: Vec<f32>,
    pub weights: Vec<f32>,
}

/// `c = alpha * a·b + beta * c` for strided row/column views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(m * n <= c.len());
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
