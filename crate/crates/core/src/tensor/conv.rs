//! im2col convolution kernels. Patches are unrolled into a row-major matrix
//! (one row per output pixel) so forward, weight-gradient, and input-gradient
//! passes all reduce to single gemm calls.

/// Output length of a valid (unpadded) convolution along one axis.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize) -> Option<usize> {
    if kernel == 0 || stride == 0 || input < kernel {
        return None;
    }
    Some((input - kernel) / stride + 1)
}

/// Row-major gemm: c[m,n] (+)= a[m,k] * b[k,n], with explicit strides so
/// transposed views need no copies.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unrolls `x` ([c, h, w] row-major) into `col` with one row per output
/// pixel and columns ordered (channel, ki, kj). `col` is resized to
/// `out_h * out_w` rows by `c * k * k` columns.
pub(crate) fn im2col(
    x: &[f32],
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    col: &mut Vec<f32>,
) {
    let out_h = conv_out_len(h, k, stride).expect("validated by caller");
    let out_w = conv_out_len(w, k, stride).expect("validated by caller");
    let ckk = channels * k * k;
    col.clear();
    col.resize(out_h * out_w * ckk, 0.0);
    for oy in 0..out_h {
        for ox in 0..out_w {
            let row = (oy * out_w + ox) * ckk;
            let y0 = oy * stride;
            let x0 = ox * stride;
            for c in 0..channels {
                let plane = c * h * w;
                for ki in 0..k {
                    let src = plane + (y0 + ki) * w + x0;
                    let dst = row + (c * k + ki) * k;
                    col[dst..dst + k].copy_from_slice(&x[src..src + k]);
                }
            }
        }
    }
}

/// Scatter-adds a patch-matrix gradient back onto the input image. Inverse
/// access pattern of [`im2col`]; overlapping patches accumulate.
pub(crate) fn col2im_add(
    dcol: &[f32],
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    dx: &mut [f32],
) {
    let out_h = conv_out_len(h, k, stride).expect("validated by caller");
    let out_w = conv_out_len(w, k, stride).expect("validated by caller");
    let ckk = channels * k * k;
    debug_assert_eq!(dcol.len(), out_h * out_w * ckk);
    debug_assert_eq!(dx.len(), channels * h * w);
    for oy in 0..out_h {
        for ox in 0..out_w {
            let row = (oy * out_w + ox) * ckk;
            let y0 = oy * stride;
            let x0 = ox * stride;
            for c in 0..channels {
                let plane = c * h * w;
                for ki in 0..k {
                    let dst = plane + (y0 + ki) * w + x0;
                    let src = row + (c * k + ki) * k;
                    for kj in 0..k {
                        dx[dst + kj] += dcol[src + kj];
                    }
                }
            }
        }
    }
}
