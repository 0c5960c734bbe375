//! Raw matrix kernels shared by the tape's forward and backward passes.
//! All loops run over contiguous slices so the compiler can vectorize them.

/// C[m×n] += A[m×k] · B[k×n]
pub fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// C[m×n] += A[m×k] · B[n×k]ᵀ
pub fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *cv += acc;
        }
    }
}

/// C[m×n] += A[k×m]ᵀ · B[k×n]
pub fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for r in 0..k {
        let arow = &a[r * m..(r + 1) * m];
        let brow = &b[r * n..(r + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// out[n×m] = in[m×n]ᵀ
pub fn transpose(input: &[f64], m: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(input.len(), m * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = input[i * n + j];
        }
    }
}

/// Unfold one image [C×H×W] into columns [C·KH·KW × OH·OW] for a
/// cross-correlation with the given stride and zero padding.
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    x: &[f64],
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    col: &mut [f64],
) {
    let oh = (height + 2 * pad - kh) / stride + 1;
    let ow = (width + 2 * pad - kw) / stride + 1;
    debug_assert_eq!(col.len(), channels * kh * kw * oh * ow);
    let positions = oh * ow;
    for c in 0..channels {
        let plane = &x[c * height * width..(c + 1) * height * width];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &mut col[((c * kh + ky) * kw + kx) * positions
                    ..((c * kh + ky) * kw + kx + 1) * positions];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        row[oy * ow + ox] = if iy >= 0
                            && iy < height as isize
                            && ix >= 0
                            && ix < width as isize
                        {
                            plane[iy as usize * width + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add the column gradient back onto the image: the adjoint of
/// [`im2col`].
#[allow(clippy::too_many_arguments)]
pub fn col2im(
    col: &[f64],
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    x_grad: &mut [f64],
) {
    let oh = (height + 2 * pad - kh) / stride + 1;
    let ow = (width + 2 * pad - kw) / stride + 1;
    let positions = oh * ow;
    for c in 0..channels {
        let plane = &mut x_grad[c * height * width..(c + 1) * height * width];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &col[((c * kh + ky) * kw + kx) * positions
                    ..((c * kh + ky) * kw + kx + 1) * positions];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= height as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < width as isize {
                            plane[iy as usize * width + ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}
