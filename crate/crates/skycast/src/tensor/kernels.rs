//! Low-level numeric kernels behind the tape operations.
//!
//! Every kernel computes each output element with a fixed arithmetic
//! order, so results are bit-identical regardless of thread count.
//! Parallelism only ever splits disjoint output regions across threads.

use super::Element;
use rayon::prelude::*;

/// Whether either matrix view is transposed in [`gemm`].
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum Trans {
    No,
    Yes,
}

/// C[m,n] (+)= A ⋅ B where A is m×k and B is k×n after optional transposes.
///
/// `a_dims`/`b_dims` are the stored (row, col) dimensions before the
/// transpose flag is applied. With `accumulate` the product is added to C,
/// otherwise C is overwritten.
pub fn gemm<T: Element>(
    a: &[T],
    a_dims: (usize, usize),
    ta: Trans,
    b: &[T],
    b_dims: (usize, usize),
    tb: Trans,
    c: &mut [T],
    accumulate: bool,
) {
    let (m, k) = match ta {
        Trans::No => a_dims,
        Trans::Yes => (a_dims.1, a_dims.0),
    };
    let (kb, n) = match tb {
        Trans::No => b_dims,
        Trans::Yes => (b_dims.1, b_dims.0),
    };
    assert_eq!(k, kb, "gemm inner dimensions differ");
    assert_eq!(c.len(), m * n, "gemm output size mismatch");
    assert_eq!(a.len(), a_dims.0 * a_dims.1);
    assert_eq!(b.len(), b_dims.0 * b_dims.1);

    let (rsa, csa) = match ta {
        Trans::No => (a_dims.1 as isize, 1),
        Trans::Yes => (1, a_dims.1 as isize),
    };
    let (rsb, csb) = match tb {
        Trans::No => (b_dims.1 as isize, 1),
        Trans::Yes => (1, b_dims.1 as isize),
    };
    let beta = if accumulate { T::one() } else { T::zero() };

    // Split output rows across threads; each row block is an independent
    // gemm writing a disjoint slice of C, so the per-element arithmetic
    // order never depends on the split.
    let flops = 2 * m * n * k;
    let threads = crate::pool().current_num_threads();
    if threads > 1 && flops > 1 << 20 && m >= 2 * threads {
        let rows_per = m.div_ceil(threads);
        crate::pool().install(|| {
            c.par_chunks_mut(rows_per * n).enumerate().for_each(|(blk, c_blk)| {
                let row0 = blk * rows_per;
                let rows = c_blk.len() / n;
                unsafe {
                    let a_ptr = match ta {
                        Trans::No => a.as_ptr().add(row0 * a_dims.1),
                        Trans::Yes => a.as_ptr().add(row0),
                    };
                    T::gemm(
                        rows,
                        k,
                        n,
                        T::one(),
                        a_ptr,
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c_blk.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            });
        });
    } else {
        unsafe {
            T::gemm(
                m,
                k,
                n,
                T::one(),
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
}

/// Output spatial size of a convolution along one axis.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Unrolls one image [C,H,W] into patch columns [C*kh*kw, Hout*Wout].
///
/// Out-of-bounds taps read zero (zero padding).
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Element>(
    x: &[T],
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    cols: &mut [T],
) {
    let hout = conv_out_size(h, kh, stride, pad).expect("im2col geometry");
    let wout = conv_out_size(w, kw, stride, pad).expect("im2col geometry");
    assert_eq!(cols.len(), channels * kh * kw * hout * wout);

    let mut row = 0;
    for c in 0..channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let dst = &mut cols[row * hout * wout..(row + 1) * hout * wout];
                for oy in 0..hout {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let out_row = &mut dst[oy * wout..(oy + 1) * wout];
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, out) in out_row.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *out = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-adds patch-column gradients back onto the image gradient.
#[allow(clippy::too_many_arguments)]
pub fn col2im_add<T: Element>(
    cols: &[T],
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dx: &mut [T],
) {
    let hout = conv_out_size(h, kh, stride, pad).expect("col2im geometry");
    let wout = conv_out_size(w, kw, stride, pad).expect("col2im geometry");
    assert_eq!(cols.len(), channels * kh * kw * hout * wout);
    assert_eq!(dx.len(), channels * h * w);

    let mut row = 0;
    for c in 0..channels {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let src = &cols[row * hout * wout..(row + 1) * hout * wout];
                for oy in 0..hout {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src_row = &src[oy * wout..(oy + 1) * wout];
                    for (ox, &g) in src_row.iter().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] = dst_row[ix as usize] + g;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// 2×2 stride-2 max pool over [N,C,H,W]; returns per-output argmax as a
/// flat index into the input so the backward pass can route gradients.
/// Ties resolve to the lowest flat index.
pub fn maxpool2<T: Element>(x: &[T], n: usize, c: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    assert!(h % 2 == 0 && w % 2 == 0, "maxpool2 needs even spatial dims");
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![T::zero(); n * c * ho * wo];
    let mut arg = vec![0u32; n * c * ho * wo];
    for img in 0..n * c {
        let plane = &x[img * h * w..(img + 1) * h * w];
        let obase = img * ho * wo;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best_idx = 2 * oy * w + 2 * ox;
                let mut best = plane[best_idx];
                for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                    let idx = (2 * oy + dy) * w + 2 * ox + dx;
                    if plane[idx] > best {
                        best = plane[idx];
                        best_idx = idx;
                    }
                }
                out[obase + oy * wo + ox] = best;
                arg[obase + oy * wo + ox] = (img * h * w + best_idx) as u32;
            }
        }
    }
    (out, arg)
}

/// 2× nearest-neighbor upsampling of [N,C,H,W].
pub fn upsample2<T: Element>(x: &[T], n: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * c * ho * wo];
    for img in 0..n * c {
        let src = &x[img * h * w..(img + 1) * h * w];
        let dst = &mut out[img * ho * wo..(img + 1) * ho * wo];
        for y in 0..h {
            for x_ in 0..w {
                let v = src[y * w + x_];
                let base = 2 * y * wo + 2 * x_;
                dst[base] = v;
                dst[base + 1] = v;
                dst[base + wo] = v;
                dst[base + wo + 1] = v;
            }
        }
    }
    out
}

/// Backward of [`upsample2`]: sums each 2×2 output block into its source.
pub fn upsample2_backward<T: Element>(g: &[T], n: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (2 * h, 2 * w);
    assert_eq!(g.len(), n * c * ho * wo);
    let mut dx = vec![T::zero(); n * c * h * w];
    for img in 0..n * c {
        let src = &g[img * ho * wo..(img + 1) * ho * wo];
        let dst = &mut dx[img * h * w..(img + 1) * h * w];
        for y in 0..h {
            for x_ in 0..w {
                let base = 2 * y * wo + 2 * x_;
                dst[y * w + x_] = src[base] + src[base + 1] + src[base + wo] + src[base + wo + 1];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_identity() {
        let a = Tensorish::eye(3);
        let b: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let mut c = vec![0.0; 12];
        gemm(&a, (3, 3), Trans::No, &b, (3, 4), Trans::No, &mut c, false);
        assert_eq!(c, b);
    }

    struct Tensorish;
    impl Tensorish {
        fn eye(n: usize) -> Vec<f64> {
            let mut v = vec![0.0; n * n];
            for i in 0..n {
                v[i * n + i] = 1.0;
            }
            v
        }
    }

    #[test]
    fn gemm_transpose_matches_manual() {
        // A: 2x3, B: 2x4; C = A^T B is 3x4.
        let a: Vec<f64> = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b: Vec<f64> = (1..=8).map(|v| v as f64).collect();
        let mut c = vec![0.0; 12];
        gemm(&a, (2, 3), Trans::Yes, &b, (2, 4), Trans::No, &mut c, false);
        for i in 0..3 {
            for j in 0..4 {
                let want = a[i] * b[j] + a[3 + i] * b[4 + j];
                assert!((c[i * 4 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gemm_accumulate_adds() {
        let a = vec![1.0f64, 0.0, 0.0, 1.0];
        let b = vec![5.0f64, 6.0, 7.0, 8.0];
        let mut c = vec![1.0f64; 4];
        gemm(&a, (2, 2), Trans::No, &b, (2, 2), Trans::No, &mut c, true);
        assert_eq!(c, vec![6.0, 7.0, 8.0, 9.0]);
    }

    #[test]
    fn im2col_col2im_roundtrip_counts_taps() {
        // col2im(ones) counts how many patches each input pixel belongs to.
        let (c, h, w, k, s, p) = (1usize, 4usize, 4usize, 3usize, 1usize, 1usize);
        let ho = conv_out_size(h, k, s, p).unwrap();
        let cols = vec![1.0f64; c * k * k * ho * ho];
        let mut dx = vec![0.0f64; c * h * w];
        col2im_add(&cols, c, h, w, k, k, s, p, &mut dx);
        // Interior pixels appear in 9 patches, corners in 4.
        assert_eq!(dx[5], 9.0);
        assert_eq!(dx[0], 4.0);
    }

    #[test]
    fn maxpool_tie_takes_lowest_flat_index() {
        let x = vec![2.0f32, 2.0, 1.0, 0.0];
        let (out, arg) = maxpool2(&x, 1, 1, 2, 2);
        assert_eq!(out, vec![2.0]);
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn upsample_backward_sums_blocks() {
        let x = vec![1.0f64, 2.0, 3.0, 4.0];
        let up = upsample2(&x, 1, 1, 2, 2);
        assert_eq!(up.len(), 16);
        assert_eq!(up[0], 1.0);
        assert_eq!(up[1], 1.0);
        assert_eq!(up[5], 1.0);
        let g = vec![1.0f64; 16];
        let dx = upsample2_backward(&g, 1, 1, 2, 2);
        assert_eq!(dx, vec![4.0; 4]);
    }
}
