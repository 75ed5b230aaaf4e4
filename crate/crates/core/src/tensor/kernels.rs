//! Raw numeric kernels shared by the graph ops.

use super::Scalar;

/// Read-only strided matrix view.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatRef<'a, T> {
    /// Contiguous row-major `rows x cols` matrix.
    pub fn rm(data: &'a [T], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn fits(&self) -> bool {
        self.rows == 0
            || self.cols == 0
            || (self.rows - 1) * self.rs + (self.cols - 1) * self.cs < self.data.len()
    }
}

/// `c = a * b + beta * c` with `c` contiguous row-major.
pub(crate) fn gemm<T: Scalar>(a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: &mut [T]) {
    assert_eq!(a.cols, b.rows, "gemm inner extent");
    assert!(a.fits() && b.fits(), "gemm operand out of bounds");
    assert_eq!(c.len(), a.rows * b.cols, "gemm output size");
    if a.rows == 0 || b.cols == 0 {
        return;
    }
    if a.cols == 0 {
        c.iter_mut().for_each(|v| *v = *v * beta);
        return;
    }
    // SAFETY: every index touched lies inside the slices (checked by `fits`
    // and the output length assertion above).
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            T::one(),
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            b.cols as isize,
            1,
        )
    }
}

/// Geometry of a 2-D convolution over an `n x c x h x w` batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Rows of the column matrix (`c * kh * kw`).
    pub fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }

    /// Output positions per sample.
    pub fn p(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds `x` into a `k x (n * p)` column matrix.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (np, p) = (g.n * g.p(), g.p());
    let mut cols = vec![T::zero(); g.k() * np];
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst_row = &mut cols[row * np..(row + 1) * np];
                for ni in 0..g.n {
                    let src = &x[(ni * g.c + ci) * g.h * g.w..][..g.h * g.w];
                    let dst = &mut dst_row[ni * p..(ni + 1) * p];
                    for oi in 0..g.oh {
                        let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                        let out_row = &mut dst[oi * g.ow..(oi + 1) * g.ow];
                        if ii < 0 || ii >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[ii as usize * g.w..(ii as usize + 1) * g.w];
                        if g.stride == 1 && g.pad == 0 {
                            out_row.copy_from_slice(&src_row[kj..kj + g.ow]);
                            continue;
                        }
                        for (oj, o) in out_row.iter_mut().enumerate() {
                            let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                            if jj >= 0 && jj < g.w as isize {
                                *o = src_row[jj as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds a column matrix back, summing overlaps.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (np, p) = (g.n * g.p(), g.p());
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src_row = &cols[row * np..(row + 1) * np];
                for ni in 0..g.n {
                    let dst = &mut dx[(ni * g.c + ci) * g.h * g.w..][..g.h * g.w];
                    let src = &src_row[ni * p..(ni + 1) * p];
                    for oi in 0..g.oh {
                        let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                        if ii < 0 || ii >= g.h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[ii as usize * g.w..(ii as usize + 1) * g.w];
                        for (oj, &v) in src[oi * g.ow..(oi + 1) * g.ow].iter().enumerate() {
                            let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                            if jj >= 0 && jj < g.w as isize {
                                dst_row[jj as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2x2 stride-2 max pooling over `planes` planes of `h x w`.
///
/// Returns pooled values and, per output, the flat input index of the
/// winning element (first in row-major window order on ties).
pub(crate) fn max_pool2x2<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut idx = Vec::with_capacity(planes * oh * ow);
    for pl in 0..planes {
        let base = pl * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let cand = base + (2 * i + di) * w + 2 * j + dj;
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                out.push(x[best]);
                idx.push(best as u32);
            }
        }
    }
    (out, idx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], wt: &[f64], g: &ConvGeom, o: usize) -> Vec<f64> {
        let mut out = vec![0.0; g.n * o * g.p()];
        for n in 0..g.n {
            for oc in 0..o {
                for oi in 0..g.oh {
                    for oj in 0..g.ow {
                        let mut acc = 0.0;
                        for c in 0..g.c {
                            for ki in 0..g.kh {
                                for kj in 0..g.kw {
                                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                                    let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                                    if ii < 0 || jj < 0 || ii >= g.h as isize || jj >= g.w as isize {
                                        continue;
                                    }
                                    acc += x[((n * g.c + c) * g.h + ii as usize) * g.w + jj as usize]
                                        * wt[((oc * g.c + c) * g.kh + ki) * g.kw + kj];
                                }
                            }
                        }
                        out[((n * o + oc) * g.oh + oi) * g.ow + oj] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_gemm_matches_direct_convolution() {
        let g = ConvGeom {
            n: 2,
            c: 2,
            h: 5,
            w: 6,
            kh: 3,
            kw: 2,
            stride: 2,
            pad: 1,
            oh: 3,
            ow: 4,
        };
        let x: Vec<f64> = (0..g.n * g.c * g.h * g.w).map(|i| (i as f64 * 0.37).sin()).collect();
        let o = 3;
        let wt: Vec<f64> = (0..o * g.k()).map(|i| (i as f64 * 0.11).cos()).collect();
        let cols = im2col(&x, &g);
        let mut tmp = vec![0.0; o * g.n * g.p()];
        gemm(
            MatRef::rm(&wt, o, g.k()),
            MatRef::rm(&cols, g.k(), g.n * g.p()),
            0.0,
            &mut tmp,
        );
        let expect = naive_conv(&x, &wt, &g, o);
        for n in 0..g.n {
            for oc in 0..o {
                for pp in 0..g.p() {
                    let got = tmp[oc * g.n * g.p() + n * g.p() + pp];
                    let want = expect[(n * o + oc) * g.p() + pp];
                    assert!((got - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let g = ConvGeom {
            n: 1,
            c: 2,
            h: 4,
            w: 4,
            kh: 3,
            kw: 3,
            stride: 1,
            pad: 1,
            oh: 4,
            ow: 4,
        };
        let x: Vec<f64> = (0..32).map(|i| (i as f64).sin()).collect();
        let c: Vec<f64> = (0..g.k() * g.p()).map(|i| (i as f64 * 0.3).cos()).collect();
        let lhs: f64 = im2col(&x, &g).iter().zip(&c).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; 32];
        col2im(&c, &g, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn transposed_views() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let mut c = vec![0.0; 4];
        gemm(MatRef::rm(&a, 2, 3), MatRef::rm(&a, 2, 3).t(), 0.0, &mut c);
        assert_eq!(c, vec![14.0, 32.0, 32.0, 77.0]);
    }
}
