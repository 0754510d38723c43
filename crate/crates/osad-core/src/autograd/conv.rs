//! im2col / col2im kernels shared by the convolution ops.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

/// Geometry of one 2-D convolution.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }
}

/// Unfold one image (cin, h, w) into a (cin*kh*kw, oh*ow) patch matrix.
pub(crate) fn im2col(x: ArrayView3<f64>, g: ConvGeom) -> Array2<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut cols = Array2::<f64>::zeros((g.cin * g.kh * g.kw, oh * ow));
    for c in 0..g.cin {
        for a in 0..g.kh {
            for b in 0..g.kw {
                let row = (c * g.kh + a) * g.kw + b;
                for oi in 0..oh {
                    let ii = (oi * g.stride + a) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * g.stride + b) as isize - g.pad as isize;
                        if jj < 0 || jj >= g.w as isize {
                            continue;
                        }
                        cols[[row, oi * ow + oj]] = x[[c, ii as usize, jj as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add a patch matrix back into (cin, h, w).
pub(crate) fn col2im(cols: ArrayView2<f64>, g: ConvGeom) -> Array3<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut x = Array3::<f64>::zeros((g.cin, g.h, g.w));
    for c in 0..g.cin {
        for a in 0..g.kh {
            for b in 0..g.kw {
                let row = (c * g.kh + a) * g.kw + b;
                for oi in 0..oh {
                    let ii = (oi * g.stride + a) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * g.stride + b) as isize - g.pad as isize;
                        if jj < 0 || jj >= g.w as isize {
                            continue;
                        }
                        x[[c, ii as usize, jj as usize]] += cols[[row, oi * ow + oj]];
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn im2col_identity_kernel() {
        let g = ConvGeom { cin: 1, h: 2, w: 2, kh: 1, kw: 1, stride: 1, pad: 0 };
        let x = Array3::from_shape_vec((1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let cols = im2col(x.view(), g);
        assert_eq!(cols.shape(), &[1, 4]);
        assert_eq!(cols.as_slice().unwrap(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn col2im_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y.
        let g = ConvGeom { cin: 2, h: 5, w: 4, kh: 3, kw: 3, stride: 2, pad: 1 };
        let x = Array3::from_shape_fn((2, 5, 4), |(c, i, j)| (c * 31 + i * 7 + j) as f64 * 0.1);
        let cols = im2col(x.view(), g);
        let y = Array2::from_shape_fn(cols.raw_dim(), |(r, c)| ((r * 13 + c * 5) % 11) as f64);
        let lhs: f64 = (&cols * &y).sum();
        let back = col2im(y.view(), g);
        let rhs: f64 = (&x * &back).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
