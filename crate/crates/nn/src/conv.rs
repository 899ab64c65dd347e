//! im2col lowering for 2-D convolution.
//!
//! Column buffers are laid out `[C*K*K, N*Ho*Wo]` so that a whole batch is a
//! single GEMM against the `[O, C*K*K]` weight matrix.

use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.batch * self.out_height() * self.out_width()
    }
}

pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let plane = ho * wo;
    let ncols = g.col_cols();
    let mut cols = vec![T::zero(); g.col_rows() * ncols];
    let (h, w, k, s) = (g.height as isize, g.width as isize, g.kernel, g.stride as isize);
    let p = g.padding as isize;
    for c in 0..g.in_channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.batch {
                    let src = &x[(n * g.in_channels + c) * g.height * g.width..][..g.height * g.width];
                    let dst = &mut dst_row[n * plane..(n + 1) * plane];
                    for oh in 0..ho {
                        let ih = oh as isize * s + ki as isize - p;
                        if ih < 0 || ih >= h {
                            continue;
                        }
                        let src_row = &src[ih as usize * g.width..][..g.width];
                        let dst_line = &mut dst[oh * wo..(oh + 1) * wo];
                        for (ow, d) in dst_line.iter_mut().enumerate() {
                            let iw = ow as isize * s + kj as isize - p;
                            if iw >= 0 && iw < w {
                                *d = src_row[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds a column buffer back into an input-shaped gradient.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry) -> Vec<T> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let plane = ho * wo;
    let ncols = g.col_cols();
    let mut dx = vec![T::zero(); g.batch * g.in_channels * g.height * g.width];
    let (h, w, k, s) = (g.height as isize, g.width as isize, g.kernel, g.stride as isize);
    let p = g.padding as isize;
    for c in 0..g.in_channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.batch {
                    let dst = &mut dx[(n * g.in_channels + c) * g.height * g.width..][..g.height * g.width];
                    let src = &src_row[n * plane..(n + 1) * plane];
                    for oh in 0..ho {
                        let ih = oh as isize * s + ki as isize - p;
                        if ih < 0 || ih >= h {
                            continue;
                        }
                        let dst_line = &mut dst[ih as usize * g.width..][..g.width];
                        for ow in 0..wo {
                            let iw = ow as isize * s + kj as isize - p;
                            if iw >= 0 && iw < w {
                                let d = &mut dst_line[iw as usize];
                                *d = *d + src[oh * wo + ow];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// `[O, N*P]` -> `[N, O, P]`.
pub fn channel_major_to_batch_major<T: Scalar>(m: &[T], n: usize, o: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * o * p];
    for oc in 0..o {
        for b in 0..n {
            out[(b * o + oc) * p..][..p].copy_from_slice(&m[oc * n * p + b * p..][..p]);
        }
    }
    out
}

/// `[N, O, P]` -> `[O, N*P]`.
pub fn batch_major_to_channel_major<T: Scalar>(x: &[T], n: usize, o: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * o * p];
    for b in 0..n {
        for oc in 0..o {
            out[oc * n * p + b * p..][..p].copy_from_slice(&x[(b * o + oc) * p..][..p]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeometry { batch: 2, in_channels: 2, height: 5, width: 4, kernel: 3, stride: 2, padding: 1 };
        let x: Vec<f64> = (0..g.batch * g.in_channels * g.height * g.width).map(|i| (i as f64 * 0.37).sin()).collect();
        let cols = im2col(&x, &g);
        let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.11).cos()).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = col2im(&y, &g);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn layout_permutations_invert() {
        let x: Vec<f32> = (0..24).map(|i| i as f32).collect();
        let m = batch_major_to_channel_major(&x, 2, 3, 4);
        assert_eq!(channel_major_to_batch_major(&m, 2, 3, 4), x);
    }
}
