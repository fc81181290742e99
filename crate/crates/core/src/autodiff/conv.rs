use serde::{Deserialize, Serialize};

use crate::tensor::Real;

/// Static geometry of a 2-D convolution over `[C, H, W]` inputs with a
/// `[O, C, k, k]` kernel, stride `s` and symmetric zero padding `p`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn in_len(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.out_channels * self.out_h() * self.out_w()
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    pub fn is_valid(&self) -> bool {
        self.kernel >= 1
            && self.stride >= 1
            && self.in_h + 2 * self.padding >= self.kernel
            && self.in_w + 2 * self.padding >= self.kernel
    }

    /// Visits every (patch row, output position, input offset) triple whose
    /// input location falls inside the unpadded image.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let k = self.kernel;
        for c in 0..self.in_channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            if ix < 0 || ix >= self.in_w as isize {
                                continue;
                            }
                            let src = (c * self.in_h + iy as usize) * self.in_w + ix as usize;
                            f(row, oy * ow + ox, src);
                        }
                    }
                }
            }
        }
    }
}

/// Lowers one `[C, H, W]` image to a `[C*k*k, Ho*Wo]` patch matrix.
pub(crate) fn im2col<T: Real>(x: &[T], geom: &ConvGeometry, cols: &mut [T]) {
    let p = geom.positions();
    cols.iter_mut().for_each(|v| *v = T::zero());
    geom.for_each_tap(|row, pos, src| cols[row * p + pos] = x[src]);
}

/// Adjoint of [`im2col`]: scatters a patch matrix back, accumulating into `x`.
pub(crate) fn col2im<T: Real>(cols: &[T], geom: &ConvGeometry, x: &mut [T]) {
    let p = geom.positions();
    geom.for_each_tap(|row, pos, src| x[src] = x[src] + cols[row * p + pos]);
}

/// `out[b] = W * im2col(x[b])`, one `[O, Ho*Wo]` block per batch row.
pub(crate) fn conv_forward<T: Real>(x: &[T], w: &[T], geom: &ConvGeometry, batch: usize) -> Vec<T> {
    let (pl, p, o) = (geom.patch_len(), geom.positions(), geom.out_channels);
    let mut cols = vec![T::zero(); pl * p];
    let mut out = vec![T::zero(); batch * o * p];
    for b in 0..batch {
        im2col(&x[b * geom.in_len()..(b + 1) * geom.in_len()], geom, &mut cols);
        T::gemm(
            o,
            pl,
            p,
            w,
            pl as isize,
            1,
            &cols,
            p as isize,
            1,
            T::zero(),
            &mut out[b * o * p..(b + 1) * o * p],
            p as isize,
            1,
        );
    }
    out
}

/// `x[b] = col2im(W^T y[b])`, the transpose of [`conv_forward`] in `x`.
pub(crate) fn conv_transpose<T: Real>(y: &[T], w: &[T], geom: &ConvGeometry, batch: usize) -> Vec<T> {
    let (pl, p, o) = (geom.patch_len(), geom.positions(), geom.out_channels);
    let mut cols = vec![T::zero(); pl * p];
    let mut x = vec![T::zero(); batch * geom.in_len()];
    for b in 0..batch {
        T::gemm(
            pl,
            o,
            p,
            w,
            1,
            pl as isize,
            &y[b * o * p..(b + 1) * o * p],
            p as isize,
            1,
            T::zero(),
            &mut cols,
            p as isize,
            1,
        );
        col2im(&cols, geom, &mut x[b * geom.in_len()..(b + 1) * geom.in_len()]);
    }
    x
}

/// Kernel gradient `sum_b y[b] * im2col(x[b])^T`, where `y` is output-shaped
/// and `x` input-shaped.
pub(crate) fn conv_weight_grad<T: Real>(y: &[T], x: &[T], geom: &ConvGeometry, batch: usize) -> Vec<T> {
    let (pl, p, o) = (geom.patch_len(), geom.positions(), geom.out_channels);
    let mut cols = vec![T::zero(); pl * p];
    let mut gw = vec![T::zero(); o * pl];
    for b in 0..batch {
        im2col(&x[b * geom.in_len()..(b + 1) * geom.in_len()], geom, &mut cols);
        T::gemm(
            o,
            p,
            pl,
            &y[b * o * p..(b + 1) * o * p],
            p as isize,
            1,
            &cols,
            1,
            p as isize,
            T::one(),
            &mut gw,
            pl as isize,
            1,
        );
    }
    gw
}
