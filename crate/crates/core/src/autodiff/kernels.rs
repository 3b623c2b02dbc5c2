//! Forward and backward kernels for the dense primitives.
//!
//! Convolution lowers each sample through im2col and a row-major
//! multiply. Batch samples are processed in parallel; cross-sample
//! reductions (weight and bias gradients) are summed in sample order
//! afterwards so the result does not depend on scheduling.

use crate::autodiff::Scalar;
use crate::error::{config_err, shape_err, Result};
use crate::parallel;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        bias: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if input.len() != 4 || weight.len() != 4 || bias.len() != 1 {
            return Err(shape_err!(
                "conv2d expects input [N,C,H,W], weight [Co,Ci,kh,kw], bias [Co]; got {:?}, {:?}, {:?}",
                input,
                weight,
                bias
            ));
        }
        if input[1] != weight[1] {
            return Err(shape_err!(
                "conv2d input has {} channels but weight expects {}",
                input[1],
                weight[1]
            ));
        }
        if bias[0] != weight[0] {
            return Err(shape_err!("conv2d bias length {} != out channels {}", bias[0], weight[0]));
        }
        if stride == 0 {
            return Err(config_err!("conv2d stride must be positive"));
        }
        let (h, w, kh, kw) = (input[2], input[3], weight[2], weight[3]);
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(config_err!(
                "conv2d kernel {}x{} larger than padded input {}x{}",
                kh,
                kw,
                h + 2 * padding,
                w + 2 * padding
            ));
        }
        Ok(ConvGeometry {
            batch: input[0],
            in_channels: input[1],
            height: h,
            width: w,
            out_channels: weight[0],
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_sample(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    /// Column matrix `[patch_len, out_h*out_w]` for one sample.
    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let p = self.out_plane();
        let mut row = 0;
        for c in 0..self.in_channels {
            let plane = &x[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..self.kernel_h {
                for kj in 0..self.kernel_w {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oi in 0..self.out_h {
                        let ii = (oi * self.stride + ki) as isize - self.padding as isize;
                        for oj in 0..self.out_w {
                            let jj = (oj * self.stride + kj) as isize - self.padding as isize;
                            dst[oi * self.out_w + oj] = if ii >= 0
                                && jj >= 0
                                && (ii as usize) < self.height
                                && (jj as usize) < self.width
                            {
                                plane[ii as usize * self.width + jj as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let p = self.out_plane();
        let mut row = 0;
        for c in 0..self.in_channels {
            let plane = &mut dx[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..self.kernel_h {
                for kj in 0..self.kernel_w {
                    let src = &cols[row * p..(row + 1) * p];
                    for oi in 0..self.out_h {
                        let ii = (oi * self.stride + ki) as isize - self.padding as isize;
                        if ii < 0 || ii as usize >= self.height {
                            continue;
                        }
                        for oj in 0..self.out_w {
                            let jj = (oj * self.stride + kj) as isize - self.padding as isize;
                            if jj < 0 || jj as usize >= self.width {
                                continue;
                            }
                            plane[ii as usize * self.width + jj as usize] += src[oi * self.out_w + oj];
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(g: &ConvGeometry, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let k = g.patch_len();
    let p = g.out_plane();
    let per_out = g.out_channels * p;
    let mut out = vec![T::zero(); g.batch * per_out];
    parallel::for_each_chunk(&mut out, per_out, |n, dst| {
        let mut cols = vec![T::zero(); k * p];
        g.im2col(&x[n * g.in_sample()..(n + 1) * g.in_sample()], &mut cols);
        for co in 0..g.out_channels {
            let row = &mut dst[co * p..(co + 1) * p];
            row.fill(b[co]);
            let wrow = &w[co * k..(co + 1) * k];
            for (kk, &wv) in wrow.iter().enumerate() {
                let col = &cols[kk * p..(kk + 1) * p];
                for (r, &c) in row.iter_mut().zip(col) {
                    *r += wv * c;
                }
            }
        }
    });
    out
}

/// Gradients `(dx, dw, db)` of a convolution given the upstream gradient.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeometry,
    x: &[T],
    w: &[T],
    dout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let k = g.patch_len();
    let p = g.out_plane();
    let per_out = g.out_channels * p;
    let per_in = g.in_sample();

    let partials = parallel::map_indexed(g.batch, |n| {
        let mut cols = vec![T::zero(); k * p];
        g.im2col(&x[n * per_in..(n + 1) * per_in], &mut cols);
        let d = &dout[n * per_out..(n + 1) * per_out];

        let mut dw = vec![T::zero(); g.out_channels * k];
        for co in 0..g.out_channels {
            let drow = &d[co * p..(co + 1) * p];
            for kk in 0..k {
                let col = &cols[kk * p..(kk + 1) * p];
                let mut acc = T::zero();
                for (&a, &c) in drow.iter().zip(col) {
                    acc += a * c;
                }
                dw[co * k + kk] = acc;
            }
        }

        let mut dcols = vec![T::zero(); k * p];
        for co in 0..g.out_channels {
            let drow = &d[co * p..(co + 1) * p];
            for kk in 0..k {
                let wv = w[co * k + kk];
                let dst = &mut dcols[kk * p..(kk + 1) * p];
                for (r, &a) in dst.iter_mut().zip(drow) {
                    *r += wv * a;
                }
            }
        }
        let mut dx = vec![T::zero(); per_in];
        g.col2im(&dcols, &mut dx);
        (dx, dw)
    });

    let mut dx = Vec::with_capacity(g.batch * per_in);
    let mut dw = vec![T::zero(); g.out_channels * k];
    for (dxn, dwn) in partials {
        dx.extend_from_slice(&dxn);
        for (a, b) in dw.iter_mut().zip(&dwn) {
            *a += *b;
        }
    }
    let mut db = vec![T::zero(); g.out_channels];
    for n in 0..g.batch {
        for co in 0..g.out_channels {
            let s: T = dout[n * per_out + co * p..n * per_out + (co + 1) * p]
                .iter()
                .copied()
                .sum();
            db[co] += s;
        }
    }
    (dx, dw, db)
}

/// Checks shapes for `input [N, in] · weight[out, in]^T + bias[out]`.
pub fn linear_dims(input: &[usize], weight: &[usize], bias: &[usize]) -> Result<(usize, usize, usize)> {
    if input.len() != 2 || weight.len() != 2 || bias.len() != 1 {
        return Err(shape_err!(
            "linear expects input [N,in], weight [out,in], bias [out]; got {:?}, {:?}, {:?}",
            input,
            weight,
            bias
        ));
    }
    if input[1] != weight[1] {
        return Err(shape_err!(
            "linear inner dimensions disagree: input {} vs weight {}",
            input[1],
            weight[1]
        ));
    }
    if bias[0] != weight[0] {
        return Err(shape_err!("linear bias length {} != out features {}", bias[0], weight[0]));
    }
    Ok((input[0], input[1], weight[0]))
}

pub fn linear_forward<T: Scalar>(n: usize, cin: usize, cout: usize, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); n * cout];
    parallel::for_each_chunk(&mut out, cout, |i, dst| {
        let xr = &x[i * cin..(i + 1) * cin];
        for (o, d) in dst.iter_mut().enumerate() {
            let wr = &w[o * cin..(o + 1) * cin];
            let mut acc = b[o];
            for (&a, &c) in xr.iter().zip(wr) {
                acc += a * c;
            }
            *d = acc;
        }
    });
    out
}

pub fn linear_backward<T: Scalar>(
    n: usize,
    cin: usize,
    cout: usize,
    x: &[T],
    w: &[T],
    dout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); n * cin];
    parallel::for_each_chunk(&mut dx, cin, |i, dst| {
        for o in 0..cout {
            let g = dout[i * cout + o];
            let wr = &w[o * cin..(o + 1) * cin];
            for (d, &wv) in dst.iter_mut().zip(wr) {
                *d += g * wv;
            }
        }
    });
    let mut dw = vec![T::zero(); cout * cin];
    parallel::for_each_chunk(&mut dw, cin, |o, dst| {
        for i in 0..n {
            let g = dout[i * cout + o];
            let xr = &x[i * cin..(i + 1) * cin];
            for (d, &xv) in dst.iter_mut().zip(xr) {
                *d += g * xv;
            }
        }
    });
    let mut db = vec![T::zero(); cout];
    for i in 0..n {
        for o in 0..cout {
            db[o] += dout[i * cout + o];
        }
    }
    (dx, dw, db)
}
