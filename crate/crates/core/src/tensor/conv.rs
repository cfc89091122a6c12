//! Same-padded, stride-1 cross-correlation in 2D and 3D, plus the direct
//! nested-loop reference used as the oracle for both.
//!
//! `conv2d_forward`/`conv3d_forward` accumulate tap-by-tap over contiguous
//! rows; `conv_forward_naive` gathers per output element. The two routes
//! visit the same products in different orders, so agreement between them
//! is a meaningful check rather than a tautology.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use rand::Rng;

/// Kernel dimensionality: 2D kernels slide over (H, W), 3D over (T, H, W).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelDims {
    Two,
    Three,
}

/// Convolution weights plus bias.
///
/// Weight layout is (out_channels, in_channels, k_h, k_w) for 2D kernels and
/// (out_channels, in_channels, k_t, k_h, k_w) for 3D. Every sliding extent
/// must be odd so that same-padding is symmetric.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel<T: Scalar> {
    weights: Tensor<T>,
    bias: Tensor<T>,
}

impl<T: Scalar> ConvKernel<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let rank = weights.rank();
        if rank != 4 && rank != 5 {
            return Err(Error::RankMismatch {
                expected: 4,
                got: rank,
            });
        }
        for &e in &weights.shape()[2..] {
            if e % 2 == 0 {
                return Err(Error::InvalidArgument(format!(
                    "kernel extent {e} is even; same-padding requires odd extents"
                )));
            }
        }
        if bias.rank() != 1 || bias.shape()[0] != weights.shape()[0] {
            return Err(Error::ShapeMismatch {
                expected: format!("bias of shape [{}]", weights.shape()[0]),
                got: format!("{:?}", bias.shape()),
                context: "kernel bias",
            });
        }
        Ok(Self { weights, bias })
    }

    pub fn zeros_2d(out_channels: usize, in_channels: usize, kh: usize, kw: usize) -> Result<Self> {
        Self::new(
            Tensor::zeros(vec![out_channels, in_channels, kh, kw])?,
            Tensor::zeros(vec![out_channels])?,
        )
    }

    pub fn zeros_3d(
        out_channels: usize,
        in_channels: usize,
        kt: usize,
        kh: usize,
        kw: usize,
    ) -> Result<Self> {
        Self::new(
            Tensor::zeros(vec![out_channels, in_channels, kt, kh, kw])?,
            Tensor::zeros(vec![out_channels])?,
        )
    }

    /// Channel-preserving identity: 1x1(x1) taps with weight 1 on the
    /// diagonal, bias zero. Convolving with it returns the input unchanged.
    pub fn identity(channels: usize, dims: KernelDims) -> Result<Self> {
        let shape = match dims {
            KernelDims::Two => vec![channels, channels, 1, 1],
            KernelDims::Three => vec![channels, channels, 1, 1, 1],
        };
        let mut weights = Tensor::zeros(shape)?;
        for c in 0..channels {
            let idx = match dims {
                KernelDims::Two => vec![c, c, 0, 0],
                KernelDims::Three => vec![c, c, 0, 0, 0],
            };
            weights.set(&idx, T::one());
        }
        Self::new(weights, Tensor::zeros(vec![channels])?)
    }

    pub fn random_2d(
        out_channels: usize,
        in_channels: usize,
        kh: usize,
        kw: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::new(
            Tensor::random_uniform(vec![out_channels, in_channels, kh, kw], -0.5, 0.5, rng)?,
            Tensor::random_uniform(vec![out_channels], -0.5, 0.5, rng)?,
        )
    }

    pub fn random_3d(
        out_channels: usize,
        in_channels: usize,
        kt: usize,
        kh: usize,
        kw: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::new(
            Tensor::random_uniform(vec![out_channels, in_channels, kt, kh, kw], -0.5, 0.5, rng)?,
            Tensor::random_uniform(vec![out_channels], -0.5, 0.5, rng)?,
        )
    }

    pub fn dims(&self) -> KernelDims {
        if self.weights.rank() == 4 {
            KernelDims::Two
        } else {
            KernelDims::Three
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }

    pub fn bias(&self) -> &Tensor<T> {
        &self.bias
    }

    fn check_input(&self, input: &Tensor<T>, expected_rank: usize) -> Result<()> {
        if input.rank() != expected_rank {
            return Err(Error::RankMismatch {
                expected: expected_rank,
                got: input.rank(),
            });
        }
        if input.shape()[0] != self.in_channels() {
            return Err(Error::ChannelMismatch {
                expected: self.in_channels(),
                got: input.shape()[0],
            });
        }
        Ok(())
    }
}

/// Same-padded stride-1 2D cross-correlation of a (C_in, H, W) tensor,
/// producing (C_out, H, W).
pub fn conv2d_forward<T: Scalar>(input: &Tensor<T>, kernel: &ConvKernel<T>) -> Result<Tensor<T>> {
    if kernel.dims() != KernelDims::Two {
        return Err(Error::InvalidArgument(
            "conv2d_forward requires a 2D kernel".into(),
        ));
    }
    kernel.check_input(input, 3)?;

    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let c_out = kernel.out_channels();
    let (kh, kw) = (kernel.weights.shape()[2], kernel.weights.shape()[3]);
    let (ph, pw) = (kh / 2, kw / 2);

    let mut out = Tensor::zeros(vec![c_out, h, w])?;
    let plane = h * w;
    for co in 0..c_out {
        let b = kernel.bias.data()[co];
        let out_plane = &mut out.data_mut()[co * plane..(co + 1) * plane];
        out_plane.fill(b);
        for ci in 0..c_in {
            let in_plane = &input.data()[ci * plane..(ci + 1) * plane];
            for ky in 0..kh {
                let dy = ky as isize - ph as isize;
                for kx in 0..kw {
                    let dx = kx as isize - pw as isize;
                    let wgt = kernel.weights.get(&[co, ci, ky, kx]);
                    if wgt == T::zero() {
                        continue;
                    }
                    accumulate_shifted_plane(out_plane, in_plane, h, w, dy, dx, wgt);
                }
            }
        }
    }
    Ok(out)
}

/// Same-padded stride-1 3D cross-correlation of a (C_in, T, H, W) tensor,
/// producing (C_out, T, H, W).
pub fn conv3d_forward<T: Scalar>(input: &Tensor<T>, kernel: &ConvKernel<T>) -> Result<Tensor<T>> {
    if kernel.dims() != KernelDims::Three {
        return Err(Error::InvalidArgument(
            "conv3d_forward requires a 3D kernel".into(),
        ));
    }
    kernel.check_input(input, 4)?;

    let (c_in, t, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let c_out = kernel.out_channels();
    let kshape = kernel.weights.shape();
    let (kt, kh, kw) = (kshape[2], kshape[3], kshape[4]);
    let (pt, ph, pw) = (kt / 2, kh / 2, kw / 2);

    let mut out = Tensor::zeros(vec![c_out, t, h, w])?;
    let plane = h * w;
    let volume = t * plane;
    for co in 0..c_out {
        let b = kernel.bias.data()[co];
        let out_volume = &mut out.data_mut()[co * volume..(co + 1) * volume];
        out_volume.fill(b);
        for ci in 0..c_in {
            let in_volume = &input.data()[ci * volume..(ci + 1) * volume];
            for kz in 0..kt {
                let dz = kz as isize - pt as isize;
                for ky in 0..kh {
                    let dy = ky as isize - ph as isize;
                    for kx in 0..kw {
                        let dx = kx as isize - pw as isize;
                        let wgt = kernel.weights.get(&[co, ci, kz, ky, kx]);
                        if wgt == T::zero() {
                            continue;
                        }
                        for ot in 0..t {
                            let it = ot as isize + dz;
                            if it < 0 || it >= t as isize {
                                continue;
                            }
                            let out_plane = &mut out_volume[ot * plane..(ot + 1) * plane];
                            let in_plane =
                                &in_volume[it as usize * plane..(it as usize + 1) * plane];
                            accumulate_shifted_plane(out_plane, in_plane, h, w, dy, dx, wgt);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `out[y][x] += wgt * inp[y + dy][x + dx]` over the in-bounds region.
fn accumulate_shifted_plane<T: Scalar>(
    out: &mut [T],
    inp: &[T],
    h: usize,
    w: usize,
    dy: isize,
    dx: isize,
    wgt: T,
) {
    // The overlap can be empty when the kernel extent exceeds the input.
    let y_lo = (-dy).max(0) as usize;
    let y_hi = (h as isize - dy.max(0)).max(0) as usize;
    let x_lo = (-dx).max(0) as usize;
    let x_hi = (w as isize - dx.max(0)).max(0) as usize;
    if y_lo >= y_hi || x_lo >= x_hi {
        return;
    }
    for y in y_lo..y_hi {
        let iy = (y as isize + dy) as usize;
        let out_row = &mut out[y * w + x_lo..y * w + x_hi];
        let in_row = &inp[iy * w + (x_lo as isize + dx) as usize..];
        for (o, &i) in out_row.iter_mut().zip(in_row) {
            *o = *o + wgt * i;
        }
    }
}

/// Direct nested-loop definition of the same-padded cross-correlation.
///
/// Dispatches on input rank (3 = 2D, 4 = 3D). Intentionally slow and
/// maximally simple; this is the reference the fast paths are checked
/// against.
pub fn conv_forward_naive<T: Scalar>(
    input: &Tensor<T>,
    kernel: &ConvKernel<T>,
) -> Result<Tensor<T>> {
    match (input.rank(), kernel.dims()) {
        (3, KernelDims::Two) => {
            kernel.check_input(input, 3)?;
            let (h, w) = (input.shape()[1], input.shape()[2]);
            let (c_out, c_in) = (kernel.out_channels(), kernel.in_channels());
            let (kh, kw) = (kernel.weights.shape()[2], kernel.weights.shape()[3]);
            let (ph, pw) = (kh as isize / 2, kw as isize / 2);
            let mut out = Tensor::zeros(vec![c_out, h, w])?;
            for co in 0..c_out {
                for oy in 0..h {
                    for ox in 0..w {
                        let mut acc = kernel.bias.data()[co];
                        for ci in 0..c_in {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = oy as isize + ky as isize - ph;
                                    let ix = ox as isize + kx as isize - pw;
                                    if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc = acc
                                        + kernel.weights.get(&[co, ci, ky, kx])
                                            * input.get(&[ci, iy as usize, ix as usize]);
                                }
                            }
                        }
                        out.set(&[co, oy, ox], acc);
                    }
                }
            }
            Ok(out)
        }
        (4, KernelDims::Three) => {
            kernel.check_input(input, 4)?;
            let (t, h, w) = (input.shape()[1], input.shape()[2], input.shape()[3]);
            let (c_out, c_in) = (kernel.out_channels(), kernel.in_channels());
            let kshape = kernel.weights.shape();
            let (kt, kh, kw) = (kshape[2], kshape[3], kshape[4]);
            let (pt, ph, pw) = (kt as isize / 2, kh as isize / 2, kw as isize / 2);
            let mut out = Tensor::zeros(vec![c_out, t, h, w])?;
            for co in 0..c_out {
                for ot in 0..t {
                    for oy in 0..h {
                        for ox in 0..w {
                            let mut acc = kernel.bias.data()[co];
                            for ci in 0..c_in {
                                for kz in 0..kt {
                                    for ky in 0..kh {
                                        for kx in 0..kw {
                                            let it = ot as isize + kz as isize - pt;
                                            let iy = oy as isize + ky as isize - ph;
                                            let ix = ox as isize + kx as isize - pw;
                                            if it < 0
                                                || it >= t as isize
                                                || iy < 0
                                                || iy >= h as isize
                                                || ix < 0
                                                || ix >= w as isize
                                            {
                                                continue;
                                            }
                                            acc = acc
                                                + kernel.weights.get(&[co, ci, kz, ky, kx])
                                                    * input.get(&[
                                                        ci,
                                                        it as usize,
                                                        iy as usize,
                                                        ix as usize,
                                                    ]);
                                        }
                                    }
                                }
                            }
                            out.set(&[co, ot, oy, ox], acc);
                        }
                    }
                }
            }
            Ok(out)
        }
        (got, KernelDims::Two) | (got, KernelDims::Three) => Err(Error::RankMismatch {
            expected: if kernel.dims() == KernelDims::Two { 3 } else { 4 },
            got,
        }),
    }
}
