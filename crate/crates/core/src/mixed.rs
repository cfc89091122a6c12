//! Serial, parallel, and mixed connection trunks over the fused feature.
//!
//! The serial path learns per-frame spatial structure with a 2D kernel and
//! then temporal structure with a 3D kernel; the parallel path runs both
//! branches side by side and sums them; the mixed path adds a 3D branch,
//! the serial output, and a residual copy of the input. All three preserve
//! the input shape exactly.

use crate::error::{Error, Result};
use crate::fusion::FusedFeature;
use crate::tensor::{
    conv2d_forward, conv3d_forward, reshape_frames, reshape_frames_back, ConvKernel, KernelDims,
    Scalar, Tensor,
};
use rand::Rng;

/// The four kernels of the trunk. Every kernel preserves the channel count
/// so the branch additions and the residual are well-defined.
#[derive(Clone, Debug)]
pub struct MixedConvWeights<T: Scalar> {
    pub k2: ConvKernel<T>,
    pub k3_serial: ConvKernel<T>,
    pub k3_parallel: ConvKernel<T>,
    pub k3_mixed: ConvKernel<T>,
}

impl<T: Scalar> MixedConvWeights<T> {
    pub fn new(
        k2: ConvKernel<T>,
        k3_serial: ConvKernel<T>,
        k3_parallel: ConvKernel<T>,
        k3_mixed: ConvKernel<T>,
    ) -> Result<Self> {
        if k2.dims() != KernelDims::Two {
            return Err(Error::InvalidArgument("k2 must be a 2D kernel".into()));
        }
        let channels = k2.in_channels();
        for (name, k) in [
            ("k2", &k2),
            ("k3_serial", &k3_serial),
            ("k3_parallel", &k3_parallel),
            ("k3_mixed", &k3_mixed),
        ] {
            if name != "k2" && k.dims() != KernelDims::Three {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be a 3D kernel"
                )));
            }
            if k.in_channels() != channels || k.out_channels() != channels {
                return Err(Error::ChannelMismatch {
                    expected: channels,
                    got: k.out_channels(),
                });
            }
        }
        Ok(Self {
            k2,
            k3_serial,
            k3_parallel,
            k3_mixed,
        })
    }

    /// All-zero kernels and biases; with these, `mixed_forward` is the
    /// identity map.
    pub fn zeros(channels: usize, k2_extent: usize, k3_extent: usize) -> Result<Self> {
        Ok(Self {
            k2: ConvKernel::zeros_2d(channels, channels, k2_extent, k2_extent)?,
            k3_serial: ConvKernel::zeros_3d(channels, channels, k3_extent, k3_extent, k3_extent)?,
            k3_parallel: ConvKernel::zeros_3d(channels, channels, k3_extent, k3_extent, k3_extent)?,
            k3_mixed: ConvKernel::zeros_3d(channels, channels, k3_extent, k3_extent, k3_extent)?,
        })
    }

    pub fn random(
        channels: usize,
        k2_extent: usize,
        k3_extent: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            k2: ConvKernel::random_2d(channels, channels, k2_extent, k2_extent, rng)?,
            k3_serial: ConvKernel::random_3d(
                channels, channels, k3_extent, k3_extent, k3_extent, rng,
            )?,
            k3_parallel: ConvKernel::random_3d(
                channels, channels, k3_extent, k3_extent, k3_extent, rng,
            )?,
            k3_mixed: ConvKernel::random_3d(
                channels, channels, k3_extent, k3_extent, k3_extent, rng,
            )?,
        })
    }

    pub fn channels(&self) -> usize {
        self.k2.in_channels()
    }
}

/// Per-frame 2D convolution: reshape to frames, convolve each, reshape back.
fn conv2d_per_frame<T: Scalar>(input: &Tensor<T>, k2: &ConvKernel<T>) -> Result<Tensor<T>> {
    let frames = reshape_frames(input)?;
    let convolved: Result<Vec<_>> = frames.iter().map(|f| conv2d_forward(f, k2)).collect();
    reshape_frames_back(&convolved?)
}

/// Serial connection: 2D per frame, then 3D across time.
pub fn serial_forward<T: Scalar>(
    fused: &FusedFeature<T>,
    weights: &MixedConvWeights<T>,
) -> Result<Tensor<T>> {
    let spatial = conv2d_per_frame(&fused.tensor, &weights.k2)?;
    conv3d_forward(&spatial, &weights.k3_serial)
}

/// Parallel connection: 3D branch plus per-frame 2D branch, summed.
pub fn parallel_forward<T: Scalar>(
    fused: &FusedFeature<T>,
    weights: &MixedConvWeights<T>,
) -> Result<Tensor<T>> {
    let temporal = conv3d_forward(&fused.tensor, &weights.k3_parallel)?;
    let spatial = conv2d_per_frame(&fused.tensor, &weights.k2)?;
    temporal.add(&spatial)
}

/// Mixed connection: 3D branch + serial output + residual input.
pub fn mixed_forward<T: Scalar>(
    fused: &FusedFeature<T>,
    weights: &MixedConvWeights<T>,
) -> Result<Tensor<T>> {
    let temporal = conv3d_forward(&fused.tensor, &weights.k3_mixed)?;
    let serial = serial_forward(fused, weights)?;
    temporal.add(&serial)?.add(&fused.tensor)
}

/// Stack `blocks` mixed connections, each feeding the next.
pub fn mixed_forward_stack<T: Scalar>(
    fused: &FusedFeature<T>,
    weights: &MixedConvWeights<T>,
    blocks: usize,
) -> Result<Tensor<T>> {
    if blocks == 0 {
        return Err(Error::InvalidArgument("block count must be >= 1".into()));
    }
    let mut current = fused.clone();
    for _ in 0..blocks {
        current = FusedFeature {
            tensor: mixed_forward(&current, weights)?,
        };
    }
    Ok(current.tensor)
}
