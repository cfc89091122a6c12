//! Dense row-major tensors and the handful of array operations the rest of
//! the crate is built from: convolution, frame reshaping, channel
//! concatenation, elementwise activations, and bilinear upsampling.
//!
//! Axis convention is fixed crate-wide: (channels, time, height, width),
//! with width varying fastest. Forward paths run in `f32`; gradient-checked
//! paths run in `f64` (see [`Tensor::to_f64`]).

mod conv;
pub mod io;

pub use conv::{conv2d_forward, conv3d_forward, conv_forward_naive, ConvKernel, KernelDims};

use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Element type for tensors: `f32` for forward passes, `f64` for
/// gradient checks and optimization.
pub trait Scalar:
    num_traits::Float + std::fmt::Debug + std::fmt::Display + Default + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("finite f64 fits in scalar")
    }

    fn into_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("scalar fits in f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dense n-dimensional array with explicit shape and flat row-major storage.
///
/// Invariants: every extent is at least 1 and `data.len()` equals the
/// product of the extents. Instances are immutable by convention once built;
/// operations return new tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::EmptyInput("tensor extents must all be >= 1"));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{expected} elements for shape {shape:?}"),
                got: format!("{} elements", data.len()),
                context: "tensor construction",
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self::new(shape, vec![T::zero(); n])
    }

    pub fn filled(shape: impl Into<Vec<usize>>, value: T) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    /// Uniform samples in `[lo, hi)`, drawn in `f64` so that the same seed
    /// produces the same value stream regardless of the element type.
    pub fn random_uniform(
        shape: impl Into<Vec<usize>>,
        lo: f64,
        hi: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(rng.gen_range(lo..hi)))
            .collect();
        Self::new(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // extents are always >= 1
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Flat offset of a multi-index. Panics on rank or bounds violations;
    /// intended for tests and cold paths, hot loops compute strides inline.
    pub fn offset(&self, coords: &[usize]) -> usize {
        assert_eq!(coords.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (c, (&i, &e)) in coords.iter().zip(&self.shape).enumerate() {
            assert!(i < e, "index {i} out of bounds for axis {c} (extent {e})");
            flat = flat * e + i;
        }
        flat
    }

    pub fn get(&self, coords: &[usize]) -> T {
        self.data[self.offset(coords)]
    }

    pub fn set(&mut self, coords: &[usize], value: T) {
        let off = self.offset(coords);
        self.data[off] = value;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise sum; shapes must match exactly.
    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", self.shape),
                got: format!("{:?}", other.shape),
                context: "elementwise add",
            });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a + b)
                .collect(),
        })
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.into_f64() as f32).collect(),
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.into_f64()).collect(),
        }
    }
}

/// Elementwise non-linearity `g`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Exp,
    Identity,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => T::one() / (T::one() + (-x).exp()),
            Activation::Exp => x.exp(),
            Activation::Identity => x,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "exp" => Ok(Activation::Exp),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::InvalidArgument(format!(
                "unknown activation '{other}' (expected relu|sigmoid|exp|identity)"
            ))),
        }
    }
}

/// Apply an activation to every element.
pub fn activation<T: Scalar>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    x.map(|v| kind.apply(v))
}

/// Split a (C, T, H, W) tensor into T frames of shape (C, H, W).
///
/// Pure index bookkeeping: frame `t` contains exactly `input[:, t, :, :]`.
pub fn reshape_frames<T: Scalar>(input: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    if input.rank() != 4 {
        return Err(Error::RankMismatch {
            expected: 4,
            got: input.rank(),
        });
    }
    let (c, t, h, w) = (
        input.shape[0],
        input.shape[1],
        input.shape[2],
        input.shape[3],
    );
    let plane = h * w;
    let mut frames = Vec::with_capacity(t);
    for ti in 0..t {
        let mut data = Vec::with_capacity(c * plane);
        for ci in 0..c {
            let start = (ci * t + ti) * plane;
            data.extend_from_slice(&input.data[start..start + plane]);
        }
        frames.push(Tensor::new(vec![c, h, w], data)?);
    }
    Ok(frames)
}

/// Inverse of [`reshape_frames`]: reassemble T frames of (C, H, W)
/// into one (C, T, H, W) tensor. Bitwise round-trip.
pub fn reshape_frames_back<T: Scalar>(frames: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = frames.first().ok_or(Error::EmptyInput("no frames"))?;
    if first.rank() != 3 {
        return Err(Error::RankMismatch {
            expected: 3,
            got: first.rank(),
        });
    }
    let (c, h, w) = (first.shape[0], first.shape[1], first.shape[2]);
    let t = frames.len();
    for f in frames {
        if f.shape() != [c, h, w] {
            return Err(Error::ShapeMismatch {
                expected: format!("[{c}, {h}, {w}]"),
                got: format!("{:?}", f.shape()),
                context: "reshape_frames_back",
            });
        }
    }
    let plane = h * w;
    let mut out = Tensor::zeros(vec![c, t, h, w])?;
    for (ti, frame) in frames.iter().enumerate() {
        for ci in 0..c {
            let dst = (ci * t + ti) * plane;
            let src = ci * plane;
            out.data[dst..dst + plane].copy_from_slice(&frame.data[src..src + plane]);
        }
    }
    Ok(out)
}

/// Concatenate along the channel axis (axis 0). All trailing extents must
/// match; `a` occupies the first `a.shape[0]` output channels.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != b.rank() || a.shape[1..] != b.shape[1..] {
        return Err(Error::ShapeMismatch {
            expected: format!("trailing extents {:?}", &a.shape[1..]),
            got: format!("trailing extents {:?}", &b.shape[1..]),
            context: "concat_channels",
        });
    }
    let mut shape = a.shape.clone();
    shape[0] += b.shape[0];
    // Axis 0 is outermost in row-major order, so concatenation is an append.
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor::new(shape, data)
}

/// Corner-aligned bilinear upsampling of a (C, h, w) tensor to (C, out_h, out_w).
///
/// Corners of the input map exactly to corners of the output; every output
/// value is a convex combination of input values.
pub fn upsample_bilinear<T: Scalar>(
    input: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    if input.rank() != 3 {
        return Err(Error::RankMismatch {
            expected: 3,
            got: input.rank(),
        });
    }
    let (c, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    if out_h < h || out_w < w {
        return Err(Error::UpsampleTooSmall {
            in_h: h,
            in_w: w,
            out_h,
            out_w,
        });
    }

    let src_coord = |i: usize, n_out: usize, n_in: usize| -> f64 {
        if n_out <= 1 {
            0.0
        } else {
            i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
        }
    };

    let mut out = Tensor::zeros(vec![c, out_h, out_w])?;
    for ci in 0..c {
        let plane = &input.data[ci * h * w..(ci + 1) * h * w];
        for oy in 0..out_h {
            let sy = src_coord(oy, out_h, h);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let fy = sy - y0 as f64;
            for ox in 0..out_w {
                let sx = src_coord(ox, out_w, w);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let fx = sx - x0 as f64;

                let v00 = plane[y0 * w + x0].into_f64();
                let v01 = plane[y0 * w + x1].into_f64();
                let v10 = plane[y1 * w + x0].into_f64();
                let v11 = plane[y1 * w + x1].into_f64();
                let top = v00 * (1.0 - fx) + v01 * fx;
                let bottom = v10 * (1.0 - fx) + v11 * fx;
                out.data[(ci * out_h + oy) * out_w + ox] =
                    T::from_f64(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn new_rejects_bad_shapes() {
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 2], vec![1.0; 4]).is_ok());
    }

    #[test]
    fn offset_is_row_major() {
        let t = Tensor::<f32>::new(vec![2, 3, 4], (0..24).map(|i| i as f32).collect()).unwrap();
        assert_eq!(t.get(&[0, 0, 0]), 0.0);
        assert_eq!(t.get(&[0, 0, 3]), 3.0);
        assert_eq!(t.get(&[0, 1, 0]), 4.0);
        assert_eq!(t.get(&[1, 0, 0]), 12.0);
        assert_eq!(t.get(&[1, 2, 3]), 23.0);
    }

    #[test]
    fn activations_hit_known_values() {
        assert_eq!(Activation::Relu.apply(-1.0f64), 0.0);
        assert_eq!(Activation::Relu.apply(0.0f64), 0.0);
        assert_eq!(Activation::Relu.apply(2.0f64), 2.0);
        assert_eq!(Activation::Sigmoid.apply(0.0f64), 0.5);
        assert_eq!(Activation::Exp.apply(0.0f64), 1.0);
        assert_eq!(Activation::Identity.apply(-3.5f64), -3.5);
    }

    #[test]
    fn reshape_frames_indexes_correctly() {
        // (2, 3, 4, 4): frame t must contain exactly input[:, t, :, :].
        let t = Tensor::<f32>::new(
            vec![2, 3, 4, 4],
            (0..2 * 3 * 4 * 4).map(|i| i as f32).collect(),
        )
        .unwrap();
        let frames = reshape_frames(&t).unwrap();
        assert_eq!(frames.len(), 3);
        for (ti, frame) in frames.iter().enumerate() {
            assert_eq!(frame.shape(), [2, 4, 4]);
            for c in 0..2 {
                for y in 0..4 {
                    for x in 0..4 {
                        assert_eq!(frame.get(&[c, y, x]), t.get(&[c, ti, y, x]));
                    }
                }
            }
        }
    }

    #[test]
    fn reshape_round_trip_is_bitwise() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let t = Tensor::<f32>::random_uniform(vec![3, 5, 2, 4], -1.0, 1.0, &mut rng).unwrap();
        let back = reshape_frames_back(&reshape_frames(&t).unwrap()).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn reshape_frames_rejects_wrong_rank() {
        let t = Tensor::<f32>::zeros(vec![2, 3, 4]).unwrap();
        assert!(matches!(
            reshape_frames(&t),
            Err(Error::RankMismatch { expected: 4, .. })
        ));
    }

    #[test]
    fn concat_channels_shape_and_order() {
        let a = Tensor::<f32>::filled(vec![2, 2, 3, 3], 1.0).unwrap();
        let b = Tensor::<f32>::filled(vec![3, 2, 3, 3], 2.0).unwrap();
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), [5, 2, 3, 3]);
        // Channel C_a is b's channel 0.
        assert_eq!(c.get(&[1, 0, 0, 0]), 1.0);
        assert_eq!(c.get(&[2, 0, 0, 0]), 2.0);
    }

    #[test]
    fn concat_with_zeros_preserves_prefix() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::<f32>::random_uniform(vec![2, 2, 2, 2], -1.0, 1.0, &mut rng).unwrap();
        let z = Tensor::<f32>::zeros(vec![1, 2, 2, 2]).unwrap();
        let c = concat_channels(&a, &z).unwrap();
        assert_eq!(&c.data()[..a.len()], a.data());
    }

    #[test]
    fn concat_rejects_mismatched_trailing_extents() {
        let a = Tensor::<f32>::zeros(vec![2, 3, 3]).unwrap();
        let b = Tensor::<f32>::zeros(vec![2, 3, 4]).unwrap();
        assert!(concat_channels(&a, &b).is_err());
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let t = Tensor::<f32>::filled(vec![2, 3, 3], 4.25).unwrap();
        let up = upsample_bilinear(&t, 7, 5).unwrap();
        assert!(up.data().iter().all(|&v| v == 4.25));
    }

    #[test]
    fn upsample_row_matches_hand_bilinear() {
        // [1, 3] to width 3 with corner alignment gives [1, 2, 3].
        let t = Tensor::<f64>::new(vec![1, 1, 2], vec![1.0, 3.0]).unwrap();
        let up = upsample_bilinear(&t, 1, 3).unwrap();
        assert_eq!(up.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn upsample_corners_are_exact() {
        let t = Tensor::<f64>::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let up = upsample_bilinear(&t, 4, 4).unwrap();
        assert_eq!(up.get(&[0, 0, 0]), 1.0);
        assert_eq!(up.get(&[0, 0, 3]), 2.0);
        assert_eq!(up.get(&[0, 3, 0]), 3.0);
        assert_eq!(up.get(&[0, 3, 3]), 4.0);
    }

    #[test]
    fn upsample_rejects_downscale() {
        let t = Tensor::<f32>::zeros(vec![1, 4, 4]).unwrap();
        assert!(matches!(
            upsample_bilinear(&t, 2, 4),
            Err(Error::UpsampleTooSmall { .. })
        ));
    }
}
