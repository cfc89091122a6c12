//! Cross-modal interaction: project visual and sentence features into a
//! shared width, gate them against each other elementwise, and concatenate
//! with a second visual projection to form the fused feature map.
//!
//! All projections are pure channel mixes (1x1x1 maps applied at every
//! spatio-temporal location), bias-free. The sentence is mean-pooled over
//! words to a single vector and broadcast to every location before fusing.

use crate::error::{Error, Result};
use crate::tensor::{concat_channels, Activation, Scalar, Tensor};
use rand::Rng;

/// Visual feature map of shape (d, T, H/r_h, W/r_w) with the source frame
/// extents it was derived from.
#[derive(Clone, Debug)]
pub struct VisualFeatureMap<T: Scalar> {
    tensor: Tensor<T>,
    source_height: usize,
    source_width: usize,
}

impl<T: Scalar> VisualFeatureMap<T> {
    pub fn new(tensor: Tensor<T>, source_height: usize, source_width: usize) -> Result<Self> {
        if tensor.rank() != 4 {
            return Err(Error::RankMismatch {
                expected: 4,
                got: tensor.rank(),
            });
        }
        if source_height == 0 || source_width == 0 {
            return Err(Error::EmptyInput("source frame extents must be positive"));
        }
        Ok(Self {
            tensor,
            source_height,
            source_width,
        })
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn feature_dim(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn frame_count(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn map_height(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn map_width(&self) -> usize {
        self.tensor.shape()[3]
    }

    pub fn source_height(&self) -> usize {
        self.source_height
    }

    pub fn source_width(&self) -> usize {
        self.source_width
    }

    /// Height scaling factor r_h between source frames and the feature map.
    pub fn scale_h(&self) -> f64 {
        self.source_height as f64 / self.map_height() as f64
    }

    pub fn scale_w(&self) -> f64 {
        self.source_width as f64 / self.map_width() as f64
    }
}

/// Word-level sentence features of shape (N, D).
#[derive(Clone, Debug)]
pub struct SentenceFeature<T: Scalar> {
    tensor: Tensor<T>,
}

impl<T: Scalar> SentenceFeature<T> {
    pub fn new(tensor: Tensor<T>) -> Result<Self> {
        if tensor.rank() != 2 {
            return Err(Error::RankMismatch {
                expected: 2,
                got: tensor.rank(),
            });
        }
        Ok(Self { tensor })
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn word_count(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn word_dim(&self) -> usize {
        self.tensor.shape()[1]
    }

    /// Arithmetic mean over words, producing a single (D,) vector.
    pub fn mean_pool(&self) -> Tensor<T> {
        let (n, d) = (self.word_count(), self.word_dim());
        let inv_n = T::from_f64(1.0 / n as f64);
        let mut pooled = vec![T::zero(); d];
        for w in 0..n {
            for (j, p) in pooled.iter_mut().enumerate() {
                *p = *p + self.tensor.data()[w * d + j];
            }
        }
        for p in pooled.iter_mut() {
            *p = *p * inv_n;
        }
        Tensor::new(vec![d], pooled).expect("pooled vector is non-empty")
    }
}

/// Learnable projections for the fusion step. Each matrix is stored as
/// (out_dim, in_dim) and applied per location.
#[derive(Clone, Debug)]
pub struct FusionWeights<T: Scalar> {
    pub w_v1: Tensor<T>,
    pub w_s1: Tensor<T>,
    pub w_f2: Tensor<T>,
    pub w_v2: Tensor<T>,
    pub activation: Activation,
}

impl<T: Scalar> FusionWeights<T> {
    pub fn new(
        w_v1: Tensor<T>,
        w_s1: Tensor<T>,
        w_f2: Tensor<T>,
        w_v2: Tensor<T>,
        activation: Activation,
    ) -> Result<Self> {
        for (name, m) in [("W_v1", &w_v1), ("W_s1", &w_s1), ("W_f2", &w_f2), ("W_v2", &w_v2)] {
            if m.rank() != 2 {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be a rank-2 matrix, got rank {}",
                    m.rank()
                )));
            }
        }
        if w_v1.shape()[0] != w_s1.shape()[0] {
            return Err(Error::ShapeMismatch {
                expected: format!("projected dim {}", w_v1.shape()[0]),
                got: format!("{}", w_s1.shape()[0]),
                context: "W_v1/W_s1 projected dims must match for the elementwise product",
            });
        }
        if w_f2.shape()[1] != w_v1.shape()[0] {
            return Err(Error::ShapeMismatch {
                expected: format!("W_f2 input dim {}", w_v1.shape()[0]),
                got: format!("{}", w_f2.shape()[1]),
                context: "W_f2 consumes the projected dim",
            });
        }
        if w_v2.shape()[1] != w_v1.shape()[1] {
            return Err(Error::ShapeMismatch {
                expected: format!("visual dim {}", w_v1.shape()[1]),
                got: format!("{}", w_v2.shape()[1]),
                context: "W_v2 consumes the visual dim",
            });
        }
        Ok(Self {
            w_v1,
            w_s1,
            w_f2,
            w_v2,
            activation,
        })
    }

    pub fn random(
        visual_dim: usize,
        word_dim: usize,
        projected_dim: usize,
        c1: usize,
        c2: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::new(
            Tensor::random_uniform(vec![projected_dim, visual_dim], -0.5, 0.5, rng)?,
            Tensor::random_uniform(vec![projected_dim, word_dim], -0.5, 0.5, rng)?,
            Tensor::random_uniform(vec![c1, projected_dim], -0.5, 0.5, rng)?,
            Tensor::random_uniform(vec![c2, visual_dim], -0.5, 0.5, rng)?,
            activation,
        )
    }

    /// Output channel count c1 + c2 of the fused feature.
    pub fn fused_channels(&self) -> usize {
        self.w_f2.shape()[0] + self.w_v2.shape()[0]
    }
}

/// Fused cross-modal feature of shape (c1 + c2, T, h, w).
#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeature<T: Scalar> {
    pub tensor: Tensor<T>,
}

impl<T: Scalar> FusedFeature<T> {
    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }
}

/// Broadcast a pooled (D,) sentence vector to every location of a
/// (D, T, h, w) tensor.
pub fn repeat_sentence<T: Scalar>(
    pooled: &Tensor<T>,
    t: usize,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    if pooled.rank() != 1 {
        return Err(Error::RankMismatch {
            expected: 1,
            got: pooled.rank(),
        });
    }
    let d = pooled.shape()[0];
    let volume = t * h * w;
    let mut data = Vec::with_capacity(d * volume);
    for &v in pooled.data() {
        data.resize(data.len() + volume, v);
    }
    Tensor::new(vec![d, t, h, w], data)
}

/// y = M x for a (out, in) matrix and an `in`-length slice.
fn matvec<T: Scalar>(matrix: &Tensor<T>, x: &[T], out: &mut Vec<T>) {
    let (rows, cols) = (matrix.shape()[0], matrix.shape()[1]);
    debug_assert_eq!(cols, x.len());
    out.clear();
    for r in 0..rows {
        let row = &matrix.data()[r * cols..(r + 1) * cols];
        let mut acc = T::zero();
        for (a, b) in row.iter().zip(x) {
            acc = acc + *a * *b;
        }
        out.push(acc);
    }
}

/// The fusion forward pass.
///
/// At every location: gate the projected visual vector against the projected
/// (pooled, repeated) sentence vector, re-project the gated product, and
/// concatenate with a direct visual projection along channels.
pub fn cross_modal_fuse<T: Scalar>(
    visual: &VisualFeatureMap<T>,
    sentence: &SentenceFeature<T>,
    weights: &FusionWeights<T>,
) -> Result<FusedFeature<T>> {
    let d = visual.feature_dim();
    if weights.w_v1.shape()[1] != d {
        return Err(Error::ShapeMismatch {
            expected: format!("W_v1 input dim {d}"),
            got: format!("{}", weights.w_v1.shape()[1]),
            context: "visual projection",
        });
    }
    if weights.w_s1.shape()[1] != sentence.word_dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("W_s1 input dim {}", sentence.word_dim()),
            got: format!("{}", weights.w_s1.shape()[1]),
            context: "sentence projection",
        });
    }

    let g = weights.activation;
    let (t, h, w) = (
        visual.frame_count(),
        visual.map_height(),
        visual.map_width(),
    );
    let volume = t * h * w;
    let d_p = weights.w_v1.shape()[0];
    let (c1, c2) = (weights.w_f2.shape()[0], weights.w_v2.shape()[0]);

    // The sentence branch is location-constant: project the pooled vector once.
    let pooled = sentence.mean_pool();
    let mut proj_s = Vec::with_capacity(d_p);
    matvec(&weights.w_s1, pooled.data(), &mut proj_s);
    for v in proj_s.iter_mut() {
        *v = g.apply(*v);
    }

    let mut branch1 = Tensor::zeros(vec![c1, t, h, w])?;
    let mut branch2 = Tensor::zeros(vec![c2, t, h, w])?;
    let mut v_vec = vec![T::zero(); d];
    let mut p1 = Vec::with_capacity(d_p);
    let mut gated = vec![T::zero(); d_p];
    let mut o1 = Vec::with_capacity(c1);
    let mut o2 = Vec::with_capacity(c2);

    for loc in 0..volume {
        for (ci, slot) in v_vec.iter_mut().enumerate() {
            *slot = visual.tensor.data()[ci * volume + loc];
        }
        matvec(&weights.w_v1, &v_vec, &mut p1);
        for (slot, (&a, &b)) in gated.iter_mut().zip(p1.iter().zip(&proj_s)) {
            *slot = g.apply(a) * b;
        }
        matvec(&weights.w_f2, &gated, &mut o1);
        matvec(&weights.w_v2, &v_vec, &mut o2);
        for (ci, &v) in o1.iter().enumerate() {
            branch1.data_mut()[ci * volume + loc] = g.apply(v);
        }
        for (ci, &v) in o2.iter().enumerate() {
            branch2.data_mut()[ci * volume + loc] = g.apply(v);
        }
    }

    Ok(FusedFeature {
        tensor: concat_channels(&branch1, &branch2)?,
    })
}
