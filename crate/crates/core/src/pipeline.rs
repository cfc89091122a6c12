//! End-to-end forward pass: fuse features, run the mixed convolutional
//! trunk, and apply both location heads.

use crate::error::{Error, Result};
use crate::fusion::{cross_modal_fuse, FusionWeights, SentenceFeature, VisualFeatureMap};
use crate::mixed::{mixed_forward_stack, MixedConvWeights};
use crate::spatial::{decode_boxes, spatial_head_forward, DecodedBox, SpatialHeadWeights, SpatialPrediction};
use crate::temporal::{
    generate_candidates, select_tube, temporal_head_forward, CandidateScheme, TemporalHeadWeights,
    TemporalInterval, TubeCandidate,
};
use crate::tensor::{Activation, Scalar, Tensor};
use rand::Rng;

/// All learnable parameters of the grounding network.
#[derive(Clone, Debug)]
pub struct PipelineWeights<T: Scalar> {
    pub fusion: FusionWeights<T>,
    pub mixed: MixedConvWeights<T>,
    pub spatial_head: SpatialHeadWeights<T>,
    pub temporal_head: TemporalHeadWeights<T>,
}

/// Dimensions every weight tensor must agree on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PipelineDims {
    pub visual_dim: usize,
    pub word_dim: usize,
    pub projected_dim: usize,
    pub c1: usize,
    pub c2: usize,
    pub map_size: usize,
    pub k2_extent: usize,
    pub k3_extent: usize,
}

impl Default for PipelineDims {
    fn default() -> Self {
        Self {
            visual_dim: 32,
            word_dim: 32,
            projected_dim: 16,
            c1: 16,
            c2: 16,
            map_size: 16,
            k2_extent: 3,
            k3_extent: 3,
        }
    }
}

impl PipelineDims {
    pub fn fused_channels(&self) -> usize {
        self.c1 + self.c2
    }
}

impl<T: Scalar> PipelineWeights<T> {
    pub fn random(dims: &PipelineDims, activation: Activation, rng: &mut impl Rng) -> Result<Self> {
        let d_prime = dims.fused_channels();
        Ok(Self {
            fusion: FusionWeights::random(
                dims.visual_dim,
                dims.word_dim,
                dims.projected_dim,
                dims.c1,
                dims.c2,
                activation,
                rng,
            )?,
            mixed: MixedConvWeights::random(d_prime, dims.k2_extent, dims.k3_extent, rng)?,
            spatial_head: SpatialHeadWeights::random(d_prime, dims.map_size, rng)?,
            temporal_head: TemporalHeadWeights::random(d_prime, rng)?,
        })
    }

    pub fn zeros(dims: &PipelineDims, activation: Activation) -> Result<Self> {
        let d_prime = dims.fused_channels();
        Ok(Self {
            fusion: FusionWeights::new(
                Tensor::zeros(vec![dims.projected_dim, dims.visual_dim])?,
                Tensor::zeros(vec![dims.projected_dim, dims.word_dim])?,
                Tensor::zeros(vec![dims.c1, dims.projected_dim])?,
                Tensor::zeros(vec![dims.c2, dims.visual_dim])?,
                activation,
            )?,
            mixed: MixedConvWeights::zeros(d_prime, dims.k2_extent, dims.k3_extent)?,
            spatial_head: SpatialHeadWeights::zeros(d_prime, dims.map_size)?,
            temporal_head: TemporalHeadWeights::zeros(d_prime)?,
        })
    }
}

/// Everything the forward pass produces for one video.
#[derive(Clone, Debug)]
pub struct ForwardOutput<T: Scalar> {
    pub m_mix: Tensor<T>,
    pub prediction: SpatialPrediction<T>,
    pub candidates: Vec<TubeCandidate>,
    pub tube: TemporalInterval,
    pub boxes: Vec<DecodedBox>,
}

/// Run fusion, the mixed trunk (`blocks` stacked), and both heads, then
/// select the tube and decode one box per frame in pixel coordinates.
pub fn run_forward<T: Scalar>(
    visual: &VisualFeatureMap<T>,
    sentence: &SentenceFeature<T>,
    weights: &PipelineWeights<T>,
    scheme: &CandidateScheme,
    blocks: usize,
) -> Result<ForwardOutput<T>> {
    if scheme.sequence_length != visual.frame_count() {
        return Err(Error::ShapeMismatch {
            expected: format!("sequence length {}", visual.frame_count()),
            got: format!("{}", scheme.sequence_length),
            context: "candidate scheme vs visual frames",
        });
    }
    let fused = cross_modal_fuse(visual, sentence, &weights.fusion)?;
    let m_mix = mixed_forward_stack(&fused, &weights.mixed, blocks)?;
    let prediction = spatial_head_forward(&m_mix, &weights.spatial_head)?;

    let mut candidates = generate_candidates(scheme)?;
    temporal_head_forward(&m_mix, &weights.temporal_head, &mut candidates)?;
    let tube = select_tube(&candidates, scheme.sequence_length as f64)?;
    let boxes = decode_boxes(&prediction, visual.source_height(), visual.source_width());

    Ok(ForwardOutput {
        m_mix,
        prediction,
        candidates,
        tube,
        boxes,
    })
}
