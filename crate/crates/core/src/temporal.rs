//! Temporal localization: multi-scale sliding-window tube candidates,
//! IoU-target confidence scoring, boundary offset regression, and final
//! tube selection.
//!
//! Candidates are labeled with their temporal IoU against the ground truth
//! (zeroed below the confidence threshold) and with boundary offsets
//! (delta_s, delta_e) = (gt_start - start, gt_end - end). Both losses are
//! smooth-L1 with analytic gradients.

use crate::error::{Error, Result};
use crate::tensor::{conv3d_forward, ConvKernel, KernelDims, Scalar, Tensor};
use rand::Rng;

/// Half-open temporal interval [start, end) in feature-step units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TemporalInterval {
    pub start: f64,
    pub end: f64,
}

impl TemporalInterval {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !(start.is_finite() && end.is_finite()) || start < 0.0 || start >= end {
            return Err(Error::InvalidArgument(format!(
                "invalid interval [{start}, {end}): need 0 <= start < end"
            )));
        }
        Ok(Self { start, end })
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    /// Temporal IoU on the real line; 0 for disjoint intervals.
    pub fn iou(&self, other: &TemporalInterval) -> f64 {
        let inter = (self.end.min(other.end) - self.start.max(other.start)).max(0.0);
        let union = self.length() + other.length() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// One candidate tube with its training targets and predictions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TubeCandidate {
    pub interval: TemporalInterval,
    pub target_iou: f64,
    pub predicted_score: f64,
    pub offset_target: (f64, f64),
    pub offset_pred: (f64, f64),
}

impl TubeCandidate {
    pub fn from_interval(interval: TemporalInterval) -> Self {
        Self {
            interval,
            target_iou: 0.0,
            predicted_score: 0.0,
            offset_target: (0.0, 0.0),
            offset_pred: (0.0, 0.0),
        }
    }
}

/// Multi-scale sliding-window generation scheme.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateScheme {
    pub scales: Vec<usize>,
    pub stride_fraction: f64,
    pub sequence_length: usize,
}

impl CandidateScheme {
    /// Windows of length T/8, T/4, T/2, and T (rounded, floored at 1),
    /// with stride a quarter of the window.
    pub fn default_for(sequence_length: usize) -> Self {
        let mut scales: Vec<usize> = [8.0, 4.0, 2.0, 1.0]
            .iter()
            .map(|d| ((sequence_length as f64 / d).round() as usize).max(1))
            .collect();
        scales.dedup();
        Self {
            scales,
            stride_fraction: 0.25,
            sequence_length,
        }
    }

    fn stride_for(&self, scale: usize) -> usize {
        ((scale as f64 * self.stride_fraction).round() as usize).max(1)
    }
}

/// Enumerate all windows of the scheme, deduplicated, ordered by scale then
/// start.
pub fn generate_candidates(scheme: &CandidateScheme) -> Result<Vec<TubeCandidate>> {
    if scheme.scales.is_empty() {
        return Err(Error::EmptyScheme);
    }
    if scheme.sequence_length == 0 {
        return Err(Error::EmptyInput("sequence length must be >= 1"));
    }
    let t = scheme.sequence_length;
    let mut scales = scheme.scales.clone();
    for &s in &scales {
        if s == 0 || s > t {
            return Err(Error::InvalidArgument(format!(
                "scale {s} does not fit sequence length {t}"
            )));
        }
    }
    scales.sort_unstable();
    scales.dedup();

    let mut out = Vec::new();
    for &scale in &scales {
        let stride = scheme.stride_for(scale);
        let mut start = 0usize;
        while start + scale <= t {
            out.push(TubeCandidate::from_interval(TemporalInterval::new(
                start as f64,
                (start + scale) as f64,
            )?));
            start += stride;
        }
    }
    Ok(out)
}

/// Fill in IoU targets (zeroed below threshold `c`) and boundary offset
/// targets against the ground-truth interval.
pub fn label_candidates(cands: &mut [TubeCandidate], gt: &TemporalInterval, c: f64) {
    for cand in cands.iter_mut() {
        let iou = cand.interval.iou(gt);
        cand.target_iou = if iou >= c { iou } else { 0.0 };
        cand.offset_target = (gt.start - cand.interval.start, gt.end - cand.interval.end);
    }
}

/// smoothL1(x): quadratic below unit residual, linear above.
pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

/// d smoothL1 / dx.
pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Mean smooth-L1 between IoU targets and predicted scores, with the
/// gradient with respect to each predicted score.
pub fn confidence_loss(cands: &[TubeCandidate]) -> Result<(f64, Vec<f64>)> {
    if cands.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let inv_n = 1.0 / cands.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(cands.len());
    for cand in cands {
        let residual = cand.target_iou - cand.predicted_score;
        loss += smooth_l1(residual);
        grads.push(-inv_n * smooth_l1_grad(residual));
    }
    Ok((inv_n * loss, grads))
}

/// Mean smooth-L1 over both boundary offsets, with per-candidate gradient
/// pairs with respect to the predicted offsets.
///
/// With `positives_only`, candidates whose target IoU is zero are skipped
/// (their gradient entries stay zero) and the mean runs over the regressed
/// candidates.
pub fn boundary_loss(
    cands: &[TubeCandidate],
    positives_only: bool,
) -> Result<(f64, Vec<(f64, f64)>)> {
    if cands.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let regressed: Vec<usize> = cands
        .iter()
        .enumerate()
        .filter(|(_, c)| !positives_only || c.target_iou > 0.0)
        .map(|(i, _)| i)
        .collect();
    if regressed.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let inv_n = 1.0 / regressed.len() as f64;
    let mut loss = 0.0;
    let mut grads = vec![(0.0, 0.0); cands.len()];
    for &i in &regressed {
        let c = &cands[i];
        let rs = c.offset_target.0 - c.offset_pred.0;
        let re = c.offset_target.1 - c.offset_pred.1;
        loss += smooth_l1(rs) + smooth_l1(re);
        grads[i] = (-inv_n * smooth_l1_grad(rs), -inv_n * smooth_l1_grad(re));
    }
    Ok((inv_n * loss, grads))
}

/// Pick the highest-scoring candidate (ties: earliest start, then shortest),
/// rectify it with its predicted offsets, and clamp into [0, t_max]. A
/// rectification that inverts the interval falls back to the unrectified
/// winner.
pub fn select_tube(cands: &[TubeCandidate], t_max: f64) -> Result<TemporalInterval> {
    let winner = cands
        .iter()
        .max_by(|a, b| {
            a.predicted_score
                .partial_cmp(&b.predicted_score)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| {
                    b.interval
                        .start
                        .partial_cmp(&a.interval.start)
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
                .then_with(|| {
                    b.interval
                        .length()
                        .partial_cmp(&a.interval.length())
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
        })
        .ok_or(Error::EmptyCandidates)?;

    let start = (winner.interval.start + winner.offset_pred.0).clamp(0.0, t_max);
    let end = (winner.interval.end + winner.offset_pred.1).clamp(0.0, t_max);
    if start < end {
        TemporalInterval::new(start, end)
    } else {
        Ok(winner.interval)
    }
}

/// Weights of the temporal head: three parallel 3D convolutions with
/// temporal extents 1, 3, and 5 (1x1 spatially, channel-preserving), plus
/// linear score and offset maps over pooled candidate features.
#[derive(Clone, Debug)]
pub struct TemporalHeadWeights<T: Scalar> {
    pub k1: ConvKernel<T>,
    pub k3: ConvKernel<T>,
    pub k5: ConvKernel<T>,
    pub score_weight: Tensor<T>,
    pub score_bias: T,
    pub offset_weight: Tensor<T>,
    pub offset_bias: Tensor<T>,
}

impl<T: Scalar> TemporalHeadWeights<T> {
    pub fn new(
        k1: ConvKernel<T>,
        k3: ConvKernel<T>,
        k5: ConvKernel<T>,
        score_weight: Tensor<T>,
        score_bias: T,
        offset_weight: Tensor<T>,
        offset_bias: Tensor<T>,
    ) -> Result<Self> {
        let channels = k1.in_channels();
        for (name, k, kt) in [("k1", &k1, 1), ("k3", &k3, 3), ("k5", &k5, 5)] {
            if k.dims() != KernelDims::Three
                || k.in_channels() != channels
                || k.out_channels() != channels
                || k.weights().shape()[2] != kt
                || k.weights().shape()[3] != 1
                || k.weights().shape()[4] != 1
            {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be a channel-preserving 3D kernel with temporal extent {kt} and 1x1 spatial extent"
                )));
            }
        }
        if score_weight.shape() != [channels] {
            return Err(Error::ShapeMismatch {
                expected: format!("[{channels}]"),
                got: format!("{:?}", score_weight.shape()),
                context: "score weight",
            });
        }
        if offset_weight.shape() != [2, channels] || offset_bias.shape() != [2] {
            return Err(Error::ShapeMismatch {
                expected: format!("[2, {channels}] and [2]"),
                got: format!(
                    "{:?} and {:?}",
                    offset_weight.shape(),
                    offset_bias.shape()
                ),
                context: "offset weights",
            });
        }
        Ok(Self {
            k1,
            k3,
            k5,
            score_weight,
            score_bias,
            offset_weight,
            offset_bias,
        })
    }

    pub fn zeros(channels: usize) -> Result<Self> {
        Self::new(
            ConvKernel::zeros_3d(channels, channels, 1, 1, 1)?,
            ConvKernel::zeros_3d(channels, channels, 3, 1, 1)?,
            ConvKernel::zeros_3d(channels, channels, 5, 1, 1)?,
            Tensor::zeros(vec![channels])?,
            T::zero(),
            Tensor::zeros(vec![2, channels])?,
            Tensor::zeros(vec![2])?,
        )
    }

    pub fn random(channels: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::new(
            ConvKernel::random_3d(channels, channels, 1, 1, 1, rng)?,
            ConvKernel::random_3d(channels, channels, 3, 1, 1, rng)?,
            ConvKernel::random_3d(channels, channels, 5, 1, 1, rng)?,
            Tensor::random_uniform(vec![channels], -0.5, 0.5, rng)?,
            T::from_f64(rng.gen_range(-0.5..0.5)),
            Tensor::random_uniform(vec![2, channels], -0.5, 0.5, rng)?,
            Tensor::random_uniform(vec![2], -0.5, 0.5, rng)?,
        )
    }

    pub fn channels(&self) -> usize {
        self.k1.in_channels()
    }
}

/// Sum of the three temporal convolutions, spatially average-pooled to a
/// (channels, T) feature sequence.
pub fn temporal_embed_forward<T: Scalar>(
    m_mix: &Tensor<T>,
    weights: &TemporalHeadWeights<T>,
) -> Result<Tensor<T>> {
    let summed = conv3d_forward(m_mix, &weights.k1)?
        .add(&conv3d_forward(m_mix, &weights.k3)?)?
        .add(&conv3d_forward(m_mix, &weights.k5)?)?;
    let (c, t, h, w) = (
        summed.shape()[0],
        summed.shape()[1],
        summed.shape()[2],
        summed.shape()[3],
    );
    let plane = h * w;
    let inv = T::from_f64(1.0 / plane as f64);
    let mut pooled = Tensor::<T>::zeros(vec![c, t])?;
    for ci in 0..c {
        for ti in 0..t {
            let start = (ci * t + ti) * plane;
            let mut acc = T::zero();
            for &v in &summed.data()[start..start + plane] {
                acc = acc + v;
            }
            pooled.data_mut()[ci * t + ti] = acc * inv;
        }
    }
    Ok(pooled)
}

/// Score every candidate from the pooled feature sequence: mean the features
/// over the candidate's time steps, then apply the linear score head
/// (sigmoid) and the linear offset head (raw). Fills `predicted_score` and
/// `offset_pred` in place.
pub fn predict_candidates<T: Scalar>(
    pooled: &Tensor<T>,
    weights: &TemporalHeadWeights<T>,
    cands: &mut [TubeCandidate],
) -> Result<()> {
    if pooled.rank() != 2 || pooled.shape()[0] != weights.channels() {
        return Err(Error::ShapeMismatch {
            expected: format!("[{}, T]", weights.channels()),
            got: format!("{:?}", pooled.shape()),
            context: "pooled temporal features",
        });
    }
    let (c, t) = (pooled.shape()[0], pooled.shape()[1]);
    for cand in cands.iter_mut() {
        // Integer steps covered by [start, end); generated candidates always
        // cover at least one.
        let lo = cand.interval.start.ceil() as usize;
        let hi = (cand.interval.end.ceil() as usize).min(t);
        let steps: Vec<usize> = (lo..hi).collect();
        if steps.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "candidate [{}, {}) covers no time step",
                cand.interval.start, cand.interval.end
            )));
        }
        let inv = 1.0 / steps.len() as f64;
        let mut feature = vec![0.0f64; c];
        for &s in &steps {
            for (ci, f) in feature.iter_mut().enumerate() {
                *f += pooled.data()[ci * t + s].into_f64();
            }
        }
        for f in feature.iter_mut() {
            *f *= inv;
        }

        let mut score = weights.score_bias.into_f64();
        for (ci, f) in feature.iter().enumerate() {
            score += weights.score_weight.data()[ci].into_f64() * f;
        }
        cand.predicted_score = 1.0 / (1.0 + (-score).exp());

        let mut offsets = [0.0f64; 2];
        for (k, o) in offsets.iter_mut().enumerate() {
            *o = weights.offset_bias.data()[k].into_f64();
            for (ci, f) in feature.iter().enumerate() {
                *o += weights.offset_weight.data()[k * c + ci].into_f64() * f;
            }
        }
        cand.offset_pred = (offsets[0], offsets[1]);
    }
    Ok(())
}

/// Convenience composition: embed the trunk output and score candidates.
pub fn temporal_head_forward<T: Scalar>(
    m_mix: &Tensor<T>,
    weights: &TemporalHeadWeights<T>,
    cands: &mut [TubeCandidate],
) -> Result<()> {
    let pooled = temporal_embed_forward(m_mix, weights)?;
    predict_candidates(&pooled, weights, cands)
}
