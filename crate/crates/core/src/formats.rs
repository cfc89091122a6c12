//! File-facing schemas: annotation and prediction JSON, the weights
//! manifest, feature manifests, and the forward-pass configuration.
//!
//! Annotations and predictions share one JSON shape; predictions
//! additionally carry a per-frame `peak_score` and a per-tube `confidence`.
//! Tensors travel in GKTN files referenced by the manifests, with paths
//! resolved relative to the manifest location.

use crate::error::{Error, Result};
use crate::fusion::FusionWeights;
use crate::metrics::GroundingResult;
use crate::mixed::MixedConvWeights;
use crate::pipeline::PipelineWeights;
use crate::spatial::{BoundingBox, SpatialHeadWeights};
use crate::temporal::{TemporalHeadWeights, TemporalInterval};
use crate::tensor::{io as gktn, Activation, ConvKernel, Scalar, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// One box annotation (or prediction, when `peak_score` is present).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoxEntry {
    pub t: usize,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub peak_score: Option<f64>,
}

/// A spatio-temporal tube: an integer frame interval plus one box per frame.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Tube {
    pub t_start: usize,
    pub t_end: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    pub boxes: Vec<BoxEntry>,
}

/// One annotated (or predicted) video.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VideoRecord {
    pub id: String,
    pub num_frames: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    pub tube: Tube,
}

/// Top-level annotation / prediction file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub videos: Vec<VideoRecord>,
}

impl VideoRecord {
    /// Enforce the tube invariants: a valid interval inside the video, one
    /// box for exactly every frame of the interval, and boxes inside the
    /// frame bounds.
    pub fn validate(&self) -> Result<()> {
        let fail = |message: String| Error::Validation {
            video: self.id.clone(),
            message,
        };
        if self.num_frames == 0 {
            return Err(fail("num_frames must be >= 1".into()));
        }
        let tube = &self.tube;
        if tube.t_start >= tube.t_end || tube.t_end > self.num_frames {
            return Err(fail(format!(
                "tube interval [{}, {}) must satisfy 0 <= t_start < t_end <= num_frames ({})",
                tube.t_start, tube.t_end, self.num_frames
            )));
        }
        let mut seen = vec![false; self.num_frames];
        for b in &tube.boxes {
            if b.t < tube.t_start || b.t >= tube.t_end {
                return Err(fail(format!(
                    "box at frame {} lies outside the tube interval [{}, {})",
                    b.t, tube.t_start, tube.t_end
                )));
            }
            if seen[b.t] {
                return Err(fail(format!("frame {} has more than one box", b.t)));
            }
            seen[b.t] = true;
            if !(b.x1 <= b.x2 && b.y1 <= b.y2) {
                return Err(fail(format!(
                    "box at frame {} has inverted corners ({}, {}, {}, {})",
                    b.t, b.x1, b.y1, b.x2, b.y2
                )));
            }
            if b.x1 < 0.0
                || b.y1 < 0.0
                || b.x2 > self.frame_width as f64
                || b.y2 > self.frame_height as f64
            {
                return Err(fail(format!(
                    "box at frame {} exceeds the {}x{} frame",
                    b.t, self.frame_width, self.frame_height
                )));
            }
        }
        if let Some(t) = (tube.t_start..tube.t_end).find(|&t| !seen[t]) {
            return Err(fail(format!("frame {t} inside the tube has no box")));
        }
        Ok(())
    }

    pub fn interval(&self) -> Result<TemporalInterval> {
        TemporalInterval::new(self.tube.t_start as f64, self.tube.t_end as f64)
    }

    pub fn boxes_map(&self) -> Result<BTreeMap<usize, BoundingBox>> {
        self.tube
            .boxes
            .iter()
            .map(|b| Ok((b.t, BoundingBox::new(b.x1, b.y1, b.x2, b.y2)?)))
            .collect()
    }
}

impl AnnotationFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: AnnotationFile = serde_json::from_str(&text)?;
        Ok(file)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        for v in &self.videos {
            v.validate()?;
        }
        Ok(())
    }
}

/// Pair ground truth and predictions by video id. With `temporal_gt` the
/// predicted interval is replaced by the ground-truth interval, isolating
/// spatial quality.
pub fn pair_for_eval(
    gt: &AnnotationFile,
    pred: &AnnotationFile,
    temporal_gt: bool,
) -> Result<Vec<GroundingResult>> {
    let pred_by_id: BTreeMap<&str, &VideoRecord> =
        pred.videos.iter().map(|v| (v.id.as_str(), v)).collect();
    let missing: Vec<&str> = gt
        .videos
        .iter()
        .map(|v| v.id.as_str())
        .filter(|id| !pred_by_id.contains_key(id))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Validation {
            video: missing.join(", "),
            message: "prediction file is missing these video ids".into(),
        });
    }

    let mut results = Vec::with_capacity(gt.videos.len());
    for g in &gt.videos {
        let p = pred_by_id[g.id.as_str()];
        let gt_interval = g.interval()?;
        let pred_interval = if temporal_gt { gt_interval } else { p.interval()? };
        results.push(GroundingResult {
            gt_interval,
            pred_interval,
            gt_boxes: g.boxes_map()?,
            pred_boxes: p.boxes_map()?,
        });
    }
    Ok(results)
}

/// A kernel reference in the weights manifest: weight and bias tensor files.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KernelRef {
    pub weights: String,
    pub bias: String,
}

/// JSON manifest naming every weight tensor of the pipeline.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WeightsManifest {
    pub activation: Activation,
    #[serde(rename = "W_v1")]
    pub w_v1: String,
    #[serde(rename = "W_s1")]
    pub w_s1: String,
    #[serde(rename = "W_f2")]
    pub w_f2: String,
    #[serde(rename = "W_v2")]
    pub w_v2: String,
    pub k2: KernelRef,
    pub k3_serial: KernelRef,
    pub k3_parallel: KernelRef,
    pub k3_mixed: KernelRef,
    pub spatial_heat: KernelRef,
    pub spatial_size: KernelRef,
    pub temporal_k1: KernelRef,
    pub temporal_k3: KernelRef,
    pub temporal_k5: KernelRef,
    pub score_weight: String,
    pub score_bias: String,
    pub offset_weight: String,
    pub offset_bias: String,
}

fn load_tensor(dir: &Path, name: &str) -> Result<Tensor<f32>> {
    gktn::read_tensor(dir.join(name))
        .map_err(|e| Error::TensorFile(format!("{name}: {e}")))
}

fn load_kernel(dir: &Path, r: &KernelRef) -> Result<ConvKernel<f32>> {
    ConvKernel::new(load_tensor(dir, &r.weights)?, load_tensor(dir, &r.bias)?)
}

/// Load pipeline weights from a manifest, resolving tensor paths relative
/// to the manifest's directory. `map_size` comes from the forward config.
pub fn load_weights(manifest_path: impl AsRef<Path>, map_size: usize) -> Result<PipelineWeights<f32>> {
    let manifest_path = manifest_path.as_ref();
    let text = std::fs::read_to_string(manifest_path)?;
    let manifest: WeightsManifest = serde_json::from_str(&text)?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let score_bias_t = load_tensor(dir, &manifest.score_bias)?;
    if score_bias_t.len() != 1 {
        return Err(Error::TensorFile(format!(
            "score_bias must hold exactly one value, got {}",
            score_bias_t.len()
        )));
    }

    Ok(PipelineWeights {
        fusion: FusionWeights::new(
            load_tensor(dir, &manifest.w_v1)?,
            load_tensor(dir, &manifest.w_s1)?,
            load_tensor(dir, &manifest.w_f2)?,
            load_tensor(dir, &manifest.w_v2)?,
            manifest.activation,
        )?,
        mixed: MixedConvWeights::new(
            load_kernel(dir, &manifest.k2)?,
            load_kernel(dir, &manifest.k3_serial)?,
            load_kernel(dir, &manifest.k3_parallel)?,
            load_kernel(dir, &manifest.k3_mixed)?,
        )?,
        spatial_head: SpatialHeadWeights::new(
            load_kernel(dir, &manifest.spatial_heat)?,
            load_kernel(dir, &manifest.spatial_size)?,
            map_size,
        )?,
        temporal_head: TemporalHeadWeights::new(
            load_kernel(dir, &manifest.temporal_k1)?,
            load_kernel(dir, &manifest.temporal_k3)?,
            load_kernel(dir, &manifest.temporal_k5)?,
            load_tensor(dir, &manifest.score_weight)?,
            score_bias_t.data()[0],
            load_tensor(dir, &manifest.offset_weight)?,
            load_tensor(dir, &manifest.offset_bias)?,
        )?,
    })
}

fn save_tensor(dir: &Path, name: &str, tensor: &Tensor<f32>) -> Result<String> {
    gktn::write_tensor(dir.join(name), tensor)?;
    Ok(name.to_string())
}

fn save_kernel<T: Scalar>(dir: &Path, stem: &str, k: &ConvKernel<T>) -> Result<KernelRef> {
    Ok(KernelRef {
        weights: save_tensor(dir, &format!("{stem}_weights.gktn"), &k.weights().to_f32())?,
        bias: save_tensor(dir, &format!("{stem}_bias.gktn"), &k.bias().to_f32())?,
    })
}

/// Write every weight tensor as a GKTN file into `dir` and return the
/// manifest (also written to `dir/manifest.json`).
pub fn save_weights<T: Scalar>(
    dir: impl AsRef<Path>,
    weights: &PipelineWeights<T>,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let score_bias = Tensor::new(vec![1], vec![weights.temporal_head.score_bias.into_f64() as f32])?;
    let manifest = WeightsManifest {
        activation: weights.fusion.activation,
        w_v1: save_tensor(dir, "w_v1.gktn", &weights.fusion.w_v1.to_f32())?,
        w_s1: save_tensor(dir, "w_s1.gktn", &weights.fusion.w_s1.to_f32())?,
        w_f2: save_tensor(dir, "w_f2.gktn", &weights.fusion.w_f2.to_f32())?,
        w_v2: save_tensor(dir, "w_v2.gktn", &weights.fusion.w_v2.to_f32())?,
        k2: save_kernel(dir, "k2", &weights.mixed.k2)?,
        k3_serial: save_kernel(dir, "k3_serial", &weights.mixed.k3_serial)?,
        k3_parallel: save_kernel(dir, "k3_parallel", &weights.mixed.k3_parallel)?,
        k3_mixed: save_kernel(dir, "k3_mixed", &weights.mixed.k3_mixed)?,
        spatial_heat: save_kernel(dir, "spatial_heat", &weights.spatial_head.heat)?,
        spatial_size: save_kernel(dir, "spatial_size", &weights.spatial_head.size)?,
        temporal_k1: save_kernel(dir, "temporal_k1", &weights.temporal_head.k1)?,
        temporal_k3: save_kernel(dir, "temporal_k3", &weights.temporal_head.k3)?,
        temporal_k5: save_kernel(dir, "temporal_k5", &weights.temporal_head.k5)?,
        score_weight: save_tensor(dir, "score_weight.gktn", &weights.temporal_head.score_weight.to_f32())?,
        score_bias: save_tensor(dir, "score_bias.gktn", &score_bias)?,
        offset_weight: save_tensor(dir, "offset_weight.gktn", &weights.temporal_head.offset_weight.to_f32())?,
        offset_bias: save_tensor(dir, "offset_bias.gktn", &weights.temporal_head.offset_bias.to_f32())?,
    };
    let manifest_path = dir.join("manifest.json");
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest_path)
}

/// Feature manifest: the visual and sentence tensors of one video.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeatureManifest {
    pub visual: String,
    pub sentence: String,
}

/// A loaded feature pair.
pub struct Features {
    pub visual: Tensor<f32>,
    pub sentence: Tensor<f32>,
}

pub fn load_features(manifest_path: impl AsRef<Path>) -> Result<Features> {
    let manifest_path = manifest_path.as_ref();
    let text = std::fs::read_to_string(manifest_path)?;
    let manifest: FeatureManifest = serde_json::from_str(&text)?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    Ok(Features {
        visual: load_tensor(dir, &manifest.visual)?,
        sentence: load_tensor(dir, &manifest.sentence)?,
    })
}

fn default_projected_dim() -> usize {
    16
}

fn default_map_size() -> usize {
    16
}

fn default_kernel_extent() -> usize {
    3
}

fn default_blocks() -> usize {
    1
}

fn default_activation() -> Activation {
    Activation::Relu
}

fn default_stride_fraction() -> f64 {
    0.25
}

fn default_confidence_threshold() -> f64 {
    0.3
}

fn default_init() -> WeightInit {
    WeightInit::Random
}

/// How `cmd_forward` builds weights when no manifest is supplied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightInit {
    Random,
    Zero,
}

/// Forward-pass configuration file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ForwardConfig {
    pub visual_dim: usize,
    pub word_dim: usize,
    #[serde(default = "default_projected_dim")]
    pub projected_dim: usize,
    #[serde(default = "default_projected_dim")]
    pub c1: usize,
    #[serde(default = "default_projected_dim")]
    pub c2: usize,
    #[serde(default = "default_map_size")]
    pub map_size: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    #[serde(default = "default_kernel_extent")]
    pub k2_extent: usize,
    #[serde(default = "default_kernel_extent")]
    pub k3_extent: usize,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default)]
    pub scales: Option<Vec<usize>>,
    #[serde(default = "default_stride_fraction")]
    pub stride_fraction: f64,
    #[serde(default = "default_confidence_threshold")]
    pub confidence_threshold: f64,
    #[serde(default = "default_init")]
    pub init: WeightInit,
}

impl ForwardConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn dims(&self) -> crate::pipeline::PipelineDims {
        crate::pipeline::PipelineDims {
            visual_dim: self.visual_dim,
            word_dim: self.word_dim,
            projected_dim: self.projected_dim,
            c1: self.c1,
            c2: self.c2,
            map_size: self.map_size,
            k2_extent: self.k2_extent,
            k3_extent: self.k3_extent,
        }
    }

    pub fn scheme_for(&self, sequence_length: usize) -> crate::temporal::CandidateScheme {
        match &self.scales {
            Some(scales) => crate::temporal::CandidateScheme {
                scales: scales.clone(),
                stride_fraction: self.stride_fraction,
                sequence_length,
            },
            None => crate::temporal::CandidateScheme::default_for(sequence_length),
        }
    }
}

/// Fit-demo summary written next to the loss curve.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitSummary {
    pub demo: String,
    pub initial: f64,
    pub r#final: f64,
    pub steps: usize,
    pub converged: bool,
}

/// Write a loss curve as `step,loss` CSV lines.
pub fn write_loss_curve(path: impl AsRef<Path>, curve: &[f64]) -> Result<()> {
    let mut text = String::from("step,loss\n");
    for (i, v) in curve.iter().enumerate() {
        text.push_str(&format!("{i},{v:.17e}\n"));
    }
    std::fs::write(path, text)?;
    Ok(())
}
