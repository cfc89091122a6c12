//! Implementations of the CLI subcommands. Each returns the process exit
//! code on success and prints exactly one JSON document to stdout.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use std::path::Path;
use stvg_core::error::{Error, Result};
use stvg_core::formats::{
    load_features, load_weights, pair_for_eval, save_weights, write_loss_curve, AnnotationFile,
    BoxEntry, FitSummary, ForwardConfig, Tube, VideoRecord, WeightInit,
};
use stvg_core::fusion::{SentenceFeature, VisualFeatureMap};
use stvg_core::metrics::{aggregate, DEFAULT_VIOU_THRESHOLDS};
use stvg_core::optim::checks::{check_loss_gradients, CheckedLoss};
use stvg_core::optim::{
    fit_heatmap_demo, fit_sizes_demo, fit_temporal_demo, fixtures, OptimizerConfig,
};
use stvg_core::pipeline::{run_forward, PipelineWeights};
use stvg_core::spatial::{encode_gaussian_targets, BoundingBox, FocalConfig, SigmaMode};
use stvg_core::tensor::io as gktn;

pub fn encode_targets(annotations: &Path, map_size: usize, sigma: &str, out: &Path) -> Result<i32> {
    let sigma_mode: SigmaMode = sigma.parse()?;
    let file = AnnotationFile::load(annotations)?;
    file.validate()?;
    std::fs::create_dir_all(out)?;

    for video in &file.videos {
        let boxes: Vec<(usize, BoundingBox)> = video
            .tube
            .boxes
            .iter()
            .map(|b| Ok((b.t, BoundingBox::new(b.x1, b.y1, b.x2, b.y2)?)))
            .collect::<Result<_>>()?;
        let targets = encode_gaussian_targets(
            video.num_frames,
            &boxes,
            video.frame_height,
            video.frame_width,
            map_size,
            sigma_mode,
        )
        .map_err(|e| match e {
            Error::Validation { .. } => e,
            other => Error::Validation {
                video: video.id.clone(),
                message: other.to_string(),
            },
        })?;

        let stem = |suffix: &str| out.join(format!("{}_{suffix}.gktn", video.id));
        gktn::write_tensor(stem("heatmaps"), &targets.heatmaps.to_f32())?;
        gktn::write_tensor(stem("size_targets"), &targets.size_targets.to_f32())?;
        gktn::write_tensor(stem("mask"), &targets.annotation_mask.to_f32())?;

        let sidecar = json!({
            "id": video.id,
            "map_size": targets.map_size,
            "sigma_mode": sigma,
            "centers": targets.centers,
        });
        std::fs::write(
            out.join(format!("{}_targets.json", video.id)),
            serde_json::to_string_pretty(&sidecar)?,
        )?;
    }

    println!(
        "{}",
        json!({"videos": file.videos.len(), "out": out.display().to_string()})
    );
    Ok(0)
}

pub fn eval(gt: &Path, pred: &Path, temporal_gt: bool) -> Result<i32> {
    let gt_file = AnnotationFile::load(gt)?;
    gt_file.validate()?;
    let pred_file = AnnotationFile::load(pred)?;
    pred_file.validate()?;
    let results = pair_for_eval(&gt_file, &pred_file, temporal_gt)?;
    let report = aggregate(&results, &DEFAULT_VIOU_THRESHOLDS)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(0)
}

pub fn fit_demo(
    demo: &str,
    steps: usize,
    lr: Option<f64>,
    seed: u64,
    backtracking: Option<bool>,
    out: &Path,
) -> Result<i32> {
    let learning_rate = lr.unwrap_or_else(|| fixtures::recommended_learning_rate(demo));
    // The sizes demo runs with backtracking unless told otherwise; the
    // other demos default to plain descent.
    let backtracking = backtracking.unwrap_or(demo == "sizes");
    let cfg = OptimizerConfig {
        learning_rate,
        steps,
        seed,
        backtracking,
    };

    let curve: Vec<f64>;
    let converged: bool;
    match demo {
        "heatmap" => {
            let fit = fit_heatmap_demo(&fixtures::heatmap_targets(), &cfg, &FocalConfig::default())?;
            curve = fit.curve;
            converged = fit.converged;
        }
        "sizes" => {
            let fit = fit_sizes_demo(&fixtures::heatmap_targets(), &cfg)?;
            curve = fit.curve;
            converged = fit.converged;
        }
        "temporal" => {
            let fit = fit_temporal_demo(
                &fixtures::temporal_interval(),
                &fixtures::temporal_scheme(),
                &cfg,
                0.3,
            )?;
            curve = fit.curve;
            converged = fit.converged;
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown demo '{other}' (expected heatmap|sizes|temporal)"
            )))
        }
    }

    std::fs::create_dir_all(out)?;
    write_loss_curve(out.join("loss_curve.csv"), &curve)?;
    let summary = FitSummary {
        demo: demo.to_string(),
        initial: curve[0],
        r#final: curve[curve.len() - 1],
        steps,
        converged,
    };
    std::fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(0)
}

pub fn gradcheck(loss: &str, trials: usize, tol: f64, seed: u64) -> Result<i32> {
    let loss: CheckedLoss = loss.parse()?;
    let summary = check_loss_gradients(loss, trials, tol, seed)?;
    let passed = summary.passed();
    println!(
        "{}",
        json!({
            "loss": loss.to_string(),
            "trials": summary.trials,
            "tolerance": tol,
            "worst_rel_error": summary.worst_rel_error,
            "worst_trial": summary.worst_trial,
            "worst_index": summary.worst_index,
            "failed_trials": summary.failed_trials,
            "passed": passed,
        })
    );
    if passed {
        Ok(0)
    } else {
        eprintln!(
            "gradcheck failed: worst relative error {} at trial {} index {} (tolerance {})",
            summary.worst_rel_error, summary.worst_trial, summary.worst_index, tol
        );
        Ok(5)
    }
}

pub fn forward(
    features_path: &Path,
    weights_path: Option<&Path>,
    config_path: &Path,
    out: &Path,
    seed: u64,
) -> Result<i32> {
    let config = ForwardConfig::load(config_path)?;
    let features = load_features(features_path)?;

    if features.visual.rank() != 4 {
        return Err(Error::Validation {
            video: "visual".into(),
            message: format!(
                "visual tensor must be rank 4 (d, T, h, w), got {:?}",
                features.visual.shape()
            ),
        });
    }
    if features.visual.shape()[0] != config.visual_dim {
        return Err(Error::Validation {
            video: "visual".into(),
            message: format!(
                "visual tensor has {} channels, config says {}",
                features.visual.shape()[0],
                config.visual_dim
            ),
        });
    }
    if features.sentence.rank() != 2 || features.sentence.shape()[1] != config.word_dim {
        return Err(Error::Validation {
            video: "sentence".into(),
            message: format!(
                "sentence tensor must be (N, {}), got {:?}",
                config.word_dim,
                features.sentence.shape()
            ),
        });
    }

    let visual = VisualFeatureMap::new(
        features.visual.clone(),
        config.frame_height,
        config.frame_width,
    )?;
    let sentence = SentenceFeature::new(features.sentence.clone())?;

    let weights = match weights_path {
        Some(path) => load_weights(path, config.map_size)?,
        None => {
            let dims = config.dims();
            match config.init {
                WeightInit::Zero => PipelineWeights::<f32>::zeros(&dims, config.activation)?,
                WeightInit::Random => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    PipelineWeights::<f32>::random(&dims, config.activation, &mut rng)?
                }
            }
        }
    };

    let t = visual.frame_count();
    let scheme = config.scheme_for(t);
    let output = run_forward(&visual, &sentence, &weights, &scheme, config.blocks)?;

    std::fs::create_dir_all(out)?;
    save_weights(out.join("weights"), &weights)?;
    gktn::write_tensor(out.join("heatmaps.gktn"), &output.prediction.heatmaps.to_f32())?;
    gktn::write_tensor(out.join("size_raw.gktn"), &output.prediction.size_raw.to_f32())?;

    // Integer frame interval of the selected tube; a sub-frame tube rounds
    // to the single frame containing its start.
    let mut t_start = output.tube.start.ceil() as usize;
    let mut t_end = (output.tube.end.ceil() as usize).min(t);
    if t_start >= t_end {
        t_start = (output.tube.start.floor() as usize).min(t - 1);
        t_end = t_start + 1;
    }
    let confidence = output
        .candidates
        .iter()
        .map(|c| c.predicted_score)
        .fold(f64::NEG_INFINITY, f64::max);
    let record = VideoRecord {
        id: "video0".into(),
        num_frames: t,
        frame_height: config.frame_height,
        frame_width: config.frame_width,
        tube: Tube {
            t_start,
            t_end,
            confidence: Some(confidence),
            boxes: output
                .boxes
                .iter()
                .filter(|b| b.frame >= t_start && b.frame < t_end)
                .map(|b| BoxEntry {
                    t: b.frame,
                    x1: b.bbox.x1,
                    y1: b.bbox.y1,
                    x2: b.bbox.x2,
                    y2: b.bbox.y2,
                    peak_score: Some(b.peak_score),
                })
                .collect(),
        },
    };
    let predictions = AnnotationFile {
        videos: vec![record],
    };
    predictions.validate()?;
    predictions.save(out.join("predictions.json"))?;

    println!(
        "{}",
        json!({
            "out": out.display().to_string(),
            "tube": {"start": output.tube.start, "end": output.tube.end},
            "t_start": t_start,
            "t_end": t_end,
            "confidence": confidence,
        })
    );
    Ok(0)
}
