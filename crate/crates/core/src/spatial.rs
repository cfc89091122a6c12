//! Anchor-free spatial localization: Gaussian heatmap target encoding,
//! the point-localization focal loss, per-pixel size regression under a
//! GIoU loss, and peak-based box decoding.
//!
//! Targets live on an L x L feature-map grid. Boxes are rescaled from
//! pixels by L/W and L/H, the box midpoint is rounded to the nearest cell
//! (half-cell ties round down), and every cell inside the rescaled box
//! becomes a regression sample carrying its (left, top, right, bottom)
//! distances to the box edges.

use crate::error::{Error, Result};
use crate::tensor::{
    conv2d_forward, reshape_frames, upsample_bilinear, Activation, ConvKernel, KernelDims, Scalar,
    Tensor,
};
use serde::{Deserialize, Serialize};

/// Axis-aligned box (x1, y1, x2, y2); pixel or feature-cell coordinates
/// depending on context.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x1 <= x2 && y1 <= y2) || !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "invalid box ({x1}, {y1}, {x2}, {y2}): need x1 <= x2 and y1 <= y2, all finite"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Intersection-over-union; 0 when the union is empty.
    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let iw = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let ih = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// Generalized IoU: IoU minus the normalized empty area of the smallest
/// enclosing box. Lies in (-1, 1]; equals 1 only for identical boxes.
pub fn giou(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    if a.area() == 0.0 && b.area() == 0.0 {
        return Err(Error::DegenerateBox {
            x1: a.x1,
            y1: a.y1,
            x2: a.x2,
            y2: a.y2,
        });
    }
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let cw = a.x2.max(b.x2) - a.x1.min(b.x1);
    let ch = a.y2.max(b.y2) - a.y1.min(b.y1);
    let enclosing = cw * ch;
    Ok(inter / union - (enclosing - union) / enclosing)
}

/// Gaussian width selection for target encoding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SigmaMode {
    /// max(1, min(box_w, box_h) / 6) in cells, per box.
    Adaptive,
    /// One fixed width in cells for every box.
    Fixed(f64),
}

impl SigmaMode {
    fn sigma_for(&self, box_w: f64, box_h: f64) -> f64 {
        match *self {
            SigmaMode::Adaptive => (box_w.min(box_h) / 6.0).max(1.0),
            SigmaMode::Fixed(s) => s,
        }
    }
}

impl std::str::FromStr for SigmaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "adaptive" {
            return Ok(SigmaMode::Adaptive);
        }
        if let Some(v) = s.strip_prefix("fixed:") {
            let sigma: f64 = v
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad sigma value '{v}'")))?;
            if sigma <= 0.0 || !sigma.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "sigma must be positive and finite, got {sigma}"
                )));
            }
            return Ok(SigmaMode::Fixed(sigma));
        }
        Err(Error::InvalidArgument(format!(
            "unknown sigma mode '{s}' (expected adaptive or fixed:<value>)"
        )))
    }
}

/// Center cell and Gaussian width recorded per annotated frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodedCenter {
    pub frame: usize,
    pub x: usize,
    pub y: usize,
    pub sigma: f64,
}

/// Per-frame heatmaps, size-regression targets, and the annotation mask.
///
/// `heatmaps` is (T, L, L) in [0, 1] with value 1 exactly at each center
/// cell; `size_targets` is (T, 4, L, L) with channels (left, top, right,
/// bottom) in cells; `annotation_mask` is (T, L, L) with 1 on cells inside
/// the rescaled box. Frames without a box are all zero.
#[derive(Clone, Debug)]
pub struct GaussianTargets {
    pub heatmaps: Tensor<f64>,
    pub size_targets: Tensor<f64>,
    pub annotation_mask: Tensor<f64>,
    pub centers: Vec<EncodedCenter>,
    pub map_size: usize,
}

impl GaussianTargets {
    pub fn num_frames(&self) -> usize {
        self.heatmaps.shape()[0]
    }
}

/// Nearest-integer cell with half-cell ties rounding down.
fn round_half_down(v: f64) -> f64 {
    (v - 0.5).ceil()
}

/// Encode annotated boxes (pixel coordinates) into Gaussian heatmap and
/// size-regression targets on an L x L grid.
pub fn encode_gaussian_targets(
    num_frames: usize,
    boxes: &[(usize, BoundingBox)],
    frame_h: usize,
    frame_w: usize,
    map_size: usize,
    sigma: SigmaMode,
) -> Result<GaussianTargets> {
    if num_frames == 0 {
        return Err(Error::EmptyInput("num_frames must be >= 1"));
    }
    if map_size < 2 {
        return Err(Error::InvalidArgument(format!(
            "map size {map_size} must be >= 2"
        )));
    }
    if frame_h == 0 || frame_w == 0 {
        return Err(Error::EmptyInput("frame extents must be positive"));
    }

    let l = map_size;
    let mut heatmaps = Tensor::<f64>::zeros(vec![num_frames, l, l])?;
    let mut size_targets = Tensor::<f64>::zeros(vec![num_frames, 4, l, l])?;
    let mut mask = Tensor::<f64>::zeros(vec![num_frames, l, l])?;
    let mut centers = Vec::with_capacity(boxes.len());
    let mut seen = vec![false; num_frames];

    let sx = l as f64 / frame_w as f64;
    let sy = l as f64 / frame_h as f64;

    for &(t, bbox) in boxes {
        if t >= num_frames {
            return Err(Error::InvalidArgument(format!(
                "box frame index {t} out of range 0..{num_frames}"
            )));
        }
        if seen[t] {
            return Err(Error::InvalidArgument(format!(
                "frame {t} has more than one box"
            )));
        }
        seen[t] = true;
        if bbox.area() == 0.0 {
            return Err(Error::DegenerateBox {
                x1: bbox.x1,
                y1: bbox.y1,
                x2: bbox.x2,
                y2: bbox.y2,
            });
        }
        if bbox.x1 < 0.0
            || bbox.y1 < 0.0
            || bbox.x2 > frame_w as f64
            || bbox.y2 > frame_h as f64
        {
            return Err(Error::InvalidArgument(format!(
                "box ({}, {}, {}, {}) exceeds frame bounds {frame_w}x{frame_h}",
                bbox.x1, bbox.y1, bbox.x2, bbox.y2
            )));
        }

        // Rescale to feature-map cells.
        let (bx1, by1, bx2, by2) = (bbox.x1 * sx, bbox.y1 * sy, bbox.x2 * sx, bbox.y2 * sy);
        let cx = round_half_down((bx1 + bx2) / 2.0).clamp(0.0, (l - 1) as f64) as usize;
        let cy = round_half_down((by1 + by2) / 2.0).clamp(0.0, (l - 1) as f64) as usize;
        let s = sigma.sigma_for(bx2 - bx1, by2 - by1);
        centers.push(EncodedCenter {
            frame: t,
            x: cx,
            y: cy,
            sigma: s,
        });

        let inv = 1.0 / (2.0 * s * s);
        for y in 0..l {
            for x in 0..l {
                let d2 = (x as f64 - cx as f64).powi(2) + (y as f64 - cy as f64).powi(2);
                heatmaps.set(&[t, y, x], (-d2 * inv).exp());
            }
        }

        // Every integer cell inside the rescaled box is a regression sample.
        // A sub-cell box can cover no integer cell; the ranges are then empty.
        let x_lo = bx1.ceil() as usize;
        let x_hi = bx2.floor().min((l - 1) as f64) as usize;
        let y_lo = by1.ceil() as usize;
        let y_hi = by2.floor().min((l - 1) as f64) as usize;
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                mask.set(&[t, y, x], 1.0);
                size_targets.set(&[t, 0, y, x], x as f64 - bx1);
                size_targets.set(&[t, 1, y, x], y as f64 - by1);
                size_targets.set(&[t, 2, y, x], bx2 - x as f64);
                size_targets.set(&[t, 3, y, x], by2 - y as f64);
            }
        }
    }

    Ok(GaussianTargets {
        heatmaps,
        size_targets,
        annotation_mask: mask,
        centers,
        map_size: l,
    })
}

/// Hyper-parameters of the point-localization focal loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalConfig {
    /// Exponent on the prediction term.
    pub alpha: f64,
    /// Exponent on the (1 - h) down-weighting of negatives.
    pub beta: f64,
    /// Positive-sample threshold on the target heatmap.
    pub gamma: f64,
}

impl Default for FocalConfig {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 4.0,
            gamma: 0.8,
        }
    }
}

impl FocalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha <= 0.0 || self.beta <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "alpha and beta must be positive, got {} and {}",
                self.alpha, self.beta
            )));
        }
        if !(0.0 < self.gamma && self.gamma < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "gamma must be in (0, 1), got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// Log clamp floor used inside the focal loss.
pub const FOCAL_LOG_EPS: f64 = 1e-6;

/// Point-localization focal loss over predicted heatmaps, with its analytic
/// gradient with respect to every predicted cell.
///
/// Cells with target above `gamma` are positives and are pulled toward 1;
/// the rest are negatives, down-weighted by (1 - h)^beta. The sum runs over
/// every cell of every frame and is normalized by the number of annotated
/// boxes.
pub fn focal_loss(
    pred: &Tensor<f64>,
    targets: &GaussianTargets,
    cfg: &FocalConfig,
) -> Result<(f64, Tensor<f64>)> {
    cfg.validate()?;
    if pred.shape() != targets.heatmaps.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", targets.heatmaps.shape()),
            got: format!("{:?}", pred.shape()),
            context: "focal loss prediction",
        });
    }
    let m_foc = targets.centers.len();
    if m_foc == 0 {
        return Err(Error::NoAnnotatedBoxes);
    }
    for (i, &p) in pred.data().iter().enumerate() {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::PredictionOutOfRange { value: p, index: i });
        }
    }

    let inv_m = 1.0 / m_foc as f64;
    let mut grad = Tensor::<f64>::zeros(pred.shape().to_vec())?;
    let mut total = 0.0;
    for (i, (&p, &h)) in pred.data().iter().zip(targets.heatmaps.data()).enumerate() {
        let (term, dterm) = if h > cfg.gamma {
            let lp = p.max(FOCAL_LOG_EPS).ln();
            let dlp = if p > FOCAL_LOG_EPS { 1.0 / p } else { 0.0 };
            let w = (1.0 - p).powf(cfg.alpha);
            let dw = -cfg.alpha * (1.0 - p).powf(cfg.alpha - 1.0);
            (w * lp, dw * lp + w * dlp)
        } else {
            let l1p = (1.0 - p).max(FOCAL_LOG_EPS).ln();
            let dl1p = if 1.0 - p > FOCAL_LOG_EPS {
                -1.0 / (1.0 - p)
            } else {
                0.0
            };
            let hw = (1.0 - h).powf(cfg.beta);
            let pw = p.powf(cfg.alpha);
            let dpw = cfg.alpha * p.powf(cfg.alpha - 1.0);
            (hw * pw * l1p, hw * (dpw * l1p + pw * dl1p))
        };
        total += term;
        grad.data_mut()[i] = -inv_m * dterm;
    }
    Ok((-inv_m * total, grad))
}

/// GIoU regression loss over masked cells, with its analytic gradient with
/// respect to the raw (log-distance) size predictions.
///
/// At every masked cell the predicted box is decoded as
/// (x - e^l, y - e^t, x + e^r, y + e^b) and the ground-truth box is
/// reconstructed from the stored size targets; the per-cell loss is
/// 1 - GIoU. Gradients are zero outside the mask.
pub fn giou_loss(size_raw: &Tensor<f64>, targets: &GaussianTargets) -> Result<(f64, Tensor<f64>)> {
    if size_raw.shape() != targets.size_targets.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", targets.size_targets.shape()),
            got: format!("{:?}", size_raw.shape()),
            context: "size regression prediction",
        });
    }
    let t_frames = targets.annotation_mask.shape()[0];
    let l = targets.map_size;
    let plane = l * l;

    let mut grad = Tensor::<f64>::zeros(size_raw.shape().to_vec())?;
    let mut total = 0.0;
    let mut count = 0usize;

    for t in 0..t_frames {
        for y in 0..l {
            for x in 0..l {
                if targets.annotation_mask.data()[t * plane + y * l + x] != 1.0 {
                    continue;
                }
                count += 1;
                let cell = |c: usize| (t * 4 + c) * plane + y * l + x;
                let (xf, yf) = (x as f64, y as f64);
                let st = [
                    targets.size_targets.data()[cell(0)],
                    targets.size_targets.data()[cell(1)],
                    targets.size_targets.data()[cell(2)],
                    targets.size_targets.data()[cell(3)],
                ];
                let gt = [xf - st[0], yf - st[1], xf + st[2], yf + st[3]];
                let d = [
                    size_raw.data()[cell(0)].exp(),
                    size_raw.data()[cell(1)].exp(),
                    size_raw.data()[cell(2)].exp(),
                    size_raw.data()[cell(3)].exp(),
                ];
                let pred = [xf - d[0], yf - d[1], xf + d[2], yf + d[3]];

                let (value, dg) = giou_with_grad(&pred, &gt);
                total += 1.0 - value;
                // Chain rule through the exp decode; left/top move the low
                // corner opposite to the raw parameter.
                grad.data_mut()[cell(0)] = dg[0] * d[0];
                grad.data_mut()[cell(1)] = dg[1] * d[1];
                grad.data_mut()[cell(2)] = -dg[2] * d[2];
                grad.data_mut()[cell(3)] = -dg[3] * d[3];
            }
        }
    }

    if count == 0 {
        return Err(Error::NoRegressionSamples);
    }
    let inv_m = 1.0 / count as f64;
    for g in grad.data_mut() {
        *g *= inv_m;
    }
    Ok((inv_m * total, grad))
}

/// GIoU of `p` vs fixed `g` (both as [x1, y1, x2, y2]) together with
/// d(GIoU)/d(p). Subgradient choices at ties are measure-zero and
/// irrelevant for randomized checks.
fn giou_with_grad(p: &[f64; 4], g: &[f64; 4]) -> (f64, [f64; 4]) {
    let area_p = (p[2] - p[0]) * (p[3] - p[1]);
    let area_g = (g[2] - g[0]) * (g[3] - g[1]);
    let d_area = [
        -(p[3] - p[1]),
        -(p[2] - p[0]),
        p[3] - p[1],
        p[2] - p[0],
    ];

    let iw = (p[2].min(g[2]) - p[0].max(g[0])).max(0.0);
    let ih = (p[3].min(g[3]) - p[1].max(g[1])).max(0.0);
    let inter = iw * ih;
    let mut d_inter = [0.0; 4];
    if inter > 0.0 {
        d_inter[0] = if p[0] > g[0] { -ih } else { 0.0 };
        d_inter[1] = if p[1] > g[1] { -iw } else { 0.0 };
        d_inter[2] = if p[2] < g[2] { ih } else { 0.0 };
        d_inter[3] = if p[3] < g[3] { iw } else { 0.0 };
    }

    let union = area_p + area_g - inter;
    let d_union = [
        d_area[0] - d_inter[0],
        d_area[1] - d_inter[1],
        d_area[2] - d_inter[2],
        d_area[3] - d_inter[3],
    ];

    let cw = p[2].max(g[2]) - p[0].min(g[0]);
    let ch = p[3].max(g[3]) - p[1].min(g[1]);
    let enclosing = cw * ch;
    let d_enclosing = [
        if p[0] < g[0] { -ch } else { 0.0 },
        if p[1] < g[1] { -cw } else { 0.0 },
        if p[2] > g[2] { ch } else { 0.0 },
        if p[3] > g[3] { cw } else { 0.0 },
    ];

    let value = inter / union - (enclosing - union) / enclosing;
    let mut d_value = [0.0; 4];
    for i in 0..4 {
        let d_iou = (d_inter[i] * union - inter * d_union[i]) / (union * union);
        // d[(C - U)/C] = d[1 - U/C] = -(dU*C - U*dC)/C^2
        let d_pen = -(d_union[i] * enclosing - union * d_enclosing[i]) / (enclosing * enclosing);
        d_value[i] = d_iou - d_pen;
    }
    (value, d_value)
}

/// Sigmoid-activated heatmaps (T, L, L) and raw log-distance size
/// predictions (T, 4, L, L).
#[derive(Clone, Debug)]
pub struct SpatialPrediction<T: Scalar> {
    pub heatmaps: Tensor<T>,
    pub size_raw: Tensor<T>,
}

impl<T: Scalar> SpatialPrediction<T> {
    pub fn new(heatmaps: Tensor<T>, size_raw: Tensor<T>) -> Result<Self> {
        if heatmaps.rank() != 3 {
            return Err(Error::RankMismatch {
                expected: 3,
                got: heatmaps.rank(),
            });
        }
        if size_raw.rank() != 4
            || size_raw.shape()[0] != heatmaps.shape()[0]
            || size_raw.shape()[1] != 4
            || size_raw.shape()[2..] != heatmaps.shape()[1..]
        {
            return Err(Error::ShapeMismatch {
                expected: format!(
                    "[{}, 4, {}, {}]",
                    heatmaps.shape()[0],
                    heatmaps.shape()[1],
                    heatmaps.shape()[2]
                ),
                got: format!("{:?}", size_raw.shape()),
                context: "size_raw vs heatmaps",
            });
        }
        Ok(Self { heatmaps, size_raw })
    }

    pub fn num_frames(&self) -> usize {
        self.heatmaps.shape()[0]
    }

    pub fn map_size(&self) -> usize {
        self.heatmaps.shape()[1]
    }

    pub fn to_f64(&self) -> SpatialPrediction<f64> {
        SpatialPrediction {
            heatmaps: self.heatmaps.to_f64(),
            size_raw: self.size_raw.to_f64(),
        }
    }
}

/// One decoded box per frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodedBox {
    pub frame: usize,
    pub bbox: BoundingBox,
    pub peak_score: f64,
}

/// Decode one box per frame from the heatmap peak and the size predictions
/// at that cell, rescaled back to pixels and clamped to the frame.
///
/// Ties in the heatmap argmax resolve to the smallest row-major index.
pub fn decode_boxes<T: Scalar>(
    pred: &SpatialPrediction<T>,
    frame_h: usize,
    frame_w: usize,
) -> Vec<DecodedBox> {
    let t_frames = pred.num_frames();
    let l = pred.map_size();
    let plane = l * l;
    let sx = frame_w as f64 / l as f64;
    let sy = frame_h as f64 / l as f64;

    let mut out = Vec::with_capacity(t_frames);
    for t in 0..t_frames {
        let heat = &pred.heatmaps.data()[t * plane..(t + 1) * plane];
        let mut best = 0usize;
        for (i, v) in heat.iter().enumerate() {
            if v.into_f64() > heat[best].into_f64() {
                best = i;
            }
        }
        let (y, x) = (best / l, best % l);
        let cell = |c: usize| (t * 4 + c) * plane + y * l + x;
        let d: Vec<f64> = (0..4)
            .map(|c| pred.size_raw.data()[cell(c)].into_f64().exp())
            .collect();
        let (xf, yf) = (x as f64, y as f64);
        let x1 = ((xf - d[0]) * sx).clamp(0.0, frame_w as f64);
        let y1 = ((yf - d[1]) * sy).clamp(0.0, frame_h as f64);
        let x2 = ((xf + d[2]) * sx).clamp(0.0, frame_w as f64);
        let y2 = ((yf + d[3]) * sy).clamp(0.0, frame_h as f64);
        out.push(DecodedBox {
            frame: t,
            bbox: BoundingBox { x1, y1, x2, y2 },
            peak_score: heat[best].into_f64(),
        });
    }
    out
}

/// 1x1 prediction convolutions of the spatial head.
#[derive(Clone, Debug)]
pub struct SpatialHeadWeights<T: Scalar> {
    pub heat: ConvKernel<T>,
    pub size: ConvKernel<T>,
    pub map_size: usize,
}

impl<T: Scalar> SpatialHeadWeights<T> {
    pub fn new(heat: ConvKernel<T>, size: ConvKernel<T>, map_size: usize) -> Result<Self> {
        for (name, k, out) in [("heat", &heat, 1), ("size", &size, 4)] {
            if k.dims() != KernelDims::Two
                || k.out_channels() != out
                || k.weights().shape()[2] != 1
                || k.weights().shape()[3] != 1
            {
                return Err(Error::InvalidArgument(format!(
                    "{name} head must be a 1x1 2D kernel with {out} output channels"
                )));
            }
        }
        if heat.in_channels() != size.in_channels() {
            return Err(Error::ChannelMismatch {
                expected: heat.in_channels(),
                got: size.in_channels(),
            });
        }
        if map_size < 2 {
            return Err(Error::InvalidArgument(format!(
                "map size {map_size} must be >= 2"
            )));
        }
        Ok(Self {
            heat,
            size,
            map_size,
        })
    }

    pub fn zeros(channels: usize, map_size: usize) -> Result<Self> {
        Self::new(
            ConvKernel::zeros_2d(1, channels, 1, 1)?,
            ConvKernel::zeros_2d(4, channels, 1, 1)?,
            map_size,
        )
    }

    pub fn random(channels: usize, map_size: usize, rng: &mut impl rand::Rng) -> Result<Self> {
        Self::new(
            ConvKernel::random_2d(1, channels, 1, 1, rng)?,
            ConvKernel::random_2d(4, channels, 1, 1, rng)?,
            map_size,
        )
    }
}

/// Upsample every frame of the trunk output to L x L, then apply the 1x1
/// heatmap conv (sigmoid) and the 1x1 size conv (raw).
pub fn spatial_head_forward<T: Scalar>(
    m_mix: &Tensor<T>,
    weights: &SpatialHeadWeights<T>,
) -> Result<SpatialPrediction<T>> {
    if m_mix.rank() != 4 {
        return Err(Error::RankMismatch {
            expected: 4,
            got: m_mix.rank(),
        });
    }
    let (c, t, h, w) = (
        m_mix.shape()[0],
        m_mix.shape()[1],
        m_mix.shape()[2],
        m_mix.shape()[3],
    );
    if c != weights.heat.in_channels() {
        return Err(Error::ChannelMismatch {
            expected: weights.heat.in_channels(),
            got: c,
        });
    }
    let l = weights.map_size;
    if l < h || l < w {
        return Err(Error::UpsampleTooSmall {
            in_h: h,
            in_w: w,
            out_h: l,
            out_w: l,
        });
    }

    let plane = l * l;
    let mut heatmaps = Tensor::<T>::zeros(vec![t, l, l])?;
    let mut size_raw = Tensor::<T>::zeros(vec![t, 4, l, l])?;
    for (ti, frame) in reshape_frames(m_mix)?.iter().enumerate() {
        let up = upsample_bilinear(frame, l, l)?;
        let heat = conv2d_forward(&up, &weights.heat)?;
        let heat = crate::tensor::activation(&heat, Activation::Sigmoid);
        heatmaps.data_mut()[ti * plane..(ti + 1) * plane].copy_from_slice(heat.data());
        let size = conv2d_forward(&up, &weights.size)?;
        size_raw.data_mut()[ti * 4 * plane..(ti + 1) * 4 * plane].copy_from_slice(size.data());
    }
    SpatialPrediction::new(heatmaps, size_raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single_cell_targets(h: f64, centers: usize) -> GaussianTargets {
        GaussianTargets {
            heatmaps: Tensor::new(vec![1, 1, 1], vec![h]).unwrap(),
            size_targets: Tensor::zeros(vec![1, 4, 1, 1]).unwrap(),
            annotation_mask: Tensor::zeros(vec![1, 1, 1]).unwrap(),
            centers: (0..centers)
                .map(|_| EncodedCenter {
                    frame: 0,
                    x: 0,
                    y: 0,
                    sigma: 1.0,
                })
                .collect(),
            map_size: 1,
        }
    }

    #[test]
    fn encode_peak_is_one_and_known_cells_match() {
        // 32x32 frame, box (12, 12, 20, 20), L = 16: rescaled box is
        // (6, 6, 10, 10) so the center cell is (8, 8).
        let boxes = [(0usize, BoundingBox::new(12.0, 12.0, 20.0, 20.0).unwrap())];
        let t = encode_gaussian_targets(1, &boxes, 32, 32, 16, SigmaMode::Fixed(2.0)).unwrap();
        assert_eq!(
            t.centers,
            vec![EncodedCenter {
                frame: 0,
                x: 8,
                y: 8,
                sigma: 2.0
            }]
        );
        assert_eq!(t.heatmaps.get(&[0, 8, 8]), 1.0);
        // Squared distance 4 at 2 sigma^2 = 8: exp(-1/2).
        assert_relative_eq!(
            t.heatmaps.get(&[0, 10, 8]),
            (-0.5f64).exp(),
            max_relative = 1e-12
        );
        assert_relative_eq!(t.heatmaps.get(&[0, 10, 8]), 0.60653, max_relative = 1e-5);
        // Squared distance 8: exp(-1).
        assert_relative_eq!(
            t.heatmaps.get(&[0, 10, 10]),
            (-1.0f64).exp(),
            max_relative = 1e-12
        );
        assert_relative_eq!(t.heatmaps.get(&[0, 10, 10]), 0.36788, max_relative = 1e-5);
    }

    #[test]
    fn encode_is_symmetric_and_monotone_from_center() {
        let boxes = [(0usize, BoundingBox::new(8.0, 8.0, 24.0, 24.0).unwrap())];
        let t = encode_gaussian_targets(1, &boxes, 32, 32, 16, SigmaMode::Adaptive).unwrap();
        let c = t.centers[0];
        assert_eq!((c.x, c.y), (8, 8));
        for d in 1..8usize {
            if c.x >= d && c.x + d < 16 {
                assert_eq!(
                    t.heatmaps.get(&[0, c.y, c.x - d]),
                    t.heatmaps.get(&[0, c.y, c.x + d])
                );
            }
            if d < 7 {
                assert!(
                    t.heatmaps.get(&[0, c.y, c.x + d]) > t.heatmaps.get(&[0, c.y, c.x + d + 1])
                );
            }
        }
    }

    #[test]
    fn encode_masks_only_cells_inside_box_with_nonnegative_targets() {
        let boxes = [(1usize, BoundingBox::new(4.0, 8.0, 20.0, 28.0).unwrap())];
        let t = encode_gaussian_targets(3, &boxes, 32, 32, 16, SigmaMode::Adaptive).unwrap();
        // Rescaled box (2, 4, 10, 14).
        let mut masked = 0;
        for y in 0..16 {
            for x in 0..16 {
                let m = t.annotation_mask.get(&[1, y, x]);
                let inside = (2..=10).contains(&x) && (4..=14).contains(&y);
                assert_eq!(m == 1.0, inside, "cell ({x}, {y})");
                if m == 1.0 {
                    masked += 1;
                    for c in 0..4 {
                        assert!(t.size_targets.get(&[1, c, y, x]) >= 0.0);
                    }
                }
            }
        }
        assert_eq!(masked, 9 * 11);
        // Other frames stay empty.
        assert!(t.heatmaps.data()[..16 * 16].iter().all(|&v| v == 0.0));
        assert!(t.annotation_mask.get(&[0, 0, 0]) == 0.0);
    }

    #[test]
    fn encode_rejects_bad_boxes() {
        let degenerate = [(0usize, BoundingBox::new(4.0, 4.0, 4.0, 9.0).unwrap())];
        assert!(matches!(
            encode_gaussian_targets(1, &degenerate, 32, 32, 16, SigmaMode::Adaptive),
            Err(Error::DegenerateBox { .. })
        ));
        let outside = [(0usize, BoundingBox::new(4.0, 4.0, 40.0, 9.0).unwrap())];
        assert!(encode_gaussian_targets(1, &outside, 32, 32, 16, SigmaMode::Adaptive).is_err());
        let dup = [
            (0usize, BoundingBox::new(1.0, 1.0, 5.0, 5.0).unwrap()),
            (0usize, BoundingBox::new(2.0, 2.0, 6.0, 6.0).unwrap()),
        ];
        assert!(encode_gaussian_targets(1, &dup, 32, 32, 16, SigmaMode::Adaptive).is_err());
    }

    #[test]
    fn focal_scalar_hand_cases() {
        // Perfect positive: contribution 0 in the limit; at 1 - 1e-9 it is tiny.
        let t = single_cell_targets(1.0, 1);
        let pred = Tensor::new(vec![1, 1, 1], vec![1.0 - 1e-9]).unwrap();
        let (loss, _) = focal_loss(&pred, &t, &FocalConfig::default()).unwrap();
        assert!(loss.abs() < 1e-15);

        // Single positive cell, pred 0.5, alpha 2: -(0.25) ln 0.5.
        let pred = Tensor::new(vec![1, 1, 1], vec![0.5]).unwrap();
        let (loss, _) = focal_loss(&pred, &t, &FocalConfig::default()).unwrap();
        assert_relative_eq!(loss, -0.25 * 0.5f64.ln(), max_relative = 1e-12);
        assert_relative_eq!(loss, 0.17329, max_relative = 1e-4);

        // Single negative cell h = 0.5 <= gamma: -(0.5)^4 (0.5)^2 ln 0.5.
        let t = single_cell_targets(0.5, 1);
        let (loss, _) = focal_loss(&pred, &t, &FocalConfig::default()).unwrap();
        assert_relative_eq!(loss, -0.0625 * 0.25 * 0.5f64.ln(), max_relative = 1e-12);
        assert_relative_eq!(loss, 0.010830, max_relative = 1e-4);
    }

    #[test]
    fn focal_rejects_bad_inputs() {
        let t = single_cell_targets(1.0, 0);
        let pred = Tensor::new(vec![1, 1, 1], vec![0.5]).unwrap();
        assert!(matches!(
            focal_loss(&pred, &t, &FocalConfig::default()),
            Err(Error::NoAnnotatedBoxes)
        ));
        let t = single_cell_targets(1.0, 1);
        let pred = Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap();
        assert!(matches!(
            focal_loss(&pred, &t, &FocalConfig::default()),
            Err(Error::PredictionOutOfRange { .. })
        ));
    }

    #[test]
    fn focal_decreases_toward_targets() {
        // Moving predictions toward (positives -> 1, negatives -> 0) along a
        // line never increases the loss.
        let boxes = [(0usize, BoundingBox::new(8.0, 8.0, 24.0, 24.0).unwrap())];
        let t = encode_gaussian_targets(1, &boxes, 32, 32, 16, SigmaMode::Adaptive).unwrap();
        let cfg = FocalConfig::default();
        let mut prev = f64::INFINITY;
        for k in 0..=10 {
            let a = k as f64 / 10.0;
            let pred = t.heatmaps.map(|h| {
                let goal = if h > cfg.gamma { 1.0 - 1e-9 } else { 1e-9 };
                (1.0 - a) * 0.5 + a * goal
            });
            let (loss, _) = focal_loss(&pred, &t, &cfg).unwrap();
            assert!(loss <= prev + 1e-12, "loss rose from {prev} to {loss}");
            assert!(loss >= 0.0);
            prev = loss;
        }
    }

    #[test]
    fn giou_hand_cases() {
        let a = BoundingBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
        assert_eq!(giou(&a, &a).unwrap(), 1.0);

        let b = BoundingBox::new(1.0, 1.0, 3.0, 3.0).unwrap();
        // I = 1, U = 7, C = 9: 1/7 - 2/9.
        assert_relative_eq!(
            giou(&a, &b).unwrap(),
            1.0 / 7.0 - 2.0 / 9.0,
            max_relative = 1e-12
        );
        assert_relative_eq!(giou(&a, &b).unwrap(), -0.07937, max_relative = 1e-4);

        let c = BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let d = BoundingBox::new(2.0, 2.0, 3.0, 3.0).unwrap();
        assert_relative_eq!(giou(&c, &d).unwrap(), -7.0 / 9.0, max_relative = 1e-12);

        // Symmetry and the GIoU <= IoU bound.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let rb = |rng: &mut ChaCha8Rng| {
                let x1 = rng.gen_range(0.0..8.0);
                let y1 = rng.gen_range(0.0..8.0);
                BoundingBox::new(
                    x1,
                    y1,
                    x1 + rng.gen_range(0.1..6.0),
                    y1 + rng.gen_range(0.1..6.0),
                )
                .unwrap()
            };
            let (p, q) = (rb(&mut rng), rb(&mut rng));
            let g = giou(&p, &q).unwrap();
            assert_relative_eq!(g, giou(&q, &p).unwrap(), max_relative = 1e-12);
            assert!(g <= p.iou(&q) + 1e-12);
            assert!(g > -1.0 && g <= 1.0);
        }

        let z = BoundingBox::new(1.0, 1.0, 1.0, 1.0).unwrap();
        assert!(matches!(giou(&z, &z), Err(Error::DegenerateBox { .. })));
    }

    #[test]
    fn giou_loss_zero_at_exact_log_targets() {
        let boxes = [(0usize, BoundingBox::new(6.0, 4.0, 26.0, 24.0).unwrap())];
        let t = encode_gaussian_targets(1, &boxes, 32, 32, 16, SigmaMode::Adaptive).unwrap();
        // Raw = log of exact target distances on masked cells (targets can be
        // zero at box-edge cells, so nudge by a hair and allow the tolerance).
        let mut raw = Tensor::<f64>::zeros(vec![1, 4, 16, 16]).unwrap();
        let plane = 256;
        for i in 0..plane {
            if t.annotation_mask.data()[i] == 1.0 {
                for c in 0..4 {
                    let d = t.size_targets.data()[c * plane + i].max(1e-9);
                    raw.data_mut()[c * plane + i] = d.ln();
                }
            }
        }
        let (loss, grad) = giou_loss(&raw, &t).unwrap();
        assert!(loss.abs() < 1e-6, "loss {loss}");
        // Gradient vanishes outside the mask.
        for i in 0..plane {
            if t.annotation_mask.data()[i] == 0.0 {
                for c in 0..4 {
                    assert_eq!(grad.data()[c * plane + i], 0.0);
                }
            }
        }
    }

    #[test]
    fn giou_loss_disjoint_geometry_matches_direct_giou() {
        // One masked cell at (0, 0) whose stored targets reconstruct the far
        // box (2, 2, 3, 3); the prediction decodes to a box around the cell,
        // disjoint from it. The per-cell loss must equal 1 - giou(...).
        let mut targets = GaussianTargets {
            heatmaps: Tensor::zeros(vec![1, 4, 4]).unwrap(),
            size_targets: Tensor::zeros(vec![1, 4, 4, 4]).unwrap(),
            annotation_mask: Tensor::zeros(vec![1, 4, 4]).unwrap(),
            centers: vec![EncodedCenter {
                frame: 0,
                x: 2,
                y: 2,
                sigma: 1.0,
            }],
            map_size: 4,
        };
        targets.annotation_mask.set(&[0, 0, 0], 1.0);
        targets.size_targets.set(&[0, 0, 0, 0], -2.0);
        targets.size_targets.set(&[0, 1, 0, 0], -2.0);
        targets.size_targets.set(&[0, 2, 0, 0], 3.0);
        targets.size_targets.set(&[0, 3, 0, 0], 3.0);

        let mut raw = Tensor::<f64>::zeros(vec![1, 4, 4, 4]).unwrap();
        for c in 0..4 {
            raw.set(&[0, c, 0, 0], 0.5f64.ln());
        }
        let (loss, _) = giou_loss(&raw, &targets).unwrap();
        let pred = BoundingBox::new(-0.5, -0.5, 0.5, 0.5).unwrap();
        let gt = BoundingBox::new(2.0, 2.0, 3.0, 3.0).unwrap();
        let expected = 1.0 - giou(&pred, &gt).unwrap();
        assert_relative_eq!(loss, expected, max_relative = 1e-12);
        assert!(loss > 1.0);
    }

    #[test]
    fn giou_loss_gradient_matches_finite_differences() {
        let boxes = [(0usize, BoundingBox::new(6.0, 4.0, 22.0, 20.0).unwrap())];
        let t = encode_gaussian_targets(1, &boxes, 32, 32, 8, SigmaMode::Adaptive).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let raw = Tensor::<f64>::random_uniform(vec![1, 4, 8, 8], -0.5, 1.0, &mut rng).unwrap();
        let (_, grad) = giou_loss(&raw, &t).unwrap();
        let step = 1e-6;
        for i in (0..raw.len()).step_by(7) {
            let mut plus = raw.clone();
            plus.data_mut()[i] += step;
            let mut minus = raw.clone();
            minus.data_mut()[i] -= step;
            let fd = (giou_loss(&plus, &t).unwrap().0 - giou_loss(&minus, &t).unwrap().0)
                / (2.0 * step);
            let g = grad.data()[i];
            let rel = (g - fd).abs() / f64::max(1e-8, g.abs() + fd.abs());
            assert!(rel < 1e-4, "index {i}: analytic {g} vs fd {fd}");
        }
    }

    #[test]
    fn decode_recovers_encoded_boxes() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for trial in 0..30 {
            // Boxes spanning >= 4 cells per side at L = 16 on a 64x64 frame
            // (1 cell = 4 pixels).
            let w_cells = rng.gen_range(4.0..10.0);
            let h_cells = rng.gen_range(4.0..10.0);
            let x1 = rng.gen_range(0.0..(15.9 - w_cells)) * 4.0;
            let y1 = rng.gen_range(0.0..(15.9 - h_cells)) * 4.0;
            let b = BoundingBox::new(x1, y1, x1 + w_cells * 4.0, y1 + h_cells * 4.0).unwrap();
            let t =
                encode_gaussian_targets(1, &[(0, b)], 64, 64, 16, SigmaMode::Adaptive).unwrap();

            // Use the targets themselves as predictions: heatmap as h-hat,
            // log-targets as raw sizes.
            let raw = log_targets(&t);
            let pred = SpatialPrediction::new(t.heatmaps.clone(), raw).unwrap();
            let decoded = decode_boxes(&pred, 64, 64);
            assert_eq!(decoded.len(), 1);
            let c = t.centers[0];
            let iou = decoded[0].bbox.iou(&b);
            assert!(iou >= 0.85, "trial {trial}: IoU {iou} for box {b:?}");
            // The decoded argmax must be the encoded center cell.
            let heat = &pred.heatmaps.data()[..256];
            let best = heat
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!((best % 16, best / 16), (c.x, c.y));
        }
    }

    fn log_targets(t: &GaussianTargets) -> Tensor<f64> {
        let plane = t.map_size * t.map_size;
        let mut raw = Tensor::<f64>::zeros(t.size_targets.shape().to_vec()).unwrap();
        for f in 0..t.num_frames() {
            for i in 0..plane {
                if t.annotation_mask.data()[f * plane + i] == 1.0 {
                    for c in 0..4 {
                        let d = t.size_targets.data()[(f * 4 + c) * plane + i].max(1e-9);
                        raw.data_mut()[(f * 4 + c) * plane + i] = d.ln();
                    }
                }
            }
        }
        raw
    }

    #[test]
    fn decode_is_exact_for_grid_aligned_boxes() {
        // Corners at multiples of 4 pixels map to exact cell coordinates and
        // the midpoint lands exactly on a cell: lossless round trip.
        let b = BoundingBox::new(8.0, 8.0, 40.0, 24.0).unwrap();
        let t = encode_gaussian_targets(1, &[(0, b)], 64, 64, 16, SigmaMode::Adaptive).unwrap();
        let pred = SpatialPrediction::new(t.heatmaps.clone(), log_targets(&t)).unwrap();
        let decoded = decode_boxes(&pred, 64, 64);
        assert_relative_eq!(decoded[0].bbox.iou(&b), 1.0, max_relative = 1e-9);
    }

    #[test]
    fn decode_tie_breaks_to_first_cell() {
        let pred = SpatialPrediction::new(
            Tensor::filled(vec![1, 4, 4], 0.25f64).unwrap(),
            Tensor::zeros(vec![1, 4, 4, 4]).unwrap(),
        )
        .unwrap();
        let decoded = decode_boxes(&pred, 16, 16);
        // Peak at (0, 0); distances exp(0) = 1 cell, scaled by 4 px/cell.
        assert_eq!(decoded[0].peak_score, 0.25);
        assert_eq!(decoded[0].bbox, BoundingBox::new(0.0, 0.0, 4.0, 4.0).unwrap());
    }

    #[test]
    fn head_forward_zero_weights_and_shapes() {
        let m = Tensor::<f64>::filled(vec![3, 2, 4, 4], 0.7).unwrap();
        let w = SpatialHeadWeights::zeros(3, 16).unwrap();
        let pred = spatial_head_forward(&m, &w).unwrap();
        assert_eq!(pred.heatmaps.shape(), [2, 16, 16]);
        assert_eq!(pred.size_raw.shape(), [2, 4, 16, 16]);
        assert!(pred.heatmaps.data().iter().all(|&v| v == 0.5));
        assert!(pred.size_raw.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_forward_matches_per_cell_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let m = Tensor::<f64>::random_uniform(vec![3, 2, 4, 4], -1.0, 1.0, &mut rng).unwrap();
        let w = SpatialHeadWeights::random(3, 8, &mut rng).unwrap();
        let pred = spatial_head_forward(&m, &w).unwrap();

        for (ti, frame) in reshape_frames(&m).unwrap().iter().enumerate() {
            let up = upsample_bilinear(frame, 8, 8).unwrap();
            for y in 0..8 {
                for x in 0..8 {
                    let mut acc = w.heat.bias().data()[0];
                    for c in 0..3 {
                        acc += w.heat.weights().get(&[0, c, 0, 0]) * up.get(&[c, y, x]);
                    }
                    let expect = 1.0 / (1.0 + (-acc).exp());
                    assert_relative_eq!(
                        pred.heatmaps.get(&[ti, y, x]),
                        expect,
                        max_relative = 1e-9
                    );
                    for ch in 0..4 {
                        let mut acc = w.size.bias().data()[ch];
                        for c in 0..3 {
                            acc += w.size.weights().get(&[ch, c, 0, 0]) * up.get(&[c, y, x]);
                        }
                        assert_relative_eq!(
                            pred.size_raw.get(&[ti, ch, y, x]),
                            acc,
                            max_relative = 1e-9
                        );
                    }
                }
            }
        }
    }
}
