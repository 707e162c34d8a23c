//! Boxes, keypoints and the geometric primitives shared by the decoders,
//! losses and evaluation.
//!
//! Conventions used throughout the crate:
//! - boxes are corner-form `(x1, y1, x2, y2)` in image pixels, `x2 > x1`,
//!   `y2 > y1`;
//! - keypoints follow the 17-point COCO order ([`KEYPOINT_NAMES`]);
//! - normalized keypoints live in the matched box frame, shifted to the
//!   open interval `(-0.5, 0.5)` per axis.

use ndarray::{Array2, Array3, ArrayView3};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tape;

/// Number of keypoints per person.
pub const KEYPOINT_COUNT: usize = 17;

/// COCO keypoint names in canonical index order.
pub const KEYPOINT_NAMES: [&str; KEYPOINT_COUNT] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

/// Skeleton edges (pairs of keypoint indices) for rendering and synthesis.
pub const SKELETON_EDGES: [(usize, usize); 19] = [
    (15, 13),
    (13, 11),
    (16, 14),
    (14, 12),
    (11, 12),
    (5, 11),
    (6, 12),
    (5, 6),
    (5, 7),
    (6, 8),
    (7, 9),
    (8, 10),
    (1, 2),
    (0, 1),
    (0, 2),
    (1, 3),
    (2, 4),
    (3, 5),
    (4, 6),
];

/// Per-keypoint OKS falloff constants (sigma), COCO convention. The
/// effective constant in the OKS exponent is `kappa = 2 * sigma`.
pub const COCO_OKS_SIGMAS: [f64; KEYPOINT_COUNT] = [
    0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072, 0.062, 0.062, 0.107, 0.107,
    0.087, 0.087, 0.089, 0.089,
];

/// Axis-aligned box with strictly positive extent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox<S: Scalar> {
    x1: S,
    y1: S,
    x2: S,
    y2: S,
}

impl<S: Scalar> BBox<S> {
    pub fn new(x1: S, y1: S, x2: S, y2: S) -> Result<Self> {
        for v in [x1, y1, x2, y2] {
            if !v.is_finite() {
                return Err(Error::Geometry(format!(
                    "non-finite box coordinate ({x1}, {y1}, {x2}, {y2})"
                )));
            }
        }
        if x2 <= x1 || y2 <= y1 {
            return Err(Error::Geometry(format!(
                "degenerate box ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    pub fn x1(&self) -> S {
        self.x1
    }
    pub fn y1(&self) -> S {
        self.y1
    }
    pub fn x2(&self) -> S {
        self.x2
    }
    pub fn y2(&self) -> S {
        self.y2
    }

    pub fn width(&self) -> S {
        self.x2 - self.x1
    }

    pub fn height(&self) -> S {
        self.y2 - self.y1
    }

    pub fn area(&self) -> S {
        self.width() * self.height()
    }

    pub fn center(&self) -> (S, S) {
        let half = S::of(0.5);
        ((self.x1 + self.x2) * half, (self.y1 + self.y2) * half)
    }

    pub fn corners(&self) -> [S; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Intersection-over-union with another box, in `[0, 1]`.
    pub fn iou(&self, other: &BBox<S>) -> S {
        let ix = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(S::zero());
        let iy = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(S::zero());
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        inter / union
    }
}

/// Generalized IoU of two valid boxes, in `(-1, 1]`. Equal boxes give 1;
/// far-apart boxes approach -1.
pub fn giou<S: Scalar>(a: &BBox<S>, b: &BBox<S>) -> S {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(S::zero());
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(S::zero());
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    let iou = inter / union;
    let hull_w = a.x2.max(b.x2) - a.x1.min(b.x1);
    let hull_h = a.y2.max(b.y2) - a.y1.min(b.y1);
    let hull = hull_w * hull_h;
    iou - (hull - union) / hull
}

/// [`giou`] over raw corner arrays, validating both boxes first. Model
/// outputs pass through here so degenerate predictions surface as errors.
pub fn giou_corners<S: Scalar>(a: [S; 4], b: [S; 4]) -> Result<S> {
    let a = BBox::new(a[0], a[1], a[2], a[3])?;
    let b = BBox::new(b[0], b[1], b[2], b[3])?;
    Ok(giou(&a, &b))
}

/// COCO visibility flag for one keypoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Visibility {
    /// `v = 0`: not labeled (coordinates meaningless).
    Unlabeled,
    /// `v = 1`: labeled but occluded.
    Occluded,
    /// `v = 2`: labeled and visible.
    Visible,
}

impl Visibility {
    pub fn from_coco(v: i64) -> Result<Self> {
        match v {
            0 => Ok(Visibility::Unlabeled),
            1 => Ok(Visibility::Occluded),
            2 => Ok(Visibility::Visible),
            other => Err(Error::Data(format!("invalid visibility flag {other}"))),
        }
    }

    pub fn to_coco(self) -> i64 {
        match self {
            Visibility::Unlabeled => 0,
            Visibility::Occluded => 1,
            Visibility::Visible => 2,
        }
    }

    /// Whether coordinates for this keypoint are meaningful.
    pub fn labeled(self) -> bool {
        !matches!(self, Visibility::Unlabeled)
    }
}

/// One person's keypoints in image pixels with per-point visibility.
#[derive(Debug, Clone)]
pub struct KeypointSet<S: Scalar> {
    coords: Array2<S>,
    vis: Vec<Visibility>,
}

impl<S: Scalar> KeypointSet<S> {
    pub fn new(coords: Array2<S>, vis: Vec<Visibility>) -> Result<Self> {
        if coords.shape()[1] != 2 {
            return Err(Error::Geometry(format!(
                "keypoint coords must be (K,2), got {:?}",
                coords.shape()
            )));
        }
        if coords.shape()[0] != vis.len() {
            return Err(Error::Geometry(format!(
                "{} keypoints but {} visibility flags",
                coords.shape()[0],
                vis.len()
            )));
        }
        for (k, row) in coords.rows().into_iter().enumerate() {
            if vis[k].labeled() && !(row[0].is_finite() && row[1].is_finite()) {
                return Err(Error::Geometry(format!(
                    "non-finite coordinates for labeled keypoint {k}"
                )));
            }
        }
        Ok(KeypointSet { coords, vis })
    }

    pub fn len(&self) -> usize {
        self.vis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vis.is_empty()
    }

    pub fn coords(&self) -> &Array2<S> {
        &self.coords
    }

    pub fn visibility(&self) -> &[Visibility] {
        &self.vis
    }

    pub fn num_labeled(&self) -> usize {
        self.vis.iter().filter(|v| v.labeled()).count()
    }
}

/// One ground-truth person instance: a validated box, its keypoints, and
/// the object area used by similarity scoring (the box area when no finer
/// segmentation area is available).
#[derive(Debug, Clone)]
pub struct PersonAnnotation<S: Scalar> {
    pub bbox: BBox<S>,
    pub keypoints: KeypointSet<S>,
    pub area: S,
}

impl<S: Scalar> PersonAnnotation<S> {
    /// Annotation whose scoring area is the box area.
    pub fn from_box_area(bbox: BBox<S>, keypoints: KeypointSet<S>) -> Self {
        let area = bbox.area();
        PersonAnnotation {
            bbox,
            keypoints,
            area,
        }
    }
}

/// Keypoints expressed in a box-local frame: each axis mapped so the box
/// spans `(-0.5, 0.5)`. `mask[k]` is true only for labeled keypoints that
/// fall strictly inside the box; those are the trainable targets.
#[derive(Debug, Clone)]
pub struct NormalizedKeypoints<S: Scalar> {
    pub coords: Array2<S>,
    pub mask: Vec<bool>,
}

/// Maps keypoints into the box-local `(-0.5, 0.5)` frame. Labeled keypoints
/// on or outside the box boundary are masked out (the open-interval
/// convention), as are unlabeled ones.
pub fn normalize_keypoints<S: Scalar>(
    kps: &KeypointSet<S>,
    bbox: &BBox<S>,
) -> NormalizedKeypoints<S> {
    let k = kps.len();
    let mut coords = Array2::<S>::zeros((k, 2));
    let mut mask = vec![false; k];
    let half = S::of(0.5);
    let w = bbox.width();
    let h = bbox.height();
    for i in 0..k {
        let x = kps.coords[[i, 0]];
        let y = kps.coords[[i, 1]];
        let nx = (x - bbox.x1) / w - half;
        let ny = (y - bbox.y1) / h - half;
        coords[[i, 0]] = nx;
        coords[[i, 1]] = ny;
        mask[i] = kps.vis[i].labeled() && nx.abs() < half && ny.abs() < half;
    }
    NormalizedKeypoints { coords, mask }
}

/// Inverse of [`normalize_keypoints`]: box-local `(-0.5, 0.5)` coordinates
/// back to image pixels. Applies to every row regardless of masking.
pub fn denormalize_keypoints<S: Scalar>(coords: &Array2<S>, bbox: &BBox<S>) -> Array2<S> {
    assert_eq!(coords.shape()[1], 2, "normalized coords must be (K,2)");
    let half = S::of(0.5);
    let w = bbox.width();
    let h = bbox.height();
    let mut out = coords.clone();
    for mut row in out.rows_mut() {
        row[0] = (row[0] + half) * w + bbox.x1;
        row[1] = (row[1] + half) * h + bbox.y1;
    }
    out
}

/// Object keypoint similarity between predicted coordinates and a labeled
/// ground-truth set, in `[0, 1]`. Only labeled ground-truth keypoints
/// contribute; returns `None` when none are labeled. `area` is the
/// ground-truth object area in square pixels and must be positive.
pub fn oks<S: Scalar>(
    pred: &Array2<S>,
    gt: &KeypointSet<S>,
    area: S,
    sigmas: &[f64],
) -> Option<S> {
    assert_eq!(pred.shape()[0], gt.len(), "oks: keypoint count mismatch");
    assert_eq!(pred.shape()[1], 2, "oks: pred coords must be (K,2)");
    assert_eq!(sigmas.len(), gt.len(), "oks: sigma count mismatch");
    assert!(area > S::zero(), "oks: area must be positive");
    let mut total = S::zero();
    let mut labeled = 0usize;
    let two = S::of(2.0);
    for k in 0..gt.len() {
        if !gt.vis[k].labeled() {
            continue;
        }
        let dx = pred[[k, 0]] - gt.coords[[k, 0]];
        let dy = pred[[k, 1]] - gt.coords[[k, 1]];
        let kappa = S::of(2.0 * sigmas[k]);
        let e = (dx * dx + dy * dy) / (two * area * kappa * kappa);
        total += (-e).exp();
        labeled += 1;
    }
    if labeled == 0 {
        None
    } else {
        Some(total / S::of(labeled as f64))
    }
}

/// Extracts an `out_hw` grid from `feature (C,H,W)` for one image-space box
/// using bilinear sampling; see the op documentation in [`crate::tensor`]
/// for the exact sampling convention. `spatial_scale` converts image pixels
/// to feature coordinates (1/stride); `samples` is the per-axis sampling
/// count per bin.
pub fn roi_align<S: Scalar>(
    feature: ArrayView3<S>,
    bbox: &BBox<S>,
    out_hw: (usize, usize),
    spatial_scale: S,
    samples: usize,
) -> Array3<S> {
    let mut tape = Tape::<S>::new();
    let feat = tape.constant(feature.to_owned().into_dyn());
    let mut boxes = Array2::<S>::zeros((1, 4));
    boxes[[0, 0]] = bbox.x1;
    boxes[[0, 1]] = bbox.y1;
    boxes[[0, 2]] = bbox.x2;
    boxes[[0, 3]] = bbox.y2;
    let b = tape.constant(boxes.into_dyn());
    let out = tape.roi_align(feat, b, spatial_scale, out_hw, samples);
    let v = tape.value(out);
    let (c, oh, ow) = (v.shape()[1], v.shape()[2], v.shape()[3]);
    v.to_shape((c, oh, ow))
        .expect("roi grid shape")
        .to_owned()
}
