//! Frozen multi-scale feature extractor and exemplar ROI pooling.
//!
//! The backbone is a three-stage convolutional stack whose weights are drawn
//! once from a seeded generator and never trained. Each stage is a 3x3
//! correlation (no bias), ReLU and 2x2 average pooling. All stage outputs are
//! resized to the feature grid and concatenated along channels.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::autodiff::resize_tensor;
use crate::error::{Error, Result};
use crate::raster;
use crate::tensor::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Axis-aligned box in image coordinates: `[top, left, bottom, right]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoxRegion {
    pub top: f64,
    pub left: f64,
    pub bottom: f64,
    pub right: f64,
}

impl From<[f64; 4]> for BoxRegion {
    fn from([top, left, bottom, right]: [f64; 4]) -> Self {
        BoxRegion {
            top,
            left,
            bottom,
            right,
        }
    }
}

impl From<BoxRegion> for [f64; 4] {
    fn from(b: BoxRegion) -> Self {
        [b.top, b.left, b.bottom, b.right]
    }
}

impl BoxRegion {
    pub fn new(top: f64, left: f64, bottom: f64, right: f64) -> Self {
        BoxRegion {
            top,
            left,
            bottom,
            right,
        }
    }

    pub fn contains(&self, row: f64, col: f64) -> bool {
        row >= self.top && row <= self.bottom && col >= self.left && col <= self.right
    }

    /// Positive area and fully inside an `height x width` image.
    pub fn is_valid_in(&self, height: usize, width: usize) -> bool {
        let finite = [self.top, self.left, self.bottom, self.right]
            .iter()
            .all(|v| v.is_finite());
        finite
            && self.top >= 0.0
            && self.left >= 0.0
            && self.bottom <= height as f64
            && self.right <= width as f64
            && self.bottom > self.top
            && self.right > self.left
    }
}

/// One annotated image: raster, object centers and exemplar boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    /// `[C_I, H_I, W_I]` with values in `[0, 1]`.
    pub image: Tensor,
    /// Object centers as `(row, col)`.
    pub dots: Vec<(f64, f64)>,
    pub boxes: Vec<BoxRegion>,
    pub category_id: u32,
}

impl ImageSample {
    pub fn new(
        image: Tensor,
        dots: Vec<(f64, f64)>,
        boxes: Vec<BoxRegion>,
        category_id: u32,
    ) -> Result<Self> {
        let s = ImageSample {
            image,
            dots,
            boxes,
            category_id,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn validate(&self) -> Result<()> {
        if self.image.rank() != 3 {
            return Err(Error::Input(format!(
                "image must be [C,H,W], got {:?}",
                self.image.shape()
            )));
        }
        if self.image.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Input("image values must lie in [0, 1]".into()));
        }
        let (h, w) = (self.height() as f64, self.width() as f64);
        if let Some(d) = self
            .dots
            .iter()
            .find(|(r, c)| !(0.0..=h).contains(r) || !(0.0..=w).contains(c))
        {
            return Err(Error::Input(format!("dot {d:?} lies outside the image")));
        }
        validate_boxes(&self.boxes, self.height(), self.width())
    }
}

pub(crate) fn validate_boxes(boxes: &[BoxRegion], height: usize, width: usize) -> Result<()> {
    if boxes.is_empty() {
        return Err(Error::Input("at least one exemplar box is required".into()));
    }
    if let Some(b) = boxes.iter().find(|b| !b.is_valid_in(height, width)) {
        return Err(Error::Input(format!(
            "exemplar box {:?} is empty or outside the {height}x{width} image",
            <[f64; 4]>::from(*b)
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Channels of the input image (1 for the synthetic grayscale data).
    pub input_channels: usize,
    pub stage_channels: Vec<usize>,
    pub seed: u64,
    /// Input image side `H_I = W_I`.
    pub image_size: usize,
    /// Feature grid side `H = W`.
    pub feature_size: usize,
    /// Pooled exemplar size `[He, We]`.
    pub exemplar_size: [usize; 2],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            input_channels: 1,
            stage_channels: vec![8, 16, 32],
            seed: 0,
            image_size: 128,
            feature_size: 32,
            exemplar_size: [3, 3],
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let [he, we] = self.exemplar_size;
        if he == 0 || we == 0 || he % 2 == 0 || we % 2 == 0 {
            return Err(Error::Config(format!(
                "exemplar size {he}x{we} must be odd"
            )));
        }
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return Err(Error::Config("stage channels must be positive".into()));
        }
        if self.input_channels == 0 {
            return Err(Error::Config("input channels must be positive".into()));
        }
        let reduction = 1usize << self.stage_channels.len();
        if self.image_size == 0 || !self.image_size.is_multiple_of(reduction) {
            return Err(Error::Config(format!(
                "image size {} is not divisible by the backbone reduction {reduction}",
                self.image_size
            )));
        }
        if self.feature_size == 0
            || !self.image_size.is_multiple_of(self.feature_size)
            || !(self.image_size / self.feature_size).is_power_of_two()
        {
            return Err(Error::Config(format!(
                "image size {} / feature size {} must be a power of two",
                self.image_size, self.feature_size
            )));
        }
        Ok(())
    }

    /// Total feature channels `C`.
    pub fn feature_channels(&self) -> usize {
        self.stage_channels.iter().sum()
    }
}

/// Frozen convolutional feature extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    config: BackboneConfig,
    /// `[C_out, C_in, 3, 3]` per stage.
    stages: Vec<Tensor>,
}

/// Builds the frozen backbone. Weights are fan-in scaled uniform draws from
/// a generator seeded with `config.seed`.
pub fn build_frozen_backbone(config: &BackboneConfig) -> Result<Backbone> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut stages = Vec::with_capacity(config.stage_channels.len());
    let mut c_in = config.input_channels;
    for &c_out in &config.stage_channels {
        let fan_in = (c_in * 9) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let data: Vec<f64> = (0..c_out * c_in * 9)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        stages.push(Tensor::new(&[c_out, c_in, 3, 3], data)?);
        c_in = c_out;
    }
    Ok(Backbone {
        config: config.clone(),
        stages,
    })
}

impl Backbone {
    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn stage_weights(&self) -> &[Tensor] {
        &self.stages
    }

    /// Always false: the backbone is never trained.
    pub fn is_trainable(&self) -> bool {
        false
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let s = self.config.image_size;
        let expected = [self.config.input_channels, s, s];
        if image.shape() != expected {
            return Err(Error::shape("extract_image_features", image.shape(), &expected));
        }
        Ok(())
    }

    /// Output of every stage, each at half the previous resolution.
    pub fn stage_outputs(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        self.check_image(image)?;
        let mut x = image.clone();
        let mut outs = Vec::with_capacity(self.stages.len());
        for w in &self.stages {
            let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let g = ConvGeom {
                k: w.shape()[0],
                c,
                h,
                w: wd,
                kh: 3,
                kw: 3,
            };
            let mut conv = vec![0.0; g.k * h * wd];
            kernels::correlate(g, x.data(), w.data(), &mut conv);
            conv.iter_mut().for_each(|v| *v = v.max(0.0));
            let pooled = kernels::avg_pool2(&conv, g.k, h, wd);
            x = Tensor::from_parts(vec![g.k, h / 2, wd / 2], pooled);
            outs.push(x.clone());
        }
        Ok(outs)
    }

    /// The multi-layer image feature map `[C, H, W]`.
    pub fn extract_image_features(&self, image: &Tensor) -> Result<Tensor> {
        let outs = self.stage_outputs(image)?;
        let side = self.config.feature_size;
        let resized: Vec<Tensor> = outs.iter().map(|o| resize_tensor(o, side, side)).collect();
        Tensor::concat0(&resized)
    }

    /// Pools exemplar features from `features` using this backbone's image
    /// and exemplar geometry.
    pub fn pool_exemplars(&self, features: &Tensor, boxes: &[BoxRegion]) -> Result<Tensor> {
        let s = self.config.image_size;
        pool_exemplar_features(features, boxes, (s, s), self.config.exemplar_size)
    }
}

/// Integer feature-cell ranges `[start, end)` of each pooled bin along one
/// axis, for a box edge pair given in image coordinates.
fn bin_ranges(lo: f64, hi: f64, scale: f64, extent: usize, bins: usize) -> (Vec<(usize, usize)>, bool) {
    let mut start = ((lo * scale).floor().max(0.0) as usize).min(extent);
    let mut end = ((hi * scale).ceil().max(0.0) as usize).min(extent);
    let degenerate = end <= start;
    if degenerate {
        start = start.min(extent - 1);
        end = start + 1;
    }
    let len = end - start;
    let ranges = (0..bins)
        .map(|p| {
            let s = start + p * len / bins;
            let e = start + ((p + 1) * len).div_ceil(bins);
            (s, e.max(s + 1))
        })
        .collect();
    (ranges, degenerate)
}

/// Max ROI pooling; returns the pooled `[K,C,He,We]` tensor and, for every
/// output element, the flat input index it was taken from (first maximum in
/// row-major order).
fn roi_max_pool(
    features: &Tensor,
    boxes: &[BoxRegion],
    image_hw: (usize, usize),
    pooled: [usize; 2],
) -> Result<(Tensor, Vec<usize>)> {
    if features.rank() != 3 {
        return Err(Error::contract(
            "pool_exemplar_features",
            format!("features must be [C,H,W], got {:?}", features.shape()),
        ));
    }
    validate_boxes(boxes, image_hw.0, image_hw.1)?;
    let (c, h, w) = (features.shape()[0], features.shape()[1], features.shape()[2]);
    let [ph, pw] = pooled;
    let sy = h as f64 / image_hw.0 as f64;
    let sx = w as f64 / image_hw.1 as f64;
    let fd = features.data();
    let mut out = Vec::with_capacity(boxes.len() * c * ph * pw);
    let mut arg = Vec::with_capacity(out.capacity());
    for b in boxes {
        let (rows, dr) = bin_ranges(b.top, b.bottom, sy, h, ph);
        let (cols, dc) = bin_ranges(b.left, b.right, sx, w, pw);
        if dr || dc {
            log::warn!(
                "exemplar box {:?} collapses below one feature cell; using a 1x1 region",
                <[f64; 4]>::from(*b)
            );
        }
        for ch in 0..c {
            let base = ch * h * w;
            for &(r0, r1) in &rows {
                for &(c0, c1) in &cols {
                    let mut best = usize::MAX;
                    let mut best_v = f64::NEG_INFINITY;
                    for y in r0..r1 {
                        for x in c0..c1 {
                            let i = base + y * w + x;
                            if best == usize::MAX || fd[i] > best_v {
                                best = i;
                                best_v = fd[i];
                            }
                        }
                    }
                    out.push(best_v);
                    arg.push(best);
                }
            }
        }
    }
    Ok((Tensor::from_parts(vec![boxes.len(), c, ph, pw], out), arg))
}

/// ROI max pooling of exemplar boxes (image coordinates) from a `[C,H,W]`
/// feature map into `[K,C,He,We]`.
pub fn pool_exemplar_features(
    features: &Tensor,
    boxes: &[BoxRegion],
    image_hw: (usize, usize),
    pooled: [usize; 2],
) -> Result<Tensor> {
    roi_max_pool(features, boxes, image_hw, pooled).map(|(t, _)| t)
}

/// Tracked ROI pooling; gradients flow to the selected maxima.
pub fn pool_exemplar_features_var<'t>(
    features: Var<'t>,
    boxes: &[BoxRegion],
    image_hw: (usize, usize),
    pooled: [usize; 2],
) -> Result<Var<'t>> {
    let f = features.value();
    let (out, arg) = roi_max_pool(&f, boxes, image_hw, pooled)?;
    let in_shape = f.shape().to_vec();
    features
        .tape()
        .record("pool_exemplar_features", out, &[features], move |g, _| {
            let mut gi = vec![0.0; in_shape.iter().product()];
            for (&i, &v) in arg.iter().zip(g.data()) {
                gi[i] += v;
            }
            vec![Some(Tensor::from_parts(in_shape.clone(), gi))]
        })
}

/// Loads a `[C,H,W]` feature map saved as F32R.
pub fn import_external_features(path: impl AsRef<Path>) -> Result<Tensor> {
    let t = raster::read_f32r(path)?;
    if t.rank() != 3 {
        return Err(Error::Load {
            offset: 5,
            msg: format!("expected a [C,H,W] feature map, got shape {:?}", t.shape()),
        });
    }
    Ok(t)
}
