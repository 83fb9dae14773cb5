//! The full counting model: frozen backbone, correlation distillation,
//! iterative refinement and the density head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{build_frozen_backbone, validate_boxes, Backbone, BackboneConfig, BoxRegion, ImageSample};
use crate::density::{self, generate_gt_density, DensityMap, GaussianKernelConfig, HeadParams};
use crate::distill::DistillationParams;
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamStore};
use crate::refine::{self, IterationTrace, RefineOptions, RefinementParams, Repool};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub refine: RefineOptions,
    /// One fusion block reused by every iteration.
    pub shared_refinement: bool,
    /// Re-pool exemplar features from each refined map.
    pub repool_exemplars: bool,
    pub ln_eps: f64,
    pub head_min_channels: usize,
    /// Initial density per pixel produced by the untrained head.
    pub head_bias_init: f64,
    /// The head regresses `density_scale * D`; predictions are divided by
    /// it again, so counts are unaffected.
    pub density_scale: f64,
    /// Seed for the trainable parameter initialization.
    pub init_seed: u64,
    pub gt_kernel: GaussianKernelConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            refine: RefineOptions::default(),
            shared_refinement: true,
            repool_exemplars: false,
            ln_eps: 1e-5,
            head_min_channels: 4,
            head_bias_init: 1e-3,
            density_scale: 100.0,
            init_seed: 0,
            gt_kernel: GaussianKernelConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.refine.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if !(self.ln_eps > 0.0 && self.ln_eps.is_finite()) {
            return Err(Error::Config("layer norm eps must be positive".into()));
        }
        if !(self.head_bias_init >= 0.0 && self.head_bias_init.is_finite()) {
            return Err(Error::Config("head_bias_init must be finite and non-negative".into()));
        }
        if !(self.density_scale > 0.0 && self.density_scale.is_finite()) {
            return Err(Error::Config("density_scale must be positive".into()));
        }
        if self.head_min_channels == 0 {
            return Err(Error::Config("head_min_channels must be positive".into()));
        }
        Ok(())
    }
}

/// Backbone outputs and targets for one sample, computed once since the
/// backbone never changes.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    /// `[C,H,W]`.
    pub features: Tensor,
    /// `[K,C,He,We]`.
    pub exemplars: Tensor,
    pub boxes: Vec<BoxRegion>,
    /// `[H_I,W_I]` ground-truth density times the density scale.
    pub target: Tensor,
    pub true_count: f64,
}

/// Tape handles produced by one forward pass.
#[derive(Debug)]
pub struct ForwardPass<'t> {
    pub density: Var<'t>,
    /// Fused normalized correlation of the final iteration, `[K,H,W]`.
    pub correlation: Var<'t>,
    pub trace: Option<IterationTrace>,
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub density: DensityMap,
    pub count: f64,
    pub trace: Option<IterationTrace>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CountingModel {
    config: ModelConfig,
    backbone: Backbone,
    params: ParamStore,
    distill: DistillationParams,
    refine: RefinementParams,
    head: HeadParams,
}

impl CountingModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let backbone = build_frozen_backbone(&config.backbone)?;
        let bc = &config.backbone;
        let channels = bc.feature_channels();
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamStore::new();
        let distill = DistillationParams::new(&mut params, channels, bc.exemplar_size, config.ln_eps);
        let refine = RefinementParams::new(
            &mut params,
            channels,
            config.refine.iterations,
            config.shared_refinement,
            config.ln_eps,
            &mut rng,
        );
        let head = HeadParams::new(
            &mut params,
            channels,
            bc.feature_size,
            bc.image_size,
            config.head_min_channels,
            config.head_bias_init * config.density_scale,
            &mut rng,
        )?;
        Ok(CountingModel {
            config,
            backbone,
            params,
            distill,
            refine,
            head,
        })
    }

    /// Rebuilds a model around saved parameters. Names and shapes must match
    /// the layout implied by `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = CountingModel::new(config)?;
        if params.len() != model.params.len() {
            return Err(Error::Config(format!(
                "parameter count {} does not match the model layout ({})",
                params.len(),
                model.params.len()
            )));
        }
        for ((name, value), (expect_name, expect)) in params.iter().zip(model.params.iter()) {
            if name != expect_name || value.shape() != expect.shape() {
                return Err(Error::Config(format!(
                    "parameter {name} {:?} does not match expected {expect_name} {:?}",
                    value.shape(),
                    expect.shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn head(&self) -> &HeadParams {
        &self.head
    }

    pub fn refinement(&self) -> &RefinementParams {
        &self.refine
    }

    pub fn distillation(&self) -> &DistillationParams {
        &self.distill
    }

    /// Runs the frozen backbone and builds the ground-truth density.
    pub fn prepare(&self, sample: &ImageSample) -> Result<PreparedSample> {
        sample.validate()?;
        let features = self.backbone.extract_image_features(&sample.image)?;
        let exemplars = self.backbone.pool_exemplars(&features, &sample.boxes)?;
        let target = generate_gt_density(
            &sample.dots,
            sample.height(),
            sample.width(),
            &self.config.gt_kernel,
        )?
        .into_tensor()
        .map(|v| v * self.config.density_scale);
        Ok(PreparedSample {
            features,
            exemplars,
            boxes: sample.boxes.clone(),
            target,
            true_count: sample.dots.len() as f64,
        })
    }

    /// Records refinement and regression on `tape`. The density output is
    /// in scaled units (see [`ModelConfig::density_scale`]).
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        bound: &BoundParams<'t>,
        prepared: &PreparedSample,
        trace: bool,
    ) -> Result<ForwardPass<'t>> {
        let f_i = tape.constant(prepared.features.clone());
        let f_e = tape.constant(prepared.exemplars.clone());
        let size = self.config.backbone.image_size;
        let repool = self.config.repool_exemplars.then(|| Repool {
            boxes: prepared.boxes.clone(),
            image_hw: (size, size),
            pooled: self.config.backbone.exemplar_size,
        });
        let refined = refine::refine_iteratively(
            f_i,
            f_e,
            &self.config.refine,
            &self.refine,
            &self.distill,
            bound,
            repool.as_ref(),
            trace,
        )?;
        let density = density::regress_density(refined.features, &self.head, bound).map_err(|e| match e {
            Error::NonFinite(msg) => Error::Numerical {
                stage: "density head",
                index: 0,
                msg,
            },
            other => other,
        })?;
        Ok(ForwardPass {
            density,
            correlation: refined.last_correlation,
            trace: refined.trace,
        })
    }

    /// MSE loss against the ground-truth density and its gradient with
    /// respect to every parameter, in store order.
    pub fn loss_and_grads(&self, prepared: &PreparedSample) -> Result<(f64, Vec<Tensor>)> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let pass = self.forward(&tape, &bound, prepared, false)?;
        let target = tape.constant(prepared.target.clone());
        let loss = density::mse_loss(pass.density, target)?;
        let value = loss.value().item()?;
        let grads = tape.backward(loss)?;
        Ok((value, bound.gradients(&grads)))
    }

    /// Loss without building gradients.
    pub fn loss(&self, prepared: &PreparedSample) -> Result<f64> {
        let tape = Tape::new();
        let bound = self.params.bind_frozen(&tape);
        let pass = self.forward(&tape, &bound, prepared, false)?;
        let target = tape.constant(prepared.target.clone());
        density::mse_loss(pass.density, target)?.value().item()
    }

    /// Forward pass on prepared features, returning the density map and,
    /// optionally, per-iteration diagnostics.
    pub fn predict_prepared(&self, prepared: &PreparedSample, trace: bool) -> Result<Prediction> {
        let tape = Tape::new();
        let bound = self.params.bind_frozen(&tape);
        let pass = self.forward(&tape, &bound, prepared, trace)?;
        let inv = 1.0 / self.config.density_scale;
        let density = DensityMap::new(pass.density.value().map(|v| v * inv))?;
        Ok(Prediction {
            count: density.count(),
            density,
            trace: pass.trace,
        })
    }

    /// Counts the objects in `image` that look like the exemplars in `boxes`.
    pub fn predict(&self, image: &Tensor, boxes: &[BoxRegion], trace: bool) -> Result<Prediction> {
        let size = self.config.backbone.image_size;
        let expected = [self.config.backbone.input_channels, size, size];
        if image.shape() != expected {
            return Err(Error::Input(format!(
                "image shape {:?} does not match the configured {:?}",
                image.shape(),
                expected
            )));
        }
        if boxes.is_empty() {
            return Err(Error::Input("at least one exemplar box is required".into()));
        }
        validate_boxes(boxes, size, size)?;
        let features = self.backbone.extract_image_features(image)?;
        let exemplars = self.backbone.pool_exemplars(&features, boxes)?;
        let prepared = PreparedSample {
            features,
            exemplars,
            boxes: boxes.to_vec(),
            target: Tensor::zeros(&[size, size]),
            true_count: 0.0,
        };
        self.predict_prepared(&prepared, trace)
    }

    /// Fused correlation `A_n` of the final iteration, `[K,H,W]`.
    pub fn final_correlation(&self, prepared: &PreparedSample) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.params.bind_frozen(&tape);
        let pass = self.forward(&tape, &bound, prepared, false)?;
        Ok(pass.correlation.value().as_ref().clone())
    }
}
