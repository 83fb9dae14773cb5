//! Feature refinement: redistribute exemplar features over the image grid
//! weighted by the normalized correlation, fuse them into the image
//! features, and iterate.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::backbone::{pool_exemplar_features_var, BoxRegion};
use crate::distill::{self, CorrelationStack, DistillationParams, NormalizationToggles};
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamId, ParamStore};
use crate::raster;
use crate::tensor::Tensor;

/// How the refinement loop runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineOptions {
    pub iterations: usize,
    pub normalization: NormalizationToggles,
    /// Stamp exemplars with a true convolution (kernel flipped relative to
    /// correlation). When off, the placement is a plain cross-correlation,
    /// which mirrors each patch.
    pub flip: bool,
}

impl Default for RefineOptions {
    fn default() -> Self {
        RefineOptions {
            iterations: 4,
            normalization: NormalizationToggles::default(),
            flip: true,
        }
    }
}

/// Weights of one fusion block `LN(f_I + conv3x3(f_c) + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub conv_weight: ParamId,
    pub conv_bias: ParamId,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
}

impl FusionParams {
    fn new(store: &mut ParamStore, prefix: &str, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (1.0 / (channels * 9) as f64).sqrt();
        let w: Vec<f64> = (0..channels * channels * 9)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        FusionParams {
            conv_weight: store.add(
                format!("{prefix}.conv.weight"),
                Tensor::from_parts(vec![channels, channels, 3, 3], w),
            ),
            conv_bias: store.add(format!("{prefix}.conv.bias"), Tensor::zeros(&[channels])),
            ln_gamma: store.add(format!("{prefix}.ln.gamma"), Tensor::ones(&[channels])),
            ln_beta: store.add(format!("{prefix}.ln.beta"), Tensor::zeros(&[channels])),
        }
    }
}

/// Fusion weights, either one block shared by every iteration or one per
/// iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinementParams {
    blocks: Vec<FusionParams>,
    pub eps: f64,
}

impl RefinementParams {
    pub fn new(
        store: &mut ParamStore,
        channels: usize,
        iterations: usize,
        shared: bool,
        eps: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let blocks = if shared {
            vec![FusionParams::new(store, "refine", channels, rng)]
        } else {
            (0..iterations)
                .map(|t| FusionParams::new(store, &format!("refine.{t}"), channels, rng))
                .collect()
        };
        RefinementParams { blocks, eps }
    }

    pub fn is_shared(&self) -> bool {
        self.blocks.len() == 1
    }

    /// Block used at iteration `t` (0-based).
    pub fn block(&self, t: usize) -> &FusionParams {
        &self.blocks[t.min(self.blocks.len() - 1)]
    }
}

/// `f_c = sum_k place(A_n[k], f_e[k])`, `[K,H,W] x [K,C,He,We] -> [C,H,W]`.
///
/// With `flip` each exemplar patch lands at the weight location in its
/// original orientation; without it the placement kernel is the flipped
/// patch, i.e. ordinary cross-correlation.
pub fn correlated_feature_map<'t>(a_n: Var<'t>, f_e: Var<'t>, flip: bool) -> Result<Var<'t>> {
    let kernels = if flip { f_e } else { f_e.flip_hw()? };
    a_n.convolve_place_2d(kernels)?.sum(&[0], false)
}

/// `f_I' = LN(f_I + conv3x3(f_c) + b)`.
pub fn fuse_refined<'t>(
    f_c: Var<'t>,
    f_i: Var<'t>,
    block: &FusionParams,
    bound: &BoundParams<'t>,
    eps: f64,
) -> Result<Var<'t>> {
    if f_c.shape() != f_i.shape() {
        return Err(Error::shape("fuse_refined", &f_c.shape(), &f_i.shape()));
    }
    let conv = f_c
        .cross_correlate_2d(bound[block.conv_weight])?
        .add_channel_bias(bound[block.conv_bias])?;
    f_i.add(conv)?
        .layer_norm(bound[block.ln_gamma], bound[block.ln_beta], 0, eps)
}

/// Re-pooling geometry: when given, exemplar features are pooled afresh
/// from each iteration's input map instead of staying fixed.
#[derive(Clone, Debug, PartialEq)]
pub struct Repool {
    pub boxes: Vec<BoxRegion>,
    pub image_hw: (usize, usize),
    pub pooled: [usize; 2],
}

/// Per-iteration snapshots.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IterationTrace {
    pub correlations: Vec<CorrelationStack>,
    /// Refined feature map after each iteration.
    pub features: Vec<Tensor>,
}

impl IterationTrace {
    pub fn len(&self) -> usize {
        self.correlations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.correlations.is_empty()
    }

    /// Writes `iter{t}_*` correlation rasters and `iter{t}_features.f32r`.
    pub fn export(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for (t, (stack, feat)) in self.correlations.iter().zip(&self.features).enumerate() {
            stack.export(dir, &format!("iter{}_", t + 1))?;
            raster::write_f32r(dir.join(format!("iter{}_features.f32r", t + 1)), feat)?;
        }
        Ok(())
    }
}

/// Output of [`refine_iteratively`].
#[derive(Debug)]
pub struct Refined<'t> {
    pub features: Var<'t>,
    /// Fused correlation `A_n` of the last iteration.
    pub last_correlation: Var<'t>,
    pub trace: Option<IterationTrace>,
}

fn at_iteration<T>(t: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite(msg) => Error::Numerical {
            stage: "refinement iteration",
            index: t + 1,
            msg,
        },
        other => other,
    })
}

/// Runs `options.iterations` rounds of distill-then-fuse starting from
/// `f_i`. A non-finite intermediate aborts with the 1-based iteration index.
#[allow(clippy::too_many_arguments)]
pub fn refine_iteratively<'t>(
    f_i: Var<'t>,
    f_e: Var<'t>,
    options: &RefineOptions,
    params: &RefinementParams,
    distill_params: &DistillationParams,
    bound: &BoundParams<'t>,
    repool: Option<&Repool>,
    trace: bool,
) -> Result<Refined<'t>> {
    if options.iterations == 0 {
        return Err(Error::Config("refinement needs at least one iteration".into()));
    }
    let mut record = trace.then(IterationTrace::default);
    let mut current = f_i;
    let mut last = None;
    for t in 0..options.iterations {
        let step = || -> Result<(Var<'t>, distill::Distilled<'t>)> {
            let exemplars = match repool {
                Some(r) if t > 0 => pool_exemplar_features_var(current, &r.boxes, r.image_hw, r.pooled)?,
                _ => f_e,
            };
            let d = distill::distill(current, exemplars, distill_params, bound, options.normalization)?;
            let f_c = correlated_feature_map(d.fused, exemplars, options.flip)?;
            let next = fuse_refined(f_c, current, params.block(t), bound, params.eps)?;
            Ok((next, d))
        };
        let (next, d) = at_iteration(t, step())?;
        if let Some(rec) = record.as_mut() {
            rec.correlations.push(d.snapshot());
            rec.features.push(next.value().as_ref().clone());
        }
        last = Some(d.fused);
        current = next;
    }
    Ok(Refined {
        features: current,
        last_correlation: last.expect("at least one iteration"),
        trace: record,
    })
}
