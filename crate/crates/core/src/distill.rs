//! Correlation distillation: correlate image features with every exemplar
//! and normalize the result across exemplars and across space.
//!
//! With `s = sqrt(He * We * C)` and `A` the raw correlation:
//!
//! * exemplar normalization: `A_e = softmax(A / s)` over the exemplar axis;
//! * spatial normalization: `A_s = exp(A / s) / max_yx exp(A / s)`, computed
//!   as `exp(A / s - max_yx(A / s))`;
//! * fused: `A_n = A_e * A_s`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ReduceKind, Var};
use crate::error::Result;
use crate::params::{BoundParams, ParamId, ParamStore};
use crate::raster;
use crate::tensor::Tensor;

/// Which normalizations feed the fused correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormalizationToggles {
    pub exemplar: bool,
    pub spatial: bool,
}

impl Default for NormalizationToggles {
    fn default() -> Self {
        NormalizationToggles {
            exemplar: true,
            spatial: true,
        }
    }
}

/// The layer norm shared by image and exemplar features, plus the
/// correlation scale.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillationParams {
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
    pub scale: f64,
    pub eps: f64,
}

impl DistillationParams {
    pub fn new(store: &mut ParamStore, channels: usize, exemplar_size: [usize; 2], eps: f64) -> Self {
        DistillationParams {
            ln_gamma: store.add("distill.ln.gamma", Tensor::ones(&[channels])),
            ln_beta: store.add("distill.ln.beta", Tensor::zeros(&[channels])),
            scale: correlation_scale(exemplar_size, channels),
            eps,
        }
    }
}

/// `sqrt(He * We * C)`.
pub fn correlation_scale(exemplar_size: [usize; 2], channels: usize) -> f64 {
    ((exemplar_size[0] * exemplar_size[1] * channels) as f64).sqrt()
}

/// `A = LN(f_I) (*) LN(f_e)`: both inputs pass through the same layer norm
/// (over channels at every location) before a same-padded
/// cross-correlation. `f_I` is `[C,H,W]`, `f_e` is `[K,C,He,We]`.
pub fn raw_correlation<'t>(
    f_i: Var<'t>,
    f_e: Var<'t>,
    gamma: Var<'t>,
    beta: Var<'t>,
    eps: f64,
) -> Result<Var<'t>> {
    let img = f_i.layer_norm(gamma, beta, 0, eps)?;
    let ex = f_e.layer_norm(gamma, beta, 1, eps)?;
    img.cross_correlate_2d(ex)
}

pub fn exemplar_normalize<'t>(a: Var<'t>, scale: f64) -> Result<Var<'t>> {
    a.binary(crate::autodiff::BinaryKind::Div, scale)?.softmax(0)
}

pub fn spatial_normalize<'t>(a: Var<'t>, scale: f64) -> Result<Var<'t>> {
    let z = a.binary(crate::autodiff::BinaryKind::Div, scale)?;
    let peak = z.reduce(ReduceKind::Max, &[1, 2], true)?.broadcast_to(&z.shape())?;
    z.sub(peak)?.exp()
}

pub fn fuse_normalizations<'t>(a_e: Var<'t>, a_s: Var<'t>) -> Result<Var<'t>> {
    a_e.mul(a_s)
}

/// Handles to every stage of one distillation pass.
#[derive(Clone, Copy, Debug)]
pub struct Distilled<'t> {
    pub raw: Var<'t>,
    pub exemplar_normalized: Option<Var<'t>>,
    pub spatial_normalized: Option<Var<'t>>,
    pub fused: Var<'t>,
}

impl Distilled<'_> {
    pub fn snapshot(&self) -> CorrelationStack {
        CorrelationStack {
            raw: self.raw.value().as_ref().clone(),
            exemplar_normalized: self.exemplar_normalized.map(|v| v.value().as_ref().clone()),
            spatial_normalized: self.spatial_normalized.map(|v| v.value().as_ref().clone()),
            fused: self.fused.value().as_ref().clone(),
        }
    }
}

/// Full distillation pass. With both normalizations disabled the fused map
/// is the scaled raw correlation `A / s`.
pub fn distill<'t>(
    f_i: Var<'t>,
    f_e: Var<'t>,
    params: &DistillationParams,
    bound: &BoundParams<'t>,
    toggles: NormalizationToggles,
) -> Result<Distilled<'t>> {
    let raw = raw_correlation(
        f_i,
        f_e,
        bound[params.ln_gamma],
        bound[params.ln_beta],
        params.eps,
    )?;
    let en = toggles
        .exemplar
        .then(|| exemplar_normalize(raw, params.scale))
        .transpose()?;
    let sn = toggles
        .spatial
        .then(|| spatial_normalize(raw, params.scale))
        .transpose()?;
    let fused = match (en, sn) {
        (Some(e), Some(s)) => fuse_normalizations(e, s)?,
        (Some(e), None) => e,
        (None, Some(s)) => s,
        (None, None) => raw.binary(crate::autodiff::BinaryKind::Div, params.scale)?,
    };
    Ok(Distilled {
        raw,
        exemplar_normalized: en,
        spatial_normalized: sn,
        fused,
    })
}

/// Value snapshot of one distillation pass, each `[K,H,W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationStack {
    pub raw: Tensor,
    pub exemplar_normalized: Option<Tensor>,
    pub spatial_normalized: Option<Tensor>,
    pub fused: Tensor,
}

impl CorrelationStack {
    /// Writes every present component as F32R plus one PGM per exemplar.
    pub fn export(&self, dir: impl AsRef<Path>, prefix: &str) -> Result<()> {
        let dir = dir.as_ref();
        raster::export_stack(dir, &format!("{prefix}raw"), &self.raw)?;
        if let Some(t) = &self.exemplar_normalized {
            raster::export_stack(dir, &format!("{prefix}exemplar_norm"), t)?;
        }
        if let Some(t) = &self.spatial_normalized {
            raster::export_stack(dir, &format!("{prefix}spatial_norm"), t)?;
        }
        raster::export_stack(dir, &format!("{prefix}fused"), &self.fused)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn scale_is_sqrt_of_volume() {
        assert_eq!(correlation_scale([3, 3], 56), (504f64).sqrt());
    }

    #[test]
    fn single_exemplar_en_is_all_ones() {
        let tape = Tape::new();
        let a = tape.constant(t(&[1, 2, 3], vec![1.0, -3.0, 4.0, 0.5, 9.0, 2.0]));
        let e = exemplar_normalize(a, 2.0).unwrap();
        assert!(e.value().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn equal_maps_split_evenly() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 1, 2], vec![3.0, -1.0, 3.0, -1.0]));
        let e = exemplar_normalize(a, 1.5).unwrap();
        assert!(e.value().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn en_matches_scalar_softmax() {
        // A / s = [0, ln 3] at one position -> [1/4, 3/4].
        let s = 4.0;
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 1, 1], vec![0.0, s * 3f64.ln()]));
        let e = exemplar_normalize(a, s).unwrap().value();
        assert!((e.data()[0] - 0.25).abs() < 1e-12);
        assert!((e.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn sn_edge_cases() {
        let tape = Tape::new();
        let constant = tape.constant(Tensor::full(&[2, 3, 3], 4.2));
        let s = spatial_normalize(constant, 3.0).unwrap();
        assert!(s.value().data().iter().all(|&v| v == 1.0));

        let single = tape.constant(t(&[3, 1, 1], vec![-50.0, 0.0, 800.0]));
        let s = spatial_normalize(single, 1.0).unwrap();
        assert_eq!(s.value().data(), &[1.0, 1.0, 1.0]);

        // A / s = [[0, ln 2]] -> [[0.5, 1.0]].
        let a = tape.constant(t(&[1, 1, 2], vec![0.0, 2.0 * 2f64.ln()]));
        let s = spatial_normalize(a, 2.0).unwrap().value();
        assert!((s.data()[0] - 0.5).abs() < 1e-12);
        assert_eq!(s.data()[1], 1.0);
    }

    #[test]
    fn sn_is_stable_for_large_logits() {
        let tape = Tape::new();
        let a = tape.constant(t(&[1, 1, 3], vec![700.0, -700.0, 699.0]));
        let s = spatial_normalize(a, 1.0).unwrap().value();
        assert!(s.is_finite());
        assert_eq!(s.data()[0], 1.0);
        assert!((s.data()[2] - (-1f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn fuse_identities() {
        let tape = Tape::new();
        let ae = tape.constant(t(&[2, 1, 2], vec![0.2, 0.7, 0.8, 0.3]));
        let ones = tape.constant(Tensor::ones(&[2, 1, 2]));
        let fused = fuse_normalizations(ae, ones).unwrap();
        assert_eq!(*fused.value(), *ae.value());

        let other = tape.constant(Tensor::ones(&[2, 2, 1]));
        assert!(fuse_normalizations(ae, other).is_err());
    }

    #[test]
    fn zero_exemplar_gives_zero_correlation() {
        let tape = Tape::new();
        let fi = tape.constant(Tensor::from_fn(&[4, 5, 5], |i| (i[0] + 2 * i[1] + 3 * i[2]) as f64 % 7.0).unwrap());
        let fe = tape.constant(Tensor::zeros(&[2, 4, 3, 3]));
        let g = tape.constant(Tensor::ones(&[4]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let a = raw_correlation(fi, fe, g, b, 1e-5).unwrap();
        assert!(a.value().data().iter().all(|&v| v == 0.0));
    }
}
