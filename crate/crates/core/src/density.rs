//! Density regression head, ground-truth density generation, counting and
//! the training loss.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamId, ParamStore};
use crate::raster;
use crate::tensor::{pairwise_sum, Tensor};

/// A non-negative `[H_I, W_I]` raster whose sum is a count.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap {
    values: Tensor,
}

impl DensityMap {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::contract(
                "DensityMap",
                format!("expected [H,W], got {:?}", values.shape()),
            ));
        }
        if values.data().iter().any(|&v| v < 0.0) {
            return Err(Error::contract("DensityMap", "negative density value"));
        }
        Ok(DensityMap { values })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_tensor(self) -> Tensor {
        self.values
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn count(&self) -> f64 {
        count_from_density(self)
    }

    /// Writes `{stem}.f32r` and `{stem}.pgm` into `dir`.
    pub fn export(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        raster::export_stack(dir, stem, &self.values)
    }
}

pub fn count_from_density(d: &DensityMap) -> f64 {
    d.values.sum()
}

/// Mean squared error over all pixels.
pub fn mse_loss<'t>(pred: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("mse_loss", &pred.shape(), &target.shape()));
    }
    let d = pred.sub(target)?;
    d.mul(d)?.mean_all()
}

/// Adaptive Gaussian kernel rule for ground-truth maps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaussianKernelConfig {
    /// `sigma = factor * nearest_neighbour_distance` before clamping.
    pub factor: f64,
    pub min_sigma: f64,
    pub max_sigma: f64,
    /// Sigma for an image with a single dot.
    pub single_sigma: f64,
    /// Window half-width is `ceil(truncate * sigma)`.
    pub truncate: f64,
}

impl Default for GaussianKernelConfig {
    fn default() -> Self {
        GaussianKernelConfig {
            factor: 0.25,
            min_sigma: 1.0,
            max_sigma: 8.0,
            single_sigma: 2.0,
            truncate: 3.0,
        }
    }
}

impl GaussianKernelConfig {
    /// Per-dot sigma from nearest-neighbour distances.
    pub fn sigmas(&self, dots: &[(f64, f64)]) -> Vec<f64> {
        if dots.len() == 1 {
            return vec![self.single_sigma];
        }
        dots.iter()
            .enumerate()
            .map(|(i, &(r, c))| {
                let nearest = dots
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, &(r2, c2))| ((r - r2).powi(2) + (c - c2).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min);
                (self.factor * nearest).clamp(self.min_sigma, self.max_sigma)
            })
            .collect()
    }
}

/// Sums one truncated, renormalized Gaussian per dot. Pixel `(y, x)` has
/// its center at `(y + 0.5, x + 0.5)`. Every kernel sums to exactly one
/// after clipping to the image, up to rounding.
pub fn generate_gt_density(
    dots: &[(f64, f64)],
    height: usize,
    width: usize,
    kcfg: &GaussianKernelConfig,
) -> Result<DensityMap> {
    for &(r, c) in dots {
        if !(r >= 0.0 && r <= height as f64 && c >= 0.0 && c <= width as f64) {
            return Err(Error::Input(format!(
                "dot ({r}, {c}) lies outside the {height}x{width} image"
            )));
        }
    }
    // Canonical order makes the floating-point accumulation independent of
    // the caller's dot order.
    let mut sorted: Vec<(f64, f64)> = dots.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let sigmas = kcfg.sigmas(&sorted);

    let mut out = vec![0.0; height * width];
    let mut kernel = Vec::new();
    for (&(r, c), &sigma) in sorted.iter().zip(&sigmas) {
        let half = (kcfg.truncate * sigma).ceil() as isize;
        let cy = (r - 0.5).round() as isize;
        let cx = (c - 0.5).round() as isize;
        let y0 = (cy - half).max(0);
        let y1 = (cy + half).min(height as isize - 1);
        let x0 = (cx - half).max(0);
        let x1 = (cx + half).min(width as isize - 1);
        kernel.clear();
        let inv = 1.0 / (2.0 * sigma * sigma);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dy = y as f64 + 0.5 - r;
                let dx = x as f64 + 0.5 - c;
                kernel.push((-(dy * dy + dx * dx) * inv).exp());
            }
        }
        let total = pairwise_sum(&kernel);
        let mut it = kernel.iter();
        for y in y0..=y1 {
            for x in x0..=x1 {
                out[y as usize * width + x as usize] += it.next().unwrap() / total;
            }
        }
    }
    DensityMap::new(Tensor::from_parts(vec![height, width], out))
}

const OUT_GAIN: f64 = 1e-3;

/// One upsampling block of the head.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadBlock {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Regression head: `blocks.len() = log2(H_I / H)` blocks of
/// `{conv3x3, ReLU, bilinear x2}`, then a 1x1 conv to one channel and a
/// final ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub blocks: Vec<HeadBlock>,
    pub out_weight: ParamId,
    pub out_bias: ParamId,
    pub output_size: usize,
}

impl HeadParams {
    /// Channels shrink by half per block (floor), never below `min_channels`.
    /// The output layer starts with small weights and bias `out_bias`, so
    /// the initial map is close to a constant density.
    pub fn new(
        store: &mut ParamStore,
        channels: usize,
        feature_size: usize,
        output_size: usize,
        min_channels: usize,
        out_bias: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if feature_size == 0
            || !output_size.is_multiple_of(feature_size)
            || !(output_size / feature_size).is_power_of_two()
        {
            return Err(Error::Config(format!(
                "density head needs a power-of-two ratio, got {output_size} / {feature_size}"
            )));
        }
        let n_blocks = (output_size / feature_size).trailing_zeros() as usize;
        let mut blocks = Vec::with_capacity(n_blocks);
        let mut c_in = channels;
        for b in 0..n_blocks {
            let c_out = (c_in / 2).max(min_channels);
            blocks.push(HeadBlock {
                weight: store.add(format!("head.{b}.weight"), he_uniform(&[c_out, c_in, 3, 3], rng)),
                bias: store.add(format!("head.{b}.bias"), Tensor::zeros(&[c_out])),
            });
            c_in = c_out;
        }
        Ok(HeadParams {
            blocks,
            out_weight: store.add(
                "head.out.weight",
                he_uniform(&[1, c_in, 1, 1], rng).map(|v| v * OUT_GAIN),
            ),
            out_bias: store.add("head.out.bias", Tensor::full(&[1], out_bias)),
            output_size,
        })
    }

    /// Every head parameter id, biases included.
    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.blocks.iter().flat_map(|b| [b.weight, b.bias]).collect();
        ids.extend([self.out_weight, self.out_bias]);
        ids
    }
}

fn he_uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
}

/// Regresses `[H_I, W_I]` density from a `[C,H,W]` feature map.
pub fn regress_density<'t>(f: Var<'t>, head: &HeadParams, bound: &BoundParams<'t>) -> Result<Var<'t>> {
    let mut x = f;
    for b in &head.blocks {
        let shape = x.shape();
        x = x
            .cross_correlate_2d(bound[b.weight])?
            .add_channel_bias(bound[b.bias])?
            .relu()?
            .bilinear_resize(shape[1] * 2, shape[2] * 2)?;
    }
    let shape = x.shape();
    if shape[1] != head.output_size || shape[2] != head.output_size {
        return Err(Error::shape(
            "regress_density",
            &shape[1..],
            &[head.output_size, head.output_size],
        ));
    }
    x.cross_correlate_2d(bound[head.out_weight])?
        .add_channel_bias(bound[head.out_bias])?
        .relu()?
        .reshape(&[shape[1], shape[2]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use rand::SeedableRng;

    #[test]
    fn single_centered_dot_sums_to_one() {
        let d = generate_gt_density(&[(16.0, 16.0)], 32, 32, &Default::default()).unwrap();
        assert!((d.count() - 1.0).abs() < 1e-12);
        let v = d.values();
        assert_eq!(v.get(&[15, 15]), v.get(&[16, 16]));
    }

    #[test]
    fn corner_dot_renormalized() {
        let d = generate_gt_density(&[(0.0, 0.0)], 20, 20, &Default::default()).unwrap();
        assert!((d.count() - 1.0).abs() < 1e-12);
        let d = generate_gt_density(&[(20.0, 20.0)], 20, 20, &Default::default()).unwrap();
        assert!((d.count() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_dots_give_zero_map() {
        let d = generate_gt_density(&[], 8, 8, &Default::default()).unwrap();
        assert_eq!(d.count(), 0.0);
    }

    #[test]
    fn dot_outside_image_rejected() {
        assert!(generate_gt_density(&[(9.0, 1.0)], 8, 8, &Default::default()).is_err());
    }

    #[test]
    fn sigma_rule() {
        let k = GaussianKernelConfig::default();
        assert_eq!(k.sigmas(&[(3.0, 3.0)]), vec![2.0]);
        assert_eq!(k.sigmas(&[(0.0, 0.0), (0.0, 2.0)]), vec![1.0, 1.0]);
        assert_eq!(k.sigmas(&[(0.0, 0.0), (0.0, 20.0)]), vec![5.0, 5.0]);
        assert_eq!(k.sigmas(&[(0.0, 0.0), (0.0, 100.0)]), vec![8.0, 8.0]);
    }

    #[test]
    fn mse_examples() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::from_fn(&[3, 4], |i| (i[0] * 4 + i[1]) as f64).unwrap());
        let b = tape.constant(a.value().map(|v| v + 1.0));
        assert_eq!(mse_loss(a, a).unwrap().value().item().unwrap(), 0.0);
        assert_eq!(mse_loss(b, a).unwrap().value().item().unwrap(), 1.0);
        let c = tape.constant(Tensor::zeros(&[4, 3]));
        assert!(mse_loss(a, c).is_err());
    }

    #[test]
    fn head_shapes_and_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let head = HeadParams::new(&mut store, 56, 32, 128, 4, 0.0, &mut rng).unwrap();
        assert_eq!(head.blocks.len(), 2);
        assert_eq!(store.get(head.blocks[0].weight).shape(), &[28, 56, 3, 3]);
        assert_eq!(store.get(head.blocks[1].weight).shape(), &[14, 28, 3, 3]);
        assert_eq!(store.get(head.out_weight).shape(), &[1, 14, 1, 1]);

        let mut store = ParamStore::new();
        let head = HeadParams::new(&mut store, 6, 4, 32, 4, 0.0, &mut rng).unwrap();
        let chans: Vec<usize> = head.blocks.iter().map(|b| store.get(b.weight).shape()[0]).collect();
        assert_eq!(chans, vec![4, 4, 4]);

        let tape = Tape::new();
        let bound = store.bind(&tape);
        let f = tape.constant(Tensor::full(&[6, 4, 4], 0.3));
        let d = regress_density(f, &head, &bound).unwrap();
        assert_eq!(d.shape(), vec![32, 32]);
    }

    #[test]
    fn non_power_of_two_ratio_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        assert!(matches!(
            HeadParams::new(&mut store, 8, 32, 96, 4, 0.0, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let head = HeadParams::new(&mut store, 8, 8, 32, 4, 0.0, &mut rng).unwrap();
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let d = regress_density(tape.constant(Tensor::zeros(&[8, 8, 8])), &head, &bound).unwrap();
        assert!(d.value().data().iter().all(|&v| v == 0.0));
    }
}
