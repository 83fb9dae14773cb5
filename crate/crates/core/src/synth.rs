//! Deterministic synthetic counting scenes: target objects of one category
//! among distractors of other categories, with dot annotations and
//! exemplar boxes.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BoxRegion, ImageSample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAX_ATTEMPTS: usize = 10_000;
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Disk,
    Square,
    /// Horizontal bar, `2r` wide and `0.8r` tall.
    Bar,
}

impl Shape {
    /// Half extents `(rows, cols)` of the tight box for size `r`.
    pub fn half_extents(self, r: f64) -> (f64, f64) {
        match self {
            Shape::Disk | Shape::Square => (r, r),
            Shape::Bar => (0.4 * r, r),
        }
    }

    fn contains(self, r: f64, dy: f64, dx: f64) -> bool {
        match self {
            Shape::Disk => dy * dy + dx * dx <= r * r,
            Shape::Square => dy.abs() <= r && dx.abs() <= r,
            Shape::Bar => dy.abs() <= 0.4 * r && dx.abs() <= r,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategorySpec {
    pub id: u32,
    pub shape: Shape,
    /// Inclusive intensity band `[lo, hi]`.
    pub intensity: [f64; 2],
    /// Size range `[lo, hi]`; for disks and squares this is the radius or
    /// half side.
    pub size: [f64; 2],
}

impl CategorySpec {
    fn validate(&self) -> Result<()> {
        let [i0, i1] = self.intensity;
        let [s0, s1] = self.size;
        if !(0.0 <= i0 && i0 <= i1 && i1 <= 1.0) {
            return Err(Error::Config(format!(
                "category {}: intensity band {:?} must lie in [0, 1]",
                self.id, self.intensity
            )));
        }
        if !(0.5 <= s0 && s0 <= s1 && s1.is_finite()) {
            return Err(Error::Config(format!(
                "category {}: size range {:?} is invalid",
                self.id, self.size
            )));
        }
        Ok(())
    }
}

/// The three categories used by the desk-scale benchmark.
pub fn default_categories() -> Vec<CategorySpec> {
    vec![
        CategorySpec {
            id: 0,
            shape: Shape::Disk,
            intensity: [0.8, 0.95],
            size: [2.5, 3.5],
        },
        CategorySpec {
            id: 1,
            shape: Shape::Square,
            intensity: [0.45, 0.6],
            size: [2.5, 3.0],
        },
        CategorySpec {
            id: 2,
            shape: Shape::Bar,
            intensity: [0.65, 0.8],
            size: [4.0, 5.0],
        },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub image_size: usize,
    pub target: CategorySpec,
    pub distractors: Vec<CategorySpec>,
    /// Inclusive range.
    pub target_count: [usize; 2],
    /// Inclusive range.
    pub distractor_count: [usize; 2],
    /// Lower bound on center distance; objects additionally never overlap.
    pub min_distance: f64,
    /// Per-pixel uniform noise amplitude.
    pub noise: f64,
    pub background: f64,
    /// Number of exemplar boxes `K`.
    pub exemplars: usize,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        self.target.validate()?;
        for d in &self.distractors {
            d.validate()?;
        }
        let [t0, t1] = self.target_count;
        let [d0, d1] = self.distractor_count;
        if t0 > t1 || d0 > d1 {
            return Err(Error::Config("count ranges must satisfy lo <= hi".into()));
        }
        if d1 > 0 && self.distractors.is_empty() {
            return Err(Error::Config("distractor count > 0 but no distractor categories".into()));
        }
        if self.exemplars == 0 || self.exemplars > t0 {
            return Err(Error::Config(format!(
                "need 1 <= exemplars ({}) <= minimum target count ({t0})",
                self.exemplars
            )));
        }
        if !(self.min_distance >= 1.0 && self.min_distance.is_finite()) {
            return Err(Error::Config("min_distance must be at least 1 pixel".into()));
        }
        if !(0.0..=1.0).contains(&self.noise) || !(0.0..=1.0).contains(&self.background) {
            return Err(Error::Config("noise and background must lie in [0, 1]".into()));
        }
        let side = self.image_size as f64;
        for c in std::iter::once(&self.target).chain(&self.distractors) {
            let (hy, hx) = c.shape.half_extents(c.size[1]);
            if 2.0 * hy + 2.0 >= side || 2.0 * hx + 2.0 >= side {
                return Err(Error::Config(format!(
                    "category {} does not fit in a {side} pixel image",
                    c.id
                )));
            }
        }
        Ok(())
    }
}

/// One rendered object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacedObject {
    pub category: u32,
    pub shape: Shape,
    pub center: (f64, f64),
    pub size: f64,
    pub intensity: f64,
}

impl PlacedObject {
    pub fn tight_box(&self) -> BoxRegion {
        let (hy, hx) = self.shape.half_extents(self.size);
        let (r, c) = self.center;
        BoxRegion::new(r - hy, c - hx, r + hy, c + hx)
    }

    /// Radius of the circle through the tight box corners.
    fn reach(&self) -> f64 {
        let (hy, hx) = self.shape.half_extents(self.size);
        hy.hypot(hx)
    }
}

/// A generated scene with its full layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub sample: ImageSample,
    pub targets: Vec<PlacedObject>,
    pub distractors: Vec<PlacedObject>,
}

fn draw(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

fn place(
    rng: &mut ChaCha8Rng,
    spec: &SceneSpec,
    cat: &CategorySpec,
    placed: &[PlacedObject],
) -> Result<PlacedObject> {
    let side = spec.image_size as f64;
    for _ in 0..MAX_ATTEMPTS {
        let size = draw(rng, cat.size);
        let (hy, hx) = cat.shape.half_extents(size);
        let r = rng.gen_range(hy + 1.0..side - hy - 1.0);
        let c = rng.gen_range(hx + 1.0..side - hx - 1.0);
        let obj = PlacedObject {
            category: cat.id,
            shape: cat.shape,
            center: (r, c),
            size,
            intensity: 0.0,
        };
        let clear = placed.iter().all(|p| {
            let d = (p.center.0 - r).hypot(p.center.1 - c);
            d >= spec.min_distance.max(p.reach() + obj.reach())
        });
        if clear {
            return Ok(PlacedObject {
                intensity: draw(rng, cat.intensity),
                ..obj
            });
        }
    }
    Err(Error::Generation(format!(
        "could not place an object of category {} after {MAX_ATTEMPTS} attempts; lower the object count or min_distance",
        cat.id
    )))
}

fn render(spec: &SceneSpec, objects: &[PlacedObject], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = spec.image_size;
    let mut img = vec![spec.background; n * n];
    let step = 1.0 / SUPERSAMPLE as f64;
    let total = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for o in objects {
        let (hy, hx) = o.shape.half_extents(o.size);
        let (r, c) = o.center;
        let y0 = (r - hy).floor().max(0.0) as usize;
        let y1 = ((r + hy).ceil() as usize).min(n - 1);
        let x0 = (c - hx).floor().max(0.0) as usize;
        let x1 = ((c + hx).ceil() as usize).min(n - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let mut hits = 0usize;
                for sy in 0..SUPERSAMPLE {
                    let py = y as f64 + (sy as f64 + 0.5) * step;
                    for sx in 0..SUPERSAMPLE {
                        let px = x as f64 + (sx as f64 + 0.5) * step;
                        if o.shape.contains(o.size, py - r, px - c) {
                            hits += 1;
                        }
                    }
                }
                if hits > 0 {
                    let cov = hits as f64 / total;
                    let v = &mut img[y * n + x];
                    *v = *v * (1.0 - cov) + o.intensity * cov;
                }
            }
        }
    }
    if spec.noise > 0.0 {
        for v in &mut img {
            *v = (*v + rng.gen_range(-spec.noise..=spec.noise)).clamp(0.0, 1.0);
        }
    }
    img
}

/// Generates scene `index` of `spec`. Output is a pure function of
/// `(spec, index)`.
pub fn generate_scene(spec: &SceneSpec, index: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);

    let n_targets = rng.gen_range(spec.target_count[0]..=spec.target_count[1]);
    let n_distractors = rng.gen_range(spec.distractor_count[0]..=spec.distractor_count[1]);
    let mut placed: Vec<PlacedObject> = Vec::with_capacity(n_targets + n_distractors);
    for _ in 0..n_targets {
        let o = place(&mut rng, spec, &spec.target, &placed)?;
        placed.push(o);
    }
    for _ in 0..n_distractors {
        let cat = &spec.distractors[rng.gen_range(0..spec.distractors.len())];
        let o = place(&mut rng, spec, cat, &placed)?;
        placed.push(o);
    }
    let distractors = placed.split_off(n_targets);
    let targets = placed;

    let mut chosen = sample_indices(&mut rng, targets.len(), spec.exemplars).into_vec();
    chosen.sort_unstable();
    let boxes: Vec<BoxRegion> = chosen.iter().map(|&i| targets[i].tight_box()).collect();

    let all: Vec<PlacedObject> = targets.iter().chain(&distractors).cloned().collect();
    let pixels = render(spec, &all, &mut rng);
    let n = spec.image_size;
    let image = Tensor::new(&[1, n, n], pixels)?;
    let dots = targets.iter().map(|t| t.center).collect();
    let sample = ImageSample::new(image, dots, boxes, spec.target.id)?;
    Ok(Scene {
        sample,
        targets,
        distractors,
    })
}
