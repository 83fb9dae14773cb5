//! On-disk synthetic datasets: F32R images plus a JSON-lines manifest.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! manifest.jsonl
//! images/000000.f32r
//! images/000001.f32r
//! ...
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{BoxRegion, ImageSample};
use crate::error::{Error, Result};
use crate::raster;
use crate::synth::{default_categories, generate_scene, CategorySpec, SceneSpec};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const IMAGE_DIR: &str = "images";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Input(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

/// Everything needed to regenerate a dataset bit for bit.
///
/// Each scene draws its target category from the split's allowed set in
/// rotation; every other category in `categories` may appear as a
/// distractor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub image_size: usize,
    pub categories: Vec<CategorySpec>,
    pub target_count: [usize; 2],
    pub distractor_count: [usize; 2],
    pub min_distance: f64,
    pub noise: f64,
    pub background: f64,
    pub exemplars: usize,
    pub seed: u64,
    pub sizes: SplitSizes,
    /// Val and test scenes count only `novel_categories`; train scenes
    /// count only the rest.
    pub split_by_category: bool,
    pub novel_categories: Vec<u32>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            image_size: 128,
            categories: default_categories(),
            target_count: [15, 35],
            distractor_count: [4, 10],
            min_distance: 1.0,
            noise: 0.03,
            background: 0.25,
            exemplars: 3,
            seed: 0,
            sizes: SplitSizes {
                train: 200,
                val: 50,
                test: 50,
            },
            split_by_category: false,
            novel_categories: vec![2],
        }
    }
}

impl DatasetSpec {
    /// Target categories allowed in `split`.
    pub fn target_categories(&self, split: Split) -> Vec<&CategorySpec> {
        let novel = |c: &&CategorySpec| self.novel_categories.contains(&c.id);
        match (self.split_by_category, split) {
            (false, _) => self.categories.iter().collect(),
            (true, Split::Train) => self.categories.iter().filter(|c| !novel(c)).collect(),
            (true, _) => self.categories.iter().filter(novel).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.categories.is_empty() {
            return Err(Error::Config("dataset needs at least one category".into()));
        }
        let ids: BTreeSet<u32> = self.categories.iter().map(|c| c.id).collect();
        if ids.len() != self.categories.len() {
            return Err(Error::Config("category ids must be unique".into()));
        }
        for split in Split::ALL {
            if self.sizes.get(split) > 0 && self.target_categories(split).is_empty() {
                return Err(Error::Config(format!("no target categories available for the {split} split")));
            }
        }
        Ok(())
    }

    /// Scene parameters for a target category.
    pub fn scene_spec(&self, target: &CategorySpec) -> SceneSpec {
        SceneSpec {
            image_size: self.image_size,
            target: target.clone(),
            distractors: self.categories.iter().filter(|c| c.id != target.id).cloned().collect(),
            target_count: self.target_count,
            distractor_count: self.distractor_count,
            min_distance: self.min_distance,
            noise: self.noise,
            background: self.background,
            exemplars: self.exemplars,
            seed: self.seed,
        }
    }
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    /// Image path relative to the dataset root.
    pub image: String,
    pub dots: Vec<(f64, f64)>,
    pub boxes: Vec<BoxRegion>,
    pub count: usize,
    pub category: u32,
    pub split: Split,
    /// Centers of distractor objects, when known.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub distractors: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let path = root.join(MANIFEST_FILE);
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut records = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SampleRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Input(format!("{} line {}: {e}", path.display(), n + 1)))?;
            if rec.count != rec.dots.len() {
                return Err(Error::Input(format!(
                    "{} line {}: count {} disagrees with {} dots",
                    path.display(),
                    n + 1,
                    rec.count,
                    rec.dots.len()
                )));
            }
            records.push(rec);
        }
        Ok(DatasetManifest { root, records })
    }

    pub fn save(&self) -> Result<()> {
        let path = self.root.join(MANIFEST_FILE);
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        for rec in &self.records {
            serde_json::to_writer(&mut w, rec)?;
            w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }

    pub fn split(&self, split: Split) -> Vec<&SampleRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn categories(&self, split: Split) -> BTreeSet<u32> {
        self.split(split).iter().map(|r| r.category).collect()
    }

    /// Reads a record's image and assembles the sample.
    pub fn load_sample(&self, record: &SampleRecord) -> Result<ImageSample> {
        let image = raster::read_f32r(self.root.join(&record.image))?;
        ImageSample::new(image, record.dots.clone(), record.boxes.clone(), record.category)
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<ImageSample>> {
        let recs = self.split(split);
        if recs.is_empty() {
            return Err(Error::Input(format!("the {split} split is empty")));
        }
        recs.into_iter().map(|r| self.load_sample(r)).collect()
    }
}

/// Generates every sample of `spec` under `out_dir`. Samples are numbered
/// train first, then val, then test; that number is also the scene index.
pub fn build_dataset(spec: &DatasetSpec, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    spec.validate()?;
    let root = out_dir.as_ref().to_path_buf();
    let images = root.join(IMAGE_DIR);
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;

    let mut jobs = Vec::with_capacity(spec.sizes.total());
    for split in Split::ALL {
        let allowed = spec.target_categories(split);
        for i in 0..spec.sizes.get(split) {
            jobs.push((split, allowed[i % allowed.len()]));
        }
    }
    let make = |index: usize| -> Result<SampleRecord> {
        let (split, target) = jobs[index];
        let scene = generate_scene(&spec.scene_spec(target), index as u64)?;
        let rel = format!("{IMAGE_DIR}/{index:06}.f32r");
        raster::write_f32r(root.join(&rel), &scene.sample.image)?;
        Ok(SampleRecord {
            image: rel,
            count: scene.sample.dots.len(),
            dots: scene.sample.dots,
            boxes: scene.sample.boxes,
            category: target.id,
            split,
            distractors: scene.distractors.iter().map(|d| d.center).collect(),
        })
    };

    // Scenes are independent, so workers take interleaved indices and the
    // records are put back in index order.
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len().max(1));
    let mut slots: Vec<Option<Result<SampleRecord>>> = (0..jobs.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let make = &make;
                let n = jobs.len();
                scope.spawn(move || (w..n).step_by(workers).map(|i| (i, make(i))).collect::<Vec<_>>())
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("scene worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    let records = slots
        .into_iter()
        .map(|r| r.expect("every index is generated"))
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest { root, records };
    manifest.save()?;
    log::info!(
        "wrote {} samples to {}",
        manifest.records.len(),
        manifest.root.display()
    );
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetSpec {
        DatasetSpec {
            image_size: 48,
            target_count: [3, 6],
            distractor_count: [1, 3],
            sizes: SplitSizes {
                train: 4,
                val: 2,
                test: 2,
            },
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn split_parsing() {
        assert_eq!("val".parse::<Split>().unwrap(), Split::Val);
        assert!("dev".parse::<Split>().is_err());
        assert_eq!(Split::Test.to_string(), "test");
    }

    #[test]
    fn category_split_sets() {
        let mut s = small();
        s.split_by_category = true;
        let ids = |split| s.target_categories(split).iter().map(|c| c.id).collect::<Vec<_>>();
        assert_eq!(ids(Split::Train), vec![0, 1]);
        assert_eq!(ids(Split::Test), vec![2]);
        s.novel_categories = vec![0, 1, 2];
        assert!(s.validate().is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let built = build_dataset(&small(), dir.path()).unwrap();
        assert_eq!(built.records.len(), 8);
        let loaded = DatasetManifest::load(dir.path()).unwrap();
        assert_eq!(loaded, built);
        let sample = loaded.load_sample(&loaded.records[0]).unwrap();
        assert_eq!(sample.dots, built.records[0].dots);
    }

    #[test]
    fn bad_manifest_line_is_input_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), "{\"image\": 3}\n").unwrap();
        assert!(matches!(DatasetManifest::load(dir.path()), Err(Error::Input(_))));
    }
}
