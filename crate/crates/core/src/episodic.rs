//! Datasets, the synthetic clutter generator and N-way K-shot sampling.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::ClassLabel;
use crate::numerics::{io, Tensor};
use crate::rng::{self, SplitMix64};

/// Size of the class-agnostic clutter patch pool shared by all classes.
pub const CLUTTER_POOL: usize = 16;

const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "scamnet-dataset";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn code(self) -> u64 {
        self as u64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassImages {
    pub label: ClassLabel,
    /// `H×W×C` images.
    pub images: Vec<Tensor<f32>>,
}

/// The classes of one split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub image_shape: [usize; 3],
    pub classes: Vec<ClassImages>,
}

impl Dataset {
    /// Stable id of image `image` of the class at position `class`.
    pub fn image_id(&self, class: usize, image: usize) -> u64 {
        image_id(self.split, class, image)
    }

    pub fn num_images(&self) -> usize {
        self.classes.iter().map(|c| c.images.len()).sum()
    }

    pub fn labels(&self) -> Vec<ClassLabel> {
        self.classes.iter().map(|c| c.label).collect()
    }

    /// Every `(class position, image position)` in order.
    pub fn positions(&self) -> Vec<(usize, usize)> {
        self.classes
            .iter()
            .enumerate()
            .flat_map(|(c, ci)| (0..ci.images.len()).map(move |i| (c, i)))
            .collect()
    }

    fn validate(&self) -> Result<()> {
        for c in &self.classes {
            for img in &c.images {
                if img.shape() != self.image_shape {
                    return Err(Error::contract(format!(
                        "class {} holds an image of shape {:?}, expected {:?}",
                        c.label,
                        img.shape(),
                        self.image_shape
                    )));
                }
            }
        }
        Ok(())
    }
}

/// `(split, class position, image position)` mixed into a u64.
pub fn image_id(split: Split, class: usize, image: usize) -> u64 {
    let h = rng::mix64(split.code().wrapping_add(0x5ca3_0000));
    let h = rng::mix64(h ^ class as u64);
    rng::mix64(h ^ (image as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// All splits of a dataset; class sets are pairwise disjoint.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSplits {
    pub image_shape: [usize; 3],
    splits: BTreeMap<Split, Dataset>,
}

impl DataSplits {
    pub fn new(image_shape: [usize; 3], datasets: Vec<Dataset>) -> Result<Self> {
        let mut splits = BTreeMap::new();
        let mut seen = BTreeSet::new();
        for d in datasets {
            if d.image_shape != image_shape {
                return Err(Error::contract(format!(
                    "{} split has image shape {:?}, expected {image_shape:?}",
                    d.split.name(),
                    d.image_shape
                )));
            }
            d.validate()?;
            for l in d.labels() {
                if !seen.insert(l) {
                    return Err(Error::contract(format!(
                        "class {l} appears in more than one split or twice in one"
                    )));
                }
            }
            if splits.insert(d.split, d).is_some() {
                return Err(Error::contract("duplicate split"));
            }
        }
        Ok(Self {
            image_shape,
            splits,
        })
    }

    pub fn get(&self, split: Split) -> Option<&Dataset> {
        self.splits.get(&split)
    }

    pub fn split(&self, split: Split) -> Result<&Dataset> {
        self.get(split)
            .ok_or_else(|| Error::config(format!("dataset has no {} split", split.name())))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Dataset> {
        self.splits.values()
    }
}

/// One image of an episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeImage {
    pub image: Tensor<f32>,
    /// Episode class index in `0..N`.
    pub class: usize,
    pub image_id: u64,
}

/// An N-way K-shot task. Support images are class-major (`n·K + k`), as are
/// queries (`n·Q + q`).
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub support: Vec<EpisodeImage>,
    pub query: Vec<EpisodeImage>,
    /// Dataset label of each episode class.
    pub labels: Vec<ClassLabel>,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.labels.len()
    }

    /// Support images of episode class `n`.
    pub fn shots(&self, n: usize) -> impl Iterator<Item = &EpisodeImage> {
        self.support.iter().filter(move |s| s.class == n)
    }
}

/// Samples N classes uniformly without replacement and, per class, K + Q
/// distinct images split into support and query.
pub fn sample_episode(
    dataset: &Dataset,
    n_way: usize,
    k_shot: usize,
    q_query: usize,
    rng: &mut SplitMix64,
) -> Result<Episode> {
    if n_way == 0 || k_shot == 0 {
        return Err(Error::config("episodes need N ≥ 1 and K ≥ 1"));
    }
    let available = dataset.classes.len();
    if available < n_way {
        return Err(Error::config(format!(
            "{}-way episodes need {n_way} classes, the {} split has {available}",
            n_way,
            dataset.split.name()
        )));
    }
    let need = k_shot + q_query;
    let chosen = index::sample(rng, available, n_way).into_vec();
    let mut support = Vec::with_capacity(n_way * k_shot);
    let mut query = Vec::with_capacity(n_way * q_query);
    let mut labels = Vec::with_capacity(n_way);
    for (n, &c) in chosen.iter().enumerate() {
        let class = &dataset.classes[c];
        if class.images.len() < need {
            return Err(Error::config(format!(
                "class {} has {} images, episodes need {need}",
                class.label,
                class.images.len()
            )));
        }
        labels.push(class.label);
        let picks = index::sample(rng, class.images.len(), need).into_vec();
        for (slot, &i) in picks.iter().enumerate() {
            let item = EpisodeImage {
                image: class.images[i].clone(),
                class: n,
                image_id: dataset.image_id(c, i),
            };
            if slot < k_shot {
                support.push(item);
            } else {
                query.push(item);
            }
        }
    }
    Ok(Episode {
        support,
        query,
        labels,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassCounts {
    pub train: usize,
    #[serde(default)]
    pub val: usize,
    pub test: usize,
}

impl ClassCounts {
    fn of(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

/// Synthetic generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    /// Classes per split; labels are assigned consecutively train, val, test.
    pub n_classes: ClassCounts,
    pub images_per_class: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch_size: usize,
    /// Per-pixel noise standard deviation around the class prototype.
    pub sigma_within: f64,
    /// Fraction of patch positions replaced by clutter, in `[0, 1]`.
    pub clutter_ratio: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || self.image_height % p != 0 || self.image_width % p != 0 || self.channels == 0
        {
            return Err(Error::config(format!(
                "image {}x{}x{} is not divisible into {p}x{p} patches",
                self.image_height, self.image_width, self.channels
            )));
        }
        if self.image_height == 0 || self.image_width == 0 {
            return Err(Error::config("images need at least one patch"));
        }
        if !(0.0..=1.0).contains(&self.clutter_ratio) {
            return Err(Error::config(format!(
                "clutter_ratio must be in [0, 1], got {}",
                self.clutter_ratio
            )));
        }
        if !(self.sigma_within >= 0.0) || !self.sigma_within.is_finite() {
            return Err(Error::config(format!(
                "sigma_within must be finite and non-negative, got {}",
                self.sigma_within
            )));
        }
        Ok(())
    }

    fn grid(&self) -> (usize, usize) {
        (self.image_height / self.patch_size, self.image_width / self.patch_size)
    }

    fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

fn gaussian_patches(rng: &mut SplitMix64, count: usize, len: usize) -> Vec<Vec<f32>> {
    (0..count)
        .map(|_| (0..len).map(|_| rng::normal(rng) as f32).collect())
        .collect()
}

/// Writes flattened patches back into an `H×W×C` image, patch order row-major.
fn assemble(cfg: &SynthConfig, patches: &[&[f32]]) -> Vec<f32> {
    let (gh, gw) = cfg.grid();
    let (p, c, w) = (cfg.patch_size, cfg.channels, cfg.image_width);
    let mut img = vec![0.0f32; cfg.image_height * w * c];
    for pr in 0..gh {
        for pc in 0..gw {
            let patch = patches[pr * gw + pc];
            for r in 0..p {
                let dst = ((pr * p + r) * w + pc * p) * c;
                img[dst..dst + p * c].copy_from_slice(&patch[r * p * c..(r + 1) * p * c]);
            }
        }
    }
    img
}

/// Generates every split. Each class has a prototype grid of Gaussian
/// patches; an image is the prototype with `⌈ρ·M⌉` random patch positions
/// swapped for patches of the shared clutter pool, plus `N(0, σ²)` pixel noise.
pub fn synth_generate(config: &SynthConfig) -> Result<DataSplits> {
    config.validate()?;
    let (gh, gw) = config.grid();
    let m = gh * gw;
    let len = config.patch_len();
    let n_clutter = (config.clutter_ratio * m as f64 - 1e-9).ceil().max(0.0) as usize;
    let n_clutter = n_clutter.min(m);
    let shape = [config.image_height, config.image_width, config.channels];

    let mut pool_rng = rng::seeded(rng::stream_seed(config.seed, u64::MAX));
    let pool = gaussian_patches(&mut pool_rng, CLUTTER_POOL, len);

    let mut datasets = Vec::new();
    let mut next_label: ClassLabel = 0;
    for split in Split::ALL {
        let count = config.n_classes.of(split);
        if count == 0 {
            continue;
        }
        let split_seed = rng::stream_seed(config.seed, split.code());
        let mut classes = Vec::with_capacity(count);
        for c in 0..count {
            let class_seed = rng::stream_seed(split_seed, c as u64);
            let mut proto_rng = rng::seeded(class_seed);
            let prototype = gaussian_patches(&mut proto_rng, m, len);
            let images = (0..config.images_per_class)
                .map(|i| {
                    let mut r = rng::seeded(rng::stream_seed(class_seed, 1 + i as u64));
                    let mut patches: Vec<&[f32]> = prototype.iter().map(|v| v.as_slice()).collect();
                    if n_clutter > 0 {
                        for pos in index::sample(&mut r, m, n_clutter).into_iter() {
                            let k = index::sample(&mut r, CLUTTER_POOL, 1).index(0);
                            patches[pos] = &pool[k];
                        }
                    }
                    let mut img = assemble(config, &patches);
                    if config.sigma_within > 0.0 {
                        for v in &mut img {
                            *v += (config.sigma_within * rng::normal(&mut r)) as f32;
                        }
                    }
                    Tensor::new(shape.to_vec(), img)
                })
                .collect::<Result<Vec<_>>>()?;
            classes.push(ClassImages {
                label: next_label,
                images,
            });
            next_label += 1;
        }
        datasets.push(Dataset {
            split,
            image_shape: shape,
            classes,
        });
    }
    DataSplits::new(shape, datasets)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassEntry {
    label: ClassLabel,
    files: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    image_shape: [usize; 3],
    splits: BTreeMap<Split, Vec<ClassEntry>>,
}

/// Writes `manifest.json` plus one tensor file per image under `dir`.
pub fn save_dataset(data: &DataSplits, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut splits = BTreeMap::new();
    for d in data.iter() {
        let mut entries = Vec::with_capacity(d.classes.len());
        for c in &d.classes {
            let mut files = Vec::with_capacity(c.images.len());
            for (i, img) in c.images.iter().enumerate() {
                let rel = format!("{}/{:05}/{:05}.bin", d.split.name(), c.label, i);
                io::write_tensor(&dir.join(&rel), img)?;
                files.push(rel);
            }
            entries.push(ClassEntry {
                label: c.label,
                files,
            });
        }
        splits.insert(d.split, entries);
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: 1,
        image_shape: data.image_shape,
        splits,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Loads and validates a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<DataSplits> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::data(&path, e.to_string()))?;
    if manifest.format != FORMAT || manifest.version != 1 {
        return Err(Error::data(
            &path,
            format!("unsupported format {} v{}", manifest.format, manifest.version),
        ));
    }
    let mut seen = BTreeMap::new();
    for (split, entries) in &manifest.splits {
        for e in entries {
            if let Some(prev) = seen.insert(e.label, *split) {
                return Err(Error::data(
                    &path,
                    format!(
                        "class {} listed in both {} and {}",
                        e.label,
                        prev.name(),
                        split.name()
                    ),
                ));
            }
        }
    }
    let mut datasets = Vec::new();
    for (split, entries) in manifest.splits {
        let mut classes = Vec::with_capacity(entries.len());
        for e in entries {
            let mut images = Vec::with_capacity(e.files.len());
            for f in &e.files {
                let file = dir.join(f);
                let img = io::read_tensor(&file)?;
                if img.shape() != manifest.image_shape {
                    return Err(Error::data(
                        &file,
                        format!(
                            "image shape {:?} does not match manifest {:?}",
                            img.shape(),
                            manifest.image_shape
                        ),
                    ));
                }
                if !img.is_finite() {
                    return Err(Error::data(&file, "image contains non-finite values"));
                }
                images.push(img);
            }
            classes.push(ClassImages {
                label: e.label,
                images,
            });
        }
        datasets.push(Dataset {
            split,
            image_shape: manifest.image_shape,
            classes,
        });
    }
    DataSplits::new(manifest.image_shape, datasets).map_err(|e| Error::data(&path, e.to_string()))
}
