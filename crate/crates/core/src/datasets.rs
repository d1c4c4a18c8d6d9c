//! Synthetic multi-domain image benchmark, class splits and episode sampling.
//!
//! Every class is a continuous prototype: three 2-D sinusoids whose integer
//! frequencies fall in a domain-specific band, on top of a domain-specific
//! per-channel mean. Samples evaluate the prototype at translated
//! coordinates and add Gaussian pixel noise.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{reject, Error, Result};
use crate::nn::ImageBatch;
use crate::seed;

/// Maximum translation in pixels, applied independently on both axes.
pub const MAX_SHIFT: i64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub num_domains: usize,
    pub classes_per_domain: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    pub noise_sigma: f64,
    /// Spacing of per-domain channel means.
    pub channel_shift: f64,
    /// Index of the first domain; lets a held-out domain use its own band.
    pub domain_offset: usize,
    /// Classes per domain assigned to meta-train / meta-val / meta-test.
    pub split: [usize; 3],
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_domains: 3,
            classes_per_domain: 12,
            samples_per_class: 120,
            image_size: 32,
            noise_sigma: 0.2,
            channel_shift: 0.1,
            domain_offset: 0,
            split: [6, 3, 3],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    MetaTrain,
    MetaVal,
    MetaTest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sinusoid {
    pub freq_x: i64,
    pub freq_y: i64,
    pub phase: f64,
    pub amplitude: f64,
    /// Per-channel weight of this component.
    pub channel_gain: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub channel_mean: Vec<f64>,
    pub components: Vec<Sinusoid>,
}

impl Prototype {
    /// Noise-free intensity at continuous pixel coordinates.
    pub fn eval(&self, y: f64, x: f64, channel: usize, size: usize) -> f64 {
        let s = size as f64;
        self.channel_mean[channel]
            + self
                .components
                .iter()
                .map(|k| {
                    k.amplitude
                        * k.channel_gain[channel]
                        * (TAU * (k.freq_x as f64 * x + k.freq_y as f64 * y) / s + k.phase).sin()
                })
                .sum::<f64>()
    }
}

#[derive(Clone, Debug)]
pub struct ImageDataset {
    pub images: ImageBatch,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub domain_of_class: Vec<usize>,
    pub splits: BTreeMap<Split, Vec<usize>>,
    /// Present for synthetic data only.
    pub prototypes: Vec<Prototype>,
    by_class: Vec<Vec<usize>>,
}

impl ImageDataset {
    pub fn from_parts(
        images: ImageBatch,
        labels: Vec<usize>,
        class_names: Vec<String>,
        domain_of_class: Vec<usize>,
        splits: BTreeMap<Split, Vec<usize>>,
        prototypes: Vec<Prototype>,
    ) -> Result<Self> {
        let classes = class_names.len();
        if labels.len() != images.len() {
            return reject("label count differs from image count");
        }
        if domain_of_class.len() != classes {
            return reject("domain map does not cover every class");
        }
        let mut by_class = vec![Vec::new(); classes];
        for (i, &y) in labels.iter().enumerate() {
            if y >= classes {
                return reject(format!("label {y} outside the {classes} known classes"));
            }
            by_class[y].push(i);
        }
        let mut seen = vec![0u8; classes];
        for cls in splits.values().flatten() {
            if *cls >= classes {
                return reject(format!("split names unknown class {cls}"));
            }
            seen[*cls] += 1;
        }
        if seen.iter().any(|&s| s != 1) {
            return reject("every class must appear in exactly one split");
        }
        if by_class.windows(2).any(|w| w[0].len() != w[1].len()) {
            return reject("classes have unequal sample counts");
        }
        Ok(ImageDataset {
            images,
            labels,
            class_names,
            domain_of_class,
            splits,
            prototypes,
            by_class,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn samples_per_class(&self) -> usize {
        self.by_class.first().map_or(0, Vec::len)
    }

    /// Sample indices of `class`, in storage order.
    pub fn indices_of(&self, class: usize) -> &[usize] {
        &self.by_class[class]
    }

    pub fn split(&self, split: Split) -> &[usize] {
        self.splits.get(&split).map_or(&[], Vec::as_slice)
    }

    pub fn split_of(&self, class: usize) -> Option<Split> {
        self.splits
            .iter()
            .find(|(_, cs)| cs.contains(&class))
            .map(|(s, _)| *s)
    }

    pub fn image_size(&self) -> (usize, usize, usize) {
        (self.images.height, self.images.width, self.images.channels)
    }
}

/// Channel means of domain `g` among `period` domains.
pub fn domain_channel_means(g: usize, period: usize, channels: usize, shift: f64) -> Vec<f64> {
    let centre = (period as f64 - 1.0) / 2.0;
    (0..channels)
        .map(|c| 0.5 + shift * (((g + c) % period) as f64 - centre))
        .collect()
}

/// Frequency band `[lo, hi]` of domain `g`.
pub fn domain_band(g: usize) -> (i64, i64) {
    let lo = 1 + 2 * g as i64;
    (lo, lo + 1)
}

pub fn make_synthetic_domains(config: &SyntheticConfig, seed: u64) -> Result<ImageDataset> {
    let SyntheticConfig {
        num_domains,
        classes_per_domain,
        samples_per_class,
        image_size,
        noise_sigma,
        channel_shift,
        domain_offset,
        split,
    } = *config;
    if image_size < 8 {
        return reject(format!("image_size {image_size} is below 8"));
    }
    if num_domains == 0 || classes_per_domain == 0 || samples_per_class == 0 {
        return reject("domain, class and sample counts must be at least 1");
    }
    if split.iter().sum::<usize>() != classes_per_domain {
        return reject(format!(
            "split {split:?} does not add up to {classes_per_domain} classes per domain"
        ));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return reject("noise_sigma must be a finite non-negative number");
    }
    let channels = 3;
    let period = num_domains + domain_offset;
    let (lo_band, hi_band) = domain_band(period - 1);
    if 2 * hi_band.max(lo_band) >= image_size as i64 {
        return reject("image too small for the highest domain frequency band");
    }

    let mut proto_rng = seed::stream(seed, "dataset/prototypes", 0);
    let mut prototypes = Vec::new();
    let mut domain_of_class = Vec::new();
    let mut class_names = Vec::new();
    for d in 0..num_domains {
        let g = d + domain_offset;
        let (lo, hi) = domain_band(g);
        let means = domain_channel_means(g, period, channels, channel_shift);
        for k in 0..classes_per_domain {
            let components = (0..3)
                .map(|_| {
                    let sign = if proto_rng.random_bool(0.5) { 1 } else { -1 };
                    Sinusoid {
                        freq_x: proto_rng.random_range(lo..=hi),
                        freq_y: sign * proto_rng.random_range(0..=hi),
                        phase: proto_rng.random_range(0.0..TAU),
                        amplitude: proto_rng.random_range(0.08..0.15),
                        channel_gain: (0..channels)
                            .map(|_| proto_rng.random_range(-1.0..1.0))
                            .collect(),
                    }
                })
                .collect();
            prototypes.push(Prototype {
                channel_mean: means.clone(),
                components,
            });
            domain_of_class.push(d);
            class_names.push(format!("d{g}c{k:02}"));
        }
    }

    let noise = Normal::new(0.0, noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::RejectedInput(format!("noise_sigma: {e}")))?;
    let s = image_size;
    let mut images = ImageBatch::empty(s, s, channels);
    images.data.reserve(prototypes.len() * samples_per_class * s * s * channels);
    let mut labels = Vec::new();
    for (cls, proto) in prototypes.iter().enumerate() {
        let mut rng = seed::stream(seed, "dataset/samples", cls as u64);
        for _ in 0..samples_per_class {
            let ty = rng.random_range(-MAX_SHIFT..=MAX_SHIFT) as f64;
            let tx = rng.random_range(-MAX_SHIFT..=MAX_SHIFT) as f64;
            for y in 0..s {
                for x in 0..s {
                    for c in 0..channels {
                        let clean = proto.eval(y as f64 - ty, x as f64 - tx, c, s);
                        let eps = if noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                        images.data.push((clean + eps).clamp(0.0, 1.0) as f32);
                    }
                }
            }
            labels.push(cls);
        }
    }

    let mut splits: BTreeMap<Split, Vec<usize>> = BTreeMap::new();
    let mut split_rng = seed::stream(seed, "dataset/splits", 0);
    for d in 0..num_domains {
        let mut classes: Vec<usize> = (d * classes_per_domain..(d + 1) * classes_per_domain).collect();
        classes.shuffle(&mut split_rng);
        let mut it = classes.into_iter();
        for (which, &count) in [Split::MetaTrain, Split::MetaVal, Split::MetaTest].iter().zip(&split) {
            splits.entry(*which).or_default().extend(it.by_ref().take(count));
        }
    }
    for v in splits.values_mut() {
        v.sort_unstable();
    }

    ImageDataset::from_parts(images, labels, class_names, domain_of_class, splits, prototypes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeSpec {
    pub way: usize,
    pub shot: usize,
    pub query: usize,
}

impl EpisodeSpec {
    pub fn new(way: usize, shot: usize, query: usize) -> Self {
        EpisodeSpec { way, shot, query }
    }
}

/// An N-way K-shot task; `class_map[label]` names the source class.
#[derive(Clone, Debug)]
pub struct Episode<K = usize> {
    pub support: ImageBatch,
    pub support_labels: Vec<usize>,
    pub query: ImageBatch,
    pub query_labels: Vec<usize>,
    pub class_map: Vec<K>,
}

/// Draw `way` of the `pools` (each a list of candidate items) and split
/// `shot + query` items per drawn pool into support and query positions.
pub(crate) fn draw_episode_indices(
    pools: &[&[usize]],
    spec: EpisodeSpec,
    rng: &mut seed::Rng,
) -> Result<(Vec<usize>, Vec<Vec<usize>>, Vec<Vec<usize>>)> {
    let EpisodeSpec { way, shot, query } = spec;
    if way == 0 || shot + query == 0 {
        return reject("episode needs at least one class and one sample");
    }
    if pools.len() < way {
        return reject(format!("{} classes available for a {way}-way episode", pools.len()));
    }
    let chosen: Vec<usize> = rand::seq::index::sample(rng, pools.len(), way).into_vec();
    let mut sup = Vec::with_capacity(way);
    let mut qry = Vec::with_capacity(way);
    for &p in &chosen {
        let pool = pools[p];
        if pool.len() < shot + query {
            return reject(format!(
                "class has {} samples, episode needs {}",
                pool.len(),
                shot + query
            ));
        }
        let picks = rand::seq::index::sample(rng, pool.len(), shot + query).into_vec();
        sup.push(picks[..shot].iter().map(|&i| pool[i]).collect());
        qry.push(picks[shot..].iter().map(|&i| pool[i]).collect());
    }
    Ok((chosen, sup, qry))
}

pub(crate) fn assemble<K>(
    images: &ImageBatch,
    sup: &[Vec<usize>],
    qry: &[Vec<usize>],
    class_map: Vec<K>,
) -> Episode<K> {
    let flat = |sets: &[Vec<usize>]| -> (Vec<usize>, Vec<usize>) {
        sets.iter()
            .enumerate()
            .flat_map(|(lbl, idx)| idx.iter().map(move |&i| (i, lbl)))
            .unzip()
    };
    let (si, sl) = flat(sup);
    let (qi, ql) = flat(qry);
    Episode {
        support: images.select(&si),
        support_labels: sl,
        query: images.select(&qi),
        query_labels: ql,
        class_map,
    }
}

/// Episode over `classes` with labels remapped to `0..way`.
pub fn sample_episode(
    dataset: &ImageDataset,
    classes: &[usize],
    spec: EpisodeSpec,
    seed: u64,
) -> Result<Episode> {
    if let Some(&bad) = classes.iter().find(|&&c| c >= dataset.num_classes()) {
        return reject(format!("unknown class {bad}"));
    }
    let pools: Vec<&[usize]> = classes.iter().map(|&c| dataset.indices_of(c)).collect();
    let mut rng = seed::rng(seed);
    let (chosen, sup, qry) = draw_episode_indices(&pools, spec, &mut rng)?;
    let class_map = chosen.iter().map(|&p| classes[p]).collect();
    Ok(assemble(&dataset.images, &sup, &qry, class_map))
}

/// JSON split file for directory ingestion.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFile {
    pub meta_train: Vec<String>,
    pub meta_val: Vec<String>,
    pub meta_test: Vec<String>,
    /// Optional class name → domain tag.
    #[serde(default)]
    pub domains: BTreeMap<String, usize>,
}

/// Load `<root>/<class_name>/<image files>`, resizing to `image_size`.
///
/// Every class keeps as many images as the smallest class has, taken in
/// file-name order.
pub fn load_image_folder(root: &Path, split_file: &Path, image_size: usize) -> Result<ImageDataset> {
    let splits: SplitFile = crate::io::read_json(split_file)?;
    let mut class_names: Vec<String> = splits
        .meta_train
        .iter()
        .chain(&splits.meta_val)
        .chain(&splits.meta_test)
        .cloned()
        .collect();
    class_names.sort();
    let mut per_class: Vec<Vec<std::path::PathBuf>> = Vec::new();
    for name in &class_names {
        let dir = root.join(name);
        let mut files: Vec<_> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(format!("listing {}", dir.display()), e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        if files.is_empty() {
            return reject(format!("class directory {} has no images", dir.display()));
        }
        per_class.push(files);
    }
    let keep = per_class.iter().map(Vec::len).min().unwrap_or(0);
    let s = image_size as u32;
    let mut images = ImageBatch::empty(image_size, image_size, 3);
    let mut labels = Vec::new();
    for (cls, files) in per_class.iter().enumerate() {
        for path in &files[..keep] {
            let img = image::open(path).map_err(|e| Error::Image {
                path: path.display().to_string(),
                source: e,
            })?;
            let rgb = img
                .resize_exact(s, s, image::imageops::FilterType::Triangle)
                .to_rgb8();
            images
                .data
                .extend(rgb.as_raw().iter().map(|&b| b as f32 / 255.0));
            labels.push(cls);
        }
    }
    let index_of = |n: &String| class_names.binary_search(n).expect("name from this list");
    let mut split_map = BTreeMap::new();
    split_map.insert(Split::MetaTrain, splits.meta_train.iter().map(index_of).collect());
    split_map.insert(Split::MetaVal, splits.meta_val.iter().map(index_of).collect());
    split_map.insert(Split::MetaTest, splits.meta_test.iter().map(index_of).collect());
    let domain_of_class = class_names
        .iter()
        .map(|n| splits.domains.get(n).copied().unwrap_or(0))
        .collect();
    ImageDataset::from_parts(images, labels, class_names, domain_of_class, split_map, Vec::new())
}
