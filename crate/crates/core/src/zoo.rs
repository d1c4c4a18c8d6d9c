//! Pre-trained model pool: supervised pre-training, persistence, coverage.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::datasets::{ImageDataset, Split};
use crate::error::{reject, Error, Result};
use crate::io;
use crate::nn::{argmax_rows, ArchKind, ArchSpec, ImageBatch, InputShape, Mode, NetworkState, ParamVector};
use crate::optim::Adam;
use crate::seed;

pub const VALIDATION_FRACTION: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainHyper {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
}

impl Default for PretrainHyper {
    fn default() -> Self {
        PretrainHyper {
            lr: 0.01,
            epochs: 15,
            batch: 32,
        }
    }
}

/// How teacher classes and architectures are chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchPolicy {
    /// Filter widths cycled over records.
    pub filters: Vec<usize>,
    pub blocks: usize,
    /// Draw each teacher's classes from a single domain.
    pub within_domain: bool,
}

impl Default for ArchPolicy {
    fn default() -> Self {
        ArchPolicy {
            filters: vec![16],
            blocks: 2,
            within_domain: true,
        }
    }
}

impl ArchPolicy {
    pub fn arch_for(&self, index: usize, input: InputShape, way: usize) -> Result<ArchSpec> {
        if self.filters.is_empty() || self.blocks == 0 {
            return reject("arch policy needs at least one filter width and one block");
        }
        let filters = self.filters[index % self.filters.len()];
        let arch = ArchSpec::conv_classifier(ArchKind::Conv4Like, input, filters, self.blocks, way);
        arch.validate()?;
        Ok(arch)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainedModelRecord {
    pub id: String,
    pub arch: ArchSpec,
    pub params: ParamVector,
    pub classes: Vec<usize>,
    pub domain: String,
    pub val_accuracy: f64,
    pub seed: u64,
}

impl PretrainedModelRecord {
    pub fn way(&self) -> usize {
        self.classes.len()
    }

    /// Frozen network in eval mode.
    pub fn network(&self) -> Result<NetworkState> {
        NetworkState::new(self.arch.clone(), self.params.clone(), Mode::Eval)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub id: String,
    pub arch: ArchSpec,
    pub classes: Vec<usize>,
    pub domain: String,
    pub val_accuracy: f64,
    pub seed: u64,
    pub param_count: usize,
    pub blob_sha256: String,
}

#[derive(Clone, Debug, Default)]
pub struct ModelPool {
    pub records: Vec<PretrainedModelRecord>,
}

impl ModelPool {
    pub fn new(records: Vec<PretrainedModelRecord>) -> Result<Self> {
        let ids: BTreeSet<&str> = records.iter().map(|r| r.id.as_str()).collect();
        if ids.len() != records.len() {
            return reject("model ids are not unique");
        }
        let seeds: BTreeSet<u64> = records.iter().map(|r| r.seed).collect();
        if seeds.len() != records.len() {
            return reject("model seeds are not distinct");
        }
        Ok(ModelPool { records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&PretrainedModelRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.id.clone()).collect()
    }
}

fn domain_tag(dataset: &ImageDataset, classes: &[usize]) -> String {
    let domains: BTreeSet<usize> = classes.iter().map(|&c| dataset.domain_of_class[c]).collect();
    match domains.len() {
        1 => format!("d{}", domains.first().expect("one element")),
        _ => "mixed".to_string(),
    }
}

/// Supervised cross-entropy training on `classes`, with a held-out 20%
/// of each class for the reported accuracy.
pub fn pretrain_model(
    dataset: &ImageDataset,
    classes: &[usize],
    arch: ArchSpec,
    hyper: PretrainHyper,
    id: &str,
    seed: u64,
) -> Result<PretrainedModelRecord> {
    let train_split = dataset.split(Split::MetaTrain);
    if let Some(&bad) = classes.iter().find(|c| !train_split.contains(c)) {
        return reject(format!("model {id}: class {bad} is not a meta-train class"));
    }
    if classes.len() != arch.num_outputs {
        return reject(format!(
            "model {id}: {} classes for a {}-output head",
            classes.len(),
            arch.num_outputs
        ));
    }
    if hyper.batch == 0 || !(hyper.lr > 0.0) {
        return reject(format!("model {id}: batch and lr must be positive"));
    }
    let mut rng = seed::stream(seed, "zoo/pretrain", 0);
    let (mut train_idx, mut train_lbl, mut val_idx, mut val_lbl) = (vec![], vec![], vec![], vec![]);
    for (local, &c) in classes.iter().enumerate() {
        let mut idx = dataset.indices_of(c).to_vec();
        idx.shuffle(&mut rng);
        let n_val = ((idx.len() as f64 * VALIDATION_FRACTION).round() as usize).clamp(1, idx.len() - 1);
        val_lbl.extend(std::iter::repeat_n(local, n_val));
        val_idx.extend_from_slice(&idx[..n_val]);
        train_lbl.extend(std::iter::repeat_n(local, idx.len() - n_val));
        train_idx.extend_from_slice(&idx[n_val..]);
    }

    let mut net = NetworkState::init(arch, seed::derive(seed, "zoo/init", 0), Mode::Train)?;
    let mask = net.arch().trainable_mask();
    let mut opt = Adam::new(net.arch().param_len(), hyper.lr);
    let mut order: Vec<usize> = (0..train_idx.len()).collect();
    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(hyper.batch) {
            if chunk.len() < 2 {
                continue;
            }
            let idx: Vec<usize> = chunk.iter().map(|&i| train_idx[i]).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train_lbl[i]).collect();
            let batch = dataset.images.select(&idx);
            let (_, grad, stats) = net
                .ce_grad(&batch, &labels)
                .map_err(|e| tag_error(e, id))?;
            let mut p = net.params().as_slice().to_vec();
            opt.step(&mut p, &grad, Some(&mask));
            net.set_params(ParamVector::new(p))?;
            net.commit_bn_stats(&stats);
        }
    }

    let net = net.with_mode(Mode::Eval);
    let val_accuracy = accuracy(&net, &dataset.images.select(&val_idx), &val_lbl)?;
    Ok(PretrainedModelRecord {
        id: id.to_string(),
        arch: net.arch().clone(),
        params: net.params().clone(),
        classes: classes.to_vec(),
        domain: domain_tag(dataset, classes),
        val_accuracy,
        seed,
    })
}

fn tag_error(e: Error, id: &str) -> Error {
    match e {
        Error::NumericFailure { context, detail } => Error::NumericFailure {
            context: format!("pre-training {id}: {context}"),
            detail,
        },
        Error::RejectedInput(m) => Error::RejectedInput(format!("pre-training {id}: {m}")),
        other => other,
    }
}

/// Top-1 accuracy of `net` on labelled images.
pub fn accuracy(net: &NetworkState, images: &ImageBatch, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    // bounded chunks keep eval-mode memory flat; eval mode is per-sample
    for (start, chunk) in labels.chunks(64).enumerate() {
        let idx: Vec<usize> = (start * 64..start * 64 + chunk.len()).collect();
        let logits = net.forward_logits(&images.select(&idx))?;
        correct += argmax_rows(&logits)
            .iter()
            .zip(chunk)
            .filter(|(p, y)| p == y)
            .count();
    }
    Ok(correct as f64 / labels.len() as f64)
}

/// Pre-train `n` records on independently drawn `way`-class subsets.
pub fn build_pool(
    dataset: &ImageDataset,
    n: usize,
    way: usize,
    policy: &ArchPolicy,
    hyper: PretrainHyper,
    seed: u64,
) -> Result<ModelPool> {
    if n == 0 {
        return reject("pool size must be at least 1");
    }
    let input = {
        let (h, w, c) = dataset.image_size();
        InputShape {
            height: h,
            width: w,
            channels: c,
        }
    };
    let train = dataset.split(Split::MetaTrain);
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("m{i:03}");
        let mut rng = seed::stream(seed, "zoo/classes", i as u64);
        let candidates: Vec<usize> = if policy.within_domain {
            let domains: BTreeSet<usize> = train.iter().map(|&c| dataset.domain_of_class[c]).collect();
            let eligible: Vec<usize> = domains
                .into_iter()
                .filter(|&d| train.iter().filter(|&&c| dataset.domain_of_class[c] == d).count() >= way)
                .collect();
            if eligible.is_empty() {
                return reject(format!("model {id}: no domain has {way} meta-train classes"));
            }
            let d = eligible[rng.random_range(0..eligible.len())];
            train.iter().copied().filter(|&c| dataset.domain_of_class[c] == d).collect()
        } else {
            train.to_vec()
        };
        if candidates.len() < way {
            return reject(format!("model {id}: {} meta-train classes for a {way}-way task", candidates.len()));
        }
        let mut classes: Vec<usize> = rand::seq::index::sample(&mut rng, candidates.len(), way)
            .into_iter()
            .map(|k| candidates[k])
            .collect();
        classes.sort_unstable();
        let arch = policy.arch_for(i, input, way)?;
        let record_seed = seed::derive(seed, "zoo/record", i as u64);
        log::info!("pre-training {id} on classes {classes:?}");
        records.push(pretrain_model(dataset, &classes, arch, hyper, &id, record_seed)?);
    }
    ModelPool::new(records)
}

/// Fraction of meta-train classes seen by at least one record.
pub fn cover_rate(pool: &ModelPool, dataset: &ImageDataset) -> f64 {
    let train: BTreeSet<usize> = dataset.split(Split::MetaTrain).iter().copied().collect();
    if train.is_empty() {
        return 0.0;
    }
    let covered = pool
        .records
        .iter()
        .flat_map(|r| r.classes.iter())
        .filter(|c| train.contains(c))
        .collect::<BTreeSet<_>>()
        .len();
    covered as f64 / train.len() as f64
}

/// Write `<dir>/<id>/manifest.json` and `<dir>/<id>/weights.bin`.
pub fn save_record(dir: &Path, record: &PretrainedModelRecord) -> Result<()> {
    let blob = record.params.to_le_bytes();
    let manifest = Manifest {
        id: record.id.clone(),
        arch: record.arch.clone(),
        classes: record.classes.clone(),
        domain: record.domain.clone(),
        val_accuracy: record.val_accuracy,
        seed: record.seed,
        param_count: record.params.len(),
        blob_sha256: io::sha256_hex(&blob),
    };
    let rdir = dir.join(&record.id);
    // blob first: a manifest never points at a missing blob
    io::write_atomic(&rdir.join("weights.bin"), &blob)?;
    io::write_json(&rdir.join("manifest.json"), &manifest)
}

pub fn load_record(record_dir: &Path) -> Result<PretrainedModelRecord> {
    let manifest: Manifest = io::read_json(&record_dir.join("manifest.json"))?;
    let blob_path = record_dir.join("weights.bin");
    let blob = io::read_bytes(&blob_path)?;
    let actual = io::sha256_hex(&blob);
    if actual != manifest.blob_sha256 {
        return Err(Error::Checksum {
            path: blob_path.display().to_string(),
            expected: manifest.blob_sha256,
            actual,
        });
    }
    let params = ParamVector::from_le_bytes(&blob)?;
    if params.len() != manifest.param_count || params.len() != manifest.arch.param_len() {
        return reject(format!("{}: blob length disagrees with the manifest", blob_path.display()));
    }
    if manifest.classes.len() != manifest.arch.num_outputs {
        return reject(format!("{}: class list does not match the head width", manifest.id));
    }
    if !(0.0..=1.0).contains(&manifest.val_accuracy) {
        return reject(format!("{}: val_accuracy outside [0, 1]", manifest.id));
    }
    Ok(PretrainedModelRecord {
        id: manifest.id,
        arch: manifest.arch,
        params,
        classes: manifest.classes,
        domain: manifest.domain,
        val_accuracy: manifest.val_accuracy,
        seed: manifest.seed,
    })
}

pub fn save_pool(dir: &Path, pool: &ModelPool) -> Result<()> {
    for r in &pool.records {
        save_record(dir, r)?;
    }
    io::write_json(&dir.join("pool.json"), &pool.ids())
}

pub fn load_pool(dir: &Path) -> Result<ModelPool> {
    let ids: Vec<String> = io::read_json(&dir.join("pool.json"))?;
    let records = ids
        .iter()
        .map(|id| load_record(&dir.join(id)))
        .collect::<Result<Vec<_>>>()?;
    ModelPool::new(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{make_synthetic_domains, SyntheticConfig};

    fn tiny_dataset() -> ImageDataset {
        make_synthetic_domains(
            &SyntheticConfig {
                num_domains: 2,
                classes_per_domain: 6,
                samples_per_class: 20,
                image_size: 16,
                split: [3, 2, 1],
                ..SyntheticConfig::default()
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn cover_rate_arithmetic() {
        let ds = tiny_dataset();
        let train = ds.split(Split::MetaTrain).to_vec();
        let arch = ArchSpec::conv_classifier(ArchKind::Conv4Like, InputShape::square(16, 3), 4, 1, 2);
        let rec = |id: &str, classes: Vec<usize>, seed| PretrainedModelRecord {
            id: id.into(),
            arch: arch.clone(),
            params: ParamVector::new(arch.init_params(0)),
            classes,
            domain: "d0".into(),
            val_accuracy: 0.5,
            seed,
        };
        let one = ModelPool::new(vec![rec("a", train[..2].to_vec(), 1)]).unwrap();
        assert!((cover_rate(&one, &ds) - 2.0 / 6.0).abs() < 1e-15);
        let twice = ModelPool::new(vec![rec("a", train[..2].to_vec(), 1), rec("b", train[..2].to_vec(), 2)]).unwrap();
        assert_eq!(cover_rate(&one, &ds), cover_rate(&twice, &ds));
        assert!(ModelPool::new(vec![rec("a", vec![], 1), rec("a", vec![], 2)]).is_err());
    }

    #[test]
    fn pretrain_rejects_non_train_classes_and_roundtrips() {
        let ds = tiny_dataset();
        let test_class = ds.split(Split::MetaTest)[0];
        let arch = ArchSpec::conv_classifier(ArchKind::Conv4Like, InputShape::square(16, 3), 4, 1, 2);
        let hyper = PretrainHyper { epochs: 1, ..PretrainHyper::default() };
        assert!(pretrain_model(&ds, &[test_class, ds.split(Split::MetaTrain)[0]], arch.clone(), hyper, "x", 1).is_err());

        let classes = &ds.split(Split::MetaTrain)[..2];
        let rec = pretrain_model(&ds, classes, arch, hyper, "x", 1).unwrap();
        assert_eq!(rec.classes.len(), 2);
        let dir = tempfile::tempdir().unwrap();
        save_record(dir.path(), &rec).unwrap();
        let back = load_record(&dir.path().join("x")).unwrap();
        assert_eq!(back, rec);
        let probe = ds.images.select(&[0, 1, 2]);
        assert_eq!(
            rec.network().unwrap().forward_logits(&probe).unwrap(),
            back.network().unwrap().forward_logits(&probe).unwrap()
        );

        // corrupt one byte
        let blob = dir.path().join("x/weights.bin");
        let mut bytes = std::fs::read(&blob).unwrap();
        bytes[0] ^= 1;
        std::fs::write(&blob, bytes).unwrap();
        assert!(matches!(load_record(&dir.path().join("x")), Err(Error::Checksum { .. })));
    }
}
