//! Pipeline stages. Each stage reads the artifacts of earlier stages from
//! the output directory and writes its own atomically.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tgr_core::datasets::{load_image_folder, make_synthetic_domains, ImageDataset, Split, SyntheticConfig};
use tgr_core::evaluation::{ag_csv, accuracy_gain, evaluate, overlap_aux_pool, AgRow, EvalReport};
use tgr_core::grouping::{
    cka::features_matrix, cka_linear, dissimilarity_matrix, fim_diagonal, spectral_group, DissimilarityMatrix,
    GroupAssignment, ProbeSpec, TaskEmbedding,
};
use tgr_core::io;
use tgr_core::meta::{train, Diagnostics, EpochLog, LiveRecovery, TaskCache, TaskSource, TrainOutcome};
use tgr_core::nn::{ArchKind, ArchSpec, ImageBatch, InputShape, Mode, NetworkState, ParamVector};
use tgr_core::seed;
use tgr_core::zoo::{
    build_pool, cover_rate, load_pool, load_record, pretrain_model, save_pool, ModelPool,
};

use crate::config::{GroupStrategy, RunConfig, TaskSourceKind};
use crate::error::{CliError, CliResult};

/// Artifact layout under one output directory.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub dir: PathBuf,
}

impl Workspace {
    pub fn new(dir: impl Into<PathBuf>) -> CliResult<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Workspace { dir })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn zoo(&self) -> PathBuf {
        self.path("zoo")
    }
    pub fn tasks(&self) -> PathBuf {
        self.path("tasks")
    }
    pub fn probe(&self) -> PathBuf {
        self.path("probe")
    }
    pub fn meta(&self) -> PathBuf {
        self.path("meta")
    }
    pub fn images(&self) -> PathBuf {
        self.path("images")
    }

    /// Fail with the name of the stage that produces `path`.
    pub fn require(&self, path: &Path, stage: &'static str) -> CliResult<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(CliError::MissingArtifact {
                path: path.to_path_buf(),
                stage,
            })
        }
    }
}

fn stage_seed(cfg: &RunConfig, stage: &str) -> u64 {
    seed::derive(cfg.seed, stage, 0)
}

pub fn load_dataset(cfg: &RunConfig) -> CliResult<ImageDataset> {
    let d = &cfg.dataset;
    Ok(match (&d.folder, &d.split_file) {
        (Some(root), Some(split)) => load_image_folder(root, split, d.synthetic.image_size)?,
        _ => make_synthetic_domains(&d.synthetic, stage_seed(cfg, "dataset"))?,
    })
}

fn input_shape(ds: &ImageDataset) -> InputShape {
    let (height, width, channels) = ds.image_size();
    InputShape {
        height,
        width,
        channels,
    }
}

/// The meta-model follows the first architecture of the zoo policy with
/// a head as wide as the teachers.
pub fn meta_arch(cfg: &RunConfig, ds: &ImageDataset) -> CliResult<ArchSpec> {
    Ok(cfg.zoo.arch.arch_for(0, input_shape(ds), cfg.zoo.way)?)
}

pub fn zoo_build(cfg: &RunConfig, ws: &Workspace) -> CliResult<ModelPool> {
    let ds = load_dataset(cfg)?;
    let pool = build_pool(&ds, cfg.zoo.n, cfg.zoo.way, &cfg.zoo.arch, cfg.zoo.pretrain, stage_seed(cfg, "zoo"))?;
    save_pool(&ws.zoo(), &pool)?;
    #[derive(Serialize)]
    struct Summary<'a> {
        cover_rate: f64,
        val_accuracy: BTreeMap<&'a str, f64>,
    }
    let summary = Summary {
        cover_rate: cover_rate(&pool, &ds),
        val_accuracy: pool.records.iter().map(|r| (r.id.as_str(), r.val_accuracy)).collect(),
    };
    io::write_json(&ws.path("zoo_summary.json"), &summary)?;
    log::info!("zoo: {} teachers, cover rate {:.3}", pool.len(), summary.cover_rate);
    Ok(pool)
}

fn require_pool(ws: &Workspace) -> CliResult<ModelPool> {
    ws.require(&ws.zoo().join("pool.json"), "zoo-build")?;
    Ok(load_pool(&ws.zoo())?)
}

fn require_tasks(ws: &Workspace) -> CliResult<TaskCache> {
    ws.require(&ws.tasks().join("tasks.json"), "invert")?;
    Ok(TaskCache::load(&ws.tasks())?)
}

pub fn invert(cfg: &RunConfig, ws: &Workspace) -> CliResult<TaskCache> {
    let pool = require_pool(ws)?;
    let mut report = String::from("id,variant,ce_start,ce_end,bn_start,bn_end,teacher_accuracy\n");
    let mut grids = Vec::new();
    let mut failure = None;
    let cache = TaskCache::build(
        &pool,
        &cfg.inversion.recovery,
        cfg.inversion.variants,
        stage_seed(cfg, "invert"),
        |id, v, task, trace| {
            let (first, last) = (trace.losses[0], trace.losses[trace.losses.len() - 1]);
            let acc = pool
                .get(id)
                .map(|r| tgr_core::inversion::teacher_accuracy(r, task))
                .transpose()
                .unwrap_or_else(|e| {
                    failure.get_or_insert(e);
                    None
                })
                .unwrap_or(f64::NAN);
            report.push_str(&format!(
                "{id},{v},{:.6},{:.6},{:.6},{:.6},{acc:.4}\n",
                first.l_ce, last.l_ce, first.l_bn, last.l_bn
            ));
            log::info!("invert {id}#{v}: CE {:.4} -> {:.4}, teacher accuracy {acc:.3}", first.l_ce, last.l_ce);
            if v == 0 {
                grids.push((id.to_string(), task.images.clone()));
            }
        },
    )?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    cache.save(&ws.tasks())?;
    io::write_atomic(&ws.path("inversion.csv"), report.as_bytes())?;
    std::fs::create_dir_all(ws.images()).map_err(|e| tgr_core::Error::io(ws.images().display().to_string(), e))?;
    for (id, images) in grids {
        io::save_image_grid(&ws.images().join(format!("recovered_{id}.png")), &images)?;
    }
    Ok(cache)
}

/// A probe pre-trained on a synthetic domain that the benchmark never uses.
pub fn synthetic_probe(cfg: &RunConfig, ds: &ImageDataset) -> CliResult<NetworkState> {
    let base = &cfg.dataset.synthetic;
    let (h, _, _) = ds.image_size();
    let probe_cfg = SyntheticConfig {
        num_domains: 1,
        classes_per_domain: cfg.grouping.probe_classes,
        domain_offset: base.num_domains + base.domain_offset,
        image_size: h,
        split: [cfg.grouping.probe_classes, 0, 0],
        ..base.clone()
    };
    let probe_ds = make_synthetic_domains(&probe_cfg, stage_seed(cfg, "probe/data"))?;
    let classes: Vec<usize> = (0..cfg.grouping.probe_classes).collect();
    let arch = cfg.zoo.arch.arch_for(0, input_shape(ds), classes.len())?;
    let arch = ArchSpec {
        kind: ArchKind::Probe,
        ..arch
    };
    let record = pretrain_model(
        &probe_ds,
        &classes,
        arch,
        cfg.grouping.probe_pretrain,
        "probe",
        stage_seed(cfg, "probe/train"),
    )?;
    log::info!("probe: held-out accuracy {:.3}", record.val_accuracy);
    Ok(record.network()?)
}

/// Fisher embeddings of each teacher's first recovered task.
pub fn embed_pool(probe: &ProbeSpec, pool: &ModelPool, cache: &TaskCache, cfg: &RunConfig) -> CliResult<Vec<TaskEmbedding>> {
    pool.records
        .iter()
        .map(|r| {
            let task = cache
                .variants(&r.id)
                .and_then(|v| v.first())
                .ok_or_else(|| CliError::Config(format!("recovered tasks have no entry for {}", r.id)))?;
            Ok(fim_diagonal(probe, &task.images, &task.labels, task.way(), cfg.grouping.head)?)
        })
        .collect()
}

/// Pairwise linear CKA of teacher backbone features on shared images.
pub fn cka_matrix(pool: &ModelPool, images: &ImageBatch) -> CliResult<Vec<f64>> {
    let feats: Vec<_> = pool
        .records
        .iter()
        .map(|r| {
            let probe = ProbeSpec::new(r.network()?)?;
            let f = probe.features::<f64>(images)?;
            let (n, _) = f.dims2();
            Ok(features_matrix(n, f.data()))
        })
        .collect::<CliResult<_>>()?;
    let n = feats.len();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v = cka_linear(&feats[i], &feats[j])?;
            out[i * n + j] = v;
            out[j * n + i] = v;
        }
    }
    Ok(out)
}

fn matrix_csv(n: usize, values: &[f64]) -> String {
    let mut s = String::new();
    for i in 0..n {
        let row: Vec<String> = (0..n).map(|j| format!("{:.12}", values[i * n + j])).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

pub fn embed(cfg: &RunConfig, ws: &Workspace) -> CliResult<DissimilarityMatrix> {
    let pool = require_pool(ws)?;
    let cache = require_tasks(ws)?;
    let ds = load_dataset(cfg)?;
    let probe_net = match &cfg.grouping.probe {
        Some(dir) => load_record(dir)?.network()?,
        None => {
            let net = synthetic_probe(cfg, &ds)?;
            save_network(&ws.probe(), &net, 0)?;
            net
        }
    };
    let probe = ProbeSpec::new(probe_net)?;
    let embeddings = embed_pool(&probe, &pool, &cache, cfg)?;
    let by_id: BTreeMap<String, &TaskEmbedding> = pool.ids().into_iter().zip(&embeddings).collect();
    io::write_json(&ws.path("embeddings.json"), &by_id)?;
    let w = dissimilarity_matrix(&embeddings)?;
    io::write_atomic(&ws.path("W.csv"), w.to_csv().as_bytes())?;

    let train = ds.split(Split::MetaTrain);
    let mut rng = seed::stream(cfg.seed, "cka/images", 0);
    let all: Vec<usize> = train.iter().flat_map(|&c| ds.indices_of(c).iter().copied()).collect();
    let take = cfg.grouping.cka_samples.min(all.len());
    let picks: Vec<usize> = rand::seq::index::sample(&mut rng, all.len(), take)
        .into_iter()
        .map(|k| all[k])
        .collect();
    let cka = cka_matrix(&pool, &ds.images.select(&picks))?;
    io::write_atomic(&ws.path("cka.csv"), matrix_csv(pool.len(), &cka).as_bytes())?;
    Ok(w)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupsFile {
    pub c: usize,
    pub strategy: GroupStrategy,
    pub groups: BTreeMap<String, usize>,
}

pub fn group_matrix(w: &DissimilarityMatrix, strategy: GroupStrategy, c: usize, seed: u64) -> CliResult<GroupAssignment> {
    let affinity = match strategy {
        GroupStrategy::Dissimilar => w.clone(),
        GroupStrategy::Similar => w.complement(),
    };
    Ok(spectral_group(&affinity, c, seed)?)
}

pub fn group(cfg: &RunConfig, ws: &Workspace) -> CliResult<GroupAssignment> {
    let pool = require_pool(ws)?;
    let w_path = ws.path("W.csv");
    ws.require(&w_path, "embed")?;
    let text = std::fs::read_to_string(&w_path).map_err(|e| tgr_core::Error::io(w_path.display().to_string(), e))?;
    let w = DissimilarityMatrix::from_csv(&text)?;
    if w.n != pool.len() {
        return Err(CliError::Config(format!("W.csv is {}×{0}, pool has {} models", w.n, pool.len())));
    }
    let groups = group_matrix(&w, cfg.grouping.strategy, cfg.grouping.c, stage_seed(cfg, "group"))?;
    io::write_json(
        &ws.path("groups.json"),
        &GroupsFile {
            c: groups.c,
            strategy: cfg.grouping.strategy,
            groups: groups.to_map(&pool.ids()),
        },
    )?;
    log::info!("group: {:?}", groups.groups());
    Ok(groups)
}

fn read_groups(ws: &Workspace, pool: &ModelPool) -> CliResult<GroupAssignment> {
    let path = ws.path("groups.json");
    ws.require(&path, "group")?;
    let file: GroupsFile = io::read_json(&path)?;
    let group_of = pool
        .ids()
        .iter()
        .map(|id| {
            file.groups
                .get(id)
                .copied()
                .ok_or_else(|| CliError::Config(format!("groups.json has no entry for {id}")))
        })
        .collect::<CliResult<Vec<_>>>()?;
    if group_of.iter().any(|&g| g >= file.c) {
        return Err(CliError::Config("groups.json assigns a group index outside 0..c".into()));
    }
    Ok(GroupAssignment { c: file.c, group_of })
}

#[derive(Serialize, Deserialize)]
struct NetworkManifest {
    epoch: usize,
    arch: ArchSpec,
    param_count: usize,
    blob_sha256: String,
}

/// `<dir>/manifest.json` plus `<dir>/weights.bin`, blob first.
pub fn save_network(dir: &Path, net: &NetworkState, epoch: usize) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| tgr_core::Error::io(dir.display().to_string(), e))?;
    let blob = net.params().to_le_bytes();
    io::write_atomic(&dir.join("weights.bin"), &blob)?;
    io::write_json(
        &dir.join("manifest.json"),
        &NetworkManifest {
            epoch,
            arch: net.arch().clone(),
            param_count: net.params().len(),
            blob_sha256: io::sha256_hex(&blob),
        },
    )?;
    Ok(())
}

pub fn load_network(dir: &Path, mode: Mode) -> CliResult<(NetworkState, usize)> {
    let manifest: NetworkManifest = io::read_json(&dir.join("manifest.json"))?;
    let blob_path = dir.join("weights.bin");
    let blob = io::read_bytes(&blob_path)?;
    let actual = io::sha256_hex(&blob);
    if actual != manifest.blob_sha256 {
        return Err(tgr_core::Error::Checksum {
            path: blob_path.display().to_string(),
            expected: manifest.blob_sha256,
            actual,
        }
        .into());
    }
    let net = NetworkState::new(manifest.arch, ParamVector::from_le_bytes(&blob)?, mode)?;
    Ok((net, manifest.epoch))
}

/// Train from the stage artifacts without writing anything.
pub fn train_in_memory(
    cfg: &RunConfig,
    pool: &ModelPool,
    groups: &GroupAssignment,
    source: &mut dyn TaskSource,
    hook: &mut dyn FnMut(&tgr_core::meta::EpochReport<'_>) -> tgr_core::Result<()>,
) -> CliResult<TrainOutcome> {
    let ds_shape = {
        let r = pool.records.first().ok_or_else(|| CliError::Config("empty pool".into()))?;
        r.arch.input_shape
    };
    let arch = cfg.zoo.arch.arch_for(0, ds_shape, cfg.zoo.way)?;
    let init = NetworkState::init(arch, stage_seed(cfg, "train/init"), Mode::Train)?;
    Ok(train(pool, groups, &cfg.train.meta, init, source, stage_seed(cfg, "train"), hook)?)
}

pub fn train_stage(cfg: &RunConfig, ws: &Workspace) -> CliResult<TrainOutcome> {
    let pool = require_pool(ws)?;
    let groups = if cfg.train.meta.grouping_on {
        read_groups(ws, &pool)?
    } else {
        GroupAssignment::canonical(1, &vec![0; pool.len()])
    };
    let mut source: Box<dyn TaskSource> = match cfg.inversion.source {
        TaskSourceKind::Cache => Box::new(require_tasks(ws)?),
        TaskSourceKind::Live => Box::new(LiveRecovery::new(cfg.inversion.recovery, stage_seed(cfg, "train/live"))),
    };
    let checkpoints = ws.path("checkpoints");
    let images = ws.images();
    let (every, dump) = (cfg.train.checkpoint_every, cfg.train.dump_every);
    let mut hook = |r: &tgr_core::meta::EpochReport<'_>| -> tgr_core::Result<()> {
        let done = r.state.epoch;
        if every > 0 && done.is_multiple_of(every) {
            save_network(&checkpoints.join(format!("epoch_{done:05}")), &r.state.model, done)
                .map_err(|e| tgr_core::Error::RejectedInput(e.to_string()))?;
        }
        if dump > 0 && r.log.epoch.is_multiple_of(dump) {
            std::fs::create_dir_all(&images).map_err(|e| tgr_core::Error::io(images.display().to_string(), e))?;
            for (id, task) in r.log.record_ids.iter().zip(r.tasks) {
                io::save_image_grid(&images.join(format!("inv_{}_{id}.png", r.log.epoch)), &task.images)?;
            }
        }
        if done.is_multiple_of(10) {
            log::info!("train: epoch {done}, kd loss {:.4}, regularizer {:.3e}", r.row.kd_loss, r.row.regularizer);
        }
        Ok(())
    };
    let outcome = train_in_memory(cfg, &pool, &groups, source.as_mut(), &mut hook)?;
    save_network(&ws.meta(), &outcome.state.model, outcome.state.epoch)?;
    io::write_atomic(&ws.path("diagnostics.csv"), outcome.diagnostics.to_csv().as_bytes())?;
    io::write_json(&ws.path("train_log.json"), &outcome.log)?;
    Ok(outcome)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalFile {
    pub meta: EvalReport,
    /// Adaptation from a random initialization.
    pub finetune: EvalReport,
}

pub fn eval_stage(cfg: &RunConfig, ws: &Workspace) -> CliResult<EvalFile> {
    ws.require(&ws.meta().join("manifest.json"), "train")?;
    let (model, _) = load_network(&ws.meta(), Mode::Train)?;
    let ds = load_dataset(cfg)?;
    let eval_seed = stage_seed(cfg, "eval");
    let meta = evaluate(&model, &ds, Split::MetaTest, &cfg.eval, eval_seed)?;
    let scratch = NetworkState::init(model.arch().clone(), stage_seed(cfg, "eval/finetune-init"), Mode::Train)?;
    let finetune = evaluate(&scratch, &ds, Split::MetaTest, &cfg.eval, eval_seed)?;
    let file = EvalFile { meta, finetune };
    io::write_json(&ws.path("eval.json"), &file)?;
    log::info!(
        "eval: meta {:.4} ± {:.4}, finetune {:.4} ± {:.4}",
        file.meta.mean_accuracy,
        file.meta.ci95,
        file.finetune.mean_accuracy,
        file.finetune.ci95
    );
    Ok(file)
}

pub fn ag_stage(cfg: &RunConfig, ws: &Workspace) -> CliResult<Vec<AgRow>> {
    let pool = require_pool(ws)?;
    let ds = load_dataset(cfg)?;
    let basic = pool
        .records
        .get(cfg.ag.basic)
        .ok_or_else(|| CliError::Config(format!("ag.basic {} is outside the pool", cfg.ag.basic)))?;
    let aux = overlap_aux_pool(
        &ds,
        basic,
        &cfg.ag.shared,
        &cfg.zoo.arch,
        cfg.zoo.pretrain,
        stage_seed(cfg, "ag/aux"),
    )?;
    let arch = meta_arch(cfg, &ds)?;
    let rows = accuracy_gain(basic, &aux, &ds, &arch, &cfg.ag.run, stage_seed(cfg, "ag"))?;
    io::write_atomic(&ws.path("ag.csv"), ag_csv(&rows).as_bytes())?;
    Ok(rows)
}

pub fn read_diagnostics(ws: &Workspace) -> CliResult<Diagnostics> {
    let path = ws.path("diagnostics.csv");
    ws.require(&path, "train")?;
    let text = std::fs::read_to_string(&path).map_err(|e| tgr_core::Error::io(path.display().to_string(), e))?;
    Ok(Diagnostics::from_csv(&text)?)
}

pub fn read_log(ws: &Workspace) -> CliResult<Vec<EpochLog>> {
    let path = ws.path("train_log.json");
    ws.require(&path, "train")?;
    Ok(io::read_json(&path)?)
}
