use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::bank::{replay_episode_from_bank, MemoryBank};
use super::igr::{explicit_regularizer, igr_update_gradient, task_gradients, GradientSpread, TaskEval, TaskLoss};
use super::kd::{kd_loss_var, teacher_targets};
use super::maml::{maml_step, MetaState};
use crate::autograd::Tape;
use crate::datasets::EpisodeSpec;
use crate::error::{reject, Error, Result};
use crate::grouping::GroupAssignment;
use crate::inversion::{recover_task, ClassKey, GeneratorState, InversionConfig, PseudoTask};
use crate::io;
use crate::nn::{collect_stats, forward, ArchSpec, ForwardOpts, ImageBatch, Mode, NetworkState, ParamVector};
use crate::seed;
use crate::tensor::Tensor;
use crate::zoo::{ModelPool, PretrainedModelRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Displacement step size.
    pub beta: f64,
    /// Teachers sampled per iteration.
    pub m: usize,
    pub epochs: usize,
    pub meta_lr: f64,
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub bank_capacity: usize,
    pub replay: EpisodeSpec,
    pub replay_inner_steps: usize,
    pub second_order: bool,
    pub replay_on: bool,
    /// Off: plain mean-gradient updates.
    pub regularization_on: bool,
    /// Off: sample from the whole pool as a single group.
    pub grouping_on: bool,
    pub temperature: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: 1e-3,
            m: 4,
            epochs: 100,
            meta_lr: 1e-3,
            inner_lr: 1e-2,
            outer_lr: 1e-3,
            bank_capacity: 20,
            replay: EpisodeSpec::new(5, 1, 5),
            replay_inner_steps: 5,
            second_order: true,
            replay_on: true,
            regularization_on: true,
            grouping_on: true,
            temperature: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return reject(format!("beta must be a non-negative number, got {}", self.beta));
        }
        if self.m == 0 {
            return reject("m must be at least 1");
        }
        if self.bank_capacity == 0 {
            return reject("bank_capacity must be at least 1");
        }
        if !(self.temperature > 0.0) {
            return reject("temperature must be positive");
        }
        for (name, lr) in [("meta_lr", self.meta_lr), ("inner_lr", self.inner_lr), ("outer_lr", self.outer_lr)] {
            if !(lr >= 0.0) || !lr.is_finite() {
                return reject(format!("{name} must be a non-negative number"));
            }
        }
        Ok(())
    }
}

/// Per-epoch training diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRow {
    pub epoch: usize,
    /// `(1/2m) Σ ‖∇L_i − ∇L̄‖²` at the pre-update parameters.
    pub regularizer: f64,
    pub mean_cosine: f64,
    pub kd_loss: f64,
    /// `None` when the bank could not supply an episode.
    pub replay_loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Diagnostics {
    pub rows: Vec<DiagnosticsRow>,
}

impl Diagnostics {
    pub const HEADER: &'static str = "epoch,regularizer,mean_cosine,kd_loss,replay_loss";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            let replay = r.replay_loss.map(|v| format!("{v:.9e}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{:.9e},{:.9e},{:.9e},{}\n",
                r.epoch, r.regularizer, r.mean_cosine, r.kd_loss, replay
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next().map(str::trim) != Some(Self::HEADER) {
            return reject(format!("diagnostics header must be `{}`", Self::HEADER));
        }
        let bad = |line: &str| Error::RejectedInput(format!("malformed diagnostics row `{line}`"));
        let mut rows = Vec::new();
        for line in lines {
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            if cells.len() != 5 {
                return Err(bad(line));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(line));
            rows.push(DiagnosticsRow {
                epoch: cells[0].parse().map_err(|_| bad(line))?,
                regularizer: num(cells[1])?,
                mean_cosine: num(cells[2])?,
                kd_loss: num(cells[3])?,
                replay_loss: if cells[4].is_empty() { None } else { Some(num(cells[4])?) },
            });
        }
        Ok(Diagnostics { rows })
    }
}

/// Which teachers one iteration drew.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub group: usize,
    pub record_ids: Vec<String>,
}

/// Supplies the pseudo-task for teacher slot `slot` of iteration `epoch`.
///
/// Implementations must not depend on the meta-model, so that runs that
/// differ only in the update rule see the same task sequence.
pub trait TaskSource {
    fn task(&mut self, record: &PretrainedModelRecord, epoch: usize, slot: usize) -> Result<PseudoTask>;
}

fn draw_index(epoch: usize, slot: usize) -> u64 {
    ((epoch as u64) << 16) | slot as u64
}

/// Fresh inversion on every request, warm-starting a per-teacher generator.
pub struct LiveRecovery {
    config: InversionConfig,
    seed: u64,
    generators: BTreeMap<String, GeneratorState>,
}

impl LiveRecovery {
    pub fn new(config: InversionConfig, seed: u64) -> Self {
        LiveRecovery {
            config,
            seed,
            generators: BTreeMap::new(),
        }
    }
}

fn generator_seed(root: u64, id: &str) -> u64 {
    seed::derive(root, &format!("generator/{id}"), 0)
}

impl TaskSource for LiveRecovery {
    fn task(&mut self, record: &PretrainedModelRecord, epoch: usize, slot: usize) -> Result<PseudoTask> {
        let generator = match self.generators.entry(record.id.clone()) {
            std::collections::btree_map::Entry::Occupied(e) => e.into_mut(),
            std::collections::btree_map::Entry::Vacant(e) => e.insert(GeneratorState::for_teacher(
                &record.arch,
                self.config.generator_filters,
                generator_seed(self.seed, &record.id),
            )?),
        };
        let s = seed::derive(self.seed, "recover/live", draw_index(epoch, slot));
        Ok(recover_task(record, generator, &self.config, s)?.0)
    }
}

/// Pre-recovered task variants per teacher; each request picks one with a
/// seed derived from `(epoch, slot)` only.
#[derive(Clone, Debug)]
pub struct TaskCache {
    seed: u64,
    tasks: BTreeMap<String, Vec<PseudoTask>>,
}

#[derive(Serialize, Deserialize)]
struct CacheManifest {
    seed: u64,
    image_shape: [usize; 3],
    entries: Vec<CacheEntry>,
    blob_sha256: String,
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    id: String,
    way: usize,
    labels: Vec<usize>,
}

impl TaskCache {
    /// Recover `variants` tasks per record with a generator warm-started
    /// across variants. `progress` sees each record id with its tasks and
    /// the final-step losses of each recovery.
    pub fn build(
        pool: &ModelPool,
        config: &InversionConfig,
        variants: usize,
        seed: u64,
        mut progress: impl FnMut(&str, usize, &PseudoTask, &crate::inversion::InversionTrace),
    ) -> Result<Self> {
        if variants == 0 {
            return reject("task cache needs at least one variant per teacher");
        }
        let mut tasks = BTreeMap::new();
        for (r, record) in pool.records.iter().enumerate() {
            let mut generator =
                GeneratorState::for_teacher(&record.arch, config.generator_filters, generator_seed(seed, &record.id))?;
            let mut list = Vec::with_capacity(variants);
            for v in 0..variants {
                let s = seed::derive(seed, "recover/cache", ((r as u64) << 16) | v as u64);
                let (task, trace) = recover_task(record, &mut generator, config, s)?;
                progress(&record.id, v, &task, &trace);
                list.push(task);
            }
            tasks.insert(record.id.clone(), list);
        }
        Ok(TaskCache { seed, tasks })
    }

    pub fn variants(&self, id: &str) -> Option<&[PseudoTask]> {
        self.tasks.get(id).map(Vec::as_slice)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.tasks.keys().map(String::as_str)
    }

    /// `<dir>/tasks.json` and `<dir>/tasks.bin`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let mut blob = Vec::new();
        let mut entries = Vec::new();
        let mut shape = [0; 3];
        for (id, list) in &self.tasks {
            for t in list {
                shape = [t.images.height, t.images.width, t.images.channels];
                blob.extend(t.images.data.iter().flat_map(|v| v.to_le_bytes()));
                entries.push(CacheEntry {
                    id: id.clone(),
                    way: t.way(),
                    labels: t.labels.clone(),
                });
            }
        }
        io::write_atomic(&dir.join("tasks.bin"), &blob)?;
        io::write_json(
            &dir.join("tasks.json"),
            &CacheManifest {
                seed: self.seed,
                image_shape: shape,
                entries,
                blob_sha256: io::sha256_hex(&blob),
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: CacheManifest = io::read_json(&dir.join("tasks.json"))?;
        let blob_path = dir.join("tasks.bin");
        let blob = io::read_bytes(&blob_path)?;
        let actual = io::sha256_hex(&blob);
        if actual != manifest.blob_sha256 {
            return Err(Error::Checksum {
                path: blob_path.display().to_string(),
                expected: manifest.blob_sha256,
                actual,
            });
        }
        let [h, w, c] = manifest.image_shape;
        let mut offset = 0;
        let mut tasks: BTreeMap<String, Vec<PseudoTask>> = BTreeMap::new();
        for e in manifest.entries {
            let bytes = e.labels.len() * h * w * c * 4;
            let Some(chunk) = blob.get(offset..offset + bytes) else {
                return reject(format!("task blob too short for entry {}", e.id));
            };
            offset += bytes;
            let data = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let class_keys = (0..e.way)
                .map(|local| ClassKey {
                    source: e.id.clone(),
                    local,
                })
                .collect();
            tasks.entry(e.id.clone()).or_default().push(PseudoTask {
                images: ImageBatch::new(h, w, c, data)?,
                labels: e.labels,
                source_id: e.id,
                class_keys,
            });
        }
        if offset != blob.len() {
            return reject("task blob has trailing bytes");
        }
        Ok(TaskCache {
            seed: manifest.seed,
            tasks,
        })
    }
}

impl TaskSource for TaskCache {
    fn task(&mut self, record: &PretrainedModelRecord, epoch: usize, slot: usize) -> Result<PseudoTask> {
        let Some(list) = self.tasks.get(&record.id) else {
            return reject(format!("task cache has no entry for {}", record.id));
        };
        let pick = seed::derive(self.seed, "cache/pick", draw_index(epoch, slot)) % list.len() as u64;
        Ok(list[pick as usize].clone())
    }
}

/// Distillation loss of the meta-model on one pseudo-task.
pub struct KdTask<'a> {
    pub arch: &'a ArchSpec,
    pub images: Tensor<f32>,
    pub targets: Tensor<f32>,
    pub labels: Vec<usize>,
    pub temperature: f64,
}

impl<'a> KdTask<'a> {
    pub fn new(arch: &'a ArchSpec, teacher: &NetworkState, task: &PseudoTask, temperature: f64) -> Result<Self> {
        let teacher_logits = teacher.with_mode(Mode::Eval).forward_logits(&task.images)?;
        Ok(KdTask {
            arch,
            images: task.images.to_tensor(),
            targets: teacher_targets(&teacher_logits, temperature),
            labels: task.labels.clone(),
            temperature,
        })
    }
}

impl TaskLoss for KdTask<'_> {
    fn evaluate(&self, params: &[f64]) -> Result<TaskEval> {
        let tape = Tape::<f32>::new();
        let p = tape.var(Tensor::from_f64(vec![params.len()], params));
        let x = tape.constant(self.images.clone());
        let out = forward(self.arch, p, x, Mode::Train, ForwardOpts::default())?;
        let loss = kd_loss_var(&self.targets, out.output, &self.labels, self.temperature)?;
        let value = loss.item();
        let grad = tape.grad(loss, &[p], false)[0].value().to_f64_vec();
        Ok(TaskEval {
            value,
            grad,
            stats: collect_stats(&out.bn_stats),
        })
    }
}

/// Everything the per-epoch hook can inspect.
pub struct EpochReport<'a> {
    pub log: &'a EpochLog,
    pub row: &'a DiagnosticsRow,
    pub tasks: &'a [PseudoTask],
    pub state: &'a MetaState,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: MetaState,
    pub diagnostics: Diagnostics,
    pub log: Vec<EpochLog>,
}

/// Draw `m` members of `group`, without replacement when it is large
/// enough.
fn sample_members(group: &[usize], m: usize, rng: &mut seed::Rng) -> Vec<usize> {
    if group.len() >= m {
        rand::seq::index::sample(rng, group.len(), m)
            .into_iter()
            .map(|k| group[k])
            .collect()
    } else {
        (0..m).map(|_| group[rng.random_range(0..group.len())]).collect()
    }
}

/// Meta-train `model` on tasks recovered from `pool`.
pub fn train(
    pool: &ModelPool,
    groups: &GroupAssignment,
    config: &TrainConfig,
    model: NetworkState,
    source: &mut dyn TaskSource,
    seed: u64,
    hook: &mut dyn FnMut(&EpochReport<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if pool.is_empty() {
        return reject("empty model pool");
    }
    let group_list: Vec<Vec<usize>> = if config.grouping_on {
        if groups.group_of.len() != pool.len() {
            return reject(format!(
                "grouping covers {} models, pool has {}",
                groups.group_of.len(),
                pool.len()
            ));
        }
        groups.groups()
    } else {
        vec![(0..pool.len()).collect()]
    };
    let arch = model.arch().clone();
    if let Some(r) = pool.records.iter().find(|r| r.way() > arch.num_outputs) {
        return reject(format!(
            "teacher {} has {} classes, meta head has {}",
            r.id,
            r.way(),
            arch.num_outputs
        ));
    }
    let teachers: Vec<NetworkState> = pool.records.iter().map(|r| r.network()).collect::<Result<_>>()?;

    let mut state = MetaState::new(model, config.meta_lr, config.outer_lr);
    let mut bank = MemoryBank::new(config.bank_capacity)?;
    let mut diagnostics = Diagnostics::default();
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut rng = seed::stream(seed, "train/sample", epoch as u64);
        let group = rng.random_range(0..group_list.len());
        let members = sample_members(&group_list[group], config.m, &mut rng);

        let mut tasks = Vec::with_capacity(members.len());
        for (slot, &r) in members.iter().enumerate() {
            tasks.push(source.task(&pool.records[r], epoch, slot)?);
        }
        let kd_tasks: Vec<KdTask> = members
            .iter()
            .zip(&tasks)
            .map(|(&r, t)| KdTask::new(&arch, &teachers[r], t, config.temperature))
            .collect::<Result<_>>()?;
        let losses: Vec<&dyn TaskLoss> = kd_tasks.iter().map(|t| t as &dyn TaskLoss).collect();

        let params: Vec<f64> = state.model.params().as_slice().iter().map(|&v| v as f64).collect();
        let (update, first_pass) = if config.regularization_on {
            let out = igr_update_gradient(&params, &losses, config.beta)?;
            (out.update, out.first_pass)
        } else {
            let fp = task_gradients(&params, &losses)?;
            (fp.mean_grad.clone(), fp)
        };
        let GradientSpread {
            regularizer,
            mean_cosine,
        } = explicit_regularizer(&first_pass.grads);
        let kd_loss = first_pass.losses.iter().sum::<f64>() / first_pass.losses.len() as f64;

        let update: Vec<f32> = update.iter().map(|&v| v as f32).collect();
        state.apply(&update, false)?;
        let mut p = state.model.params().as_slice().to_vec();
        for stats in &first_pass.stats {
            crate::nn::commit_bn_stats(&arch, &mut p, stats);
        }
        state.model.set_params(ParamVector::new(p))?;

        for t in &tasks {
            bank.push(t.clone());
        }
        let replay_loss = if config.replay_on {
            let episode_seed = seed::derive(seed, "train/replay", epoch as u64);
            match replay_episode_from_bank(&bank, config.replay, episode_seed) {
                Ok(ep) => Some(maml_step(
                    &mut state,
                    &ep,
                    config.inner_lr,
                    config.replay_inner_steps,
                    config.second_order,
                )?),
                Err(Error::InsufficientBank(why)) => {
                    log::debug!("epoch {epoch}: replay skipped, {why}");
                    None
                }
                Err(e) => return Err(e),
            }
        } else {
            None
        };

        state.epoch += 1;
        let row = DiagnosticsRow {
            epoch,
            regularizer,
            mean_cosine,
            kd_loss,
            replay_loss,
        };
        let entry = EpochLog {
            epoch,
            group,
            record_ids: members.iter().map(|&r| pool.records[r].id.clone()).collect(),
        };
        log::debug!(
            "epoch {epoch}: group {group}, kd {kd_loss:.4}, reg {regularizer:.3e}, cos {mean_cosine:.3}"
        );
        hook(&EpochReport {
            log: &entry,
            row: &row,
            tasks: &tasks,
            state: &state,
        })?;
        diagnostics.rows.push(row);
        log.push(entry);
    }
    Ok(TrainOutcome {
        state,
        diagnostics,
        log,
    })
}
