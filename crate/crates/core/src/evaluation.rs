//! Episodic meta-testing and the accuracy-gain experiment.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::datasets::{sample_episode, Episode, EpisodeSpec, ImageDataset, Split};
use crate::error::{reject, Error, Result};
use crate::inversion::{recover_task, GeneratorState, InversionConfig, PseudoTask};
use crate::meta::maml::episode_outer_grad;
use crate::meta::{adapt, MetaState};
use crate::nn::{argmax_rows, ArchSpec, InputShape, Layer, NetworkState};
use crate::seed;
use crate::zoo::{pretrain_model, ArchPolicy, ModelPool, PretrainHyper, PretrainedModelRecord};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub spec: EpisodeSpec,
    pub episodes: usize,
    pub adapt_steps: usize,
    pub inner_lr: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            spec: EpisodeSpec::new(5, 5, 15),
            episodes: 120,
            adapt_steps: 10,
            inner_lr: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_accuracy: f64,
    /// `1.96 · std / √n` with the population standard deviation.
    pub ci95: f64,
    pub accuracies: Vec<f64>,
    pub num_episodes: usize,
    pub spec: EpisodeSpec,
    pub seed: u64,
}

impl EvalReport {
    pub fn from_accuracies(accuracies: Vec<f64>, spec: EpisodeSpec, seed: u64) -> Result<Self> {
        let n = accuracies.len();
        if n == 0 {
            return reject("no episodes to summarize");
        }
        let mean = accuracies.iter().sum::<f64>() / n as f64;
        let var = accuracies.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n as f64;
        Ok(EvalReport {
            mean_accuracy: mean,
            ci95: 1.96 * var.sqrt() / (n as f64).sqrt(),
            accuracies,
            num_episodes: n,
            spec,
            seed,
        })
    }
}

/// Adapt a copy of `model` on the support set, then score the query set.
///
/// Normalization uses batch statistics for both adaptation and scoring.
/// Predictions are restricted to the first `way` outputs.
pub fn adapt_and_eval<K>(model: &NetworkState, episode: &Episode<K>, inner_lr: f64, adapt_steps: usize) -> Result<f64> {
    let way = episode.class_map.len();
    if way > model.arch().num_outputs {
        return reject(format!("{way}-way episode for a {}-output head", model.arch().num_outputs));
    }
    let net = adapt(model, &episode.support, &episode.support_labels, inner_lr, adapt_steps)?;
    let logits = net.forward_logits(&episode.query)?;
    let (b, k) = logits.dims2();
    let sliced: Vec<f32> = (0..b).flat_map(|r| logits.data()[r * k..r * k + way].to_vec()).collect();
    let preds = argmax_rows(&crate::tensor::Tensor::new(vec![b, way], sliced));
    let hits = preds.iter().zip(&episode.query_labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / b as f64)
}

/// Mean query accuracy over seeded episodes from `split`.
pub fn evaluate(
    model: &NetworkState,
    dataset: &ImageDataset,
    split: Split,
    config: &EvalConfig,
    seed: u64,
) -> Result<EvalReport> {
    let classes = dataset.split(split);
    if classes.is_empty() {
        return reject(format!("split {split:?} has no classes"));
    }
    let mut accuracies = Vec::with_capacity(config.episodes);
    for i in 0..config.episodes {
        let ep = sample_episode(dataset, classes, config.spec, seed::derive(seed, "eval/episode", i as u64))?;
        accuracies.push(adapt_and_eval(model, &ep, config.inner_lr, config.adapt_steps)?);
    }
    EvalReport::from_accuracies(accuracies, config.spec, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgConfig {
    /// MAML iterations per training run.
    pub epochs: usize,
    /// Recovered tasks per teacher, cycled over iterations.
    pub batches: usize,
    /// Support images per class in recovered episodes; the rest are queries.
    pub shot: usize,
    pub inner_lr: f64,
    pub inner_steps: usize,
    pub outer_lr: f64,
    pub second_order: bool,
    pub inversion: InversionConfig,
    pub eval: EvalConfig,
}

impl Default for AgConfig {
    fn default() -> Self {
        AgConfig {
            epochs: 60,
            batches: 2,
            shot: 1,
            inner_lr: 0.01,
            inner_steps: 5,
            outer_lr: 1e-3,
            second_order: false,
            inversion: InversionConfig::default(),
            eval: EvalConfig {
                episodes: 60,
                ..EvalConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgRow {
    pub aux_id: String,
    pub overlap_ratio: f64,
    pub arch: String,
    pub ag: f64,
    pub p_joint: f64,
    pub p_basic: f64,
}

pub const AG_HEADER: &str = "aux_id,overlap_ratio,arch,ag";

pub fn ag_csv(rows: &[AgRow]) -> String {
    let mut out = format!("{AG_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{},{:.6},{},{:.6}\n", r.aux_id, r.overlap_ratio, r.arch, r.ag));
    }
    out
}

/// Short architecture label such as `conv4like-16`.
pub fn arch_label(arch: &ArchSpec) -> String {
    let width = arch.layers.iter().find_map(|l| match *l {
        Layer::Conv { out_channels, .. } => Some(out_channels),
        _ => None,
    });
    let kind = format!("{:?}", arch.kind).to_lowercase();
    match width {
        Some(w) => format!("{kind}-{w}"),
        None => kind,
    }
}

/// Shared fraction of the auxiliary teacher's classes.
pub fn overlap_ratio(basic: &PretrainedModelRecord, aux: &PretrainedModelRecord) -> f64 {
    let b: BTreeSet<usize> = basic.classes.iter().copied().collect();
    let shared = aux.classes.iter().filter(|c| b.contains(c)).count();
    shared as f64 / aux.classes.len().max(1) as f64
}

/// Recovered tasks of one teacher, split into per-class support/query
/// episodes on demand.
struct TeacherTasks {
    tasks: Vec<PseudoTask>,
}

impl TeacherTasks {
    fn recover(record: &PretrainedModelRecord, config: &AgConfig, seed: u64) -> Result<Self> {
        let mut generator = GeneratorState::for_teacher(
            &record.arch,
            config.inversion.generator_filters,
            seed::derive(seed, &format!("ag/generator/{}", record.id), 0),
        )?;
        let tasks = (0..config.batches.max(1))
            .map(|b| {
                let s = seed::derive(seed, &format!("ag/recover/{}", record.id), b as u64);
                recover_task(record, &mut generator, &config.inversion, s).map(|(t, _)| t)
            })
            .collect::<Result<_>>()?;
        Ok(TeacherTasks { tasks })
    }

    fn episode(&self, shot: usize, seed: u64) -> Result<Episode<usize>> {
        let mut rng = seed::rng(seed);
        let task = &self.tasks[rand::Rng::random_range(&mut rng, 0..self.tasks.len())];
        let way = task.way();
        let mut support = Vec::new();
        let mut query = Vec::new();
        for c in 0..way {
            let members: Vec<usize> = (0..task.labels.len()).filter(|&i| task.labels[i] == c).collect();
            if members.len() <= shot {
                return reject(format!(
                    "recovered task from {} has {} images of class {c}; need more than {shot}",
                    task.source_id,
                    members.len()
                ));
            }
            let order = rand::seq::index::sample(&mut rng, members.len(), members.len()).into_vec();
            support.push(order[..shot].iter().map(|&k| members[k]).collect());
            query.push(order[shot..].iter().map(|&k| members[k]).collect());
        }
        Ok(crate::datasets::assemble(&task.images, &support, &query, (0..way).collect()))
    }
}

/// Train a meta-model with MAML on episodes from `teachers`, summing the
/// per-teacher outer gradients at every iteration.
fn train_on(init: &NetworkState, teachers: &[&TeacherTasks], config: &AgConfig, seed: u64) -> Result<NetworkState> {
    let mut state = MetaState::new(init.clone(), config.outer_lr, config.outer_lr);
    for epoch in 0..config.epochs {
        let mut total = vec![0.0f32; state.model.arch().param_len()];
        for (t, tasks) in teachers.iter().enumerate() {
            // the same stream index for the basic teacher in every run
            let ep = tasks.episode(config.shot, seed::derive(seed, "ag/episode", ((epoch as u64) << 8) | t as u64))?;
            let out = episode_outer_grad(
                state.model.arch(),
                state.model.params(),
                &ep,
                config.inner_lr,
                config.inner_steps,
                config.second_order,
            )?;
            for (a, g) in total.iter_mut().zip(out.grad.to_f32_vec()) {
                *a += g;
            }
        }
        state.apply(&total, true)?;
    }
    Ok(state.model)
}

/// `P(basic + aux) − P(basic)` for every auxiliary teacher, from a
/// seed-identical initialization of `meta_arch`.
pub fn accuracy_gain(
    basic: &PretrainedModelRecord,
    aux_pool: &ModelPool,
    dataset: &ImageDataset,
    meta_arch: &ArchSpec,
    config: &AgConfig,
    seed: u64,
) -> Result<Vec<AgRow>> {
    let tag = |id: &str, e: Error| match e {
        Error::RejectedInput(m) => Error::RejectedInput(format!("aux {id}: {m}")),
        Error::NumericFailure { context, detail } => Error::NumericFailure {
            context: format!("aux {id}: {context}"),
            detail,
        },
        other => other,
    };
    let init = NetworkState::init(meta_arch.clone(), seed::derive(seed, "ag/init", 0), crate::nn::Mode::Train)?;
    let eval_seed = seed::derive(seed, "ag/eval", 0);
    let basic_tasks = TeacherTasks::recover(basic, config, seed)?;
    let basic_model = train_on(&init, &[&basic_tasks], config, seed)?;
    let p_basic = evaluate(&basic_model, dataset, Split::MetaTest, &config.eval, eval_seed)?.mean_accuracy;
    log::info!("AG basic {}: accuracy {p_basic:.4}", basic.id);
    let mut rows = Vec::with_capacity(aux_pool.len());
    for aux in &aux_pool.records {
        let aux_tasks = TeacherTasks::recover(aux, config, seed).map_err(|e| tag(&aux.id, e))?;
        let joint = train_on(&init, &[&basic_tasks, &aux_tasks], config, seed).map_err(|e| tag(&aux.id, e))?;
        let p_joint = evaluate(&joint, dataset, Split::MetaTest, &config.eval, eval_seed)
            .map_err(|e| tag(&aux.id, e))?
            .mean_accuracy;
        let row = AgRow {
            aux_id: aux.id.clone(),
            overlap_ratio: overlap_ratio(basic, aux),
            arch: arch_label(&aux.arch),
            ag: p_joint - p_basic,
            p_joint,
            p_basic,
        };
        log::info!("AG aux {}: overlap {:.2}, gain {:+.4}", row.aux_id, row.overlap_ratio, row.ag);
        rows.push(row);
    }
    Ok(rows)
}

/// Auxiliary teachers sharing exactly `shared[i]` classes with `basic`;
/// the remaining classes are drawn from other meta-train classes.
pub fn overlap_aux_pool(
    dataset: &ImageDataset,
    basic: &PretrainedModelRecord,
    shared: &[usize],
    policy: &ArchPolicy,
    hyper: PretrainHyper,
    seed: u64,
) -> Result<ModelPool> {
    let way = basic.way();
    let others: Vec<usize> = dataset
        .split(Split::MetaTrain)
        .iter()
        .copied()
        .filter(|c| !basic.classes.contains(c))
        .collect();
    let (h, w, c) = dataset.image_size();
    let input = InputShape {
        height: h,
        width: w,
        channels: c,
    };
    let mut records = Vec::with_capacity(shared.len());
    for (i, &k) in shared.iter().enumerate() {
        if k > way || way - k > others.len() {
            return reject(format!("cannot build a {way}-way teacher sharing {k} classes"));
        }
        let mut rng = seed::stream(seed, "ag/aux-classes", i as u64);
        let mut classes: Vec<usize> = rand::seq::index::sample(&mut rng, way, k)
            .into_iter()
            .map(|j| basic.classes[j])
            .collect();
        classes.extend(rand::seq::index::sample(&mut rng, others.len(), way - k).into_iter().map(|j| others[j]));
        classes.sort_unstable();
        let id = format!("aux{i:03}");
        let arch = policy.arch_for(i, input, way)?;
        records.push(pretrain_model(
            dataset,
            &classes,
            arch,
            hyper,
            &id,
            seed::derive(seed, "ag/aux-record", i as u64),
        )?);
    }
    ModelPool::new(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_arithmetic() {
        let spec = EpisodeSpec::new(5, 5, 15);
        let r = EvalReport::from_accuracies(vec![0.5; 10], spec, 1).unwrap();
        assert_eq!(r.mean_accuracy, 0.5);
        assert_eq!(r.ci95, 0.0);
        let acc: Vec<f64> = (0..600).map(|i| if i % 2 == 0 { 0.4 } else { 0.6 }).collect();
        let r = EvalReport::from_accuracies(acc, spec, 1).unwrap();
        assert!((r.ci95 - 1.96 * 0.1 / 600f64.sqrt()).abs() < 1e-12);
        assert!(EvalReport::from_accuracies(vec![], spec, 1).is_err());
    }

    #[test]
    fn ag_csv_columns() {
        let rows = vec![AgRow {
            aux_id: "aux000".into(),
            overlap_ratio: 0.4,
            arch: "conv4like-16".into(),
            ag: 0.5 - 0.45,
            p_joint: 0.5,
            p_basic: 0.45,
        }];
        assert_eq!(ag_csv(&rows), "aux_id,overlap_ratio,arch,ag\naux000,0.400000,conv4like-16,0.050000\n");
    }
}
