//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 1-6 and 10 are exact or thresholded checks and fail the process.
//! Criteria 7-9 are empirical direction checks on desk-scale training; their
//! verdict is printed but does not set the exit code.
//!
//! `TGR_ACCEPTANCE=1,4,10` restricts the run to the listed criteria.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use tgr_cli::config::{self, RunConfig};
use tgr_cli::stages::{self, Workspace};
use tgr_core::datasets::{ImageDataset, Split};
use tgr_core::evaluation::evaluate;
use tgr_core::grouping::{
    dissimilarity_matrix, fim_diagonal_with, fisher_network, oracle_group, spectral_group, DissimilarityMatrix,
    GroupAssignment, HeadFit, ProbeSpec, TaskEmbedding,
};
use tgr_core::inversion::{recover_task, teacher_accuracy, GeneratorState};
use tgr_core::meta::{igr_update_gradient, FnLoss, TaskCache, TaskLoss, TrainOutcome};
use tgr_core::nn::{per_sample_loglik_grads, Mode};
use tgr_core::seed;
use tgr_core::zoo::{build_pool, ModelPool};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn within(elapsed: Duration, budget_s: u64) -> bool {
    elapsed <= Duration::from_secs(budget_s)
}

// ---------------------------------------------------------------- oracles

type Mat = Vec<Vec<f64>>;

fn matvec(a: &Mat, x: &[f64]) -> Vec<f64> {
    a.iter().map(|row| row.iter().zip(x).map(|(r, v)| r * v).sum()).collect()
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let m = rows.len() as f64;
    (0..rows[0].len()).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / m).collect()
}

fn sup(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn random_sym(dim: usize, rng: &mut impl Rng) -> Mat {
    let mut a = vec![vec![0.0; dim]; dim];
    for i in 0..dim {
        for j in 0..=i {
            let v: f64 = rng.random_range(-1.0..1.0);
            a[i][j] = v;
            a[j][i] = v;
        }
    }
    a
}

/// `½θᵀAθ + bᵀθ + Σ_k a_k sin θ_k`; `amp = 0` makes it an exact quadratic.
struct Task {
    a: Mat,
    b: Vec<f64>,
    amp: Vec<f64>,
}

impl Task {
    fn random(dim: usize, wavy: bool, rng: &mut impl Rng) -> Self {
        let amp = (0..dim).map(|_| if wavy { rng.random_range(-2.0..2.0) } else { 0.0 }).collect();
        Task {
            a: random_sym(dim, rng),
            b: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            amp,
        }
    }

    fn grad(&self, x: &[f64]) -> Vec<f64> {
        let ax = matvec(&self.a, x);
        (0..x.len()).map(|k| ax[k] + self.b[k] + self.amp[k] * x[k].cos()).collect()
    }

    fn hess_times(&self, x: &[f64], v: &[f64]) -> Vec<f64> {
        let av = matvec(&self.a, v);
        (0..x.len()).map(|k| av[k] - self.amp[k] * x[k].sin() * v[k]).collect()
    }
}

fn igr(tasks: &[Task], x: &[f64], beta: f64) -> Vec<f64> {
    let losses: Vec<_> = tasks.iter().map(|t| FnLoss(move |p: &[f64]| Ok((0.0, t.grad(p))))).collect();
    let refs: Vec<&dyn TaskLoss> = losses.iter().map(|l| l as &dyn TaskLoss).collect();
    igr_update_gradient(x, &refs, beta).unwrap().update
}

/// `∇L̄ + (β/2m)∇R` with `∇R = 2Σ H_i(∇L_i − ∇L̄)`.
fn expansion(tasks: &[Task], x: &[f64], beta: f64) -> Vec<f64> {
    let grads: Vec<Vec<f64>> = tasks.iter().map(|t| t.grad(x)).collect();
    let mean = mean_rows(&grads);
    let terms: Vec<Vec<f64>> = tasks.iter().zip(&grads).map(|(t, g)| t.hess_times(x, &sub(g, &mean))).collect();
    mean.iter().zip(mean_rows(&terms)).map(|(g, r)| g + beta * r).collect()
}

fn planted(s: u64) -> (DissimilarityMatrix, Vec<usize>) {
    let mut rng = seed::stream(s, "acceptance/planted", 0);
    let (a, b) = (rng.random_range(2..=5usize), rng.random_range(2..=5usize));
    let n = a + b;
    let mut block: Vec<usize> = (0..n).map(|i| usize::from(i >= a)).collect();
    block.shuffle(&mut rng);
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = if block[i] == block[j] { rng.random_range(0.6..1.0) } else { rng.random_range(0.0..0.1) };
            w[i * n + j] = v;
            w[j * n + i] = v;
        }
    }
    (DissimilarityMatrix::new(n, w).unwrap(), block)
}

// ---------------------------------------------------------------- exact criteria

fn igr_closed_form() -> Verdict {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for e in 0..100u64 {
        let mut rng = seed::stream(e, "acceptance/quadratic", 0);
        let dim = 1 + (e as usize % 20);
        let m = if e % 2 == 0 { 2 } else { 4 };
        let tasks: Vec<Task> = (0..m).map(|_| Task::random(dim, false, &mut rng)).collect();
        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        worst = worst.max(sup(&sub(&igr(&tasks, &x, 1e-3), &expansion(&tasks, &x, 1e-3))));
    }
    let t = start.elapsed();
    verdict(worst <= 1e-8 && within(t, 10), format!("max inf-norm error {worst:.2e} over 100 ensembles, {t:.1?}"))
}

fn igr_order() -> Verdict {
    let start = Instant::now();
    let mut ratios: Vec<f64> = (0..20u64)
        .map(|s| {
            let mut rng = seed::stream(s, "acceptance/wavy", 0);
            let tasks: Vec<Task> = (0..4).map(|_| Task::random(8, true, &mut rng)).collect();
            let x: Vec<f64> = (0..8).map(|_| rng.random_range(-1.5..1.5)).collect();
            let residual = |beta: f64| {
                sub(&igr(&tasks, &x, beta), &expansion(&tasks, &x, beta)).iter().map(|v| v * v).sum::<f64>().sqrt()
            };
            residual(1e-2) / residual(5e-3)
        })
        .collect();
    ratios.sort_by(f64::total_cmp);
    let median = 0.5 * (ratios[9] + ratios[10]);
    let t = start.elapsed();
    verdict(
        (3.5..=4.5).contains(&median) && within(t, 30),
        format!("median residual ratio {median:.3} over 20 seeds, {t:.1?}"),
    )
}

fn spectral_vs_exhaustive() -> Verdict {
    let start = Instant::now();
    let agree = (0..50u64)
        .filter(|&s| {
            let (w, block) = planted(s);
            let spectral = spectral_group(&w, 2, s).unwrap();
            spectral == oracle_group(&w, 2).unwrap() && spectral == GroupAssignment::canonical(2, &block)
        })
        .count();
    let t = start.elapsed();
    verdict(agree == 50 && within(t, 60), format!("{agree}/50 planted matrices agree, {t:.1?}"))
}

fn dissimilarity_properties() -> Verdict {
    let start = Instant::now();
    let mut violations = 0;
    for s in 0..200u64 {
        let mut rng = seed::stream(s, "acceptance/embeddings", 0);
        let (n, d) = (rng.random_range(2..8usize), rng.random_range(1..10usize));
        let sets: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let mut v: Vec<f64> =
                    (0..d).map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.0..5.0) }).collect();
                if v.iter().all(|x| *x == 0.0) {
                    v[0] = 1.0;
                }
                v
            })
            .collect();
        let scale = 10f64.powf(rng.random_range(-3.0..3.0));
        let w = dissimilarity_matrix(&sets.iter().cloned().map(TaskEmbedding).collect::<Vec<_>>()).unwrap();
        let ws = dissimilarity_matrix(
            &sets.iter().map(|v| TaskEmbedding(v.iter().map(|x| x * scale).collect())).collect::<Vec<_>>(),
        )
        .unwrap();
        let ok = (0..n).all(|i| {
            w.get(i, i) == 0.0
                && (0..n).all(|j| {
                    w.get(i, j) == w.get(j, i)
                        && (0.0..=1.0).contains(&w.get(i, j))
                        && (w.get(i, j) - ws.get(i, j)).abs() <= 1e-9
                })
        });
        violations += usize::from(!ok);
    }
    let t = start.elapsed();
    verdict(violations == 0 && within(t, 10), format!("{violations} violations over 200 embedding sets, {t:.1?}"))
}

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/smoke.toml")
}

fn desk_config(root_seed: u64) -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/desk.toml");
    config::load(&path, &[], Some(root_seed)).unwrap()
}

fn determinism() -> Verdict {
    let start = Instant::now();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let status = Command::new(env!("CARGO_BIN_EXE_tgr"))
            .args(["all", "--config"])
            .arg(smoke_config())
            .arg("--output")
            .arg(d.path())
            .env("RUST_LOG", "warn")
            .status()
            .unwrap();
        if !status.success() {
            return verdict(false, format!("`tgr all` exited with {status}"));
        }
    }
    let same = ["groups.json", "eval.json"]
        .iter()
        .all(|f| std::fs::read(dirs[0].path().join(f)).unwrap() == std::fs::read(dirs[1].path().join(f)).unwrap());
    verdict(same, format!("groups.json and eval.json byte-identical: {same}, {:.1?}", start.elapsed()))
}

// ---------------------------------------------------------------- desk pipeline

/// Stage outputs of one root seed, kept in memory.
struct Desk {
    cfg: RunConfig,
    ws: Workspace,
    _dir: tempfile::TempDir,
    ds: ImageDataset,
    pool: ModelPool,
    cache: TaskCache,
    groups: GroupAssignment,
    setup: Duration,
}

impl Desk {
    fn build(root_seed: u64) -> Desk {
        let start = Instant::now();
        let cfg = desk_config(root_seed);
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::new(dir.path()).unwrap();
        let pool = stages::zoo_build(&cfg, &ws).unwrap();
        let cache = stages::invert(&cfg, &ws).unwrap();
        stages::embed(&cfg, &ws).unwrap();
        let groups = stages::group(&cfg, &ws).unwrap();
        let ds = stages::load_dataset(&cfg).unwrap();
        eprintln!("desk seed {root_seed}: stages up to `group` in {:.0?}, groups {:?}", start.elapsed(), groups.groups());
        Desk { cfg, ws, _dir: dir, ds, pool, cache, groups, setup: start.elapsed() }
    }

    fn train(&self, grouping: bool, igr: bool) -> (TrainOutcome, f64) {
        let mut cfg = self.cfg.clone();
        cfg.train.meta.grouping_on = grouping;
        cfg.train.meta.regularization_on = igr;
        let mut source = self.cache.clone();
        let out = stages::train_in_memory(&cfg, &self.pool, &self.groups, &mut source, &mut |_| Ok(())).unwrap();
        let report = evaluate(&out.state.model, &self.ds, Split::MetaTest, &cfg.eval, seed::derive(cfg.seed, "eval", 0))
            .unwrap();
        (out, report.mean_accuracy)
    }
}

fn fim_oracle(desk: &Desk) -> Verdict {
    let (probe_net, _) = stages::load_network(&desk.ws.probe(), Mode::Eval).unwrap();
    let probe = ProbeSpec::new(probe_net).unwrap();
    let classes = &desk.ds.split(Split::MetaTrain)[..5];
    let mut picks = Vec::new();
    let mut labels = Vec::new();
    for j in 0..64 {
        picks.push(desk.ds.indices_of(classes[j % 5])[j / 5]);
        labels.push(j % 5);
    }
    let images = desk.ds.images.select(&picks);
    let start = Instant::now();
    let net = fisher_network::<f64>(&probe, &images, &labels, 5, HeadFit::default()).unwrap();
    let fim = fim_diagonal_with(&net, &images, &labels).unwrap();
    let elapsed = start.elapsed();
    let rows = per_sample_loglik_grads(&net.arch, &net.params, Mode::Eval, &images, &labels).unwrap();
    let oracle: Vec<f64> = net
        .coords
        .iter()
        .map(|&k| rows.iter().map(|g| g.data()[k] * g.data()[k]).sum::<f64>() / rows.len() as f64)
        .collect();
    let scale = oracle.iter().fold(0.0f64, |m, v| m.max(*v));
    let err = fim.as_slice().iter().zip(&oracle).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale;
    verdict(
        fim.len() == oracle.len() && err <= 1e-10 && within(elapsed, 30),
        format!("relative error {err:.2e} over {} coordinates, {elapsed:.1?}", oracle.len()),
    )
}

fn inversion_progress() -> Verdict {
    let cfg = desk_config(0);
    let ds = stages::load_dataset(&cfg).unwrap();
    let pretrain = Instant::now();
    let pool = build_pool(&ds, 8, cfg.zoo.way, &cfg.zoo.arch, cfg.zoo.pretrain, seed::derive(0, "acceptance/pool", 0))
        .unwrap();
    let pretrain = pretrain.elapsed();
    let start = Instant::now();
    let mut failing = Vec::new();
    let (mut worst_drop, mut worst_acc) = (f64::INFINITY, f64::INFINITY);
    for (k, record) in pool.records.iter().enumerate() {
        let s = seed::derive(0, "acceptance/recover", k as u64);
        let mut generator =
            GeneratorState::for_teacher(&record.arch, cfg.inversion.recovery.generator_filters, s).unwrap();
        let (task, trace) = recover_task(record, &mut generator, &cfg.inversion.recovery, s).unwrap();
        let first = trace.losses[0].l_ce;
        let last = trace.losses[trace.losses.len() - 1].l_ce;
        let drop = 1.0 - last / first;
        let acc = teacher_accuracy(record, &task).unwrap();
        worst_drop = worst_drop.min(drop);
        worst_acc = worst_acc.min(acc);
        if drop < 0.5 || acc < 0.9 {
            failing.push(record.id.clone());
        }
    }
    let t = start.elapsed();
    verdict(
        failing.is_empty() && within(t, 300),
        format!(
            "8 teachers, worst CE reduction {:.1}%, worst teacher accuracy {worst_acc:.3}, failing {failing:?}, recovery {t:.0?} (pool pre-training {pretrain:.0?})",
            100.0 * worst_drop
        ),
    )
}

// ---------------------------------------------------------------- direction checks

struct Ablation {
    vanilla: f64,
    group: f64,
    igr: f64,
    both: f64,
}

fn regularizer_trend(erm: &TrainOutcome, igr: &TrainOutcome, elapsed: Duration) -> Verdict {
    let (e, i) = (erm.diagnostics.rows.last().unwrap(), igr.diagnostics.rows.last().unwrap());
    let matched = erm.log.iter().zip(&igr.log).all(|(a, b)| a.record_ids == b.record_ids);
    verdict(
        matched && i.regularizer < e.regularizer && i.mean_cosine > e.mean_cosine && within(elapsed, 900),
        format!(
            "final epoch regularizer {:.3} (IGR) vs {:.3} (ERM), cosine {:.3} vs {:.3}, tasks matched: {matched}, {elapsed:.0?}",
            i.regularizer, e.regularizer, i.mean_cosine, e.mean_cosine
        ),
    )
}

fn ablation_direction(runs: &[Ablation], elapsed: Duration) -> Verdict {
    let n = runs.len() as f64;
    let mean = |f: fn(&Ablation) -> f64| runs.iter().map(f).sum::<f64>() / n;
    let (v, g, i, b) = (mean(|r| r.vanilla), mean(|r| r.group), mean(|r| r.igr), mean(|r| r.both));
    let wins = runs.iter().filter(|r| r.both > r.vanilla).count();
    let per_seed: Vec<String> = runs
        .iter()
        .map(|r| format!("[{:.3} {:.3} {:.3} {:.3}]", r.vanilla, r.group, r.igr, r.both))
        .collect();
    verdict(
        v <= g && v <= i && v < b && wins >= 4 && within(elapsed, 7200),
        format!(
            "mean accuracy vanilla {v:.4}, +group {g:.4}, +IGR {i:.4}, both {b:.4}; both beats vanilla on {wins}/5 seeds; per seed {}; {elapsed:.0?}",
            per_seed.join(" ")
        ),
    )
}

fn ag_trend(desk: &Desk) -> Verdict {
    let start = Instant::now();
    let rows = stages::ag_stage(&desk.cfg, &desk.ws).unwrap();
    let bucket = |keep: &dyn Fn(f64) -> bool| -> Vec<f64> {
        rows.iter().filter(|r| keep(r.overlap_ratio)).map(|r| r.ag).collect()
    };
    let low = bucket(&|o| o <= 0.4 + 1e-9);
    let full = bucket(&|o| o >= 1.0 - 1e-9);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let t = start.elapsed();
    verdict(
        low.len() >= 5 && full.len() >= 5 && mean(&low) > mean(&full) && within(t, 3600),
        format!(
            "mean gain {:+.4} over {} aux at 0-40% overlap vs {:+.4} over {} aux at 100%, {t:.0?}",
            mean(&low),
            low.len(),
            mean(&full),
            full.len()
        ),
    )
}

// ---------------------------------------------------------------- driver

fn main() {
    let selected: Option<BTreeSet<u32>> =
        std::env::var("TGR_ACCEPTANCE").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wants = |k: u32| selected.as_ref().is_none_or(|s| s.contains(&k));
    let mut hard_failures = Vec::new();
    let mut report = |k: u32, name: &str, gating: bool, v: Verdict| {
        let status = if v.pass { "PASS" } else { "FAIL" };
        println!("criterion {k:>2} [{name}]: {status} ({})", v.detail);
        if gating && !v.pass {
            hard_failures.push(k);
        }
    };

    if wants(1) {
        report(1, "IGR closed form", true, igr_closed_form());
    }
    if wants(2) {
        report(2, "IGR order", true, igr_order());
    }
    if wants(4) {
        report(4, "spectral vs exhaustive", true, spectral_vs_exhaustive());
    }
    if wants(5) {
        report(5, "dissimilarity properties", true, dissimilarity_properties());
    }
    if wants(10) {
        report(10, "determinism", true, determinism());
    }
    if wants(6) {
        report(6, "inversion progress", true, inversion_progress());
    }

    if [3, 7, 8, 9].into_iter().any(&wants) {
        let desk = Desk::build(SEEDS[0]);
        if wants(3) {
            report(3, "FIM oracle", true, fim_oracle(&desk));
        }
        if wants(7) || wants(8) {
            let mut runs = Vec::new();
            let mut ablation_time = desk.setup;
            let start = Instant::now();
            let (vanilla, va) = desk.train(false, false);
            let (igr, ia) = desk.train(false, true);
            if wants(7) {
                report(7, "regularizer trend", false, regularizer_trend(&vanilla, &igr, start.elapsed()));
            }
            if wants(8) {
                let (_, ga) = desk.train(true, false);
                let (_, ba) = desk.train(true, true);
                runs.push(Ablation { vanilla: va, group: ga, igr: ia, both: ba });
                ablation_time += start.elapsed();
                for &s in &SEEDS[1..] {
                    let start = Instant::now();
                    let d = Desk::build(s);
                    let acc = |g, r| d.train(g, r).1;
                    runs.push(Ablation {
                        vanilla: acc(false, false),
                        group: acc(true, false),
                        igr: acc(false, true),
                        both: acc(true, true),
                    });
                    ablation_time += start.elapsed();
                }
                report(8, "ablation direction", false, ablation_direction(&runs, ablation_time));
            }
        }
        if wants(9) {
            report(9, "AG trend", false, ag_trend(&desk));
        }
    }

    if !hard_failures.is_empty() {
        eprintln!("gating criteria failed: {hard_failures:?}");
        std::process::exit(1);
    }
}
