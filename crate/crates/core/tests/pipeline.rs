//! Datasets, teachers, inversion and evaluation on small end-to-end inputs.

use std::collections::BTreeSet;

use rand::Rng;
use tgr_core::datasets::{make_synthetic_domains, sample_episode, EpisodeSpec, ImageDataset, Split, SyntheticConfig};
use tgr_core::evaluation::{adapt_and_eval, evaluate, EvalConfig};
use tgr_core::inversion::{recover_task, GeneratorState, InversionConfig};
use tgr_core::meta::maml::batch_ce;
use tgr_core::nn::{loss_grad, ArchKind, ArchSpec, InputShape, Mode, NetworkState};
use tgr_core::seed;
use tgr_core::tensor::Tensor;
use tgr_core::zoo::{build_pool, load_pool, pretrain_model, save_pool, ArchPolicy, PretrainHyper};

fn small_dataset(image_size: usize, num_domains: usize) -> ImageDataset {
    make_synthetic_domains(
        &SyntheticConfig {
            num_domains,
            classes_per_domain: 8,
            samples_per_class: 30,
            image_size,
            split: [4, 2, 2],
            ..SyntheticConfig::default()
        },
        13,
    )
    .unwrap()
}

#[test]
fn domain_channel_means_are_shift_apart() {
    let cfg = SyntheticConfig::default();
    let ds = make_synthetic_domains(&cfg, 2).unwrap();
    let s = cfg.image_size;
    // grid average of the noise-free prototype, per domain and channel
    let mut per_domain = vec![vec![Vec::new(); 3]; cfg.num_domains];
    for (cls, proto) in ds.prototypes.iter().enumerate() {
        for (c, acc) in per_domain[ds.domain_of_class[cls]].iter_mut().enumerate() {
            let total: f64 = (0..s * s).map(|k| proto.eval((k / s) as f64, (k % s) as f64, c, s)).sum();
            acc.push(total / (s * s) as f64);
        }
    }
    let means: Vec<Vec<f64>> = per_domain
        .iter()
        .map(|chans| chans.iter().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect())
        .collect();
    for a in 0..cfg.num_domains {
        for b in a + 1..cfg.num_domains {
            for c in 0..3 {
                let gap = (means[a][c] - means[b][c]).abs();
                assert!(gap >= cfg.channel_shift - 1e-9, "domains {a},{b} channel {c}: {gap}");
            }
        }
    }
}

#[test]
fn test_episodes_stay_in_their_split() {
    let ds = small_dataset(12, 2);
    let test: BTreeSet<usize> = ds.split(Split::MetaTest).iter().copied().collect();
    for s in 0..20 {
        let ep = sample_episode(&ds, ds.split(Split::MetaTest), EpisodeSpec::new(3, 1, 5), s).unwrap();
        assert!(ep.class_map.iter().all(|c| test.contains(c)));
        assert_eq!(ep.class_map.iter().collect::<BTreeSet<_>>().len(), 3);
    }
}

#[test]
fn network_gradient_matches_central_differences() {
    let arch = ArchSpec::conv_classifier(ArchKind::Conv4Like, InputShape::square(8, 3), 3, 1, 4);
    let ds = small_dataset(8, 1);
    let idx: Vec<usize> = (0..4).map(|c| ds.indices_of(c)[0]).collect();
    let images: Tensor<f64> = ds.images.select(&idx).to_tensor();
    let labels = [0, 1, 2, 3];
    let params = Tensor::<f64>::from_f32(vec![arch.param_len()], &arch.init_params(3));
    let value = |p: &Tensor<f64>| loss_grad(p, |t, v| batch_ce(&arch, t, v, &images, &labels)).unwrap();
    let (_, grad) = value(&params);
    let trainable = arch.trainable_mask();
    let mut rng = seed::rng(6);
    let h = 1e-6;
    for _ in 0..40 {
        let k = rng.random_range(0..params.len());
        if !trainable[k] {
            assert_eq!(grad.data()[k], 0.0);
            continue;
        }
        let shifted = |d: f64| {
            let mut v = params.data().to_vec();
            v[k] += d;
            value(&Tensor::new(vec![v.len()], v)).0
        };
        let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
        let g = grad.data()[k];
        assert!((fd - g).abs() <= 1e-5 * (1.0 + g.abs()), "coordinate {k}: fd {fd} vs {g}");
    }
}

#[test]
fn desk_teacher_reaches_pinned_accuracy() {
    let ds = make_synthetic_domains(&SyntheticConfig::default(), 1).unwrap();
    let classes: Vec<usize> = ds.split(Split::MetaTrain).iter().copied().filter(|&c| ds.domain_of_class[c] == 0).take(5).collect();
    let rec = pretrain_model(&ds, &classes, ArchSpec::desk_classifier(5), PretrainHyper::default(), "t", 4).unwrap();
    assert_eq!(rec.classes, classes);
    // seeded baseline 1.000, pinned 5 points below
    assert!(rec.val_accuracy >= 0.95, "val accuracy {}", rec.val_accuracy);
}

#[test]
fn pool_is_deterministic_and_persists_losslessly() {
    let ds = small_dataset(12, 2);
    let hyper = PretrainHyper { epochs: 2, ..PretrainHyper::default() };
    let policy = ArchPolicy { filters: vec![4, 6], blocks: 1, within_domain: true };
    let pool = build_pool(&ds, 3, 2, &policy, hyper, 9).unwrap();
    assert_eq!(pool.len(), 3);
    assert_eq!(pool.ids().iter().collect::<BTreeSet<_>>().len(), 3);
    assert_eq!(pool.records.iter().map(|r| r.seed).collect::<BTreeSet<_>>().len(), 3);
    let train: BTreeSet<usize> = ds.split(Split::MetaTrain).iter().copied().collect();
    for r in &pool.records {
        assert_eq!(r.classes.len(), r.arch.num_outputs);
        assert!(r.classes.iter().all(|c| train.contains(c)));
        assert!((0.0..=1.0).contains(&r.val_accuracy));
    }
    let again = build_pool(&ds, 3, 2, &policy, hyper, 9).unwrap();
    assert_eq!(again.records, pool.records);

    let dir = tempfile::tempdir().unwrap();
    save_pool(dir.path(), &pool).unwrap();
    let back = load_pool(dir.path()).unwrap();
    let batch = ds.images.select(&[0, 50, 100, 200]);
    for (a, b) in pool.records.iter().zip(&back.records) {
        let la = a.network().unwrap().forward_logits(&batch).unwrap();
        let lb = b.network().unwrap().forward_logits(&batch).unwrap();
        assert_eq!(
            la.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            lb.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}

#[test]
fn recovery_balances_labels_and_lowers_the_loss() {
    let ds = small_dataset(8, 1);
    let classes = &ds.split(Split::MetaTrain)[..3];
    let arch = ArchSpec::conv_classifier(ArchKind::Conv4Like, InputShape::square(8, 3), 4, 1, 3);
    let hyper = PretrainHyper { epochs: 10, ..PretrainHyper::default() };
    let teacher = pretrain_model(&ds, classes, arch, hyper, "t", 2).unwrap();
    let config = InversionConfig { steps: 60, per_class: 4, lr: 1e-2, ..InversionConfig::default() };
    let mut generator = GeneratorState::for_teacher(&teacher.arch, 4, 3).unwrap();
    let (task, trace) = recover_task(&teacher, &mut generator, &config, 5).unwrap();
    assert_eq!(task.images.len(), 12);
    for label in 0..3 {
        assert_eq!(task.labels.iter().filter(|&&y| y == label).count(), 4);
    }
    assert!(task.images.data.iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(trace.losses.len(), 61);
    let median = |xs: &[f64]| {
        let mut v = xs.to_vec();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let totals: Vec<f64> = trace.losses.iter().map(|l| l.total).collect();
    assert!(median(&totals[41..]) < median(&totals[..20]));
}

#[test]
fn adaptation_leaves_the_model_untouched_and_random_init_is_at_chance() {
    let ds = make_synthetic_domains(&SyntheticConfig::default(), 3).unwrap();
    let model = NetworkState::init(ArchSpec::desk_classifier(5), 8, Mode::Train).unwrap();
    let before = model.params().clone();
    let ep = sample_episode(&ds, ds.split(Split::MetaTest), EpisodeSpec::new(5, 5, 15), 1).unwrap();
    let a = adapt_and_eval(&model, &ep, 0.01, 5).unwrap();
    assert_eq!(model.params(), &before);
    assert_eq!(adapt_and_eval(&model, &ep, 0.01, 5).unwrap(), a);

    let cfg = EvalConfig { episodes: 100, adapt_steps: 0, ..EvalConfig::default() };
    let report = evaluate(&model, &ds, Split::MetaTest, &cfg, 7).unwrap();
    let queries = (100 * 5 * 15) as f64;
    let binomial = (0.2f64 * 0.8 / queries).sqrt();
    let empirical = report.ci95 / 1.96;
    let sigma = binomial.max(empirical);
    assert!((report.mean_accuracy - 0.2).abs() <= 3.0 * sigma, "{} ± {sigma}", report.mean_accuracy);
    assert_eq!(evaluate(&model, &ds, Split::MetaTest, &cfg, 7).unwrap(), report);
}
