use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use phiseg::checkpoint::load_checkpoint;
use phiseg::data::{generate_dataset, AnnotatorPolicy, Dataset, Split, SynthSpec};
use phiseg::inference::draw_samples;
use phiseg::loss::sample_noise;
use phiseg::metrics::jaccard_distance;
use phiseg::model::{likelihood_forward, prior_forward, ModelConfig};
use phiseg::train::{
    evaluate, run_experiment, train, AnnotatorScope, EvalConfig, ExperimentKind, Method, TrainConfig, TrainOutcome,
};
use phiseg::Error;

/// Small dataset shared by the quicker tests; kept alive for the process.
fn small() -> &'static Dataset {
    static DS: OnceLock<(tempfile::TempDir, Dataset)> = OnceLock::new();
    &DS.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            cases: 40,
            height: 32,
            width: 32,
            min_radius: 4.0,
            max_radius: 8.0,
            seed: 5,
            ..SynthSpec::default()
        };
        let ds = generate_dataset(&spec, &dir.path().join("small"), false).unwrap();
        (dir, ds)
    })
    .1
}

fn small_config(latent_levels: usize, steps: usize) -> TrainConfig {
    let mut cfg = TrainConfig::new(ModelConfig::phiseg(latent_levels, 3, 32, 32, 4), steps);
    cfg.val_interval = 10;
    cfg.seed = 1;
    cfg
}

fn quick_eval() -> EvalConfig {
    EvalConfig {
        n_samples: 8,
        max_cases: Some(4),
        ..EvalConfig::default()
    }
}

#[test]
fn validation_loss_drops_on_the_desk_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset(&SynthSpec::default(), dir.path(), false).unwrap();
    for seed in [0, 1, 2] {
        let mut cfg = TrainConfig::new(ModelConfig::phiseg(2, 4, 64, 64, 4), 200);
        cfg.val_interval = 200;
        cfg.seed = seed;
        let out = train(&cfg, &ds).unwrap();
        let (first, last) = (out.val_history[0], *out.val_history.last().unwrap());
        assert_eq!((first.0, last.0), (0, 200));
        assert!(last.1 < first.1, "seed {seed}: {first:?} -> {last:?}");
    }
}

#[test]
fn log_records_modes_and_single_latent_draws() {
    let out = train(&small_config(3, 20), small()).unwrap();
    for rec in &out.log {
        match rec.phase.as_str() {
            "train" => {
                assert_eq!(rec.bn_mode, "train");
                assert_eq!(rec.latent_draws.as_deref(), Some(&[1, 1, 1][..]));
                assert_eq!(rec.loss.kl.len(), 3);
            }
            "val" => assert_eq!(rec.bn_mode, "frozen"),
            other => panic!("unexpected phase {other}"),
        }
    }
    assert_eq!(out.log.iter().filter(|r| r.phase == "train").count(), 20);
    assert_eq!(out.val_history.iter().map(|v| v.0).collect::<Vec<_>>(), vec![0, 10, 20]);
}

#[test]
fn deterministic_baseline_logs_no_kl() {
    let mut cfg = small_config(1, 10);
    cfg.model = ModelConfig::deterministic(3, 32, 32, 4);
    let dir = tempfile::tempdir().unwrap();
    cfg.checkpoint_dir = Some(dir.path().to_path_buf());
    let out = train(&cfg, small()).unwrap();
    assert!(out.log.iter().all(|r| r.loss.kl.is_empty() && r.loss.deep_sup_ce.is_empty()));
    let text = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
    assert_eq!(text.lines().count(), out.log.len());
    assert!(!text.contains("\"kl\""));
}

#[test]
fn identical_runs_log_identically() {
    let cfg = small_config(2, 15);
    let a = train(&cfg, small()).unwrap();
    let b = train(&cfg, small()).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.best.weights.checksum(), b.best.weights.checksum());
}

fn check_selection(out: &TrainOutcome) {
    let best = out.best.meta.val_loss;
    assert!(out.val_history.iter().all(|&(_, v)| best <= v));
    assert!(out.val_history.contains(&(out.best.meta.step, best)));
}

#[test]
fn best_checkpoint_has_the_lowest_validation_loss() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(2, 40);
    cfg.checkpoint_dir = Some(dir.path().to_path_buf());
    let out = train(&cfg, small()).unwrap();
    check_selection(&out);
    let saved = load_checkpoint::<f32>(&dir.path().join("best.ckpt"), Some(&cfg.model)).unwrap();
    assert_eq!(saved.meta.step, out.best.meta.step);
    assert_eq!(saved.weights.checksum(), out.best.weights.checksum());
}

#[test]
fn trained_prior_turns_noise_into_distinct_samples() {
    let cfg = small_config(2, 60);
    let out = train(&cfg, small()).unwrap();
    let w = &out.best.weights;
    let case = &small().cases[small().indices(Split::Test)[0]];
    let x = case.image.to_tensor::<f32>();
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let n1 = sample_noise::<f32, _>(cfg.model.latent_shapes(1), &mut r);
    let n2 = sample_noise::<f32, _>(cfg.model.latent_shapes(1), &mut r);
    let (_, z1) = prior_forward(w, &x, &n1, &[]).unwrap();
    let (_, z2) = prior_forward(w, &x, &n2, &[]).unwrap();
    assert!(z1.z.iter().zip(&z2.z).all(|(a, b)| a.max_abs_diff(b) > 0.0));
    let d1 = likelihood_forward(w, &z1).unwrap();
    let d2 = likelihood_forward(w, &z2).unwrap();
    assert!(d1.s_hat[0].max_abs_diff(&d2.s_hat[0]) > 1e-6);
}

#[test]
fn report_has_one_row_per_case_and_the_three_metrics() {
    let out = train(&small_config(2, 10), small()).unwrap();
    let report = evaluate(&out.best.weights, small(), &quick_eval(), "phiseg_l2").unwrap();
    assert_eq!(report.cases.len(), 4);
    assert!(report.to_csv().starts_with("case_id,ged,sncc,dice\n"));
    for name in ["ged", "sncc", "dice"] {
        assert_eq!(report.column(name).unwrap().len(), 4);
    }
    assert_eq!(report, evaluate(&out.best.weights, small(), &quick_eval(), "phiseg_l2").unwrap());
}

#[test]
fn deterministic_ged_has_no_diversity_term() {
    let mut cfg = small_config(1, 10);
    cfg.model = ModelConfig::deterministic(3, 32, 32, 4);
    let out = train(&cfg, small()).unwrap();
    let w = &out.best.weights;
    let report = evaluate(w, small(), &quick_eval(), "det").unwrap();
    for (row, &i) in report.cases.iter().zip(&small().indices(Split::Test)) {
        let case = &small().cases[i];
        let pred = draw_samples(w, &case.image.to_tensor::<f32>(), 1, 0).unwrap().labels.remove(0);
        let anns = &case.annotations;
        let m = anns.len() as f64;
        let d = |a, b| jaccard_distance(a, b, &[1]).unwrap();
        let cross = anns.iter().map(|y| d(&pred, y)).sum::<f64>() / m;
        let within = anns.iter().flat_map(|y| anns.iter().map(move |y2| (y, y2))).map(|(a, b)| d(a, b)).sum::<f64>() / (m * m);
        assert!((row.ged - (2.0 * cross - within)).abs() < 1e-12, "{}", row.case_id);
        assert_eq!(row.sncc, 0.0);
    }
}

#[test]
fn evaluation_rejects_mismatched_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        cases: 10,
        height: 16,
        width: 16,
        min_radius: 2.0,
        max_radius: 4.0,
        ..SynthSpec::default()
    };
    let other = generate_dataset(&spec, dir.path(), false).unwrap();
    let out = train(&small_config(2, 2), small()).unwrap();
    assert!(matches!(
        evaluate(&out.best.weights, &other, &quick_eval(), "m"),
        Err(Error::DimensionMismatch(_))
    ));
    assert!(matches!(train(&small_config(2, 2), &other), Err(Error::DimensionMismatch(_))));
    let single = EvalConfig {
        scope: AnnotatorScope::Only(9),
        ..quick_eval()
    };
    assert!(evaluate(&out.best.weights, small(), &single, "m").is_err());
}

fn method(name: &str, cfg: TrainConfig) -> Method {
    Method {
        name: name.into(),
        train: cfg,
    }
}

#[test]
fn single_method_experiment_has_no_significance() {
    let rep = run_experiment(
        ExperimentKind::AllAnnotators,
        &[method("a", small_config(2, 5))],
        small(),
        &[0],
        &quick_eval(),
    )
    .unwrap();
    assert_eq!(rep.per_method.len(), 1);
    assert!(rep.significance.is_empty());
    assert!(rep.to_csv().contains("all-annotators,a,1,"));
}

#[test]
fn duplicate_method_gives_zero_variance_tests() {
    let m = method("same", small_config(2, 5));
    let rep = run_experiment(ExperimentKind::SingleAnnotator, &[m.clone(), m], small(), &[3], &quick_eval()).unwrap();
    assert_eq!(rep.significance.len(), 3);
    for s in &rep.significance {
        assert!(s.test.zero_variance, "{}", s.metric);
        assert_eq!(s.test.p, 1.0);
    }
    assert_eq!(ExperimentKind::SingleAnnotator.policy(), AnnotatorPolicy::Fixed(0));
}

#[test]
fn experiment_needs_methods_and_seeds() {
    assert!(run_experiment(ExperimentKind::AllAnnotators, &[], small(), &[0], &quick_eval()).is_err());
    let m = method("a", small_config(2, 5));
    assert!(run_experiment(ExperimentKind::AllAnnotators, &[m], small(), &[], &quick_eval()).is_err());
}
