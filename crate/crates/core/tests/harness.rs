mod common;

use std::path::Path;

use znl::data::batches;
use znl::harness::compare::{CELLS_CSV, REPORT_CSV, REPORT_MD};
use znl::harness::csvio::{read_rows, GradStatRecord, MetricRow};
use znl::harness::run::{prepare_data, CHECKPOINT, DIAGNOSTIC, GRADSTATS, METRICS, OVERLAP};
use znl::harness::{compare, inspect_overlap, run, Manifest, RunStatus};
use znl::nn::{checkpoint, softmax_cross_entropy, Mode, ParamStore};
use znl::optim::{step_decay_lr, Optimizer};
use znl::overlap::OverlapRecord;
use znl::tensor::reduce_stats;
use znl::transforms::{self, TransformKind};
use znl::{Error, Precision};

use common::spirals_config;

fn bytes(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

fn line_count(dir: &Path, name: &str) -> usize {
    std::fs::read_to_string(dir.join(name)).unwrap().lines().count()
}

#[test]
fn repeated_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let a = run(&spirals_config(&tmp.path().join("a"), 3)).unwrap();
    let b = run(&spirals_config(&tmp.path().join("b"), 3)).unwrap();
    for name in [METRICS, OVERLAP, GRADSTATS, CHECKPOINT] {
        assert_eq!(bytes(&a.dir, name), bytes(&b.dir, name), "{name}");
    }
    assert_eq!(a.manifest.config_sha256, b.manifest.config_sha256);
    assert!(line_count(&a.dir, OVERLAP) > 1);
}

#[test]
fn seeds_change_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let a = run(&spirals_config(&tmp.path().join("a"), 1)).unwrap();
    let mut cfg = spirals_config(&tmp.path().join("b"), 1);
    cfg.seed = 2;
    let b = run(&cfg).unwrap();
    assert_ne!(bytes(&a.dir, METRICS), bytes(&b.dir, METRICS));
}

#[test]
fn probing_does_not_change_training() {
    let tmp = tempfile::tempdir().unwrap();
    let mut every = spirals_config(&tmp.path().join("every"), 2);
    every.probe_every = 1;
    let mut never = spirals_config(&tmp.path().join("never"), 2);
    never.probe_every = 0;
    let a = run(&every).unwrap();
    let b = run(&never).unwrap();
    assert_eq!(bytes(&a.dir, METRICS), bytes(&b.dir, METRICS));
    assert_eq!(bytes(&a.dir, CHECKPOINT), bytes(&b.dir, CHECKPOINT));
    assert_eq!(line_count(&b.dir, OVERLAP), 1);
    assert_eq!(line_count(&b.dir, GRADSTATS), 1);
    let steps = a.metrics.last().unwrap().step as usize;
    // Four residual blocks probed at every step.
    assert_eq!(line_count(&a.dir, OVERLAP), 1 + 4 * steps);
}

#[test]
fn zero_epochs_writes_manifest_and_empty_files() {
    let tmp = tempfile::tempdir().unwrap();
    let summary = run(&spirals_config(tmp.path(), 0)).unwrap();
    assert!(summary.metrics.is_empty());
    let m = Manifest::load(tmp.path()).unwrap();
    assert_eq!(m.status, RunStatus::Completed);
    assert_eq!(m.final_train_acc, None);
    for name in [METRICS, OVERLAP, GRADSTATS] {
        assert_eq!(line_count(tmp.path(), name), 1, "{name}");
    }
    assert!(tmp.path().join(CHECKPOINT).exists());
}

#[test]
fn manifest_records_provenance() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = spirals_config(tmp.path(), 1);
    run(&cfg).unwrap();
    let m = Manifest::load(tmp.path()).unwrap();
    assert_eq!(m.config, cfg);
    assert_eq!(m.config_sha256, cfg.hash());
    assert_eq!(m.seed, cfg.seed);
    assert_eq!(m.prng, znl::rng::PRNG_ID);
    assert_eq!(m.precision, Precision::F32);
    assert!(m.threads >= 1);
    assert_eq!(m.train_size + m.val_size, cfg.n);
    assert_eq!(m.val_size, cfg.n / 10);
    assert_eq!(m.steps_per_epoch, m.train_size.div_ceil(cfg.batch_size));
}

/// The training loop with no transform stage at all.
fn plain_loop(cfg: &znl::harness::ExperimentConfig) -> ParamStore<f32> {
    let data = prepare_data(cfg).unwrap();
    let net = cfg.preset.build(data.train.sample_shape(), data.train.classes).unwrap();
    let mut params = ParamStore::<f32>::init(&net, cfg.seed);
    let mut opt = Optimizer::<f32>::new(cfg.optimizer_config()).unwrap();
    for epoch in 0..cfg.epochs {
        opt.set_lr(step_decay_lr(cfg.lr, &cfg.lr_decay_epochs, epoch));
        for idx in batches(data.train.len(), cfg.batch_size, cfg.seed, epoch as u64) {
            let (x, y) = data.train.batch::<f32>(&idx).unwrap();
            let (logits, mut cache) = net.forward(&params, &x, Mode::Train).unwrap();
            let (_, dlogits) = softmax_cross_entropy(&logits, &y).unwrap();
            let grads = net.backward(&params, &mut cache, &dlogits).unwrap();
            opt.step(&mut params, &grads.params).unwrap();
            net.update_running_stats(&mut params, &cache).unwrap();
        }
    }
    params
}

#[test]
fn identity_run_matches_a_loop_without_transform_stage() {
    let tmp = tempfile::tempdir().unwrap();
    for optimizer in ["sgd", "momentum", "adam"] {
        let mut cfg = spirals_config(&tmp.path().join(optimizer), 2);
        cfg.optimizer = optimizer.parse().unwrap();
        cfg.lr = if optimizer == "adam" { 0.003 } else { 0.05 };
        cfg.weight_decay = 1e-4;
        cfg.lr_decay_epochs = vec![1];
        run(&cfg).unwrap();
        let expected = checkpoint::encode(&plain_loop(&cfg));
        assert_eq!(bytes(&cfg.out_dir, CHECKPOINT), expected, "{optimizer}");
    }
}

#[test]
fn optimizer_receives_standardized_gradients_under_znorm() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = spirals_config(tmp.path(), 3);
    cfg.transform = TransformKind::Znorm;
    cfg.lr = 0.003;
    let data = prepare_data(&cfg).unwrap();
    let net = cfg.preset.build(data.train.sample_shape(), data.train.classes).unwrap();
    let mut params = ParamStore::<f32>::init(&net, cfg.seed);
    let mut opt = Optimizer::<f32>::new(cfg.optimizer_config()).unwrap();
    let spec = cfg.transform_spec();
    let mut checked = 0;
    for epoch in 0..cfg.epochs {
        for idx in batches(data.train.len(), cfg.batch_size, cfg.seed, epoch as u64) {
            let (x, y) = data.train.batch::<f32>(&idx).unwrap();
            let (logits, mut cache) = net.forward(&params, &x, Mode::Train).unwrap();
            let (_, dlogits) = softmax_cross_entropy(&logits, &y).unwrap();
            let grads = net.backward(&params, &mut cache, &dlogits).unwrap();
            let update = transforms::apply(&spec, &grads.params).unwrap();
            for (name, g) in &update {
                if g.numel() == 1 {
                    continue;
                }
                let values: Vec<f64> = g.data().iter().map(|&v| f64::from(v)).collect();
                let s = reduce_stats(&values).unwrap();
                assert!((0.9..=1.0 + 1e-6).contains(&s.std), "{name}: std {}", s.std);
                assert!(s.mean.abs() <= 1e-6, "{name}: mean {}", s.mean);
                checked += 1;
            }
            opt.step(&mut params, &update).unwrap();
        }
    }
    assert!(checked > 100);
}

#[test]
fn divergence_aborts_with_diagnostic_and_last_good_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = spirals_config(tmp.path(), 3);
    cfg.lr = 1e30;
    let err = run(&cfg).unwrap_err();
    let Error::Diverged { step, path } = err else {
        panic!("expected divergence, got {err}");
    };
    assert!(!path.is_empty());
    let m = Manifest::load(tmp.path()).unwrap();
    assert_eq!(m.status, RunStatus::Aborted);
    let diagnostic = std::fs::read_to_string(tmp.path().join(DIAGNOSTIC)).unwrap();
    assert!(diagnostic.contains(&format!("step {step}")), "{diagnostic}");
    assert!(diagnostic.contains(&path), "{diagnostic}");
    assert_eq!(m.diagnostic.as_deref(), Some(diagnostic.trim_end()));
    let ckpt = checkpoint::load(&tmp.path().join(CHECKPOINT)).unwrap();
    assert!(ckpt.entries.iter().all(|(_, _, v)| v.iter().all(|x| x.is_finite())));
}

#[test]
fn emitted_csv_rows_parse_back_and_hold_invariants() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = spirals_config(tmp.path(), 3);
    cfg.transform = TransformKind::Centralize;
    let summary = run(&cfg).unwrap();

    let metrics: Vec<MetricRow> = read_rows(&tmp.path().join(METRICS)).unwrap();
    assert_eq!(metrics, summary.metrics);
    assert_eq!(metrics.len(), cfg.epochs);
    for (i, r) in metrics.iter().enumerate() {
        assert_eq!(r.epoch, i + 1);
        assert!(r.train_loss.is_finite() && r.global_grad_norm >= 0.0);
        assert!((0.0..=1.0).contains(&r.train_acc));
        assert!(r.val_acc.is_some_and(|a| (0.0..=1.0).contains(&a)));
    }
    assert!(metrics.windows(2).all(|w| w[1].step > w[0].step));

    let overlap: Vec<OverlapRecord> = read_rows(&tmp.path().join(OVERLAP)).unwrap();
    assert!(!overlap.is_empty());
    for r in &overlap {
        assert_eq!(r.step % cfg.probe_every, 0);
        assert!((-1.0..=1.0).contains(&r.cosine));
        assert!(r.skip_norm >= 0.0 && r.branch_norm >= 0.0 && r.total_norm >= 0.0);
        assert!((0.0..=2.0 + 1e-9).contains(&r.amplification), "{r:?}");
        assert!(r.law_of_cosines_error() <= 1e-5, "{r:?}");
    }

    let stats: Vec<GradStatRecord> = read_rows(&tmp.path().join(GRADSTATS)).unwrap();
    assert!(!stats.is_empty());
    for r in &stats {
        assert!(r.stage == "raw" || r.stage == "transformed");
        assert!(r.std >= 0.0 && r.l2norm >= 0.0);
        if r.stage == "transformed" {
            assert!(r.mean.abs() < 1e-6, "centralized mean {r:?}");
        }
    }
    let raw = stats.iter().filter(|r| r.stage == "raw").count();
    assert_eq!(raw, stats.len() - raw);
}

#[test]
fn inspect_overlap_groups_by_epoch_and_block() {
    let tmp = tempfile::tempdir().unwrap();
    let summary = run(&spirals_config(tmp.path(), 2)).unwrap();
    let rows = inspect_overlap(tmp.path()).unwrap();
    let records: Vec<OverlapRecord> = read_rows(&tmp.path().join(OVERLAP)).unwrap();
    assert_eq!(rows.iter().map(|r| r.records).sum::<usize>(), records.len());
    assert_eq!(rows.len(), 2 * 4);
    assert!(rows.windows(2).all(|w| w[0].epoch <= w[1].epoch));
    assert_eq!(rows.last().unwrap().epoch, summary.metrics.len());
    for r in &rows {
        assert!(r.max_amplification >= r.mean_amplification);
        assert!((-1.0..=1.0).contains(&r.mean_cosine));
    }
}

#[test]
fn compare_runs_the_full_cross_product() {
    let tmp = tempfile::tempdir().unwrap();
    let mut base = spirals_config(tmp.path(), 1);
    base.lr = 0.01;
    let report = compare(&base, &[TransformKind::Identity, TransformKind::Znorm], &[1, 2, 3]).unwrap();
    assert_eq!(report.cells.len(), 6);
    assert_eq!(report.rows.len(), 2);
    for c in &report.cells {
        assert!(c.failure.is_none());
        assert!(c.dir.join(METRICS).exists());
    }
    for name in [REPORT_MD, REPORT_CSV, CELLS_CSV] {
        assert!(tmp.path().join(name).exists(), "{name}");
    }
    assert_eq!(line_count(tmp.path(), REPORT_CSV), 3);
    assert_eq!(line_count(tmp.path(), CELLS_CSV), 7);
}

#[test]
fn singleton_compare_reduces_to_run() {
    let tmp = tempfile::tempdir().unwrap();
    let base = spirals_config(&tmp.path().join("cmp"), 2);
    let report = compare(&base, &[TransformKind::Identity], &[1]).unwrap();
    let single = run(&spirals_config(&tmp.path().join("run"), 2)).unwrap();
    let cell = report.cell(TransformKind::Identity, 1).unwrap();
    let last = single.metrics.last().unwrap();
    assert_eq!(cell.val_acc, last.val_acc);
    assert_eq!(cell.val_loss, last.val_loss);
    assert_eq!(cell.train_acc, single.manifest.final_train_acc);
    let row = &report.rows[0];
    assert_eq!(row.val_acc.unwrap().mean, last.val_acc.unwrap());
    assert_eq!(row.val_acc.unwrap().std, 0.0);
}

#[test]
fn failed_cells_are_reported_not_fatal() {
    let tmp = tempfile::tempdir().unwrap();
    let mut base = spirals_config(tmp.path(), 2);
    base.lr = 1e30;
    let report = compare(&base, &[TransformKind::Identity], &[1, 2]).unwrap();
    assert!(report.cells.iter().all(|c| c.failure.is_some()));
    assert_eq!(report.rows[0].failed, 2);
    let md = std::fs::read_to_string(tmp.path().join(REPORT_MD)).unwrap();
    assert!(md.contains("Failed runs"));
}

#[test]
fn double_precision_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = spirals_config(tmp.path(), 1);
    cfg.precision = Precision::F64;
    let summary = run(&cfg).unwrap();
    assert_eq!(summary.manifest.precision, Precision::F64);
    assert_eq!(checkpoint::load(&tmp.path().join(CHECKPOINT)).unwrap().precision, Precision::F64);
}

#[test]
fn noiseless_spirals_are_fit_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = spirals_config(tmp.path(), 60);
    cfg.noise = 0.0;
    cfg.probe_every = 0;
    let summary = run(&cfg).unwrap();
    assert_eq!(summary.manifest.final_train_acc, Some(1.0));
}
