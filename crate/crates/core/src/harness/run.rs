use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{DatasetKind, ExperimentConfig};
use super::csvio::{
    read_rows, write_text, CsvSink, GradStatRecord, MetricRow, TimingRow, GRADSTATS_HEADER,
    METRICS_HEADER, OVERLAP_HEADER, TIMING_HEADER,
};
use crate::data::{
    batches, cifar, load_cifar10_bin, load_mnist_idx, synthetic_nonconvex, DatasetSplit, Standardizer,
    SyntheticTask,
};
use crate::error::{Error, Result};
use crate::nn::{checkpoint, correct_predictions, softmax_cross_entropy, GradMap, Mode, NetworkSpec, ParamStore};
use crate::optim::{step_decay_lr, Optimizer};
use crate::overlap::{layer_grad_stats, metrics};
use crate::rng::PRNG_ID;
use crate::tensor::{Precision, Scalar};
use crate::transforms::{self, TransformKind};

pub const MANIFEST: &str = "manifest.json";
pub const METRICS: &str = "metrics.csv";
pub const OVERLAP: &str = "overlap.csv";
pub const GRADSTATS: &str = "gradstats.csv";
pub const TIMING: &str = "timing.csv";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const DIAGNOSTIC: &str = "diagnostic.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Completed,
    Aborted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ExperimentConfig,
    pub config_sha256: String,
    pub seed: u64,
    pub prng: String,
    pub precision: Precision,
    pub threads: usize,
    pub dataset: String,
    pub train_size: usize,
    pub val_size: usize,
    pub steps_per_epoch: usize,
    pub parameters: usize,
    pub standardization: Standardizer,
    pub status: RunStatus,
    pub diagnostic: Option<String>,
    /// Eval-mode loss and accuracy on the whole training split after the
    /// last epoch.
    pub final_train_loss: Option<f64>,
    pub final_train_acc: Option<f64>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Manifest> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    fn save(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_text(&dir.join(MANIFEST), &(text + "\n"))
    }
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub metrics: Vec<MetricRow>,
}

impl RunSummary {
    pub fn load(dir: &Path) -> Result<RunSummary> {
        Ok(RunSummary {
            dir: dir.to_path_buf(),
            manifest: Manifest::load(dir)?,
            metrics: read_rows(&dir.join(METRICS))?,
        })
    }
}

/// Standardized training and validation splits of a config's dataset.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: DatasetSplit,
    pub val: Option<DatasetSplit>,
    pub standardizer: Standardizer,
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let dir = || cfg.data_dir.clone().unwrap_or_default();
    let full = match cfg.dataset {
        DatasetKind::Spirals => synthetic_nonconvex(SyntheticTask::Spirals, cfg.n, cfg.noise, cfg.data_seed)?,
        DatasetKind::RingGaussians => {
            synthetic_nonconvex(SyntheticTask::RingGaussians, cfg.n, cfg.noise, cfg.data_seed)?
        }
        DatasetKind::Mnist => load_mnist_idx(
            &dir().join("train-images-idx3-ubyte"),
            &dir().join("train-labels-idx1-ubyte"),
        )?,
        DatasetKind::Cifar10 => load_cifar10_bin(&cifar::train_files(&dir()))?,
    };
    let limited = match cfg.train_limit {
        Some(limit) => full.take(limit)?,
        None => full,
    };
    let (train, val) = limited.split_validation()?;
    let standardizer = Standardizer::fit(&train);
    let train = standardizer.apply(&train)?;
    let val = val.map(|v| standardizer.apply(&v)).transpose()?;
    Ok(PreparedData {
        train,
        val,
        standardizer,
    })
}

/// Mean loss and accuracy of eval-mode predictions over a split.
pub fn evaluate<T: Scalar>(
    net: &NetworkSpec,
    params: &ParamStore<T>,
    split: &DatasetSplit,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0;
    let indices: Vec<usize> = (0..split.len()).collect();
    for chunk in indices.chunks(batch_size) {
        let (x, y) = split.batch::<T>(chunk)?;
        let (logits, _) = net.forward(params, &x, Mode::Eval)?;
        let (l, _) = softmax_cross_entropy(&logits, &y)?;
        loss += l * chunk.len() as f64;
        correct += correct_predictions(&logits, &y);
    }
    let n = split.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Trains one configuration and writes its run directory (`out_dir`).
///
/// A NaN or infinity aborts the run: the checkpoint then holds the last
/// finite parameters, `diagnostic.txt` names the first non-finite tensor,
/// and the error is [`Error::Diverged`].
pub fn run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    match cfg.precision {
        Precision::F32 => run_typed::<f32>(cfg),
        Precision::F64 => run_typed::<f64>(cfg),
    }
}

struct Sinks {
    metrics: CsvSink,
    overlap: CsvSink,
    gradstats: CsvSink,
    timing: CsvSink,
}

struct Abort {
    step: u64,
    epoch: usize,
    what: &'static str,
    path: String,
}

fn run_typed<T: Scalar>(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    let net = cfg.preset.build(data.train.sample_shape(), data.train.classes)?;
    if net.has_batchnorm() && data.train.len() % cfg.batch_size == 1 {
        return Err(Error::Config(format!(
            "{} training samples in batches of {} leave a single-sample batch, which batch norm cannot train on",
            data.train.len(),
            cfg.batch_size
        )));
    }
    let mut params = ParamStore::<T>::init(&net, cfg.seed);
    let mut opt = Optimizer::<T>::new(cfg.optimizer_config())?;
    let spec = cfg.transform_spec();

    let dir = cfg.out_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let _ = std::fs::remove_file(dir.join(DIAGNOSTIC));
    let mut manifest = Manifest {
        config: cfg.clone(),
        config_sha256: cfg.hash(),
        seed: cfg.seed,
        prng: PRNG_ID.to_string(),
        precision: T::PRECISION,
        threads: rayon::current_num_threads(),
        dataset: data.train.name.clone(),
        train_size: data.train.len(),
        val_size: data.val.as_ref().map_or(0, DatasetSplit::len),
        steps_per_epoch: data.train.len().div_ceil(cfg.batch_size),
        parameters: params.numel(),
        standardization: data.standardizer.clone(),
        status: RunStatus::Running,
        diagnostic: None,
        final_train_loss: None,
        final_train_acc: None,
    };
    manifest.save(&dir)?;
    let mut sinks = Sinks {
        metrics: CsvSink::create(&dir.join(METRICS), &METRICS_HEADER)?,
        overlap: CsvSink::create(&dir.join(OVERLAP), &OVERLAP_HEADER)?,
        gradstats: CsvSink::create(&dir.join(GRADSTATS), &GRADSTATS_HEADER)?,
        timing: CsvSink::create(&dir.join(TIMING), &TIMING_HEADER)?,
    };

    if spec.kind == TransformKind::Znorm {
        if let Some(p) = params.iter().find(|p| p.value.numel() == 1) {
            log::warn!(
                "parameter `{}` has a single element; znorm passes such gradients through unchanged",
                p.name
            );
        }
    }

    let started = Instant::now();
    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut step: u64 = 0;
    for epoch in 0..cfg.epochs {
        opt.set_lr(step_decay_lr(cfg.lr, &cfg.lr_decay_epochs, epoch));
        let (mut loss_sum, mut correct, mut norm_sum) = (0.0, 0usize, 0.0);
        let order = batches(data.train.len(), cfg.batch_size, cfg.seed, epoch as u64);
        let steps = order.len();
        for idx in order {
            let (x, y) = data.train.batch::<T>(&idx)?;
            let (logits, mut cache) = net.forward(&params, &x, Mode::Train)?;
            let (loss, dlogits) = softmax_cross_entropy(&logits, &y)?;
            if !loss.is_finite() {
                let path = cache
                    .first_non_finite(&logits)
                    .unwrap_or_else(|| "loss".to_string());
                let abort = Abort { step, epoch, what: "loss", path };
                return Err(finish_aborted(&mut manifest, &dir, &params, abort));
            }
            let probe = cfg.probe_every > 0 && step.is_multiple_of(cfg.probe_every);
            let grads = if probe {
                net.backward_probed(&params, &mut cache, &dlogits)?
            } else {
                net.backward(&params, &mut cache, &dlogits)?
            };
            norm_sum += transforms::global_norm(&grads.params);
            let update = match transforms::apply(&spec, &grads.params) {
                Ok(u) => u,
                Err(Error::NonFinite { path }) => {
                    let abort = Abort { step, epoch, what: "gradient", path };
                    return Err(finish_aborted(&mut manifest, &dir, &params, abort));
                }
                Err(e) => return Err(e),
            };
            if probe {
                for b in &grads.blocks {
                    sinks.overlap.overlap(&metrics(&b.skip, &b.branch, step, &b.path)?)?;
                }
                write_gradstats(&mut sinks.gradstats, &grads.params, step, "raw")?;
                write_gradstats(&mut sinks.gradstats, &update, step, "transformed")?;
            }
            let last_good = params.clone();
            opt.step(&mut params, &update)?;
            if let Some(path) = params.first_non_finite() {
                let abort = Abort { step, epoch, what: "parameter", path };
                return Err(finish_aborted(&mut manifest, &dir, &last_good, abort));
            }
            net.update_running_stats(&mut params, &cache)?;
            loss_sum += loss * idx.len() as f64;
            correct += correct_predictions(&logits, &y);
            step += 1;
        }
        let n = data.train.len() as f64;
        let (val_loss, val_acc) = match &data.val {
            Some(v) => {
                let (l, a) = evaluate(&net, &params, v, cfg.batch_size)?;
                (Some(l), Some(a))
            }
            None => (None, None),
        };
        let row = MetricRow {
            epoch: epoch + 1,
            step,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            val_loss,
            val_acc,
            global_grad_norm: norm_sum / steps as f64,
        };
        log::info!(
            "epoch {} train_loss {:.4} train_acc {:.4} val_acc {}",
            row.epoch,
            row.train_loss,
            row.train_acc,
            val_acc.map_or("-".to_string(), |a| format!("{a:.4}"))
        );
        sinks.metrics.metric(&row)?;
        sinks.timing.timing(&TimingRow {
            epoch: epoch + 1,
            step,
            wallclock_s: started.elapsed().as_secs_f64(),
        })?;
        rows.push(row);
    }

    checkpoint::save(&params, &dir.join(CHECKPOINT))?;
    if cfg.epochs > 0 {
        let (l, a) = evaluate(&net, &params, &data.train, cfg.batch_size)?;
        manifest.final_train_loss = Some(l);
        manifest.final_train_acc = Some(a);
    }
    manifest.status = RunStatus::Completed;
    manifest.save(&dir)?;
    Ok(RunSummary {
        dir,
        manifest,
        metrics: rows,
    })
}

fn write_gradstats<T: Scalar>(sink: &mut CsvSink, grads: &GradMap<T>, step: u64, stage: &str) -> Result<()> {
    for r in layer_grad_stats(grads, step) {
        sink.gradstat(&GradStatRecord {
            step: r.step,
            stage: stage.to_string(),
            path: r.path,
            mean: r.mean,
            std: r.std,
            l2norm: r.l2norm,
        })?;
    }
    Ok(())
}

fn finish_aborted<T: Scalar>(manifest: &mut Manifest, dir: &Path, last_good: &ParamStore<T>, a: Abort) -> Error {
    let text = format!(
        "step {} (epoch {}): non-finite {} first in `{}`",
        a.step,
        a.epoch + 1,
        a.what,
        a.path
    );
    log::error!("{text}");
    manifest.status = RunStatus::Aborted;
    manifest.diagnostic = Some(text.clone());
    let written = checkpoint::save(last_good, &dir.join(CHECKPOINT))
        .and_then(|_| write_text(&dir.join(DIAGNOSTIC), &(text + "\n")))
        .and_then(|_| manifest.save(dir));
    match written {
        Ok(()) => Error::Diverged {
            step: a.step,
            path: a.path,
        },
        Err(e) => e,
    }
}
