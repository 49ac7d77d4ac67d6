use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::{build_model, ArchSpec, ForwardCtx, Model};
use crate::autograd::{cross_entropy, Tape};
use crate::data::{
    batches, eval_batches, load_cifar100_dir, load_cifar10_dir_limited, stack, synthetic_blobs,
    BatchPlan, DatasetKind, LabeledImage, Split,
};
use crate::error::{Error, Result};
use crate::harness::checkpoint::save_checkpoint;
use crate::harness::config::RunConfig;
use crate::harness::metrics::{topk_hits, MetricsRow, MetricsWriter};
use crate::init::{lsuv_init, scaled_uniform_model, InitScheme, LsuvReport};
use crate::layers::Mode;
use crate::ops::softmax_rows;
use crate::optim::{apply_l2, l2_total, Optimizer};
use crate::tensor::{Element, Precision};

pub const METRICS_FILE: &str = "metrics.csv";
pub const LSUV_FILE: &str = "lsuv.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CONFIG_FILE: &str = "config.toml";

/// Mixes a run seed with loop counters into an independent stream seed.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut z = seed;
    for &p in parts {
        z = z.wrapping_add(p.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Loads (or generates) the train and test images named by `cfg`.
pub fn load_split(cfg: &RunConfig, arch: &ArchSpec) -> Result<Split> {
    let mut split = match cfg.dataset {
        DatasetKind::Synthetic => {
            let size = arch.input[1];
            let s = cfg.synthetic;
            Split {
                train: synthetic_blobs(s.train, s.classes, size, cfg.seed),
                test: synthetic_blobs(s.test, s.classes, size, derive_seed(cfg.seed, &[u64::MAX])),
            }
        }
        kind => {
            let dir = cfg
                .data_dir
                .as_deref()
                .ok_or_else(|| Error::Config(format!("dataset {kind:?} needs a data directory")))?;
            let split = if kind == DatasetKind::Cifar10 {
                load_cifar10_dir_limited(dir, cfg.train_limit, cfg.test_limit)?
            } else {
                load_cifar100_dir(dir)?
            };
            if arch.input != [3, 32, 32] {
                return Err(Error::Config(format!(
                    "CIFAR images are 3x32x32 but the architecture expects {:?}",
                    arch.input
                )));
            }
            split
        }
    };
    if let Some(n) = cfg.train_limit {
        split.train.truncate(n);
    }
    if let Some(n) = cfg.test_limit {
        split.test.truncate(n);
    }
    if split.train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    Ok(split)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
    pub samples: usize,
}

/// Mean cross-entropy and top-1/top-5 accuracy in inference mode.
pub fn evaluate<T: Element>(
    model: &Model<T>,
    data: &[LabeledImage],
    batch_size: usize,
) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot evaluate on an empty set".into(),
        ));
    }
    let (mut loss, mut top1, mut top5) = (0.0, 0, 0);
    for batch in eval_batches::<T>(data, batch_size) {
        let (x, labels) = batch?;
        let logits = model.logits(&x, Mode::Infer)?;
        let probs = softmax_rows(&logits);
        loss += cross_entropy(&probs, &labels, T::zero())?.to_f64() * labels.len() as f64;
        top1 += topk_hits(&logits, &labels, 1)?;
        top5 += topk_hits(&logits, &labels, 5)?;
    }
    let n = data.len() as f64;
    Ok(EvalResult {
        loss: loss / n,
        top1: top1 as f64 / n,
        top5: top5 as f64 / n,
        samples: data.len(),
    })
}

pub struct TrainOutcome<T> {
    pub model: Model<T>,
    pub rows: Vec<MetricsRow>,
    pub lsuv: Option<LsuvReport>,
}

/// Builds and initializes the model for `cfg`.
pub fn initialized_model<T: Element>(
    cfg: &RunConfig,
    train: &[LabeledImage],
) -> Result<(Model<T>, Option<LsuvReport>)> {
    let arch = cfg.arch()?;
    let mut model = build_model::<T>(&arch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    scaled_uniform_model(&mut model, &mut rng);
    let report = match cfg.init.scheme {
        InitScheme::Scaled => None,
        InitScheme::Lsuv => {
            let mut idx: Vec<usize> = (0..train.len()).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
                cfg.seed,
                &[cfg.init.seed],
            )));
            let probe: Vec<&LabeledImage> = idx
                .iter()
                .take(cfg.init.probe_batch)
                .map(|&i| &train[i])
                .collect();
            let (x, _) = stack::<T>(&probe)?;
            Some(lsuv_init(&mut model, &x, &cfg.init)?)
        }
    };
    Ok((model, report))
}

/// Runs the epoch loop; `on_epoch` sees each metrics row as it is produced.
pub fn train_model<T: Element>(
    cfg: &RunConfig,
    split: &Split,
    mut on_epoch: impl FnMut(&MetricsRow) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let (mut model, lsuv) = initialized_model::<T>(cfg, &split.train)?;
    let mut optimizer = Optimizer::<T>::new(cfg.optimizer, cfg.sgd, cfg.eve);
    let mut rows = Vec::with_capacity(cfg.epochs);
    let eval_set = if split.test.is_empty() {
        &split.train
    } else {
        &split.test
    };

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let plan = BatchPlan::new(split.train.len(), cfg.batch_size, cfg.seed, epoch as u64)?;
        let (mut loss_sum, mut correct) = (0.0, 0);
        for (b, batch) in batches::<T>(&split.train, plan, cfg.augment).enumerate() {
            let (x, labels) = batch?;
            let mut tape = Tape::new();
            let xv = tape.input(x);
            let mut ctx = ForwardCtx::new(
                Mode::Train,
                derive_seed(cfg.seed, &[epoch as u64, b as u64]),
            );
            let logits = model.forward(&mut tape, xv, &mut ctx)?;
            let probs = tape.softmax(logits);
            let penalty = l2_total(model.params(), cfg.l2, cfg.l2_coverage);
            let loss = tape.cross_entropy(probs, &labels, T::from_f64(penalty))?;
            let loss_value = tape.value(loss).data()[0].to_f64();
            if !loss_value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at epoch {epoch}, batch {}",
                    b + 1
                )));
            }
            correct += topk_hits(tape.value(logits), &labels, 1)?;
            let mut grads = tape.backward(loss)?;
            drop(tape);
            apply_l2(&mut grads, model.params(), cfg.l2, cfg.l2_coverage)?;
            optimizer
                .step(model.params_mut(), &grads, loss_value)
                .map_err(|e| Error::NonFinite(format!("epoch {epoch}, batch {}: {e}", b + 1)))?;
            model.commit_running_stats(&mut ctx)?;
            loss_sum += loss_value * labels.len() as f64;
        }
        let eval = evaluate(&model, eval_set, cfg.batch_size)?;
        let n = split.train.len() as f64;
        let row = MetricsRow {
            epoch,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            val_loss: eval.loss,
            val_acc: eval.top1,
            top5_acc: eval.top5,
            learning_rate: optimizer.learning_rate(),
            seconds: if cfg.deterministic {
                0.0
            } else {
                started.elapsed().as_secs_f64()
            },
        };
        on_epoch(&row)?;
        rows.push(row);
    }
    Ok(TrainOutcome { model, rows, lsuv })
}

/// Files written by [`run_train`].
#[derive(Clone, Debug, PartialEq)]
pub struct RunArtifacts {
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
    pub lsuv: Option<PathBuf>,
    pub rows: Vec<MetricsRow>,
}

/// Trains per `cfg`, writing the config, metrics, optional LSUV report and
/// final checkpoint into `cfg.out`.
pub fn run_train(cfg: &RunConfig, mut on_epoch: impl FnMut(&MetricsRow)) -> Result<RunArtifacts> {
    cfg.validate()?;
    let arch = cfg.arch()?;
    let split = load_split(cfg, &arch)?;
    match cfg.precision {
        Precision::Standard => run_train_with::<f32>(cfg, &split, &mut on_epoch),
        Precision::Wide => run_train_with::<f64>(cfg, &split, &mut on_epoch),
    }
}

fn run_train_with<T: Element>(
    cfg: &RunConfig,
    split: &Split,
    on_epoch: &mut dyn FnMut(&MetricsRow),
) -> Result<RunArtifacts> {
    let out: &Path = &cfg.out;
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_FILE), cfg.to_toml())?;
    let metrics = out.join(METRICS_FILE);
    let mut writer = MetricsWriter::create(&metrics)?;
    if cfg.epochs == 0 {
        fs::write(
            &metrics,
            format!("{}\n", crate::harness::metrics::METRICS_HEADER),
        )?;
    }
    let outcome = train_model::<T>(cfg, split, |row| {
        writer.write(row)?;
        on_epoch(row);
        Ok(())
    })?;
    let lsuv = match &outcome.lsuv {
        Some(report) => {
            let path = out.join(LSUV_FILE);
            fs::write(&path, report.to_csv())?;
            Some(path)
        }
        None => None,
    };
    let checkpoint = out.join(CHECKPOINT_FILE);
    save_checkpoint(&checkpoint, &outcome.model, cfg.epochs as u64, cfg.seed)?;
    Ok(RunArtifacts {
        metrics,
        checkpoint,
        lsuv,
        rows: outcome.rows,
    })
}

/// Loads a checkpoint (in whichever precision it was saved) and evaluates
/// it on the test split named by `cfg`.
pub fn run_eval(
    checkpoint: &Path,
    cfg: &RunConfig,
) -> Result<(crate::harness::CheckpointHeader, EvalResult)> {
    let bytes = fs::read(checkpoint)?;
    let header = crate::harness::peek_header(&bytes)?;
    let mut data_cfg = cfg.clone();
    data_cfg.synthetic.classes = header.arch.classes;
    let split = load_split(&data_cfg, &header.arch)?;
    let test = if split.test.is_empty() {
        &split.train
    } else {
        &split.test
    };
    let result = match header.precision {
        Precision::Standard => evaluate(
            &crate::harness::decode_checkpoint::<f32>(&bytes)?.0,
            test,
            cfg.batch_size,
        )?,
        Precision::Wide => evaluate(
            &crate::harness::decode_checkpoint::<f64>(&bytes)?.0,
            test,
            cfg.batch_size,
        )?,
    };
    Ok((header, result))
}
