//! Mini-batch training with Adam, an EMA shadow that doubles as the
//! consistency teacher, per-epoch validation and checkpoints.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Variant};
use crate::diffcore::{adam_step, ema_update, read_checkpoint, write_checkpoint, AdamState, EmaState, ParamSet};
use crate::error::{FlowsError, Result};
use crate::model::{checkpoint_arrays, compute_losses, prepare, split_checkpoint, Batch, LossTerms, LossWeights, Model};
use crate::scenesynth::SceneSample;

pub const FINAL_CHECKPOINT: &str = "checkpoint_final.bin";
pub const BEST_CHECKPOINT: &str = "checkpoint_best.bin";
pub const LAST_CHECKPOINT: &str = "checkpoint_last.bin";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const WALL_TIME: &str = "wall_time.txt";

/// Scenes used for the per-epoch validation losses.
const VAL_CAP: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: u64,
    pub train: LossTerms,
    pub val: LossTerms,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub ema: ParamSet,
    pub log: Vec<EpochLog>,
    /// Epoch (1-based) with the lowest validation objective.
    pub best_epoch: usize,
    pub steps: u64,
}

/// Optional hooks into the loop, used by tests and the CLI.
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Where checkpoints, the loss log and the wall-time file go.
    pub run_dir: Option<PathBuf>,
    /// Called after every optimizer step with the step count and the model.
    pub on_step: Option<&'a mut dyn FnMut(u64, &Model)>,
    /// Called after every epoch.
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochLog)>,
}

fn save(path: &Path, live: &ParamSet, ema: &ParamSet) -> Result<()> {
    let f = File::create(path).map_err(|e| FlowsError::io(format!("creating {}", path.display()), e))?;
    write_checkpoint(BufWriter::new(f), &checkpoint_arrays(live, ema))
}

/// Loads a checkpoint written by [`train`] into the architecture of `cfg`.
pub fn load_checkpoint(cfg: &RunConfig, path: &Path) -> Result<(Model, ParamSet)> {
    let f = File::open(path).map_err(|e| FlowsError::io(format!("opening {}", path.display()), e))?;
    let arrays = read_checkpoint(std::io::BufReader::new(f))?;
    let skeleton = Model::new(cfg, 0);
    let (live, ema) = split_checkpoint(&skeleton, arrays)?;
    Ok((skeleton.with_params(live)?, ema))
}

/// Mean losses over up to `VAL_CAP` scenes with a fixed sampling stream.
pub fn validation_losses(
    model: &Model,
    teacher: &ParamSet,
    scenes: &[SceneSample],
    cfg: &RunConfig,
    variant: Variant,
) -> Result<LossTerms> {
    let n = scenes.len().min(VAL_CAP);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_7a1d);
    let weights = LossWeights::for_variant(cfg, variant);
    let mut acc = LossTerms::default();
    for chunk in scenes[..n].chunks(cfg.batch_size) {
        let refs: Vec<&SceneSample> = chunk.iter().collect();
        let batch = Batch::new(model, &refs)?;
        let frozen = prepare(model, teacher, &batch, cfg, variant, &mut rng)?;
        let (t, _) = compute_losses(model, &model.params, &batch, &frozen, &weights)?;
        acc.add_scaled(&t, chunk.len() as f64 / n as f64);
    }
    Ok(acc)
}

fn write_log_header(w: &mut impl Write) -> std::io::Result<()> {
    writeln!(
        w,
        "epoch,steps,train_total,train_nll,train_mix,train_ent,train_div,train_flow,train_cons,train_rank,\
         val_total,val_nll,val_mix,val_ent,val_div,val_flow,val_cons,val_rank,grad_norm"
    )
}

fn write_log_row(w: &mut impl Write, e: &EpochLog) -> std::io::Result<()> {
    let t = |l: &LossTerms| {
        [l.total, l.nll, l.mix, l.ent, l.div, l.flow, l.cons, l.rank]
            .iter()
            .map(|v| format!("{v:.6}"))
            .collect::<Vec<_>>()
            .join(",")
    };
    writeln!(w, "{},{},{},{},{:.6}", e.epoch, e.steps, t(&e.train), t(&e.val), e.grad_norm)
}

/// Trains `variant` from seed `seed`.
///
/// Everything except the wall-time file is a deterministic function of the
/// configuration, the seed and the data. A non-finite loss or gradient stops
/// training with [`FlowsError::NonFinite`]; the checkpoint of the last
/// completed epoch stays on disk.
pub fn train(
    cfg: &RunConfig,
    variant: Variant,
    seed: u64,
    train_set: &[SceneSample],
    val_set: &[SceneSample],
    mut opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(FlowsError::Data("empty training split".into()));
    }
    let started = Instant::now();
    let mut model = Model::new(cfg, seed);
    let mut ema = EmaState::new(&model.params, cfg.ema_decay)?;
    let mut adam = AdamState::new(&model.params, cfg.adam());
    let weights = LossWeights::for_variant(cfg, variant);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(17);

    let mut log_file = match &opts.run_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| FlowsError::io(format!("creating {}", dir.display()), e))?;
            let path = dir.join(TRAIN_LOG);
            let f = File::create(&path).map_err(|e| FlowsError::io(format!("creating {}", path.display()), e))?;
            let mut w = BufWriter::new(f);
            write_log_header(&mut w).map_err(|e| FlowsError::io("writing loss log", e))?;
            Some(w)
        }
        None => None,
    };

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best = (f64::INFINITY, 0usize);
    let mut steps = 0u64;
    let total = (cfg.epochs * train_set.len().div_ceil(cfg.batch_size)) as u64;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = LossTerms::default();
        let mut norm_acc = 0.0;
        let nb = order.len().div_ceil(cfg.batch_size);
        for idx in order.chunks(cfg.batch_size) {
            let refs: Vec<&SceneSample> = idx.iter().map(|&i| &train_set[i]).collect();
            let batch = Batch::new(&model, &refs)?;
            let frozen = prepare(&model, &ema.shadow, &batch, cfg, variant, &mut rng)?;
            let (terms, mut grads) = compute_losses(&model, &model.params, &batch, &frozen, &weights)?;
            if !terms.is_finite() {
                return Err(FlowsError::NonFinite {
                    name: "loss".into(),
                    message: format!("epoch {epoch}, step {}: {terms:?}", steps + 1),
                });
            }
            if let Some(name) = grads.first_non_finite(&model.params) {
                return Err(FlowsError::NonFinite {
                    name: name.to_string(),
                    message: format!("gradient at epoch {epoch}, step {}", steps + 1),
                });
            }
            let norm = grads.global_norm();
            if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
                grads.scale(cfg.grad_clip / norm);
            }
            adam.config.lr = cfg.lr_at(steps, total);
            adam_step(&mut model.params, &grads, &mut adam)?;
            ema_update(&model.params, &mut ema)?;
            steps += 1;
            acc.add_scaled(&terms, 1.0 / nb as f64);
            norm_acc += norm / nb as f64;
            if let Some(f) = opts.on_step.as_mut() {
                f(steps, &model);
            }
        }
        let val = if val_set.is_empty() {
            acc
        } else {
            validation_losses(&model, &ema.shadow, val_set, cfg, variant)?
        };
        let entry = EpochLog {
            epoch,
            steps,
            train: acc,
            val,
            grad_norm: norm_acc,
        };
        log::info!(
            "{} seed {seed} epoch {epoch}: train {:.4} val {:.4}",
            variant.name(),
            acc.total,
            val.total
        );
        if let Some(w) = log_file.as_mut() {
            write_log_row(w, &entry)
                .and_then(|_| w.flush())
                .map_err(|e| FlowsError::io("writing loss log", e))?;
        }
        if let Some(dir) = &opts.run_dir {
            save(&dir.join(LAST_CHECKPOINT), &model.params, &ema.shadow)?;
            if val.total < best.0 {
                save(&dir.join(BEST_CHECKPOINT), &model.params, &ema.shadow)?;
            }
        }
        if val.total < best.0 {
            best = (val.total, epoch);
        }
        if let Some(f) = opts.on_epoch.as_mut() {
            f(&entry);
        }
        log.push(entry);
    }

    if let Some(dir) = &opts.run_dir {
        save(&dir.join(FINAL_CHECKPOINT), &model.params, &ema.shadow)?;
        let path = dir.join(WALL_TIME);
        std::fs::write(&path, format!("{:.3}\n", started.elapsed().as_secs_f64()))
            .map_err(|e| FlowsError::io(format!("writing {}", path.display()), e))?;
    }
    Ok(TrainOutcome {
        model,
        ema: ema.shadow,
        log,
        best_epoch: best.1,
        steps,
    })
}
