//! `flows`: synthesize scenes, train variants, evaluate and tabulate.
//!
//! Layout under the output directory:
//!
//! ```text
//! <out>/data/{train,val,test}.jsonl, manifest.json
//! <out>/runs/<variant>-seed<N>/config.toml, checkpoints, logs, eval outputs, report/
//! <out>/ablation/config.toml, runs.json, summary.csv
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use flows_core::ablation::{run_ablation, summarize, Splits};
use flows_core::eval::{diagnostics, evaluate, step_sweep, EvalOptions};
use flows_core::exec::{with_threads, Exec};
use flows_core::report::{write_json, write_report, DIAGNOSTICS_FILE, METRICS_FILE, SWEEP_FILE};
use flows_core::scenesynth::{config_hash, generate_dataset, load_dataset, write_dataset, Split};
use flows_core::train::{load_checkpoint, train, TrainOptions, FINAL_CHECKPOINT};
use flows_core::{FlowsError, Result, RunConfig, SceneSample, Variant};

const CONFIG_FILE: &str = "config.toml";
const EVAL_WALL_TIME: &str = "eval_wall_time.json";

#[derive(Parser)]
#[command(name = "flows", version, about = "Anchored one-step flow matching on synthetic junction scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train, val and test splits.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Overwrite existing dataset files.
        #[arg(long)]
        force: bool,
    },
    /// Train one variant.
    Train(RunArgs),
    /// Evaluate a trained run on the test split.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Integration steps.
        #[arg(long, default_value_t = 1)]
        steps: usize,
    },
    /// Evaluate a trained run at every configured step count.
    SweepSteps(RunArgs),
    /// Train and evaluate all four variants over the configured seeds.
    Ablate(Common),
    /// Write the CSV tables of an evaluated run.
    Report(RunArgs),
}

#[derive(Args)]
struct Common {
    /// TOML config; defaults apply to absent keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides FLOWS_OUT and the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for evaluation, 0 for all cores (overrides FLOWS_THREADS).
    #[arg(long)]
    threads: Option<usize>,
    /// Training seed; for `ablate`, a single seed replacing the configured list.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "full")]
    variant: String,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply_env()?;
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.ablate_seeds = vec![s];
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn data_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("data")
}

fn split_path(cfg: &RunConfig, split: Split) -> PathBuf {
    data_dir(cfg).join(format!("{}.jsonl", split.name()))
}

fn run_dir(cfg: &RunConfig, variant: Variant) -> PathBuf {
    cfg.out_dir.join("runs").join(format!("{}-seed{}", variant.name(), cfg.seed))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| FlowsError::io(format!("creating {}", dir.display()), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| FlowsError::io(format!("writing {}", path.display()), e))
}

fn cmd_synth(cfg: &RunConfig, force: bool) -> Result<()> {
    let dir = data_dir(cfg);
    if !force {
        if let Some(p) = Split::ALL.iter().map(|&s| split_path(cfg, s)).find(|p| p.exists()) {
            return Err(FlowsError::Data(format!("{} exists; pass --force to overwrite", p.display())));
        }
    }
    create_dir(&dir)?;
    let sc = cfg.scenario();
    let mut manifests = Vec::new();
    for split in Split::ALL {
        let (scenes, manifest) = generate_dataset(&sc, split)?;
        let path = split_path(cfg, split);
        let f = File::create(&path).map_err(|e| FlowsError::io(format!("creating {}", path.display()), e))?;
        write_dataset(BufWriter::new(f), &sc, split, &scenes)?;
        log::info!("{}: {} scenes", path.display(), scenes.len());
        manifests.push(manifest);
    }
    write_json(&dir.join("manifest.json"), &manifests)
}

/// Loads a split written by `synth`, checking it was made from this config.
fn load_split(cfg: &RunConfig, split: Split) -> Result<Vec<SceneSample>> {
    let path = split_path(cfg, split);
    if !path.is_file() {
        return Err(FlowsError::Data(format!("{} not found; run `flows synth` first", path.display())));
    }
    let (header, scenes) = load_dataset(&path)?;
    if header.config_hash != config_hash(&cfg.scenario()) {
        return Err(FlowsError::Data(format!(
            "{} was generated from different scenario settings; rerun `flows synth --force`",
            path.display()
        )));
    }
    Ok(scenes)
}

fn cmd_train(cfg: &RunConfig, variant: Variant) -> Result<()> {
    let train_set = load_split(cfg, Split::Train)?;
    let val_set = load_split(cfg, Split::Val)?;
    let dir = run_dir(cfg, variant);
    create_dir(&dir)?;
    write_text(&dir.join(CONFIG_FILE), &cfg.to_toml())?;
    let mut report = |e: &flows_core::train::EpochLog| {
        log::info!("epoch {} train {:.4} val {:.4}", e.epoch, e.train.total, e.val.total);
    };
    let opts = TrainOptions {
        run_dir: Some(dir.clone()),
        on_epoch: Some(&mut report),
        ..TrainOptions::default()
    };
    let out = train(cfg, variant, cfg.seed, &train_set, &val_set, opts)?;
    println!(
        "trained {} seed {} for {} steps (best epoch {}) -> {}",
        variant.name(),
        cfg.seed,
        out.steps,
        out.best_epoch,
        dir.display()
    );
    Ok(())
}

fn eval_options(cfg: &RunConfig, steps: usize) -> EvalOptions {
    EvalOptions {
        steps,
        exec: Exec::Parallel,
        threads: cfg.threads,
        ..EvalOptions::default()
    }
}

fn load_run(cfg: &RunConfig, variant: Variant) -> Result<(PathBuf, flows_core::Model)> {
    let dir = run_dir(cfg, variant);
    let ckpt = dir.join(FINAL_CHECKPOINT);
    if !ckpt.is_file() {
        return Err(FlowsError::Data(format!("{} not found; run `flows train` first", ckpt.display())));
    }
    let (model, _ema) = load_checkpoint(cfg, &ckpt)?;
    Ok((dir, model))
}

fn cmd_eval(cfg: &RunConfig, variant: Variant, steps: usize) -> Result<()> {
    let (dir, model) = load_run(cfg, variant)?;
    let test = load_split(cfg, Split::Test)?;
    let opts = eval_options(cfg, steps);
    let started = Instant::now();
    let metrics = evaluate(&model, &model.params, cfg, variant, &test, &opts)?;
    let secs = started.elapsed().as_secs_f64();
    let diag = diagnostics(&model, &model.params, cfg, variant, &test, &opts)?;
    write_json(&dir.join(METRICS_FILE), &metrics)?;
    write_json(&dir.join(DIAGNOSTICS_FILE), &diag)?;
    // wall time is machine-dependent and lives apart from the reproducible outputs
    write_json(
        &dir.join(EVAL_WALL_TIME),
        &BTreeMap::from([
            ("steps", steps as f64),
            ("seconds", secs),
            ("ms_per_scene", 1e3 * secs / test.len() as f64),
        ]),
    )?;
    println!(
        "{} steps={} minADE {:.4} minFDE {:.4} miss {:.4} mAP {:.4} soft-mAP {:.4} field evals/scene {}",
        variant.name(),
        steps,
        metrics.min_ade,
        metrics.min_fde,
        metrics.miss_rate,
        metrics.map,
        metrics.soft_map,
        metrics.field_evals_per_scene
    );
    println!("wall time {:.2} ms/scene on this machine (not comparable across hardware)", 1e3 * secs / test.len() as f64);
    Ok(())
}

fn cmd_sweep(cfg: &RunConfig, variant: Variant) -> Result<()> {
    let (dir, model) = load_run(cfg, variant)?;
    let test = load_split(cfg, Split::Test)?;
    let rows = step_sweep(&model, &model.params, cfg, variant, &test, &cfg.sweep_steps, &eval_options(cfg, 1))?;
    write_json(&dir.join(SWEEP_FILE), &rows)?;
    println!("steps  evals/scene  minADE   minFDE   miss     mAP      soft-mAP");
    for r in &rows {
        println!(
            "{:>5}  {:>11}  {:.4}  {:.4}  {:.4}  {:.4}  {:.4}",
            r.steps, r.field_evals_per_scene, r.min_ade, r.min_fde, r.miss_rate, r.map, r.soft_map
        );
    }
    Ok(())
}

fn cmd_report(cfg: &RunConfig, variant: Variant) -> Result<()> {
    let dir = run_dir(cfg, variant);
    for p in write_report(&dir)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig) -> Result<()> {
    let data = Splits {
        train: load_split(cfg, Split::Train)?,
        val: load_split(cfg, Split::Val)?,
        test: load_split(cfg, Split::Test)?,
    };
    let dir = cfg.out_dir.join("ablation");
    create_dir(&dir)?;
    write_text(&dir.join(CONFIG_FILE), &cfg.to_toml())?;
    // runs are the parallel unit here; evaluation inside each run stays sequential
    let opts = EvalOptions {
        exec: Exec::Sequential,
        ..EvalOptions::default()
    };
    let runs = with_threads(cfg.threads, || {
        run_ablation(cfg, &Variant::ALL, &cfg.ablate_seeds, &data, Exec::Parallel, &opts)
    })?;
    write_json(&dir.join("runs.json"), &runs)?;
    let rows = summarize(&runs);
    let mut table = String::from("variant,seeds,map_mean,map_std,soft_map_mean,min_ade_mean,min_fde_mean,miss_rate_mean,semigroup_mean\n");
    println!("variant            mAP              soft-mAP  minADE   minFDE   miss     semigroup");
    for r in &rows {
        table.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.variant.name(),
            r.seeds,
            r.map_mean,
            r.map_std,
            r.soft_map_mean,
            r.min_ade_mean,
            r.min_fde_mean,
            r.miss_rate_mean,
            r.semigroup_mean
        ));
        println!(
            "{:<18} {:.4} ± {:.4}  {:.4}    {:.4}   {:.4}   {:.4}   {:.4}",
            r.variant.name(),
            r.map_mean,
            r.map_std,
            r.soft_map_mean,
            r.min_ade_mean,
            r.min_fde_mean,
            r.miss_rate_mean,
            r.semigroup_mean
        );
    }
    write_text(&dir.join("summary.csv"), &table)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common, force } => cmd_synth(&common.resolve()?, force),
        Command::Train(a) => cmd_train(&a.common.resolve()?, Variant::parse(&a.variant)?),
        Command::Eval { run, steps } => {
            if steps == 0 {
                return Err(FlowsError::config("steps", "must be at least 1"));
            }
            cmd_eval(&run.common.resolve()?, Variant::parse(&run.variant)?, steps)
        }
        Command::SweepSteps(a) => cmd_sweep(&a.common.resolve()?, Variant::parse(&a.variant)?),
        Command::Ablate(c) => cmd_ablate(&c.resolve()?),
        Command::Report(a) => cmd_report(&a.common.resolve()?, Variant::parse(&a.variant)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
