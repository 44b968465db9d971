//! Command line driver for the pretraining pipeline. Every subcommand
//! works inside one experiment directory holding a config snapshot and
//! per-stage outputs, so a run is reproducible and restartable from
//! the filesystem alone. Process exit codes distinguish configuration
//! mistakes (2), missing stage artifacts (3), and numerical failures
//! during training (4) from everything else (1).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use jedssl_core::checkpoint::load_checkpoint;
use jedssl_core::config::{load_config, parse_config, preset};
use jedssl_core::corpus::{generate_corpus, load_corpus, save_corpus, train_test_split, Corpus};
use jedssl_core::kmeans::save_model;
use jedssl_core::training::{
    append_metrics, discover_units, evaluate, finetune, load_assignments, pretrain,
    resume_pretrain, save_assignments, save_report, scratch_params, PretrainInit, StageOutcome,
    UnitAssignments,
};
use jedssl_core::{CoreError, ExperimentConfig, FinetuneMode, Result};

#[derive(Parser)]
#[command(name = "jedssl", about = "Joint encoder-decoder speech pretraining pipeline")]
struct Cli {
    /// Preset name (desk-tiny, desk-small, full-360h) or a TOML config path.
    #[arg(long, global = true, value_name = "PRESET|PATH")]
    config: Option<String>,

    /// Experiment directory for the config snapshot and all stage outputs.
    #[arg(long, global = true, default_value = "exp")]
    dir: PathBuf,

    /// Worker threads (JEDSSL_THREADS also works; default all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus into <dir>/corpus.
    GenCorpus {
        /// Regenerate even if the corpus already exists.
        #[arg(long)]
        force: bool,
    },
    /// Cluster frame features into pretraining units (<dir>/units.json).
    DiscoverUnits {
        /// Take features from this checkpoint instead of random weights.
        #[arg(long, value_name = "CKPT")]
        checkpoint: Option<PathBuf>,
        /// Refit even if unit assignments already exist.
        #[arg(long)]
        force: bool,
    },
    /// Run masked-prediction pretraining (checkpoints under <dir>/pretrain).
    Pretrain {
        /// Start from this checkpoint's encoder with a fresh decoder.
        #[arg(long, value_name = "CKPT", conflicts_with = "resume")]
        from_encoder: Option<PathBuf>,
        /// Continue an interrupted run from its newest checkpoint.
        #[arg(long)]
        resume: bool,
        /// Discard existing checkpoints and start over.
        #[arg(long, conflicts_with = "resume")]
        force: bool,
    },
    /// Finetune a pretrained checkpoint for character recognition.
    Finetune {
        /// Supervised regime, e.g. joint_enc_dec or ctc_only_encoder.
        #[arg(long)]
        mode: String,
        /// Pretraining checkpoint to start from (default: best, else newest).
        #[arg(long, value_name = "CKPT")]
        checkpoint: Option<PathBuf>,
        /// Discard existing checkpoints for this mode and start over.
        #[arg(long)]
        force: bool,
    },
    /// Decode a finetuned model and report character error rate.
    Evaluate {
        /// Supervised regime the checkpoint was finetuned in.
        #[arg(long)]
        mode: String,
        /// Finetuned checkpoint to score (default: best, else newest).
        #[arg(long, value_name = "CKPT")]
        checkpoint: Option<PathBuf>,
        /// Utterances to score: test, train, or all.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Full pipeline: corpus, units, pretrain, finetune, evaluate.
    Run {
        /// Supervised regime for the finetuning stage.
        #[arg(long, default_value = "joint_enc_dec")]
        mode: String,
        /// Wipe the experiment directory and start from scratch.
        #[arg(long)]
        force: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli
        .threads
        .or_else(|| std::env::var("JEDSSL_THREADS").ok().and_then(|v| v.parse().ok()));
    if let Some(n) = threads {
        // The global pool can only be built once; a second attempt is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Stable exit codes so scripts can tell a bad flag from a bad run.
fn exit_code(e: &CoreError) -> u8 {
    match e {
        CoreError::Config(_) | CoreError::ConfigDiff(_) => 2,
        CoreError::Missing(_) | CoreError::Checkpoint(_) => 3,
        CoreError::Numerical(_)
        | CoreError::NonFinite { .. }
        | CoreError::NanGradient(_)
        | CoreError::Diverged { .. }
        | CoreError::CtcInfeasible { .. } => 4,
        _ => 1,
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let dir = cli.dir;
    // Wipe before the snapshot is read so --force can also switch configs.
    if let Command::Run { force: true, .. } = &cli.command {
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
    }
    let cfg = establish_config(&dir, cli.config.as_deref())?;
    match cli.command {
        Command::GenCorpus { force } => gen_corpus(&cfg, &dir, force).map(|_| ()),
        Command::DiscoverUnits { checkpoint, force } => {
            discover(&cfg, &dir, checkpoint.as_deref(), force).map(|_| ())
        }
        Command::Pretrain { from_encoder, resume, force } => {
            run_pretrain(&cfg, &dir, from_encoder.as_deref(), resume, force).map(|_| ())
        }
        Command::Finetune { mode, checkpoint, force } => {
            let mode = parse_mode(&mode)?;
            run_finetune(&cfg, &dir, mode, checkpoint.as_deref(), force).map(|_| ())
        }
        Command::Evaluate { mode, checkpoint, split } => {
            let mode = parse_mode(&mode)?;
            run_evaluate(&cfg, &dir, mode, checkpoint.as_deref(), &split)
        }
        Command::Run { mode, .. } => {
            let mode = parse_mode(&mode)?;
            run_pipeline(&cfg, &dir, mode)
        }
    }
}

// ── Config snapshot ─────────────────────────────────────────────────

/// Resolves the experiment config. The first command to touch a
/// directory snapshots the raw TOML into <dir>/config.toml; later
/// commands read that back and refuse a conflicting --config, so one
/// directory always means one configuration.
fn establish_config(dir: &Path, arg: Option<&str>) -> Result<ExperimentConfig> {
    let snap = dir.join("config.toml");
    if snap.exists() {
        let stored = parse_config(&fs::read_to_string(&snap)?)?;
        if let Some(arg) = arg {
            let given = load_config(arg)?;
            if config_echo(&stored)? != config_echo(&given)? {
                return Err(CoreError::Config(format!(
                    "--config {} disagrees with the snapshot at {}; use a fresh --dir for a new configuration",
                    arg,
                    snap.display()
                )));
            }
        }
        return Ok(stored);
    }
    let arg = arg.ok_or_else(|| {
        CoreError::Config(format!(
            "no configuration: pass --config <preset|path> (no snapshot at {})",
            snap.display()
        ))
    })?;
    let text = match preset(arg) {
        Some(t) => t.to_string(),
        None => fs::read_to_string(arg)?,
    };
    let cfg = parse_config(&text)?;
    fs::create_dir_all(dir)?;
    fs::write(&snap, text)?;
    Ok(cfg)
}

fn config_echo(cfg: &ExperimentConfig) -> Result<serde_json::Value> {
    serde_json::to_value(cfg).map_err(|e| CoreError::Config(format!("config echo: {e}")))
}

fn parse_mode(s: &str) -> Result<FinetuneMode> {
    FinetuneMode::parse(s).ok_or_else(|| {
        let all: Vec<&str> = FinetuneMode::ALL.iter().map(|m| m.tag()).collect();
        CoreError::Config(format!("unknown mode {}; expected one of {}", s, all.join(", ")))
    })
}

// ── Stage artifacts ─────────────────────────────────────────────────

fn corpus_dir(dir: &Path) -> PathBuf {
    dir.join("corpus")
}

fn units_path(dir: &Path) -> PathBuf {
    dir.join("units.json")
}

fn require_corpus(dir: &Path) -> Result<Corpus> {
    let cdir = corpus_dir(dir);
    if !cdir.join("manifest.json").exists() {
        return Err(CoreError::Missing(format!(
            "corpus at {} (run `jedssl gen-corpus` first)",
            cdir.display()
        )));
    }
    load_corpus(&cdir)
}

fn require_units(dir: &Path) -> Result<UnitAssignments> {
    let path = units_path(dir);
    if !path.exists() {
        return Err(CoreError::Missing(format!(
            "unit assignments at {} (run `jedssl discover-units` first)",
            path.display()
        )));
    }
    load_assignments(&path)
}

fn split_indices(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<(Vec<usize>, Vec<usize>)> {
    train_test_split(corpus.utterances.len(), cfg.eval.holdout_utts)
}

/// Newest numbered `<prefix><step>.ckpt` in a stage directory.
fn newest_checkpoint(dir: &Path, prefix: &str) -> Result<PathBuf> {
    let mut newest: Option<(u64, PathBuf)> = None;
    if dir.is_dir() {
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            let step = path
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_prefix(prefix))
                .and_then(|r| r.strip_suffix(".ckpt"))
                .and_then(|digits| digits.parse::<u64>().ok());
            if let Some(s) = step {
                if newest.as_ref().map_or(true, |(b, _)| s > *b) {
                    newest = Some((s, path));
                }
            }
        }
    }
    newest.map(|(_, p)| p).ok_or_else(|| {
        CoreError::Missing(format!("checkpoints under {} (run the stage first)", dir.display()))
    })
}

/// Best checkpoint if the stage kept one, else the newest numbered.
fn best_or_newest(dir: &Path, prefix: &str) -> Result<PathBuf> {
    let best = dir.join(format!("{prefix}best.ckpt"));
    if best.exists() {
        Ok(best)
    } else {
        newest_checkpoint(dir, prefix)
    }
}

/// Claims a stage output directory: wipes it under --force, refuses to
/// clobber existing checkpoints otherwise.
fn claim_stage_dir(sdir: &Path, prefix: &str, force: bool, hint: &str) -> Result<()> {
    if force && sdir.exists() {
        fs::remove_dir_all(sdir)?;
    }
    if newest_checkpoint(sdir, prefix).is_ok() {
        return Err(CoreError::Config(format!(
            "{} already has checkpoints; pass --force to redo{}",
            sdir.display(),
            hint
        )));
    }
    fs::create_dir_all(sdir)?;
    Ok(())
}

// ── Stages ──────────────────────────────────────────────────────────

fn gen_corpus(cfg: &ExperimentConfig, dir: &Path, force: bool) -> Result<Corpus> {
    let cdir = corpus_dir(dir);
    if cdir.exists() {
        if !force {
            return Err(CoreError::Config(format!(
                "{} already exists; pass --force to regenerate",
                cdir.display()
            )));
        }
        fs::remove_dir_all(&cdir)?;
    }
    let corpus = generate_corpus(&cfg.frontend.corpus_spec(cfg.seed))?;
    save_corpus(&corpus, &cdir)?;
    let samples: usize = corpus.utterances.iter().map(|u| u.samples.len()).sum();
    println!(
        "corpus: {} utterances, {:.1}s audio -> {}",
        corpus.utterances.len(),
        samples as f64 / cfg.frontend.sample_rate as f64,
        cdir.display()
    );
    Ok(corpus)
}

fn discover(
    cfg: &ExperimentConfig,
    dir: &Path,
    checkpoint: Option<&Path>,
    force: bool,
) -> Result<UnitAssignments> {
    let upath = units_path(dir);
    if upath.exists() && !force {
        return Err(CoreError::Config(format!(
            "{} already exists; pass --force to refit",
            upath.display()
        )));
    }
    let corpus = require_corpus(dir)?;
    let (train_idx, _) = split_indices(cfg, &corpus)?;
    let params = match checkpoint {
        Some(p) => load_checkpoint(p)?.1,
        None => scratch_params(cfg)?,
    };
    let (model, units) = discover_units(cfg, &corpus, &train_idx, &params)?;
    save_model(&model, &dir.join("kmeans.json"))?;
    save_assignments(&units, &upath)?;
    let frames: usize = units.ids.values().map(|v| v.len()).sum();
    println!(
        "units: {} frames over {} utterances into {} clusters (layer {}, {} k-means iters) -> {}",
        frames,
        units.ids.len(),
        units.k,
        units.feature_layer,
        model.iterations,
        upath.display()
    );
    Ok(units)
}

fn run_pretrain(
    cfg: &ExperimentConfig,
    dir: &Path,
    from_encoder: Option<&Path>,
    resume: bool,
    force: bool,
) -> Result<StageOutcome> {
    let corpus = require_corpus(dir)?;
    let units = require_units(dir)?;
    let (train_idx, _) = split_indices(cfg, &corpus)?;
    let pdir = dir.join("pretrain");
    let outcome = if resume {
        let ckpt = newest_checkpoint(&pdir, "pretrain-")?;
        println!("resuming from {}", ckpt.display());
        let (_, outcome) = resume_pretrain(cfg, &corpus, &train_idx, &units, &ckpt, Some(&pdir))?;
        outcome
    } else {
        claim_stage_dir(&pdir, "pretrain-", force, " or --resume to continue")?;
        let init = match from_encoder {
            Some(p) => PretrainInit::EncoderFromCheckpointDecoderRandom(p),
            None => PretrainInit::Scratch,
        };
        let (_, outcome) = pretrain(cfg, &corpus, &train_idx, &units, init, Some(&pdir))?;
        outcome
    };
    append_metrics(&pdir.join("metrics.jsonl"), &outcome.metrics)?;
    report_stage("pretrain", &outcome);
    Ok(outcome)
}

fn run_finetune(
    cfg: &ExperimentConfig,
    dir: &Path,
    mode: FinetuneMode,
    checkpoint: Option<&Path>,
    force: bool,
) -> Result<StageOutcome> {
    let corpus = require_corpus(dir)?;
    let (train_idx, _) = split_indices(cfg, &corpus)?;
    let src = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => best_or_newest(&dir.join("pretrain"), "pretrain-")?,
    };
    let fdir = dir.join(format!("finetune-{}", mode.tag()));
    claim_stage_dir(&fdir, "finetune-", force, "")?;
    println!("finetuning {} from {}", mode.tag(), src.display());
    let (_, outcome) = finetune(cfg, &corpus, &train_idx, mode, &src, Some(&fdir))?;
    append_metrics(&fdir.join("metrics.jsonl"), &outcome.metrics)?;
    report_stage(&format!("finetune {}", mode.tag()), &outcome);
    Ok(outcome)
}

fn run_evaluate(
    cfg: &ExperimentConfig,
    dir: &Path,
    mode: FinetuneMode,
    checkpoint: Option<&Path>,
    split: &str,
) -> Result<()> {
    let corpus = require_corpus(dir)?;
    let (train_idx, test_idx) = split_indices(cfg, &corpus)?;
    let idx = match split {
        "test" => test_idx,
        "train" => train_idx,
        "all" => (0..corpus.utterances.len()).collect(),
        other => {
            return Err(CoreError::Config(format!(
                "unknown split {}; expected test, train, or all",
                other
            )))
        }
    };
    if idx.is_empty() {
        return Err(CoreError::Config(
            "test split is empty (holdout_utts = 0); evaluate --split train instead".into(),
        ));
    }
    let src = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => best_or_newest(&dir.join(format!("finetune-{}", mode.tag())), "finetune-")?,
    };
    let (_, params, _) = load_checkpoint(&src)?;
    let report = evaluate(cfg, &params, mode, &corpus, &idx, &format!("finetune:{}", mode.tag()))?;
    let edir = dir.join("eval");
    fs::create_dir_all(&edir)?;
    let out = edir.join(format!("{}-{}.json", mode.tag(), split));
    save_report(&report, &out)?;
    println!(
        "{} on {} split: CER {:.4} over {} utterances -> {}",
        mode.tag(),
        split,
        report.cer,
        report.n_utterances,
        out.display()
    );
    Ok(())
}

/// End-to-end driver. Stages whose outputs already exist are reused,
/// so an interrupted pipeline picks up where it stopped.
fn run_pipeline(cfg: &ExperimentConfig, dir: &Path, mode: FinetuneMode) -> Result<()> {
    if corpus_dir(dir).join("manifest.json").exists() {
        println!("corpus: reusing {}", corpus_dir(dir).display());
    } else {
        gen_corpus(cfg, dir, false)?;
    }
    if units_path(dir).exists() {
        println!("units: reusing {}", units_path(dir).display());
    } else {
        discover(cfg, dir, None, false)?;
    }
    let pdir = dir.join("pretrain");
    if best_or_newest(&pdir, "pretrain-").is_ok() {
        println!("pretrain: reusing checkpoints under {}", pdir.display());
    } else {
        run_pretrain(cfg, dir, None, false, false)?;
    }
    let fdir = dir.join(format!("finetune-{}", mode.tag()));
    if best_or_newest(&fdir, "finetune-").is_ok() {
        println!("finetune {}: reusing checkpoints under {}", mode.tag(), fdir.display());
    } else {
        run_finetune(cfg, dir, mode, None, false)?;
    }
    let split = if cfg.eval.holdout_utts > 0 { "test" } else { "train" };
    run_evaluate(cfg, dir, mode, None, split)
}

fn report_stage(stage: &str, outcome: &StageOutcome) {
    if outcome.metrics.is_empty() {
        println!("{}: already complete at step {}", stage, outcome.final_step);
        return;
    }
    let best = outcome
        .best_checkpoint
        .as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_else(|| "none".into());
    println!(
        "{}: step {} loss {:.4}, best checkpoint {}",
        stage, outcome.final_step, outcome.final_loss, best
    );
}
