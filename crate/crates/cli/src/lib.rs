//! `sdmae` command-line runner.
//!
//! Every subcommand resolves a [`RunConfig`] from `--config`, `--set`,
//! `--seed` and `--out` (later sources win), echoes it to
//! `<out>/config.echo` and then drives the trainer.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdmae::dataio::AugmentPolicy;
use sdmae::model::{Sdmae, CLS_HEAD, DECODER, ENCODER};
use sdmae::trainer::{
    classify, decoder_sweep, evaluate_pretrain, finetune, load_checkpoint, pretrain, save_checkpoint, sig6,
    sweep_csv, write_text, AdamW, Checkpoint, EvalReport, Experiment, PretrainOptions, PretrainOutcome, SweepRow,
};
use sdmae::{parse_config, Error, ParamStore, Result, RunConfig};

pub mod recon;

#[derive(Debug, Parser)]
#[command(name = "sdmae", version, about = "Masked autoencoder pre-training for small datasets")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one key; repeatable, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory (overrides `output.dir`).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Seed for initialization, shuffling, augmentation and masking.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Self-supervised pre-training.
    Pretrain {
        /// Continue from this checkpoint.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
        /// Stop once this many epochs are complete; the run can be resumed.
        #[arg(long, value_name = "EPOCHS")]
        stop_after: Option<usize>,
    },
    /// Supervised fine-tuning, from a pre-trained checkpoint or from scratch.
    Finetune {
        /// Pre-trained checkpoint; omit to start from random weights.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Pre-train and fine-tune over a grid of decoder depths and widths.
    Sweep,
    /// Write original | masked | prediction triptychs for test images.
    Reconstruct {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Number of test images (overrides `recon.count`).
        #[arg(long, value_name = "N")]
        count: Option<usize>,
        /// Write PNG instead of PPM.
        #[arg(long)]
        png: bool,
    },
    /// Score a checkpoint on the test split.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parameter(_) | Error::ResumeMismatch(_) => 2,
        Error::Format { .. } | Error::Input(_) | Error::Dimension(_) | Error::Integrity(_) | Error::Version { .. } => 3,
        Error::Numeric(_) => 4,
        Error::Io { .. } => 5,
    }
}

/// Config file, then `--set`, then `--seed` and `--out`.
pub fn resolve_config(g: &GlobalArgs) -> Result<RunConfig> {
    let mut overrides = g.set.clone();
    if let Some(seed) = g.seed {
        overrides.push(format!("seed={seed}"));
    }
    let mut cfg = parse_config(g.config.as_deref(), &overrides)?;
    if let Some(out) = &g.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(&cli.global)?;
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    write_text(&cfg.output_dir.join("config.echo"), &cfg.echo())?;
    match &cli.command {
        Command::Pretrain { resume, stop_after } => cmd_pretrain(&cfg, resume.as_deref(), *stop_after).map(|_| ()),
        Command::Finetune { checkpoint } => cmd_finetune(&cfg, checkpoint.as_deref()).map(|_| ()),
        Command::Sweep => cmd_sweep(&cfg).map(|_| ()),
        Command::Reconstruct { checkpoint, count, png } => {
            cmd_reconstruct(&cfg, checkpoint, count.unwrap_or(cfg.recon_count), *png || cfg.recon_png).map(|_| ())
        }
        Command::Eval { checkpoint } => cmd_eval(&cfg, checkpoint).map(|_| ()),
    }
}

fn active_tasks(cfg: &RunConfig) -> String {
    let w = &cfg.pretrain.weights;
    let mut tasks = vec!["reconstruction".to_string()];
    if w.lambda_l > 0.0 {
        tasks.push(format!("location (lambda_l={})", w.lambda_l));
    }
    if w.lambda_c > 0.0 {
        tasks.push(format!("contrastive (lambda_c={})", w.lambda_c));
    }
    tasks.join(", ")
}

fn summary_header(cfg: &RunConfig, command: &str) -> String {
    let m = &cfg.model;
    let mut s = String::new();
    let _ = writeln!(s, "command: {command}");
    let _ = writeln!(
        s,
        "model: {}px patch {}, encoder {}x{}, decoder {}x{}",
        m.image_size, m.encoder.patch_size, m.encoder.depth, m.encoder.dim, m.decoder.depth, m.decoder.dim
    );
    let _ = writeln!(s, "tasks: {}", active_tasks(cfg));
    s
}

pub fn cmd_pretrain(cfg: &RunConfig, resume: Option<&Path>, stop_after: Option<usize>) -> Result<PretrainOutcome> {
    let model = Sdmae::new(cfg.model)?;
    let (train, test) = cfg.load_data()?;
    let resume = resume.map(load_checkpoint).transpose()?;
    let total = cfg.pretrain.total_epochs;
    let outcome = pretrain(
        &model,
        &cfg.pretrain,
        &train,
        PretrainOptions {
            config_hash: cfg.hash(),
            out_dir: Some(cfg.output_dir.clone()),
            checkpoint_every: cfg.checkpoint_every,
            resume,
            stop_after,
            on_epoch: Some(Box::new(move |m| {
                eprintln!(
                    "epoch {}/{total} recon {} loc {} ctr {} lr {}",
                    m.epoch,
                    sig6(m.recon),
                    sig6(m.loc),
                    sig6(m.ctr),
                    sig6(m.lr)
                )
            })),
            ..PretrainOptions::default()
        },
    )?;
    let c = &outcome.checkpoint;
    let (eval, loc_acc) = evaluate_pretrain(&model, &c.params, &cfg.pretrain, &test, cfg.pretrain.seed)?;
    let mut s = summary_header(cfg, "pretrain");
    let _ = writeln!(s, "epochs: {} steps: {}", c.epoch, c.step);
    if let Some(last) = c.history.last() {
        let _ = writeln!(s, "final train total: {} recon: {}", sig6(last.total), sig6(last.recon));
    }
    let _ = writeln!(
        s,
        "test recon: {} loc: {} ctr: {} loc_acc: {}",
        sig6(eval.recon),
        sig6(eval.loc),
        sig6(eval.ctr),
        sig6(loc_acc)
    );
    write_text(&cfg.output_dir.join("summary.txt"), &s)?;
    Ok(outcome)
}

/// Checks every tensor under `prefixes` against a freshly initialized model.
fn check_params(model: &Sdmae, params: &ParamStore, prefixes: &[&str]) -> Result<()> {
    let fresh = model.init_params(&mut ChaCha8Rng::seed_from_u64(0));
    for (name, m) in fresh.iter() {
        if !prefixes.iter().any(|p| name.starts_with(p)) {
            continue;
        }
        match params.get(name) {
            None => return Err(Error::Parameter(format!("checkpoint lacks `{name}`"))),
            Some(have) if !have.same_shape(m) => {
                return Err(Error::Parameter(format!(
                    "`{name}` is {}x{} in the checkpoint, {}x{} in the config",
                    have.rows(),
                    have.cols(),
                    m.rows(),
                    m.cols()
                )))
            }
            Some(_) => {}
        }
    }
    Ok(())
}

pub fn cmd_finetune(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<EvalReport> {
    let model = Sdmae::new(cfg.model)?;
    let init = checkpoint.map(load_checkpoint).transpose()?;
    let (train, test) = cfg.load_data()?;
    let (report, params) = finetune(
        &model,
        init.as_ref().map(|c| &c.params),
        &train,
        &test,
        cfg.data.classes,
        &cfg.finetune,
    )?;
    let mut csv = String::from("epoch,loss\n");
    for (i, l) in report.loss_curve.iter().enumerate() {
        let _ = writeln!(csv, "{},{}", i + 1, sig6(*l));
    }
    write_text(&cfg.output_dir.join("finetune.csv"), &csv)?;
    let saved = Checkpoint {
        epoch: cfg.finetune.total_epochs,
        step: 0,
        config_hash: cfg.hash(),
        params,
        optim: AdamW::new(cfg.finetune.weight_decay),
        rng: ChaCha8Rng::seed_from_u64(cfg.finetune.seed),
        history: Vec::new(),
    };
    save_checkpoint(&saved, &cfg.output_dir.join("checkpoints").join("finetuned.ckpt"))?;
    let mut s = summary_header(cfg, "finetune");
    let init_desc = checkpoint.map_or("random".to_string(), |p| p.display().to_string());
    let _ = writeln!(s, "init: {init_desc}");
    let _ = writeln!(s, "epochs: {}", report.loss_curve.len());
    let _ = writeln!(s, "test top1: {}", sig6(report.top1));
    write_text(&cfg.output_dir.join("summary.txt"), &s)?;
    Ok(report)
}

pub fn cmd_sweep(cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let (train, test) = cfg.load_data()?;
    let base = Experiment {
        model: cfg.model,
        pretrain: cfg.pretrain,
        finetune: cfg.finetune,
        policy: AugmentPolicy::default(),
        train: &train,
        test: &test,
        classes: cfg.data.classes,
    };
    let rows = decoder_sweep(&base, &cfg.sweep_depths, &cfg.sweep_dims)?;
    write_text(&cfg.output_dir.join("sweep.csv"), &sweep_csv(&rows))?;
    let mut s = summary_header(cfg, "sweep");
    for r in &rows {
        let v = match &r.top1 {
            Ok(t) => sig6(*t),
            Err(e) => format!("error: {e}"),
        };
        let _ = writeln!(s, "depth {} dim {}: {v}", r.depth, r.dim);
    }
    write_text(&cfg.output_dir.join("summary.txt"), &s)?;
    Ok(rows)
}

/// Writes `count` triptychs to `<out>/recon/` and returns their paths.
pub fn cmd_reconstruct(cfg: &RunConfig, checkpoint: &Path, count: usize, png: bool) -> Result<Vec<PathBuf>> {
    let model = Sdmae::new(cfg.model)?;
    let c = load_checkpoint(checkpoint)?;
    check_params(&model, &c.params, &[ENCODER, "mask_token", DECODER])?;
    let (_, test) = cfg.load_data()?;
    if count > test.len() {
        return Err(Error::Input(format!(
            "asked for {count} reconstructions but the test split has {} images",
            test.len()
        )));
    }
    let dir = cfg.output_dir.join("recon");
    let ext = if png { "png" } else { "ppm" };
    let mut paths = Vec::with_capacity(count);
    for (i, record) in test.iter().take(count).enumerate() {
        let plan = recon::plan_for(&model, cfg.pretrain.mask_ratio, cfg.pretrain.seed, i)?;
        let t = recon::triptych(&model, &c.params, &record.pixels, &plan)?;
        let path = dir.join(format!("recon-{i:04}.{ext}"));
        recon::write_image(&path, &t, png)?;
        paths.push(path);
    }
    let mut s = summary_header(cfg, "reconstruct");
    let _ = writeln!(s, "checkpoint: {}", checkpoint.display());
    let _ = writeln!(s, "images: {count} ({ext}), mask ratio {}", cfg.pretrain.mask_ratio);
    write_text(&cfg.output_dir.join("summary.txt"), &s)?;
    Ok(paths)
}

/// Pre-training losses if the checkpoint has a decoder, top-1 if it has a
/// classifier, or both.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<String> {
    let model = Sdmae::new(cfg.model)?;
    let c = load_checkpoint(checkpoint)?;
    let (_, test) = cfg.load_data()?;
    let mut s = summary_header(cfg, "eval");
    let _ = writeln!(s, "checkpoint: {}", checkpoint.display());
    let has_decoder = c.params.count(&format!("{DECODER}.")) > 0;
    let has_head = c.params.count(&format!("{CLS_HEAD}.")) > 0;
    if !has_decoder && !has_head {
        return Err(Error::Parameter("checkpoint has neither a decoder nor a classifier".into()));
    }
    if has_decoder {
        check_params(&model, &c.params, &[""])?;
        let (l, acc) = evaluate_pretrain(&model, &c.params, &cfg.pretrain, &test, cfg.pretrain.seed)?;
        let _ = writeln!(
            s,
            "test recon: {} loc: {} ctr: {} total: {} loc_acc: {}",
            sig6(l.recon),
            sig6(l.loc),
            sig6(l.ctr),
            sig6(l.total),
            sig6(acc)
        );
    }
    if has_head {
        check_params(&model, &c.params, &[ENCODER])?;
        let predicted = classify(&model, &c.params, &test, cfg.finetune.batch_size)?;
        let hits = predicted.iter().zip(&test).filter(|(p, r)| **p == r.label).count();
        let _ = writeln!(s, "test top1: {}", sig6(hits as f64 / test.len() as f64));
    }
    print!("{s}");
    write_text(&cfg.output_dir.join("eval.txt"), &s)?;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_kind() {
        assert_eq!(exit_code(&Error::config("x")), 2);
        assert_eq!(exit_code(&Error::ResumeMismatch("x".into())), 2);
        assert_eq!(exit_code(&Error::Integrity("x".into())), 3);
        assert_eq!(exit_code(&Error::Version { found: 2, expected: 1 }), 3);
        assert_eq!(exit_code(&Error::Numeric("x".into())), 4);
        let io = Error::io("p", std::io::Error::from(std::io::ErrorKind::NotFound));
        assert_eq!(exit_code(&io), 5);
    }

    #[test]
    fn flags_override_file_and_set() {
        let cli = Cli::try_parse_from([
            "sdmae",
            "pretrain",
            "--set",
            "seed=3",
            "--set",
            "mask_ratio=0.5",
            "--seed",
            "9",
            "--out",
            "elsewhere",
        ])
        .unwrap();
        let cfg = resolve_config(&cli.global).unwrap();
        assert_eq!(cfg.pretrain.seed, 9);
        assert_eq!(cfg.pretrain.mask_ratio, 0.5);
        assert_eq!(cfg.output_dir, PathBuf::from("elsewhere"));
    }

    #[test]
    fn tasks_follow_weights() {
        let mut cfg = RunConfig::default();
        assert!(active_tasks(&cfg).contains("contrastive"));
        cfg.pretrain.weights.lambda_c = 0.0;
        cfg.pretrain.weights.lambda_l = 0.0;
        assert_eq!(active_tasks(&cfg), "reconstruction");
    }
}
