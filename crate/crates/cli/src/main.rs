//! Command-line driver for the cross-domain few-shot classification
//! pipeline: data synthesis, PCA reduction, source meta-training, target
//! adaptation, evaluation, gradient verification, and embedding dumps.
//!
//! Exit codes: 0 success, 1 configuration or input error, 2 numeric
//! failure during computation, 3 gradient check over tolerance.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use mifomo_core::encoder::{encode, load_checkpoint, save_checkpoint, EncoderConfig};
use mifomo_core::hsidata::{
    apply_pca, default_palette, fit_pca, read_cube, render_class_map, synth_domain_pair,
    write_cube, CubeDataset,
};
use mifomo_core::pipeline::{
    aggregate, evaluate, render_report, render_schedule, render_timings, run_gradcheck,
    run_intermediate_phase, run_source_phase, RunConfig,
};
use mifomo_core::tensor::Tape;
use mifomo_core::Error as CoreError;

#[derive(Parser)]
#[command(name = "mifomo", version, about = "Cross-domain few-shot hyperspectral classifier")]
struct Cli {
    /// Run configuration file of `key = value` lines; defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one configuration key, e.g. `--set k_shot=5`. Repeatable,
    /// applied after the file in the given order.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a paired source/target cube with controlled domain shift.
    GenData {
        /// Output path of the source cube.
        #[arg(long)]
        source: PathBuf,
        /// Output path of the distorted target cube.
        #[arg(long)]
        target: PathBuf,
    },
    /// Fit PCA on a cube's pixels and write the band-reduced cube.
    Pca {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Number of principal bands to keep.
        #[arg(long)]
        components: usize,
    },
    /// Meta-train the encoder on source episodes and save a checkpoint.
    TrainSource {
        #[arg(long)]
        source: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Optional per-episode loss trace file.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Adapt a source checkpoint to a target cube for one trial.
    Adapt {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Source-trained checkpoint to start from.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Adapted checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Trial index; fixes the support draw and adaptation randomness.
        #[arg(long, default_value_t = 0)]
        trial: u64,
        /// Optional schedule/pseudo-label trace file (stdout when omitted).
        #[arg(long)]
        schedule: Option<PathBuf>,
    },
    /// Evaluate a checkpoint over the configured number of support draws.
    Eval {
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report output path (stdout when omitted).
        #[arg(long)]
        report: Option<PathBuf>,
        /// Optional classification map (PPM) of the first trial.
        #[arg(long)]
        map: Option<PathBuf>,
        /// Optional wall-clock timing file; kept out of the report so
        /// reports stay byte-comparable across machines.
        #[arg(long)]
        timings: Option<PathBuf>,
    },
    /// Compare analytic encoder gradients against finite differences.
    Gradcheck {
        /// Freeze the backbone first; frozen tensors are reported skipped.
        #[arg(long)]
        frozen: bool,
        /// Finite-difference coordinates per tensor.
        #[arg(long, default_value_t = 4)]
        coords: usize,
        /// Central-difference step.
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        /// Worst tolerated relative error; exceeding it exits with code 3.
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
    },
    /// Write embeddings of labeled pixels as plain text rows.
    DumpEmbeddings {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Cap on the number of pixels, raster order.
        #[arg(long)]
        limit: Option<usize>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut run = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    for s in &cli.sets {
        let (key, value) = s
            .split_once('=')
            .ok_or_else(|| CoreError::config("--set", format!("expected KEY=VALUE, got `{s}`")))?;
        run.set(key.trim(), value.trim())?;
    }
    run.validate()?;
    Ok(run)
}

fn read_cube_for(run: &RunConfig, path: &Path) -> Result<CubeDataset> {
    Ok(read_cube(path, run.generator.patch_radius)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_gen_data(run: &RunConfig, source: &Path, target: &Path) -> Result<()> {
    let (src, tgt) = synth_domain_pair(&run.generator, run.seed)?;
    write_cube(&src, source)?;
    write_cube(&tgt, target)?;
    println!(
        "source: {}x{}x{} bands, {} classes -> {}",
        src.height,
        src.width,
        src.bands,
        src.class_ids().len(),
        source.display()
    );
    println!(
        "target: {}x{}x{} bands, {} classes -> {}",
        tgt.height,
        tgt.width,
        tgt.bands,
        tgt.class_ids().len(),
        target.display()
    );
    Ok(())
}

fn cmd_pca(run: &RunConfig, input: &Path, output: &Path, components: usize) -> Result<()> {
    let cube = read_cube_for(run, input)?;
    let model = fit_pca(&cube, components)?;
    let reduced = apply_pca(&model, &cube)?;
    write_cube(&reduced, output)?;
    let kept: f64 = model.explained_ratio.iter().sum();
    println!(
        "kept {components} of {} bands, explained variance {:.4} -> {}",
        cube.bands,
        kept,
        output.display()
    );
    Ok(())
}

fn cmd_train_source(run: &RunConfig, source: &Path, out: &Path, trace: Option<&Path>) -> Result<()> {
    let cube = read_cube_for(run, source)?;
    let started = Instant::now();
    let (params, losses) = run_source_phase(run, &cube)?;
    save_checkpoint(&params, out)?;
    if let Some(path) = trace {
        let mut text = String::new();
        for (i, l) in losses.iter().enumerate() {
            text.push_str(&format!("episode.{i} = {l:.6}\n"));
        }
        write_text(path, &text)?;
    }
    let tail = losses.iter().rev().take(50).sum::<f64>() / losses.len().min(50).max(1) as f64;
    println!(
        "trained {} episodes in {:.1}s, last-50 mean loss {:.4} -> {}",
        losses.len(),
        started.elapsed().as_secs_f64(),
        tail,
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_adapt(
    run: &RunConfig,
    source: &Path,
    target: &Path,
    checkpoint: &Path,
    out: &Path,
    trial: u64,
    schedule: Option<&Path>,
) -> Result<()> {
    let src = read_cube_for(run, source)?;
    let tgt = read_cube_for(run, target)?;
    let params = load_checkpoint(checkpoint, &run.encoder)?;
    let started = Instant::now();
    let outcome = run_intermediate_phase(run, &src, &tgt, params, trial)?;
    save_checkpoint(&outcome.params, out)?;
    let trace = render_schedule(trial, &outcome.schedule);
    match schedule {
        Some(path) => write_text(path, &trace)?,
        None => print!("{trace}"),
    }
    let last = outcome.schedule.last();
    println!(
        "adapted trial {trial} over {} epochs in {:.1}s (final lambda2 {:.4}) -> {}",
        outcome.schedule.len(),
        started.elapsed().as_secs_f64(),
        last.map_or(0.0, |e| e.lambda2),
        out.display()
    );
    Ok(())
}

fn cmd_eval(
    run: &RunConfig,
    target: &Path,
    checkpoint: &Path,
    report: Option<&Path>,
    map: Option<&Path>,
    timings: Option<&Path>,
) -> Result<()> {
    let cube = read_cube_for(run, target)?;
    let params = load_checkpoint(checkpoint, &run.encoder)?;
    let mut per_trial = Vec::with_capacity(run.trials);
    let mut stages = Vec::with_capacity(run.trials);
    let mut first_map: Option<Vec<u16>> = None;
    let mut class_ids = Vec::new();
    for t in 0..run.trials {
        let started = Instant::now();
        let eval = evaluate(run, &params, &cube, t as u64)?;
        stages.push((format!("trial.{t}"), started.elapsed().as_secs_f64()));
        if t == 0 {
            class_ids = eval.class_ids.clone();
            first_map = Some(eval.predicted.clone());
        }
        per_trial.push(eval.metrics);
    }
    let summary = aggregate(&class_ids, &per_trial)?;
    let mut text = render_report(&summary);
    text.push_str(&format!("checkpoint = {}\n", checkpoint.display()));
    if let Some(path) = map {
        text.push_str(&format!("map = {}\n", path.display()));
    }
    if let Some(path) = timings {
        text.push_str(&format!("timings = {}\n", path.display()));
    }
    match report {
        Some(path) => write_text(path, &text)?,
        None => print!("{text}"),
    }
    if let Some(path) = map {
        let predicted = first_map.expect("trials >= 1 is enforced by validation");
        let palette = default_palette(&class_ids);
        let ppm = render_class_map(&predicted, cube.height, cube.width, &palette)?;
        fs::write(path, ppm).with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = timings {
        write_text(path, &render_timings(&stages))?;
    }
    println!(
        "evaluated {} trials: oa {:.4} +/- {:.4}",
        run.trials, summary.oa.mean, summary.oa.std
    );
    Ok(())
}

/// Encoder small enough for finite differences over every tensor group.
fn gradcheck_config() -> EncoderConfig {
    EncoderConfig {
        depth: 2,
        embed_dim: 16,
        heads: 2,
        mlp_dim: 16,
        patch_size: 3,
        input_size: 9,
        spectral_tokens: 4,
        bands: 8,
    }
}

fn cmd_gradcheck(seed: u64, frozen: bool, coords: usize, step: f64, tol: f64) -> Result<ExitCode> {
    let report = run_gradcheck(&gradcheck_config(), seed, frozen, coords, step)?;
    print!("{}", report.render());
    if report.pass(tol) {
        println!("gradcheck passed (tolerance {tol:.1e})");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("gradcheck FAILED (tolerance {tol:.1e})");
        Ok(ExitCode::from(3))
    }
}

fn cmd_dump_embeddings(
    run: &RunConfig,
    input: &Path,
    checkpoint: &Path,
    out: &Path,
    limit: Option<usize>,
) -> Result<()> {
    let cube = read_cube_for(run, input)?;
    let params = load_checkpoint(checkpoint, &run.encoder)?;
    let bound = params.bind_frozen();
    let mut tape = Tape::new();
    let mut text = String::new();
    let mut written = 0usize;
    let cap = limit.unwrap_or(usize::MAX);
    'rows: for y in 0..cube.height {
        for x in 0..cube.width {
            let label = cube.label(y, x);
            if label == 0 {
                continue;
            }
            let patch = cube.extract_patch(y, x)?;
            let z = encode(&mut tape, &patch, &bound, &run.encoder)?.z;
            text.push_str(&format!("{y} {x} {label}"));
            for v in z.data() {
                text.push_str(&format!(" {v:.6}"));
            }
            text.push('\n');
            written += 1;
            if written >= cap {
                break 'rows;
            }
        }
    }
    write_text(out, &text)?;
    println!("wrote {written} embeddings -> {}", out.display());
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::GenData { source, target } => {
            cmd_gen_data(&load_config(cli)?, source, target)?;
        }
        Command::Pca { input, output, components } => {
            cmd_pca(&load_config(cli)?, input, output, *components)?;
        }
        Command::TrainSource { source, out, trace } => {
            cmd_train_source(&load_config(cli)?, source, out, trace.as_deref())?;
        }
        Command::Adapt { source, target, checkpoint, out, trial, schedule } => {
            cmd_adapt(
                &load_config(cli)?,
                source,
                target,
                checkpoint,
                out,
                *trial,
                schedule.as_deref(),
            )?;
        }
        Command::Eval { target, checkpoint, report, map, timings } => {
            cmd_eval(
                &load_config(cli)?,
                target,
                checkpoint,
                report.as_deref(),
                map.as_deref(),
                timings.as_deref(),
            )?;
        }
        Command::Gradcheck { frozen, coords, step, tol } => {
            let run = load_config(cli)?;
            return cmd_gradcheck(run.seed, *frozen, *coords, *step, *tol);
        }
        Command::DumpEmbeddings { input, checkpoint, out, limit } => {
            cmd_dump_embeddings(&load_config(cli)?, input, checkpoint, out, *limit)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn failure_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<CoreError>() {
        Some(CoreError::Numeric { .. }) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(failure_code(&err))
        }
    }
}
