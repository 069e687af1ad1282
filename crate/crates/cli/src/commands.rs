use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use semcom::checkpoint::{Checkpoint, Role};
use semcom::config::ExperimentConfig;
use semcom::data::{ingest_dir, load_image, save_png};
use semcom::eval::{
    ablate_initial_ss, ablate_ss_loss, ablate_steps, measure_receiver_latency, plot_gain_bars, plot_metric_curves,
    run_snr_sweep, write_latency, write_sweep, InitPolicy, Metric,
};
use semcom::runner::{phase_files, run_phase1, run_phase2, run_phase3};
use semcom::training::write_log;
use semcom::transmit::transmit_image;
use serde::Serialize;

use crate::output::{CliError, CliResult, OutputLock};
use crate::{resolve_output, EvalMode};

fn load_config(path: &Path) -> CliResult<ExperimentConfig> {
    ExperimentConfig::load(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    if !path.exists() {
        return Err(CliError::Config(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(Checkpoint::load(path)?)
}

fn tagged(path: PathBuf, tag: Option<&str>) -> PathBuf {
    let Some(tag) = tag else { return path };
    let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
    let (stem, rest) = name.split_once('.').unwrap_or((&name, ""));
    path.with_file_name(format!("{stem}-{tag}.{rest}"))
}

pub fn train(root: Option<&Path>, config: &Path, phase: u8, from: Option<&Path>, tag: Option<&str>) -> CliResult<()> {
    let cfg = load_config(config)?;
    let out = resolve_output(root, &cfg.output_dir);
    let prev = if phase > 1 {
        let path = from
            .map(Path::to_path_buf)
            .unwrap_or_else(|| phase_files(&out, phase - 1).checkpoint);
        if !path.exists() {
            return Err(CliError::Config(format!(
                "phase {phase} needs the phase-{} checkpoint {}; run that phase first",
                phase - 1,
                path.display()
            )));
        }
        Some(load_checkpoint(&path)?)
    } else {
        None
    };
    let _lock = OutputLock::acquire(&out)?;
    let (train_set, _) = cfg.load_datasets()?;
    log::info!("phase {phase}: {} training images, output {}", train_set.len(), out.display());
    let (ck, report) = match (phase, &prev) {
        (1, _) => run_phase1(&cfg, &train_set.images)?,
        (2, Some(p)) => run_phase2(&cfg, p, &train_set.images)?,
        (3, Some(p)) => run_phase3(&cfg, p, &train_set.images)?,
        _ => unreachable!("phase validated by the argument parser"),
    };
    let files = phase_files(&out, phase);
    let (ck_path, log_path, cfg_path) = (
        tagged(files.checkpoint, tag),
        tagged(files.log, tag),
        tagged(files.config, tag),
    );
    ck.save(&ck_path)?;
    write_log(BufWriter::new(File::create(&log_path)?), &report.log)?;
    cfg.save(&cfg_path)?;
    println!(
        "phase {phase} done: final loss {:.6}, checkpoint {}",
        report.final_loss().unwrap_or(f64::NAN),
        ck_path.display()
    );
    Ok(())
}

pub fn eval(root: Option<&Path>, config: &Path, mode: EvalMode, ckpts: &[PathBuf]) -> CliResult<()> {
    let cfg = load_config(config)?;
    let out = resolve_output(root, &cfg.output_dir).join("eval");
    let expected = if matches!(mode, EvalMode::AblateLoss) { 2 } else { 1 };
    if ckpts.len() != expected {
        return Err(CliError::Config(format!(
            "mode {} takes {expected} checkpoint(s), got {}",
            mode.name(),
            ckpts.len()
        )));
    }
    let checkpoints = ckpts.iter().map(|p| load_checkpoint(p)).collect::<CliResult<Vec<_>>>()?;
    let _lock = OutputLock::acquire(&out)?;
    let (_, test_set) = cfg.load_datasets()?;
    let images = &test_set.images;
    let stem = mode.name();
    cfg.save(&out.join(format!("{stem}.config.toml")))?;
    match mode {
        EvalMode::Sweep => {
            let result = run_snr_sweep(&checkpoints[0].bundle()?, images, &cfg.eval)?;
            write_sweep(&result, &out, stem)?;
            plot_metric_curves(&result, Metric::Psnr, &out.join(format!("{stem}-psnr.svg")))?;
            plot_metric_curves(&result, Metric::MsSsim, &out.join(format!("{stem}-ms-ssim.svg")))?;
        }
        EvalMode::AblateSs => {
            let policies = InitPolicy::standard_set();
            let result = ablate_initial_ss(&checkpoints[0].bundle()?, images, &cfg.eval, &policies, 0)?;
            write_sweep(&result, &out, stem)?;
            plot_metric_curves(&result, Metric::Psnr, &out.join(format!("{stem}-psnr.svg")))?;
        }
        EvalMode::AblateSteps => {
            let result = ablate_steps(&checkpoints[0].bundle()?, images, &cfg.eval)?;
            write_sweep(&result, &out, stem)?;
            plot_gain_bars(&result, &out.join(format!("{stem}-gain.svg")))?;
        }
        EvalMode::AblateLoss => {
            let (with_ss, without_ss) = (&checkpoints[0], &checkpoints[1]);
            if with_ss.fingerprint(Role::Encoder) != without_ss.fingerprint(Role::Encoder)
                || with_ss.fingerprint(Role::Decoder) != without_ss.fingerprint(Role::Decoder)
            {
                return Err(CliError::Config(
                    "ablate-loss checkpoints must share the same phase-1 encoder and decoder".into(),
                ));
            }
            let ablation = ablate_ss_loss(
                &with_ss.encoder()?,
                &with_ss.baseline_decoder()?,
                &with_ss.denoiser()?,
                &without_ss.denoiser()?,
                cfg.channel.signal_power,
                images,
                &cfg.eval,
                4,
            )?;
            write_sweep(&ablation.result, &out, stem)?;
            plot_metric_curves(&ablation.result, Metric::Psnr, &out.join(format!("{stem}-psnr.svg")))?;
            let pairs = out.join(format!("{stem}-images"));
            std::fs::create_dir_all(&pairs)?;
            for p in &ablation.pairs {
                let name = format!("img{:03}_snr{}", p.index, p.snr_db);
                save_png(&p.with_ss, &pairs.join(format!("{name}_with.png")))?;
                save_png(&p.without_ss, &pairs.join(format!("{name}_without.png")))?;
            }
        }
        EvalMode::Latency => {
            let n = images.len().min(8);
            let table = measure_receiver_latency(
                &checkpoints[0].bundle()?,
                &images[..n],
                &cfg.eval.snrs_db,
                cfg.eval.latency_repetitions,
                cfg.eval.latency_warmup,
                cfg.eval.seed,
            )?;
            write_latency(&table, &out, stem)?;
            for r in &table.rows {
                println!("{:<12} mean {:.3} ms  median {:.3} ms  std {:.3} ms", r.arm, r.mean_ms, r.median_ms, r.std_ms);
            }
        }
    }
    println!("{} results written to {}", mode.name(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct TransmitReport<'a> {
    image: String,
    snr_db: f64,
    seed: u64,
    padding: (usize, usize),
    steps_executed: usize,
    trace: semcom::denoiser::TraceRecord,
    stages: &'a [semcom::transmit::StagePsnr],
}

pub fn transmit(
    root: Option<&Path>,
    image: &Path,
    ckpt: &Path,
    snr: f64,
    seed: u64,
    out: Option<&Path>,
) -> CliResult<()> {
    let ck = load_checkpoint(ckpt)?;
    let bundle = ck.bundle()?;
    let img = load_image(image)?;
    let outcome = transmit_image(&bundle, &img, snr, seed)?;
    let out = out
        .map(Path::to_path_buf)
        .or_else(|| root.map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out)?;
    let stem = image.file_stem().unwrap_or_default().to_string_lossy().into_owned();
    let recon = out.join(format!("{stem}.recon.png"));
    save_png(&outcome.reconstruction, &recon)?;
    let report = TransmitReport {
        image: image.display().to_string(),
        snr_db: snr,
        seed,
        padding: outcome.padding,
        steps_executed: outcome.trace.steps_executed,
        trace: outcome.trace.record(stem.clone(), snr),
        stages: &outcome.stages,
    };
    std::fs::write(out.join(format!("{stem}.trace.json")), serde_json::to_string_pretty(&report)?)?;
    println!(
        "steps kept {} of {} ({}), output PSNR {:.2} dB -> {}",
        outcome.trace.steps_kept,
        outcome.trace.steps_executed,
        outcome.trace.stop_reason,
        outcome.stages.last().map(|s| s.psnr_db).unwrap_or(f64::NAN),
        recon.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct IngestSummary {
    directory: String,
    loaded: usize,
    skipped: usize,
    train: Vec<String>,
    validation: Vec<String>,
}

pub fn ingest(dir: &Path, size: usize, val_fraction: f64, seed: u64) -> CliResult<()> {
    let ds = ingest_dir(dir, size)?;
    let (train, val) = ds.split(val_fraction, seed)?;
    let summary = IngestSummary {
        directory: dir.display().to_string(),
        loaded: ds.len(),
        skipped: ds.skipped,
        train: train.names,
        validation: val.names,
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

pub fn init_config(out: &Path) -> CliResult<()> {
    ExperimentConfig::desk().save(out)?;
    println!("wrote {}", out.display());
    Ok(())
}
