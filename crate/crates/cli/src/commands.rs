use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::Args;

use slotseg_core::checkpoint::Checkpoint;
use slotseg_core::config::RunConfig;
use slotseg_core::data::{generate_suite, load_external_dataset, load_video_dir, write_dataset};
use slotseg_core::evaluation::{evaluate_dataset, evaluate_propagation, infer_video};
use slotseg_core::experiments::run_preliminary_study;
use slotseg_core::gradcheck::run_gradient_checks;
use slotseg_core::trainer::Trainer;
use slotseg_core::{Error, Result};

use crate::rundir::RunDir;

#[derive(Args)]
pub struct ConfigOpts {
    /// Configuration file (JSON); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted-path overrides, e.g. --set slots.n=8 --set train.lr=1e-4.
    #[arg(long = "set", value_name = "KEY.PATH=VALUE")]
    pub sets: Vec<String>,
}

impl ConfigOpts {
    fn resolve(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        base.with_overrides(&self.sets)
    }
}

#[derive(Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub config: ConfigOpts,
    /// Output dataset directory (train/ and eval/ splits are created).
    #[arg(long)]
    pub out: PathBuf,
}

pub fn gen_data(args: GenDataArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let run = RunDir::create(&args.out)?;
    let train = generate_suite(&cfg.data, cfg.seed, false);
    let eval = generate_suite(&cfg.data, cfg.seed, true);
    write_dataset(&train, &args.out.join("train"))?;
    write_dataset(&eval, &args.out.join("eval"))?;
    run.write_config(&cfg)?;
    println!(
        "wrote {} training and {} evaluation videos to {}",
        train.len(),
        eval.len(),
        args.out.display()
    );
    Ok(())
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigOpts,
    /// Training dataset directory (a split written by gen-data).
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out dataset for periodic evaluation (train.eval_every).
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    /// Run output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Resume from an existing checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

pub fn train(args: TrainArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let run = RunDir::create(&args.out)?;
    let videos = load_external_dataset(&args.data)?;
    if videos.is_empty() {
        return Err(Error::Config(format!("no videos found under {}", args.data.display())));
    }
    let eval_videos = match &args.eval_data {
        Some(dir) => load_external_dataset(dir)?,
        None => Vec::new(),
    };
    let mut trainer = match &args.resume {
        Some(path) => Checkpoint::load(path)?.into_trainer()?,
        None => Trainer::new(cfg.clone())?,
    };
    run.write_config(&trainer.cfg)?;
    let mut inputs: Vec<&Path> = vec![args.data.as_path()];
    if let Some(d) = &args.eval_data {
        inputs.push(d.as_path());
    }
    run.write_input_hash(&inputs)?;

    let log_path = run.file("loss_log.jsonl");
    let mut log_file = std::fs::File::create(&log_path)
        .map_err(|e| Error::io(log_path.display().to_string(), e))?;
    let steps = trainer.cfg.train.steps.saturating_sub(trainer.step);
    let eval_every = trainer.cfg.train.eval_every;
    let checkpoint_every = trainer.cfg.train.checkpoint_every;
    for _ in 0..steps {
        let breakdown = trainer.train_step(&videos)?;
        let step = trainer.step;
        use std::io::Write;
        writeln!(
            log_file,
            "{}",
            serde_json::json!({
                "step": step,
                "total": breakdown.total,
                "semantic": breakdown.semantic,
                "regularization": breakdown.regularization,
                "instance": breakdown.instance,
                "student_checksum": format!("{:016x}", trainer.student.checksum()),
            })
        )
        .map_err(|e| Error::io(log_path.display().to_string(), e))?;
        if eval_every > 0 && step % eval_every == 0 && !eval_videos.is_empty() {
            let report = evaluate_dataset(
                &eval_videos,
                trainer.inference_store(),
                &trainer.model,
                &trainer.cfg,
            )?;
            run.write_text(&format!("eval_{step:06}.json"), &report.to_json())?;
            println!(
                "step {step}: loss {:.4}, held-out fg IoU {:.4}",
                breakdown.total, report.aggregate.single_iou
            );
        }
        if checkpoint_every > 0 && step % checkpoint_every == 0 {
            Checkpoint::from_trainer(&trainer).save(&run.file(&format!("ckpt_{step:06}.json")))?;
        }
    }
    Checkpoint::from_trainer(&trainer).save(&run.file("checkpoint.json"))?;
    if trainer.skipped_short > 0 {
        eprintln!(
            "note: {} video draws were skipped as too short for the clip geometry",
            trainer.skipped_short
        );
    }
    println!(
        "trained {} steps; final checkpoint at {}",
        trainer.step,
        run.file("checkpoint.json").display()
    );
    Ok(())
}

#[derive(Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory (synthetic split or external frames+masks).
    #[arg(long)]
    pub data: PathBuf,
    /// Run output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Protocol: object discovery (single+multi) or label propagation.
    #[arg(long, default_value = "discovery", value_parser = ["discovery", "propagation"])]
    pub mode: String,
    /// Dotted-path overrides applied on top of the checkpoint configuration.
    #[arg(long = "set", value_name = "KEY.PATH=VALUE")]
    pub sets: Vec<String>,
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let cfg = checkpoint.config.clone().with_overrides(&args.sets)?;
    let mut trainer = checkpoint.into_trainer()?;
    trainer.cfg = cfg.clone();
    let videos = load_external_dataset(&args.data)?;
    if videos.is_empty() {
        return Err(Error::Config(format!("no videos found under {}", args.data.display())));
    }
    let run = RunDir::create(&args.out)?;
    run.write_config(&cfg)?;
    run.write_input_hash(&[args.checkpoint.as_path(), args.data.as_path()])?;
    match args.mode.as_str() {
        "discovery" => {
            let report =
                evaluate_dataset(&videos, trainer.inference_store(), &trainer.model, &cfg)?;
            run.write_text("report.json", &report.to_json())?;
            print!("{}", report.human_table());
        }
        "propagation" => {
            let report =
                evaluate_propagation(&videos, trainer.inference_store(), &trainer.model, &cfg)?;
            run.write_text(
                "propagation.json",
                &serde_json::to_string_pretty(&report)
                    .map_err(|e| Error::Contract(e.to_string()))?,
            )?;
            println!(
                "propagation: J {:.4}  F {:.4}  J&F {:.4}",
                report.aggregate.jaccard, report.aggregate.boundary, report.aggregate.jf
            );
        }
        other => return Err(Error::Config(format!("unknown eval mode '{other}'"))),
    }
    Ok(())
}

#[derive(Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// One video folder (frames/ masks?/ manifest?).
    #[arg(long)]
    pub video: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "set", value_name = "KEY.PATH=VALUE")]
    pub sets: Vec<String>,
}

pub fn infer(args: InferArgs) -> Result<()> {
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let cfg = checkpoint.config.clone().with_overrides(&args.sets)?;
    let trainer = checkpoint.into_trainer()?;
    let video = load_video_dir(&args.video, false)?;
    let run = RunDir::create(&args.out)?;
    run.write_config(&cfg)?;
    run.write_input_hash(&[args.checkpoint.as_path(), args.video.as_path()])?;

    let store = match cfg.eval.pathway {
        slotseg_core::config::Pathway::Teacher => &trainer.teacher,
        slotseg_core::config::Pathway::Student => &trainer.student,
    };
    let inference = infer_video(&video.frames, store, &trainer.model, &cfg, cfg.seed)?;
    let res = cfg.encoder.resolution;
    let patch = cfg.encoder.patch_size;
    let grid = inference.grid;
    let sem_dir = run.path.join("semantic");
    let inst_dir = run.path.join("instances");
    std::fs::create_dir_all(&sem_dir).map_err(|e| Error::io(sem_dir.display().to_string(), e))?;
    std::fs::create_dir_all(&inst_dir)
        .map_err(|e| Error::io(inst_dir.display().to_string(), e))?;

    // Track ids are stable (semantic, instance) pairs across frames.
    let mut tracks: Vec<(usize, usize)> = Vec::new();
    for fc in &inference.per_frame {
        for c in &fc.list {
            if !tracks.contains(&(c.semantic, c.instance)) {
                tracks.push((c.semantic, c.instance));
            }
        }
    }
    tracks.sort_unstable();

    for (t, fc) in inference.per_frame.iter().enumerate() {
        let mut semantic_px = vec![0u8; res * res];
        let mut instance_px = vec![0u8; res * res];
        for c in &fc.list {
            let track = tracks.iter().position(|&x| x == (c.semantic, c.instance)).unwrap();
            for (i, &m) in c.mask.iter().enumerate() {
                if !m {
                    continue;
                }
                let (gy, gx) = (i / grid.1, i % grid.1);
                for py in 0..patch {
                    for px in 0..patch {
                        let idx = (gy * patch + py) * res + gx * patch + px;
                        semantic_px[idx] = c.semantic as u8 + 1;
                        instance_px[idx] = track as u8 + 1;
                    }
                }
            }
        }
        write_indexed_png(
            &sem_dir.join(format!("{t:05}.png")),
            res,
            res,
            &semantic_px,
            &semantic_palette(cfg.slots.n),
        )?;
        write_indexed_png(
            &inst_dir.join(format!("{t:05}.png")),
            res,
            res,
            &instance_px,
            &instance_palette(&tracks, cfg.slots.n),
        )?;
    }
    println!(
        "exported {} frames of semantic and instance masks to {}",
        inference.per_frame.len(),
        run.path.display()
    );
    Ok(())
}

fn hsv(h: f64, s: f64, v: f64) -> [u8; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    let (r, g, b) = match (i as i64).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
}

/// Colors keyed by semantic index; background black.
fn semantic_palette(n: usize) -> Vec<u8> {
    let mut pal = vec![0, 0, 0];
    for s in 0..n {
        pal.extend_from_slice(&hsv(s as f64 / n as f64, 0.85, 0.95));
    }
    pal
}

/// Instance colors share their semantic's hue, varying brightness per slot.
fn instance_palette(tracks: &[(usize, usize)], n: usize) -> Vec<u8> {
    let mut pal = vec![0, 0, 0];
    for &(sem, inst) in tracks {
        let v = 0.95 - 0.18 * (inst % 4) as f64;
        pal.extend_from_slice(&hsv(sem as f64 / n as f64, 0.85, v));
    }
    pal
}

fn write_indexed_png(path: &Path, w: usize, h: usize, ids: &[u8], palette: &[u8]) -> Result<()> {
    let file =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(palette.to_vec());
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::data(path.display().to_string(), e.to_string()))?;
    writer
        .write_image_data(ids)
        .map_err(|e| Error::data(path.display().to_string(), e.to_string()))?;
    Ok(())
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 11)]
    pub seed: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    /// Maximum allowed relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Optional directory for the machine-readable report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn gradcheck(args: GradcheckArgs) -> Result<()> {
    let report = run_gradient_checks(args.seed, args.step, args.tolerance)?;
    println!("loss     max-rel-error   status");
    for check in &report.checks {
        println!(
            "{:<8} {:<15.3e} {}",
            check.loss,
            check.max_rel_error,
            if check.passed { "pass" } else { "FAIL" }
        );
    }
    println!(
        "teacher-gradients-zero          {}",
        if report.teacher_grads_zero { "pass" } else { "FAIL" }
    );
    if let Some(dir) = &args.out {
        let run = RunDir::create(dir)?;
        let rows: Vec<serde_json::Value> = report
            .checks
            .iter()
            .map(|c| {
                serde_json::json!({
                    "loss": c.loss,
                    "max_rel_error": c.max_rel_error,
                    "passed": c.passed,
                })
            })
            .collect();
        let blob = serde_json::json!({
            "tolerance": report.tolerance,
            "teacher_grads_zero": report.teacher_grads_zero,
            "checks": rows,
        });
        run.write_text("gradcheck.json", &serde_json::to_string_pretty(&blob).unwrap())?;
    }
    if report.all_passed() {
        Ok(())
    } else {
        Err(Error::NonFinite { context: "gradient check failed".into() })
    }
}

#[derive(Args)]
pub struct PreliminaryArgs {
    #[command(flatten)]
    pub config: ConfigOpts,
    /// Dataset directory containing train/ and eval/ splits.
    #[arg(long)]
    pub data: PathBuf,
    /// Training steps per study cell.
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    /// Comma-separated seeds to average over.
    #[arg(long, default_value = "1,2,3", value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn preliminary(args: PreliminaryArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let train_videos = load_external_dataset(&args.data.join("train"))?;
    let eval_videos = load_external_dataset(&args.data.join("eval"))?;
    if train_videos.is_empty() || eval_videos.is_empty() {
        return Err(Error::Config(format!(
            "expected train/ and eval/ splits under {}",
            args.data.display()
        )));
    }
    let run = RunDir::create(&args.out)?;
    run.write_config(&cfg)?;
    run.write_input_hash(&[args.data.as_path()])?;
    let table = run_preliminary_study(
        &cfg,
        &train_videos,
        &eval_videos,
        args.steps,
        &args.seeds,
        |msg| println!("{msg}"),
    )?;
    run.write_text(
        "preliminary.json",
        &serde_json::to_string_pretty(&table).map_err(|e| Error::Contract(e.to_string()))?,
    )?;
    print!("{}", table.human_table());
    Ok(())
}
