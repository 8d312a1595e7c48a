//! Scripted experiment runners shared by the command-line interface and the
//! acceptance suite: plain train-and-evaluate plus the query-vs-random
//! initialization study on appearance-only and correlation-only features.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::VideoSample;
use crate::error::Result;
use crate::evaluation::{evaluate_dataset, MetricReport};
use crate::model::LossBreakdown;
use crate::trainer::Trainer;

/// Trains for `steps` steps, invoking `on_step` after each step.
pub fn train_model(
    cfg: &RunConfig,
    videos: &[VideoSample],
    steps: usize,
    mut on_step: impl FnMut(usize, &LossBreakdown),
) -> Result<Trainer> {
    let mut trainer = Trainer::new(cfg.clone())?;
    for step in 0..steps {
        let breakdown = trainer.train_step(videos)?;
        on_step(step, &breakdown);
    }
    Ok(trainer)
}

/// Evaluates the trainer's inference pathway on a dataset.
pub fn eval_trainer(trainer: &Trainer, videos: &[VideoSample]) -> Result<MetricReport> {
    evaluate_dataset(videos, trainer.inference_store(), &trainer.model, &trainer.cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    Rgb,
    Correlation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Query,
    Random,
}

/// Single-stage configuration for one cell of the preliminary study.
pub fn preliminary_config(base: &RunConfig, feature: FeatureMode, init: InitMode, seed: u64) -> RunConfig {
    let mut cfg = base.clone();
    cfg.seed = seed;
    cfg.fusion.use_semantic = feature == FeatureMode::Rgb;
    cfg.fusion.use_correlation = feature == FeatureMode::Correlation;
    cfg.slots.random_init = init == InitMode::Random;
    cfg.slots.instance_stage = false;
    cfg.loss.enable_obj = false;
    cfg
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreliminaryCell {
    pub feature: FeatureMode,
    pub init: InitMode,
    pub per_seed_iou: Vec<f64>,
    pub mean_iou: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreliminaryTable {
    pub cells: Vec<PreliminaryCell>,
    pub steps: usize,
    pub seeds: Vec<u64>,
}

impl PreliminaryTable {
    pub fn cell(&self, feature: FeatureMode, init: InitMode) -> &PreliminaryCell {
        self.cells
            .iter()
            .find(|c| c.feature == feature && c.init == init)
            .expect("all four cells present")
    }

    pub fn human_table(&self) -> String {
        let q_rgb = self.cell(FeatureMode::Rgb, InitMode::Query).mean_iou;
        let r_rgb = self.cell(FeatureMode::Rgb, InitMode::Random).mean_iou;
        let q_cor = self.cell(FeatureMode::Correlation, InitMode::Query).mean_iou;
        let r_cor = self.cell(FeatureMode::Correlation, InitMode::Random).mean_iou;
        format!(
            "feature        query    random\nrgb            {q_rgb:.4}   {r_rgb:.4}\ncorrelation    {q_cor:.4}   {r_cor:.4}\n"
        )
    }
}

/// Trains and evaluates the four feature-by-initialization cells over the
/// given seeds, reporting mean merged-foreground IoU per cell.
pub fn run_preliminary_study(
    base: &RunConfig,
    train_videos: &[VideoSample],
    eval_videos: &[VideoSample],
    steps: usize,
    seeds: &[u64],
    mut on_progress: impl FnMut(&str),
) -> Result<PreliminaryTable> {
    let mut cells = Vec::new();
    for feature in [FeatureMode::Rgb, FeatureMode::Correlation] {
        for init in [InitMode::Query, InitMode::Random] {
            let mut per_seed = Vec::with_capacity(seeds.len());
            for &seed in seeds {
                let cfg = preliminary_config(base, feature, init, seed);
                let trainer = train_model(&cfg, train_videos, steps, |_, _| {})?;
                let report = eval_trainer(&trainer, eval_videos)?;
                on_progress(&format!(
                    "{feature:?}/{init:?} seed {seed}: fg IoU {:.4}",
                    report.aggregate.single_iou
                ));
                per_seed.push(report.aggregate.single_iou);
            }
            let mean = per_seed.iter().sum::<f64>() / per_seed.len().max(1) as f64;
            cells.push(PreliminaryCell { feature, init, per_seed_iou: per_seed, mean_iou: mean });
        }
    }
    Ok(PreliminaryTable { cells, steps, seeds: seeds.to_vec() })
}
