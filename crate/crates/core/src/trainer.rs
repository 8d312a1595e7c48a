//! Teacher-student optimization loop: clip sampling, per-view augmentation,
//! both forward passes, loss assembly, AdamW step, and the EMA teacher
//! update. Batch elements evaluate in parallel; gradient reduction follows
//! clip order, so runs are bit-reproducible.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore};
use crate::config::{AugmentConfig, RunConfig};
use crate::data::VideoSample;
use crate::encoder::Frame;
use crate::error::{Error, Result};
use crate::model::{
    clip_loss, extract_outputs, forward_clip, teacher_plans, LossBreakdown, Model,
};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Adam with decoupled weight decay. Moments are kept per parameter in
/// store order.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
    pub steps: usize,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let first = store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect();
        let second = store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect();
        AdamW { first, second, steps: 0 }
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f64, beta1: f64, beta2: f64, wd: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);
        let eps = 1e-8;
        for (idx, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let grad = store.grad(id).clone();
            let m = &self.first[idx];
            let v = &self.second[idx];
            let m_new = Tensor::from_fn(m.shape(), |i| {
                beta1 * m.data()[i] + (1.0 - beta1) * grad.data()[i]
            });
            let v_new = Tensor::from_fn(v.shape(), |i| {
                beta2 * v.data()[i] + (1.0 - beta2) * grad.data()[i] * grad.data()[i]
            });
            let value = store.value(id);
            let updated = Tensor::from_fn(value.shape(), |i| {
                let m_hat = m_new.data()[i] / bias1;
                let v_hat = v_new.data()[i] / bias2;
                let x = value.data()[i];
                x - lr * (m_hat / (v_hat.sqrt() + eps)) - lr * wd * x
            });
            self.first[idx] = m_new;
            self.second[idx] = v_new;
            store.set_value(id, updated);
        }
    }
}

/// theta_hat <- m * theta_hat + (1 - m) * theta, per parameter.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, momentum: f64) {
    let ids: Vec<ParamId> = teacher.ids().collect();
    for id in ids {
        let t = teacher.value(id);
        let s = student.value(id);
        assert_eq!(t.shape(), s.shape(), "pathway parameter shapes diverged");
        let mixed =
            Tensor::from_fn(t.shape(), |i| momentum * t.data()[i] + (1.0 - momentum) * s.data()[i]);
        teacher.set_value(id, mixed);
    }
}

/// Evenly strided clip indices with a uniformly random feasible start.
pub fn sample_clip_indices(
    video_len: usize,
    frames: usize,
    stride: usize,
    rng: &mut RngState,
) -> Result<Vec<usize>> {
    let span = (frames - 1) * stride + 1;
    if video_len < span {
        return Err(Error::Contract(format!(
            "video of {video_len} frames is too short for {frames} frames at stride {stride}"
        )));
    }
    let start = rng.below(video_len - span + 1);
    Ok((0..frames).map(|k| start + k * stride).collect())
}

/// One sampled geometric+photometric transform, shared by every frame of a
/// clip view. Reapplying the same parameters reproduces the output exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub crop_origin: (f64, f64),
    pub crop_size: f64,
    pub flip: bool,
    pub brightness: f64,
    pub contrast: f64,
}

impl AugmentParams {
    pub fn identity(src: usize) -> Self {
        AugmentParams {
            crop_origin: (0.0, 0.0),
            crop_size: src as f64,
            flip: false,
            brightness: 0.0,
            contrast: 1.0,
        }
    }
}

pub fn sample_augment(cfg: &AugmentConfig, src: usize, rng: &mut RngState) -> AugmentParams {
    let mut p = AugmentParams::identity(src);
    if cfg.crop {
        let scale = rng.uniform_in(cfg.crop_min_scale, 1.0);
        let size = scale * src as f64;
        let max_off = src as f64 - size;
        p.crop_origin = (rng.uniform_in(0.0, max_off), rng.uniform_in(0.0, max_off));
        p.crop_size = size;
    }
    if cfg.flip {
        p.flip = rng.bernoulli(0.5);
    }
    if cfg.jitter {
        p.brightness = rng.uniform_in(-cfg.brightness, cfg.brightness);
        p.contrast = 1.0 + rng.uniform_in(-cfg.contrast, cfg.contrast);
    }
    p
}

/// Crop-and-resize (bilinear) to target resolution, optional horizontal
/// mirror, brightness/contrast jitter, clamped to [0, 1].
pub fn apply_augment(frame: &Frame, p: &AugmentParams, target: usize) -> Frame {
    let src_h = frame.height as f64;
    let src_w = frame.width as f64;
    let mut out = Frame::filled(target, target, [0.0, 0.0, 0.0]);
    for y in 0..target {
        for x in 0..target {
            let xx = if p.flip { target - 1 - x } else { x };
            let sy = p.crop_origin.0 + (y as f64 + 0.5) / target as f64 * p.crop_size - 0.5;
            let sx = p.crop_origin.1 + (xx as f64 + 0.5) / target as f64 * p.crop_size - 0.5;
            let sy = sy.clamp(0.0, src_h - 1.0);
            let sx = sx.clamp(0.0, src_w - 1.0);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(frame.height - 1), (x0 + 1).min(frame.width - 1));
            let (ty, tx) = (sy - y0 as f64, sx - x0 as f64);
            let mut rgb = [0.0; 3];
            let (p00, p01) = (frame.pixel(y0, x0), frame.pixel(y0, x1));
            let (p10, p11) = (frame.pixel(y1, x0), frame.pixel(y1, x1));
            for c in 0..3 {
                let v = (1.0 - ty) * ((1.0 - tx) * p00[c] + tx * p01[c])
                    + ty * ((1.0 - tx) * p10[c] + tx * p11[c]);
                rgb[c] = ((v - 0.5) * p.contrast + 0.5 + p.brightness).clamp(0.0, 1.0);
            }
            out.set_pixel(y, x, rgb);
        }
    }
    out
}

/// Student and teacher parameter sets; the teacher is structurally identical
/// and never touched by the optimizer.
pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Model,
    pub student: ParamStore,
    pub teacher: ParamStore,
    pub optimizer: AdamW,
    pub root_rng: RngState,
    pub step: usize,
    /// Videos skipped because they were too short for the clip geometry.
    pub skipped_short: usize,
}

struct ClipPlan {
    student_frames: Vec<Frame>,
    teacher_frames: Vec<Frame>,
    partners: Vec<usize>,
    student_slot_rng: RngState,
    teacher_slot_rng: RngState,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut init_rng = RngState::new(cfg.seed).substream(0x1217);
        let mut student = ParamStore::new();
        let model = Model::init(&cfg, &mut student, &mut init_rng);
        // Teacher starts as an exact copy of the student.
        let mut teacher = student.clone();
        teacher.zero_grads();
        let optimizer = AdamW::new(&student);
        let root_rng = RngState::new(cfg.seed);
        Ok(Trainer { cfg, model, student, teacher, optimizer, root_rng, step: 0, skipped_short: 0 })
    }

    fn plan_clips(&mut self, videos: &[VideoSample]) -> Result<Vec<ClipPlan>> {
        let t = self.cfg.train.frames_per_clip;
        let stride = self.cfg.train.stride;
        let span = (t - 1) * stride + 1;
        let feasible: Vec<usize> =
            (0..videos.len()).filter(|&i| videos[i].len() >= span).collect();
        if feasible.is_empty() {
            return Err(Error::Config(format!(
                "no video long enough for {t} frames at stride {stride}"
            )));
        }
        if feasible.len() < videos.len() {
            self.skipped_short += videos.len() - feasible.len();
        }
        let mut rng = self.root_rng.substream(self.step as u64);
        let res = self.cfg.encoder.resolution;
        let mut plans = Vec::with_capacity(self.cfg.train.batch_size);
        for clip in 0..self.cfg.train.batch_size {
            let video = &videos[feasible[rng.below(feasible.len())]];
            let indices = sample_clip_indices(video.len(), t, stride, &mut rng)?;
            let student_aug = sample_augment(&self.cfg.train.augment, video.frames[0].width, &mut rng);
            let teacher_aug = sample_augment(&self.cfg.train.augment, video.frames[0].width, &mut rng);
            let partners: Vec<usize> = (0..t)
                .map(|i| {
                    let mut j = rng.below(t - 1);
                    if j >= i {
                        j += 1;
                    }
                    j
                })
                .collect();
            let student_frames: Vec<Frame> =
                indices.iter().map(|&i| apply_augment(&video.frames[i], &student_aug, res)).collect();
            let teacher_frames: Vec<Frame> =
                indices.iter().map(|&i| apply_augment(&video.frames[i], &teacher_aug, res)).collect();
            let student_slot_rng = rng.substream(0x57 + clip as u64);
            // With random stage-1 initialization the alignment loss couples
            // mask rows by index, so both pathways must start from the same
            // slot draws; the full model keeps pathway draws independent.
            let teacher_slot_rng = if self.cfg.slots.random_init {
                student_slot_rng
            } else {
                rng.substream(0x7e + clip as u64)
            };
            plans.push(ClipPlan {
                student_frames,
                teacher_frames,
                partners,
                student_slot_rng,
                teacher_slot_rng,
            });
        }
        Ok(plans)
    }

    /// One optimization step over a batch of clips. Returns the mean loss
    /// breakdown across the batch.
    pub fn train_step(&mut self, videos: &[VideoSample]) -> Result<LossBreakdown> {
        let plans = self.plan_clips(videos)?;
        let cfg = &self.cfg;
        let model = &self.model;
        let student = &self.student;
        let teacher = &self.teacher;

        let results: Vec<Result<(LossBreakdown, Vec<(ParamId, Tensor)>)>> = plans
            .par_iter()
            .map(|plan| {
                let mut tg = Graph::no_grad();
                let teacher_fwd = forward_clip(
                    &mut tg,
                    teacher,
                    model,
                    cfg,
                    &plan.teacher_frames,
                    &plan.partners,
                    &plan.teacher_slot_rng,
                )?;
                let teacher_out = extract_outputs(&tg, &teacher_fwd, cfg)?;
                let plans_tj = teacher_plans(&teacher_out.features, cfg)?;

                let mut g = Graph::new();
                let student_fwd = forward_clip(
                    &mut g,
                    student,
                    model,
                    cfg,
                    &plan.student_frames,
                    &plan.partners,
                    &plan.student_slot_rng,
                )?;
                let student_out = extract_outputs(&g, &student_fwd, cfg)?;
                let (loss, breakdown) =
                    clip_loss(&mut g, cfg, &student_fwd, &student_out, &teacher_out, &plans_tj)?;
                if !breakdown.total.is_finite() {
                    return Err(Error::NonFinite {
                        context: format!(
                            "training loss at step {} (seed {}); rerun with this config to reproduce",
                            self.step, cfg.seed
                        ),
                    });
                }
                let grads = g.backward(loss);
                Ok((breakdown, g.param_grad_pairs(&grads)))
            })
            .collect();

        let mut mean = LossBreakdown::default();
        self.student.zero_grads();
        let batch = plans.len() as f64;
        for result in results {
            let (breakdown, grads) = result?;
            mean.total += breakdown.total / batch;
            mean.semantic += breakdown.semantic / batch;
            mean.regularization += breakdown.regularization / batch;
            mean.instance += breakdown.instance / batch;
            for (id, grad) in grads {
                self.student.add_grad(id, &grad);
            }
        }
        self.student.scale_grads(1.0 / batch);

        let lr = if self.cfg.train.warmup_steps > 0 && self.step < self.cfg.train.warmup_steps {
            self.cfg.train.lr * (self.step + 1) as f64 / self.cfg.train.warmup_steps as f64
        } else {
            self.cfg.train.lr
        };
        self.optimizer.step(
            &mut self.student,
            lr,
            self.cfg.train.beta1,
            self.cfg.train.beta2,
            self.cfg.train.weight_decay,
        );
        ema_update(&mut self.teacher, &self.student, self.cfg.train.momentum);
        self.step += 1;
        Ok(mean)
    }

    pub fn inference_store(&self) -> &ParamStore {
        match self.cfg.eval.pathway {
            crate::config::Pathway::Teacher => &self.teacher,
            crate::config::Pathway::Student => &self.student,
        }
    }
}
