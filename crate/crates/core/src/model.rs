//! Full-model assembly: encoder, fusion, both slot-attention stages, teacher
//! plan computation, and the per-clip loss graph.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::config::RunConfig;
use crate::encoder::{encode, EncoderParams, Frame};
use crate::error::{Error, Result};
use crate::fusion::{correlate, fuse};
use crate::nn::GruParams;
use crate::objectives::{
    hungarian_match, instance_consistency_loss, mask_regularization, semantic_alignment_loss,
    total_loss, validity, ValidityMask,
};
use crate::rng::RngState;
use crate::slots::{
    binarize, instance_identify, prepare_inputs, semantic_decompose, AttentionParams,
    InstanceSemantic, SemanticVars, SlotBankParams,
};
use crate::tensor::Tensor;
use crate::transport::sinkhorn;

/// Parameter layout of one pathway. Both pathways share this structure; the
/// teacher owns a separate [`ParamStore`] with identical shapes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Model {
    pub encoder: EncoderParams,
    pub bank: SlotBankParams,
    pub attn: AttentionParams,
    pub gru: GruParams,
}

impl Model {
    /// Initializes parameters into `store`. The bank holds one Gaussian per
    /// semantic, or a single shared Gaussian in the classic random-init mode.
    pub fn init(cfg: &RunConfig, store: &mut ParamStore, rng: &mut RngState) -> Model {
        let d = cfg.encoder.dim;
        let bank_rows = if cfg.slots.random_init { 1 } else { cfg.slots.n };
        Model {
            encoder: EncoderParams::init(store, &cfg.encoder, rng),
            bank: SlotBankParams::init(store, bank_rows, d, rng),
            attn: AttentionParams::init(store, d, rng),
            gru: GruParams::init(store, "gru", d, rng),
        }
    }
}

/// On-graph results of one clip forward pass.
pub struct ClipForward {
    pub features: Vec<Var>,
    pub fused: Vec<Var>,
    pub partners: Vec<usize>,
    pub semantic: Vec<SemanticVars>,
    /// Per frame, per semantic; empty when the instance stage is disabled.
    pub instances: Vec<Vec<InstanceSemantic>>,
}

/// Plain-tensor view of a forward pass (teacher outputs, metric inputs).
#[derive(Debug, Clone)]
pub struct ClipOutputs {
    pub features: Vec<Tensor>,
    pub masks: Vec<Tensor>,
    pub centers: Vec<Tensor>,
    pub binarized: Vec<Tensor>,
    /// [frame][semantic] -> [P, D] slots.
    pub instance_slots: Vec<Vec<Tensor>>,
    /// [frame][semantic] -> [P, HW] exported attention.
    pub instance_attention: Vec<Vec<Tensor>>,
    pub validity: Vec<ValidityMask>,
}

/// Runs the full forward pass for a clip on one pathway. Slot sampling draws
/// from per-frame substreams of `slot_rng`, so frame results are independent
/// of evaluation order.
pub fn forward_clip(
    g: &mut Graph,
    store: &ParamStore,
    model: &Model,
    cfg: &RunConfig,
    frames: &[Frame],
    partners: &[usize],
    slot_rng: &RngState,
) -> Result<ClipForward> {
    if frames.len() != partners.len() {
        return Err(Error::shape("forward_clip", "one partner index per frame"));
    }
    let features: Vec<Var> = frames
        .iter()
        .map(|f| encode(g, store, &model.encoder, f, &cfg.encoder))
        .collect::<Result<_>>()?;
    let mut fused = Vec::with_capacity(frames.len());
    let mut semantic = Vec::with_capacity(frames.len());
    let mut instances = Vec::with_capacity(frames.len());
    for (t, &j) in partners.iter().enumerate() {
        if j == t || j >= frames.len() {
            return Err(Error::Contract(format!(
                "partner index {j} invalid for frame {t} of {}",
                frames.len()
            )));
        }
        let corr = correlate(g, features[t], features[j]);
        let fused_t = fuse(g, store, &model.encoder, &cfg.fusion, features[t], corr)?;
        let inputs = prepare_inputs(g, store, &model.attn, &cfg.slots, fused_t);
        let mut stage1_rng = slot_rng.substream(0x51a6_0000 + t as u64);
        let sem = semantic_decompose(
            g,
            store,
            &model.bank,
            &model.attn,
            &model.gru,
            &cfg.slots,
            &inputs,
            &mut stage1_rng,
        );
        if cfg.slots.instance_stage {
            let frame_rng = slot_rng.substream(t as u64);
            let sem_masks = g.value(sem.masks).clone();
            let inst = instance_identify(
                g,
                store,
                &model.bank,
                &model.attn,
                &model.gru,
                &cfg.slots,
                &inputs,
                &sem_masks,
                &frame_rng,
            );
            instances.push(inst);
        } else {
            instances.push(Vec::new());
        }
        fused.push(fused_t);
        semantic.push(sem);
    }
    Ok(ClipForward { features, fused, partners: partners.to_vec(), semantic, instances })
}

/// Extracts plain tensors and validity indicators from a forward pass.
pub fn extract_outputs(g: &Graph, fwd: &ClipForward, cfg: &RunConfig) -> Result<ClipOutputs> {
    let frames = fwd.features.len();
    let mut out = ClipOutputs {
        features: Vec::with_capacity(frames),
        masks: Vec::with_capacity(frames),
        centers: Vec::with_capacity(frames),
        binarized: Vec::with_capacity(frames),
        instance_slots: Vec::with_capacity(frames),
        instance_attention: Vec::with_capacity(frames),
        validity: Vec::with_capacity(frames),
    };
    for t in 0..frames {
        let masks = g.value(fwd.semantic[t].masks).clone();
        let centers = g.value(fwd.semantic[t].centers).clone();
        let binarized = binarize(&masks, cfg.slots.tau);
        let slots: Vec<Tensor> =
            fwd.instances[t].iter().map(|i| g.value(i.slots).clone()).collect();
        let attention: Vec<Tensor> =
            fwd.instances[t].iter().map(|i| g.value(i.attention).clone()).collect();
        let valid = if slots.is_empty() {
            ValidityMask::none(masks.rows(), cfg.slots.p)
        } else {
            validity(&binarized, &centers, &slots, cfg.loss.tau1, cfg.loss.tau2)?
        };
        out.features.push(g.value(fwd.features[t]).clone());
        out.masks.push(masks);
        out.centers.push(centers);
        out.binarized.push(binarized);
        out.instance_slots.push(slots);
        out.instance_attention.push(attention);
        out.validity.push(valid);
    }
    Ok(out)
}

/// Transport plans for every ordered frame pair, from teacher features. The
/// cost of pair (t, j) is the negated teacher correlation; plans are
/// detached constants downstream.
pub fn teacher_plans(
    teacher_features: &[Tensor],
    cfg: &RunConfig,
) -> Result<BTreeMap<(usize, usize), Tensor>> {
    let frames = teacher_features.len();
    let mut plans = BTreeMap::new();
    for t in 0..frames {
        for j in 0..frames {
            if t == j {
                continue;
            }
            let corr = teacher_features[t].matmul_nt(&teacher_features[j])?;
            let cost = corr.scale(-1.0);
            let plan = sinkhorn(&cost, &cfg.sinkhorn)?;
            plans.insert((t, j), plan.plan);
        }
    }
    Ok(plans)
}

/// Per-component loss values of one step or clip.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub semantic: f64,
    pub regularization: f64,
    pub instance: f64,
}

/// Builds the enabled objectives for one clip and returns the total loss
/// variable plus its breakdown. Teacher quantities are plain tensors and
/// receive no gradient.
pub fn clip_loss(
    g: &mut Graph,
    cfg: &RunConfig,
    student: &ClipForward,
    student_out: &ClipOutputs,
    teacher_out: &ClipOutputs,
    plans: &BTreeMap<(usize, usize), Tensor>,
) -> Result<(Var, LossBreakdown)> {
    let student_masks: Vec<Var> = student.semantic.iter().map(|s| s.masks).collect();

    let sem = if cfg.loss.enable_sem {
        Some(semantic_alignment_loss(g, &student_masks, &teacher_out.masks, plans)?)
    } else {
        None
    };
    let reg = if cfg.loss.enable_reg {
        Some(mask_regularization(g, &student_masks)?)
    } else {
        None
    };
    let obj = if cfg.loss.enable_obj && cfg.slots.instance_stage {
        let student_slots: Vec<Vec<Var>> = student
            .instances
            .iter()
            .map(|per_sem| per_sem.iter().map(|i| i.slots).collect())
            .collect();
        let frames = student_slots.len();
        let mut matches = BTreeMap::new();
        for t in 0..frames {
            for j in 0..frames {
                if t == j {
                    continue;
                }
                for sem_i in 0..cfg.slots.n {
                    let perm = hungarian_match(
                        &student_out.instance_slots[t][sem_i],
                        &teacher_out.instance_slots[j][sem_i],
                    )?;
                    matches.insert((t, j, sem_i), perm);
                }
            }
        }
        Some(instance_consistency_loss(
            g,
            &student_slots,
            &teacher_out.instance_slots,
            &student_out.validity,
            &teacher_out.validity,
            &matches,
            cfg.loss.lambda_margin,
        )?)
    } else {
        None
    };

    let breakdown = LossBreakdown {
        total: 0.0,
        semantic: sem.map(|v| g.value(v).item()).unwrap_or(0.0),
        regularization: reg.map(|v| g.value(v).item()).unwrap_or(0.0),
        instance: obj.map(|v| g.value(v).item()).unwrap_or(0.0),
    };
    let total = total_loss(g, sem, obj, reg)?;
    let breakdown = LossBreakdown { total: g.value(total).item(), ..breakdown };
    Ok((total, breakdown))
}

/// Deterministic inference-time partner: the next frame, or the previous one
/// for the last frame.
pub fn inference_partners(frames: usize) -> Vec<usize> {
    (0..frames)
        .map(|t| if t + 1 < frames { t + 1 } else { t.saturating_sub(1) })
        .collect()
}
