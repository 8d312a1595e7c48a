//! Inference protocol (validity-filtered candidate objects) and evaluation:
//! region IoU, boundary F, track-matched J&F, FG-ARI, and affinity-based
//! label propagation.

use serde::{Deserialize, Serialize};

use crate::assignment::min_assignment;
use crate::autodiff::{Graph, ParamStore};
use crate::config::RunConfig;
use crate::data::VideoSample;
use crate::encoder::Frame;
use crate::error::{Error, Result};
use crate::model::{extract_outputs, forward_clip, inference_partners, Model};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// One validity-passing (semantic, instance) with its patch-level mask.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub semantic: usize,
    pub instance: usize,
    pub mask: Vec<bool>,
    pub slot: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct FrameCandidates {
    pub list: Vec<Candidate>,
}

impl FrameCandidates {
    /// Union of candidate masks.
    pub fn foreground(&self, hw: usize) -> Vec<bool> {
        let mut fg = vec![false; hw];
        for c in &self.list {
            for (o, &m) in fg.iter_mut().zip(c.mask.iter()) {
                *o |= m;
            }
        }
        fg
    }

    /// Patch labeling: 0 = background, k+1 = candidate k of this frame.
    pub fn labeling(&self, hw: usize) -> Vec<u32> {
        let mut labels = vec![0u32; hw];
        for (k, c) in self.list.iter().enumerate() {
            for (i, &m) in c.mask.iter().enumerate() {
                if m {
                    labels[i] = k as u32 + 1;
                }
            }
        }
        labels
    }
}

#[derive(Debug, Clone)]
pub struct InferenceResult {
    pub per_frame: Vec<FrameCandidates>,
    pub grid: (usize, usize),
    pub patch_size: usize,
    /// Encoder features per frame, for label propagation.
    pub features: Vec<Tensor>,
}

/// Runs the model over a whole video and extracts candidate objects per
/// frame. Candidate masks partition each semantic's binarized support by
/// argmax instance attention among its valid instances.
pub fn infer_video(
    frames: &[Frame],
    store: &ParamStore,
    model: &Model,
    cfg: &RunConfig,
    seed: u64,
) -> Result<InferenceResult> {
    if frames.len() < 2 {
        return Err(Error::Contract("inference needs at least two frames".into()));
    }
    let res = cfg.encoder.resolution;
    let resized: Vec<Frame> = frames
        .iter()
        .map(|f| {
            if f.height == res && f.width == res {
                f.clone()
            } else {
                resize_frame(f, res)
            }
        })
        .collect();
    let partners = inference_partners(resized.len());
    let mut g = Graph::no_grad();
    let slot_rng = RngState::new(seed).substream(0xe7a1);
    let fwd = forward_clip(&mut g, store, model, cfg, &resized, &partners, &slot_rng)?;
    let out = extract_outputs(&g, &fwd, cfg)?;
    let hw = cfg.encoder.tokens();
    let grid = (cfg.encoder.grid(), cfg.encoder.grid());

    let mut per_frame = Vec::with_capacity(resized.len());
    for t in 0..resized.len() {
        let mut list = Vec::new();
        if cfg.slots.instance_stage {
            for sem in 0..cfg.slots.n {
                let valid: Vec<usize> = (0..cfg.slots.p)
                    .filter(|&p| out.validity[t].is_valid(sem, p))
                    .collect();
                if valid.is_empty() {
                    continue;
                }
                let attn = &out.instance_attention[t][sem];
                // Pixel ownership: argmax attention among valid instances,
                // lowest index on ties.
                let mut owner = vec![None::<usize>; hw];
                for i in 0..hw {
                    if out.binarized[t].at2(sem, i) == 0.0 {
                        continue;
                    }
                    let mut best = (f64::NEG_INFINITY, None);
                    for &p in &valid {
                        let a = attn.at2(p, i);
                        if a > best.0 {
                            best = (a, Some(p));
                        }
                    }
                    owner[i] = best.1;
                }
                for &p in &valid {
                    let mask: Vec<bool> = (0..hw).map(|i| owner[i] == Some(p)).collect();
                    list.push(Candidate {
                        semantic: sem,
                        instance: p,
                        mask,
                        slot: out.instance_slots[t][sem].row(p)?,
                    });
                }
            }
        } else {
            // Semantic-only configuration: valid semantics by area.
            for sem in 0..cfg.slots.n {
                let row = out.binarized[t].row_slice(sem);
                let area = row.iter().sum::<f64>() / hw as f64;
                if area < cfg.loss.tau1 {
                    continue;
                }
                list.push(Candidate {
                    semantic: sem,
                    instance: 0,
                    mask: row.iter().map(|&v| v > 0.0).collect(),
                    slot: out.centers[t].row(sem)?,
                });
            }
        }
        per_frame.push(FrameCandidates { list });
    }
    Ok(InferenceResult {
        per_frame,
        grid,
        patch_size: cfg.encoder.patch_size,
        features: out.features,
    })
}

/// Bilinear resize to a square target.
pub fn resize_frame(frame: &Frame, target: usize) -> Frame {
    let mut out = Frame::filled(target, target, [0.0; 3]);
    for y in 0..target {
        for x in 0..target {
            let sy = ((y as f64 + 0.5) * frame.height as f64 / target as f64 - 0.5)
                .clamp(0.0, frame.height as f64 - 1.0);
            let sx = ((x as f64 + 0.5) * frame.width as f64 / target as f64 - 0.5)
                .clamp(0.0, frame.width as f64 - 1.0);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(frame.height - 1), (x0 + 1).min(frame.width - 1));
            let (ty, tx) = (sy - y0 as f64, sx - x0 as f64);
            let mut rgb = [0.0; 3];
            for c in 0..3 {
                rgb[c] = (1.0 - ty)
                    * ((1.0 - tx) * frame.pixel(y0, x0)[c] + tx * frame.pixel(y0, x1)[c])
                    + ty * ((1.0 - tx) * frame.pixel(y1, x0)[c] + tx * frame.pixel(y1, x1)[c]);
            }
            out.set_pixel(y, x, rgb);
        }
    }
    out
}

/// Nearest-neighbor resize of an id mask.
pub fn resize_mask_nearest(ids: &[u16], from: (usize, usize), to: usize) -> Vec<u16> {
    let (h, w) = from;
    (0..to * to)
        .map(|i| {
            let (y, x) = (i / to, i % to);
            let sy = ((y as f64 + 0.5) * h as f64 / to as f64 - 0.5).round().clamp(0.0, h as f64 - 1.0)
                as usize;
            let sx = ((x as f64 + 0.5) * w as f64 / to as f64 - 0.5).round().clamp(0.0, w as f64 - 1.0)
                as usize;
            ids[sy * w + sx]
        })
        .collect()
}

/// Expands a patch-grid mask to pixel resolution.
pub fn upsample_mask(patch_mask: &[bool], grid: (usize, usize), patch: usize) -> Vec<bool> {
    let (gh, gw) = grid;
    let (h, w) = (gh * patch, gw * patch);
    let mut out = vec![false; h * w];
    for (i, &m) in patch_mask.iter().enumerate() {
        if !m {
            continue;
        }
        let (gy, gx) = (i / gw, i % gw);
        for py in 0..patch {
            for px in 0..patch {
                out[(gy * patch + py) * w + gx * patch + px] = true;
            }
        }
    }
    out
}

/// Intersection over union; both-empty counts as 1.0.
pub fn iou(pred: &[bool], gt: &[bool]) -> f64 {
    assert_eq!(pred.len(), gt.len(), "iou mask sizes differ");
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn contour(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            let boundary = y == 0
                || x == 0
                || y == h - 1
                || x == w - 1
                || !mask[(y - 1) * w + x]
                || !mask[(y + 1) * w + x]
                || !mask[y * w + x - 1]
                || !mask[y * w + x + 1];
            out[y * w + x] = boundary;
        }
    }
    out
}

/// Morphological dilation with a disk structuring element.
pub fn dilate(mask: &[bool], h: usize, w: usize, radius: f64) -> Vec<bool> {
    let r = radius.ceil() as i64;
    let mut offsets = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if (dy * dy + dx * dx) as f64 <= radius * radius {
                offsets.push((dy, dx));
            }
        }
    }
    let mut out = vec![false; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if !mask[(y * w as i64 + x) as usize] {
                continue;
            }
            for &(dy, dx) in &offsets {
                let (ny, nx) = (y + dy, x + dx);
                if ny >= 0 && nx >= 0 && ny < h as i64 && nx < w as i64 {
                    out[(ny * w as i64 + nx) as usize] = true;
                }
            }
        }
    }
    out
}

/// Boundary F-measure: contour precision/recall within a pixel tolerance.
pub fn boundary_f_with_tolerance(
    pred: &[bool],
    gt: &[bool],
    h: usize,
    w: usize,
    tolerance_px: f64,
) -> f64 {
    let pc = contour(pred, h, w);
    let gc = contour(gt, h, w);
    let pred_pts = pc.iter().filter(|&&v| v).count();
    let gt_pts = gc.iter().filter(|&&v| v).count();
    if pred_pts == 0 && gt_pts == 0 {
        return 1.0;
    }
    if pred_pts == 0 || gt_pts == 0 {
        return 0.0;
    }
    let gdil = dilate(&gc, h, w, tolerance_px);
    let pdil = dilate(&pc, h, w, tolerance_px);
    let matched_pred = pc.iter().zip(gdil.iter()).filter(|(&p, &d)| p && d).count();
    let matched_gt = gc.iter().zip(pdil.iter()).filter(|(&g, &d)| g && d).count();
    let precision = matched_pred as f64 / pred_pts as f64;
    let recall = matched_gt as f64 / gt_pts as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Boundary F with the conventional tolerance of 0.8% of the image diagonal.
pub fn boundary_f(pred: &[bool], gt: &[bool], h: usize, w: usize) -> f64 {
    let tol = (0.008 * ((h * h + w * w) as f64).sqrt()).ceil();
    boundary_f_with_tolerance(pred, gt, h, w, tol)
}

/// Adjusted Rand index over ground-truth foreground pixels. Returns the
/// score and a degeneracy flag (single-cluster cases are defined as 0).
pub fn fg_ari(pred_labels: &[u32], gt_labels: &[u16]) -> (f64, bool) {
    assert_eq!(pred_labels.len(), gt_labels.len());
    let mut pairs: Vec<(u16, u32)> = Vec::new();
    for (&p, &g) in pred_labels.iter().zip(gt_labels.iter()) {
        if g > 0 {
            pairs.push((g, p));
        }
    }
    if pairs.is_empty() {
        return (0.0, true);
    }
    let mut gt_ids: Vec<u16> = pairs.iter().map(|&(g, _)| g).collect();
    gt_ids.sort_unstable();
    gt_ids.dedup();
    let mut pr_ids: Vec<u32> = pairs.iter().map(|&(_, p)| p).collect();
    pr_ids.sort_unstable();
    pr_ids.dedup();
    let n = pairs.len() as f64;
    let mut table = vec![0f64; gt_ids.len() * pr_ids.len()];
    for &(g, p) in &pairs {
        let gi = gt_ids.binary_search(&g).unwrap();
        let pi = pr_ids.binary_search(&p).unwrap();
        table[gi * pr_ids.len() + pi] += 1.0;
    }
    let choose2 = |x: f64| x * (x - 1.0) / 2.0;
    let sum_ij: f64 = table.iter().map(|&c| choose2(c)).sum();
    let sum_a: f64 = (0..gt_ids.len())
        .map(|gi| choose2(table[gi * pr_ids.len()..(gi + 1) * pr_ids.len()].iter().sum()))
        .sum();
    let sum_b: f64 = (0..pr_ids.len())
        .map(|pi| choose2((0..gt_ids.len()).map(|gi| table[gi * pr_ids.len() + pi]).sum()))
        .sum();
    let expected = sum_a * sum_b / choose2(n);
    let max_index = (sum_a + sum_b) / 2.0;
    if (max_index - expected).abs() < 1e-12 {
        return (0.0, true);
    }
    (((sum_ij - expected) / (max_index - expected)).clamp(-1.0, 1.0), false)
}

/// Track-matched multi-object J&F: predicted tracks are matched one-to-one
/// to ground-truth tracks maximizing per-pair J&F; unmatched ground truth
/// scores 0; the mean over ground-truth tracks is returned along with the
/// matched per-component means.
pub struct MultiObjectScore {
    pub jf: f64,
    pub jaccard: f64,
    pub boundary: f64,
}

pub fn multi_object_eval(
    pred_tracks: &[Vec<Vec<bool>>],
    gt_tracks: &[Vec<Vec<bool>>],
    h: usize,
    w: usize,
) -> MultiObjectScore {
    let n_gt = gt_tracks.len();
    if n_gt == 0 {
        return MultiObjectScore { jf: 1.0, jaccard: 1.0, boundary: 1.0 };
    }
    let n_pred = pred_tracks.len();
    let score_pair = |pred: &Vec<Vec<bool>>, gt: &Vec<Vec<bool>>| -> (f64, f64) {
        let frames = gt.len();
        let mut j = 0.0;
        let mut f = 0.0;
        for t in 0..frames {
            j += iou(&pred[t], &gt[t]);
            f += boundary_f(&pred[t], &gt[t], h, w);
        }
        (j / frames as f64, f / frames as f64)
    };
    let size = n_pred.max(n_gt);
    let mut jmat = vec![vec![0.0; size]; size];
    let mut fmat = vec![vec![0.0; size]; size];
    let mut cost = vec![vec![0.0; size]; size];
    for (pi, pred) in pred_tracks.iter().enumerate() {
        for (gi, gt) in gt_tracks.iter().enumerate() {
            let (j, f) = score_pair(pred, gt);
            jmat[pi][gi] = j;
            fmat[pi][gi] = f;
            cost[pi][gi] = -(j + f) / 2.0;
        }
    }
    let assign = min_assignment(&cost).expect("square matrix");
    let mut total_j = 0.0;
    let mut total_f = 0.0;
    for (pi, &gi) in assign.iter().enumerate() {
        if pi < n_pred && gi < n_gt {
            total_j += jmat[pi][gi];
            total_f += fmat[pi][gi];
        }
    }
    let jaccard = total_j / n_gt as f64;
    let boundary = total_f / n_gt as f64;
    MultiObjectScore { jf: (jaccard + boundary) / 2.0, jaccard, boundary }
}

/// Propagates first-frame label distributions through the video by top-k
/// softmax affinity over the first frame plus the previous `context_len`
/// frames. Returns per-frame hard labels (argmax, lowest index on ties) and
/// the soft distributions.
pub fn label_propagate(
    features: &[Tensor],
    first_labels: &Tensor,
    k: usize,
    temperature: f64,
    context_len: usize,
) -> Result<(Vec<Vec<usize>>, Vec<Tensor>)> {
    if features.is_empty() {
        return Err(Error::Contract("label propagation needs at least one frame".into()));
    }
    let hw = features[0].rows();
    let labels_dim = first_labels.cols();
    if first_labels.rows() != hw {
        return Err(Error::shape(
            "label_propagate",
            format!("labels {:?} vs features [{hw}, ..]", first_labels.shape()),
        ));
    }
    let normalized: Vec<Tensor> = features.iter().map(l2_normalize_rows).collect();
    let mut dists: Vec<Tensor> = vec![first_labels.clone()];
    let mut hard: Vec<Vec<usize>> = vec![argmax_rows(first_labels)];
    for f in 1..features.len() {
        // Context: first frame plus up to context_len previous frames.
        let mut ctx: Vec<usize> = vec![0];
        let lo = f.saturating_sub(context_len);
        for c in lo.max(1)..f {
            ctx.push(c);
        }
        let mut scored: Vec<Tensor> = Vec::with_capacity(ctx.len());
        for &c in &ctx {
            scored.push(normalized[f].matmul_nt(&normalized[c])?);
        }
        let total_keys = ctx.len() * hw;
        let kk = k.min(total_keys);
        let mut out = vec![0.0; hw * labels_dim];
        for q in 0..hw {
            // Top-k over the concatenated context affinities.
            let mut entries: Vec<(f64, usize)> = Vec::with_capacity(total_keys);
            for (ci, aff) in scored.iter().enumerate() {
                let row = aff.row_slice(q);
                for (i, &a) in row.iter().enumerate() {
                    entries.push((a, ci * hw + i));
                }
            }
            entries.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            entries.truncate(kk);
            let mx = entries.first().map(|e| e.0).unwrap_or(0.0);
            let mut weights: Vec<f64> =
                entries.iter().map(|&(a, _)| ((a - mx) / temperature).exp()).collect();
            let z: f64 = weights.iter().sum();
            for wgt in &mut weights {
                *wgt /= z;
            }
            for (&(_, key), &wgt) in entries.iter().zip(weights.iter()) {
                let (ci, i) = (key / hw, key % hw);
                let src = dists[ctx[ci]].row_slice(i);
                for l in 0..labels_dim {
                    out[q * labels_dim + l] += wgt * src[l];
                }
            }
        }
        let dist = Tensor::new(vec![hw, labels_dim], out)?;
        hard.push(argmax_rows(&dist));
        dists.push(dist);
    }
    Ok((hard, dists))
}

fn l2_normalize_rows(t: &Tensor) -> Tensor {
    let (rows, cols) = (t.rows(), t.cols());
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let row = t.row_slice(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt() + 1e-8;
        out.extend(row.iter().map(|v| v / norm));
    }
    Tensor::new(vec![rows, cols], out).unwrap()
}

fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|r| {
            let row = t.row_slice(r);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Per-video metric row; all values lie in [0, 1].
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct MetricRow {
    pub single_iou: f64,
    pub multi_jaccard: f64,
    pub multi_boundary: f64,
    pub multi_jf: f64,
    pub fg_ari: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_video: Vec<MetricRow>,
    pub aggregate: MetricRow,
    pub config_fingerprint: String,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn human_table(&self) -> String {
        let mut out = String::from(
            "video    fg-IoU   multi-J  multi-F  multi-J&F  FG-ARI\n",
        );
        for (i, row) in self.per_video.iter().enumerate() {
            out.push_str(&format!(
                "{i:>5}    {:.4}   {:.4}   {:.4}   {:.4}     {:.4}\n",
                row.single_iou, row.multi_jaccard, row.multi_boundary, row.multi_jf, row.fg_ari
            ));
        }
        out.push_str(&format!(
            "  agg    {:.4}   {:.4}   {:.4}   {:.4}     {:.4}\n",
            self.aggregate.single_iou,
            self.aggregate.multi_jaccard,
            self.aggregate.multi_boundary,
            self.aggregate.multi_jf,
            self.aggregate.fg_ari
        ));
        out
    }
}

/// Content fingerprint (FNV-1a over the resolved config JSON).
pub fn config_fingerprint(cfg: &RunConfig) -> String {
    let text = cfg.to_json_pretty();
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Evaluates a dataset: merged-foreground IoU, track-matched multi-object
/// J&F, and FG-ARI, averaged per video then over videos.
pub fn evaluate_dataset(
    videos: &[VideoSample],
    store: &ParamStore,
    model: &Model,
    cfg: &RunConfig,
) -> Result<MetricReport> {
    let mut per_video = Vec::with_capacity(videos.len());
    for (vi, video) in videos.iter().enumerate() {
        let inference = infer_video(&video.frames, store, model, cfg, cfg.seed ^ vi as u64)?;
        per_video.push(score_video(video, &inference, cfg)?);
    }
    let mut aggregate = MetricRow::default();
    if !per_video.is_empty() {
        let n = per_video.len() as f64;
        for row in &per_video {
            aggregate.single_iou += row.single_iou / n;
            aggregate.multi_jaccard += row.multi_jaccard / n;
            aggregate.multi_boundary += row.multi_boundary / n;
            aggregate.multi_jf += row.multi_jf / n;
            aggregate.fg_ari += row.fg_ari / n;
        }
    }
    Ok(MetricReport { per_video, aggregate, config_fingerprint: config_fingerprint(cfg) })
}

/// Scores one video against its ground truth at the model resolution.
pub fn score_video(
    video: &VideoSample,
    inference: &InferenceResult,
    cfg: &RunConfig,
) -> Result<MetricRow> {
    let res = cfg.encoder.resolution;
    let hw = cfg.encoder.tokens();
    let frames = video.frames.len();
    let gt_res: Vec<Vec<u16>> = (0..frames)
        .map(|t| {
            let src = &video.gt_instance[t];
            if video.frames[t].height == res && video.frames[t].width == res {
                src.clone()
            } else {
                resize_mask_nearest(src, (video.frames[t].height, video.frames[t].width), res)
            }
        })
        .collect();

    // Merged-foreground IoU, frame-averaged.
    let mut fg_iou = 0.0;
    let mut ari_sum = 0.0;
    let mut ari_count = 0usize;
    for t in 0..frames {
        let fg_patches = inference.per_frame[t].foreground(hw);
        let fg_pixels = upsample_mask(&fg_patches, inference.grid, inference.patch_size);
        let gt_fg: Vec<bool> = gt_res[t].iter().map(|&id| id > 0).collect();
        fg_iou += iou(&fg_pixels, &gt_fg);

        // FG-ARI over ground-truth foreground at pixel level.
        let labeling = inference.per_frame[t].labeling(hw);
        let label_pixels = upsample_labels(&labeling, inference.grid, inference.patch_size);
        if gt_res[t].iter().any(|&id| id > 0) {
            let (score, _) = fg_ari(&label_pixels, &gt_res[t]);
            ari_sum += score;
            ari_count += 1;
        }
    }
    fg_iou /= frames as f64;
    let ari = if ari_count > 0 { ari_sum / ari_count as f64 } else { 0.0 };

    // Multi-object tracks: candidates keep (semantic, instance) identity.
    let mut track_ids: Vec<(usize, usize)> = Vec::new();
    for fc in &inference.per_frame {
        for c in &fc.list {
            if !track_ids.contains(&(c.semantic, c.instance)) {
                track_ids.push((c.semantic, c.instance));
            }
        }
    }
    track_ids.sort_unstable();
    let pred_tracks: Vec<Vec<Vec<bool>>> = track_ids
        .iter()
        .map(|&(sem, inst)| {
            (0..frames)
                .map(|t| {
                    let patch_mask = inference.per_frame[t]
                        .list
                        .iter()
                        .find(|c| c.semantic == sem && c.instance == inst)
                        .map(|c| c.mask.clone())
                        .unwrap_or_else(|| vec![false; hw]);
                    upsample_mask(&patch_mask, inference.grid, inference.patch_size)
                })
                .collect()
        })
        .collect();
    let n_instances = video.gt_semantic.len();
    let gt_tracks: Vec<Vec<Vec<bool>>> = (1..=n_instances as u16)
        .map(|id| {
            (0..frames)
                .map(|t| gt_res[t].iter().map(|&v| v == id).collect())
                .collect()
        })
        .collect();
    let multi = multi_object_eval(&pred_tracks, &gt_tracks, res, res);

    Ok(MetricRow {
        single_iou: fg_iou,
        multi_jaccard: multi.jaccard,
        multi_boundary: multi.boundary,
        multi_jf: multi.jf,
        fg_ari: ari,
    })
}

/// Label-propagation scores: first-frame ground-truth labels are carried
/// through the video by feature affinity and compared against ground truth
/// on the remaining frames, per instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PropagationReport {
    pub per_video: Vec<PropagationRow>,
    pub aggregate: PropagationRow,
    pub config_fingerprint: String,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct PropagationRow {
    pub jaccard: f64,
    pub boundary: f64,
    pub jf: f64,
}

pub fn evaluate_propagation(
    videos: &[VideoSample],
    store: &ParamStore,
    model: &Model,
    cfg: &RunConfig,
) -> Result<PropagationReport> {
    let res = cfg.encoder.resolution;
    let patch = cfg.encoder.patch_size;
    let mut per_video = Vec::with_capacity(videos.len());
    for (vi, video) in videos.iter().enumerate() {
        let inference = infer_video(&video.frames, store, model, cfg, cfg.seed ^ vi as u64)?;
        let labels = video.gt_semantic.len() + 1;
        let gt0 = if video.frames[0].height == res && video.frames[0].width == res {
            video.gt_instance[0].clone()
        } else {
            resize_mask_nearest(
                &video.gt_instance[0],
                (video.frames[0].height, video.frames[0].width),
                res,
            )
        };
        let first = patch_labels_from_mask(&gt0, res, patch, labels);
        let (hard, _) = label_propagate(
            &inference.features,
            &first,
            cfg.eval.propagation_k,
            cfg.eval.propagation_temperature,
            cfg.eval.propagation_context,
        )?;
        let mut row = PropagationRow::default();
        let scored_frames = video.frames.len() - 1;
        for t in 1..video.frames.len() {
            let labels_px = {
                let as_u32: Vec<u32> = hard[t].iter().map(|&l| l as u32).collect();
                upsample_labels(&as_u32, inference.grid, patch)
            };
            let gt_t = if video.frames[t].height == res && video.frames[t].width == res {
                video.gt_instance[t].clone()
            } else {
                resize_mask_nearest(
                    &video.gt_instance[t],
                    (video.frames[t].height, video.frames[t].width),
                    res,
                )
            };
            let mut j_frame = 0.0;
            let mut f_frame = 0.0;
            for id in 1..labels {
                let pred: Vec<bool> = labels_px.iter().map(|&l| l as usize == id).collect();
                let gt: Vec<bool> = gt_t.iter().map(|&g| g as usize == id).collect();
                j_frame += iou(&pred, &gt);
                f_frame += boundary_f(&pred, &gt, res, res);
            }
            let instances = (labels - 1).max(1) as f64;
            row.jaccard += j_frame / instances / scored_frames as f64;
            row.boundary += f_frame / instances / scored_frames as f64;
        }
        row.jf = (row.jaccard + row.boundary) / 2.0;
        per_video.push(row);
    }
    let mut aggregate = PropagationRow::default();
    if !per_video.is_empty() {
        let n = per_video.len() as f64;
        for row in &per_video {
            aggregate.jaccard += row.jaccard / n;
            aggregate.boundary += row.boundary / n;
            aggregate.jf += row.jf / n;
        }
    }
    Ok(PropagationReport { per_video, aggregate, config_fingerprint: config_fingerprint(cfg) })
}

fn upsample_labels(patch_labels: &[u32], grid: (usize, usize), patch: usize) -> Vec<u32> {
    let (gh, gw) = grid;
    let (h, w) = (gh * patch, gw * patch);
    let mut out = vec![0u32; h * w];
    for (i, &l) in patch_labels.iter().enumerate() {
        let (gy, gx) = (i / gw, i % gw);
        for py in 0..patch {
            for px in 0..patch {
                out[(gy * patch + py) * w + gx * patch + px] = l;
            }
        }
    }
    out
}

/// Downsamples a pixel id mask to the patch grid by majority vote (lowest id
/// on ties), returning one-hot label distributions [HW, L].
pub fn patch_labels_from_mask(ids: &[u16], res: usize, patch: usize, labels: usize) -> Tensor {
    let grid = res / patch;
    let mut out = vec![0.0; grid * grid * labels];
    for gy in 0..grid {
        for gx in 0..grid {
            let mut counts = vec![0usize; labels];
            for py in 0..patch {
                for px in 0..patch {
                    let id = ids[(gy * patch + py) * res + gx * patch + px] as usize;
                    if id < labels {
                        counts[id] += 1;
                    }
                }
            }
            let mut best = 0;
            for (l, &c) in counts.iter().enumerate() {
                if c > counts[best] {
                    best = l;
                }
            }
            out[(gy * grid + gx) * labels + best] = 1.0;
        }
    }
    Tensor::new(vec![grid * grid, labels], out).unwrap()
}
