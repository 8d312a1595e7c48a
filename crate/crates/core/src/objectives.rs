//! Training objectives: dense semantic alignment over transport plans, mask
//! diversity regularization, validity filtering, bipartite instance matching,
//! and the margin-based instance consistency loss.
//!
//! Student quantities enter as graph variables; teacher quantities enter as
//! plain tensors and therefore receive no gradient.

use std::collections::BTreeMap;

use crate::assignment::max_cosine_assignment;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{cosine_similarity, Tensor, EPS_NUM};

/// Valid-instance indicator [N, P]: a slot counts only when its semantic
/// covers enough area and the slot stays close to the semantic center.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidityMask {
    pub flags: Vec<Vec<bool>>,
}

impl ValidityMask {
    pub fn semantics(&self) -> usize {
        self.flags.len()
    }

    pub fn is_valid(&self, n: usize, p: usize) -> bool {
        self.flags[n][p]
    }

    pub fn any(&self) -> bool {
        self.flags.iter().any(|row| row.iter().any(|&v| v))
    }

    pub fn none(n: usize, p: usize) -> Self {
        ValidityMask { flags: vec![vec![false; p]; n] }
    }
}

/// Applies the two validity criteria: binarized semantic area >= tau1 and
/// slot-to-center cosine >= tau2.
pub fn validity(
    binarized_masks: &Tensor,
    centers: &Tensor,
    instance_slots: &[Tensor],
    tau1: f64,
    tau2: f64,
) -> Result<ValidityMask> {
    let n = binarized_masks.rows();
    if centers.rows() != n || instance_slots.len() != n {
        return Err(Error::shape(
            "validity",
            format!(
                "masks {:?}, centers {:?}, {} instance groups",
                binarized_masks.shape(),
                centers.shape(),
                instance_slots.len()
            ),
        ));
    }
    let hw = binarized_masks.cols() as f64;
    let mut flags = Vec::with_capacity(n);
    for sem in 0..n {
        let area = binarized_masks.row_slice(sem).iter().sum::<f64>() / hw;
        let p = instance_slots[sem].rows();
        if area < tau1 {
            flags.push(vec![false; p]);
            continue;
        }
        let center = centers.row(sem)?;
        let mut row = Vec::with_capacity(p);
        for inst in 0..p {
            let slot = instance_slots[sem].row(inst)?;
            row.push(cosine_similarity(&center, &slot)? >= tau2);
        }
        flags.push(row);
    }
    Ok(ValidityMask { flags })
}

/// Permutation matching instance slots of one semantic across two frames,
/// maximizing total cosine similarity; exact, lowest-index on ties.
pub fn hungarian_match(a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    max_cosine_assignment(a, b)
}

/// Transport-weighted cross entropy pulling student masks toward transported
/// teacher masks, summed over all ordered frame pairs.
///
/// plans[(t, j)] couples frame-t patches (rows) to frame-j patches (columns).
pub fn semantic_alignment_loss(
    g: &mut Graph,
    student_masks: &[Var],
    teacher_masks: &[Tensor],
    plans: &BTreeMap<(usize, usize), Tensor>,
) -> Result<Var> {
    let frames = student_masks.len();
    if teacher_masks.len() != frames {
        return Err(Error::shape("semantic_alignment_loss", "pathway frame counts differ"));
    }
    for t in 0..frames {
        check_unit_interval(g.value(student_masks[t]), "student mask")?;
        check_unit_interval(&teacher_masks[t], "teacher mask")?;
    }
    let mut total: Option<Var> = None;
    for t in 0..frames {
        for j in 0..frames {
            if t == j {
                continue;
            }
            let plan = plans.get(&(t, j)).ok_or_else(|| {
                Error::Contract(format!("missing transport plan for frame pair ({t}, {j})"))
            })?;
            // Weight of semantic n at student patch u: sum_v pi[u,v] * teacher[n,v].
            let weights = teacher_masks[j].matmul_nt(plan)?;
            let wv = g.input(weights);
            let shifted = g.add_scalar(student_masks[t], EPS_NUM);
            let logm = g.ln(shifted);
            let prod = g.mul(wv, logm);
            let term = g.sum(prod);
            total = Some(match total {
                None => term,
                Some(acc) => g.add(acc, term),
            });
        }
    }
    let total = total.ok_or_else(|| {
        Error::Contract("semantic alignment needs at least two frames".into())
    })?;
    Ok(g.scale(total, -1.0))
}

fn check_unit_interval(t: &Tensor, what: &str) -> Result<()> {
    if t.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Contract(format!("{what} entry outside [0, 1]")));
    }
    Ok(())
}

/// Sum of pairwise cosine similarities between distinct mask rows, over all
/// frames and ordered row pairs.
pub fn mask_regularization(g: &mut Graph, student_masks: &[Var]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &masks in student_masks {
        let n = g.value(masks).rows();
        if g.value(masks).data().iter().any(|&v| v < 0.0) {
            return Err(Error::Contract("mask_regularization expects nonnegative masks".into()));
        }
        let gram = g.matmul_nt(masks, masks);
        let sq = g.mul(masks, masks);
        let ss = g.sum_axis(sq, 1);
        let norms = g.sqrt_guarded(ss);
        let col = g.reshape(norms, vec![n, 1]);
        let row = g.reshape(norms, vec![1, n]);
        let outer = g.matmul(col, row);
        let denom = g.add_scalar(outer, EPS_NUM);
        let cos = g.div(gram, denom);
        let off_diag =
            g.input(Tensor::from_fn(&[n, n], |i| if i / n == i % n { 0.0 } else { 1.0 }));
        let masked = g.mul(cos, off_diag);
        let term = g.sum(masked);
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term),
        });
    }
    total.ok_or_else(|| Error::Contract("mask_regularization needs at least one frame".into()))
}

/// Margin loss on valid matched instances: matched pairs are pulled together
/// in Euclidean distance, non-matched teacher slots are pushed beyond the
/// margin. All slot vectors are L2-normalized before distances.
#[allow(clippy::too_many_arguments)]
pub fn instance_consistency_loss(
    g: &mut Graph,
    student_slots: &[Vec<Var>],
    teacher_slots: &[Vec<Tensor>],
    student_validity: &[ValidityMask],
    teacher_validity: &[ValidityMask],
    matches: &BTreeMap<(usize, usize, usize), Vec<usize>>,
    margin: f64,
) -> Result<Var> {
    let frames = student_slots.len();
    if teacher_slots.len() != frames {
        return Err(Error::shape("instance_consistency_loss", "pathway frame counts differ"));
    }
    let mut total: Option<Var> = None;
    for t in 0..frames {
        for j in 0..frames {
            if t == j {
                continue;
            }
            for (sem, &slots_var) in student_slots[t].iter().enumerate() {
                let p = g.value(slots_var).rows();
                let perm = matches.get(&(t, j, sem)).ok_or_else(|| {
                    Error::Contract(format!("missing match for (t={t}, j={j}, semantic={sem})"))
                })?;
                if !student_validity[t].flags[sem].iter().any(|&v| v) {
                    continue;
                }
                let teacher_norm = l2_normalize_rows_plain(&teacher_slots[j][sem]);
                let student_norm = g.l2_normalize_rows(slots_var);

                // Pairwise distances: d^2 = |a|^2 + |b|^2 - 2 a.b, then sqrt.
                let dots = {
                    let tv = g.input(teacher_norm.clone());
                    g.matmul_nt(student_norm, tv)
                };
                let sa = {
                    let sq = g.mul(student_norm, student_norm);
                    g.sum_axis(sq, 1)
                };
                let sb_t = Tensor::from_fn(&[p], |q| {
                    teacher_norm.row_slice(q).iter().map(|v| v * v).sum()
                });
                let sb = g.input(sb_t);
                let m2 = g.scale(dots, -2.0);
                let part = g.add_col_vec(m2, sa);
                let dist_sq = g.add_row_vec(part, sb);
                let dist = g.sqrt_guarded(dist_sq);

                let mut pull = vec![0.0; p * p];
                let mut push = vec![0.0; p * p];
                for inst in 0..p {
                    if !student_validity[t].is_valid(sem, inst) {
                        continue;
                    }
                    let matched = perm[inst];
                    if teacher_validity[j].is_valid(sem, matched) {
                        pull[inst * p + matched] = 1.0;
                    }
                    for q in 0..p {
                        if q != matched {
                            push[inst * p + q] = 1.0;
                        }
                    }
                }
                let pull_mask = g.input(Tensor::new(vec![p, p], pull).unwrap());
                let push_mask = g.input(Tensor::new(vec![p, p], push).unwrap());
                let pulled = g.mul(dist, pull_mask);
                let pull_term = g.sum(pulled);
                let neg = g.scale(dist, -1.0);
                let gap = g.add_scalar(neg, margin);
                let hinge = g.relu(gap);
                let pushed = g.mul(hinge, push_mask);
                let push_term = g.sum(pushed);
                let term = g.add(pull_term, push_term);
                total = Some(match total {
                    None => term,
                    Some(acc) => g.add(acc, term),
                });
            }
        }
    }
    Ok(match total {
        Some(v) => v,
        // No valid instances anywhere (e.g. full occlusion): zero loss, no
        // gradient contribution.
        None => g.input(Tensor::scalar(0.0)),
    })
}

fn l2_normalize_rows_plain(t: &Tensor) -> Tensor {
    let (rows, cols) = (t.rows(), t.cols());
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let row = t.row_slice(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let inv = 1.0 / (norm + EPS_NUM);
        out.extend(row.iter().map(|v| v * inv));
    }
    Tensor::new(vec![rows, cols], out).unwrap()
}

/// Unweighted sum of the enabled objectives. Components must be finite.
pub fn total_loss(
    g: &mut Graph,
    sem: Option<Var>,
    obj: Option<Var>,
    reg: Option<Var>,
) -> Result<Var> {
    let mut total = g.input(Tensor::scalar(0.0));
    for (name, term) in [("L_sem", sem), ("L_obj", obj), ("L_reg", reg)] {
        if let Some(v) = term {
            let value = g.value(v).item();
            if !value.is_finite() {
                return Err(Error::NonFinite { context: format!("total_loss component {name}") });
            }
            total = g.add(total, v);
        }
    }
    Ok(total)
}
