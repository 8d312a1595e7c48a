//! Entropic optimal transport between patch sets, solved with Sinkhorn-Knopp.
//!
//! Plans couple the patches of two frames under uniform marginals and are
//! consumed as fixed weights downstream; no gradient flows through the solver.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinkhornConfig {
    /// Entropic regularization strength, relative to the standardized cost
    /// (the cost matrix is shifted/scaled to zero mean and unit deviation
    /// before solving, which leaves the plan invariant to affine cost shifts).
    pub epsilon: f64,
    pub max_iters: usize,
    /// Convergence threshold on the infinity norm of both marginal residuals.
    pub tol: f64,
    /// Solve in the log domain from the start. The direct solver retries in
    /// the log domain automatically when it overflows.
    pub log_domain: bool,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        // 0.5 relative to unit cost deviation keeps the scaling iteration in
        // its linear-convergence regime on degenerate instances; colder
        // settings develop sublinear tails and miss the iteration budget.
        SinkhornConfig { epsilon: 0.5, max_iters: 200, tol: 1e-6, log_domain: false }
    }
}

/// Solution of one transport problem.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub plan: Tensor,
    pub row_marginal: Vec<f64>,
    pub col_marginal: Vec<f64>,
    /// Achieved infinity-norm residuals against the marginal targets.
    pub row_residual: f64,
    pub col_residual: f64,
    pub iterations: usize,
    /// False when max_iters was hit before both residuals reached tol.
    pub converged: bool,
}

impl TransportPlan {
    pub fn objective(&self, cost: &Tensor) -> f64 {
        self.plan
            .data()
            .iter()
            .zip(cost.data().iter())
            .map(|(&p, &c)| p * c)
            .sum()
    }
}

/// Solves min <cost, P> + eps * H(P) with uniform marginals on both sides.
pub fn sinkhorn(cost: &Tensor, cfg: &SinkhornConfig) -> Result<TransportPlan> {
    let (n, m) = check_cost(cost)?;
    let r = vec![1.0 / n as f64; n];
    let c = vec![1.0 / m as f64; m];
    sinkhorn_with_marginals(cost, &r, &c, cfg)
}

/// Marginal-injection variant; `row` and `col` must each sum to 1. Only
/// uniform marginals are exercised by the pipeline, but alternative marginal
/// formulations plug in here.
pub fn sinkhorn_with_marginals(
    cost: &Tensor,
    row: &[f64],
    col: &[f64],
    cfg: &SinkhornConfig,
) -> Result<TransportPlan> {
    let (n, m) = check_cost(cost)?;
    if row.len() != n || col.len() != m {
        return Err(Error::shape(
            "sinkhorn",
            format!("marginals {}x{} vs cost {:?}", row.len(), col.len(), cost.shape()),
        ));
    }
    if !(cfg.epsilon > 0.0) || cfg.max_iters < 1 {
        return Err(Error::Config(format!(
            "sinkhorn requires epsilon > 0 and max_iters >= 1, got {} / {}",
            cfg.epsilon, cfg.max_iters
        )));
    }

    let std_cost = standardize(cost);
    if cfg.log_domain {
        return Ok(solve_log(&std_cost, row, col, cfg));
    }
    match solve_direct(&std_cost, row, col, cfg) {
        Some(plan) => Ok(plan),
        // Overflow or a vanished kernel entry in the direct iteration; the
        // log-domain path handles small epsilon safely.
        None => Ok(solve_log(&std_cost, row, col, cfg)),
    }
}

fn check_cost(cost: &Tensor) -> Result<(usize, usize)> {
    if cost.rank() != 2 {
        return Err(Error::shape("sinkhorn", format!("cost must be 2D, got {:?}", cost.shape())));
    }
    if !cost.all_finite() {
        return Err(Error::NonFinite { context: "sinkhorn cost matrix".into() });
    }
    Ok((cost.rows(), cost.cols()))
}

/// Zero-mean, unit-deviation copy of the cost (plan-invariant reparameterization).
fn standardize(cost: &Tensor) -> Tensor {
    let mean = cost.mean();
    let var = cost.data().iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>()
        / cost.len() as f64;
    let std = var.sqrt();
    if std < 1e-300 {
        return Tensor::zeros(cost.shape());
    }
    cost.map(|v| (v - mean) / std)
}

fn solve_direct(
    cost: &Tensor,
    r: &[f64],
    c: &[f64],
    cfg: &SinkhornConfig,
) -> Option<TransportPlan> {
    let (n, m) = (cost.rows(), cost.cols());
    let kernel: Vec<f64> = cost.data().iter().map(|&v| (-v / cfg.epsilon).exp()).collect();
    if kernel.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; m];
    let mut kv = mat_vec(&kernel, n, m, &v);
    let mut iterations = 0;
    let (mut row_res, mut col_res) = (f64::INFINITY, f64::INFINITY);
    while iterations < cfg.max_iters {
        iterations += 1;
        for i in 0..n {
            u[i] = r[i] / kv[i];
        }
        let ktu = mat_t_vec(&kernel, n, m, &u);
        for j in 0..m {
            v[j] = c[j] / ktu[j];
        }
        if u.iter().chain(v.iter()).any(|x| !x.is_finite()) {
            return None;
        }
        kv = mat_vec(&kernel, n, m, &v);
        row_res = (0..n).map(|i| (u[i] * kv[i] - r[i]).abs()).fold(0.0, f64::max);
        col_res = (0..m).map(|j| (v[j] * ktu[j] - c[j]).abs()).fold(0.0, f64::max);
        if row_res <= cfg.tol && col_res <= cfg.tol {
            break;
        }
    }
    let mut plan = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            plan[i * m + j] = u[i] * kernel[i * m + j] * v[j];
        }
    }
    let plan = Tensor::new(vec![n, m], plan).expect("plan shape");
    if !plan.all_finite() {
        return None;
    }
    Some(TransportPlan {
        plan,
        row_marginal: r.to_vec(),
        col_marginal: c.to_vec(),
        row_residual: row_res,
        col_residual: col_res,
        iterations,
        converged: row_res <= cfg.tol && col_res <= cfg.tol,
    })
}

fn solve_log(cost: &Tensor, r: &[f64], c: &[f64], cfg: &SinkhornConfig) -> TransportPlan {
    let (n, m) = (cost.rows(), cost.cols());
    let eps = cfg.epsilon;
    let log_r: Vec<f64> = r.iter().map(|&x| x.ln()).collect();
    let log_c: Vec<f64> = c.iter().map(|&x| x.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let cd = cost.data();
    let mut iterations = 0;
    let (mut row_res, mut col_res) = (f64::INFINITY, f64::INFINITY);
    let mut plan = vec![0.0; n * m];
    while iterations < cfg.max_iters {
        iterations += 1;
        for i in 0..n {
            let row = &cd[i * m..(i + 1) * m];
            let lse = log_sum_exp((0..m).map(|j| (g[j] - row[j]) / eps));
            f[i] = eps * (log_r[i] - lse);
        }
        for j in 0..m {
            let lse = log_sum_exp((0..n).map(|i| (f[i] - cd[i * m + j]) / eps));
            g[j] = eps * (log_c[j] - lse);
        }
        for i in 0..n {
            for j in 0..m {
                plan[i * m + j] = ((f[i] + g[j] - cd[i * m + j]) / eps).exp();
            }
        }
        row_res = 0.0;
        col_res = 0.0;
        for i in 0..n {
            let s: f64 = plan[i * m..(i + 1) * m].iter().sum();
            row_res = row_res.max((s - r[i]).abs());
        }
        for j in 0..m {
            let s: f64 = (0..n).map(|i| plan[i * m + j]).sum();
            col_res = col_res.max((s - c[j]).abs());
        }
        if row_res <= cfg.tol && col_res <= cfg.tol {
            break;
        }
    }
    TransportPlan {
        plan: Tensor::new(vec![n, m], plan).expect("plan shape"),
        row_marginal: r.to_vec(),
        col_marginal: c.to_vec(),
        row_residual: row_res,
        col_residual: col_res,
        iterations,
        converged: row_res <= cfg.tol && col_res <= cfg.tol,
    }
}

fn mat_vec(k: &[f64], n: usize, m: usize, v: &[f64]) -> Vec<f64> {
    (0..n)
        .map(|i| k[i * m..(i + 1) * m].iter().zip(v.iter()).map(|(&a, &b)| a * b).sum())
        .collect()
}

fn mat_t_vec(k: &[f64], n: usize, m: usize, u: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m];
    for i in 0..n {
        let row = &k[i * m..(i + 1) * m];
        let ui = u[i];
        for (o, &kij) in out.iter_mut().zip(row.iter()) {
            *o += ui * kij;
        }
    }
    out
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let mx = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return mx;
    }
    let s: f64 = values.map(|v| (v - mx).exp()).sum();
    mx + s.ln()
}
