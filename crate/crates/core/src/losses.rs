//! Loss kernels in f64 with analytic gradients.
//!
//! The contrastive loss takes raw (unnormalized) embeddings and normalizes
//! them itself; zero-norm rows are rejected rather than padded with an epsilon.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows of `z` scaled to unit L2 norm, plus the original norms.
pub fn l2_normalize_rows(z: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms = z.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if let Some(i) = norms.iter().position(|&n| !(n > 0.0 && n.is_finite())) {
        return Err(Error::Numeric(format!("embedding row {i} has zero or non-finite norm")));
    }
    let mut u = z.clone();
    for (mut row, &n) in u.rows_mut().into_iter().zip(norms.iter()) {
        row.mapv_inplace(|v| v / n);
    }
    Ok((u, norms))
}

pub fn cosine_similarity_matrix(z: &Array2<f64>) -> Result<Array2<f64>> {
    let (u, _) = l2_normalize_rows(z)?;
    let mut s = u.dot(&u.t());
    // Exact symmetry and unit diagonal regardless of rounding in the product.
    let n = s.nrows();
    for i in 0..n {
        s[[i, i]] = 1.0;
        for j in (i + 1)..n {
            let v = s[[i, j]];
            s[[j, i]] = v;
        }
    }
    Ok(s)
}

/// Embeddings with their disc-group membership and a temperature.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch {
    pub z: Array2<f64>,
    pub group_ids: Vec<usize>,
    pub tau: f64,
}

impl EmbeddingBatch {
    pub fn new(z: Array2<f64>, group_ids: Vec<usize>, tau: f64) -> Result<Self> {
        if z.nrows() < 2 {
            return Err(Error::Data(format!(
                "contrastive batch needs at least 2 rows, got {}",
                z.nrows()
            )));
        }
        if group_ids.len() != z.nrows() {
            return Err(Error::Data(format!(
                "{} group ids for {} embeddings",
                group_ids.len(),
                z.nrows()
            )));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {tau}")));
        }
        Ok(EmbeddingBatch { z, group_ids, tau })
    }

    pub fn len(&self) -> usize {
        self.z.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.nrows() == 0
    }

    fn positives(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let g = self.group_ids[i];
        (0..self.len()).filter(move |&k| k != i && self.group_ids[k] == g)
    }

    fn anchor_count(&self) -> Result<usize> {
        let m = (0..self.len()).filter(|&i| self.positives(i).next().is_some()).count();
        if m == 0 {
            return Err(Error::Data(
                "every group is a singleton; contrastive loss undefined".into(),
            ));
        }
        Ok(m)
    }
}

/// Multi-positive NT-Xent evaluated literally: per positive, the log of an
/// exponentiated similarity over the sum of exponentials of every other row.
pub fn multi_positive_ntxent_direct(batch: &EmbeddingBatch) -> Result<f64> {
    let s = cosine_similarity_matrix(&batch.z)?;
    let m = batch.anchor_count()?;
    let n = batch.len();
    let mut total = 0.0;
    for i in 0..n {
        let pos: Vec<usize> = batch.positives(i).collect();
        if pos.is_empty() {
            continue;
        }
        let denom: f64 = (0..n).filter(|&k| k != i).map(|k| (s[[i, k]] / batch.tau).exp()).sum();
        let li: f64 = pos
            .iter()
            .map(|&p| ((s[[i, p]] / batch.tau).exp() / denom).ln())
            .sum::<f64>();
        total += -li / pos.len() as f64;
    }
    Ok(total / m as f64)
}

fn log_sum_exp(vals: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = vals.clone().fold(f64::NEG_INFINITY, f64::max);
    max + vals.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Multi-positive NT-Xent in stable log-sum-exp form:
/// `L_i = -mean_{p in P(i)} s_ip / tau + logsumexp_{k != i} s_ik / tau`,
/// averaged over anchors that have at least one positive.
pub fn multi_positive_ntxent(batch: &EmbeddingBatch) -> Result<f64> {
    Ok(ntxent_impl(batch, false)?.0)
}

/// Loss and its gradient with respect to the raw embeddings `batch.z`.
pub fn multi_positive_ntxent_with_grad(batch: &EmbeddingBatch) -> Result<(f64, Array2<f64>)> {
    let (loss, grad) = ntxent_impl(batch, true)?;
    Ok((loss, grad.expect("gradient requested")))
}

fn ntxent_impl(batch: &EmbeddingBatch, want_grad: bool) -> Result<(f64, Option<Array2<f64>>)> {
    let (u, norms) = l2_normalize_rows(&batch.z)?;
    let s = u.dot(&u.t());
    let m = batch.anchor_count()?;
    let n = batch.len();
    let tau = batch.tau;
    let mut total = 0.0;
    // coef[i, k] = dL / ds_ik
    let mut coef = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let pos: Vec<usize> = batch.positives(i).collect();
        if pos.is_empty() {
            continue;
        }
        let others = (0..n).filter(move |&k| k != i).map(|k| s[[i, k]] / tau);
        let lse = log_sum_exp(others);
        let pos_mean = pos.iter().map(|&p| s[[i, p]] / tau).sum::<f64>() / pos.len() as f64;
        total += lse - pos_mean;
        if want_grad {
            let scale = 1.0 / (m as f64 * tau);
            for k in (0..n).filter(|&k| k != i) {
                coef[[i, k]] += scale * (s[[i, k]] / tau - lse).exp();
            }
            for &p in &pos {
                coef[[i, p]] -= scale / pos.len() as f64;
            }
        }
    }
    let loss = total / m as f64;
    if !want_grad {
        return Ok((loss, None));
    }
    let sym = &coef + &coef.t();
    let gu = sym.dot(&u);
    let mut gz = gu.clone();
    for i in 0..n {
        let ui = u.row(i);
        let dot = ui.dot(&gu.row(i));
        for d in 0..u.ncols() {
            gz[[i, d]] = (gu[[i, d]] - ui[d] * dot) / norms[i];
        }
    }
    Ok((loss, Some(gz)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub alpha: [f64; 3],
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams {
            alpha: [0.8, 4.0, 5.0],
            gamma: 2.0,
        }
    }
}

impl FocalParams {
    pub fn validate(&self) -> Result<()> {
        if self.alpha.iter().any(|&a| !(a > 0.0 && a.is_finite())) || !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("invalid focal parameters {self:?}")));
        }
        Ok(())
    }
}

fn check_labels(labels: &[usize], n: usize, classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Data(format!("{} labels for {n} logit rows", labels.len())));
    }
    if n == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Data(format!("label {bad} outside 0..{classes}")));
    }
    Ok(())
}

/// Weighted focal loss `-alpha_y (1 - p_y)^gamma log p_y`, batch mean.
pub fn weighted_focal_loss(logits: &Array2<f64>, labels: &[usize], params: &FocalParams) -> Result<f64> {
    Ok(focal_impl(logits, labels, params, false)?.0)
}

pub fn weighted_focal_loss_with_grad(
    logits: &Array2<f64>,
    labels: &[usize],
    params: &FocalParams,
) -> Result<(f64, Array2<f64>)> {
    let (l, g) = focal_impl(logits, labels, params, true)?;
    Ok((l, g.expect("gradient requested")))
}

fn focal_impl(
    logits: &Array2<f64>,
    labels: &[usize],
    params: &FocalParams,
    want_grad: bool,
) -> Result<(f64, Option<Array2<f64>>)> {
    let (n, c) = logits.dim();
    if c != params.alpha.len() {
        return Err(Error::Data(format!(
            "expected {} logits per row, got {c}",
            params.alpha.len()
        )));
    }
    check_labels(labels, n, c)?;
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    let gamma = params.gamma;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Array2::<f64>::zeros((n, c)));
    for (i, row) in logits.rows().into_iter().enumerate() {
        let y = labels[i];
        let lse = log_sum_exp(row.iter().copied());
        let logp = row[y] - lse;
        let p = logp.exp();
        let one_minus = -logp.exp_m1();
        let alpha = params.alpha[y];
        let w = if gamma == 0.0 { 1.0 } else { one_minus.powf(gamma) };
        total += -alpha * w * logp;
        if let Some(g) = grad.as_mut() {
            // d/dz_j = -alpha [ (1-p)^g - g p (1-p)^(g-1) log p ] (delta_jy - p_j)
            let focus = if gamma == 0.0 || one_minus == 0.0 {
                0.0
            } else {
                gamma * p * one_minus.powf(gamma - 1.0) * logp
            };
            let common = -alpha * (w - focus) / n as f64;
            for j in 0..c {
                let pj = (row[j] - lse).exp();
                let delta = if j == y { 1.0 } else { 0.0 };
                g[[i, j]] = common * (delta - pj);
            }
        }
    }
    Ok((total / n as f64, grad))
}

/// Per-coordinate Smooth-L1, averaged over every coordinate.
pub fn smooth_l1(pred: &Array2<f64>, target: &Array2<f64>, beta: f64) -> Result<f64> {
    Ok(smooth_l1_with_grad(pred, target, beta)?.0)
}

pub fn smooth_l1_with_grad(pred: &Array2<f64>, target: &Array2<f64>, beta: f64) -> Result<(f64, Array2<f64>)> {
    if pred.dim() != target.dim() {
        return Err(Error::Data(format!(
            "prediction {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Data("empty regression batch".into()));
    }
    if !(beta > 0.0) {
        return Err(Error::Config(format!("smooth-l1 beta must be positive, got {beta}")));
    }
    let count = pred.len() as f64;
    let mut total = 0.0;
    let mut grad = Array2::zeros(pred.dim());
    for ((g, &p), &t) in grad.iter_mut().zip(pred.iter()).zip(target.iter()) {
        let d = p - t;
        if d.abs() < beta {
            total += 0.5 * d * d / beta;
            *g = d / beta / count;
        } else {
            total += d.abs() - 0.5 * beta;
            *g = d.signum() / count;
        }
    }
    Ok((total / count, grad))
}
