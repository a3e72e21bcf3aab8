//! Loss functions with hand-derived gradients. All reductions are means
//! over elements.

use crate::error::{Error, Result};
use crate::linalg::{dot, norm};

pub const DEFAULT_HUBER_DELTA: f64 = 1.0;
pub const DEFAULT_NCE_TEMPERATURE: f64 = 0.05;

fn same_len(context: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::dims(context, a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::InvalidArgument(format!("{context}: empty tensor")));
    }
    Ok(())
}

pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    same_len("mse_loss", pred, target)?;
    let s: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(s / pred.len() as f64)
}

/// MSE and its gradient with respect to `pred`.
pub fn mse_loss_grad(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    let value = mse_loss(pred, target)?;
    let scale = 2.0 / pred.len() as f64;
    Ok((
        value,
        pred.iter()
            .zip(target)
            .map(|(p, t)| scale * (p - t))
            .collect(),
    ))
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "huber delta must be positive, got {delta}"
        )));
    }
    Ok(())
}

#[inline]
fn huber_elem(e: f64, delta: f64) -> f64 {
    let a = e.abs();
    if a <= delta {
        0.5 * e * e
    } else {
        delta * (a - 0.5 * delta)
    }
}

pub fn huber_loss(pred: &[f64], target: &[f64], delta: f64) -> Result<f64> {
    same_len("huber_loss", pred, target)?;
    check_delta(delta)?;
    let s: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| huber_elem(p - t, delta))
        .sum();
    Ok(s / pred.len() as f64)
}

pub fn huber_loss_grad(pred: &[f64], target: &[f64], delta: f64) -> Result<(f64, Vec<f64>)> {
    let value = huber_loss(pred, target, delta)?;
    let n = pred.len() as f64;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t).clamp(-delta, delta) / n)
        .collect();
    Ok((value, grad))
}

/// Gradients of the contrastive loss with respect to both batches.
#[derive(Debug, Clone)]
pub struct InfoNceGrad {
    pub value: f64,
    pub pred: Vec<f64>,
    pub target: Vec<f64>,
}

const NCE_BLOCK: usize = 2048;

struct NceForward {
    b: usize,
    d: usize,
    pred_unit: Vec<f64>,
    target_unit: Vec<f64>,
    pred_norm: Vec<f64>,
    target_norm: Vec<f64>,
    /// Row-major `B × B` logits `cos(pred_i, target_j) / τ`.
    logits: Vec<f64>,
}

fn unit_rows(x: &[f64], b: usize, d: usize, which: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut unit = x.to_vec();
    let mut norms = Vec::with_capacity(b);
    for i in 0..b {
        let row = &mut unit[i * d..(i + 1) * d];
        let n = norm(row);
        if !(n > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "info_nce: {which} row {i} has zero norm"
            )));
        }
        row.iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok((unit, norms))
}

fn nce_forward(pred: &[f64], target: &[f64], batch: usize, temperature: f64) -> Result<NceForward> {
    same_len("info_nce_loss", pred, target)?;
    if batch == 0 || pred.len() % batch != 0 {
        return Err(Error::dims("info_nce batch", batch, pred.len()));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "info_nce temperature must be positive, got {temperature}"
        )));
    }
    let d = pred.len() / batch;
    let (pred_unit, pred_norm) = unit_rows(pred, batch, d, "pred")?;
    let (target_unit, target_norm) = unit_rows(target, batch, d, "target")?;
    // blocked over columns so wide rows stay in cache across the B² pairs
    let mut logits = vec![0.0; batch * batch];
    for lo in (0..d).step_by(NCE_BLOCK) {
        let hi = (lo + NCE_BLOCK).min(d);
        for i in 0..batch {
            for j in 0..batch {
                logits[i * batch + j] += dot(
                    &pred_unit[i * d + lo..i * d + hi],
                    &target_unit[j * d + lo..j * d + hi],
                );
            }
        }
    }
    logits.iter_mut().for_each(|l| *l /= temperature);
    Ok(NceForward {
        b: batch,
        d,
        pred_unit,
        target_unit,
        pred_norm,
        target_norm,
        logits,
    })
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Symmetric InfoNCE over a batch of `batch` row pairs stored row-major in
/// `pred` and `target`. Matching rows are positives; the loss averages the
/// pred→target and target→pred cross-entropies.
pub fn info_nce_loss(pred: &[f64], target: &[f64], batch: usize, temperature: f64) -> Result<f64> {
    let f = nce_forward(pred, target, batch, temperature)?;
    Ok(nce_value(&f))
}

fn nce_value(f: &NceForward) -> f64 {
    let b = f.b;
    let mut rows = 0.0;
    let mut cols = 0.0;
    for i in 0..b {
        let diag = f.logits[i * b + i];
        rows += log_sum_exp((0..b).map(|j| f.logits[i * b + j])) - diag;
        cols += log_sum_exp((0..b).map(|j| f.logits[j * b + i])) - diag;
    }
    0.5 * (rows + cols) / b as f64
}

pub fn info_nce_loss_grad(
    pred: &[f64],
    target: &[f64],
    batch: usize,
    temperature: f64,
) -> Result<InfoNceGrad> {
    let f = nce_forward(pred, target, batch, temperature)?;
    Ok(nce_grad(&f, temperature, true))
}

/// Loss value and gradient with respect to `pred` only.
pub fn info_nce_loss_grad_pred(
    pred: &[f64],
    target: &[f64],
    batch: usize,
    temperature: f64,
) -> Result<(f64, Vec<f64>)> {
    let f = nce_forward(pred, target, batch, temperature)?;
    let g = nce_grad(&f, temperature, false);
    Ok((g.value, g.pred))
}

fn nce_grad(f: &NceForward, temperature: f64, want_target: bool) -> InfoNceGrad {
    let value = nce_value(f);
    let (b, d) = (f.b, f.d);

    // dL/dlogits
    let mut g = vec![0.0; b * b];
    let half_inv_b = 0.5 / b as f64;
    for i in 0..b {
        let lse = log_sum_exp((0..b).map(|j| f.logits[i * b + j]));
        for j in 0..b {
            g[i * b + j] += half_inv_b * (f.logits[i * b + j] - lse).exp();
        }
        g[i * b + i] -= half_inv_b;
    }
    for j in 0..b {
        let lse = log_sum_exp((0..b).map(|i| f.logits[i * b + j]));
        for i in 0..b {
            g[i * b + j] += half_inv_b * (f.logits[i * b + j] - lse).exp();
        }
        g[j * b + j] -= half_inv_b;
    }

    let mut g_pu = vec![0.0; b * d];
    let mut g_tu = if want_target {
        vec![0.0; b * d]
    } else {
        Vec::new()
    };
    for lo in (0..d).step_by(NCE_BLOCK) {
        let hi = (lo + NCE_BLOCK).min(d);
        for i in 0..b {
            for j in 0..b {
                let gij = g[i * b + j] / temperature;
                if gij == 0.0 {
                    continue;
                }
                crate::linalg::axpy(
                    gij,
                    &f.target_unit[j * d + lo..j * d + hi],
                    &mut g_pu[i * d + lo..i * d + hi],
                );
                if want_target {
                    crate::linalg::axpy(
                        gij,
                        &f.pred_unit[i * d + lo..i * d + hi],
                        &mut g_tu[j * d + lo..j * d + hi],
                    );
                }
            }
        }
    }
    let through_norm = |g_unit: &mut [f64], unit: &[f64], norms: &[f64]| {
        for i in 0..b {
            let gu = &mut g_unit[i * d..(i + 1) * d];
            let u = &unit[i * d..(i + 1) * d];
            let proj = dot(gu, u);
            for (gv, uv) in gu.iter_mut().zip(u) {
                *gv = (*gv - uv * proj) / norms[i];
            }
        }
    };
    through_norm(&mut g_pu, &f.pred_unit, &f.pred_norm);
    if want_target {
        through_norm(&mut g_tu, &f.target_unit, &f.target_norm);
    }
    InfoNceGrad {
        value,
        pred: g_pu,
        target: g_tu,
    }
}
