//! The distillation losses with analytic gradients.
//!
//! Every loss works on a `rows × classes` logit matrix with a row mask: one
//! row per sample for sentence tasks, one row per position for slot filling
//! (only real, non-CLS tokens are active). Values are averaged over active
//! rows; per-teacher terms are summed over teachers.

use crate::error::{Error, Result};
use crate::teacher::TeacherSignals;
use crate::vocab::IGNORE_INDEX;

use super::triplet::TripletIndex;

/// Floor applied inside logarithms and norms.
pub const EPS: f64 = 1e-12;

/// A scalar loss and its gradient with respect to the student input it was given.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn floored_log_softmax(row: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let logp = crate::encoder::log_softmax(row);
    let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    let floor = EPS.ln();
    let floored: Vec<bool> = logp.iter().map(|&l| l < floor).collect();
    let logp = logp.into_iter().map(|l| l.max(floor)).collect();
    (logp, probs, floored)
}

fn active_count(mask: &[bool]) -> Result<usize> {
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::Invalid("no active positions to reduce over".into()));
    }
    Ok(n)
}

fn check_shapes(signals: &TeacherSignals, student_logits: &[f64], mask: &[bool]) -> Result<()> {
    let expect = signals.rows * signals.classes;
    if student_logits.len() != expect || mask.len() != signals.rows {
        return Err(Error::Shape(format!(
            "student logits ({}) / mask ({}) disagree with teacher signals ({} rows × {} classes)",
            student_logits.len(),
            mask.len(),
            signals.rows,
            signals.classes
        )));
    }
    Ok(())
}

/// Gradient of `Σ_c coef_c · log p_c` w.r.t. logits, honouring the log floor.
fn weighted_logp_grad(coef: &[f64], probs: &[f64], floored: &[bool], out: &mut [f64], scale: f64) {
    let mut total = 0.0;
    for c in 0..coef.len() {
        if !floored[c] {
            total += coef[c];
        }
    }
    for c in 0..coef.len() {
        let own = if floored[c] { 0.0 } else { coef[c] };
        out[c] += scale * (own - probs[c] * total);
    }
}

/// Mean over active rows of `KL(teacher_mean ‖ student)` on probability rows.
pub fn kl_teacher_mean(teacher_probs: &[Vec<f64>], student_probs: &[f64], classes: usize, mask: &[bool]) -> Result<f64> {
    if teacher_probs.is_empty() {
        return Err(Error::Invalid("no teachers".into()));
    }
    let count = active_count(mask)?;
    let n_t = teacher_probs.len() as f64;
    let mut sum = 0.0;
    for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for c in 0..classes {
            let pbar = teacher_probs.iter().map(|p| p[r * classes + c]).sum::<f64>() / n_t;
            if pbar > 0.0 {
                let ps = student_probs[r * classes + c].max(EPS);
                sum += pbar * (pbar.ln() - ps.ln());
            }
        }
    }
    Ok(sum / count as f64)
}

/// `KL(mean_j P_j ‖ softmax(student_logits))`, averaged over active rows.
pub fn loss_kd(signals: &TeacherSignals, student_logits: &[f64], mask: &[bool]) -> Result<LossValue> {
    check_shapes(signals, student_logits, mask)?;
    let k = signals.classes;
    let count = active_count(mask)? as f64;
    let n_t = signals.probs.len() as f64;
    let mut grad = vec![0.0; student_logits.len()];
    let mut value = 0.0;
    let mut pbar = vec![0.0; k];
    for r in (0..signals.rows).filter(|&r| mask[r]) {
        for (c, pb) in pbar.iter_mut().enumerate() {
            *pb = signals.probs.iter().map(|p| p[r * k + c]).sum::<f64>() / n_t;
        }
        let (logp, probs, floored) = floored_log_softmax(&student_logits[r * k..(r + 1) * k]);
        for c in 0..k {
            if pbar[c] > 0.0 {
                value += pbar[c] * (pbar[c].ln() - logp[c]);
            }
        }
        // d/dv of -Σ pbar log p
        weighted_logp_grad(&pbar, &probs, &floored, &mut grad[r * k..(r + 1) * k], -1.0 / count);
    }
    Ok(LossValue {
        value: value / count,
        grad,
    })
}

/// Mean cross-entropy against hard targets; rows with `IGNORE_INDEX` are skipped.
pub fn loss_sce(student_logits: &[f64], targets: &[i32], classes: usize) -> Result<LossValue> {
    if student_logits.len() != targets.len() * classes {
        return Err(Error::Shape(format!(
            "{} logits for {} targets × {classes} classes",
            student_logits.len(),
            targets.len()
        )));
    }
    let count = targets.iter().filter(|&&t| t != IGNORE_INDEX).count();
    if count == 0 {
        return Err(Error::Invalid("every target position is ignored".into()));
    }
    let count = count as f64;
    let mut grad = vec![0.0; student_logits.len()];
    let mut value = 0.0;
    let mut onehot = vec![0.0; classes];
    for (r, &t) in targets.iter().enumerate() {
        if t == IGNORE_INDEX {
            continue;
        }
        let t = usize::try_from(t)
            .ok()
            .filter(|&t| t < classes)
            .ok_or_else(|| Error::Invalid(format!("target {t} outside {classes} classes")))?;
        let (logp, probs, floored) = floored_log_softmax(&student_logits[r * classes..(r + 1) * classes]);
        value -= logp[t];
        onehot.fill(0.0);
        onehot[t] = 1.0;
        weighted_logp_grad(&onehot, &probs, &floored, &mut grad[r * classes..(r + 1) * classes], -1.0 / count);
    }
    Ok(LossValue {
        value: value / count,
        grad,
    })
}

/// Cosine similarity with the product of norms floored at [`EPS`].
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (na * nb).max(EPS)
}

/// `-Σ_j mean_rows cos(v_j, v_s)`.
pub fn loss_sim(signals: &TeacherSignals, student_logits: &[f64], mask: &[bool]) -> Result<LossValue> {
    check_shapes(signals, student_logits, mask)?;
    let k = signals.classes;
    let count = active_count(mask)? as f64;
    let mut grad = vec![0.0; student_logits.len()];
    let mut value = 0.0;
    for teacher in &signals.logits {
        for r in (0..signals.rows).filter(|&r| mask[r]) {
            let a = &teacher[r * k..(r + 1) * k];
            let b = &student_logits[r * k..(r + 1) * k];
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let denom = na * nb;
            let g = &mut grad[r * k..(r + 1) * k];
            if denom > EPS {
                let cos = dot / denom;
                value -= cos;
                for c in 0..k {
                    g[c] -= (a[c] / denom - cos * b[c] / (nb * nb)) / count;
                }
            } else {
                value -= dot / EPS;
                for c in 0..k {
                    g[c] -= a[c] / EPS / count;
                }
            }
        }
    }
    Ok(LossValue {
        value: value / count,
        grad,
    })
}

/// `Σ_j mean_rows CE(softmax(v_s), P_j)` with teacher probabilities as soft targets.
pub fn loss_tp(signals: &TeacherSignals, student_logits: &[f64], mask: &[bool]) -> Result<LossValue> {
    check_shapes(signals, student_logits, mask)?;
    let k = signals.classes;
    let count = active_count(mask)? as f64;
    let mut grad = vec![0.0; student_logits.len()];
    let mut value = 0.0;
    for r in (0..signals.rows).filter(|&r| mask[r]) {
        let (logp, probs, floored) = floored_log_softmax(&student_logits[r * k..(r + 1) * k]);
        for teacher in &signals.probs {
            let target = &teacher[r * k..(r + 1) * k];
            value -= target.iter().zip(&logp).map(|(p, l)| p * l).sum::<f64>();
            weighted_logp_grad(target, &probs, &floored, &mut grad[r * k..(r + 1) * k], -1.0 / count);
        }
    }
    Ok(LossValue {
        value: value / count,
        grad,
    })
}

fn p_norm(x: &[f64], p: u32) -> f64 {
    if p == 2 {
        x.iter().map(|v| v * v).sum::<f64>().sqrt()
    } else {
        x.iter().map(|v| v.abs().powi(p as i32)).sum::<f64>().powf(1.0 / p as f64)
    }
}

/// Gradient of `‖x‖_p` w.r.t. `x`, scaled and accumulated into `out`.
fn p_norm_grad(x: &[f64], norm: f64, p: u32, scale: f64, out: &mut [f64]) {
    let denom = norm.max(EPS).powi(p as i32 - 1);
    for (o, &v) in out.iter_mut().zip(x) {
        let g = if p == 1 {
            v.signum()
        } else {
            v.signum() * v.abs().powi(p as i32 - 1) / denom
        };
        *o += scale * g;
    }
}

/// Triplet margin loss over student pooled states, averaged over triplets.
///
/// `pooled` is `n × dim`; the gradient has the same shape.
pub fn loss_rel(pooled: &[f64], dim: usize, triplets: &[TripletIndex], margin: f64, p: u32) -> Result<LossValue> {
    if dim == 0 || pooled.len() % dim != 0 {
        return Err(Error::Shape(format!("pooled buffer of {} values is not rows × {dim}", pooled.len())));
    }
    if p == 0 {
        return Err(Error::Invalid("norm order must be >= 1".into()));
    }
    if triplets.is_empty() {
        return Err(Error::Invalid("no triplets".into()));
    }
    let n = pooled.len() / dim;
    let row = |i: usize| &pooled[i * dim..(i + 1) * dim];
    let count = triplets.len() as f64;
    let mut grad = vec![0.0; pooled.len()];
    let mut value = 0.0;
    let mut ap = vec![0.0; dim];
    let mut an = vec![0.0; dim];
    for t in triplets {
        if t.anchor >= n || t.positive >= n || t.negative >= n {
            return Err(Error::Shape(format!("triplet {t:?} outside batch of {n}")));
        }
        let (a, pos, neg) = (row(t.anchor), row(t.positive), row(t.negative));
        for c in 0..dim {
            ap[c] = a[c] - pos[c];
            an[c] = a[c] - neg[c];
        }
        let d_ap = p_norm(&ap, p);
        let d_an = p_norm(&an, p);
        let z = d_ap - d_an + margin;
        if z > 0.0 {
            value += z;
            let s = 1.0 / count;
            p_norm_grad(&ap, d_ap, p, s, &mut grad[t.anchor * dim..(t.anchor + 1) * dim]);
            p_norm_grad(&ap, d_ap, p, -s, &mut grad[t.positive * dim..(t.positive + 1) * dim]);
            p_norm_grad(&an, d_an, p, -s, &mut grad[t.anchor * dim..(t.anchor + 1) * dim]);
            p_norm_grad(&an, d_an, p, s, &mut grad[t.negative * dim..(t.negative + 1) * dim]);
        }
    }
    Ok(LossValue {
        value: value / count,
        grad,
    })
}
