//! Objective terms and their analytic gradients.
//!
//! Every function here is a pure function of plain values. Gradients are
//! taken with respect to student-side inputs only; teacher outputs are
//! constants.

use ndarray::Array2;

use crate::autograd::Mat;
use crate::config::{AblationConfig, LossWeights};

const COS_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperatures {
    pub teacher: f64,
    pub student: f64,
}

fn log_softmax(x: &[f64], tau: f64) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / tau;
    let lse = x.iter().map(|v| (v / tau - max).exp()).sum::<f64>().ln() + max;
    x.iter().map(|v| v / tau - lse).collect()
}

/// Sharpened, centered teacher distribution `softmax((y' − c) / τ_t)`.
pub fn teacher_distribution(teacher: &[f64], center: &[f64], tau_t: f64) -> Vec<f64> {
    assert_eq!(teacher.len(), center.len());
    let shifted: Vec<f64> = teacher.iter().zip(center).map(|(y, c)| y - c).collect();
    log_softmax(&shifted, tau_t).into_iter().map(f64::exp).collect()
}

/// Distillation cross-entropy between teacher logits `y'` and student
/// logits `y`.
pub fn cross_entropy_h(teacher: &[f64], student: &[f64], temps: Temperatures, center: &[f64]) -> f64 {
    cross_entropy_h_grad(teacher, student, temps, center).0
}

/// Value of [`cross_entropy_h`] and its gradient with respect to `student`.
pub fn cross_entropy_h_grad(
    teacher: &[f64],
    student: &[f64],
    temps: Temperatures,
    center: &[f64],
) -> (f64, Vec<f64>) {
    assert_eq!(teacher.len(), student.len());
    let p = teacher_distribution(teacher, center, temps.teacher);
    let log_q = log_softmax(student, temps.student);
    let value = -p.iter().zip(&log_q).map(|(a, b)| a * b).sum::<f64>();
    let grad = p
        .iter()
        .zip(&log_q)
        .map(|(pi, lq)| (lq.exp() - pi) / temps.student)
        .collect();
    (value, grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtoLoss {
    pub value: f64,
    pub global: f64,
    pub compositional: f64,
    pub grad_global: Vec<f64>,
    /// Empty when the compositional term is disabled.
    pub grad_agg: Vec<f64>,
}

/// `H(f', f) + H(f', f_agg)`; pass `None` for `f_agg` to drop the second
/// term.
pub fn proto_loss(
    teacher: &[f64],
    student: &[f64],
    aggregated: Option<&[f64]>,
    temps: Temperatures,
    center: &[f64],
) -> ProtoLoss {
    let (global, grad_global) = cross_entropy_h_grad(teacher, student, temps, center);
    let (compositional, grad_agg) = match aggregated {
        Some(agg) => cross_entropy_h_grad(teacher, agg, temps, center),
        None => (0.0, Vec::new()),
    };
    ProtoLoss {
        value: global + compositional,
        global,
        compositional,
        grad_global,
        grad_agg,
    }
}

/// One frame's prediction, prior and validity mask, all `H × W`.
#[derive(Debug, Clone, Copy)]
pub struct DepthFrame<'a> {
    pub pred: &'a Array2<f64>,
    pub prior: &'a Array2<f64>,
    pub valid: &'a Array2<bool>,
}

/// `(1/Ω)Σd² − β((1/Ω)Σd)²` over valid pixels, `d = D̂ − D`.
pub fn scale_invariant_loss(frame: DepthFrame<'_>, beta: f64) -> f64 {
    scale_invariant_loss_grad(frame, beta).0
}

pub fn scale_invariant_loss_grad(frame: DepthFrame<'_>, beta: f64) -> (f64, Array2<f64>) {
    let DepthFrame { pred, prior, valid } = frame;
    assert_eq!(pred.dim(), prior.dim());
    assert_eq!(pred.dim(), valid.dim());
    let mut grad = Array2::zeros(pred.dim());
    let omega = valid.iter().filter(|&&v| v).count();
    if omega == 0 {
        log::warn!("depth frame has no valid pixels; scale-invariant term is 0");
        return (0.0, grad);
    }
    let n = omega as f64;
    let diffs = || {
        pred.iter()
            .zip(prior.iter())
            .zip(valid.iter())
            .filter(|(_, &v)| v)
            .map(|((p, t), _)| p - t)
    };
    let mean = diffs().sum::<f64>() / n;
    // Two-pass form: mean(d²) − β·mean(d)² = var(d) + (1−β)·mean(d)².
    let var = diffs().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
    let value = var + (1.0 - beta) * mean * mean;
    ndarray::Zip::from(&mut grad)
        .and(pred)
        .and(prior)
        .and(valid)
        .for_each(|g, &p, &t, &v| {
            if v {
                *g = 2.0 * (p - t) / n - 2.0 * beta * mean / n;
            }
        });
    (value, grad)
}

/// MAE between forward differences of prediction and prior, summed over
/// the horizontal and vertical directions. A difference counts only when
/// both of its pixels are valid.
pub fn gradient_loss(frame: DepthFrame<'_>) -> f64 {
    gradient_loss_grad(frame).0
}

pub fn gradient_loss_grad(frame: DepthFrame<'_>) -> (f64, Array2<f64>) {
    let DepthFrame { pred, prior, valid } = frame;
    let (h, w) = pred.dim();
    let mut grad = Array2::zeros((h, w));
    let mut value = 0.0;
    for (dy, dx) in [(0usize, 1usize), (1, 0)] {
        let mut residuals = Vec::new();
        for i in 0..h.saturating_sub(dy) {
            for j in 0..w.saturating_sub(dx) {
                let (i2, j2) = (i + dy, j + dx);
                if valid[[i, j]] && valid[[i2, j2]] {
                    let r = (pred[[i2, j2]] - pred[[i, j]]) - (prior[[i2, j2]] - prior[[i, j]]);
                    residuals.push((i, j, r));
                }
            }
        }
        if residuals.is_empty() {
            continue;
        }
        let n = residuals.len() as f64;
        value += residuals.iter().map(|(_, _, r)| r.abs()).sum::<f64>() / n;
        for (i, j, r) in residuals {
            let s = if r > 0.0 {
                1.0
            } else if r < 0.0 {
                -1.0
            } else {
                0.0
            };
            grad[[i + dy, j + dx]] += s / n;
            grad[[i, j]] -= s / n;
        }
    }
    (value, grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthLoss {
    pub value: f64,
    pub l_si: f64,
    pub l_grad: f64,
    /// Per-frame gradient of `value` with respect to each prediction.
    pub grads: Vec<Array2<f64>>,
}

/// `L_si + λ_grad·L_grad`, averaged over frames.
pub fn depth_loss(frames: &[DepthFrame<'_>], beta: f64, lambda_grad: f64) -> DepthLoss {
    if frames.is_empty() {
        return DepthLoss {
            value: 0.0,
            l_si: 0.0,
            l_grad: 0.0,
            grads: Vec::new(),
        };
    }
    let n = frames.len() as f64;
    let (mut l_si, mut l_grad) = (0.0, 0.0);
    let mut grads = Vec::with_capacity(frames.len());
    for &frame in frames {
        let (si, g_si) = scale_invariant_loss_grad(frame, beta);
        let (gr, g_gr) = gradient_loss_grad(frame);
        l_si += si / n;
        l_grad += gr / n;
        grads.push((g_si + &(g_gr * lambda_grad)) / n);
    }
    DepthLoss {
        value: l_si + lambda_grad * l_grad,
        l_si,
        l_grad,
        grads,
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (norm(a).max(COS_EPS) * norm(b).max(COS_EPS))
}

/// `M_n = [cos(z'^t_n, z'^{t'}_n) > λ]` for each proto-object row.
pub fn temporal_filter(teacher_t: &Mat, teacher_tp: &Mat, lambda: f64) -> Vec<bool> {
    assert_eq!(teacher_t.dim(), teacher_tp.dim());
    teacher_t
        .rows()
        .into_iter()
        .zip(teacher_tp.rows())
        .map(|(a, b)| {
            cosine(a.as_slice().expect("row"), b.as_slice().expect("row")) > lambda
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairLoss {
    pub value: f64,
    /// Gradient with respect to the (unnormalized) student rows.
    pub grad: Mat,
    pub valid_count: usize,
}

fn normalized_rows(m: &Mat) -> (Mat, Vec<f64>) {
    let mut out = m.as_standard_layout().into_owned();
    let mut norms = Vec::with_capacity(m.nrows());
    for mut row in out.rows_mut() {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        let d = n.max(COS_EPS);
        row.mapv_inplace(|x| x / d);
        norms.push(n);
    }
    (out, norms)
}

/// Filtered InfoNCE between student features at `t'` (queries) and teacher
/// features at `t` (keys). Row `n` of each matrix is proto-object `n`; the
/// positive for query `n` is key `n`, every other key is a negative.
///
/// Returns `None` when no proto-object passes the filter.
pub fn temporal_pair_loss(student_tp: &Mat, teacher_t: &Mat, valid: &[bool], alpha: f64) -> Option<PairLoss> {
    let k = teacher_t.nrows();
    assert_eq!(student_tp.dim(), teacher_t.dim());
    assert_eq!(valid.len(), k);
    let count = valid.iter().filter(|&&v| v).count();
    if count == 0 {
        return None;
    }
    let (u, unorms) = normalized_rows(student_tp);
    let (v, _) = normalized_rows(teacher_t);
    let sims = u.dot(&v.t());
    let mut value = 0.0;
    let mut grad = Mat::zeros(student_tp.dim());
    let scale = 1.0 / count as f64;
    for n in (0..k).filter(|&n| valid[n]) {
        let logits: Vec<f64> = sims.row(n).iter().map(|s| s / alpha).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
        value += (lse - logits[n]) * scale;

        // d/du_n of (lse − s_nn/α) = (Σ_j p_j v_j − v_n)/α
        let mut du = v.row(n).mapv(|x| -x);
        for (j, l) in logits.iter().enumerate() {
            du.scaled_add((l - lse).exp(), &v.row(j));
        }
        du.mapv_inplace(|x| x * scale / alpha);
        // Back through u = z/‖z‖.
        let un = u.row(n);
        let radial: f64 = du.iter().zip(un.iter()).map(|(a, b)| a * b).sum();
        let zn = unorms[n].max(COS_EPS);
        let mut row = grad.row_mut(n);
        for ((g, d), uu) in row.iter_mut().zip(du.iter()).zip(un.iter()) {
            *g = (d - uu * radial) / zn;
        }
    }
    Some(PairLoss {
        value,
        grad,
        valid_count: count,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalLoss {
    pub value: f64,
    pub n_valid_pairs: usize,
    /// `((t, t'), |𝒫|)` for every candidate pair, zero-based frame indices.
    pub pair_counts: Vec<((usize, usize), usize)>,
    /// Gradient with respect to each frame's student features.
    pub grads: Vec<Mat>,
}

/// Candidate pairs `(t, t + w)` with `1 ≤ w ≤ window` inside the clip.
pub fn temporal_pairs(frames: usize, window: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for t in 0..frames {
        for w in 1..=window {
            if t + w < frames {
                pairs.push((t, t + w));
            }
        }
    }
    pairs
}

/// Mean of [`temporal_pair_loss`] over every pair whose filter leaves at
/// least one proto-object.
///
/// `student[t]` and `teacher[t]` hold frame `t`'s `K × D₂` bottleneck
/// features.
pub fn temporal_loss(student: &[Mat], teacher: &[Mat], window: usize, lambda: f64, alpha: f64) -> TemporalLoss {
    assert_eq!(student.len(), teacher.len());
    let mut grads: Vec<Mat> = student.iter().map(|s| Mat::zeros(s.dim())).collect();
    let mut pair_counts = Vec::new();
    let mut accepted = Vec::new();
    for (t, tp) in temporal_pairs(student.len(), window) {
        let valid = temporal_filter(&teacher[t], &teacher[tp], lambda);
        let loss = temporal_pair_loss(&student[tp], &teacher[t], &valid, alpha);
        pair_counts.push(((t, tp), loss.as_ref().map_or(0, |l| l.valid_count)));
        if let Some(loss) = loss {
            accepted.push((tp, loss));
        }
    }
    let n_valid_pairs = accepted.len();
    let mut value = 0.0;
    if n_valid_pairs > 0 {
        let scale = 1.0 / n_valid_pairs as f64;
        for (tp, loss) in accepted {
            value += loss.value * scale;
            grads[tp].scaled_add(scale, &loss.grad);
        }
    }
    TemporalLoss {
        value,
        n_valid_pairs,
        pair_counts,
        grads,
    }
}

/// Loss weights after applying the depth and temporal ablation switches.
/// The proto-object switch acts inside `L_proto` instead (it drops the
/// compositional term, leaving the global distillation term).
pub fn effective_weights(weights: &LossWeights, ablation: &AblationConfig) -> LossWeights {
    LossWeights {
        gamma_p: weights.gamma_p,
        gamma_d: if ablation.enable_d { weights.gamma_d } else { 0.0 },
        gamma_t: if ablation.enable_t { weights.gamma_t } else { 0.0 },
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossBundle {
    pub l_proto: f64,
    pub l_depth: f64,
    pub l_si: f64,
    pub l_grad: f64,
    pub l_temp: f64,
    pub l_total: f64,
    pub n_valid_pairs: usize,
    /// `|𝒫|` for every candidate temporal pair in the batch.
    pub valid_proto_counts: Vec<usize>,
}

impl LossBundle {
    pub fn is_finite(&self) -> bool {
        [self.l_proto, self.l_depth, self.l_si, self.l_grad, self.l_temp, self.l_total]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn describe(&self) -> String {
        format!(
            "l_proto={} l_depth={} (l_si={} l_grad={}) l_temp={} l_total={}",
            self.l_proto, self.l_depth, self.l_si, self.l_grad, self.l_temp, self.l_total
        )
    }
}

/// `γ_P·L_proto + γ_D·L_depth + γ_T·L_temp` with ablation switches applied.
pub fn total_loss(l_proto: f64, l_depth: f64, l_temp: f64, weights: &LossWeights, ablation: &AblationConfig) -> f64 {
    let w = effective_weights(weights, ablation);
    w.gamma_p * l_proto + w.gamma_d * l_depth + w.gamma_t * l_temp
}

/// Running mean of teacher logits subtracted before sharpening.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterState {
    pub center: Vec<f64>,
    pub momentum: f64,
}

impl CenterState {
    pub fn new(dim: usize, momentum: f64) -> Self {
        Self {
            center: vec![0.0; dim],
            momentum,
        }
    }

    /// `c ← ρc + (1−ρ)·mean(batch)`.
    pub fn update<'a>(&mut self, batch: impl IntoIterator<Item = &'a [f64]>) {
        let mut sum = vec![0.0; self.center.len()];
        let mut n = 0usize;
        for row in batch {
            assert_eq!(row.len(), sum.len());
            for (s, v) in sum.iter_mut().zip(row) {
                *s += v;
            }
            n += 1;
        }
        if n == 0 {
            return;
        }
        let rho = self.momentum;
        for (c, s) in self.center.iter_mut().zip(sum) {
            *c = rho * *c + (1.0 - rho) * s / n as f64;
        }
    }
}
