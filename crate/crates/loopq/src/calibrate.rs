//! Trajectory-aware distillation calibration.
//!
//! The full-precision model is the teacher. The loss matches the student to
//! the teacher's logits (KL over top-k teacher probabilities) and to its
//! whole loop trajectory: each loop-end state is pulled toward the teacher's
//! matching state and, with an adaptive weight, toward the teacher's final
//! state; transition adapters are trained against the teacher's next-loop
//! input. One optimizer updates transforms, scales, and adapters jointly, so
//! gradients from late loops flow back into parameters shared by every loop.

use std::collections::HashMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::looplm::{
    forward_with_hooks, LoopedModel, ModelVars, TokenBatch, Trajectory, TrajectoryVars,
};
use crate::methods::{AdapterVars, LoopqHooks, TransitionAdapterParams};
use crate::optim::{clip_global_norm, cosine_lr, Adam};
use crate::quant::{fp_forward, QuantScheme, SchemeBind};
use crate::tensor::Tensor;
use crate::{Error, Result};

fn default_lambda() -> f64 {
    0.1
}

fn default_kl_temperature() -> f64 {
    1.0
}

fn default_teacher_topk() -> usize {
    1000
}

fn default_mu_interval() -> usize {
    100
}

fn default_mu_eps() -> f64 {
    1e-8
}

fn default_true() -> bool {
    true
}

/// Weights and knobs of the calibration loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibLossConfig {
    /// Weight on the trajectory terms relative to the KL term.
    pub lambda: f64,
    pub kl_temperature: f64,
    /// Teacher logits kept per row for the KL target; clipped to vocab.
    pub teacher_topk: usize,
    /// Steps between refreshes of the adaptive final-state weights.
    pub mu_update_interval: usize,
    pub mu_eps: f64,
    /// When false, both hidden-state terms get weight 1 instead of
    /// (1 - mu_t) and mu_t.
    pub adaptive_mu: bool,
}

impl Default for CalibLossConfig {
    fn default() -> Self {
        Self {
            lambda: default_lambda(),
            kl_temperature: default_kl_temperature(),
            teacher_topk: default_teacher_topk(),
            mu_update_interval: default_mu_interval(),
            mu_eps: default_mu_eps(),
            adaptive_mu: default_true(),
        }
    }
}

impl CalibLossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be nonnegative".into()));
        }
        if self.kl_temperature <= 0.0 {
            return Err(Error::Config("kl_temperature must be positive".into()));
        }
        if self.teacher_topk == 0 {
            return Err(Error::Config("teacher_topk must be positive".into()));
        }
        if self.mu_update_interval == 0 {
            return Err(Error::Config("mu_update_interval must be at least 1".into()));
        }
        if self.mu_eps <= 0.0 {
            return Err(Error::Config("mu_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Optimizer settings for one calibration run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibOptConfig {
    pub steps: usize,
    /// Learning rate for activation scales.
    pub lr_scales: f64,
    /// Learning rate for transforms and adapters.
    pub lr_transforms: f64,
    pub grad_clip: f64,
}

impl Default for CalibOptConfig {
    fn default() -> Self {
        Self { steps: 100, lr_scales: 5e-3, lr_transforms: 1e-3, grad_clip: 1.0 }
    }
}

/// One evaluation of the loss, split into its weighted pieces. The identity
/// `total = kl + lambda * (hidden + final_target + transition)` holds by
/// construction.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub kl: f64,
    pub hidden: f64,
    pub final_target: f64,
    pub transition: f64,
}

impl LossTerms {
    pub fn decomposition_gap(&self, lambda: f64) -> f64 {
        (self.total - (self.kl + lambda * (self.hidden + self.final_target + self.transition)))
            .abs()
    }
}

/// Graph nodes of the loss pieces; backward through `total`.
pub struct LossVars<'g> {
    pub total: Var<'g>,
    pub kl: Var<'g>,
    pub hidden: Var<'g>,
    pub final_target: Var<'g>,
    pub transition: Var<'g>,
}

impl LossVars<'_> {
    pub fn terms(&self) -> LossTerms {
        let v = |x: Var| x.value().get(0, 0);
        LossTerms {
            total: v(self.total),
            kl: v(self.kl),
            hidden: v(self.hidden),
            final_target: v(self.final_target),
            transition: v(self.transition),
        }
    }
}

/// Teacher target for the KL term: per-row softmax at `temperature` over the
/// `topk` largest logits, zero elsewhere (an exact renormalized truncation).
pub fn topk_probs(logits: &Tensor, temperature: f64, topk: usize) -> Result<Tensor> {
    if temperature <= 0.0 {
        return Err(Error::Param("temperature must be positive".into()));
    }
    if topk == 0 {
        return Err(Error::Param("topk must be positive".into()));
    }
    let k = topk.min(logits.cols());
    let mut out = Tensor::zeros(logits.rows(), logits.cols());
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let mut idx: Vec<usize> = (0..row.len()).collect();
        idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
        let kept = &idx[..k];
        let m = kept.iter().map(|&j| row[j]).fold(f64::NEG_INFINITY, f64::max) / temperature;
        let mut z = 0.0;
        for &j in kept {
            z += (row[j] / temperature - m).exp();
        }
        for &j in kept {
            out.set(i, j, (row[j] / temperature - m).exp() / z);
        }
    }
    Ok(out)
}

fn check_traj_pair(fp: &Trajectory, q: &Trajectory) -> Result<usize> {
    let loops = fp.loop_ends.len();
    if q.loop_ends.len() != loops || q.entries.len() != fp.entries.len() {
        return Err(Error::Contract(format!(
            "trajectory length mismatch: teacher {} loops, student {}",
            loops,
            q.loop_ends.len()
        )));
    }
    for (a, b) in fp.loop_ends.iter().zip(&q.loop_ends) {
        if a.shape() != b.shape() {
            return Err(Error::Contract("trajectory state shape mismatch".into()));
        }
    }
    Ok(loops)
}

/// Adaptive trust weights for final-state guidance. For each loop t,
/// `mu_t = n_t / (n_t + sum_{t' >= t} m_t' + eps)` where n_t is the teacher's
/// own distance from its final state and m_t' the student's mismatch at loop
/// t'. When the student tracks the teacher, mu approaches 1 and the final
/// state dominates; when the student is far off, mu falls back toward the
/// per-loop targets. The last loop always gets 0 (its target IS the final
/// state).
pub fn compute_mu(fp: &Trajectory, q: &Trajectory, eps: f64) -> Result<Vec<f64>> {
    let loops = check_traj_pair(fp, q)?;
    let final_state = fp.final_state();
    let mismatch: Vec<f64> = fp
        .loop_ends
        .iter()
        .zip(&q.loop_ends)
        .map(|(a, b)| a.msd(b))
        .collect::<Result<Vec<_>>>()?;
    let mut suffix = vec![0.0; loops + 1];
    for t in (0..loops).rev() {
        suffix[t] = suffix[t + 1] + mismatch[t];
    }
    let mut mu = Vec::with_capacity(loops);
    for t in 0..loops {
        let n_t = final_state.msd(&fp.loop_ends[t])?;
        mu.push(n_t / (n_t + suffix[t] + eps));
    }
    Ok(mu)
}

/// Builds the calibration loss on the student's graph. The teacher is plain
/// tensors (already detached); the student's entries are post-adapter, so the
/// transition term reads them directly.
pub fn trajectory_loss<'g>(
    g: &'g Graph,
    teacher: &Trajectory,
    student: &TrajectoryVars<'g>,
    cfg: &CalibLossConfig,
    mu: &[f64],
) -> Result<LossVars<'g>> {
    cfg.validate()?;
    let loops = teacher.loop_ends.len();
    if student.loop_ends.len() != loops {
        return Err(Error::Contract(format!(
            "teacher has {loops} loops, student {}",
            student.loop_ends.len()
        )));
    }
    if cfg.adaptive_mu && mu.len() != loops {
        return Err(Error::Contract(format!("need {loops} mu weights, got {}", mu.len())));
    }
    if teacher.logits.shape() != student.logits.value().shape() {
        return Err(Error::Contract("teacher/student logits shape mismatch".into()));
    }
    let probs = topk_probs(&teacher.logits, cfg.kl_temperature, cfg.teacher_topk)?;
    let kl = student.logits.kl_vs_teacher_rows(&probs, cfg.kl_temperature)?;

    let msd_to = |sv: Var<'g>, target: &Tensor| -> Result<Var<'g>> {
        sv.sub(g.constant(target.clone())?)?.square()?.mean_all()
    };
    let zero = g.constant(Tensor::scalar(0.0))?;
    let final_state = teacher.final_state();
    let mut hidden = zero;
    let mut final_target = zero;
    for t in 0..loops {
        let (w_loop, w_final) = if cfg.adaptive_mu { (1.0 - mu[t], mu[t]) } else { (1.0, 1.0) };
        hidden = hidden.add(msd_to(student.loop_ends[t], &teacher.loop_ends[t])?.scale(w_loop)?)?;
        final_target = final_target.add(msd_to(student.loop_ends[t], final_state)?.scale(w_final)?)?;
    }
    let mut transition = zero;
    for t in 0..loops.saturating_sub(1) {
        transition = transition.add(msd_to(student.entries[t + 1], &teacher.entries[t + 1])?)?;
    }
    let total = kl.add(hidden.add(final_target)?.add(transition)?.scale(cfg.lambda)?)?;
    Ok(LossVars { total, kl, hidden, final_target, transition })
}

/// Student forward with trainable quantization and adapter parameters bound
/// onto `g`. Returns the trajectory plus (key, var) pairs in canonical order.
pub fn bind_student<'g>(
    g: &'g Graph,
    model: &LoopedModel,
    scheme: &QuantScheme,
    adapters: Option<&TransitionAdapterParams>,
    batch: &TokenBatch,
    trainable: bool,
) -> Result<(TrajectoryVars<'g>, Vec<(String, Var<'g>)>)> {
    let mv = ModelVars::bind(g, model, false)?;
    let mut bind = SchemeBind::new(g, scheme, trainable)?;
    let av = adapters.map(|p| AdapterVars::bind(g, p, trainable)).transpose()?;
    let mut params: Vec<(String, Var<'g>)> = bind.params().to_vec();
    if let Some(av) = &av {
        params.extend(av.params().iter().cloned());
    }
    let mut hooks = LoopqHooks { quant: &mut bind, adapters: av.as_ref(), extrapolate: false };
    let tv = forward_with_hooks(g, &mv, &model.config, batch, &mut hooks, false)?;
    Ok((tv, params))
}

/// Precomputes the teacher trajectory for every calibration batch.
pub fn teacher_trajectories(model: &LoopedModel, calib: &[TokenBatch]) -> Result<Vec<Trajectory>> {
    calib.iter().map(|b| fp_forward(model, b, false)).collect()
}

fn averaged_mu(
    model: &LoopedModel,
    scheme: &QuantScheme,
    adapters: Option<&TransitionAdapterParams>,
    calib: &[TokenBatch],
    teachers: &[Trajectory],
    eps: f64,
) -> Result<Vec<f64>> {
    let loops = model.config.loops;
    let mut acc = vec![0.0; loops];
    for (batch, teacher) in calib.iter().zip(teachers) {
        let g = Graph::new();
        let (tv, _) = bind_student(&g, model, scheme, adapters, batch, false)?;
        let mu = compute_mu(teacher, &tv.materialize(), eps)?;
        for (a, m) in acc.iter_mut().zip(&mu) {
            *a += m;
        }
    }
    let n = calib.len() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

fn mean_loss(
    model: &LoopedModel,
    scheme: &QuantScheme,
    adapters: Option<&TransitionAdapterParams>,
    calib: &[TokenBatch],
    teachers: &[Trajectory],
    cfg: &CalibLossConfig,
    mu: &[f64],
) -> Result<LossTerms> {
    let mut sum = LossTerms { total: 0.0, kl: 0.0, hidden: 0.0, final_target: 0.0, transition: 0.0 };
    for (batch, teacher) in calib.iter().zip(teachers) {
        let g = Graph::new();
        let (tv, _) = bind_student(&g, model, scheme, adapters, batch, false)?;
        let t = trajectory_loss(&g, teacher, &tv, cfg, mu)?.terms();
        sum.total += t.total;
        sum.kl += t.kl;
        sum.hidden += t.hidden;
        sum.final_target += t.final_target;
        sum.transition += t.transition;
    }
    let n = calib.len() as f64;
    Ok(LossTerms {
        total: sum.total / n,
        kl: sum.kl / n,
        hidden: sum.hidden / n,
        final_target: sum.final_target / n,
        transition: sum.transition / n,
    })
}

/// Per-step log line of a calibration run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CalibStep {
    pub step: usize,
    pub terms: LossTerms,
    pub grad_norm: f64,
    pub lr_scales: f64,
    pub lr_transforms: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CalibrationReport {
    /// Mean loss over the whole calibration set before the first update.
    pub initial: LossTerms,
    /// Mean loss over the whole calibration set after the last update.
    pub r#final: LossTerms,
    pub steps: Vec<CalibStep>,
    /// (step, weights) at every refresh, including the pre-run one.
    pub mu_history: Vec<(usize, Vec<f64>)>,
    pub final_mu: Vec<f64>,
    /// Frobenius norm of every trainable parameter after the run.
    pub param_norms: Vec<(String, f64)>,
    pub wall_clock_secs: f64,
}

/// Optimizes transforms, scales, and adapters in place against the frozen
/// full-precision teacher. Deterministic: batches visit round-robin, no RNG.
/// A non-finite loss aborts with the last finite step in the message.
pub fn run_calibration(
    model: &LoopedModel,
    scheme: &mut QuantScheme,
    mut adapters: Option<&mut TransitionAdapterParams>,
    calib: &[TokenBatch],
    loss_cfg: &CalibLossConfig,
    opt_cfg: &CalibOptConfig,
) -> Result<CalibrationReport> {
    loss_cfg.validate()?;
    if calib.is_empty() {
        return Err(Error::Contract("need at least one calibration batch".into()));
    }
    if opt_cfg.grad_clip <= 0.0 {
        return Err(Error::Config("grad_clip must be positive".into()));
    }
    let start = Instant::now();
    let teachers = teacher_trajectories(model, calib)?;
    let mut mu = averaged_mu(model, scheme, adapters.as_deref(), calib, &teachers, loss_cfg.mu_eps)?;
    let mut mu_history = vec![(0, mu.clone())];
    let initial =
        mean_loss(model, scheme, adapters.as_deref(), calib, &teachers, loss_cfg, &mu)?;

    let mut opt = Adam::new();
    let mut steps = Vec::with_capacity(opt_cfg.steps);
    let mut last_finite: Option<(usize, f64)> = None;
    for step in 0..opt_cfg.steps {
        if step > 0 && step % loss_cfg.mu_update_interval == 0 {
            mu = averaged_mu(model, scheme, adapters.as_deref(), calib, &teachers, loss_cfg.mu_eps)?;
            mu_history.push((step, mu.clone()));
        }
        let idx = step % calib.len();
        let step_result = (|| -> Result<(LossTerms, Vec<(String, Tensor)>)> {
            let g = Graph::new();
            let (tv, params) =
                bind_student(&g, model, scheme, adapters.as_deref(), &calib[idx], true)?;
            let loss = trajectory_loss(&g, &teachers[idx], &tv, loss_cfg, &mu)?;
            g.backward(loss.total)?;
            let grads = params
                .iter()
                .map(|(k, v)| (k.clone(), v.grad().unwrap_or_else(|| {
                    let val = v.value();
                    Tensor::zeros(val.rows(), val.cols())
                })))
                .collect();
            Ok((loss.terms(), grads))
        })();
        let (terms, grads) = step_result.map_err(|e| match e {
            Error::Numeric(msg) => {
                let at = match last_finite {
                    Some((s, l)) => format!("last finite loss {l:.6e} at step {s}"),
                    None => "no finite step completed".to_string(),
                };
                Error::Numeric(format!("calibration aborted at step {step}: {msg}; {at}"))
            }
            other => other,
        })?;
        last_finite = Some((step, terms.total));

        let mut named: Vec<(&str, Tensor)> =
            grads.iter().map(|(k, g)| (k.as_str(), g.clone())).collect();
        let grad_norm = clip_global_norm(&mut named, opt_cfg.grad_clip);
        let lr_s = cosine_lr(opt_cfg.lr_scales, step, opt_cfg.steps);
        let lr_t = cosine_lr(opt_cfg.lr_transforms, step, opt_cfg.steps);

        let mut updated: HashMap<String, Tensor> = HashMap::new();
        scheme.visit_params(|k, t| {
            updated.insert(k.to_string(), t.clone());
        });
        if let Some(p) = adapters.as_deref() {
            p.visit_params(|k, t| {
                updated.insert(k.to_string(), t.clone());
            });
        }
        for (key, grad) in &named {
            let Some(param) = updated.get_mut(*key) else {
                return Err(Error::Contract(format!("gradient for unknown parameter {key}")));
            };
            let lr = if key.starts_with("scale.") { lr_s } else { lr_t };
            opt.step(key, param, grad, lr)?;
        }
        scheme.visit_params_mut(|k, t| {
            if let Some(nv) = updated.remove(k) {
                *t = if k.starts_with("scale.") { nv.map(|v| v.max(1e-8)) } else { nv };
            }
        });
        if let Some(p) = adapters.as_deref_mut() {
            p.visit_params_mut(|k, t| {
                if let Some(nv) = updated.remove(k) {
                    *t = nv;
                }
            });
        }
        steps.push(CalibStep { step, terms, grad_norm, lr_scales: lr_s, lr_transforms: lr_t });
    }

    let final_terms =
        mean_loss(model, scheme, adapters.as_deref(), calib, &teachers, loss_cfg, &mu)?;
    let mut param_norms = Vec::new();
    scheme.visit_params(|k, t| param_norms.push((k.to_string(), t.frob_norm())));
    if let Some(p) = adapters.as_deref() {
        p.visit_params(|k, t| param_norms.push((k.to_string(), t.frob_norm())));
    }
    Ok(CalibrationReport {
        initial,
        r#final: final_terms,
        steps,
        mu_history,
        final_mu: mu,
        param_norms,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

/// Diagonal empirical Fisher: mean over batches of the squared gradient of
/// the calibration loss, per trainable parameter.
pub fn estimate_fisher(
    model: &LoopedModel,
    scheme: &QuantScheme,
    adapters: Option<&TransitionAdapterParams>,
    calib: &[TokenBatch],
    loss_cfg: &CalibLossConfig,
) -> Result<Vec<(String, Tensor)>> {
    if calib.is_empty() {
        return Err(Error::Contract("need at least one calibration batch".into()));
    }
    let teachers = teacher_trajectories(model, calib)?;
    let mu = averaged_mu(model, scheme, adapters, calib, &teachers, loss_cfg.mu_eps)?;
    let mut acc: Vec<(String, Tensor)> = Vec::new();
    for (bi, (batch, teacher)) in calib.iter().zip(&teachers).enumerate() {
        let g = Graph::new();
        let (tv, params) = bind_student(&g, model, scheme, adapters, batch, true)?;
        let loss = trajectory_loss(&g, teacher, &tv, loss_cfg, &mu)?;
        g.backward(loss.total)?;
        for (pi, (key, var)) in params.iter().enumerate() {
            let val = var.value();
            let sq = var
                .grad()
                .map(|gr| gr.map(|x| x * x))
                .unwrap_or_else(|| Tensor::zeros(val.rows(), val.cols()));
            if bi == 0 {
                acc.push((key.clone(), sq));
            } else {
                acc[pi].1.axpy(1.0, &sq)?;
            }
        }
    }
    let n = calib.len() as f64;
    for (_, t) in &mut acc {
        *t = t.scale(1.0 / n);
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TokenSource;
    use crate::looplm::ModelConfig;
    use crate::methods::{baseline_scheme, enable_las, untie_group, BaselineKind};
    use crate::quant::{collect_act_stats, QuantSpec, ScaleRule};
    use crate::looplm::Slot;

    fn cfg(layers: usize, loops: usize) -> ModelConfig {
        ModelConfig {
            vocab: 17,
            d: 8,
            heads: 2,
            layers,
            loops,
            mlp_hidden: 0,
            norm_eps: 1e-6,
        }
    }

    fn spec(bits_w: u32, bits_a: u32) -> QuantSpec {
        QuantSpec { bits_w, bits_a, group_size: 4 }
    }

    fn row(vals: &[f64]) -> Tensor {
        Tensor::from_rows(&[vals.to_vec()]).unwrap()
    }

    fn hand_trajectories() -> (Trajectory, Trajectory) {
        let l0 = row(&[1.0, 2.0]);
        let l1 = row(&[3.0, 1.0]);
        let teacher = Trajectory {
            entries: vec![row(&[0.0, 0.0]), l0.clone(), l1.clone()],
            loop_ends: vec![l0, l1.clone()],
            states: None,
            logits: row(&[1.0, 0.0, -1.0]),
        };
        let l0q = row(&[1.5, 1.5]);
        let l1q = row(&[2.0, 2.0]);
        let student = Trajectory {
            entries: vec![row(&[0.0, 0.0]), row(&[1.2, 1.9]), l1q.clone()],
            loop_ends: vec![l0q, l1q],
            states: None,
            logits: row(&[0.5, 0.2, -0.5]),
        };
        (teacher, student)
    }

    #[test]
    fn topk_full_equals_softmax_and_truncation_renormalizes() {
        let z = row(&[1.0, 3.0, 2.0, -1.0]);
        let full = topk_probs(&z, 1.0, 10).unwrap();
        let zm: Vec<f64> = z.data().iter().map(|v| (v - 3.0).exp()).collect();
        let sum: f64 = zm.iter().sum();
        for j in 0..4 {
            assert!((full.get(0, j) - zm[j] / sum).abs() < 1e-15);
        }
        let top2 = topk_probs(&z, 1.0, 2).unwrap();
        assert_eq!(top2.get(0, 0), 0.0);
        assert_eq!(top2.get(0, 3), 0.0);
        let e3 = 1.0f64;
        let e2 = (-1.0f64).exp();
        assert!((top2.get(0, 1) - e3 / (e3 + e2)).abs() < 1e-15);
        assert!((top2.get(0, 2) - e2 / (e3 + e2)).abs() < 1e-15);
        let s: f64 = (0..4).map(|j| top2.get(0, j)).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mu_near_one_for_perfect_student_and_zero_at_last_loop() {
        let cfg = cfg(2, 3);
        let model = LoopedModel::init(cfg.clone(), 3).unwrap();
        let mut src = TokenSource::new(cfg.vocab, 5).unwrap();
        let batch = src.sample_batch(2, 5).unwrap();
        let fp = fp_forward(&model, &batch, false).unwrap();
        let mu = compute_mu(&fp, &fp, 1e-8).unwrap();
        assert_eq!(mu.len(), 3);
        // zero student mismatch: mu_t = n_t / (n_t + eps), just below 1
        for t in 0..2 {
            let n_t = fp.final_state().msd(&fp.loop_ends[t]).unwrap();
            assert!((mu[t] - n_t / (n_t + 1e-8)).abs() < 1e-12);
            assert!(mu[t] > 0.99 && mu[t] < 1.0, "mu[{t}] = {}", mu[t]);
        }
        assert_eq!(mu[2], 0.0);
    }

    #[test]
    fn mu_hand_case() {
        let (teacher, student) = hand_trajectories();
        let mu = compute_mu(&teacher, &student, 1e-8).unwrap();
        // teacher self-distance n0 = msd([3,1],[1,2]) = 2.5; student mismatch
        // m0 = 0.25, m1 = 1.0
        let expect0 = 2.5 / (2.5 + 1.25 + 1e-8);
        assert!((mu[0] - expect0).abs() < 1e-12, "{} vs {expect0}", mu[0]);
        assert_eq!(mu[1], 0.0);
    }

    #[test]
    fn mu_monotone_in_student_mismatch() {
        let (teacher, student) = hand_trajectories();
        let mut worse = student.clone();
        worse.loop_ends[0] = row(&[5.0, 5.0]);
        let base = compute_mu(&teacher, &student, 1e-8).unwrap();
        let degraded = compute_mu(&teacher, &worse, 1e-8).unwrap();
        assert!(degraded[0] < base[0]);
    }

    #[test]
    fn loss_vanishes_for_perfect_student() {
        let cfg = cfg(2, 3);
        let model = LoopedModel::init(cfg.clone(), 7).unwrap();
        let mut src = TokenSource::new(cfg.vocab, 8).unwrap();
        let batch = src.sample_batch(2, 4).unwrap();
        let teacher = fp_forward(&model, &batch, false).unwrap();
        let scheme = baseline_scheme(
            BaselineKind::Symmetric,
            &model,
            spec(0, 0),
            &[batch.clone()],
            ScaleRule::MaxAbs,
            0,
        )
        .unwrap();
        let g = Graph::new();
        let (tv, _) = bind_student(&g, &model, &scheme, None, &batch, false).unwrap();
        let mu = [0.3, 0.4, 0.0];
        let cfg_loss = CalibLossConfig::default();
        let loss = trajectory_loss(&g, &teacher, &tv, &cfg_loss, &mu).unwrap().terms();
        assert!(loss.kl.abs() < 1e-12);
        assert_eq!(loss.hidden, 0.0);
        assert_eq!(loss.transition, 0.0);
        let expect_final: f64 = (0..3)
            .map(|t| mu[t] * teacher.loop_ends[t].msd(teacher.final_state()).unwrap())
            .sum();
        assert!((loss.final_target - expect_final).abs() < 1e-12);
        let zero_mu = trajectory_loss(&g, &teacher, &tv, &cfg_loss, &[0.0; 3]).unwrap().terms();
        assert!(zero_mu.total.abs() < 1e-12);
    }

    #[test]
    fn loss_hand_case() {
        let (teacher, student) = hand_trajectories();
        let g = Graph::new();
        let tv = TrajectoryVars {
            entries: student.entries.iter().map(|t| g.constant(t.clone()).unwrap()).collect(),
            loop_ends: student.loop_ends.iter().map(|t| g.constant(t.clone()).unwrap()).collect(),
            states: None,
            logits: g.constant(student.logits.clone()).unwrap(),
        };
        let cfg_loss = CalibLossConfig {
            lambda: 0.5,
            kl_temperature: 1.0,
            teacher_topk: 3,
            ..CalibLossConfig::default()
        };
        let terms = trajectory_loss(&g, &teacher, &tv, &cfg_loss, &[0.25, 0.0]).unwrap().terms();
        let softmax = |z: &[f64]| {
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect::<Vec<_>>()
        };
        let p = softmax(&[1.0, 0.0, -1.0]);
        let q = softmax(&[0.5, 0.2, -0.5]);
        let kl: f64 = p.iter().zip(&q).map(|(a, b)| a * (a.ln() - b.ln())).sum();
        assert!((terms.kl - kl).abs() < 1e-12);
        assert!((terms.hidden - (0.75 * 0.25 + 1.0)).abs() < 1e-12);
        assert!((terms.final_target - 0.25 * 1.25).abs() < 1e-12);
        assert!((terms.transition - 0.025).abs() < 1e-12);
        let expect_total = kl + 0.5 * (1.1875 + 0.3125 + 0.025);
        assert!((terms.total - expect_total).abs() < 1e-12);
        assert!(terms.decomposition_gap(0.5) < 1e-12);
    }

    fn loopq_setup(
        seed: u64,
    ) -> (LoopedModel, QuantScheme, TransitionAdapterParams, Vec<TokenBatch>) {
        let cfg = cfg(2, 3);
        let model = LoopedModel::init(cfg.clone(), seed).unwrap();
        let mut src = TokenSource::new(cfg.vocab, seed + 1).unwrap();
        let calib = src.sample_calibration(2, 6).unwrap();
        let mut scheme = baseline_scheme(
            BaselineKind::LearnedAffine,
            &model,
            spec(4, 4),
            &calib,
            ScaleRule::MaxAbs,
            seed,
        )
        .unwrap();
        let stats = collect_act_stats(&model, &scheme, &calib, ScaleRule::MaxAbs).unwrap();
        enable_las(&mut scheme, &stats).unwrap();
        untie_group(&mut scheme, 0, Slot::Qkv).unwrap();
        let adapters = TransitionAdapterParams::init(cfg.d, cfg.loops, 2, seed + 2).unwrap();
        (model, scheme, adapters, calib)
    }

    #[test]
    fn calibration_reduces_loss_and_is_deterministic() {
        let run = || {
            let (model, mut scheme, mut adapters, calib) = loopq_setup(31);
            let loss_cfg = CalibLossConfig { mu_update_interval: 10, ..Default::default() };
            let opt_cfg = CalibOptConfig { steps: 25, ..Default::default() };
            let report = run_calibration(
                &model,
                &mut scheme,
                Some(&mut adapters),
                &calib,
                &loss_cfg,
                &opt_cfg,
            )
            .unwrap();
            report
        };
        let report = run();
        assert!(
            report.r#final.total <= report.initial.total,
            "final {:.6e} vs initial {:.6e}",
            report.r#final.total,
            report.initial.total
        );
        assert_eq!(report.steps.len(), 25);
        for s in &report.steps {
            assert!(s.terms.decomposition_gap(0.1) < 1e-9, "step {}", s.step);
        }
        assert_eq!(report.mu_history.len(), 3);
        assert_eq!(report.mu_history[1].0, 10);
        for mu in &report.final_mu {
            assert!((0.0..1.0).contains(mu));
        }
        let again = run();
        for (a, b) in report.steps.iter().zip(&again.steps) {
            assert_eq!(a.terms.total.to_bits(), b.terms.total.to_bits());
        }
    }

    #[test]
    fn zero_steps_change_nothing() {
        let (model, mut scheme, mut adapters, calib) = loopq_setup(33);
        let before_scheme = serde_json::to_string(&scheme).unwrap();
        let before_adapters = serde_json::to_string(&adapters).unwrap();
        let report = run_calibration(
            &model,
            &mut scheme,
            Some(&mut adapters),
            &calib,
            &CalibLossConfig::default(),
            &CalibOptConfig { steps: 0, ..Default::default() },
        )
        .unwrap();
        assert_eq!(serde_json::to_string(&scheme).unwrap(), before_scheme);
        assert_eq!(serde_json::to_string(&adapters).unwrap(), before_adapters);
        assert!(report.steps.is_empty());
        assert_eq!(report.initial.total.to_bits(), report.r#final.total.to_bits());
    }

    #[test]
    fn frozen_parameters_keep_loss_constant() {
        let (model, mut scheme, mut adapters, calib) = loopq_setup(35);
        let one = vec![calib[0].clone()];
        let report = run_calibration(
            &model,
            &mut scheme,
            Some(&mut adapters),
            &one,
            &CalibLossConfig::default(),
            &CalibOptConfig { steps: 4, lr_scales: 0.0, lr_transforms: 0.0, ..Default::default() },
        )
        .unwrap();
        let first = report.steps[0].terms.total;
        for s in &report.steps {
            assert_eq!(s.terms.total.to_bits(), first.to_bits());
        }
    }

    #[test]
    fn fisher_zero_when_loss_ignores_params() {
        let cfg = cfg(1, 2);
        let model = LoopedModel::init(cfg.clone(), 41).unwrap();
        let mut src = TokenSource::new(cfg.vocab, 42).unwrap();
        let calib = src.sample_calibration(2, 4).unwrap();
        // bits 0: scales exist as parameters but the forward never uses them
        let scheme = QuantScheme::identity(&cfg, spec(0, 0)).unwrap();
        let psi =
            estimate_fisher(&model, &scheme, None, &calib, &CalibLossConfig::default()).unwrap();
        assert!(!psi.is_empty());
        for (k, t) in &psi {
            assert!(t.data().iter().all(|&v| v == 0.0), "nonzero fisher for {k}");
        }
    }

    #[test]
    fn fisher_definitional_on_single_batch() {
        let (model, scheme, adapters, calib) = loopq_setup(43);
        let one = vec![calib[0].clone()];
        let loss_cfg = CalibLossConfig::default();
        let psi = estimate_fisher(&model, &scheme, Some(&adapters), &one, &loss_cfg).unwrap();
        // manual: same forward/backward, square the gradients
        let teachers = teacher_trajectories(&model, &one).unwrap();
        let g = Graph::new();
        let (tv, params) =
            bind_student(&g, &model, &scheme, Some(&adapters), &one[0], true).unwrap();
        let mu = compute_mu(&teachers[0], &tv.materialize(), loss_cfg.mu_eps).unwrap();
        let loss = trajectory_loss(&g, &teachers[0], &tv, &loss_cfg, &mu).unwrap();
        g.backward(loss.total).unwrap();
        assert_eq!(psi.len(), params.len());
        for ((k, f), (k2, var)) in psi.iter().zip(&params) {
            assert_eq!(k, k2);
            let val = var.value();
            let manual = var
                .grad()
                .map(|gr| gr.map(|x| x * x))
                .unwrap_or_else(|| Tensor::zeros(val.rows(), val.cols()));
            assert!(f.bits_eq(&manual), "fisher mismatch for {k}");
        }
        // duplicated batch: mean of two identical squared gradients
        let two = vec![one[0].clone(), one[0].clone()];
        let psi2 = estimate_fisher(&model, &scheme, Some(&adapters), &two, &loss_cfg).unwrap();
        for ((_, a), (_, b)) in psi.iter().zip(&psi2) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }
    }
}
