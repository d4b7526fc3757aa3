//! Loop-aware quantization components and the static baselines they are
//! measured against.
//!
//! Three devices target the loop dimension specifically: loop-adaptive
//! activation scales (one clip range per loop instead of one shared range),
//! selectively loop-dependent transforms (untie only the groups whose
//! gradients disagree most across loops), and cross-loop transition adapters
//! (a cheap learned correction applied to the state between loops). Baselines
//! keep every quantization parameter shared across loops.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::looplm::{
    forward_with_hooks, rms_norm, ForwardHooks, LoopedModel, ModelVars, SiteId, Slot, TokenBatch,
    Trajectory,
};
use crate::quant::{
    calibrate_static_scales, collect_act_stats, q_bounds, ActStats, QuantScheme, QuantSpec,
    ScaleAssign, ScaleRule, SchemeBind, Transform, TransformAssign,
};
use crate::tensor::{random_orthogonal, Tensor};
use crate::{Error, Result};

/// Replaces every shared activation-scale row with a length-T per-loop array
/// initialized from per-loop statistics. Returns the number of scale scalars
/// added. Groups already per-loop are left alone; existing scale values are
/// never reset.
pub fn enable_las(scheme: &mut QuantScheme, stats: &ActStats) -> Result<usize> {
    if stats.loops != scheme.loops {
        return Err(Error::Contract(format!(
            "stats cover {} loops, scheme has {}",
            stats.loops, scheme.loops
        )));
    }
    let bits = scheme.spec.bits_a;
    let loops = scheme.loops;
    let mut added = 0;
    for g in &mut scheme.groups {
        let ScaleAssign::Shared(shared) = &g.scales else { continue };
        let per_loop = if bits == 0 {
            vec![shared.clone(); loops]
        } else {
            let (_, hi) = q_bounds(bits);
            (0..loops)
                .map(|t| {
                    Ok(stats
                        .per_loop_stat(g.layer, g.slot, t)?
                        .map(|m| (m / hi).max(1e-8)))
                })
                .collect::<Result<Vec<_>>>()?
        };
        added += (loops - 1) * shared.cols();
        g.scales = ScaleAssign::PerLoop(per_loop);
    }
    Ok(added)
}

/// Gives one group independent per-loop transform copies, each initialized
/// from the current shared transform so the forward function is unchanged
/// until they diverge. Frozen kinds become trainable affine copies; an
/// identity transform is materialized as an affine identity matrix first.
pub fn untie_group(
    scheme: &mut QuantScheme,
    cfg: &ModelConfig,
    layer: usize,
    slot: Slot,
) -> Result<()> {
    let loops = scheme.loops;
    let g = scheme.group_mut(layer, slot)?;
    let shared = match &g.transform {
        TransformAssign::Shared(t) => t.clone(),
        TransformAssign::PerLoop(_) => {
            return Err(Error::Contract(format!(
                "group l{layer}.{} is already loop-dependent",
                slot.name()
            )))
        }
    };
    let copy = match shared {
        Transform::Identity => Transform::Affine(Tensor::eye(slot.in_dim(cfg))),
        Transform::Orthogonal(p) => Transform::Affine(p),
        t => t,
    };
    g.transform = TransformAssign::PerLoop(vec![copy; loops]);
    Ok(())
}

fn default_cta_rank() -> usize {
    8
}

fn default_cta_eps() -> f64 {
    1e-6
}

/// Per-transition state correction `A_t(H) = H + (a_t - 1) ⊙ N + b_t +
/// ((N V) ⊙ η_t) U^T` with `N = RMSNorm(H)`. At initialization a=1, b=0,
/// η=0, so every A_t is exactly the identity; U and V start near zero so the
/// low-rank path is trainable the moment η moves.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransitionAdapterParams {
    #[serde(default = "default_cta_rank")]
    pub rank: usize,
    /// Per-transition diagonal gain on the normalized state, 1 x d each.
    pub a: Vec<Tensor>,
    /// Per-transition bias, 1 x d each.
    pub b: Vec<Tensor>,
    /// Per-transition low-rank gate, 1 x rank each.
    pub eta: Vec<Tensor>,
    /// Shared low-rank output basis, d x rank.
    pub u: Tensor,
    /// Shared low-rank input basis, d x rank.
    pub v: Tensor,
    #[serde(default = "default_cta_eps")]
    pub norm_eps: f64,
}

impl TransitionAdapterParams {
    /// Identity-initialized adapters for a T-loop model (T-1 transitions).
    pub fn init(d: usize, loops: usize, rank: usize, seed: u64) -> Result<Self> {
        if loops < 1 {
            return Err(Error::Config("adapter needs at least one loop".into()));
        }
        if rank == 0 || rank > d {
            return Err(Error::Config(format!("adapter rank {rank} must be in 1..={d}")));
        }
        let n = loops - 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            rank,
            a: vec![Tensor::full(1, d, 1.0); n],
            b: vec![Tensor::zeros(1, d); n],
            eta: vec![Tensor::zeros(1, rank); n],
            u: Tensor::randn(d, rank, 1e-3, &mut rng),
            v: Tensor::randn(d, rank, 1e-3, &mut rng),
            norm_eps: default_cta_eps(),
        })
    }

    pub fn transitions(&self) -> usize {
        self.a.len()
    }

    pub fn d(&self) -> usize {
        self.u.rows()
    }

    pub fn param_count(&self) -> usize {
        let d = self.d();
        self.transitions() * (2 * d + self.rank) + 2 * d * self.rank
    }

    pub fn visit_params(&self, mut f: impl FnMut(&str, &Tensor)) {
        for t in 0..self.transitions() {
            f(&format!("cta.a{t}"), &self.a[t]);
            f(&format!("cta.b{t}"), &self.b[t]);
            f(&format!("cta.eta{t}"), &self.eta[t]);
        }
        f("cta.u", &self.u);
        f("cta.v", &self.v);
    }

    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        for t in 0..self.a.len() {
            f(&format!("cta.a{t}"), &mut self.a[t]);
            f(&format!("cta.b{t}"), &mut self.b[t]);
            f(&format!("cta.eta{t}"), &mut self.eta[t]);
        }
        f("cta.u", &mut self.u);
        f("cta.v", &mut self.v);
    }

    /// Applies transition t to a plain state; same arithmetic as the graph
    /// path (it runs one).
    pub fn apply(&self, h: &Tensor, t: usize) -> Result<Tensor> {
        let g = Graph::new();
        let av = AdapterVars::bind(&g, self, false)?;
        let hv = g.constant(h.clone())?;
        Ok(av.apply(&g, hv, t)?.value())
    }
}

/// Graph-side binding of [`TransitionAdapterParams`].
pub struct AdapterVars<'g> {
    a: Vec<Var<'g>>,
    b: Vec<Var<'g>>,
    eta: Vec<Var<'g>>,
    u: Var<'g>,
    v: Var<'g>,
    norm_eps: f64,
    d: usize,
    params: Vec<(String, Var<'g>)>,
}

impl<'g> AdapterVars<'g> {
    pub fn bind(g: &'g Graph, p: &TransitionAdapterParams, trainable: bool) -> Result<Self> {
        let mut params = Vec::new();
        let mut lift = |tensor: &Tensor, key: String| -> Result<Var<'g>> {
            if trainable {
                let v = g.param(tensor.clone())?;
                params.push((key, v));
                Ok(v)
            } else {
                g.constant(tensor.clone())
            }
        };
        let mut a = Vec::new();
        let mut b = Vec::new();
        let mut eta = Vec::new();
        for t in 0..p.transitions() {
            a.push(lift(&p.a[t], format!("cta.a{t}"))?);
            b.push(lift(&p.b[t], format!("cta.b{t}"))?);
            eta.push(lift(&p.eta[t], format!("cta.eta{t}"))?);
        }
        let u = lift(&p.u, "cta.u".into())?;
        let v = lift(&p.v, "cta.v".into())?;
        Ok(Self { a, b, eta, u, v, norm_eps: p.norm_eps, d: p.d(), params })
    }

    pub fn transitions(&self) -> usize {
        self.a.len()
    }

    pub fn params(&self) -> &[(String, Var<'g>)] {
        &self.params
    }

    pub fn apply(&self, g: &'g Graph, h: Var<'g>, t: usize) -> Result<Var<'g>> {
        if t >= self.a.len() {
            return Err(Error::Contract(format!(
                "transition index {t} out of range 0..{}",
                self.a.len()
            )));
        }
        if h.value().cols() != self.d {
            return Err(Error::Dim(format!(
                "adapter built for width {}, state has {}",
                self.d,
                h.value().cols()
            )));
        }
        let n = rms_norm(g, h, self.norm_eps)?;
        let ones = g.constant(Tensor::full(1, self.d, 1.0))?;
        let gain = n.mul(self.a[t].sub(ones)?)?;
        let low_rank = n.matmul(self.v)?.mul(self.eta[t])?.matmul(self.u.transpose()?)?;
        h.add(gain)?.add(self.b[t])?.add(low_rank)
    }
}

/// Composes the quantizing linear hook with transition adapters at loop
/// boundaries. `extrapolate` reuses the last adapter past its range, matching
/// the quantizer's behavior when running extra loops.
pub struct LoopqHooks<'g, 'a> {
    pub quant: &'a mut SchemeBind<'g>,
    pub adapters: Option<&'a AdapterVars<'g>>,
    pub extrapolate: bool,
}

impl<'g> ForwardHooks<'g> for LoopqHooks<'g, '_> {
    fn linear(&mut self, g: &'g Graph, h: Var<'g>, w: Var<'g>, site: SiteId) -> Result<Var<'g>> {
        self.quant.linear(g, h, w, site)
    }

    fn boundary(&mut self, g: &'g Graph, h: Var<'g>, t: usize) -> Result<Var<'g>> {
        match self.adapters {
            None => Ok(h),
            Some(av) => {
                let idx = if t < av.transitions() {
                    t
                } else if self.extrapolate && av.transitions() > 0 {
                    av.transitions() - 1
                } else {
                    return Err(Error::Contract(format!(
                        "transition index {t} outside adapter range 0..{}",
                        av.transitions()
                    )));
                };
                av.apply(g, h, idx)
            }
        }
    }
}

/// Quantized forward with optional transition adapters; the full student
/// pipeline as run at inference time.
pub fn adapted_forward(
    model: &LoopedModel,
    scheme: &QuantScheme,
    adapters: Option<&TransitionAdapterParams>,
    batch: &TokenBatch,
    record: bool,
    extrapolate: bool,
) -> Result<Trajectory> {
    let g = Graph::new();
    let mv = ModelVars::bind(&g, model, false)?;
    let mut bind = SchemeBind::with_options(&g, scheme, false, false, extrapolate)?;
    let av = adapters.map(|p| AdapterVars::bind(&g, p, false)).transpose()?;
    let mut hooks = LoopqHooks { quant: &mut bind, adapters: av.as_ref(), extrapolate };
    let tv = forward_with_hooks(&g, &mv, &model.config, batch, &mut hooks, record)?;
    Ok(tv.materialize())
}

/// Static comparison arms: all quantization parameters shared across loops.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// Plain symmetric quantization, no transform.
    Symmetric,
    /// Fixed diagonal transform balancing activation and weight ranges.
    SmoothScale,
    /// Fixed random rotation per group.
    Rotation,
    /// Identity-initialized affine transforms, trained later with shared
    /// parameters only.
    LearnedAffine,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [
        BaselineKind::Symmetric,
        BaselineKind::SmoothScale,
        BaselineKind::Rotation,
        BaselineKind::LearnedAffine,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Symmetric => "symmetric",
            BaselineKind::SmoothScale => "smooth_scale",
            BaselineKind::Rotation => "rotation",
            BaselineKind::LearnedAffine => "learned_affine",
        }
    }
}

/// Per-channel balancing scales `s_j = act_max_j^alpha / w_max_j^(1-alpha)`;
/// the transform divides activation channel j by s_j and scales the matching
/// weight column up, flattening activation outliers.
pub fn smooth_scales(act_max: &Tensor, weight_col_max: &Tensor, alpha: f64) -> Result<Tensor> {
    if act_max.shape() != weight_col_max.shape() || act_max.rows() != 1 {
        return Err(Error::Dim(format!(
            "channel maxima rows {:?} vs {:?}",
            act_max.shape(),
            weight_col_max.shape()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Param(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(act_max.zip_map(weight_col_max, |a, w| {
        a.max(1e-8).powf(alpha) / w.max(1e-8).powf(1.0 - alpha)
    })?)
}

fn weight_col_max(w: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, w.cols());
    for i in 0..w.rows() {
        for j in 0..w.cols() {
            let v = w.get(i, j).abs();
            if v > out.get(0, j) {
                out.set(0, j, v);
            }
        }
    }
    out
}

fn diag(values: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(values.cols(), values.cols());
    for j in 0..values.cols() {
        out.set(j, j, values.get(0, j));
    }
    out
}

/// Builds a baseline scheme: transforms per `kind`, then static activation
/// scales from the calibration batches. The learned-affine arm comes back
/// identity-initialized; its training is a separate calibration run.
pub fn baseline_scheme(
    kind: BaselineKind,
    model: &LoopedModel,
    spec: QuantSpec,
    calib: &[TokenBatch],
    rule: ScaleRule,
    seed: u64,
) -> Result<QuantScheme> {
    let cfg = &model.config;
    let mut scheme = QuantScheme::identity(cfg, spec)?;
    match kind {
        BaselineKind::Symmetric => {}
        BaselineKind::Rotation => {
            for (i, g) in scheme.groups.iter_mut().enumerate() {
                let dim = g.slot.in_dim(cfg);
                g.transform = TransformAssign::Shared(Transform::Orthogonal(random_orthogonal(
                    dim,
                    seed.wrapping_add(i as u64),
                )?));
            }
        }
        BaselineKind::LearnedAffine => {
            for g in &mut scheme.groups {
                let dim = g.slot.in_dim(cfg);
                g.transform = TransformAssign::Shared(Transform::Affine(Tensor::eye(dim)));
            }
        }
        BaselineKind::SmoothScale => {
            let stats = collect_act_stats(model, &scheme, calib, rule)?;
            for g in &mut scheme.groups {
                let act = stats.channel_max(g.layer, g.slot)?;
                let wmax = weight_col_max(model.layers[g.layer].slot(g.slot));
                let s = smooth_scales(&act, &wmax, 0.5)?;
                g.transform =
                    TransformAssign::Shared(Transform::Affine(diag(&s.map(|v| 1.0 / v))));
            }
        }
    }
    calibrate_static_scales(model, &mut scheme, calib, rule)?;
    scheme.validate(cfg)?;
    Ok(scheme)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TokenSource;
    use crate::looplm::ModelConfig;
    use crate::quant::{fp_forward, quantize_act_uniform, quantized_forward};

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

    fn synth_stats(cfg: &ModelConfig, scheme: &QuantScheme, magnitude: impl Fn(usize) -> f64) -> ActStats {
        let mut stats = ActStats::new(ScaleRule::MaxAbs, scheme.spec.group_size, scheme.loops);
        for g in &scheme.groups {
            for t in 0..scheme.loops {
                let site = SiteId { layer: g.layer, slot: g.slot, loop_idx: t };
                stats.record(site, &Tensor::full(1, g.slot.in_dim(cfg), magnitude(t)));
            }
        }
        stats
    }

    #[test]
    fn las_identical_stats_keep_shared_value() {
        let cfg = cfg(1, 3);
        let mut scheme = QuantScheme::identity(&cfg, spec(4, 4)).unwrap();
        let stats = synth_stats(&cfg, &scheme, |_| 0.7);
        let added = enable_las(&mut scheme, &stats).unwrap();
        assert_eq!(added, 2 * (2 + 2 + 4 + 2));
        for g in &scheme.groups {
            let ScaleAssign::PerLoop(cs) = &g.scales else { panic!("expected per-loop") };
            assert_eq!(cs.len(), 3);
            for c in cs {
                for j in 0..c.cols() {
                    assert!((c.get(0, j) - 0.7 / 7.0).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn las_tracks_magnitude_drift() {
        let cfg = cfg(1, 4);
        let mut scheme = QuantScheme::identity(&cfg, spec(4, 4)).unwrap();
        let stats = synth_stats(&cfg, &scheme, |t| 0.3 * (1 << t) as f64);
        enable_las(&mut scheme, &stats).unwrap();
        let g = scheme.group(0, Slot::Qkv).unwrap();
        let ScaleAssign::PerLoop(cs) = &g.scales else { panic!() };
        for t in 0..4 {
            let ratio = cs[t].get(0, 0) / cs[0].get(0, 0);
            assert!((ratio - (1 << t) as f64).abs() < 1e-12, "loop {t} ratio {ratio}");
        }
    }

    #[test]
    fn per_loop_scales_beat_any_shared_scale_on_drift() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let xs: Vec<Tensor> =
            (0..3).map(|t| Tensor::randn(16, 16, 0.2 * (1 << t) as f64, &mut rng)).collect();
        let pooled_max = xs.iter().map(|x| x.max_abs()).fold(0.0, f64::max);
        let c_pool = pooled_max / 7.0;
        for x in &xs {
            let c_t = x.max_abs() / 7.0;
            let per_loop = x.msd(&quantize_act_uniform(x, c_t, 4).unwrap()).unwrap();
            let shared = x.msd(&quantize_act_uniform(x, c_pool, 4).unwrap()).unwrap();
            assert!(per_loop <= shared + 1e-15);
        }
        // grid oracle: the sum of per-loop optima strictly beats the best
        // single shared scale when magnitudes drift
        let grid: Vec<f64> =
            (0..120).map(|i| c_pool * (2.0f64).powf(-6.0 + 7.0 * i as f64 / 119.0)).collect();
        let mse = |x: &Tensor, c: f64| x.msd(&quantize_act_uniform(x, c, 4).unwrap()).unwrap();
        let shared_best = grid
            .iter()
            .map(|&c| xs.iter().map(|x| mse(x, c)).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        let per_loop_best: f64 = xs
            .iter()
            .map(|x| grid.iter().map(|&c| mse(x, c)).fold(f64::INFINITY, f64::min))
            .sum();
        assert!(
            per_loop_best < 0.8 * shared_best,
            "per-loop {per_loop_best:.3e} vs shared {shared_best:.3e}"
        );
    }

    #[test]
    fn untied_group_bit_identical_until_divergence() {
        let cfg = cfg(2, 3);
        let model = LoopedModel::init(cfg.clone(), 3).unwrap();
        let mut src = TokenSource::new(cfg.vocab, 4).unwrap();
        let batch = src.sample_batch(2, 5).unwrap();
        let batches = vec![batch.clone()];
        let mut scheme = baseline_scheme(
            BaselineKind::LearnedAffine,
            &model,
            spec(4, 4),
            &batches,
            ScaleRule::MaxAbs,
            0,
        )
        .unwrap();
        let before = quantized_forward(&model, &scheme, &batch, false).unwrap();
        for layer in 0..cfg.layers {
            for slot in Slot::ALL {
                untie_group(&mut scheme, layer, slot).unwrap();
            }
        }
        scheme.validate(&cfg).unwrap();
        let after = quantized_forward(&model, &scheme, &batch, false).unwrap();
        assert!(after.logits.bits_eq(&before.logits));
        assert!(untie_group(&mut scheme, 0, Slot::Qkv).is_err());
        let mut identity = QuantScheme::identity(&cfg, spec(4, 4)).unwrap();
        assert!(untie_group(&mut identity, 0, Slot::Qkv).is_err());
    }

    #[test]
    fn cta_identity_at_init() {
        let p = TransitionAdapterParams::init(8, 3, 4, 9).unwrap();
        assert_eq!(p.transitions(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let h = Tensor::randn(5, 8, 1.0, &mut rng);
        for t in 0..2 {
            assert!(p.apply(&h, t).unwrap().bits_eq(&h));
        }
        let cfg = cfg(2, 3);
        let model = LoopedModel::init(cfg.clone(), 11).unwrap();
        let mut src = TokenSource::new(cfg.vocab, 12).unwrap();
        let batch = src.sample_batch(2, 4).unwrap();
        let scheme = QuantScheme::identity(&cfg, spec(4, 4)).unwrap();
        let plain = quantized_forward(&model, &scheme, &batch, true).unwrap();
        let adapted = adapted_forward(&model, &scheme, Some(&p), &batch, true, false).unwrap();
        assert!(adapted.logits.bits_eq(&plain.logits));
        for (a, b) in adapted.entries.iter().zip(&plain.entries) {
            assert!(a.bits_eq(b));
        }
    }

    #[test]
    fn cta_pure_shift() {
        let mut p = TransitionAdapterParams::init(4, 2, 2, 0).unwrap();
        p.b[0] = Tensor::full(1, 4, 0.25);
        let h = Tensor::from_rows(&[vec![1.0, -2.0, 0.5, 3.0]]).unwrap();
        let out = p.apply(&h, 0).unwrap();
        for j in 0..4 {
            assert_eq!(out.get(0, j), h.get(0, j) + 0.25);
        }
    }

    #[test]
    fn cta_hand_oracle_rank_one() {
        let mut p = TransitionAdapterParams::init(4, 2, 1, 0).unwrap();
        let a = [1.1, 0.9, 1.0, 1.2];
        let b = [0.01, -0.02, 0.0, 0.03];
        let u = [0.1, 0.2, 0.3, 0.4];
        let v = [0.2, 0.1, -0.1, 0.3];
        let eta = 0.5;
        p.a[0] = Tensor::from_rows(&[a.to_vec()]).unwrap();
        p.b[0] = Tensor::from_rows(&[b.to_vec()]).unwrap();
        p.eta[0] = Tensor::full(1, 1, eta);
        p.u = Tensor::from_rows(&u.iter().map(|&x| vec![x]).collect::<Vec<_>>()).unwrap();
        p.v = Tensor::from_rows(&v.iter().map(|&x| vec![x]).collect::<Vec<_>>()).unwrap();
        let h = [1.0, 2.0, 3.0, 4.0];
        let out = p.apply(&Tensor::from_rows(&[h.to_vec()]).unwrap(), 0).unwrap();
        let ms: f64 = h.iter().map(|x| x * x).sum::<f64>() / 4.0;
        let denom = (ms + 1e-6).sqrt();
        let n: Vec<f64> = h.iter().map(|x| x / denom).collect();
        let nv: f64 = n.iter().zip(&v).map(|(x, y)| x * y).sum();
        for j in 0..4 {
            let expect = h[j] + (a[j] - 1.0) * n[j] + b[j] + nv * eta * u[j];
            assert!((out.get(0, j) - expect).abs() < 1e-12, "col {j}");
        }
    }

    #[test]
    fn cta_rejects_bad_inputs() {
        let p = TransitionAdapterParams::init(8, 3, 4, 0).unwrap();
        let h = Tensor::zeros(2, 8);
        assert!(matches!(p.apply(&h, 2), Err(Error::Contract(_))));
        let narrow = Tensor::zeros(2, 4);
        assert!(matches!(p.apply(&narrow, 0), Err(Error::Dim(_))));
        assert!(TransitionAdapterParams::init(8, 3, 0, 0).is_err());
        assert!(TransitionAdapterParams::init(8, 3, 9, 0).is_err());
    }

    #[test]
    fn cta_param_keys_canonical() {
        let p = TransitionAdapterParams::init(8, 3, 2, 0).unwrap();
        let mut keys = Vec::new();
        p.visit_params(|k, _| keys.push(k.to_string()));
        assert_eq!(
            keys,
            ["cta.a0", "cta.b0", "cta.eta0", "cta.a1", "cta.b1", "cta.eta1", "cta.u", "cta.v"]
        );
        assert_eq!(p.param_count(), 2 * (16 + 2) + 2 * 16);
        let g = Graph::new();
        let av = AdapterVars::bind(&g, &p, true).unwrap();
        let bound: Vec<&str> = av.params().iter().map(|(k, _)| k.as_str()).collect();
        assert_eq!(bound, keys.iter().map(String::as_str).collect::<Vec<_>>());
    }

    #[test]
    fn cta_extrapolates_by_reusing_last_transition() {
        let cfg3 = cfg(2, 3);
        let cfg5 = ModelConfig { loops: 5, ..cfg3.clone() };
        let model = LoopedModel::init(cfg5.clone(), 13).unwrap();
        let mut src = TokenSource::new(cfg3.vocab, 14).unwrap();
        let batch = src.sample_batch(1, 5).unwrap();
        let scheme3 = QuantScheme::identity(&cfg3, spec(0, 0)).unwrap();
        let mut p3 = TransitionAdapterParams::init(8, 3, 2, 7).unwrap();
        p3.b[0] = Tensor::full(1, 8, 0.05);
        p3.b[1] = Tensor::full(1, 8, -0.08);
        p3.eta[1] = Tensor::full(1, 2, 0.3);
        assert!(adapted_forward(&model, &scheme3, Some(&p3), &batch, false, false).is_err());
        let extrapolated =
            adapted_forward(&model, &scheme3, Some(&p3), &batch, false, true).unwrap();
        let scheme5 = QuantScheme::identity(&cfg5, spec(0, 0)).unwrap();
        let mut p5 = TransitionAdapterParams::init(8, 5, 2, 7).unwrap();
        for t in 0..4 {
            let s = t.min(1);
            p5.a[t] = p3.a[s].clone();
            p5.b[t] = p3.b[s].clone();
            p5.eta[t] = p3.eta[s].clone();
        }
        p5.u = p3.u.clone();
        p5.v = p3.v.clone();
        let padded = adapted_forward(&model, &scheme5, Some(&p5), &batch, false, false).unwrap();
        assert!(extrapolated.logits.bits_eq(&padded.logits));
    }

    #[test]
    fn smooth_scales_hand_case() {
        let act = Tensor::from_rows(&[vec![4.0, 1.0]]).unwrap();
        let w = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let s = smooth_scales(&act, &w, 0.5).unwrap();
        assert!((s.get(0, 0) - 2.0).abs() < 1e-12);
        assert!((s.get(0, 1) - 1.0).abs() < 1e-12);
        assert!(smooth_scales(&act, &Tensor::zeros(1, 3), 0.5).is_err());
        assert!(smooth_scales(&act, &w, 1.5).is_err());
    }

    #[test]
    fn symmetric_baseline_on_zero_model_gives_zero_logits() {
        let cfg = cfg(1, 2);
        let mut model = LoopedModel::init(cfg.clone(), 15).unwrap();
        model.visit_params_mut(|_, t| *t = Tensor::zeros(t.rows(), t.cols()));
        let mut src = TokenSource::new(cfg.vocab, 16).unwrap();
        let batches = src.sample_calibration(2, 4).unwrap();
        let scheme = baseline_scheme(
            BaselineKind::Symmetric,
            &model,
            spec(4, 4),
            &batches,
            ScaleRule::MaxAbs,
            0,
        )
        .unwrap();
        let out = quantized_forward(&model, &scheme, &batches[0], false).unwrap();
        assert!(out.logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rotation_and_smooth_baselines_preserve_function_unquantized() {
        let cfg = cfg(2, 3);
        let model = LoopedModel::init(cfg.clone(), 17).unwrap();
        let mut src = TokenSource::new(cfg.vocab, 18).unwrap();
        let batches = src.sample_calibration(2, 5).unwrap();
        let fp = fp_forward(&model, &batches[0], false).unwrap();
        for kind in [BaselineKind::Rotation, BaselineKind::SmoothScale] {
            let scheme =
                baseline_scheme(kind, &model, spec(0, 0), &batches, ScaleRule::MaxAbs, 21).unwrap();
            let out = quantized_forward(&model, &scheme, &batches[0], false).unwrap();
            let rel = out.logits.sub(&fp.logits).unwrap().frob_norm() / fp.logits.frob_norm();
            assert!(rel < 1e-8, "{} drifted: rel {rel:.3e}", kind.name());
        }
    }

    #[test]
    fn baselines_quantized_forward_is_finite() {
        let cfg = cfg(2, 3);
        let model = LoopedModel::init(cfg.clone(), 19).unwrap();
        let mut src = TokenSource::new(cfg.vocab, 20).unwrap();
        let batches = src.sample_calibration(2, 5).unwrap();
        for kind in BaselineKind::ALL {
            let scheme =
                baseline_scheme(kind, &model, spec(4, 4), &batches, ScaleRule::MaxAbs, 22).unwrap();
            let out = quantized_forward(&model, &scheme, &batches[0], false).unwrap();
            out.logits.check_finite(kind.name()).unwrap();
        }
    }
}
