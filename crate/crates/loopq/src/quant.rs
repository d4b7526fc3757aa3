//! Simulated symmetric uniform quantization with invertible pre-quantization
//! transforms.
//!
//! A quantized linear site computes `Q_a(h P; c) @ Q_w(W P^{-T})^T`: the
//! activation is reshaped by an invertible P, fake-quantized with per
//! column-group scales c, and multiplied by the weight fake-quantized after
//! folding P's inverse-transpose in. With quantization disabled the P and
//! P^{-T} cancel, so any invertible transform preserves the layer function.
//!
//! Activation scales are trainable parameters (straight-through rounding
//! passes gradients to both the input and the scale). Weight scales are
//! recomputed from the current folded weight every forward and detached, so
//! they track the transform without being free parameters.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{round_half_even, Graph, Var};
use crate::looplm::{
    forward_with_hooks, ForwardHooks, LoopedModel, ModelConfig, ModelVars, PlainHooks, SiteId,
    Slot, TokenBatch, Trajectory,
};
use crate::tensor::{condition_number, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantSpec {
    /// Weight bits; 0 disables weight quantization.
    pub bits_w: u32,
    /// Activation bits; 0 disables activation quantization.
    pub bits_a: u32,
    /// Channels per quantization group along the feature axis.
    pub group_size: usize,
}

impl QuantSpec {
    pub fn validate(&self) -> Result<()> {
        for bits in [self.bits_w, self.bits_a] {
            if bits != 0 && !(2..=8).contains(&bits) {
                return Err(Error::Config(format!(
                    "bits must be 0 (off) or in 2..=8, got {bits}"
                )));
            }
        }
        if self.group_size == 0 {
            return Err(Error::Config("group_size must be positive".into()));
        }
        Ok(())
    }
}

/// Integer range of a symmetric b-bit quantizer.
pub fn q_bounds(bits: u32) -> (f64, f64) {
    let hi = ((1i64 << (bits - 1)) - 1) as f64;
    let lo = -((1i64 << (bits - 1)) as f64);
    (lo, hi)
}

fn check_grouping(cols: usize, group_size: usize, what: &str) -> Result<usize> {
    if cols % group_size != 0 {
        return Err(Error::Config(format!(
            "{what} dimension {cols} not divisible by group size {group_size}"
        )));
    }
    Ok(cols / group_size)
}

/// Symmetric uniform activation quantization with per column-group scales
/// (`c` is 1 x groups). Pass-through when `bits` is 0.
pub fn quantize_act(x: &Tensor, c: &Tensor, bits: u32, group_size: usize) -> Result<Tensor> {
    if bits == 0 {
        return Ok(x.clone());
    }
    let groups = check_grouping(x.cols(), group_size, "activation")?;
    if c.shape() != [1, groups] {
        return Err(Error::Dim(format!(
            "expected 1x{groups} scales, got {:?}",
            c.shape()
        )));
    }
    if c.data().iter().any(|&v| v <= 0.0) {
        return Err(Error::Param("activation scales must be positive".into()));
    }
    let (lo, hi) = q_bounds(bits);
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            let cj = c.get(0, j / group_size);
            let k = round_half_even(x.get(i, j) / cj).clamp(lo, hi);
            out.set(i, j, cj * k);
        }
    }
    Ok(out)
}

/// Single-scale variant for 1-D distribution studies.
pub fn quantize_act_uniform(x: &Tensor, c: f64, bits: u32) -> Result<Tensor> {
    if c <= 0.0 {
        return Err(Error::Param("scale must be positive".into()));
    }
    if bits == 0 {
        return Ok(x.clone());
    }
    let (lo, hi) = q_bounds(bits);
    Ok(x.map(|v| c * round_half_even(v / c).clamp(lo, hi)))
}

/// Per row-group max-abs scales, floored at 1e-12, expanded to a rows x 1
/// column for broadcasting.
pub fn weight_group_scales(w: &Tensor, bits: u32, group_size: usize) -> Result<Tensor> {
    let (_, hi) = q_bounds(bits);
    check_grouping(w.rows(), group_size, "weight row")?;
    let mut out = Tensor::zeros(w.rows(), 1);
    for g0 in (0..w.rows()).step_by(group_size) {
        let mut m = 0.0f64;
        for i in g0..g0 + group_size {
            for j in 0..w.cols() {
                m = m.max(w.get(i, j).abs());
            }
        }
        let s = (m / hi).max(1e-12);
        for i in g0..g0 + group_size {
            out.set(i, 0, s);
        }
    }
    Ok(out)
}

/// Round-to-nearest weight quantization over output-channel groups; returns
/// the dequantized simulated weight.
pub fn quantize_weight(w: &Tensor, bits: u32, group_size: usize) -> Result<Tensor> {
    w.check_finite("quantize_weight input")?;
    if bits == 0 {
        return Ok(w.clone());
    }
    let scales = weight_group_scales(w, bits, group_size)?;
    let (lo, hi) = q_bounds(bits);
    let mut out = Tensor::zeros(w.rows(), w.cols());
    for i in 0..w.rows() {
        let s = scales.get(i, 0);
        for j in 0..w.cols() {
            let k = round_half_even(w.get(i, j) / s).clamp(lo, hi);
            out.set(i, j, s * k);
        }
    }
    Ok(out)
}

/// Invertible pre-quantization transform for one weight group.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Transform {
    Identity,
    /// Fixed rotation; inverse-transpose equals the matrix itself.
    Orthogonal(Tensor),
    /// Unconstrained trainable matrix, identity-initialized.
    Affine(Tensor),
    /// Kronecker pair P = A (x) B with dims multiplying to the feature count.
    Kronecker(Tensor, Tensor),
}

impl Transform {
    pub fn dim(&self) -> Option<usize> {
        match self {
            Transform::Identity => None,
            Transform::Orthogonal(p) | Transform::Affine(p) => Some(p.rows()),
            Transform::Kronecker(a, b) => Some(a.rows() * b.rows()),
        }
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self, Transform::Affine(_) | Transform::Kronecker(..))
    }

    /// Full matrix P, materialized.
    pub fn matrix(&self, dim: usize) -> Result<Tensor> {
        match self {
            Transform::Identity => Ok(Tensor::eye(dim)),
            Transform::Orthogonal(p) | Transform::Affine(p) => Ok(p.clone()),
            Transform::Kronecker(a, b) => kron_tensors(a, b),
        }
    }

    pub fn condition(&self) -> Result<f64> {
        match self {
            Transform::Identity => Ok(1.0),
            Transform::Orthogonal(_) => Ok(1.0),
            Transform::Affine(p) => condition_number(p),
            Transform::Kronecker(a, b) => Ok(condition_number(a)? * condition_number(b)?),
        }
    }

    fn check_shape(&self, dim: usize, what: &str) -> Result<()> {
        match self {
            Transform::Identity => Ok(()),
            Transform::Orthogonal(p) | Transform::Affine(p) => {
                if p.shape() != [dim, dim] {
                    return Err(Error::Dim(format!(
                        "{what}: transform {:?} does not match feature dim {dim}",
                        p.shape()
                    )));
                }
                Ok(())
            }
            Transform::Kronecker(a, b) => {
                if a.rows() != a.cols() || b.rows() != b.cols() || a.rows() * b.rows() != dim {
                    return Err(Error::Dim(format!(
                        "{what}: kronecker factors {:?} x {:?} do not match dim {dim}",
                        a.shape(),
                        b.shape()
                    )));
                }
                Ok(())
            }
        }
    }
}

pub fn kron_tensors(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut out = Tensor::zeros(a.rows() * b.rows(), a.cols() * b.cols());
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            let aij = a.get(i, j);
            for k in 0..b.rows() {
                for l in 0..b.cols() {
                    out.set(i * b.rows() + k, j * b.cols() + l, aij * b.get(k, l));
                }
            }
        }
    }
    Ok(out)
}

/// Balanced factor split for Kronecker transforms: the largest divisor of d
/// not exceeding sqrt(d), paired with its cofactor.
pub fn kron_dims(d: usize) -> (usize, usize) {
    let mut a = 1;
    for k in 1..=d {
        if k * k > d {
            break;
        }
        if d % k == 0 {
            a = k;
        }
    }
    (a, d / a)
}

/// Either one shared transform or one per loop.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum TransformAssign {
    Shared(Transform),
    PerLoop(Vec<Transform>),
}

impl TransformAssign {
    pub fn is_per_loop(&self) -> bool {
        matches!(self, TransformAssign::PerLoop(_))
    }
}

/// Either one shared scale row (1 x groups) or one per loop.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum ScaleAssign {
    Shared(Tensor),
    PerLoop(Vec<Tensor>),
}

impl ScaleAssign {
    pub fn is_per_loop(&self) -> bool {
        matches!(self, ScaleAssign::PerLoop(_))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroupQuant {
    pub layer: usize,
    pub slot: Slot,
    pub transform: TransformAssign,
    pub scales: ScaleAssign,
}

impl GroupQuant {
    pub fn key(&self) -> String {
        format!("l{}.{}", self.layer, self.slot.name())
    }
}

/// Quantization state for a whole model: per weight group, one transform and
/// one activation-scale assignment.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QuantScheme {
    pub spec: QuantSpec,
    pub loops: usize,
    pub groups: Vec<GroupQuant>,
}

impl QuantScheme {
    /// All transforms identity, all scales 1; validates group divisibility
    /// against the model shape.
    pub fn identity(cfg: &ModelConfig, spec: QuantSpec) -> Result<Self> {
        spec.validate()?;
        cfg.validate()?;
        let mut groups = Vec::new();
        for layer in 0..cfg.layers {
            for slot in Slot::ALL {
                let in_dim = slot.in_dim(cfg);
                let out_dim = slot.out_dim(cfg);
                let g = check_grouping(in_dim, spec.group_size, "activation feature")?;
                check_grouping(out_dim, spec.group_size, "weight output")?;
                groups.push(GroupQuant {
                    layer,
                    slot,
                    transform: TransformAssign::Shared(Transform::Identity),
                    scales: ScaleAssign::Shared(Tensor::full(1, g, 1.0)),
                });
            }
        }
        Ok(Self { spec, loops: cfg.loops, groups })
    }

    pub fn group(&self, layer: usize, slot: Slot) -> Result<&GroupQuant> {
        self.groups
            .iter()
            .find(|g| g.layer == layer && g.slot == slot)
            .ok_or_else(|| Error::Contract(format!("no group for layer {layer} {}", slot.name())))
    }

    pub fn group_mut(&mut self, layer: usize, slot: Slot) -> Result<&mut GroupQuant> {
        self.groups
            .iter_mut()
            .find(|g| g.layer == layer && g.slot == slot)
            .ok_or_else(|| Error::Contract(format!("no group for layer {layer} {}", slot.name())))
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        self.spec.validate()?;
        if self.loops != cfg.loops {
            return Err(Error::Contract(format!(
                "scheme calibrated for {} loops, model runs {}",
                self.loops, cfg.loops
            )));
        }
        for g in &self.groups {
            let in_dim = g.slot.in_dim(cfg);
            let groups = in_dim / self.spec.group_size;
            let check_tf = |t: &Transform| -> Result<()> {
                t.check_shape(in_dim, &g.key())?;
                let cond = t.condition()?;
                if cond > 1e8 {
                    return Err(Error::Numeric(format!(
                        "transform {} condition number {cond:.3e} exceeds 1e8",
                        g.key()
                    )));
                }
                Ok(())
            };
            match &g.transform {
                TransformAssign::Shared(t) => check_tf(t)?,
                TransformAssign::PerLoop(ts) => {
                    if ts.len() != self.loops {
                        return Err(Error::Contract(format!(
                            "group {} has {} per-loop transforms for {} loops",
                            g.key(),
                            ts.len(),
                            self.loops
                        )));
                    }
                    for t in ts {
                        check_tf(t)?;
                    }
                }
            }
            let check_sc = |c: &Tensor| -> Result<()> {
                if c.shape() != [1, groups] {
                    return Err(Error::Dim(format!(
                        "group {} scale shape {:?}, expected 1x{groups}",
                        g.key(),
                        c.shape()
                    )));
                }
                if c.data().iter().any(|&v| v <= 0.0) {
                    return Err(Error::Param(format!("group {} has nonpositive scale", g.key())));
                }
                Ok(())
            };
            match &g.scales {
                ScaleAssign::Shared(c) => check_sc(c)?,
                ScaleAssign::PerLoop(cs) => {
                    if cs.len() != self.loops {
                        return Err(Error::Contract(format!(
                            "group {} has {} per-loop scales for {} loops",
                            g.key(),
                            cs.len(),
                            self.loops
                        )));
                    }
                    for c in cs {
                        check_sc(c)?;
                    }
                }
            }
        }
        Ok(())
    }

    /// Trainable parameters in canonical order. Orthogonal transforms are
    /// fixed and excluded.
    pub fn visit_params(&self, mut f: impl FnMut(&str, &Tensor)) {
        for g in &self.groups {
            let base = g.key();
            let mut tf = |prefix: &str, t: &Transform| match t {
                Transform::Affine(p) => f(&format!("{prefix}"), p),
                Transform::Kronecker(a, b) => {
                    f(&format!("{prefix}.a"), a);
                    f(&format!("{prefix}.b"), b);
                }
                _ => {}
            };
            match &g.transform {
                TransformAssign::Shared(t) => tf(&format!("tf.{base}"), t),
                TransformAssign::PerLoop(ts) => {
                    for (t_idx, t) in ts.iter().enumerate() {
                        tf(&format!("tf.{base}.t{t_idx}"), t);
                    }
                }
            }
            match &g.scales {
                ScaleAssign::Shared(c) => f(&format!("scale.{base}"), c),
                ScaleAssign::PerLoop(cs) => {
                    for (t_idx, c) in cs.iter().enumerate() {
                        f(&format!("scale.{base}.t{t_idx}"), c);
                    }
                }
            }
        }
    }

    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        for g in &mut self.groups {
            let base = format!("l{}.{}", g.layer, g.slot.name());
            match &mut g.transform {
                TransformAssign::Shared(t) => match t {
                    Transform::Affine(p) => f(&format!("tf.{base}"), p),
                    Transform::Kronecker(a, b) => {
                        f(&format!("tf.{base}.a"), a);
                        f(&format!("tf.{base}.b"), b);
                    }
                    _ => {}
                },
                TransformAssign::PerLoop(ts) => {
                    for (t_idx, t) in ts.iter_mut().enumerate() {
                        match t {
                            Transform::Affine(p) => f(&format!("tf.{base}.t{t_idx}"), p),
                            Transform::Kronecker(a, b) => {
                                f(&format!("tf.{base}.t{t_idx}.a"), a);
                                f(&format!("tf.{base}.t{t_idx}.b"), b);
                            }
                            _ => {}
                        }
                    }
                }
            }
            match &mut g.scales {
                ScaleAssign::Shared(c) => f(&format!("scale.{base}"), c),
                ScaleAssign::PerLoop(cs) => {
                    for (t_idx, c) in cs.iter_mut().enumerate() {
                        f(&format!("scale.{base}.t{t_idx}"), c);
                    }
                }
            }
        }
    }

    /// (transform parameter count, loop-dependent transform parameter count).
    pub fn transform_param_counts(&self) -> (usize, usize) {
        let count = |t: &Transform| match t {
            Transform::Identity | Transform::Orthogonal(_) => 0,
            Transform::Affine(p) => p.rows() * p.cols(),
            Transform::Kronecker(a, b) => a.rows() * a.cols() + b.rows() * b.cols(),
        };
        let mut total = 0;
        let mut per_loop = 0;
        for g in &self.groups {
            match &g.transform {
                TransformAssign::Shared(t) => total += count(t),
                TransformAssign::PerLoop(ts) => {
                    let n: usize = ts.iter().map(count).sum();
                    total += n;
                    per_loop += n;
                }
            }
        }
        (total, per_loop)
    }
}

/// How activation-scale initialization summarizes calibration activations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ScaleRule {
    MaxAbs,
    /// Percentile of |x| in (0, 100], e.g. 99.9.
    Percentile(f64),
}

/// Per-site, per-loop column-group statistics of transformed activations.
pub struct ActStats {
    rule: ScaleRule,
    group_size: usize,
    pub loops: usize,
    max_abs: HashMap<(usize, Slot), Vec<Tensor>>,
    chan_max: HashMap<(usize, Slot), Tensor>,
    values: HashMap<(usize, Slot), Vec<Vec<Vec<f64>>>>,
}

impl ActStats {
    pub fn new(rule: ScaleRule, group_size: usize, loops: usize) -> Self {
        Self {
            rule,
            group_size,
            loops,
            max_abs: HashMap::new(),
            chan_max: HashMap::new(),
            values: HashMap::new(),
        }
    }

    pub(crate) fn record(&mut self, site: SiteId, ht: &Tensor) {
        let groups = ht.cols() / self.group_size;
        let t = site.loop_idx.min(self.loops - 1);
        let entry = self
            .max_abs
            .entry((site.layer, site.slot))
            .or_insert_with(|| vec![Tensor::zeros(1, groups); self.loops]);
        for i in 0..ht.rows() {
            for j in 0..ht.cols() {
                let gj = j / self.group_size;
                let v = ht.get(i, j).abs();
                if v > entry[t].get(0, gj) {
                    entry[t].set(0, gj, v);
                }
            }
        }
        let chans = self
            .chan_max
            .entry((site.layer, site.slot))
            .or_insert_with(|| Tensor::zeros(1, ht.cols()));
        for i in 0..ht.rows() {
            for j in 0..ht.cols() {
                let v = ht.get(i, j).abs();
                if v > chans.get(0, j) {
                    chans.set(0, j, v);
                }
            }
        }
        if matches!(self.rule, ScaleRule::Percentile(_)) {
            let vals = self
                .values
                .entry((site.layer, site.slot))
                .or_insert_with(|| vec![vec![Vec::new(); groups]; self.loops]);
            for i in 0..ht.rows() {
                for j in 0..ht.cols() {
                    vals[t][j / self.group_size].push(ht.get(i, j).abs());
                }
            }
        }
    }

    fn percentile(sorted_pool: &mut Vec<f64>, q: f64) -> f64 {
        sorted_pool.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if sorted_pool.is_empty() {
            return 0.0;
        }
        let rank = ((q / 100.0) * sorted_pool.len() as f64).ceil() as usize;
        sorted_pool[rank.clamp(1, sorted_pool.len()) - 1]
    }

    /// Statistic for one loop (1 x groups).
    pub fn per_loop_stat(&self, layer: usize, slot: Slot, t: usize) -> Result<Tensor> {
        match self.rule {
            ScaleRule::MaxAbs => self
                .max_abs
                .get(&(layer, slot))
                .and_then(|v| v.get(t))
                .cloned()
                .ok_or_else(|| Error::Contract(format!("no stats for layer {layer} loop {t}"))),
            ScaleRule::Percentile(q) => {
                let vals = self
                    .values
                    .get(&(layer, slot))
                    .and_then(|v| v.get(t))
                    .ok_or_else(|| Error::Contract("no percentile stats recorded".into()))?;
                let mut out = Tensor::zeros(1, vals.len());
                for (g, pool) in vals.iter().enumerate() {
                    let mut pool = pool.clone();
                    out.set(0, g, Self::percentile(&mut pool, q));
                }
                Ok(out)
            }
        }
    }

    /// Per-channel max-abs pooled over every loop (1 x features).
    pub fn channel_max(&self, layer: usize, slot: Slot) -> Result<Tensor> {
        self.chan_max
            .get(&(layer, slot))
            .cloned()
            .ok_or_else(|| Error::Contract(format!("no stats for layer {layer} {}", slot.name())))
    }

    /// Statistic pooled over every loop (1 x groups).
    pub fn shared_stat(&self, layer: usize, slot: Slot) -> Result<Tensor> {
        match self.rule {
            ScaleRule::MaxAbs => {
                let per = self
                    .max_abs
                    .get(&(layer, slot))
                    .ok_or_else(|| Error::Contract(format!("no stats for layer {layer}")))?;
                let mut out = per[0].clone();
                for t in per.iter().skip(1) {
                    out = out.zip_map(t, f64::max)?;
                }
                Ok(out)
            }
            ScaleRule::Percentile(q) => {
                let vals = self
                    .values
                    .get(&(layer, slot))
                    .ok_or_else(|| Error::Contract("no percentile stats recorded".into()))?;
                let groups = vals[0].len();
                let mut out = Tensor::zeros(1, groups);
                for g in 0..groups {
                    let mut pool: Vec<f64> =
                        vals.iter().flat_map(|per_loop| per_loop[g].iter().copied()).collect();
                    out.set(0, g, Self::percentile(&mut pool, q));
                }
                Ok(out)
            }
        }
    }
}

enum TransformVars<'g> {
    Identity,
    /// (P for the activation side, P^{-T} for the weight side).
    Mat { p: Var<'g>, p_inv_t: Var<'g> },
}

struct GroupBind<'g> {
    transforms: Vec<TransformVars<'g>>,
    per_loop_tf: bool,
    scales: Vec<Var<'g>>,
    per_loop_sc: bool,
    wq_cache: HashMap<usize, Var<'g>>,
}

/// Graph-side binding of a [`QuantScheme`]: creates Vars for every transform
/// and scale, implements the quantized linear hook, and optionally records
/// transformed-activation statistics.
pub struct SchemeBind<'g> {
    spec: QuantSpec,
    loops: usize,
    extrapolate: bool,
    groups: HashMap<(usize, Slot), GroupBind<'g>>,
    params: Vec<(String, Var<'g>)>,
    pub stats: Option<ActStats>,
}

impl<'g> SchemeBind<'g> {
    pub fn new(g: &'g Graph, scheme: &QuantScheme, trainable: bool) -> Result<Self> {
        Self::with_options(g, scheme, trainable, false, false)
    }

    /// `observe` forces pass-through quantization (stats collection without
    /// quantization noise); `extrapolate` reuses the last calibrated loop
    /// index when running more loops than the scheme was built for.
    pub fn with_options(
        g: &'g Graph,
        scheme: &QuantScheme,
        trainable: bool,
        observe: bool,
        extrapolate: bool,
    ) -> Result<Self> {
        let mut spec = scheme.spec;
        if observe {
            spec = QuantSpec { bits_w: 0, bits_a: 0, ..spec };
        }
        let mut groups = HashMap::new();
        let mut params: Vec<(String, Var<'g>)> = Vec::new();
        for gq in &scheme.groups {
            let base = gq.key();
            let (transforms, per_loop_tf) = match &gq.transform {
                TransformAssign::Shared(t) => (
                    vec![bind_transform(g, &mut params, format!("tf.{base}"), t, trainable)?],
                    false,
                ),
                TransformAssign::PerLoop(ts) => (
                    ts.iter()
                        .enumerate()
                        .map(|(t_idx, t)| {
                            bind_transform(
                                g,
                                &mut params,
                                format!("tf.{base}.t{t_idx}"),
                                t,
                                trainable,
                            )
                        })
                        .collect::<Result<Vec<_>>>()?,
                    true,
                ),
            };
            let (scales, per_loop_sc) = match &gq.scales {
                ScaleAssign::Shared(c) => (
                    vec![bind_scale(g, &mut params, format!("scale.{base}"), c, trainable)?],
                    false,
                ),
                ScaleAssign::PerLoop(cs) => (
                    cs.iter()
                        .enumerate()
                        .map(|(t_idx, c)| {
                            bind_scale(g, &mut params, format!("scale.{base}.t{t_idx}"), c, trainable)
                        })
                        .collect::<Result<Vec<_>>>()?,
                    true,
                ),
            };
            groups.insert(
                (gq.layer, gq.slot),
                GroupBind { transforms, per_loop_tf, scales, per_loop_sc, wq_cache: HashMap::new() },
            );
        }
        Ok(Self { spec, loops: scheme.loops, extrapolate, groups, params, stats: None })
    }

    /// Trainable (key, var) pairs in scheme canonical order.
    pub fn params(&self) -> &[(String, Var<'g>)] {
        &self.params
    }
}

fn bind_transform<'g>(
    g: &'g Graph,
    params: &mut Vec<(String, Var<'g>)>,
    name: String,
    t: &Transform,
    trainable: bool,
) -> Result<TransformVars<'g>> {
    let cond = t.condition()?;
    if cond > 1e8 {
        return Err(Error::Numeric(format!(
            "transform {name} condition number {cond:.3e} exceeds 1e8"
        )));
    }
    let mut lift = |tensor: &Tensor, key: String, train: bool| -> Result<Var<'g>> {
        if train && trainable {
            let v = g.param(tensor.clone())?;
            params.push((key, v));
            Ok(v)
        } else {
            g.constant(tensor.clone())
        }
    };
    Ok(match t {
        Transform::Identity => TransformVars::Identity,
        Transform::Orthogonal(p) => {
            let v = lift(p, name, false)?;
            TransformVars::Mat { p: v, p_inv_t: v }
        }
        Transform::Affine(p) => {
            let v = lift(p, name, true)?;
            TransformVars::Mat { p: v, p_inv_t: v.inverse()?.transpose()? }
        }
        Transform::Kronecker(a, b) => {
            let va = lift(a, format!("{name}.a"), true)?;
            let vb = lift(b, format!("{name}.b"), true)?;
            let p = va.kron(vb)?;
            let p_inv_t = va.inverse()?.transpose()?.kron(vb.inverse()?.transpose()?)?;
            TransformVars::Mat { p, p_inv_t }
        }
    })
}

fn bind_scale<'g>(
    g: &'g Graph,
    params: &mut Vec<(String, Var<'g>)>,
    name: String,
    c: &Tensor,
    trainable: bool,
) -> Result<Var<'g>> {
    if c.data().iter().any(|&v| v <= 0.0) {
        return Err(Error::Param(format!("scale {name} must be positive")));
    }
    if trainable {
        let v = g.param(c.clone())?;
        params.push((name, v));
        Ok(v)
    } else {
        g.constant(c.clone())
    }
}

impl<'g> ForwardHooks<'g> for SchemeBind<'g> {
    fn linear(&mut self, g: &'g Graph, h: Var<'g>, w: Var<'g>, site: SiteId) -> Result<Var<'g>> {
        let spec = self.spec;
        let group_size = spec.group_size;
        let loops = self.loops;
        let extrapolate = self.extrapolate;
        let loop_index = |t: usize, len: usize| -> Result<usize> {
            if t < len {
                Ok(t)
            } else if extrapolate {
                Ok(len - 1)
            } else {
                Err(Error::Contract(format!(
                    "loop index {t} outside calibrated range 0..{len}"
                )))
            }
        };
        if !extrapolate && site.loop_idx >= loops {
            return Err(Error::Contract(format!(
                "loop index {} outside calibrated range 0..{loops}",
                site.loop_idx
            )));
        }
        let gb = self
            .groups
            .get_mut(&(site.layer, site.slot))
            .ok_or_else(|| {
                Error::Contract(format!(
                    "no quantization group for layer {} {}",
                    site.layer,
                    site.slot.name()
                ))
            })?;
        let tf_idx = if gb.per_loop_tf {
            loop_index(site.loop_idx, gb.transforms.len())?
        } else {
            0
        };
        let ht = match &gb.transforms[tf_idx] {
            TransformVars::Identity => h,
            TransformVars::Mat { p, .. } => h.matmul(*p)?,
        };
        if let Some(stats) = &mut self.stats {
            stats.record(site, &ht.value());
        }
        let hq = if spec.bits_a == 0 {
            ht
        } else {
            let sc_idx = if gb.per_loop_sc {
                loop_index(site.loop_idx, gb.scales.len())?
            } else {
                0
            };
            let scales = gb.scales[sc_idx];
            if scales.value().data().iter().any(|&v| v <= 0.0) {
                return Err(Error::Param(format!(
                    "nonpositive activation scale at layer {} {}",
                    site.layer,
                    site.slot.name()
                )));
            }
            let (lo, hi) = q_bounds(spec.bits_a);
            let c = scales.repeat_cols(group_size)?;
            ht.div(c)?.round_ste()?.clip(lo, hi)?.mul(c)?
        };
        let gb = self.groups.get_mut(&(site.layer, site.slot)).unwrap();
        let wq = if let Some(&v) = gb.wq_cache.get(&tf_idx) {
            v
        } else {
            let weff = match &gb.transforms[tf_idx] {
                TransformVars::Identity => w,
                TransformVars::Mat { p_inv_t, .. } => w.matmul(*p_inv_t)?,
            };
            let v = if spec.bits_w == 0 {
                weff
            } else {
                let (lo, hi) = q_bounds(spec.bits_w);
                let sw = g.constant(weight_group_scales(&weff.value(), spec.bits_w, group_size)?)?;
                weff.div(sw)?.round_ste()?.clip(lo, hi)?.mul(sw)?
            };
            gb.wq_cache.insert(tf_idx, v);
            v
        };
        hq.matmul(wq.transpose()?)
    }
}

/// Runs the model under a scheme with no transition adapters.
pub fn quantized_forward(
    model: &LoopedModel,
    scheme: &QuantScheme,
    batch: &TokenBatch,
    record: bool,
) -> Result<Trajectory> {
    quantized_forward_opts(model, scheme, batch, record, false)
}

/// `extrapolate` reuses the last calibrated per-loop transform and scale when
/// the model runs more loops than the scheme was calibrated for.
pub fn quantized_forward_opts(
    model: &LoopedModel,
    scheme: &QuantScheme,
    batch: &TokenBatch,
    record: bool,
    extrapolate: bool,
) -> Result<Trajectory> {
    let g = Graph::new();
    let mv = ModelVars::bind(&g, model, false)?;
    let mut bind = SchemeBind::with_options(&g, scheme, false, false, extrapolate)?;
    let tv = forward_with_hooks(&g, &mv, &model.config, batch, &mut bind, record)?;
    Ok(tv.materialize())
}

/// Collects transformed-activation statistics under the scheme's transforms
/// with quantization forced off (so the trajectory is exactly full-precision).
pub fn collect_act_stats(
    model: &LoopedModel,
    scheme: &QuantScheme,
    batches: &[TokenBatch],
    rule: ScaleRule,
) -> Result<ActStats> {
    if batches.is_empty() {
        return Err(Error::Contract("need at least one calibration batch".into()));
    }
    let mut stats = ActStats::new(rule, scheme.spec.group_size, scheme.loops);
    for batch in batches {
        let g = Graph::new();
        let mv = ModelVars::bind(&g, model, false)?;
        let mut bind = SchemeBind::with_options(&g, scheme, false, true, false)?;
        bind.stats = Some(stats);
        forward_with_hooks(&g, &mv, &model.config, batch, &mut bind, false)?;
        stats = bind.stats.take().expect("stats handed back after forward");
    }
    Ok(stats)
}

/// Standard static PTQ initialization: shared scales from pooled-over-loops
/// statistics (or per-loop when the assignment is already loop-dependent).
pub fn calibrate_static_scales(
    model: &LoopedModel,
    scheme: &mut QuantScheme,
    batches: &[TokenBatch],
    rule: ScaleRule,
) -> Result<()> {
    if scheme.spec.bits_a == 0 {
        return Ok(());
    }
    let stats = collect_act_stats(model, scheme, batches, rule)?;
    let (_, hi) = q_bounds(scheme.spec.bits_a);
    for g in &mut scheme.groups {
        match &mut g.scales {
            ScaleAssign::Shared(c) => {
                *c = stats.shared_stat(g.layer, g.slot)?.map(|m| (m / hi).max(1e-8));
            }
            ScaleAssign::PerLoop(cs) => {
                for (t, c) in cs.iter_mut().enumerate() {
                    *c = stats.per_loop_stat(g.layer, g.slot, t)?.map(|m| (m / hi).max(1e-8));
                }
            }
        }
    }
    Ok(())
}

/// Full-precision forward helper shared by tests and analysis.
pub fn fp_forward(model: &LoopedModel, batch: &TokenBatch, record: bool) -> Result<Trajectory> {
    let g = Graph::new();
    let mv = ModelVars::bind(&g, model, false)?;
    let tv = forward_with_hooks(&g, &mv, &model.config, batch, &mut PlainHooks, record)?;
    Ok(tv.materialize())
}
