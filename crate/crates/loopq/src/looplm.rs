//! The desk-scale looped transformer: one shared stack of L layers applied T
//! times, with the hidden state handed from each loop to the next.
//!
//! Layers are pre-norm: `h += Attn(RMSNorm(h))` then `h += SwiGLU(RMSNorm(h))`,
//! with no learned norm gains. A batch of B sequences of length n is stacked
//! into one (B*n) x d matrix; attention uses a block-diagonal causal mask so
//! sequences never attend across each other.
//!
//! Every matrix product against a weight goes through a [`ForwardHooks`]
//! implementation. The plain hook multiplies directly; the quantizer hook in
//! `quant` interposes transforms and fake quantization at the same four sites
//! per layer (qkv, o_proj, up_gate, down) without this module knowing.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{concat_cols, Graph, Var, IGNORE_TOKEN};
use crate::data::TokenSource;
use crate::optim::{clip_global_norm, Adam};
use crate::tensor::Tensor;
use crate::{Error, Result};

fn default_heads() -> usize {
    2
}

fn default_norm_eps() -> f64 {
    1e-6
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    /// Shared layer count L.
    pub layers: usize,
    /// Loop count T.
    pub loops: usize,
    /// SwiGLU hidden width m; 0 means 2*d.
    #[serde(default)]
    pub mlp_hidden: usize,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

impl ModelConfig {
    pub fn mlp_dim(&self) -> usize {
        if self.mlp_hidden == 0 {
            2 * self.d
        } else {
            self.mlp_hidden
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(Error::Config("vocab must be at least 2".into()));
        }
        if self.d == 0 || self.layers == 0 || self.loops == 0 {
            return Err(Error::Config("d, layers, loops must be positive".into()));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "head count {} must divide width {}",
                self.heads, self.d
            )));
        }
        if self.norm_eps <= 0.0 {
            return Err(Error::Config("norm_eps must be positive".into()));
        }
        Ok(())
    }
}

/// The four weight groups of one shared layer.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    Qkv,
    OProj,
    UpGate,
    Down,
}

impl Slot {
    pub const ALL: [Slot; 4] = [Slot::Qkv, Slot::OProj, Slot::UpGate, Slot::Down];

    pub fn name(self) -> &'static str {
        match self {
            Slot::Qkv => "qkv",
            Slot::OProj => "o_proj",
            Slot::UpGate => "up_gate",
            Slot::Down => "down",
        }
    }

    /// Input feature count of the matmul at this slot.
    pub fn in_dim(self, cfg: &ModelConfig) -> usize {
        match self {
            Slot::Qkv | Slot::OProj | Slot::UpGate => cfg.d,
            Slot::Down => cfg.mlp_dim(),
        }
    }

    /// Output feature count (rows of the stored weight).
    pub fn out_dim(self, cfg: &ModelConfig) -> usize {
        match self {
            Slot::Qkv => 3 * cfg.d,
            Slot::OProj => cfg.d,
            Slot::UpGate => 2 * cfg.mlp_dim(),
            Slot::Down => cfg.d,
        }
    }
}

/// One quantization site: a (layer, slot) weight group used at loop `loop_idx`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SiteId {
    pub layer: usize,
    pub slot: Slot,
    pub loop_idx: usize,
}

/// Weights stored out_features x in_features; applied as `h @ W^T`.
#[derive(Clone, Debug)]
pub struct LayerWeights {
    pub qkv: Tensor,
    pub o_proj: Tensor,
    pub up_gate: Tensor,
    pub down: Tensor,
}

impl LayerWeights {
    pub fn slot(&self, s: Slot) -> &Tensor {
        match s {
            Slot::Qkv => &self.qkv,
            Slot::OProj => &self.o_proj,
            Slot::UpGate => &self.up_gate,
            Slot::Down => &self.down,
        }
    }

    pub fn slot_mut(&mut self, s: Slot) -> &mut Tensor {
        match s {
            Slot::Qkv => &mut self.qkv,
            Slot::OProj => &mut self.o_proj,
            Slot::UpGate => &mut self.up_gate,
            Slot::Down => &mut self.down,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LoopedModel {
    pub config: ModelConfig,
    pub embed: Tensor,
    pub proj: Tensor,
    pub layers: Vec<LayerWeights>,
}

impl LoopedModel {
    /// Deterministic scaled-normal init; layer weights use std 0.02/sqrt(L)
    /// so the T-fold recurrence stays tame at init.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d;
        let m = config.mlp_dim();
        let embed = Tensor::randn(config.vocab, d, 0.02, &mut rng);
        let proj = Tensor::randn(config.vocab, d, 0.02, &mut rng);
        let std = 0.02 / (config.layers as f64).sqrt();
        let layers = (0..config.layers)
            .map(|_| LayerWeights {
                qkv: Tensor::randn(3 * d, d, std, &mut rng),
                o_proj: Tensor::randn(d, d, std, &mut rng),
                up_gate: Tensor::randn(2 * m, d, std, &mut rng),
                down: Tensor::randn(d, m, std, &mut rng),
            })
            .collect();
        Ok(Self { config, embed, proj, layers })
    }

    /// Canonical parameter walk; save/load and the optimizer rely on this
    /// order being stable.
    pub fn visit_params(&self, mut f: impl FnMut(&str, &Tensor)) {
        f("embed", &self.embed);
        f("proj", &self.proj);
        for (i, l) in self.layers.iter().enumerate() {
            for s in Slot::ALL {
                f(&format!("layer{i}.{}", s.name()), l.slot(s));
            }
        }
    }

    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        f("embed", &mut self.embed);
        f("proj", &mut self.proj);
        for (i, l) in self.layers.iter_mut().enumerate() {
            for s in Slot::ALL {
                f(&format!("layer{i}.{}", s.name()), l.slot_mut(s));
            }
        }
    }

    /// Full-precision forward; records all per-layer states when `record`.
    pub fn forward(&self, batch: &TokenBatch, record: bool) -> Result<Trajectory> {
        let g = Graph::new();
        let mv = ModelVars::bind(&g, self, false)?;
        let tv = forward_with_hooks(&g, &mv, &self.config, batch, &mut PlainHooks, record)?;
        Ok(tv.materialize())
    }

    /// One pass of the shared stack on an explicit (batch*seq) x d state.
    pub fn loop_function(&self, h: &Tensor, batch: usize, seq: usize) -> Result<Tensor> {
        if batch == 0 || seq == 0 {
            return Err(Error::Param("loop_function needs a nonempty state".into()));
        }
        if h.shape() != [batch * seq, self.config.d] {
            return Err(Error::Dim(format!(
                "state shape {:?} does not match batch {batch} x seq {seq} x d {}",
                h.shape(),
                self.config.d
            )));
        }
        let g = Graph::new();
        let mv = ModelVars::bind(&g, self, false)?;
        let mask = g.constant(causal_mask(batch, seq))?;
        let mut x = g.constant(h.clone())?;
        for l in 0..self.config.layers {
            x = apply_layer(
                &g,
                &self.config,
                &mv.layers[l],
                x,
                mask,
                &mut PlainHooks,
                SiteId { layer: l, slot: Slot::Qkv, loop_idx: 0 },
            )?;
        }
        Ok(x.value())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    seqs: Vec<Vec<u32>>,
    vocab: usize,
}

impl TokenBatch {
    pub fn new(seqs: Vec<Vec<u32>>, vocab: usize) -> Result<Self> {
        if seqs.is_empty() || seqs[0].is_empty() {
            return Err(Error::Param("token batch must be nonempty".into()));
        }
        let n = seqs[0].len();
        for s in &seqs {
            if s.len() != n {
                return Err(Error::Param("ragged token batch".into()));
            }
            if let Some(&t) = s.iter().find(|&&t| t as usize >= vocab) {
                return Err(Error::Param(format!("token {t} outside vocab {vocab}")));
            }
        }
        Ok(Self { seqs, vocab })
    }

    pub fn batch(&self) -> usize {
        self.seqs.len()
    }

    pub fn seq(&self) -> usize {
        self.seqs[0].len()
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn sequences(&self) -> &[Vec<u32>] {
        &self.seqs
    }

    /// Row-major flattening matching the stacked (B*n) x d state layout.
    pub fn flat(&self) -> Vec<u32> {
        self.seqs.iter().flatten().copied().collect()
    }

    /// Next-token target per stacked row; last position of each sequence is
    /// ignored.
    pub fn next_token_targets(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.batch() * self.seq());
        for s in &self.seqs {
            for j in 0..s.len() {
                out.push(if j + 1 < s.len() { s[j + 1] } else { IGNORE_TOKEN });
            }
        }
        out
    }
}

/// Hidden-state history of one forward run, as graph nodes.
pub struct TrajectoryVars<'g> {
    /// State entering loop t for t < T; last entry is the final state.
    pub entries: Vec<Var<'g>>,
    /// State at the end of each loop, before any transition adapter.
    pub loop_ends: Vec<Var<'g>>,
    /// All H_{t,l} for l in 0..=L when recording.
    pub states: Option<Vec<Vec<Var<'g>>>>,
    pub logits: Var<'g>,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub entries: Vec<Tensor>,
    pub loop_ends: Vec<Tensor>,
    pub states: Option<Vec<Vec<Tensor>>>,
    pub logits: Tensor,
}

impl TrajectoryVars<'_> {
    pub fn materialize(&self) -> Trajectory {
        Trajectory {
            entries: self.entries.iter().map(|v| v.value()).collect(),
            loop_ends: self.loop_ends.iter().map(|v| v.value()).collect(),
            states: self
                .states
                .as_ref()
                .map(|s| s.iter().map(|row| row.iter().map(|v| v.value()).collect()).collect()),
            logits: self.logits.value(),
        }
    }
}

impl Trajectory {
    pub fn loops(&self) -> usize {
        self.loop_ends.len()
    }

    pub fn final_state(&self) -> &Tensor {
        self.entries.last().expect("trajectory has a final state")
    }
}

/// Interposition point for quantizers and adapters.
pub trait ForwardHooks<'g> {
    /// Computes the linear map `h @ W^T` for one site, possibly transformed
    /// and quantized.
    fn linear(&mut self, g: &'g Graph, h: Var<'g>, w: Var<'g>, site: SiteId) -> Result<Var<'g>>;

    /// Maps the state handed from loop t to loop t+1.
    fn boundary(&mut self, _g: &'g Graph, h: Var<'g>, _t: usize) -> Result<Var<'g>> {
        Ok(h)
    }
}

/// Full-precision pass-through.
pub struct PlainHooks;

impl<'g> ForwardHooks<'g> for PlainHooks {
    fn linear(&mut self, _g: &'g Graph, h: Var<'g>, w: Var<'g>, _site: SiteId) -> Result<Var<'g>> {
        h.matmul(w.transpose()?)
    }
}

pub struct LayerVars<'g> {
    pub qkv: Var<'g>,
    pub o_proj: Var<'g>,
    pub up_gate: Var<'g>,
    pub down: Var<'g>,
}

impl<'g> LayerVars<'g> {
    pub fn slot(&self, s: Slot) -> Var<'g> {
        match s {
            Slot::Qkv => self.qkv,
            Slot::OProj => self.o_proj,
            Slot::UpGate => self.up_gate,
            Slot::Down => self.down,
        }
    }
}

pub struct ModelVars<'g> {
    pub embed: Var<'g>,
    pub proj: Var<'g>,
    pub layers: Vec<LayerVars<'g>>,
}

impl<'g> ModelVars<'g> {
    pub fn bind(g: &'g Graph, model: &LoopedModel, trainable: bool) -> Result<Self> {
        let lift = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        Ok(Self {
            embed: lift(&model.embed)?,
            proj: lift(&model.proj)?,
            layers: model
                .layers
                .iter()
                .map(|l| {
                    Ok(LayerVars {
                        qkv: lift(&l.qkv)?,
                        o_proj: lift(&l.o_proj)?,
                        up_gate: lift(&l.up_gate)?,
                        down: lift(&l.down)?,
                    })
                })
                .collect::<Result<_>>()?,
        })
    }

    /// Vars in the same order as [`LoopedModel::visit_params`].
    pub fn params(&self) -> Vec<(String, Var<'g>)> {
        let mut out = vec![("embed".to_string(), self.embed), ("proj".to_string(), self.proj)];
        for (i, l) in self.layers.iter().enumerate() {
            for s in Slot::ALL {
                out.push((format!("layer{i}.{}", s.name()), l.slot(s)));
            }
        }
        out
    }
}

/// Additive attention mask: 0 where position i may attend to j (same
/// sequence, j <= i), a large negative elsewhere.
pub fn causal_mask(batch: usize, seq: usize) -> Tensor {
    const MASKED: f64 = -1e9;
    let n = batch * seq;
    let mut m = Tensor::full(n, n, MASKED);
    for b in 0..batch {
        for i in 0..seq {
            for j in 0..=i {
                m.set(b * seq + i, b * seq + j, 0.0);
            }
        }
    }
    m
}

pub(crate) fn rms_norm<'g>(g: &'g Graph, x: Var<'g>, eps: f64) -> Result<Var<'g>> {
    let ms = x.square()?.mean_rows()?;
    let denom = ms.add(g.constant(Tensor::scalar(eps))?)?.sqrt()?;
    x.div(denom)
}

#[allow(clippy::too_many_arguments)]
fn attention<'g, H: ForwardHooks<'g>>(
    g: &'g Graph,
    cfg: &ModelConfig,
    lv: &LayerVars<'g>,
    x: Var<'g>,
    mask: Var<'g>,
    hooks: &mut H,
    layer: usize,
    t: usize,
) -> Result<Var<'g>> {
    let d = cfg.d;
    let dh = d / cfg.heads;
    let qkv = hooks.linear(g, x, lv.qkv, SiteId { layer, slot: Slot::Qkv, loop_idx: t })?;
    let q = qkv.slice_cols(0, d)?;
    let k = qkv.slice_cols(d, d)?;
    let v = qkv.slice_cols(2 * d, d)?;
    let mut heads = Vec::with_capacity(cfg.heads);
    for hih in 0..cfg.heads {
        let qh = q.slice_cols(hih * dh, dh)?;
        let kh = k.slice_cols(hih * dh, dh)?;
        let vh = v.slice_cols(hih * dh, dh)?;
        let scores = qh
            .matmul(kh.transpose()?)?
            .scale(1.0 / (dh as f64).sqrt())?
            .add(mask)?;
        heads.push(scores.softmax_rows()?.matmul(vh)?);
    }
    let merged = concat_cols(g, &heads)?;
    hooks.linear(g, merged, lv.o_proj, SiteId { layer, slot: Slot::OProj, loop_idx: t })
}

fn mlp<'g, H: ForwardHooks<'g>>(
    g: &'g Graph,
    cfg: &ModelConfig,
    lv: &LayerVars<'g>,
    x: Var<'g>,
    hooks: &mut H,
    layer: usize,
    t: usize,
) -> Result<Var<'g>> {
    let m = cfg.mlp_dim();
    let ug = hooks.linear(g, x, lv.up_gate, SiteId { layer, slot: Slot::UpGate, loop_idx: t })?;
    let up = ug.slice_cols(0, m)?;
    let gate = ug.slice_cols(m, m)?;
    let act = up.mul(gate.mul(gate.sigmoid()?)?)?;
    hooks.linear(g, act, lv.down, SiteId { layer, slot: Slot::Down, loop_idx: t })
}

fn apply_layer<'g, H: ForwardHooks<'g>>(
    g: &'g Graph,
    cfg: &ModelConfig,
    lv: &LayerVars<'g>,
    h: Var<'g>,
    mask: Var<'g>,
    hooks: &mut H,
    site: SiteId,
) -> Result<Var<'g>> {
    let (layer, t) = (site.layer, site.loop_idx);
    let attn_in = rms_norm(g, h, cfg.norm_eps)?;
    let h = h.add(attention(g, cfg, lv, attn_in, mask, hooks, layer, t)?)?;
    let mlp_in = rms_norm(g, h, cfg.norm_eps)?;
    h.add(mlp(g, cfg, lv, mlp_in, hooks, layer, t)?)
}

/// Runs the T-loop recurrence on the graph, threading every weight matmul
/// through `hooks`. `entries[t]` is the state entering loop t (post-adapter
/// for t > 0); the last entry is the final state fed to the projection.
pub fn forward_with_hooks<'g, H: ForwardHooks<'g>>(
    g: &'g Graph,
    mv: &ModelVars<'g>,
    cfg: &ModelConfig,
    batch: &TokenBatch,
    hooks: &mut H,
    record: bool,
) -> Result<TrajectoryVars<'g>> {
    cfg.validate()?;
    if batch.vocab() != cfg.vocab {
        return Err(Error::Contract(format!(
            "batch vocab {} vs model vocab {}",
            batch.vocab(),
            cfg.vocab
        )));
    }
    let mask = g.constant(causal_mask(batch.batch(), batch.seq()))?;
    let mut h = mv.embed.embed_rows(&batch.flat())?;
    let mut entries = vec![h];
    let mut loop_ends = Vec::with_capacity(cfg.loops);
    let mut states: Option<Vec<Vec<Var<'g>>>> = record.then(Vec::new);
    for t in 0..cfg.loops {
        let mut per_layer = vec![h];
        for l in 0..cfg.layers {
            h = apply_layer(
                g,
                cfg,
                &mv.layers[l],
                h,
                mask,
                hooks,
                SiteId { layer: l, slot: Slot::Qkv, loop_idx: t },
            )
            .map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("loop {t} layer {l}: {m}")),
                other => other,
            })?;
            per_layer.push(h);
        }
        loop_ends.push(h);
        if t + 1 < cfg.loops {
            h = hooks.boundary(g, h, t)?;
        }
        entries.push(h);
        if let Some(s) = &mut states {
            s.push(per_layer);
        }
    }
    let logits = h.matmul(mv.proj.transpose()?)?;
    Ok(TrajectoryVars { entries, loop_ends, states, logits })
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    #[serde(default = "default_pretrain_lr")]
    pub lr: f64,
    #[serde(default = "default_pretrain_batch")]
    pub batch: usize,
    #[serde(default = "default_pretrain_seq")]
    pub seq: usize,
    #[serde(default = "default_grad_clip")]
    pub grad_clip: f64,
}

fn default_pretrain_lr() -> f64 {
    3e-3
}

fn default_pretrain_batch() -> usize {
    8
}

fn default_pretrain_seq() -> usize {
    16
}

fn default_grad_clip() -> f64 {
    1.0
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 0,
            lr: default_pretrain_lr(),
            batch: default_pretrain_batch(),
            seq: default_pretrain_seq(),
            grad_clip: default_grad_clip(),
        }
    }
}

/// Next-token training with Adam; returns the per-step loss curve.
pub fn pretrain(
    model: &mut LoopedModel,
    source: &mut TokenSource,
    cfg: &PretrainConfig,
) -> Result<Vec<f64>> {
    if source.vocab() != model.config.vocab {
        return Err(Error::Contract("data vocab does not match model".into()));
    }
    let mut opt = Adam::new();
    let mut curve = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let batch = source.sample_batch(cfg.batch, cfg.seq)?;
        let g = Graph::new();
        let mv = ModelVars::bind(&g, model, true)?;
        let config = model.config.clone();
        let tv = forward_with_hooks(&g, &mv, &config, &batch, &mut PlainHooks, false)?;
        let loss = tv.logits.cross_entropy_rows(&batch.next_token_targets())?;
        curve.push(loss.value().get(0, 0));
        g.backward(loss)?;
        let params = mv.params();
        let grads: Vec<(String, Tensor)> = params
            .iter()
            .map(|(k, v)| {
                let gr = v
                    .grad()
                    .ok_or_else(|| Error::Contract(format!("missing gradient for {k}")))?;
                Ok((k.clone(), gr))
            })
            .collect::<Result<_>>()?;
        let mut clipped: Vec<(&str, Tensor)> =
            grads.iter().map(|(k, g)| (k.as_str(), g.clone())).collect();
        clip_global_norm(&mut clipped, cfg.grad_clip);
        let by_key: std::collections::HashMap<&str, &Tensor> =
            clipped.iter().map(|(k, g)| (*k, g)).collect();
        let mut step_err = None;
        model.visit_params_mut(|key, t| {
            if step_err.is_some() {
                return;
            }
            if let Some(gr) = by_key.get(key) {
                if let Err(e) = opt.step(key, t, gr, cfg.lr) {
                    step_err = Some(e);
                }
            }
        });
        if let Some(e) = step_err {
            return Err(e);
        }
    }
    Ok(curve)
}
