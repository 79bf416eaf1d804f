//! The network: an instant-interest gate over trigger vs. target attention
//! pooling, masked multi-head self-attention over the behavior sequence, a
//! hard (trigger-category) attention path, a trigger/target interaction
//! block, and a sigmoid prediction head.
//!
//! All forward code runs batched: sequences are stacked as `[B*T, d]`
//! matrices with boolean masks, and per-sample zeroing uses exact {0,1}
//! block scaling so padding and empty histories never leak into predictions
//! or gradients.
//!
//! Empty-sequence convention: masked softmax rejects all-masked rows, so
//! batches mark key 0 of an empty sample as temporarily valid and carry a
//! per-sample `live` indicator (1.0 = has at least one real row). Pooled
//! outputs are multiplied by the indicator, which restores the exact-zero
//! contract for empty sequences and kills the fake key's gradient.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::grad_check;
use crate::autodiff::{Graph, TensorId};
use crate::data::{Behavior, ItemRef, RawSample};
use crate::encoding::{encode_sample, EncodedSample, Hyper};
use crate::error::{Error, Result};
use crate::params::{glorot_init, uniform_init, ParamSet};

/// Embedding tables start uniform in [-lim, lim].
const EMBED_LIM: f64 = 0.05;
/// Initial negative slope for the learned rectifiers.
const PRELU_SLOPE: f64 = 0.25;
const LN_EPS: f64 = 1e-6;
/// Predictions are clamped into [floor, 1-floor] before the log loss.
const PROB_FLOOR: f64 = 1e-12;

// ── Ablation configuration ───────────────────────────────────────────────────

/// Switches that drop individual components from the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationConfig {
    /// Gate the soft trigger/target mix with learned probabilities; when
    /// false the two pooled vectors are averaged with fixed weights 0.5/0.5.
    #[serde(default = "default_true")]
    pub use_ui2m: bool,
    /// Feed time-interval embeddings to self-attention and attention units;
    /// when false every time embedding is a zero vector.
    #[serde(default = "default_true")]
    pub use_temporal: bool,
    /// Include the trigger/target interaction vector in the final head.
    #[serde(default = "default_true")]
    pub use_interaction: bool,
    /// Include the hard (trigger-category sub-sequence) pooled vector.
    #[serde(default = "default_true")]
    pub use_hard: bool,
    /// Include the soft (self-attended full sequence) mixed vector.
    #[serde(default = "default_true")]
    pub use_soft: bool,
}

fn default_true() -> bool {
    true
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            use_ui2m: true,
            use_temporal: true,
            use_interaction: true,
            use_hard: true,
            use_soft: true,
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.use_hard && !self.use_soft {
            return Err(Error::InvalidArgument(
                "at least one of use_hard/use_soft must be enabled".into(),
            ));
        }
        Ok(())
    }

    /// True when the gate network (and the page-context table it reads) is
    /// actually part of the forward pass.
    pub fn has_gate(&self) -> bool {
        self.use_soft && self.use_ui2m
    }
}

/// The named single-component ablations plus the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Full,
    NoUi2m,
    NoTim,
    NoIl,
    NoUhim,
    NoUsim,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoUi2m,
        Variant::NoTim,
        Variant::NoIl,
        Variant::NoUhim,
        Variant::NoUsim,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "FULL",
            Variant::NoUi2m => "NO-UI2M",
            Variant::NoTim => "NO-TIM",
            Variant::NoIl => "NO-IL",
            Variant::NoUhim => "NO-UHIM",
            Variant::NoUsim => "NO-USIM",
        }
    }

    pub fn config(self) -> AblationConfig {
        let mut c = AblationConfig::default();
        match self {
            Variant::Full => {}
            Variant::NoUi2m => c.use_ui2m = false,
            Variant::NoTim => c.use_temporal = false,
            Variant::NoIl => c.use_interaction = false,
            Variant::NoUhim => c.use_hard = false,
            Variant::NoUsim => c.use_soft = false,
        }
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('_', "-");
        match norm.as_str() {
            "FULL" => Ok(Variant::Full),
            "NO-UI2M" => Ok(Variant::NoUi2m),
            "NO-TIM" => Ok(Variant::NoTim),
            "NO-IL" => Ok(Variant::NoIl),
            "NO-UHIM" => Ok(Variant::NoUhim),
            "NO-USIM" => Ok(Variant::NoUsim),
            _ => Err(Error::InvalidArgument(format!(
                "unknown variant {s:?}; expected one of FULL, NO-UI2M, NO-TIM, NO-IL, NO-UHIM, NO-USIM"
            ))),
        }
    }
}

// ── Batching ─────────────────────────────────────────────────────────────────

/// A stack of encoded samples with flattened `[B*T]` index/mask arrays.
///
/// Sequence lengths are trimmed to the longest valid length in the batch
/// (minimum 1), which changes nothing numerically — trimmed slots are always
/// padding — but skips dead work. `*_attn_mask` are the attention masks with
/// the fake-key adjustment for empty samples; `*_live` are the per-sample
/// {0,1} indicators described in the module docs.
#[derive(Debug, Clone)]
pub struct Batch {
    pub b: usize,
    /// Trimmed behavior-sequence length (≥ 1).
    pub t: usize,
    /// Trimmed hard-sequence length (≥ 1).
    pub th: usize,
    pub user_idx: Vec<usize>,
    pub country_idx: Vec<usize>,
    pub page_idx: Vec<usize>,
    pub trig_item: Vec<usize>,
    pub trig_cat: Vec<usize>,
    pub trig_comp: Vec<usize>,
    pub targ_item: Vec<usize>,
    pub targ_cat: Vec<usize>,
    pub targ_comp: Vec<usize>,
    pub beh_item: Vec<usize>,
    pub beh_cat: Vec<usize>,
    pub beh_comp: Vec<usize>,
    pub beh_time: Vec<usize>,
    /// True where the slot holds a real behavior.
    pub beh_mask: Vec<bool>,
    pub beh_attn_mask: Vec<bool>,
    pub beh_live: Vec<f64>,
    pub hard_item: Vec<usize>,
    pub hard_cat: Vec<usize>,
    pub hard_comp: Vec<usize>,
    pub hard_time: Vec<usize>,
    pub hard_mask: Vec<bool>,
    pub hard_attn_mask: Vec<bool>,
    pub hard_live: Vec<f64>,
    pub labels: Vec<f64>,
    pub pages: Vec<u32>,
    pub same_category: Vec<bool>,
}

impl Batch {
    pub fn from_samples(samples: &[EncodedSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let cap_t = samples[0].behavior_items.len();
        let cap_h = samples[0].hard_items.len();
        for s in samples {
            if s.behavior_items.len() != cap_t || s.hard_items.len() != cap_h {
                return Err(Error::shape(
                    "batch",
                    "samples encoded under different sequence caps",
                ));
            }
        }
        let t = samples
            .iter()
            .map(|s| s.valid_len)
            .max()
            .unwrap()
            .clamp(1, cap_t);
        let th = samples
            .iter()
            .map(|s| s.hard_len)
            .max()
            .unwrap()
            .clamp(1, cap_h);

        let b = samples.len();
        let mut batch = Batch {
            b,
            t,
            th,
            user_idx: Vec::with_capacity(b),
            country_idx: Vec::with_capacity(b),
            page_idx: Vec::with_capacity(b),
            trig_item: Vec::with_capacity(b),
            trig_cat: Vec::with_capacity(b),
            trig_comp: Vec::with_capacity(b),
            targ_item: Vec::with_capacity(b),
            targ_cat: Vec::with_capacity(b),
            targ_comp: Vec::with_capacity(b),
            beh_item: Vec::with_capacity(b * t),
            beh_cat: Vec::with_capacity(b * t),
            beh_comp: Vec::with_capacity(b * t),
            beh_time: Vec::with_capacity(b * t),
            beh_mask: Vec::with_capacity(b * t),
            beh_attn_mask: Vec::with_capacity(b * t),
            beh_live: Vec::with_capacity(b),
            hard_item: Vec::with_capacity(b * th),
            hard_cat: Vec::with_capacity(b * th),
            hard_comp: Vec::with_capacity(b * th),
            hard_time: Vec::with_capacity(b * th),
            hard_mask: Vec::with_capacity(b * th),
            hard_attn_mask: Vec::with_capacity(b * th),
            hard_live: Vec::with_capacity(b),
            labels: Vec::with_capacity(b),
            pages: Vec::with_capacity(b),
            same_category: Vec::with_capacity(b),
        };
        for s in samples {
            batch.user_idx.push(s.user_idx);
            batch.country_idx.push(s.country_idx);
            batch.page_idx.push(s.page_idx);
            batch.trig_item.push(s.trigger_item);
            batch.trig_cat.push(s.trigger_category);
            batch.trig_comp.push(s.trigger_company);
            batch.targ_item.push(s.target_item);
            batch.targ_cat.push(s.target_category);
            batch.targ_comp.push(s.target_company);
            for j in 0..t {
                batch.beh_item.push(s.behavior_items[j]);
                batch.beh_cat.push(s.behavior_categories[j]);
                batch.beh_comp.push(s.behavior_companies[j]);
                batch.beh_time.push(s.time_buckets[j]);
                batch.beh_mask.push(s.behavior_mask[j]);
                batch
                    .beh_attn_mask
                    .push(if s.valid_len == 0 { j == 0 } else { s.behavior_mask[j] });
            }
            batch.beh_live.push(if s.valid_len == 0 { 0.0 } else { 1.0 });
            for j in 0..th {
                batch.hard_item.push(s.hard_items[j]);
                batch.hard_cat.push(s.hard_categories[j]);
                batch.hard_comp.push(s.hard_companies[j]);
                batch.hard_time.push(s.hard_time_buckets[j]);
                batch.hard_mask.push(s.hard_mask[j]);
                batch
                    .hard_attn_mask
                    .push(if s.hard_len == 0 { j == 0 } else { s.hard_mask[j] });
            }
            batch.hard_live.push(if s.hard_len == 0 { 0.0 } else { 1.0 });
            batch.labels.push(s.label);
            batch.pages.push(s.page);
            batch.same_category.push(s.same_category);
        }
        Ok(batch)
    }
}

// ── Bound-parameter views ────────────────────────────────────────────────────

/// Graph ids of a two-layer rectified MLP.
#[derive(Debug, Clone, Copy)]
pub struct TwoLayerIds {
    pub w1: TensorId,
    pub b1: TensorId,
    pub s1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
    pub s2: TensorId,
}

/// Two rectified hidden layers plus a linear output layer. Heads that feed
/// straight into a softmax carry no output bias (`b_out` is `None`): a
/// shared shift of the logits cannot change the softmax, so such a bias
/// would be a parameter with an identically-zero gradient.
#[derive(Debug, Clone, Copy)]
pub struct HeadIds {
    pub hidden: TwoLayerIds,
    pub w_out: TensorId,
    pub b_out: Option<TensorId>,
}

/// One softmax-normalized attention weighting recorded during a forward
/// pass, kept so tests and probes can audit the distributions directly.
#[derive(Debug, Clone)]
pub struct AttnTrace {
    pub name: String,
    /// Weight tensor; rows along the last axis are distributions.
    pub weights: TensorId,
    /// Validity mask, one entry per weight element.
    pub mask: Vec<bool>,
}

/// Everything a forward pass exposes.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[B, 1]` predicted click probabilities.
    pub preds: TensorId,
    /// `[B, 2]` gate probabilities (trigger, target), when the gate runs.
    pub p_probs: Option<TensorId>,
    pub attention: Vec<AttnTrace>,
}

// ── Shared MLP plumbing ──────────────────────────────────────────────────────

/// `x·w + b`.
pub fn dense(g: &mut Graph, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

/// Two dense layers, each through a learned-slope rectifier.
pub fn two_layer(g: &mut Graph, x: TensorId, ids: &TwoLayerIds) -> Result<TensorId> {
    let h1 = dense(g, x, ids.w1, ids.b1)?;
    let h1 = g.prelu(h1, ids.s1)?;
    let h2 = dense(g, h1, ids.w2, ids.b2)?;
    g.prelu(h2, ids.s2)
}

/// Two rectified layers, then a linear projection.
pub fn mlp_head(g: &mut Graph, x: TensorId, ids: &HeadIds) -> Result<TensorId> {
    let h = two_layer(g, x, &ids.hidden)?;
    match ids.b_out {
        Some(b) => dense(g, h, ids.w_out, b),
        None => g.matmul(h, ids.w_out),
    }
}

/// Multiplies row i by 1.0/0.0 according to `mask`, making padding rows
/// exactly zero no matter what the lookup produced.
pub fn mask_zero(g: &mut Graph, rows: TensorId, mask: &[bool]) -> Result<TensorId> {
    let factors: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    g.block_scale(rows, factors)
}

// ── The model ────────────────────────────────────────────────────────────────

/// Hyperparameters, ablation switches, and the named parameter tensors.
///
/// Only tensors the configured forward pass actually reads are registered,
/// so checkpoints and optimizer state match the active architecture exactly.
/// Registration order is fixed, which pins down the initialization draws.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub hyper: Hyper,
    pub ablation: AblationConfig,
    pub set: ParamSet,
}

fn push_embed(set: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, rows: usize, dim: usize) {
    let data = uniform_init(rng, rows * dim, EMBED_LIM);
    set.push(name, vec![rows, dim], data);
}

fn push_weight(set: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, d_in: usize, d_out: usize) {
    let data = glorot_init(rng, d_in, d_out);
    set.push(name, vec![d_in, d_out], data);
}

fn push_two_layer(
    set: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d_in: usize,
    h1: usize,
    h2: usize,
) {
    push_weight(set, rng, &format!("{prefix}.w1"), d_in, h1);
    set.push(format!("{prefix}.b1"), vec![h1], vec![0.0; h1]);
    set.push(format!("{prefix}.s1"), vec![h1], vec![PRELU_SLOPE; h1]);
    push_weight(set, rng, &format!("{prefix}.w2"), h1, h2);
    set.push(format!("{prefix}.b2"), vec![h2], vec![0.0; h2]);
    set.push(format!("{prefix}.s2"), vec![h2], vec![PRELU_SLOPE; h2]);
}

#[allow(clippy::too_many_arguments)]
fn push_head(
    set: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d_in: usize,
    h1: usize,
    h2: usize,
    d_out: usize,
    out_bias: bool,
) {
    push_two_layer(set, rng, prefix, d_in, h1, h2);
    push_weight(set, rng, &format!("{prefix}.w3"), h2, d_out);
    if out_bias {
        set.push(format!("{prefix}.b3"), vec![d_out], vec![0.0; d_out]);
    }
}

impl ModelParams {
    /// Initializes all tensors for the given dimensions and ablation:
    /// embeddings uniform in [-0.05, 0.05], dense layers fan-scaled uniform,
    /// rectifier slopes 0.25, biases zero, normalization gain 1 / bias 0.
    pub fn init(hyper: Hyper, ablation: AblationConfig, seed: u64) -> Result<Self> {
        hyper.validate()?;
        ablation.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        let v = hyper.vocab.clone();
        let d_model = hyper.d_model();

        push_embed(&mut set, &mut rng, "embed.item", v.items, hyper.d_item);
        push_embed(&mut set, &mut rng, "embed.category", v.categories, hyper.d_category);
        push_embed(&mut set, &mut rng, "embed.company", v.companies, hyper.d_company);
        push_embed(&mut set, &mut rng, "embed.user", v.users, hyper.d_user);
        push_embed(&mut set, &mut rng, "embed.country", v.countries, hyper.d_country);
        if ablation.has_gate() {
            push_embed(&mut set, &mut rng, "embed.page", v.pages, hyper.d_context);
        }
        if ablation.use_temporal {
            push_embed(
                &mut set,
                &mut rng,
                "embed.time",
                hyper.max_time_bucket + 1,
                hyper.d_time,
            );
        }

        if ablation.has_gate() {
            let d_in = hyper.d_profile() + hyper.d_context + 2 * d_model;
            let (h1, h2) = hyper.ui2m_hidden;
            push_head(&mut set, &mut rng, "ui2m", d_in, h1, h2, 2, false);
        }

        let d_attn_in = 4 * d_model + hyper.d_time;
        let (a1, a2) = hyper.attn_hidden;
        if ablation.use_soft {
            let d_x = d_model + hyper.d_time;
            for h in 0..hyper.heads {
                push_weight(&mut set, &mut rng, &format!("mhsa.wq.{h}"), d_x, hyper.d_head);
                push_weight(&mut set, &mut rng, &format!("mhsa.wk.{h}"), d_x, hyper.d_head);
                push_weight(&mut set, &mut rng, &format!("mhsa.wv.{h}"), d_x, hyper.d_head);
            }
            push_weight(&mut set, &mut rng, "mhsa.wo", hyper.heads * hyper.d_head, d_model);
            set.push("mhsa.ln_gain", vec![d_model], vec![1.0; d_model]);
            set.push("mhsa.ln_bias", vec![d_model], vec![0.0; d_model]);
            push_head(&mut set, &mut rng, "attn.soft_trigger", d_attn_in, a1, a2, 1, false);
            push_head(&mut set, &mut rng, "attn.soft_target", d_attn_in, a1, a2, 1, false);
        }
        if ablation.use_hard {
            push_head(&mut set, &mut rng, "attn.hard_target", d_attn_in, a1, a2, 1, false);
        }
        if ablation.use_interaction {
            let (i1, i2) = hyper.interaction_hidden;
            push_two_layer(&mut set, &mut rng, "il", 3 * d_model, i1, i2);
        }

        let final_in = hyper.d_profile()
            + d_model * (ablation.use_soft as usize + ablation.use_hard as usize)
            + hyper.interaction_hidden.1 * ablation.use_interaction as usize;
        let (f1, f2) = hyper.final_hidden;
        push_head(&mut set, &mut rng, "final", final_in, f1, f2, 1, true);

        Ok(ModelParams { hyper, ablation, set })
    }

    /// Bound-graph id of a named tensor. Panics on unregistered names, which
    /// would be an internal wiring bug, not a runtime condition.
    pub fn tensor_id(&self, ids: &[TensorId], name: &str) -> TensorId {
        ids[self
            .set
            .index_of(name)
            .unwrap_or_else(|| panic!("parameter {name} not registered"))]
    }

    pub fn two_layer_ids(&self, ids: &[TensorId], prefix: &str) -> TwoLayerIds {
        TwoLayerIds {
            w1: self.tensor_id(ids, &format!("{prefix}.w1")),
            b1: self.tensor_id(ids, &format!("{prefix}.b1")),
            s1: self.tensor_id(ids, &format!("{prefix}.s1")),
            w2: self.tensor_id(ids, &format!("{prefix}.w2")),
            b2: self.tensor_id(ids, &format!("{prefix}.b2")),
            s2: self.tensor_id(ids, &format!("{prefix}.s2")),
        }
    }

    pub fn head_ids(&self, ids: &[TensorId], prefix: &str) -> HeadIds {
        HeadIds {
            hidden: self.two_layer_ids(ids, prefix),
            w_out: self.tensor_id(ids, &format!("{prefix}.w3")),
            b_out: self.set.index_of(&format!("{prefix}.b3")).map(|i| ids[i]),
        }
    }

    /// Gathers and concatenates the three per-item field embeddings.
    pub fn item_embed(
        &self,
        g: &mut Graph,
        ids: &[TensorId],
        items: &[usize],
        cats: &[usize],
        comps: &[usize],
    ) -> Result<TensorId> {
        let ei = g.gather(self.tensor_id(ids, "embed.item"), items)?;
        let ec = g.gather(self.tensor_id(ids, "embed.category"), cats)?;
        let eo = g.gather(self.tensor_id(ids, "embed.company"), comps)?;
        g.concat(&[ei, ec, eo], 1)
    }

    /// Time-interval embeddings for a flat index list, zeroed at padding;
    /// all-zero constants when the temporal component is ablated.
    fn time_embed(
        &self,
        g: &mut Graph,
        ids: &[TensorId],
        buckets: &[usize],
        mask: &[bool],
    ) -> Result<TensorId> {
        if self.ablation.use_temporal {
            let raw = g.gather(self.tensor_id(ids, "embed.time"), buckets)?;
            mask_zero(g, raw, mask)
        } else {
            let n = buckets.len();
            Ok(g.constant(vec![0.0; n * self.hyper.d_time], vec![n, self.hyper.d_time]))
        }
    }

    /// The instant-interest gate: maps user profile, page context, trigger
    /// embedding, and the summed trigger-category behaviors to two softmax
    /// probabilities `[p_trigger, p_target]` per sample.
    pub fn ui2m_forward(
        &self,
        g: &mut Graph,
        ids: &[TensorId],
        e_u: TensorId,
        e_c: TensorId,
        e_tr: TensorId,
        hard_sum: TensorId,
    ) -> Result<TensorId> {
        let inp = g.concat(&[e_u, e_c, e_tr, hard_sum], 1)?;
        let head = self.head_ids(ids, "ui2m");
        let logits = mlp_head(g, inp, &head)?;
        let n = g.data(logits).len();
        g.masked_softmax(logits, &vec![true; n])
    }

    /// Multi-head self-attention over the behavior sequence with residual,
    /// dropout, and layer normalization. `e_b` is `[B*T, d_model]` (padding
    /// rows zero), `e_t` is `[B*T, d_time]`. Keys are masked with
    /// `attn_mask`; rows of samples with no valid behaviors come out exactly
    /// zero via `live`.
    #[allow(clippy::too_many_arguments)]
    pub fn mhsa_forward(
        &self,
        g: &mut Graph,
        ids: &[TensorId],
        e_b: TensorId,
        e_t: TensorId,
        b: usize,
        t: usize,
        attn_mask: &[bool],
        live: &[f64],
        training: bool,
        dropout_rate: f64,
        rng: &mut ChaCha8Rng,
        traces: &mut Vec<AttnTrace>,
    ) -> Result<TensorId> {
        let h = &self.hyper;
        let d_head = h.d_head;
        let x = g.concat(&[e_b, e_t], 1)?;

        // Every query row attends over the same per-sample key mask.
        let mut key_mask = Vec::with_capacity(b * t * t);
        for s in 0..b {
            let row = &attn_mask[s * t..(s + 1) * t];
            for _ in 0..t {
                key_mask.extend_from_slice(row);
            }
        }

        let mut ctxs = Vec::with_capacity(h.heads);
        for head in 0..h.heads {
            let wq = self.tensor_id(ids, &format!("mhsa.wq.{head}"));
            let wk = self.tensor_id(ids, &format!("mhsa.wk.{head}"));
            let wv = self.tensor_id(ids, &format!("mhsa.wv.{head}"));
            let q = g.matmul(x, wq)?;
            let k = g.matmul(x, wk)?;
            let v = g.matmul(x, wv)?;
            let q = g.reshape(q, vec![b, t, d_head])?;
            let k = g.reshape(k, vec![b, t, d_head])?;
            let v = g.reshape(v, vec![b, t, d_head])?;
            let scores = g.bmm(q, k, true)?;
            let scaled = g.scale(scores, 1.0 / (d_head as f64).sqrt());
            let attn = g.masked_softmax(scaled, &key_mask)?;
            traces.push(AttnTrace {
                name: format!("mhsa.h{head}"),
                weights: attn,
                mask: key_mask.clone(),
            });
            let ctx = g.bmm(attn, v, false)?;
            ctxs.push(g.reshape(ctx, vec![b * t, d_head])?);
        }
        let cat = g.concat(&ctxs, 1)?;
        let proj = g.matmul(cat, self.tensor_id(ids, "mhsa.wo"))?;
        let res = g.add(proj, e_b)?;
        let dropped = g.dropout(res, dropout_rate, training, rng)?;
        let gain = self.tensor_id(ids, "mhsa.ln_gain");
        let bias = self.tensor_id(ids, "mhsa.ln_bias");
        let normed = g.layer_norm(dropped, gain, bias, LN_EPS)?;
        let row_live: Vec<f64> = live.iter().flat_map(|&f| std::iter::repeat_n(f, t)).collect();
        g.block_scale(normed, row_live)
    }

    /// Scores each sequence position against a query with a small MLP over
    /// `[seq_j, time_j, q, seq_j⊙q, seq_j−q]`, softmax-normalizes over valid
    /// positions, and returns the weighted sum of sequence rows. Samples
    /// with `live == 0.0` yield an exactly-zero vector.
    #[allow(clippy::too_many_arguments)]
    pub fn attention_unit(
        &self,
        g: &mut Graph,
        unit: &HeadIds,
        query: TensorId,
        seq: TensorId,
        time: TensorId,
        b: usize,
        t: usize,
        attn_mask: &[bool],
        live: &[f64],
        name: &str,
        traces: &mut Vec<AttnTrace>,
    ) -> Result<TensorId> {
        let d = *g.shape(seq).last().unwrap();
        let q_rep = g.repeat_rows(query, t)?;
        let prod = g.hadamard(seq, q_rep)?;
        let diff = g.sub(seq, q_rep)?;
        let inp = g.concat(&[seq, time, q_rep, prod, diff], 1)?;
        let logits = mlp_head(g, inp, unit)?;
        let logits = g.reshape(logits, vec![b, t])?;
        let weights = g.masked_softmax(logits, attn_mask)?;
        traces.push(AttnTrace {
            name: name.to_string(),
            weights,
            mask: attn_mask.to_vec(),
        });
        let w3 = g.reshape(weights, vec![b, 1, t])?;
        let s3 = g.reshape(seq, vec![b, t, d])?;
        let pooled = g.bmm(w3, s3, false)?;
        let pooled = g.reshape(pooled, vec![b, d])?;
        g.block_scale(pooled, live.to_vec())
    }

    /// Trigger/target cross features: a two-layer MLP over
    /// `[e_ta, e_tr, e_tr⊙e_ta]`.
    pub fn interaction(
        &self,
        g: &mut Graph,
        ids: &[TensorId],
        e_tr: TensorId,
        e_ta: TensorId,
    ) -> Result<TensorId> {
        let prod = g.hadamard(e_tr, e_ta)?;
        let inp = g.concat(&[e_ta, e_tr, prod], 1)?;
        let tl = self.two_layer_ids(ids, "il");
        two_layer(g, inp, &tl)
    }

    /// Batched forward pass. `ids` must come from `self.set.bind(g)`.
    /// Deterministic given (params, batch, rng state); the rng is only
    /// consumed when `training` and the dropout rate is positive.
    pub fn forward(
        &self,
        g: &mut Graph,
        ids: &[TensorId],
        batch: &Batch,
        training: bool,
        dropout_rate: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardOutput> {
        let ab = self.ablation;
        let (b, t, th) = (batch.b, batch.t, batch.th);
        let d_model = self.hyper.d_model();

        let e_user = g.gather(self.tensor_id(ids, "embed.user"), &batch.user_idx)?;
        let e_country = g.gather(self.tensor_id(ids, "embed.country"), &batch.country_idx)?;
        let e_u = g.concat(&[e_user, e_country], 1)?;
        let e_tr = self.item_embed(g, ids, &batch.trig_item, &batch.trig_cat, &batch.trig_comp)?;
        let e_ta = self.item_embed(g, ids, &batch.targ_item, &batch.targ_cat, &batch.targ_comp)?;

        // Hard-sequence embeddings serve both the hard attention path and
        // the gate's sum-pooled input.
        let e_h = if ab.use_hard || ab.has_gate() {
            let raw = self.item_embed(g, ids, &batch.hard_item, &batch.hard_cat, &batch.hard_comp)?;
            Some(mask_zero(g, raw, &batch.hard_mask)?)
        } else {
            None
        };

        let mut traces = Vec::new();
        let mut p_probs = None;
        let mut e_mix = None;
        if ab.use_soft {
            let raw_b = self.item_embed(g, ids, &batch.beh_item, &batch.beh_cat, &batch.beh_comp)?;
            let e_b = mask_zero(g, raw_b, &batch.beh_mask)?;
            let e_t = self.time_embed(g, ids, &batch.beh_time, &batch.beh_mask)?;
            let s = self.mhsa_forward(
                g,
                ids,
                e_b,
                e_t,
                b,
                t,
                &batch.beh_attn_mask,
                &batch.beh_live,
                training,
                dropout_rate,
                rng,
                &mut traces,
            )?;
            let trigger_unit = self.head_ids(ids, "attn.soft_trigger");
            let e_tr_s = self.attention_unit(
                g,
                &trigger_unit,
                e_tr,
                s,
                e_t,
                b,
                t,
                &batch.beh_attn_mask,
                &batch.beh_live,
                "soft_trigger",
                &mut traces,
            )?;
            let target_unit = self.head_ids(ids, "attn.soft_target");
            let e_ta_s = self.attention_unit(
                g,
                &target_unit,
                e_ta,
                s,
                e_t,
                b,
                t,
                &batch.beh_attn_mask,
                &batch.beh_live,
                "soft_target",
                &mut traces,
            )?;
            let gate = if ab.use_ui2m {
                let e_c = g.gather(self.tensor_id(ids, "embed.page"), &batch.page_idx)?;
                let eh3 = g.reshape(e_h.unwrap(), vec![b, th, d_model])?;
                let hard_sum = g.sum_axis(eh3, 1)?;
                let probs = self.ui2m_forward(g, ids, e_u, e_c, e_tr, hard_sum)?;
                p_probs = Some(probs);
                Some(probs)
            } else {
                None
            };
            e_mix = Some(fuse(g, gate, e_tr_s, e_ta_s)?);
        }

        let e_ta_hard = if ab.use_hard {
            let e_ht = self.time_embed(g, ids, &batch.hard_time, &batch.hard_mask)?;
            let hard_unit = self.head_ids(ids, "attn.hard_target");
            Some(self.attention_unit(
                g,
                &hard_unit,
                e_ta,
                e_h.unwrap(),
                e_ht,
                b,
                th,
                &batch.hard_attn_mask,
                &batch.hard_live,
                "hard_target",
                &mut traces,
            )?)
        } else {
            None
        };

        let e_i = if ab.use_interaction {
            Some(self.interaction(g, ids, e_tr, e_ta)?)
        } else {
            None
        };

        let mut parts = Vec::new();
        if let Some(x) = e_mix {
            parts.push(x);
        }
        if let Some(x) = e_ta_hard {
            parts.push(x);
        }
        if let Some(x) = e_i {
            parts.push(x);
        }
        parts.push(e_u);
        let head_in = g.concat(&parts, 1)?;
        let final_head = self.head_ids(ids, "final");
        let logits = mlp_head(g, head_in, &final_head)?;
        let preds = g.sigmoid(logits);
        Ok(ForwardOutput { preds, p_probs, attention: traces })
    }

    /// Single-graph convenience: encode-batched samples -> probabilities.
    pub fn predict(&self, samples: &[EncodedSample]) -> Result<Vec<f64>> {
        let batch = Batch::from_samples(samples)?;
        let mut g = Graph::new();
        let ids = self.set.bind(&mut g);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut g, &ids, &batch, false, 0.0, &mut rng)?;
        Ok(g.data(out.preds).to_vec())
    }
}

/// Mixes the two pooled interest vectors. With a gate tensor (`[B,2]`
/// probabilities) the mix is `p_tr·e_tr_s + p_ta·e_ta_s`; without one both
/// sides get weight 0.5.
pub fn fuse(
    g: &mut Graph,
    gate: Option<TensorId>,
    e_tr_s: TensorId,
    e_ta_s: TensorId,
) -> Result<TensorId> {
    match gate {
        Some(p) => {
            let b = g.shape(p)[0];
            let p_tr = g.slice_last(p, 0, 1)?;
            let p_tr = g.reshape(p_tr, vec![b])?;
            let p_ta = g.slice_last(p, 1, 1)?;
            let p_ta = g.reshape(p_ta, vec![b])?;
            let left = g.row_mul(e_tr_s, p_tr)?;
            let right = g.row_mul(e_ta_s, p_ta)?;
            g.add(left, right)
        }
        None => {
            let s = g.add(e_tr_s, e_ta_s)?;
            Ok(g.scale(s, 0.5))
        }
    }
}

/// Mean binary cross-entropy over the batch, with predictions clamped to
/// [1e-12, 1-1e-12] so the logs stay finite.
pub fn bce_loss(g: &mut Graph, preds: TensorId, labels: &[f64]) -> Result<TensorId> {
    let shape = g.shape(preds).to_vec();
    let n: usize = shape.iter().product();
    if n == 0 || n != labels.len() {
        return Err(Error::shape(
            "bce_loss",
            format!("{} predictions vs {} labels", n, labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::InvalidArgument(format!(
            "labels must be 0 or 1, got {bad}"
        )));
    }
    let y = g.constant(labels.to_vec(), shape.clone());
    let ones = g.constant(vec![1.0; n], shape);
    let p = g.clamp(preds, PROB_FLOOR, 1.0 - PROB_FLOOR)?;
    let ln_p = g.ln(p);
    let pos = g.hadamard(y, ln_p)?;
    let one_minus_p = g.sub(ones, p)?;
    let one_minus_y = g.sub(ones, y)?;
    let ln_omp = g.ln(one_minus_p);
    let neg = g.hadamard(one_minus_y, ln_omp)?;
    let total = g.add(pos, neg)?;
    let s = g.sum_all(total);
    Ok(g.scale(s, -1.0 / n as f64))
}

/// Deterministic random sample within a vocabulary; drives the
/// self-verification path and the tests.
fn rand_raw(rng: &mut ChaCha8Rng, hyper: &Hyper, n_behaviors: usize) -> RawSample {
    let v = &hyper.vocab;
    let ts = 1_000_000i64;
    let behaviors = (0..n_behaviors)
        .map(|i| Behavior {
            item_id: rng.random_range(1..v.items as u64),
            category_id: rng.random_range(1..v.categories as u64),
            company_id: rng.random_range(1..v.companies as u64),
            ts: ts - 1_000 * (n_behaviors - i) as i64,
        })
        .collect();
    RawSample {
        user_id: rng.random_range(1..v.users as u64),
        country_id: rng.random_range(1..v.countries as u64),
        behaviors,
        trigger: ItemRef {
            item_id: rng.random_range(1..v.items as u64),
            category_id: rng.random_range(1..v.categories as u64),
            company_id: rng.random_range(1..v.companies as u64),
        },
        target: ItemRef {
            item_id: rng.random_range(1..v.items as u64),
            category_id: rng.random_range(1..v.categories as u64),
            company_id: rng.random_range(1..v.companies as u64),
        },
        page: rng.random_range(1..=8),
        ts,
        label: u8::from(rng.random::<f64>() < 0.5),
    }
}

/// Verifies the full backward pass against central finite differences at a
/// well-spread random parameter point, returning the worst relative error
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)` over every
/// parameter of the full model at reduced dimensions.
///
/// The weights are redrawn uniformly from [-0.6, 0.6] (layer-norm gains
/// shifted to straddle 1) instead of keeping the training initialization:
/// near init many true gradients sit below what f64 central differences can
/// resolve (~4e-12 absolute at step 1e-5), so a relative check there would
/// measure rounding noise rather than correctness. The spread point drives
/// both rectifier branches of every unit with gradients above that floor.
pub fn verification_grad_check(spread_seed: u64, step: f64) -> Result<f64> {
    let hyper = Hyper::tiny();
    let mut m = ModelParams::init(hyper.clone(), AblationConfig::default(), 91)?;
    let mut redraw = ChaCha8Rng::seed_from_u64(spread_seed);
    for t in m.set.tensors_mut() {
        let gain_like = t.name.ends_with("ln_gain");
        for v in t.data.iter_mut() {
            *v = redraw.random_range(-0.6..0.6) + if gain_like { 1.0 } else { 0.0 };
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    // Mix of empty, short, and overlong histories.
    let samples: Vec<EncodedSample> = [0usize, 3, 4, 2, 1, 4, 6, 2]
        .iter()
        .map(|&len| encode_sample(&rand_raw(&mut rng, &hyper, len), &hyper))
        .collect::<Result<_>>()?;
    let batch = Batch::from_samples(&samples)?;
    grad_check(
        &m.set,
        |g, ids| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let out = m.forward(g, ids, &batch, false, 0.0, &mut rng)?;
            bce_loss(g, out.preds, &batch.labels)
        },
        step,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Behavior, ItemRef, RawSample};
    use crate::encoding::encode_sample;
    use rand::Rng;

    fn zero_tensor(params: &mut ModelParams, name: &str) {
        let t = params
            .set
            .tensors_mut()
            .iter_mut()
            .find(|t| t.name == name)
            .expect("tensor exists");
        t.data.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Random raw sample whose ids fit the tiny vocabularies.
    fn tiny_samples(seed: u64, n: usize) -> Vec<EncodedSample> {
        let hyper = Hyper::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let len = rng.random_range(0..=hyper.max_seq + 2);
                encode_sample(&rand_raw(&mut rng, &hyper, len), &hyper).unwrap()
            })
            .collect()
    }

    #[test]
    fn zeroed_final_layer_predicts_half() {
        let mut m =
            ModelParams::init(Hyper::tiny(), AblationConfig::default(), 11).unwrap();
        zero_tensor(&mut m, "final.w3");
        zero_tensor(&mut m, "final.b3");
        let preds = m.predict(&tiny_samples(1, 5)).unwrap();
        assert!(preds.iter().all(|&p| p == 0.5), "{preds:?}");
    }

    #[test]
    fn zeroed_gate_head_gives_even_split() {
        let mut m =
            ModelParams::init(Hyper::tiny(), AblationConfig::default(), 11).unwrap();
        zero_tensor(&mut m, "ui2m.w3");
        let samples = tiny_samples(2, 4);
        let batch = Batch::from_samples(&samples).unwrap();
        let mut g = Graph::new();
        let ids = m.set.bind(&mut g);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = m.forward(&mut g, &ids, &batch, false, 0.0, &mut rng).unwrap();
        let p = g.data(out.p_probs.unwrap());
        assert!(p.iter().all(|&x| x == 0.5), "{p:?}");
    }

    #[test]
    fn gate_rows_sum_to_one() {
        let m = ModelParams::init(Hyper::tiny(), AblationConfig::default(), 3).unwrap();
        let samples = tiny_samples(4, 16);
        let batch = Batch::from_samples(&samples).unwrap();
        let mut g = Graph::new();
        let ids = m.set.bind(&mut g);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = m.forward(&mut g, &ids, &batch, false, 0.0, &mut rng).unwrap();
        for row in g.data(out.p_probs.unwrap()).chunks_exact(2) {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-9);
            assert!(row[0] > 0.0 && row[1] > 0.0);
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let m = ModelParams::init(Hyper::tiny(), AblationConfig::default(), 3).unwrap();
        let samples = tiny_samples(5, 12);
        let batch = Batch::from_samples(&samples).unwrap();
        let mut g = Graph::new();
        let ids = m.set.bind(&mut g);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = m.forward(&mut g, &ids, &batch, false, 0.0, &mut rng).unwrap();
        assert_eq!(out.attention.len(), 5); // 2 heads + 3 units
        for tr in &out.attention {
            let d = *g.shape(tr.weights).last().unwrap();
            for (row, mrow) in g.data(tr.weights).chunks_exact(d).zip(tr.mask.chunks_exact(d)) {
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9, "{}: row sums to {sum}", tr.name);
                for (&w, &keep) in row.iter().zip(mrow) {
                    assert!(w >= 0.0);
                    if !keep {
                        assert_eq!(w, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn duplicated_sample_gets_identical_prediction() {
        let m = ModelParams::init(Hyper::tiny(), AblationConfig::default(), 9).unwrap();
        let samples = tiny_samples(6, 3);
        let batch = vec![samples[0].clone(), samples[1].clone(), samples[0].clone()];
        let preds = m.predict(&batch).unwrap();
        assert_eq!(preds[0].to_bits(), preds[2].to_bits());
    }

    #[test]
    fn padding_content_is_invisible() {
        let hyper = Hyper::tiny();
        let m = ModelParams::init(hyper.clone(), AblationConfig::default(), 13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        // One long sample keeps the batch width above the short sample's
        // valid length so its padding slots actually enter the computation.
        let long = encode_sample(&rand_raw(&mut rng, &hyper, hyper.max_seq), &hyper).unwrap();
        let short = encode_sample(&rand_raw(&mut rng, &hyper, 1), &hyper).unwrap();
        let mut corrupted = short.clone();
        for j in short.valid_len..hyper.max_seq {
            corrupted.behavior_items[j] = 3;
            corrupted.behavior_categories[j] = 2;
            corrupted.behavior_companies[j] = 1;
            corrupted.time_buckets[j] = 5;
        }
        for j in short.hard_len..hyper.max_hard_seq {
            corrupted.hard_items[j] = 2;
            corrupted.hard_categories[j] = 1;
        }
        let clean = m.predict(&[long.clone(), short]).unwrap();
        let dirty = m.predict(&[long, corrupted]).unwrap();
        assert_eq!(clean[1].to_bits(), dirty[1].to_bits());
        assert_eq!(clean[0].to_bits(), dirty[0].to_bits());
    }

    #[test]
    fn empty_history_is_handled() {
        let hyper = Hyper::tiny();
        let m = ModelParams::init(hyper.clone(), AblationConfig::default(), 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let empty = encode_sample(&rand_raw(&mut rng, &hyper, 0), &hyper).unwrap();
        let full = encode_sample(&rand_raw(&mut rng, &hyper, 3), &hyper).unwrap();
        let preds = m.predict(&[empty, full]).unwrap();
        assert!(preds.iter().all(|p| p.is_finite() && *p > 0.0 && *p < 1.0));
    }

    #[test]
    fn attention_unit_single_row_returns_it_exactly() {
        let hyper = Hyper::tiny();
        let m = ModelParams::init(hyper.clone(), AblationConfig::default(), 31).unwrap();
        let mut g = Graph::new();
        let ids = m.set.bind(&mut g);
        let unit = m.head_ids(&ids, "attn.soft_trigger");
        let d = hyper.d_model();
        let seq_data: Vec<f64> = (0..d).map(|i| 0.3 * i as f64 - 0.9).collect();
        let seq = g.constant(seq_data.clone(), vec![1, d]);
        let time = g.constant(vec![0.2; hyper.d_time], vec![1, hyper.d_time]);
        let query = g.constant(vec![0.4; d], vec![1, d]);
        let mut traces = Vec::new();
        let pooled = m
            .attention_unit(&mut g, &unit, query, seq, time, 1, 1, &[true], &[1.0], "t", &mut traces)
            .unwrap();
        assert_eq!(g.data(pooled), &seq_data[..]);
        assert_eq!(g.data(traces[0].weights), &[1.0]);
    }

    #[test]
    fn attention_unit_identical_rows_average_evenly() {
        let hyper = Hyper::tiny();
        let m = ModelParams::init(hyper.clone(), AblationConfig::default(), 31).unwrap();
        let mut g = Graph::new();
        let ids = m.set.bind(&mut g);
        let unit = m.head_ids(&ids, "attn.soft_target");
        let d = hyper.d_model();
        let row: Vec<f64> = (0..d).map(|i| (i as f64 - 0.5) * 0.1).collect();
        let mut seq_data = row.clone();
        seq_data.extend_from_slice(&row);
        let seq = g.constant(seq_data, vec![2, d]);
        let time = g.constant(vec![0.0; 2 * hyper.d_time], vec![2, hyper.d_time]);
        let query = g.constant(vec![0.7; d], vec![1, d]);
        let mut traces = Vec::new();
        let pooled = m
            .attention_unit(
                &mut g, &unit, query, seq, time, 1, 2, &[true, true], &[1.0], "t", &mut traces,
            )
            .unwrap();
        assert_eq!(g.data(traces[0].weights), &[0.5, 0.5]);
        assert_eq!(g.data(pooled), &row[..]);
    }

    #[test]
    fn attention_unit_dead_sample_is_exactly_zero() {
        let hyper = Hyper::tiny();
        let m = ModelParams::init(hyper.clone(), AblationConfig::default(), 31).unwrap();
        let mut g = Graph::new();
        let ids = m.set.bind(&mut g);
        let unit = m.head_ids(&ids, "attn.hard_target");
        let d = hyper.d_model();
        // Fake key 0 is marked valid, but the live indicator is 0.
        let seq = g.constant(vec![0.0; d], vec![1, d]);
        let time = g.constant(vec![0.0; hyper.d_time], vec![1, hyper.d_time]);
        let query = g.constant(vec![0.9; d], vec![1, d]);
        let mut traces = Vec::new();
        let pooled = m
            .attention_unit(&mut g, &unit, query, seq, time, 1, 1, &[true], &[0.0], "t", &mut traces)
            .unwrap();
        assert!(g.data(pooled).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn mhsa_single_position_matches_manual_path() {
        let hyper = Hyper::tiny();
        let m = ModelParams::init(hyper.clone(), AblationConfig::default(), 41).unwrap();
        let mut g = Graph::new();
        let ids = m.set.bind(&mut g);
        let d = hyper.d_model();
        let e_b_data: Vec<f64> = (0..d).map(|i| 0.1 * (i as f64 + 1.0)).collect();
        let e_t_data: Vec<f64> = (0..hyper.d_time).map(|i| -0.2 * (i as f64 + 1.0)).collect();
        let e_b = g.constant(e_b_data, vec![1, d]);
        let e_t = g.constant(e_t_data, vec![1, hyper.d_time]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut traces = Vec::new();
        let s = m
            .mhsa_forward(
                &mut g, &ids, e_b, e_t, 1, 1, &[true], &[1.0], false, 0.0, &mut rng, &mut traces,
            )
            .unwrap();
        // Single key: every head's attention matrix is [[1]].
        for tr in &traces {
            assert_eq!(g.data(tr.weights), &[1.0]);
        }
        // With weight 1 the context is exactly V, so the block reduces to
        // layer_norm(e_b + concat_h(x·Wv_h)·Wo).
        let x = g.concat(&[e_b, e_t], 1).unwrap();
        let vs: Vec<TensorId> = (0..hyper.heads)
            .map(|h| g.matmul(x, m.tensor_id(&ids, &format!("mhsa.wv.{h}"))).unwrap())
            .collect();
        let cat = g.concat(&vs, 1).unwrap();
        let proj = g.matmul(cat, m.tensor_id(&ids, "mhsa.wo")).unwrap();
        let res = g.add(proj, e_b).unwrap();
        let gain = m.tensor_id(&ids, "mhsa.ln_gain");
        let bias = m.tensor_id(&ids, "mhsa.ln_bias");
        let expected = g.layer_norm(res, gain, bias, 1e-6).unwrap();
        assert_eq!(g.data(s), g.data(expected));
    }

    #[test]
    fn mhsa_dead_sample_rows_are_zero() {
        let hyper = Hyper::tiny();
        let m = ModelParams::init(hyper.clone(), AblationConfig::default(), 41).unwrap();
        let mut g = Graph::new();
        let ids = m.set.bind(&mut g);
        let t = 3;
        let e_b = g.constant(vec![0.0; t * hyper.d_model()], vec![t, hyper.d_model()]);
        let e_t = g.constant(vec![0.0; t * hyper.d_time], vec![t, hyper.d_time]);
        let mask = [true, false, false]; // fake key 0
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut traces = Vec::new();
        let s = m
            .mhsa_forward(
                &mut g, &ids, e_b, e_t, 1, t, &mask, &[0.0], false, 0.0, &mut rng, &mut traces,
            )
            .unwrap();
        assert!(g.data(s).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn permuting_behaviors_without_time_leaves_prediction() {
        let hyper = Hyper::tiny();
        let ablation = AblationConfig {
            use_temporal: false,
            ..AblationConfig::default()
        };
        let m = ModelParams::init(hyper.clone(), ablation, 51).unwrap();
        let mk = |order: &[usize]| {
            let items = [(2u64, 1u64), (3, 2), (4, 1), (5, 3)];
            let behaviors: Vec<Behavior> = order
                .iter()
                .map(|&i| Behavior {
                    item_id: items[i].0,
                    category_id: items[i].1,
                    company_id: 1,
                    ts: 500, // equal timestamps keep any order valid
                })
                .collect();
            let raw = RawSample {
                user_id: 1,
                country_id: 1,
                behaviors,
                trigger: ItemRef { item_id: 2, category_id: 1, company_id: 2 },
                target: ItemRef { item_id: 3, category_id: 1, company_id: 1 },
                page: 2,
                ts: 1_000,
                label: 1,
            };
            encode_sample(&raw, &hyper).unwrap()
        };
        let a = m.predict(&[mk(&[0, 1, 2, 3])]).unwrap()[0];
        let b = m.predict(&[mk(&[2, 0, 3, 1])]).unwrap()[0];
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    #[test]
    fn forward_is_deterministic_under_dropout() {
        let m = ModelParams::init(Hyper::tiny(), AblationConfig::default(), 61).unwrap();
        let samples = tiny_samples(7, 8);
        let batch = Batch::from_samples(&samples).unwrap();
        let run = |seed: u64| {
            let mut g = Graph::new();
            let ids = m.set.bind(&mut g);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = m.forward(&mut g, &ids, &batch, true, 0.1, &mut rng).unwrap();
            g.data(out.preds).to_vec()
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }

    #[test]
    fn untrained_loss_is_near_coin_flip() {
        let m = ModelParams::init(Hyper::tiny(), AblationConfig::default(), 71).unwrap();
        let mut samples = tiny_samples(9, 64);
        for (i, s) in samples.iter_mut().enumerate() {
            s.label = (i % 2) as f64;
        }
        let batch = Batch::from_samples(&samples).unwrap();
        let mut g = Graph::new();
        let ids = m.set.bind(&mut g);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = m.forward(&mut g, &ids, &batch, false, 0.0, &mut rng).unwrap();
        let loss = bce_loss(&mut g, out.preds, &batch.labels).unwrap();
        assert!((g.value(loss) - std::f64::consts::LN_2).abs() < 0.05);
    }

    #[test]
    fn loss_hand_examples() {
        let mut g = Graph::new();
        let p = g.constant(vec![0.5], vec![1, 1]);
        let l = bce_loss(&mut g, p, &[1.0]).unwrap();
        assert!((g.value(l) - std::f64::consts::LN_2).abs() < 1e-12);

        let p = g.constant(vec![0.9, 0.1], vec![2, 1]);
        let l = bce_loss(&mut g, p, &[1.0, 0.0]).unwrap();
        assert!((g.value(l) - 0.105360516).abs() < 1e-6);

        // Saturated but clamped: loss collapses to ~0 instead of inf.
        let p = g.constant(vec![1.0, 0.0], vec![2, 1]);
        let l = bce_loss(&mut g, p, &[1.0, 0.0]).unwrap();
        assert!(g.value(l).abs() < 1e-9);

        let p = g.constant(vec![0.5], vec![1, 1]);
        assert!(bce_loss(&mut g, p, &[0.3]).is_err());
        assert!(bce_loss(&mut g, p, &[1.0, 0.0]).is_err());
    }

    #[test]
    fn fuse_examples() {
        let mut g = Graph::new();
        let d = 4;
        let tr = g.constant(vec![2.0, 0.0, 1.0, -1.0], vec![1, d]);
        let ta = g.constant(vec![0.0, 2.0, 1.0, 3.0], vec![1, d]);

        let gate_all_trigger = g.constant(vec![1.0, 0.0], vec![1, 2]);
        let mix = fuse(&mut g, Some(gate_all_trigger), tr, ta).unwrap();
        assert_eq!(g.data(mix), g.data(tr));

        let gate_even = g.constant(vec![0.5, 0.5], vec![1, 2]);
        let mix = fuse(&mut g, Some(gate_even), tr, ta).unwrap();
        assert_eq!(g.data(mix), &[1.0, 1.0, 1.0, 1.0]);

        // Identical inputs are a fixed point no matter the gate.
        let gate_skew = g.constant(vec![0.9, 0.1], vec![1, 2]);
        let mix = fuse(&mut g, Some(gate_skew), tr, tr).unwrap();
        assert_eq!(g.data(mix), g.data(tr));

        let mix = fuse(&mut g, None, tr, ta).unwrap();
        assert_eq!(g.data(mix), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn interaction_is_order_sensitive() {
        let hyper = Hyper::tiny();
        let m = ModelParams::init(hyper.clone(), AblationConfig::default(), 81).unwrap();
        let mut g = Graph::new();
        let ids = m.set.bind(&mut g);
        let d = hyper.d_model();
        let a = g.constant((0..d).map(|i| 0.1 * i as f64 + 0.1).collect(), vec![1, d]);
        let b = g.constant((0..d).map(|i| -0.2 * i as f64 - 0.3).collect(), vec![1, d]);
        let ab = m.interaction(&mut g, &ids, a, b).unwrap();
        let ba = m.interaction(&mut g, &ids, b, a).unwrap();
        assert_ne!(g.data(ab), g.data(ba));
    }

    #[test]
    fn ablation_variants_register_expected_tensors() {
        let hyper = Hyper::tiny();
        let has = |m: &ModelParams, name: &str| m.set.get(name).is_some();
        let samples = tiny_samples(10, 4);

        for variant in Variant::ALL {
            let m = ModelParams::init(hyper.clone(), variant.config(), 5).unwrap();
            let preds = m.predict(&samples).unwrap();
            assert!(
                preds.iter().all(|&p| p > 0.0 && p < 1.0),
                "{variant}: preds out of range"
            );

            let c = variant.config();
            assert_eq!(has(&m, "embed.time"), c.use_temporal, "{variant}");
            assert_eq!(has(&m, "ui2m.w1"), c.use_soft && c.use_ui2m, "{variant}");
            assert_eq!(has(&m, "embed.page"), c.use_soft && c.use_ui2m, "{variant}");
            assert_eq!(has(&m, "mhsa.wo"), c.use_soft, "{variant}");
            assert_eq!(has(&m, "attn.soft_trigger.w1"), c.use_soft, "{variant}");
            assert_eq!(has(&m, "attn.hard_target.w1"), c.use_hard, "{variant}");
            assert_eq!(has(&m, "il.w1"), c.use_interaction, "{variant}");

            let expected_in = hyper.d_profile()
                + hyper.d_model() * (c.use_soft as usize + c.use_hard as usize)
                + hyper.interaction_hidden.1 * c.use_interaction as usize;
            assert_eq!(m.set.get("final.w1").unwrap().shape[0], expected_in, "{variant}");
        }
    }

    #[test]
    fn default_dims_produce_stated_shapes() {
        let hyper = Hyper::default();
        let m = ModelParams::init(hyper.clone(), AblationConfig::default(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = encode_sample(&rand_raw(&mut rng, &hyper, 20), &hyper).unwrap();
        let batch = Batch::from_samples(std::slice::from_ref(&enc)).unwrap();
        assert_eq!(batch.t, 20);

        let mut g = Graph::new();
        let ids = m.set.bind(&mut g);
        let e_b = m
            .item_embed(&mut g, &ids, &batch.beh_item, &batch.beh_cat, &batch.beh_comp)
            .unwrap();
        assert_eq!(g.shape(e_b), &[20, 72]);
        let e_t = g
            .gather(m.tensor_id(&ids, "embed.time"), &batch.beh_time)
            .unwrap();
        assert_eq!(g.shape(e_t), &[20, 36]);
        let e_user = g.gather(m.tensor_id(&ids, "embed.user"), &batch.user_idx).unwrap();
        let e_country = g
            .gather(m.tensor_id(&ids, "embed.country"), &batch.country_idx)
            .unwrap();
        let e_u = g.concat(&[e_user, e_country], 1).unwrap();
        assert_eq!(g.shape(e_u), &[1, 36]);
        let e_c = g.gather(m.tensor_id(&ids, "embed.page"), &batch.page_idx).unwrap();
        assert_eq!(g.shape(e_c), &[1, 10]);
        assert_eq!(m.set.get("ui2m.w1").unwrap().shape, vec![190, 72]);
        assert_eq!(m.set.get("attn.soft_trigger.w1").unwrap().shape, vec![324, 80]);
        assert_eq!(m.set.get("mhsa.wq.0").unwrap().shape, vec![108, 36]);
        assert_eq!(m.set.get("mhsa.wo").unwrap().shape, vec![72, 72]);
        assert_eq!(m.set.get("il.w1").unwrap().shape, vec![216, 144]);
        assert_eq!(m.set.get("final.w1").unwrap().shape, vec![252, 200]);
    }

    #[test]
    fn batch_trims_to_longest_sample() {
        let samples = vec![
            tiny_samples(12, 1).remove(0),
            tiny_samples(13, 1).remove(0),
        ];
        let batch = Batch::from_samples(&samples).unwrap();
        let want_t = samples.iter().map(|s| s.valid_len).max().unwrap().max(1);
        let want_h = samples.iter().map(|s| s.hard_len).max().unwrap().max(1);
        assert_eq!(batch.t, want_t);
        assert_eq!(batch.th, want_h);
        assert_eq!(batch.beh_item.len(), 2 * batch.t);
        assert!(Batch::from_samples(&[]).is_err());
    }

    #[test]
    fn variant_labels_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.label().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("no_tim".parse::<Variant>().unwrap(), Variant::NoTim);
        assert!("bogus".parse::<Variant>().is_err());
        assert!(AblationConfig {
            use_hard: false,
            use_soft: false,
            ..AblationConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let max_rel = verification_grad_check(1, 1e-5).unwrap();
        assert!(max_rel < 1e-4, "max relative error {max_rel}");
    }

}
