//! Raw samples -> fixed-width index/mask form.
//!
//! All categorical features become table indices here; the embedding lookups
//! themselves happen inside the model so that gradients reach the tables.
//! Index 0 of every vocabulary is reserved for out-of-vocabulary ids, so
//! generators emit 1-based ids.
//!
//! Sequences are right-padded: the valid prefix is `0..valid_len`, and the
//! boolean masks mirror that. Padding slots hold index 0 with mask `false`;
//! the model multiplies gathered padding rows to exactly zero, which is what
//! makes predictions bit-identical under arbitrary padding content.

use serde::{Deserialize, Serialize};

use crate::data::RawSample;
use crate::error::{Error, Result};

/// Vocabulary sizes, including the reserved OOV row 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub items: usize,
    pub categories: usize,
    pub companies: usize,
    pub users: usize,
    pub countries: usize,
    pub pages: usize,
}

/// Model dimensions and sequence caps.
///
/// The item embedding is a concatenation of id/category/company parts
/// (`d_item + d_category + d_company = d_model`), and the user profile is
/// id/country (`d_user + d_country`). `heads * d_head` must equal `d_model`
/// so the concatenated attention heads map back onto item width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub d_item: usize,
    pub d_category: usize,
    pub d_company: usize,
    pub d_user: usize,
    pub d_country: usize,
    pub d_context: usize,
    pub d_time: usize,
    /// Max behavior-sequence length kept per sample (most recent wins).
    pub max_seq: usize,
    /// Max trigger-category sub-sequence length.
    pub max_hard_seq: usize,
    /// Seconds per time-interval bucket.
    pub time_factor: i64,
    /// Largest bucket index; longer gaps clamp here.
    pub max_time_bucket: usize,
    pub heads: usize,
    pub d_head: usize,
    pub attn_hidden: (usize, usize),
    pub ui2m_hidden: (usize, usize),
    pub interaction_hidden: (usize, usize),
    pub final_hidden: (usize, usize),
    pub vocab: Vocab,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            d_item: 32,
            d_category: 24,
            d_company: 16,
            d_user: 24,
            d_country: 12,
            d_context: 10,
            d_time: 36,
            max_seq: 20,
            max_hard_seq: 10,
            time_factor: 60,
            max_time_bucket: 20160, // 14 days of minutes
            heads: 2,
            d_head: 36,
            attn_hidden: (80, 40),
            ui2m_hidden: (72, 36),
            interaction_hidden: (144, 72),
            final_hidden: (200, 80),
            vocab: Vocab {
                items: 1001,
                categories: 21,
                companies: 41,
                users: 1001,
                countries: 11,
                pages: 50,
            },
        }
    }
}

impl Hyper {
    /// Item embedding width.
    pub fn d_model(&self) -> usize {
        self.d_item + self.d_category + self.d_company
    }

    /// User profile embedding width.
    pub fn d_profile(&self) -> usize {
        self.d_user + self.d_country
    }

    /// Scaled-down dimensions for gradient checks and fast tests.
    pub fn tiny() -> Self {
        Hyper {
            d_item: 4,
            d_category: 2,
            d_company: 2,
            d_user: 2,
            d_country: 2,
            d_context: 2,
            d_time: 4,
            max_seq: 4,
            max_hard_seq: 2,
            time_factor: 60,
            max_time_bucket: 32,
            heads: 2,
            d_head: 4,
            attn_hidden: (8, 4),
            ui2m_hidden: (6, 4),
            interaction_hidden: (12, 8),
            final_hidden: (16, 8),
            vocab: Vocab {
                items: 9,
                categories: 5,
                companies: 5,
                users: 7,
                countries: 3,
                pages: 4,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads * self.d_head != self.d_model() {
            return Err(Error::InvalidArgument(format!(
                "heads ({}) x d_head ({}) must equal d_model ({})",
                self.heads,
                self.d_head,
                self.d_model()
            )));
        }
        if self.max_seq == 0 || self.max_hard_seq == 0 {
            return Err(Error::InvalidArgument(
                "sequence caps must be positive".into(),
            ));
        }
        if self.time_factor <= 0 {
            return Err(Error::InvalidArgument(
                "time_factor must be positive".into(),
            ));
        }
        let v = &self.vocab;
        for (name, n) in [
            ("items", v.items),
            ("categories", v.categories),
            ("companies", v.companies),
            ("users", v.users),
            ("countries", v.countries),
            ("pages", v.pages),
        ] {
            if n < 2 {
                return Err(Error::InvalidArgument(format!(
                    "vocab.{name} must be at least 2 (row 0 is reserved)"
                )));
            }
        }
        Ok(())
    }
}

/// `floor((now - then) / factor)`, clamped to `max_bucket`. The recommendation
/// must not precede the behavior.
pub fn time_bucket(now: i64, then: i64, factor: i64, max_bucket: usize) -> Result<usize> {
    let delta = now - then;
    if delta < 0 {
        return Err(Error::InvalidArgument(format!(
            "negative time interval: behavior at {then} is after the recommendation at {now}"
        )));
    }
    let bucket = (delta / factor) as usize;
    Ok(bucket.min(max_bucket))
}

/// Positions (into `categories`) whose category matches the trigger's,
/// keeping at most the `max_hard` most recent and preserving order.
pub fn build_hard_subsequence(
    categories: &[u64],
    trigger_category: u64,
    max_hard: usize,
) -> Vec<usize> {
    let matches: Vec<usize> = categories
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == trigger_category)
        .map(|(i, _)| i)
        .collect();
    let skip = matches.len().saturating_sub(max_hard);
    matches[skip..].to_vec()
}

/// A sample in fixed-width index form, ready for batched embedding lookups.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSample {
    pub user_idx: usize,
    pub country_idx: usize,
    pub page_idx: usize,
    pub trigger_item: usize,
    pub trigger_category: usize,
    pub trigger_company: usize,
    pub target_item: usize,
    pub target_category: usize,
    pub target_company: usize,
    /// All sequence vectors have length `max_seq`; `0..valid_len` is real.
    pub behavior_items: Vec<usize>,
    pub behavior_categories: Vec<usize>,
    pub behavior_companies: Vec<usize>,
    pub time_buckets: Vec<usize>,
    pub behavior_mask: Vec<bool>,
    pub valid_len: usize,
    /// Hard (trigger-category) sub-sequence, length `max_hard_seq` padded.
    pub hard_items: Vec<usize>,
    pub hard_categories: Vec<usize>,
    pub hard_companies: Vec<usize>,
    pub hard_time_buckets: Vec<usize>,
    pub hard_mask: Vec<bool>,
    pub hard_len: usize,
    /// Positions of the hard sub-sequence within the kept behavior window.
    pub hard_indices: Vec<usize>,
    pub label: f64,
    /// Raw page number, for per-page reporting.
    pub page: u32,
    /// Whether target and trigger share a raw category id.
    pub same_category: bool,
}

fn clamp_id(id: u64, vocab: usize) -> usize {
    let id = id as usize;
    if id < vocab {
        id
    } else {
        0
    }
}

/// Encodes one raw sample: truncates the history to the most recent
/// `max_seq`, maps ids through the vocabularies (OOV -> 0), buckets time
/// intervals, and extracts the trigger-category sub-sequence.
pub fn encode_sample(sample: &RawSample, hyper: &Hyper) -> Result<EncodedSample> {
    let v = &hyper.vocab;
    let t = hyper.max_seq;
    let th = hyper.max_hard_seq;

    // Most recent `t` behaviors, original (ascending-ts) order preserved.
    let skip = sample.behaviors.len().saturating_sub(t);
    let kept = &sample.behaviors[skip..];
    let n = kept.len();

    let mut behavior_items = vec![0usize; t];
    let mut behavior_categories = vec![0usize; t];
    let mut behavior_companies = vec![0usize; t];
    let mut time_buckets = vec![0usize; t];
    let mut behavior_mask = vec![false; t];
    let mut kept_categories = Vec::with_capacity(n);
    for (i, b) in kept.iter().enumerate() {
        behavior_items[i] = clamp_id(b.item_id, v.items);
        behavior_categories[i] = clamp_id(b.category_id, v.categories);
        behavior_companies[i] = clamp_id(b.company_id, v.companies);
        time_buckets[i] =
            time_bucket(sample.ts, b.ts, hyper.time_factor, hyper.max_time_bucket)?;
        behavior_mask[i] = true;
        kept_categories.push(b.category_id);
    }

    let hard_indices = build_hard_subsequence(&kept_categories, sample.trigger.category_id, th);
    let mut hard_items = vec![0usize; th];
    let mut hard_categories = vec![0usize; th];
    let mut hard_companies = vec![0usize; th];
    let mut hard_time_buckets = vec![0usize; th];
    let mut hard_mask = vec![false; th];
    for (j, &pos) in hard_indices.iter().enumerate() {
        hard_items[j] = behavior_items[pos];
        hard_categories[j] = behavior_categories[pos];
        hard_companies[j] = behavior_companies[pos];
        hard_time_buckets[j] = time_buckets[pos];
        hard_mask[j] = true;
    }

    // Pages are 1-based; anything past the vocabulary clamps to the last row.
    let page_idx = (sample.page as usize).min(v.pages - 1);

    Ok(EncodedSample {
        user_idx: clamp_id(sample.user_id, v.users),
        country_idx: clamp_id(sample.country_id, v.countries),
        page_idx,
        trigger_item: clamp_id(sample.trigger.item_id, v.items),
        trigger_category: clamp_id(sample.trigger.category_id, v.categories),
        trigger_company: clamp_id(sample.trigger.company_id, v.companies),
        target_item: clamp_id(sample.target.item_id, v.items),
        target_category: clamp_id(sample.target.category_id, v.categories),
        target_company: clamp_id(sample.target.company_id, v.companies),
        behavior_items,
        behavior_categories,
        behavior_companies,
        time_buckets,
        behavior_mask,
        valid_len: n,
        hard_items,
        hard_categories,
        hard_companies,
        hard_time_buckets,
        hard_mask,
        hard_len: hard_indices.len(),
        hard_indices,
        label: sample.label as f64,
        page: sample.page,
        same_category: sample.target.category_id == sample.trigger.category_id,
    })
}
