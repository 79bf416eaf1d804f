//! Synthetic trigger-induced browsing corpus with a planted instant-interest
//! signal that decays with page depth, plus trigger attribution and negative
//! sampling for generic click/exposure logs.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::data::{Behavior, DatasetManifest, ItemRef, RawSample};
use crate::{Error, Result};

// ── generator configuration ──

/// Fixed origin for generated timestamps (seconds).
const EPOCH: i64 = 1_600_000_000;
/// Sessions are spread across this many seconds.
const CORPUS_SPAN: i64 = 25 * 86_400;
/// Behavior clicks precede their session by up to this many seconds.
const HISTORY_SPAN: i64 = 14 * 86_400;
/// Concentration of the per-user category preference draw. Below 1 the mass
/// piles onto a few categories, so preferences differ sharply across users.
const PREFERENCE_SHAPE: f64 = 0.3;
/// Seconds between consecutive result pages of one session.
const PAGE_GAP: i64 = 30;
/// The trigger click lands this many seconds before page 1.
const TRIGGER_LEAD: i64 = 60;

/// Controls for the synthetic corpus generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_users: u64,
    pub n_categories: u64,
    pub items_per_category: u64,
    pub n_sessions: u64,
    /// Result pages browsed per session (the maximum page number).
    pub pages_per_session: u32,
    /// Candidate items shown on each page.
    pub items_per_page: u32,
    pub history_len_min: usize,
    pub history_len_max: usize,
    /// Log-odds boost for a candidate sharing the trigger's category (α).
    pub trigger_affinity: f64,
    /// Per-page decay of the trigger boost, in (0, 1] (γ).
    pub page_decay: f64,
    /// Weight of the user's preference for the target category (β).
    pub preference_weight: f64,
    /// Log-odds of a click with no boosts at all.
    pub base_logit: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 1000,
            n_categories: 20,
            items_per_category: 50,
            n_sessions: 5000,
            pages_per_session: 8,
            items_per_page: 5,
            history_len_min: 4,
            history_len_max: 14,
            trigger_affinity: 2.0,
            page_decay: 0.8,
            preference_weight: 1.0,
            base_logit: -2.0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.n_users,
            self.n_categories,
            self.items_per_category,
            self.n_sessions,
            u64::from(self.pages_per_session),
            u64::from(self.items_per_page),
        ];
        if counts.contains(&0) {
            return Err(Error::InvalidArgument(
                "all generator counts must be at least 1".into(),
            ));
        }
        if self.history_len_min > self.history_len_max {
            return Err(Error::InvalidArgument(format!(
                "history length range is empty: {}..={}",
                self.history_len_min, self.history_len_max
            )));
        }
        if !(self.page_decay > 0.0 && self.page_decay <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "page_decay must lie in (0, 1], got {}",
                self.page_decay
            )));
        }
        if self.trigger_affinity < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "trigger_affinity must be non-negative, got {}",
                self.trigger_affinity
            )));
        }
        Ok(())
    }

    pub fn n_items(&self) -> u64 {
        self.n_categories * self.items_per_category
    }

    /// Stable hash of the configuration, recorded in the manifest.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a64(json.as_bytes()))
    }
}

/// 64-bit FNV-1a over a byte string.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A generated corpus split by session recency.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub train: Vec<RawSample>,
    pub test: Vec<RawSample>,
    pub manifest: DatasetManifest,
}

// ── corpus generation ──

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Draws a probability vector over categories: independent Gamma draws,
/// normalized (the standard Dirichlet construction).
fn draw_preference(rng: &mut ChaCha8Rng, n_categories: usize) -> Vec<f64> {
    let gamma = Gamma::new(PREFERENCE_SHAPE, 1.0).expect("valid gamma");
    let mut p: Vec<f64> = (0..n_categories).map(|_| gamma.sample(rng).max(1e-12)).collect();
    let total: f64 = p.iter().sum();
    for v in &mut p {
        *v /= total;
    }
    p
}

/// Per-user taste that moves over the corpus: two preference draws
/// cross-faded linearly with time. Early behaviors follow the first draw and
/// recent ones the second, so *when* a click happened carries information
/// about the user's current taste.
struct UserTaste {
    early: Vec<f64>,
    late: Vec<f64>,
}

impl UserTaste {
    fn at(&self, ts: i64) -> Vec<f64> {
        let w = ((ts - EPOCH) as f64 / CORPUS_SPAN as f64).clamp(0.0, 1.0);
        self.early
            .iter()
            .zip(&self.late)
            .map(|(a, b)| (1.0 - w) * a + w * b)
            .collect()
    }
}

fn sample_category(rng: &mut ChaCha8Rng, preference: &[f64]) -> u64 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (c, &p) in preference.iter().enumerate() {
        acc += p;
        if u < acc {
            return c as u64 + 1;
        }
    }
    preference.len() as u64
}

/// Items are laid out contiguously by category; companies cycle over a pool
/// of `2 × n_categories` so the field exercises the embedding path without
/// carrying label signal.
fn make_item(rng: &mut ChaCha8Rng, cfg: &SynthConfig, category: u64) -> ItemRef {
    let slot = rng.random_range(0..cfg.items_per_category);
    let item_id = (category - 1) * cfg.items_per_category + slot + 1;
    ItemRef {
        item_id,
        category_id: category,
        company_id: (item_id - 1) % (cfg.n_categories * 2) + 1,
    }
}

/// Probability that a page-`p` candidate shares the trigger's category.
/// Decays with page depth toward a floor, mirroring how the share of
/// trigger-related items shrinks as the user keeps scrolling.
fn same_category_share(page: u32, decay: f64) -> f64 {
    0.9 * decay.powi(page as i32 - 1) + 0.05
}

/// Generates the full corpus: per user a time-varying category taste, per
/// session a trigger click plus a preference-driven behavior history, and per
/// page a slate of candidates whose click labels follow
/// `sigmoid(base + α·γ^(p−1)·same_category + β·preference(user, target
/// category))`. The last 10% of sessions by timestamp form the test split.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_cat = cfg.n_categories as usize;

    let tastes: Vec<UserTaste> = (0..cfg.n_users)
        .map(|_| UserTaste {
            early: draw_preference(&mut rng, n_cat),
            late: draw_preference(&mut rng, n_cat),
        })
        .collect();

    let mut samples: Vec<RawSample> = Vec::new();
    let session_gap = CORPUS_SPAN / cfg.n_sessions as i64;
    let split_session = (cfg.n_sessions as usize * 9) / 10;
    let mut split_ts = EPOCH + CORPUS_SPAN;

    for session in 0..cfg.n_sessions {
        let session_ts = EPOCH + session as i64 * session_gap;
        if session as usize == split_session {
            split_ts = session_ts;
        }
        let user_id = rng.random_range(1..=cfg.n_users);
        let taste = &tastes[user_id as usize - 1];
        let country_id = (user_id - 1) % 10 + 1;

        // The trigger is what the user just clicked, one minute before page 1.
        let trigger_ts = session_ts - TRIGGER_LEAD;
        let trigger_cat = sample_category(&mut rng, &taste.at(trigger_ts));
        let trigger = make_item(&mut rng, cfg, trigger_cat);

        // History: preference-driven clicks over the preceding days, each
        // drawn from the taste as of its own timestamp.
        let len = rng.random_range(cfg.history_len_min..=cfg.history_len_max);
        let mut offsets: Vec<i64> =
            (0..len).map(|_| rng.random_range(TRIGGER_LEAD..=HISTORY_SPAN)).collect();
        offsets.sort_unstable_by(|a, b| b.cmp(a));
        // The trigger click itself stays out of the listed history: it is
        // already carried by the sample's own trigger field, and duplicating
        // it as the newest sequence token would let target-side attention
        // read "does the candidate match the trigger?" straight off the
        // sequence — a shortcut that crowds the pairwise interaction out of
        // that job and leaves the mixing gate re-purposed as a page dial.
        let behaviors: Vec<Behavior> = offsets
            .iter()
            .map(|&off| {
                let ts = session_ts - off;
                let cat = sample_category(&mut rng, &taste.at(ts));
                let item = make_item(&mut rng, cfg, cat);
                Behavior {
                    item_id: item.item_id,
                    category_id: item.category_id,
                    company_id: item.company_id,
                    ts,
                }
            })
            .collect();

        let label_taste = taste.at(session_ts);
        for page in 1..=cfg.pages_per_session {
            let ts = session_ts + i64::from(page - 1) * PAGE_GAP;
            let p_same = same_category_share(page, cfg.page_decay);
            for _ in 0..cfg.items_per_page {
                let same = rng.random::<f64>() < p_same;
                let cat = if same || cfg.n_categories == 1 {
                    trigger_cat
                } else {
                    // Uniform over the other categories.
                    let mut c = rng.random_range(1..cfg.n_categories);
                    if c >= trigger_cat {
                        c += 1;
                    }
                    c
                };
                let target = make_item(&mut rng, cfg, cat);
                let boost = if cat == trigger_cat {
                    cfg.trigger_affinity * cfg.page_decay.powi(page as i32 - 1)
                } else {
                    0.0
                };
                let logit = cfg.base_logit
                    + boost
                    + cfg.preference_weight * label_taste[cat as usize - 1];
                let label = u8::from(rng.random::<f64>() < sigmoid(logit));
                samples.push(RawSample {
                    user_id,
                    country_id,
                    behaviors: behaviors.clone(),
                    trigger,
                    target,
                    page,
                    ts,
                    label,
                });
            }
        }
    }

    let (train, test): (Vec<RawSample>, Vec<RawSample>) =
        samples.into_iter().partition(|s| s.ts < split_ts);
    let n_train = train.len() as u64;
    let n_test = test.len() as u64;
    let positives = train.iter().chain(&test).filter(|s| s.label == 1).count();
    let manifest = DatasetManifest {
        n_users: cfg.n_users,
        n_items: cfg.n_items(),
        n_categories: cfg.n_categories,
        n_samples: n_train + n_test,
        n_train,
        n_test,
        positive_rate: positives as f64 / (n_train + n_test) as f64,
        split_ts,
        config_hash: cfg.hash(),
    };
    Ok(SynthOutput { train, test, manifest })
}

// ── trigger attribution for generic logs ──

/// One line of a raw interaction log: either a click or a recommendation
/// exposure with its observed outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LogEvent {
    Click {
        user_id: u64,
        ts: i64,
        item: ItemRef,
    },
    Exposure {
        user_id: u64,
        country_id: u64,
        ts: i64,
        item: ItemRef,
        page: u32,
        label: u8,
    },
}

impl LogEvent {
    pub fn user_id(&self) -> u64 {
        match self {
            LogEvent::Click { user_id, .. } | LogEvent::Exposure { user_id, .. } => *user_id,
        }
    }

    pub fn ts(&self) -> i64 {
        match self {
            LogEvent::Click { ts, .. } | LogEvent::Exposure { ts, .. } => *ts,
        }
    }
}

/// Joins each exposure with the same user's latest click no older than
/// `window_seconds` (inclusive) as its trigger; exposures with no such click
/// are dropped. Behaviors are the user's clicks strictly before the exposure.
/// The log must be time-ordered within each user.
pub fn synthesize_triggers(events: &[LogEvent], window_seconds: i64) -> Result<Vec<RawSample>> {
    if window_seconds < 0 {
        return Err(Error::InvalidArgument(format!(
            "trigger window must be non-negative, got {window_seconds}"
        )));
    }
    let mut last_ts: std::collections::HashMap<u64, i64> = std::collections::HashMap::new();
    for (i, e) in events.iter().enumerate() {
        let prev = last_ts.entry(e.user_id()).or_insert(i64::MIN);
        if e.ts() < *prev {
            return Err(Error::data(
                Some(i + 1),
                format!(
                    "log must be time-ordered per user; user {} goes back from {} to {}",
                    e.user_id(),
                    *prev,
                    e.ts()
                ),
            ));
        }
        *prev = e.ts();
    }

    let mut clicks: std::collections::HashMap<u64, Vec<(i64, ItemRef)>> =
        std::collections::HashMap::new();
    let mut out = Vec::new();
    for (i, e) in events.iter().enumerate() {
        match e {
            LogEvent::Click { user_id, ts, item } => {
                clicks.entry(*user_id).or_default().push((*ts, *item));
            }
            LogEvent::Exposure { user_id, country_id, ts, item, page, label } => {
                let history = clicks.get(user_id).map(Vec::as_slice).unwrap_or(&[]);
                // Latest click at or before the exposure; the per-user time
                // ordering makes that the last recorded one.
                let trigger = history
                    .iter()
                    .rev()
                    .find(|(cts, _)| *cts <= *ts && ts - cts <= window_seconds);
                let Some(&(_, trigger_item)) = trigger else {
                    continue; // no attributable trigger: drop the exposure
                };
                let behaviors: Vec<Behavior> = history
                    .iter()
                    .filter(|(cts, _)| *cts < *ts)
                    .map(|(cts, it)| Behavior {
                        item_id: it.item_id,
                        category_id: it.category_id,
                        company_id: it.company_id,
                        ts: *cts,
                    })
                    .collect();
                let sample = RawSample {
                    user_id: *user_id,
                    country_id: *country_id,
                    behaviors,
                    trigger: trigger_item,
                    target: *item,
                    page: *page,
                    ts: *ts,
                    label: *label,
                };
                sample.validate().map_err(|detail| Error::data(Some(i + 1), detail))?;
                out.push(sample);
            }
        }
    }
    Ok(out)
}

/// Reads a JSONL event log, one click or exposure per line.
pub fn load_event_log(path: &std::path::Path) -> Result<Vec<LogEvent>> {
    let text = std::fs::read_to_string(path)?;
    let mut events = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let event: LogEvent = serde_json::from_str(line)
            .map_err(|e| Error::data(Some(i + 1), format!("unreadable log event: {e}")))?;
        events.push(event);
    }
    Ok(events)
}

// ── negative sampling ──

/// Augments positives with `ratio` uniformly drawn non-target items apiece,
/// emitted as label-0 copies of the positive's context. Output order is each
/// positive followed by its negatives.
pub fn negative_sample(
    positives: &[RawSample],
    item_pool: &[ItemRef],
    ratio: u32,
    seed: u64,
) -> Result<Vec<RawSample>> {
    if ratio == 0 {
        return Err(Error::InvalidArgument("negative ratio must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(positives.len() * (1 + ratio as usize));
    for pos in positives {
        let candidates: Vec<&ItemRef> =
            item_pool.iter().filter(|it| it.item_id != pos.target.item_id).collect();
        if candidates.is_empty() {
            return Err(Error::InvalidArgument(
                "item pool has no items besides the positive target".into(),
            ));
        }
        out.push(pos.clone());
        for _ in 0..ratio {
            let pick = *candidates[rng.random_range(0..candidates.len())];
            let mut neg = pos.clone();
            neg.target = pick;
            neg.label = 0;
            out.push(neg);
        }
    }
    Ok(out)
}

/// Collects the distinct items appearing anywhere in a sample set, ordered by
/// item id — a reproducible pool for negative sampling.
pub fn item_pool(samples: &[RawSample]) -> Vec<ItemRef> {
    let mut seen: std::collections::BTreeMap<u64, ItemRef> = std::collections::BTreeMap::new();
    for s in samples {
        seen.entry(s.target.item_id).or_insert(s.target);
        seen.entry(s.trigger.item_id).or_insert(s.trigger);
        for b in &s.behaviors {
            seen.entry(b.item_id).or_insert(b.item());
        }
    }
    seen.into_values().collect()
}

// ── tests ──

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> SynthConfig {
        SynthConfig {
            n_users: 200,
            n_sessions: 800,
            seed: 11,
            ..SynthConfig::default()
        }
    }

    /// Per-page CTR for same-category and different-category candidates.
    fn page_gaps(samples: &[&RawSample], pages: u32) -> Vec<f64> {
        (1..=pages)
            .map(|p| {
                let (mut sc, mut sn, mut dc, mut dn) = (0.0, 0.0, 0.0, 0.0);
                for s in samples.iter().filter(|s| s.page == p) {
                    if s.target.category_id == s.trigger.category_id {
                        sc += f64::from(s.label);
                        sn += 1.0;
                    } else {
                        dc += f64::from(s.label);
                        dn += 1.0;
                    }
                }
                sc / sn - dc / dn
            })
            .collect()
    }

    #[test]
    fn no_decay_gives_flat_category_gap() {
        // With no decay only ~5% of candidates are different-category, so the
        // per-page gap estimate needs a large corpus to settle.
        let cfg = SynthConfig { page_decay: 1.0, n_sessions: 4000, ..small_config() };
        let out = generate_synthetic(&cfg).unwrap();
        let all: Vec<&RawSample> = out.train.iter().chain(&out.test).collect();
        let gaps = page_gaps(&all, cfg.pages_per_session);
        let spread = gaps.iter().cloned().fold(f64::MIN, f64::max)
            - gaps.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread < 0.06, "gap should be flat across pages, spread {spread}, gaps {gaps:?}");
    }

    #[test]
    fn no_boosts_give_base_rate_clicks() {
        let cfg = SynthConfig {
            trigger_affinity: 0.0,
            preference_weight: 0.0,
            ..small_config()
        };
        let out = generate_synthetic(&cfg).unwrap();
        let expect = sigmoid(cfg.base_logit);
        assert!(
            (out.manifest.positive_rate - expect).abs() < 0.01,
            "positive rate {} vs sigmoid(base) {expect}",
            out.manifest.positive_rate
        );
    }

    #[test]
    fn category_gap_shrinks_with_page_depth() {
        // 2500 sessions × 8 pages × 5 candidates = 100k samples.
        let cfg = SynthConfig { n_sessions: 2500, seed: 3, ..SynthConfig::default() };
        let out = generate_synthetic(&cfg).unwrap();
        let all: Vec<&RawSample> = out.train.iter().chain(&out.test).collect();
        let gaps = page_gaps(&all, cfg.pages_per_session);
        assert!(
            gaps[0] > 2.0 * gaps[7],
            "page-1 gap {} should dominate page-8 gap {}",
            gaps[0],
            gaps[7]
        );
        // Same-category CTR itself also falls from first to last page.
        let ctr = |page: u32| {
            let hits: Vec<&&RawSample> = all
                .iter()
                .filter(|s| s.page == page && s.target.category_id == s.trigger.category_id)
                .collect();
            hits.iter().map(|s| f64::from(s.label)).sum::<f64>() / hits.len() as f64
        };
        assert!(ctr(1) > ctr(cfg.pages_per_session));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig { n_sessions: 60, ..small_config() };
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(
            serde_json::to_string(&a.train).unwrap(),
            serde_json::to_string(&b.train).unwrap()
        );
        assert_eq!(
            serde_json::to_string(&a.test).unwrap(),
            serde_json::to_string(&b.test).unwrap()
        );
        assert_eq!(a.manifest, b.manifest);
    }

    #[test]
    fn manifest_counts_match_contents() {
        let cfg = SynthConfig { n_sessions: 100, ..small_config() };
        let out = generate_synthetic(&cfg).unwrap();
        let per_session = u64::from(cfg.pages_per_session) * u64::from(cfg.items_per_page);
        assert_eq!(out.manifest.n_samples, cfg.n_sessions * per_session);
        assert_eq!(out.manifest.n_train, out.train.len() as u64);
        assert_eq!(out.manifest.n_test, out.test.len() as u64);
        assert_eq!(out.manifest.n_test, 10 * per_session); // last 10% of sessions
        let pos = out.train.iter().chain(&out.test).filter(|s| s.label == 1).count();
        assert!((out.manifest.positive_rate - pos as f64 / out.manifest.n_samples as f64).abs() < 1e-12);
        assert!(out.train.iter().all(|s| s.ts < out.manifest.split_ts));
        assert!(out.test.iter().all(|s| s.ts >= out.manifest.split_ts));
    }

    #[test]
    fn every_sample_is_valid() {
        let out = generate_synthetic(&SynthConfig { n_sessions: 120, ..small_config() }).unwrap();
        for s in out.train.iter().chain(&out.test) {
            s.validate().unwrap();
            assert!(s.user_id >= 1 && s.user_id <= 200);
            assert!(s.target.category_id >= 1 && s.target.category_id <= 20);
            assert!(s.target.company_id >= 1 && s.target.company_id <= 40);
            assert!(s.behaviors.len() >= 5); // history range plus the trigger click
            assert_eq!(s.behaviors.last().unwrap().item_id, s.trigger.item_id);
        }
    }

    #[test]
    fn recent_behaviors_track_current_taste_better() {
        // The cross-faded taste should make late-history categories match the
        // session-time taste more often than early-history ones.
        let cfg = SynthConfig { n_sessions: 2000, seed: 5, ..SynthConfig::default() };
        let out = generate_synthetic(&cfg).unwrap();
        let (mut late_hit, mut early_hit, mut n) = (0.0, 0.0, 0.0);
        for s in out.test.iter().filter(|s| s.page == 1) {
            let top = s
                .behaviors
                .iter()
                .rev()
                .take(3)
                .filter(|b| b.category_id == s.trigger.category_id)
                .count();
            let bottom = s
                .behaviors
                .iter()
                .take(3)
                .filter(|b| b.category_id == s.trigger.category_id)
                .count();
            late_hit += top as f64;
            early_hit += bottom as f64;
            n += 3.0;
        }
        assert!(
            late_hit / n > early_hit / n,
            "recent clicks should match the trigger's (current-taste) category more: {} vs {}",
            late_hit / n,
            early_hit / n
        );
    }

    fn item(id: u64) -> ItemRef {
        ItemRef { item_id: id, category_id: (id - 1) % 5 + 1, company_id: (id - 1) % 7 + 1 }
    }

    fn click(user: u64, ts: i64, id: u64) -> LogEvent {
        LogEvent::Click { user_id: user, ts, item: item(id) }
    }

    fn exposure(user: u64, ts: i64, id: u64, label: u8) -> LogEvent {
        LogEvent::Exposure { user_id: user, country_id: 1, ts, item: item(id), page: 1, label }
    }

    const HOUR: i64 = 3600;

    #[test]
    fn trigger_attaches_inside_window_and_drops_outside() {
        let events = vec![
            click(1, 0, 10),
            exposure(1, (3.9 * HOUR as f64) as i64, 20, 1), // 3.9h later: attached
            click(2, 0, 11),
            exposure(2, (4.1 * HOUR as f64) as i64, 21, 1), // 4.1h later: dropped
            click(3, 0, 12),
            exposure(3, 4 * HOUR, 22, 0), // exactly the window: attached
        ];
        let samples = synthesize_triggers(&events, 4 * HOUR).unwrap();
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[0].trigger.item_id, 10);
        assert_eq!(samples[0].target.item_id, 20);
        assert_eq!(samples[1].trigger.item_id, 12);
    }

    #[test]
    fn latest_prior_click_wins() {
        let events = vec![
            click(1, 100, 10),
            click(1, 200, 11),
            exposure(1, 300, 20, 1),
        ];
        let samples = synthesize_triggers(&events, 4 * HOUR).unwrap();
        assert_eq!(samples.len(), 1);
        assert_eq!(samples[0].trigger.item_id, 11);
        // Both prior clicks are behaviors, oldest first.
        let ids: Vec<u64> = samples[0].behaviors.iter().map(|b| b.item_id).collect();
        assert_eq!(ids, vec![10, 11]);
    }

    #[test]
    fn behaviors_are_strictly_before_the_exposure() {
        let events = vec![
            click(1, 100, 10),
            click(1, 300, 11), // same instant as the exposure: trigger, not behavior
            exposure(1, 300, 20, 0),
            click(1, 400, 12), // after: never visible
        ];
        let samples = synthesize_triggers(&events, 4 * HOUR).unwrap();
        assert_eq!(samples[0].trigger.item_id, 11);
        let ids: Vec<u64> = samples[0].behaviors.iter().map(|b| b.item_id).collect();
        assert_eq!(ids, vec![10]);
    }

    #[test]
    fn unattributable_exposures_are_dropped() {
        let events = vec![exposure(1, 100, 20, 1), click(1, 200, 10), exposure(2, 300, 21, 0)];
        assert!(synthesize_triggers(&events, 4 * HOUR).unwrap().is_empty());
    }

    #[test]
    fn out_of_order_log_is_rejected() {
        let events = vec![click(1, 200, 10), click(1, 100, 11)];
        let err = synthesize_triggers(&events, 4 * HOUR).unwrap_err();
        assert!(matches!(err, Error::Data { line: Some(2), .. }), "{err}");
    }

    #[test]
    fn event_log_round_trips_through_jsonl() {
        let events = vec![click(1, 100, 10), exposure(1, 200, 20, 1)];
        let text: String = events
            .iter()
            .map(|e| serde_json::to_string(e).unwrap() + "\n")
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        std::fs::write(&path, &text).unwrap();
        assert_eq!(load_event_log(&path).unwrap(), events);
        std::fs::write(&path, "{\"kind\":\"mystery\"}\n").unwrap();
        let err = load_event_log(&path).unwrap_err();
        assert!(matches!(err, Error::Data { line: Some(1), .. }), "{err}");
    }

    #[test]
    fn forced_negative_choice_with_two_item_pool() {
        let pos = RawSample {
            user_id: 1,
            country_id: 1,
            behaviors: vec![],
            trigger: item(1),
            target: item(2),
            page: 1,
            ts: 100,
            label: 1,
        };
        let pool = vec![item(1), item(2)];
        let out = negative_sample(&[pos], &pool, 1, 0).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[1].target.item_id, 1);
        assert_eq!(out[1].label, 0);
        assert_eq!(out[1].user_id, out[0].user_id);
        assert_eq!(out[1].trigger, out[0].trigger);
        assert_eq!(out[1].ts, out[0].ts);
    }

    #[test]
    fn negative_sampling_counts_and_determinism() {
        let positives: Vec<RawSample> = (0..40)
            .map(|i| RawSample {
                user_id: i % 5 + 1,
                country_id: 1,
                behaviors: vec![],
                trigger: item(i % 9 + 1),
                target: item(i % 11 + 1),
                page: 1,
                ts: 1000 + i as i64,
                label: 1,
            })
            .collect();
        let pool: Vec<ItemRef> = (1..=11).map(item).collect();
        let a = negative_sample(&positives, &pool, 3, 9).unwrap();
        let b = negative_sample(&positives, &pool, 3, 9).unwrap();
        assert_eq!(a.len(), positives.len() * 4);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert!(a.iter().enumerate().all(|(i, s)| (i % 4 == 0) == (s.label == 1)));
        // Negatives never duplicate their positive's target.
        for chunk in a.chunks(4) {
            for neg in &chunk[1..] {
                assert_ne!(neg.target.item_id, chunk[0].target.item_id);
            }
        }
    }

    #[test]
    fn pool_of_only_the_target_is_an_error() {
        let pos = RawSample {
            user_id: 1,
            country_id: 1,
            behaviors: vec![],
            trigger: item(1),
            target: item(2),
            page: 1,
            ts: 100,
            label: 1,
        };
        assert!(negative_sample(&[pos], &[item(2)], 1, 0).is_err());
    }

    #[test]
    fn item_pool_is_sorted_and_distinct() {
        let cfg = SynthConfig { n_sessions: 40, ..small_config() };
        let out = generate_synthetic(&cfg).unwrap();
        let pool = item_pool(&out.train);
        assert!(pool.windows(2).all(|w| w[0].item_id < w[1].item_id));
        assert!(pool.len() > 100);
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = SynthConfig::default();
        let mut b = SynthConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.seed = 8;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let zero = SynthConfig { n_categories: 0, ..SynthConfig::default() };
        assert!(zero.validate().is_err());
        let decay = SynthConfig { page_decay: 0.0, ..SynthConfig::default() };
        assert!(decay.validate().is_err());
        let range = SynthConfig { history_len_min: 9, history_len_max: 3, ..SynthConfig::default() };
        assert!(range.validate().is_err());
        let neg = SynthConfig { trigger_affinity: -1.0, ..SynthConfig::default() };
        assert!(neg.validate().is_err());
    }
}
