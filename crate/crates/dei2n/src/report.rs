//! Per-page dataset and model statistics: click-through rates split by
//! whether the target shares the trigger's category, the same-category
//! exposure share, and the mean learned gate weight.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoding::EncodedSample;
use crate::train::EpochStats;
use crate::{Error, Result};

/// Aggregated statistics for one result page.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageRow {
    pub page: u32,
    pub samples: u64,
    /// CTR of targets sharing the trigger's category; absent if none shown.
    pub same_category_ctr: Option<f64>,
    /// CTR of targets in any other category; absent if none shown.
    pub different_category_ctr: Option<f64>,
    /// Fraction of targets sharing the trigger's category.
    pub same_category_share: f64,
    /// Mean predicted gate weight on the trigger side; absent without a gate.
    pub mean_p_tr: Option<f64>,
}

/// Everything a training or evaluation run reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub mean_loss: f64,
    pub baseline_auc: Option<f64>,
    /// Improvement over `baseline_auc`, when one was supplied.
    pub rela_impr_vs_baseline: Option<f64>,
    pub epoch_loss: Vec<EpochStats>,
    pub pages: Vec<PageRow>,
}

/// Builds one row per page present in `samples`, ascending. `p_tr` must be
/// the per-sample gate weights in sample order when the gate is active.
pub fn page_report(samples: &[EncodedSample], p_tr: Option<&[f64]>) -> Result<Vec<PageRow>> {
    if let Some(w) = p_tr {
        if w.len() != samples.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gate weights for {} samples",
                w.len(),
                samples.len()
            )));
        }
    }
    #[derive(Default)]
    struct Acc {
        n: u64,
        same_clicks: f64,
        same_n: f64,
        diff_clicks: f64,
        diff_n: f64,
        p_tr_sum: f64,
    }
    let mut pages: BTreeMap<u32, Acc> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        let acc = pages.entry(s.page).or_default();
        acc.n += 1;
        if s.same_category {
            acc.same_clicks += s.label;
            acc.same_n += 1.0;
        } else {
            acc.diff_clicks += s.label;
            acc.diff_n += 1.0;
        }
        if let Some(w) = p_tr {
            acc.p_tr_sum += w[i];
        }
    }
    Ok(pages
        .into_iter()
        .map(|(page, a)| PageRow {
            page,
            samples: a.n,
            same_category_ctr: (a.same_n > 0.0).then(|| a.same_clicks / a.same_n),
            different_category_ctr: (a.diff_n > 0.0).then(|| a.diff_clicks / a.diff_n),
            same_category_share: a.same_n / a.n as f64,
            mean_p_tr: p_tr.map(|_| a.p_tr_sum / a.n as f64),
        })
        .collect())
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Writes the page rows as a flat CSV with a header, one row per page.
pub fn write_page_csv(path: &Path, rows: &[PageRow]) -> Result<()> {
    let mut out = String::from(
        "page,samples,same_category_ctr,different_category_ctr,same_category_share,mean_p_tr\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.6},{}\n",
            r.page,
            r.samples,
            cell(r.same_category_ctr),
            cell(r.different_category_ctr),
            r.same_category_share,
            cell(r.mean_p_tr),
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ── tests ──

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::{encode_sample, Hyper};
    use crate::metrics::spearman;
    use crate::synth::{generate_synthetic, SynthConfig};

    fn encoded(cfg: &SynthConfig) -> Vec<EncodedSample> {
        let hyper = Hyper::default();
        let out = generate_synthetic(cfg).unwrap();
        out.train.iter().map(|s| encode_sample(s, &hyper).unwrap()).collect()
    }

    #[test]
    fn one_page_gives_one_row() {
        let cfg = SynthConfig {
            n_sessions: 50,
            pages_per_session: 1,
            n_users: 20,
            seed: 2,
            ..SynthConfig::default()
        };
        let rows = page_report(&encoded(&cfg), None).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].page, 1);
        assert!(rows[0].mean_p_tr.is_none());
    }

    #[test]
    fn first_page_favors_the_trigger_category() {
        let cfg = SynthConfig { n_sessions: 1500, n_users: 300, seed: 4, ..SynthConfig::default() };
        let rows = page_report(&encoded(&cfg), None).unwrap();
        assert_eq!(rows.len(), 8);
        let first = &rows[0];
        assert!(first.same_category_ctr.unwrap() > first.different_category_ctr.unwrap());
        // Exposure share of the trigger's category also decays with depth.
        assert!(first.same_category_share > rows[7].same_category_share);
        let total: u64 = rows.iter().map(|r| r.samples).sum();
        assert_eq!(total as usize, encoded(&cfg).len());
        assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.same_category_share)));
    }

    #[test]
    fn gate_column_averages_per_page() {
        let cfg = SynthConfig {
            n_sessions: 40,
            n_users: 10,
            pages_per_session: 4,
            seed: 6,
            ..SynthConfig::default()
        };
        let samples = encoded(&cfg);
        // Synthetic gate weights falling with page: 1/page.
        let p_tr: Vec<f64> = samples.iter().map(|s| 1.0 / f64::from(s.page)).collect();
        let rows = page_report(&samples, Some(&p_tr)).unwrap();
        let means: Vec<f64> = rows.iter().map(|r| r.mean_p_tr.unwrap()).collect();
        let pages: Vec<f64> = rows.iter().map(|r| f64::from(r.page)).collect();
        assert!((spearman(&means, &pages).unwrap() - -1.0).abs() < 1e-12);
        for (row, page) in rows.iter().zip([1u32, 2, 3, 4]) {
            assert!((row.mean_p_tr.unwrap() - 1.0 / f64::from(page)).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_gate_weights_are_rejected() {
        let cfg = SynthConfig {
            n_sessions: 5,
            n_users: 3,
            pages_per_session: 2,
            seed: 1,
            ..SynthConfig::default()
        };
        let samples = encoded(&cfg);
        assert!(page_report(&samples, Some(&[0.5])).is_err());
    }

    #[test]
    fn csv_has_a_row_per_page_and_blank_optional_cells() {
        let rows = vec![
            PageRow {
                page: 1,
                samples: 10,
                same_category_ctr: Some(0.5),
                different_category_ctr: None,
                same_category_share: 1.0,
                mean_p_tr: Some(0.75),
            },
            PageRow {
                page: 2,
                samples: 4,
                same_category_ctr: None,
                different_category_ctr: Some(0.25),
                same_category_share: 0.0,
                mean_p_tr: None,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pages.csv");
        write_page_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(
            lines[0],
            "page,samples,same_category_ctr,different_category_ctr,same_category_share,mean_p_tr"
        );
        assert_eq!(lines[1], "1,10,0.500000,,1.000000,0.750000");
        assert_eq!(lines[2], "2,4,,0.250000,0.000000,");
    }
}
