//! Per-image test metrics, aggregates and the paired significance test.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::dataset::{DatasetSplit, Sample};
use crate::error::{ensure, Error, Result};
use crate::metrics::{dsc, hausdorff, BINARIZE_THRESHOLD};
use crate::models::{RegModel, SegModel};
use crate::plane::SoftMask;
use crate::pseudo::combined_inference;
use crate::stats::{wilcoxon_signed_rank, WilcoxonResult};
use crate::trainer::{phase_rng, Phase};

pub const FS: &str = "FS";
pub const MT: &str = "MT";
pub const JOINT: &str = "Joint";
pub const COMBINED: &str = "Combined";

/// One CSV row: `method,rate,image_id,dsc,hd`. `hd` is empty when undefined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub rate: f64,
    pub image_id: String,
    pub dsc: f64,
    pub hd: Option<f64>,
}

pub fn score(method: &str, rate: f64, sample: &Sample, pred: &SoftMask) -> Result<MetricsRow> {
    let gt = sample.mask.as_ref().ok_or_else(|| Error::Contract(format!("test sample {} has no mask", sample.id)))?;
    let bin = pred.threshold(BINARIZE_THRESHOLD);
    Ok(MetricsRow {
        method: method.into(),
        rate,
        image_id: sample.id.clone(),
        dsc: dsc(&bin, gt)?,
        hd: hausdorff(&bin, gt)?,
    })
}

/// Rows for a segmentation model on the test set.
pub fn evaluate_segmentation(method: &str, model: &SegModel, split: &DatasetSplit) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::with_capacity(split.test.len());
    for chunk in split.test.chunks(8) {
        let preds = model.predict_batch(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>())?;
        for (s, p) in chunk.iter().zip(&preds) {
            rows.push(score(method, split.rate, s, p)?);
        }
    }
    Ok(rows)
}

/// Rows for the fused TTA-plus-registration output, with annotated training
/// images as the atlas pool.
pub fn evaluate_combined(
    seg: &SegModel,
    reg: &RegModel,
    cfg: &ExperimentConfig,
    split: &DatasetSplit,
) -> Result<Vec<MetricsRow>> {
    let pool: Vec<&Sample> = split.train_annotated.iter().collect();
    let mut rng = phase_rng(cfg.seed, cfg.n_iterations, Phase::Evaluation);
    split
        .test
        .iter()
        .map(|s| {
            let fused = combined_inference(seg, reg, &s.image, &pool, cfg.n_pseudo, &cfg.augment, &mut rng)?;
            score(COMBINED, split.rate, s, &fused.confidence)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: String,
    pub rate: f64,
    pub n: usize,
    pub dsc_mean: f64,
    /// Population standard deviation.
    pub dsc_std: f64,
    pub hd_mean: Option<f64>,
    pub hd_std: Option<f64>,
    /// Rows whose Hausdorff distance is undefined; excluded from the HD aggregate.
    pub hd_undefined: usize,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

/// Aggregates per (method, rate), in first-appearance order.
pub fn summarize(rows: &[MetricsRow]) -> Vec<Summary> {
    let mut keys: Vec<(String, f64)> = vec![];
    for r in rows {
        if !keys.iter().any(|(m, x)| *m == r.method && *x == r.rate) {
            keys.push((r.method.clone(), r.rate));
        }
    }
    keys.into_iter()
        .map(|(method, rate)| {
            let group: Vec<&MetricsRow> = rows.iter().filter(|r| r.method == method && r.rate == rate).collect();
            let d: Vec<f64> = group.iter().map(|r| r.dsc).collect();
            let h: Vec<f64> = group.iter().filter_map(|r| r.hd).collect();
            let (dsc_mean, dsc_std) = mean_std(&d);
            let hd = (!h.is_empty()).then(|| mean_std(&h));
            Summary {
                method,
                rate,
                n: group.len(),
                dsc_mean,
                dsc_std,
                hd_mean: hd.map(|x| x.0),
                hd_std: hd.map(|x| x.1),
                hd_undefined: group.len() - h.len(),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub rate: f64,
    pub metric: String,
    pub test: WilcoxonResult,
}

/// Paired DSC test of method `a` against `b`, matched by image id. Pairs
/// whose HD is undefined in either method are dropped from the HD test.
pub fn compare(rows: &[MetricsRow], a: &str, b: &str, rate: f64) -> Result<Vec<Comparison>> {
    let index = |m: &str| -> BTreeMap<&str, &MetricsRow> {
        rows.iter().filter(|r| r.method == m && r.rate == rate).map(|r| (r.image_id.as_str(), r)).collect()
    };
    let (ra, rb) = (index(a), index(b));
    ensure!(!ra.is_empty() && !rb.is_empty(), "no rows for {a} or {b} at rate {rate}");
    ensure!(ra.keys().eq(rb.keys()), "{a} and {b} were evaluated on different images");
    let pairs: Vec<(&MetricsRow, &MetricsRow)> = ra.values().zip(rb.values()).map(|(x, y)| (*x, *y)).collect();
    let da: Vec<f64> = pairs.iter().map(|p| p.0.dsc).collect();
    let db: Vec<f64> = pairs.iter().map(|p| p.1.dsc).collect();
    let mut out = vec![Comparison {
        a: a.into(),
        b: b.into(),
        rate,
        metric: "dsc".into(),
        test: wilcoxon_signed_rank(&da, &db)?,
    }];
    let (ha, hb): (Vec<f64>, Vec<f64>) = pairs.iter().filter_map(|p| Some((p.0.hd?, p.1.hd?))).unzip();
    if let Ok(test) = wilcoxon_signed_rank(&ha, &hb) {
        out.push(Comparison { a: a.into(), b: b.into(), rate, metric: "hd".into(), test });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    pub summaries: Vec<Summary>,
    pub comparisons: Vec<Comparison>,
}

impl MetricsReport {
    /// Aggregates the rows and tests MT against Combined at every rate where both exist.
    pub fn build(rows: Vec<MetricsRow>) -> Result<Self> {
        let summaries = summarize(&rows);
        let mut comparisons = vec![];
        let mut rates: Vec<f64> = summaries.iter().map(|s| s.rate).collect();
        rates.dedup();
        for rate in rates {
            let has = |m: &str| summaries.iter().any(|s| s.method == m && s.rate == rate);
            if has(MT) && has(COMBINED) {
                match compare(&rows, MT, COMBINED, rate) {
                    Ok(c) => comparisons.extend(c),
                    Err(e) => log::warn!("skipping MT vs Combined at rate {rate}: {e}"),
                }
            }
        }
        Ok(Self { rows, summaries, comparisons })
    }

    pub fn summary(&self, method: &str) -> Option<&Summary> {
        self.summaries.iter().find(|s| s.method == method)
    }

    /// Writes `<stem>.csv` with the rows and `<stem>.json` with aggregates and tests.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_rows(&dir.join(format!("{stem}.csv")), &self.rows)?;
        let json = serde_json::json!({ "summaries": self.summaries, "comparisons": self.comparisons });
        let path = dir.join(format!("{stem}.json"));
        std::fs::write(&path, serde_json::to_vec_pretty(&json)?).map_err(|e| Error::io(&path, e))
    }
}

pub fn write_rows(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_rows(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows: Vec<MetricsRow> = r.deserialize().collect::<std::result::Result<_, _>>()?;
    for row in &rows {
        ensure!((0.0..=1.0).contains(&row.dsc), "{}: dsc {} outside [0, 1]", path.display(), row.dsc);
        ensure!(row.hd.is_none_or(|h| h >= 0.0), "{}: negative hd", path.display());
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plane::Plane;

    fn row(method: &str, id: usize, dsc: f64, hd: Option<f64>) -> MetricsRow {
        MetricsRow { method: method.into(), rate: 0.01, image_id: format!("s{id:04}"), dsc, hd }
    }

    #[test]
    fn perfect_predictor_scores_one_and_zero() {
        let mask = Plane::from_fn(8, 8, |i, j| (2..6).contains(&i) && (1..5).contains(&j));
        let s = Sample { id: "a".into(), image: Plane::filled(8, 8, 0.0), mask: Some(mask.clone()) };
        let r = score(FS, 1.0, &s, &mask.to_soft()).unwrap();
        assert_eq!((r.dsc, r.hd), (1.0, Some(0.0)));
        let sum = summarize(&[r.clone(), r]);
        assert_eq!((sum[0].dsc_mean, sum[0].dsc_std, sum[0].hd_mean), (1.0, 0.0, Some(0.0)));
    }

    #[test]
    fn aggregates_match_hand_computation() {
        let rows = vec![row(FS, 0, 0.5, Some(2.0)), row(FS, 1, 0.7, None), row(FS, 2, 0.9, Some(4.0))];
        let s = &summarize(&rows)[0];
        assert!((s.dsc_mean - 0.7).abs() < 1e-12);
        assert!((s.dsc_std - (0.08f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!((s.hd_mean, s.hd_std, s.hd_undefined), (Some(3.0), Some(1.0), 1));
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let rows: Vec<MetricsRow> =
            (0..7).map(|k| row(if k % 2 == 0 { MT } else { COMBINED }, k / 2, 0.1 + 0.123456789 * k as f64 / 7.0, (k != 3).then_some(k as f64 * 1.5))).collect();
        let path = dir.path().join("r.csv");
        write_rows(&path, &rows).unwrap();
        assert_eq!(read_rows(&path).unwrap(), rows);
    }

    #[test]
    fn report_tests_mt_against_combined() {
        let mut rows = vec![];
        for k in 0..8 {
            rows.push(row(MT, k, 0.4 + 0.01 * k as f64, Some(10.0)));
            rows.push(row(COMBINED, k, 0.8 + 0.005 * k as f64, Some(3.0 + k as f64)));
        }
        let rep = MetricsReport::build(rows).unwrap();
        let dsc = rep.comparisons.iter().find(|c| c.metric == "dsc").unwrap();
        assert!((dsc.test.p_value - 2.0 / 256.0).abs() < 1e-12);
        assert!(compare(&rep.rows[..3], MT, COMBINED, 0.01).is_err());
    }
}
