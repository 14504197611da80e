//! Rank correlation, histogram KL divergence and run summaries, plus CSV output.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::optimizer::RunHistory;
use crate::{Error, Result};

pub const KL_BINS: usize = 32;

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("lengths {} and {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::Empty("correlation needs at least two points"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("correlation input"));
    }
    Ok(())
}

pub fn pearson_r(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::OutOfRange("correlation of a constant sequence".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

pub fn spearman_rho(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    pearson_r(&average_ranks(a), &average_ranks(b))
}

fn histogram(xs: &[f64], lo: f64, width: f64, bins: usize) -> Vec<f64> {
    let mut h = vec![1.0; bins];
    for &x in xs {
        let b = if width > 0.0 {
            (((x - lo) / width) as usize).min(bins - 1)
        } else {
            0
        };
        h[b] += 1.0;
    }
    let total: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= total);
    h
}

/// KL(p ‖ q) between add-one-smoothed histograms over the pooled range.
pub fn kl_divergence_hist(p: &[f64], q: &[f64], bins: usize) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::Empty("histogram samples"));
    }
    if bins < 2 {
        return Err(Error::OutOfRange(format!("{bins} bins")));
    }
    if p.iter().chain(q).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("histogram samples"));
    }
    let lo = p.iter().chain(q).copied().fold(f64::INFINITY, f64::min);
    let hi = p.iter().chain(q).copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let hp = histogram(p, lo, width, bins);
    let hq = histogram(q, lo, width, bins);
    Ok(hp.iter().zip(&hq).map(|(a, b)| a * (a / b).ln()).sum::<f64>().max(0.0))
}

/// One scalar result with provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub metric: String,
    pub name: String,
    pub value: f64,
    pub n: usize,
    pub seed: u64,
    pub dataset_hash: String,
    pub context: Vec<(String, String)>,
}

impl MetricsRecord {
    pub fn new(metric: &str, name: &str, value: f64, n: usize, seed: u64) -> Self {
        MetricsRecord {
            metric: metric.into(),
            name: name.into(),
            value,
            n,
            seed,
            dataset_hash: String::new(),
            context: Vec::new(),
        }
    }

    pub fn with_dataset(mut self, hash: &str) -> Self {
        self.dataset_hash = hash.into();
        self
    }

    pub fn tag(mut self, key: &str, value: impl ToString) -> Self {
        self.context.push((key.into(), value.to_string()));
        self
    }

    fn context_field(&self) -> String {
        let mut parts: Vec<String> = Vec::new();
        if !self.dataset_hash.is_empty() {
            parts.push(format!("dataset={}", self.dataset_hash));
        }
        parts.extend(self.context.iter().map(|(k, v)| format!("{k}={v}")));
        parts.join(";")
    }
}

pub fn write_metrics_csv(records: &[MetricsRecord], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["metric", "name", "value", "n", "seed", "context"]).map_err(csv_err)?;
    for r in records {
        if !r.value.is_finite() {
            return Err(Error::NonFinite("metric value"));
        }
        out.write_record([
            r.metric.clone(),
            r.name.clone(),
            r.value.to_string(),
            r.n.to_string(),
            r.seed.to_string(),
            r.context_field(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

/// Median, min and max of final EDP across runs of one method on one workload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub workload: String,
    pub runs: usize,
    pub median_edp: f64,
    pub min_edp: f64,
    pub max_edp: f64,
    pub median_evaluations: f64,
    pub seeds: Vec<u64>,
    /// Each run's cumulative-minimum series, as stored.
    pub convergence: Vec<Vec<Option<f64>>>,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Summary of runs that share method and workload.
pub fn summarize_runs(histories: &[RunHistory]) -> Result<RunSummary> {
    let first = histories.first().ok_or(Error::Empty("run histories"))?;
    let (method, workload) = (&first.header.method, &first.header.workload);
    if let Some(h) = histories
        .iter()
        .find(|h| &h.header.method != method || &h.header.workload != workload)
    {
        return Err(Error::State(format!(
            "cannot summarize {}/{} together with {}/{}",
            method, workload, h.header.method, h.header.workload
        )));
    }
    let finals = histories
        .iter()
        .map(|h| h.final_edp().ok_or(Error::Empty("completed design in run history")))
        .collect::<Result<Vec<_>>>()?;
    let evals: Vec<f64> = histories.iter().map(|h| h.evaluations.len() as f64).collect();
    Ok(RunSummary {
        method: method.clone(),
        workload: workload.clone(),
        runs: histories.len(),
        median_edp: median(&finals),
        min_edp: finals.iter().copied().fold(f64::INFINITY, f64::min),
        max_edp: finals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        median_evaluations: median(&evals),
        seeds: histories.iter().map(|h| h.header.seed).collect(),
        convergence: histories.iter().map(|h| h.cummin_series()).collect(),
    })
}

/// Groups by (method, workload) in first-seen order and summarizes each group.
pub fn summarize_all(histories: &[RunHistory]) -> Result<Vec<RunSummary>> {
    let mut keys: Vec<(String, String)> = Vec::new();
    for h in histories {
        let k = (h.header.method.clone(), h.header.workload.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.iter()
        .map(|(m, w)| {
            let group: Vec<RunHistory> = histories
                .iter()
                .filter(|h| &h.header.method == m && &h.header.workload == w)
                .cloned()
                .collect();
            summarize_runs(&group)
        })
        .collect()
}

pub fn write_summary_csv(summaries: &[RunSummary], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["method", "workload", "runs", "median_edp", "min_edp", "max_edp", "median_evaluations"])
        .map_err(csv_err)?;
    for s in summaries {
        out.write_record([
            s.method.clone(),
            s.workload.clone(),
            s.runs.to_string(),
            s.median_edp.to_string(),
            s.min_edp.to_string(),
            s.max_edp.to_string(),
            s.median_evaluations.to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Long-format convergence curves: one row per (run, evaluation).
pub fn write_convergence_csv(summaries: &[RunSummary], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["method", "workload", "seed", "evaluation", "best_total_edp"])
        .map_err(csv_err)?;
    for s in summaries {
        for (seed, series) in s.seeds.iter().zip(&s.convergence) {
            for (i, v) in series.iter().enumerate() {
                out.write_record([
                    s.method.clone(),
                    s.workload.clone(),
                    seed.to_string(),
                    (i + 1).to_string(),
                    v.map(|x| x.to_string()).unwrap_or_default(),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Side-by-side median final EDP per workload for the given methods.
pub fn comparison_table(summaries: &[RunSummary], methods: &[&str]) -> Vec<(String, Vec<Option<f64>>)> {
    let mut workloads: Vec<String> = Vec::new();
    for s in summaries {
        if !workloads.contains(&s.workload) {
            workloads.push(s.workload.clone());
        }
    }
    workloads
        .into_iter()
        .map(|w| {
            let row = methods
                .iter()
                .map(|m| {
                    summaries
                        .iter()
                        .find(|s| s.workload == w && s.method == *m)
                        .map(|s| s.median_edp)
                })
                .collect();
            (w, row)
        })
        .collect()
}

/// The comparison table as CSV: one row per workload, one median column per
/// method, plus each method's median relative to the first method.
pub fn write_comparison_csv(summaries: &[RunSummary], methods: &[&str], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["workload".to_string()];
    header.extend(methods.iter().map(|m| format!("{m}_median_edp")));
    header.extend(methods.iter().skip(1).map(|m| format!("{m}_over_{}", methods[0])));
    out.write_record(&header).map_err(csv_err)?;
    for (workload, row) in comparison_table(summaries, methods) {
        let mut rec = vec![workload];
        rec.extend(row.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()));
        for v in row.iter().skip(1) {
            rec.push(match (v, row[0]) {
                (Some(x), Some(base)) if base > 0.0 => (x / base).to_string(),
                _ => String::new(),
            });
        }
        out.write_record(&rec).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Rank by counting, then Pearson by the textbook sums.
    fn brute_spearman(a: &[f64], b: &[f64]) -> f64 {
        let rank = |xs: &[f64]| -> Vec<f64> {
            xs.iter()
                .map(|&x| {
                    let less = xs.iter().filter(|&&y| y < x).count() as f64;
                    let equal = xs.iter().filter(|&&y| y == x).count() as f64;
                    less + (equal + 1.0) / 2.0
                })
                .collect()
        };
        let (ra, rb) = (rank(a), rank(b));
        let n = a.len() as f64;
        let ma = ra.iter().sum::<f64>() / n;
        let mb = rb.iter().sum::<f64>() / n;
        let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn spearman_extremes() {
        let a = [3.0, 1.0, 4.0, 1.5, 9.0];
        assert!((spearman_rho(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        let rev: Vec<f64> = a.iter().map(|x| -x).collect();
        assert!((spearman_rho(&a, &rev).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn spearman_matches_brute_force_with_ties() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<f64> = (0..200).map(|_| r.random_range(0..40) as f64).collect();
        let b: Vec<f64> = a.iter().map(|x| x + r.random_range(-10.0..10.0f64).round()).collect();
        let fast = spearman_rho(&a, &b).unwrap();
        assert!((fast - brute_spearman(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn correlation_errors() {
        assert!(matches!(spearman_rho(&[1.0], &[1.0]), Err(Error::Empty(_))));
        assert!(matches!(spearman_rho(&[1.0, 2.0], &[1.0]), Err(Error::Shape(_))));
        assert!(spearman_rho(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn pearson_of_affine_is_one() {
        let a = [1.0, 2.0, 5.0, 7.0];
        let b: Vec<f64> = a.iter().map(|x| 3.0 * x - 1.0).collect();
        assert!((pearson_r(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kl_identical_is_zero_and_asymmetric_otherwise() {
        let p: Vec<f64> = (0..100).map(|i| i as f64 / 10.0).collect();
        assert_eq!(kl_divergence_hist(&p, &p, KL_BINS).unwrap(), 0.0);
        // skewed q: most mass near the top of the range
        let q: Vec<f64> = (0..100).map(|i| 10.0 - (i as f64 / 10.0).powi(2) / 10.0).collect();
        let pq = kl_divergence_hist(&p, &q, KL_BINS).unwrap();
        let qp = kl_divergence_hist(&q, &p, KL_BINS).unwrap();
        assert!(pq > 0.0 && qp > 0.0);
        assert!((pq - qp).abs() > 1e-3);
        assert!(kl_divergence_hist(&[], &p, 8).is_err());
        assert!(kl_divergence_hist(&p, &p, 1).is_err());
    }

    #[test]
    fn kl_by_hand_on_two_bins() {
        // p = {0, 0, 1}, q = {1, 1, 1} over [0, 1] with 2 bins
        // smoothed p = (3, 2)/5, q = (1, 4)/5
        let kl = kl_divergence_hist(&[0.0, 0.0, 1.0], &[1.0, 1.0, 1.0], 2).unwrap();
        let expect = 0.6 * (0.6f64 / 0.2).ln() + 0.4 * (0.4f64 / 0.8).ln();
        assert!((kl - expect).abs() < 1e-15);
    }

    #[test]
    fn median_order_statistics() {
        assert_eq!(median(&[9.0, 2.0, 5.0]), 5.0);
        assert_eq!(median(&[4.0]), 4.0);
        assert_eq!(median(&[1.0, 3.0]), 2.0);
    }

    #[test]
    fn metrics_csv_layout() {
        let recs = vec![MetricsRecord::new("spearman", "starlight", 0.93, 52, 7)
            .with_dataset("abc")
            .tag("epochs", 1000)];
        let mut buf = Vec::new();
        write_metrics_csv(&recs, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "metric,name,value,n,seed,context\nspearman,starlight,0.93,52,7,dataset=abc;epochs=1000\n");
    }

    proptest! {
        #[test]
        fn spearman_invariant_under_monotone_maps(xs in prop::collection::vec(-50.0..50.0f64, 3..40), seed in 0u64..1000) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let ys: Vec<f64> = xs.iter().map(|x| x + r.random_range(-20.0..20.0)).collect();
            prop_assume!(xs.iter().any(|&x| x != xs[0]) && ys.iter().any(|&y| y != ys[0]));
            let base = spearman_rho(&xs, &ys).unwrap();
            let tx: Vec<f64> = xs.iter().map(|x| (x / 10.0).exp()).collect();
            let ty: Vec<f64> = ys.iter().map(|y| y.powi(3) + 2.0 * y).collect();
            prop_assert!((spearman_rho(&tx, &ty).unwrap() - base).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&base));
        }

        #[test]
        fn kl_is_nonnegative(p in prop::collection::vec(-5.0..5.0f64, 1..60), q in prop::collection::vec(-5.0..5.0f64, 1..60)) {
            prop_assert!(kl_divergence_hist(&p, &q, KL_BINS).unwrap() >= 0.0);
        }
    }
}
