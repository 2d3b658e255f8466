//! Prediction-error metrics: MAE, RMSE, per-time RMSE and value histograms.
//!
//! All numbers are written with Rust's shortest round-trip float formatting,
//! so parsing a CSV back yields exactly the in-memory values.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::MetricsError;
use crate::fluid::Grid;

/// Table 1 figures for the full-size model. Carried as annotations only.
pub const PAPER_TABLE1_MAE: f64 = 0.1975;
pub const PAPER_TABLE1_RMSE: f64 = 0.3137;
pub const DEFAULT_BINS: usize = 50;

fn check_pairs(pred: &[Grid], truth: &[Grid]) -> Result<usize, MetricsError> {
    if pred.len() != truth.len() {
        return Err(MetricsError::ShapeMismatch(format!(
            "{} predicted grids vs {} true grids",
            pred.len(),
            truth.len()
        )));
    }
    let mut n = 0;
    for (k, (p, t)) in pred.iter().zip(truth).enumerate() {
        if (p.ny(), p.nx()) != (t.ny(), t.nx()) {
            return Err(MetricsError::ShapeMismatch(format!(
                "grid {k}: {}x{} vs {}x{}",
                p.ny(),
                p.nx(),
                t.ny(),
                t.nx()
            )));
        }
        n += p.data().len();
    }
    if n == 0 {
        return Err(MetricsError::ShapeMismatch("no values to compare".into()));
    }
    Ok(n)
}

/// (sum |e|, sum e^2, count) over all grid pairs.
fn error_sums(pred: &[Grid], truth: &[Grid]) -> Result<(f64, f64, usize), MetricsError> {
    let n = check_pairs(pred, truth)?;
    let (mut abs, mut sq) = (0.0, 0.0);
    for (p, t) in pred.iter().zip(truth) {
        for (a, b) in p.data().iter().zip(t.data()) {
            let e = a - b;
            abs += e.abs();
            sq += e * e;
        }
    }
    Ok((abs, sq, n))
}

pub fn mae(pred: &[Grid], truth: &[Grid]) -> Result<f64, MetricsError> {
    let (abs, _, n) = error_sums(pred, truth)?;
    Ok(abs / n as f64)
}

pub fn rmse(pred: &[Grid], truth: &[Grid]) -> Result<f64, MetricsError> {
    let (_, sq, n) = error_sums(pred, truth)?;
    Ok((sq / n as f64).sqrt())
}

/// Grids grouped by query time.
pub type ByTau = Vec<(f64, Vec<Grid>)>;

fn key_map(sets: &ByTau) -> BTreeMap<u64, usize> {
    sets.iter().enumerate().map(|(i, (tau, _))| (tau.to_bits(), i)).collect()
}

/// RMSE for each tau, ordered by tau.
pub fn rmse_per_tau(pred: &ByTau, truth: &ByTau) -> Result<Vec<(f64, f64)>, MetricsError> {
    let (pk, tk) = (key_map(pred), key_map(truth));
    let missing_pred: Vec<f64> = tk.keys().filter(|k| !pk.contains_key(k)).map(|&k| f64::from_bits(k)).collect();
    let missing_truth: Vec<f64> = pk.keys().filter(|k| !tk.contains_key(k)).map(|&k| f64::from_bits(k)).collect();
    if !missing_pred.is_empty() || !missing_truth.is_empty() {
        return Err(MetricsError::KeyMismatch {
            missing_pred,
            missing_truth,
        });
    }
    let mut out: Vec<(f64, f64)> = pk
        .iter()
        .map(|(k, &i)| Ok((f64::from_bits(*k), rmse(&pred[i].1, &truth[tk[k]].1)?)))
        .collect::<Result<_, MetricsError>>()?;
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `n_bins + 1` equal-width edges
    pub edges: Vec<f64>,
    /// normalized so that `sum(density * width) == 1`
    pub density: Vec<f64>,
}

/// Equal-width histogram over `[lo, hi]`. Values outside the range are
/// clamped into the first or last bin and still counted.
pub fn histogram(values: &[f64], n_bins: usize, range: (f64, f64)) -> Result<Histogram, MetricsError> {
    let (lo, hi) = range;
    if n_bins == 0 {
        return Err(MetricsError::InvalidHistogram("n_bins must be >= 1".into()));
    }
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(MetricsError::InvalidHistogram(format!("range ({lo}, {hi})")));
    }
    if values.is_empty() {
        return Err(MetricsError::InvalidHistogram("no values".into()));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(MetricsError::InvalidHistogram("NaN value".into()));
    }
    let width = (hi - lo) / n_bins as f64;
    let mut counts = vec![0usize; n_bins];
    for &v in values {
        let b = ((v - lo) / width).floor();
        let b = if b < 0.0 { 0 } else { (b as usize).min(n_bins - 1) };
        counts[b] += 1;
    }
    let edges = (0..=n_bins).map(|i| if i == n_bins { hi } else { lo + i as f64 * width }).collect();
    let norm = values.len() as f64 * width;
    Ok(Histogram {
        edges,
        density: counts.iter().map(|&c| c as f64 / norm).collect(),
    })
}

impl Histogram {
    pub fn integral(&self) -> f64 {
        self.density.iter().zip(self.edges.windows(2)).map(|(d, e)| d * (e[1] - e[0])).sum()
    }
}

/// Default histogram range: the truth values' extent, widened when degenerate.
pub fn default_range(truth: &[f64]) -> (f64, f64) {
    let lo = truth.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = truth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(lo < hi) {
        let c = if lo.is_finite() { lo } else { 0.0 };
        return (c - 0.5, c + 0.5);
    }
    (lo, hi)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let ranks = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    };
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Ux,
    Uy,
    /// both velocity components pooled
    All,
}

impl Component {
    pub fn name(self) -> &'static str {
        match self {
            Component::Ux => "ux",
            Component::Uy => "uy",
            Component::All => "all",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ux" => Some(Component::Ux),
            "uy" => Some(Component::Uy),
            "all" => Some(Component::All),
            _ => None,
        }
    }
}

/// One predicted case against its ground truth, in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalCase {
    pub scene: usize,
    pub tau: f64,
    pub pred: [Grid; 2],
    pub truth: [Grid; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    /// `None` for rows aggregated over every tau
    pub tau: Option<f64>,
    pub component: Component,
    pub mae: f64,
    pub rmse: f64,
    /// number of compared values
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramTable {
    pub component: Component,
    pub edges: Vec<f64>,
    pub density_pred: Vec<f64>,
    pub density_truth: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaperReference {
    pub mae: f64,
    pub rmse: f64,
    pub note: String,
}

impl Default for PaperReference {
    fn default() -> Self {
        Self {
            mae: PAPER_TABLE1_MAE,
            rmse: PAPER_TABLE1_RMSE,
            note: "full-size FluidDiff result (64x64, 1000 scenes); annotation only, not comparable at desk scale"
                .into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub global_mae: f64,
    pub global_rmse: f64,
    /// global rows first (tau = None), then per tau in increasing order
    pub rows: Vec<MetricsRow>,
    pub histograms: Vec<HistogramTable>,
    pub paper_reference: PaperReference,
}

fn sums_for(cases: &[&EvalCase], comp: Component) -> (f64, f64, usize) {
    let chans: &[usize] = match comp {
        Component::Ux => &[0],
        Component::Uy => &[1],
        Component::All => &[0, 1],
    };
    let (mut abs, mut sq, mut n) = (0.0, 0.0, 0);
    for c in cases {
        for &k in chans {
            for (a, b) in c.pred[k].data().iter().zip(c.truth[k].data()) {
                let e = a - b;
                abs += e.abs();
                sq += e * e;
                n += 1;
            }
        }
    }
    (abs, sq, n)
}

fn row(tau: Option<f64>, comp: Component, cases: &[&EvalCase]) -> MetricsRow {
    let (abs, sq, n) = sums_for(cases, comp);
    MetricsRow {
        tau,
        component: comp,
        mae: abs / n as f64,
        rmse: (sq / n as f64).sqrt(),
        count: n,
    }
}

impl MetricsReport {
    /// Aggregates `cases` into global and per-tau rows plus `n_bins`-bin histograms.
    pub fn from_cases(cases: &[EvalCase], n_bins: usize) -> Result<Self, MetricsError> {
        if cases.is_empty() {
            return Err(MetricsError::ShapeMismatch("no evaluation cases".into()));
        }
        for c in cases {
            check_pairs(&c.pred, &c.truth)?;
        }
        let all: Vec<&EvalCase> = cases.iter().collect();
        let comps = [Component::Ux, Component::Uy, Component::All];
        let mut rows: Vec<MetricsRow> = comps.iter().map(|&k| row(None, k, &all)).collect();
        let mut taus: Vec<f64> = cases.iter().map(|c| c.tau).collect();
        taus.sort_by(f64::total_cmp);
        taus.dedup();
        for &tau in &taus {
            let group: Vec<&EvalCase> = cases.iter().filter(|c| c.tau == tau).collect();
            rows.extend(comps.iter().map(|&k| row(Some(tau), k, &group)));
        }
        let global = rows[2].clone();

        let mut histograms = Vec::new();
        for (k, comp) in [(0, Component::Ux), (1, Component::Uy)] {
            let pred: Vec<f64> = cases.iter().flat_map(|c| c.pred[k].data().iter().copied()).collect();
            let truth: Vec<f64> = cases.iter().flat_map(|c| c.truth[k].data().iter().copied()).collect();
            let range = default_range(&truth);
            let hp = histogram(&pred, n_bins, range)?;
            let ht = histogram(&truth, n_bins, range)?;
            histograms.push(HistogramTable {
                component: comp,
                edges: ht.edges,
                density_pred: hp.density,
                density_truth: ht.density,
            });
        }
        Ok(Self {
            global_mae: global.mae,
            global_rmse: global.rmse,
            rows,
            histograms,
            paper_reference: PaperReference::default(),
        })
    }

    /// Rows for one component, per tau, ordered by tau.
    pub fn per_tau(&self, comp: Component) -> Vec<&MetricsRow> {
        self.rows.iter().filter(|r| r.tau.is_some() && r.component == comp).collect()
    }

    /// |global MSE - count-weighted mean of per-tau MSEs| for the pooled component.
    pub fn mse_identity_gap(&self) -> f64 {
        let per = self.per_tau(Component::All);
        let n: usize = per.iter().map(|r| r.count).sum();
        let weighted: f64 = per.iter().map(|r| r.rmse * r.rmse * r.count as f64).sum::<f64>() / n as f64;
        (self.global_rmse * self.global_rmse - weighted).abs()
    }

    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("tau,component,mae,rmse\n");
        for r in &self.rows {
            let tau = r.tau.map_or_else(|| "all".to_string(), |t| t.to_string());
            writeln!(s, "{tau},{},{},{}", r.component.name(), r.mae, r.rmse).unwrap();
        }
        s
    }

    pub fn histogram_csv(&self, comp: Component) -> Option<String> {
        let h = self.histograms.iter().find(|h| h.component == comp)?;
        let mut s = String::from("bin_lo,bin_hi,density_pred,density_truth\n");
        for (i, e) in h.edges.windows(2).enumerate() {
            writeln!(s, "{},{},{},{}", e[0], e[1], h.density_pred[i], h.density_truth[i]).unwrap();
        }
        Some(s)
    }
}

/// Parsed `metrics.csv` row: (tau, component, mae, rmse).
pub type CsvRow = (Option<f64>, Component, f64, f64);

pub fn parse_metrics_csv(text: &str) -> Result<Vec<CsvRow>, MetricsError> {
    let mut lines = text.lines();
    if lines.next() != Some("tau,component,mae,rmse") {
        return Err(MetricsError::ShapeMismatch("metrics.csv header".into()));
    }
    lines
        .map(|line| {
            let bad = || MetricsError::ShapeMismatch(format!("metrics.csv row {line:?}"));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            let tau = if f[0] == "all" { None } else { Some(f[0].parse().map_err(|_| bad())?) };
            let comp = Component::parse(f[1]).ok_or_else(bad)?;
            Ok((tau, comp, f[2].parse().map_err(|_| bad())?, f[3].parse().map_err(|_| bad())?))
        })
        .collect()
}

/// Parsed histogram CSV: (edges, density_pred, density_truth).
pub fn parse_histogram_csv(text: &str) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), MetricsError> {
    let mut lines = text.lines();
    if lines.next() != Some("bin_lo,bin_hi,density_pred,density_truth") {
        return Err(MetricsError::InvalidHistogram("histogram header".into()));
    }
    let (mut edges, mut dp, mut dt) = (Vec::new(), Vec::new(), Vec::new());
    for line in lines {
        let bad = || MetricsError::InvalidHistogram(format!("row {line:?}"));
        let f: Vec<f64> = line.split(',').map(|v| v.parse().map_err(|_| bad())).collect::<Result<_, _>>()?;
        if f.len() != 4 {
            return Err(bad());
        }
        if edges.is_empty() {
            edges.push(f[0]);
        }
        edges.push(f[1]);
        dp.push(f[2]);
        dt.push(f[3]);
    }
    Ok((edges, dp, dt))
}
