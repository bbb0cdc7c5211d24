//! Evaluation metrics, paired and two-sample tests, and report tables.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::labels::TARGET_NAMES;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    /// `-inf` marks an undefined value (constant targets, imperfect fit).
    pub r2: f64,
}

/// MAE, RMSE and R² with SST taken about the mean of `y`.
pub fn metrics(y: &[f64], yhat: &[f64]) -> Result<Metrics> {
    if y.is_empty() || y.len() != yhat.len() {
        return Err(Error::Domain(format!("metrics need equal non-empty inputs, got {} and {}", y.len(), yhat.len())));
    }
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let (mut abs, mut sse, mut sst) = (0.0, 0.0, 0.0);
    for (a, b) in y.iter().zip(yhat) {
        abs += (a - b).abs();
        sse += (a - b) * (a - b);
        sst += (a - mean) * (a - mean);
    }
    let r2 = if sst > 0.0 {
        1.0 - sse / sst
    } else if sse == 0.0 {
        0.0
    } else {
        f64::NEG_INFINITY
    };
    Ok(Metrics {
        mae: abs / n,
        rmse: (sse / n).sqrt(),
        r2,
    })
}

pub fn format_r2(r2: f64) -> String {
    if r2.is_finite() {
        format!("{r2:.6}")
    } else {
        "undefined".into()
    }
}

/// Mean absolute error across the four targets of one sample.
pub fn per_sample_error(pred: &[f64; 4], label: &[f64; 4]) -> f64 {
    pred.iter().zip(label).map(|(p, l)| (p - l).abs()).sum::<f64>() / 4.0
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WilcoxonResult {
    /// Sum of ranks of positive differences `a - b`.
    pub statistic: f64,
    pub p_value: f64,
    /// Pairs left after dropping zero differences.
    pub n: usize,
    pub exact: bool,
    pub degenerate: bool,
}

pub const WILCOXON_EXACT_MAX: usize = 12;

/// Midranks of `|d|` for non-zero differences, in input order.
pub fn signed_ranks(d: &[f64]) -> Vec<(f64, bool)> {
    let mut idx: Vec<usize> = (0..d.len()).collect();
    idx.sort_by(|&a, &b| d[a].abs().total_cmp(&d[b].abs()));
    let mut ranks = vec![0.0; d.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && d[idx[j + 1]].abs() == d[idx[i]].abs() {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    d.iter().zip(ranks).map(|(&x, r)| (r, x > 0.0)).collect()
}

/// Two-sided Wilcoxon signed-rank test on paired samples.
///
/// Zero differences are dropped. Up to [`WILCOXON_EXACT_MAX`] pairs the null
/// distribution is computed exactly; above that a normal approximation with
/// continuity and tie corrections is used.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("paired samples differ in length: {} vs {}", a.len(), b.len())));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|&x| x != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            statistic: 0.0,
            p_value: 1.0,
            n: 0,
            exact: true,
            degenerate: true,
        });
    }
    let ranked = signed_ranks(&d);
    let w: f64 = ranked.iter().filter(|r| r.1).map(|r| r.0).sum();
    if n <= WILCOXON_EXACT_MAX {
        let ranks: Vec<f64> = ranked.iter().map(|r| r.0).collect();
        return Ok(WilcoxonResult {
            statistic: w,
            p_value: exact_p(&ranks, w),
            n,
            exact: true,
            degenerate: false,
        });
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut ties = 0.0;
    let mut sorted: Vec<f64> = ranked.iter().map(|r| r.0).collect();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&r| r == sorted[i]).count();
        let t = j as f64;
        ties += t * t * t - t;
        i += j;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - ties / 48.0;
    let p = if var <= 0.0 {
        1.0
    } else {
        let z = ((w - mean).abs() - 0.5).max(0.0) / var.sqrt();
        libm::erfc(z / std::f64::consts::SQRT_2).min(1.0)
    };
    Ok(WilcoxonResult {
        statistic: w,
        p_value: p,
        n,
        exact: false,
        degenerate: false,
    })
}

/// Exact two-sided p-value: counts of sign assignments by doubled rank sum.
fn exact_p(ranks: &[f64], w: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut counts = vec![0u64; max + 1];
    counts[0] = 1;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] > 0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let total = (1u64 << ranks.len()) as f64;
    let target = (w * 2.0).round() as usize;
    let le: u64 = counts[..=target].iter().sum();
    let ge: u64 = counts[target..].iter().sum();
    (2.0 * le.min(ge) as f64 / total).min(1.0)
}

/// Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value.
pub fn ks_two_sample(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Domain("KS test needs two non-empty samples".into()));
    }
    let mut a = x.to_vec();
    let mut b = y.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    let en = (n * m / (n + m)).sqrt();
    Ok((d, kolmogorov_q((en + 0.12 + 0.11 / en) * d)))
}

/// Survival function of the Kolmogorov distribution.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=200 {
        let kf = k as f64;
        let term = sign * (-2.0 * kf * kf * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-16 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Metrics of each target for one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelMetrics {
    pub model: String,
    pub per_target: [Metrics; 4],
}

impl ModelMetrics {
    pub fn evaluate(model: impl Into<String>, labels: &[[f64; 4]], preds: &[[f64; 4]]) -> Result<Self> {
        let mut per_target = [Metrics { mae: 0.0, rmse: 0.0, r2: 0.0 }; 4];
        for (t, slot) in per_target.iter_mut().enumerate() {
            let y: Vec<f64> = labels.iter().map(|l| l[t]).collect();
            let p: Vec<f64> = preds.iter().map(|l| l[t]).collect();
            *slot = metrics(&y, &p)?;
        }
        Ok(ModelMetrics {
            model: model.into(),
            per_target,
        })
    }

    pub fn average(&self) -> Metrics {
        let avg = |f: fn(&Metrics) -> f64| self.per_target.iter().map(f).sum::<f64>() / 4.0;
        Metrics {
            mae: avg(|m| m.mae),
            rmse: avg(|m| m.rmse),
            r2: avg(|m| m.r2),
        }
    }
}

/// Training-set mean per target.
pub fn target_means(train: &[[f64; 4]]) -> Result<[f64; 4]> {
    if train.is_empty() {
        return Err(Error::Domain("naive baseline needs training labels".into()));
    }
    let mut m = [0.0; 4];
    for l in train {
        for t in 0..4 {
            m[t] += l[t];
        }
    }
    Ok(m.map(|s| s / train.len() as f64))
}

/// Predict each target's training mean for every test sample.
pub fn naive_baseline(train: &[[f64; 4]], test: &[[f64; 4]]) -> Result<ModelMetrics> {
    let m = target_means(train)?;
    ModelMetrics::evaluate("naive_mean", test, &vec![m; test.len()])
}

/// Mean and population std per column.
pub fn mean_std(rows: &[[f64; 4]]) -> [(f64, f64); 4] {
    let n = rows.len().max(1) as f64;
    std::array::from_fn(|t| {
        let mean = rows.iter().map(|r| r[t]).sum::<f64>() / n;
        let var = rows.iter().map(|r| (r[t] - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    })
}

pub fn alpha_report_csv(alphas: &[[f64; 4]]) -> String {
    let mut s = String::from("target,mean_alpha,std_alpha\n");
    for (t, (m, sd)) in mean_std(alphas).iter().enumerate() {
        let _ = writeln!(s, "{},{m:.6},{sd:.6}", TARGET_NAMES[t]);
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Better {
    Lower,
    Higher,
}

fn table_rows(models: &[ModelMetrics]) -> Vec<(String, String, Better, Vec<f64>)> {
    let mut rows = Vec::new();
    let metrics: [(&str, Better, fn(&Metrics) -> f64); 3] = [
        ("MAE", Better::Lower, |m| m.mae),
        ("RMSE", Better::Lower, |m| m.rmse),
        ("R2", Better::Higher, |m| m.r2),
    ];
    for (t, name) in TARGET_NAMES.iter().enumerate() {
        for (mname, better, f) in metrics {
            rows.push((name.to_string(), mname.to_string(), better, models.iter().map(|m| f(&m.per_target[t])).collect()));
        }
    }
    for (mname, better, f) in metrics {
        rows.push(("avg".into(), mname.to_string(), better, models.iter().map(|m| f(&m.average())).collect()));
    }
    rows
}

fn best_mask(values: &[f64], better: Better) -> Vec<bool> {
    let best = match better {
        Better::Lower => values.iter().copied().fold(f64::INFINITY, f64::min),
        Better::Higher => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    };
    values.iter().map(|&v| v == best).collect()
}

fn fmt_value(metric: &str, v: f64) -> String {
    if metric == "R2" {
        format_r2(v)
    } else {
        format!("{v:.6}")
    }
}

/// Comparison table as CSV; `best` lists every model tied for the best value.
pub fn metrics_csv(models: &[ModelMetrics]) -> String {
    let mut s = String::from("target,metric");
    for m in models {
        let _ = write!(s, ",{}", m.model);
    }
    s.push_str(",best\n");
    for (target, metric, better, values) in table_rows(models) {
        let _ = write!(s, "{target},{metric}");
        for v in &values {
            let _ = write!(s, ",{}", fmt_value(&metric, *v));
        }
        let best: Vec<&str> = best_mask(&values, better)
            .iter()
            .zip(models)
            .filter(|(b, _)| **b)
            .map(|(_, m)| m.model.as_str())
            .collect();
        let _ = writeln!(s, ",{}", best.join(";"));
    }
    s
}

/// Aligned plain-text table; best values per row carry a `*`.
pub fn metrics_text(models: &[ModelMetrics]) -> String {
    let width = models.iter().map(|m| m.model.len()).max().unwrap_or(0).max(12) + 2;
    let mut s = format!("{:<8}{:<6}", "target", "metric");
    for m in models {
        let _ = write!(s, "{:>width$}", m.model);
    }
    s.push('\n');
    for (target, metric, better, values) in table_rows(models) {
        let _ = write!(s, "{target:<8}{metric:<6}");
        for (v, b) in values.iter().zip(best_mask(&values, better)) {
            let cell = format!("{}{}", fmt_value(&metric, *v), if b { "*" } else { " " });
            let _ = write!(s, "{cell:>width$}");
        }
        s.push('\n');
    }
    s
}
