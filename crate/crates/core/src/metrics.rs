//! Scoring helpers shared by the oracle and the evaluators.

/// Area under the ROC curve via the rank statistic with tie midranks.
/// `None` when either class is absent.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let np = n_pos as f64;
    Some((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// Log density of a log-normal mixture at `x > 0`; `means` and `stddevs`
/// are in log space.
pub fn lognormal_mixture_log_pdf(x: f64, weights: &[f64], means: &[f64], stddevs: &[f64]) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    let lx = x.ln();
    let terms: Vec<f64> = weights
        .iter()
        .zip(means)
        .zip(stddevs)
        .map(|((w, m), s)| {
            let z = (lx - m) / s;
            w.ln() - 0.5 * z * z - s.ln() - lx - 0.5 * (2.0 * std::f64::consts::PI).ln()
        })
        .collect();
    log_sum_exp(&terms)
}

pub fn lognormal_mixture_mean(weights: &[f64], means: &[f64], stddevs: &[f64]) -> f64 {
    weights
        .iter()
        .zip(means)
        .zip(stddevs)
        .map(|((w, m), s)| w * (m + s * s / 2.0).exp())
        .sum()
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
