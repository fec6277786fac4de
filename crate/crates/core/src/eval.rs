//! Classification metrics, McNemar's paired test, and the correlation
//! between per-class F1 and class frequency.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};

/// Below this many discordant pairs McNemar uses the exact binomial test.
pub const EXACT_THRESHOLD: u64 = 25;

/// Rows are gold classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConfusionMatrix(Vec<Vec<u64>>);

impl ConfusionMatrix {
    pub fn from_rows(rows: Vec<Vec<u64>>) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::Contract("confusion matrix must be square".into()));
        }
        Ok(Self(rows))
    }

    pub fn classes(&self) -> usize {
        self.0.len()
    }

    pub fn get(&self, gold: usize, pred: usize) -> u64 {
        self.0[gold][pred]
    }

    pub fn rows(&self) -> &[Vec<u64>] {
        &self.0
    }

    pub fn total(&self) -> u64 {
        self.0.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|k| self.0[k][k]).sum()
    }

    pub fn row_sum(&self, k: usize) -> u64 {
        self.0[k].iter().sum()
    }

    pub fn col_sum(&self, k: usize) -> u64 {
        self.0.iter().map(|r| r[k]).sum()
    }
}

pub fn confusion_matrix(gold: &[usize], pred: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if gold.len() != pred.len() {
        return Err(Error::Contract(format!(
            "{} gold labels vs {} predictions",
            gold.len(),
            pred.len()
        )));
    }
    let mut m = vec![vec![0u64; classes]; classes];
    for (&g, &p) in gold.iter().zip(pred) {
        if g >= classes || p >= classes {
            return Err(Error::Contract(format!(
                "class index {} out of range for {classes} classes",
                g.max(p)
            )));
        }
        m[g][p] += 1;
    }
    Ok(ConfusionMatrix(m))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub n: u64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: ConfusionMatrix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mcnemar: Option<McNemarResult>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class precision/recall/F1 (0/0 taken as 0), unweighted macro-F1 over
/// all classes, and accuracy. `labels` names the classes; missing names
/// fall back to the class index.
pub fn metrics(m: &ConfusionMatrix, labels: &[String]) -> Result<EvalReport> {
    let n = m.total();
    if n == 0 {
        return Err(Error::Data("no examples to score".into()));
    }
    let per_class: Vec<ClassMetrics> = (0..m.classes())
        .map(|k| {
            let tp = m.get(k, k);
            let precision = ratio(tp, m.col_sum(k));
            let recall = ratio(tp, m.row_sum(k));
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics {
                label: labels.get(k).cloned().unwrap_or_else(|| k.to_string()),
                precision,
                recall,
                f1,
                support: m.row_sum(k),
            }
        })
        .collect();
    let macro_f1 = per_class.iter().map(|c| c.f1).sum::<f64>() / m.classes() as f64;
    Ok(EvalReport {
        accuracy: m.trace() as f64 / n as f64,
        macro_f1,
        n,
        per_class,
        confusion: m.clone(),
        mcnemar: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum McNemarMethod {
    ExactBinomial,
    ChiSquareCorrected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McNemarResult {
    /// A correct, B wrong.
    pub b: u64,
    /// A wrong, B correct.
    pub c: u64,
    pub statistic: f64,
    pub p: f64,
    pub method: McNemarMethod,
}

/// McNemar's test on two classifiers' predictions over the same examples.
pub fn mcnemar(gold: &[usize], pred_a: &[usize], pred_b: &[usize]) -> Result<McNemarResult> {
    if gold.is_empty() || gold.len() != pred_a.len() || gold.len() != pred_b.len() {
        return Err(Error::Contract(format!(
            "mcnemar needs equal non-empty inputs, got {}/{}/{}",
            gold.len(),
            pred_a.len(),
            pred_b.len()
        )));
    }
    let (mut b, mut c) = (0u64, 0u64);
    for ((&g, &a), &bb) in gold.iter().zip(pred_a).zip(pred_b) {
        match (a == g, bb == g) {
            (true, false) => b += 1,
            (false, true) => c += 1,
            _ => {}
        }
    }
    Ok(mcnemar_counts(b, c))
}

/// McNemar's test from discordant counts: exact two-sided binomial when
/// `b + c < 25`, continuity-corrected chi-square otherwise.
pub fn mcnemar_counts(b: u64, c: u64) -> McNemarResult {
    let n = b + c;
    if n == 0 {
        return McNemarResult {
            b,
            c,
            statistic: 0.0,
            p: 1.0,
            method: McNemarMethod::ExactBinomial,
        };
    }
    if n < EXACT_THRESHOLD {
        McNemarResult {
            b,
            c,
            statistic: b.min(c) as f64,
            p: exact_binomial_p(b, c),
            method: McNemarMethod::ExactBinomial,
        }
    } else {
        let (statistic, p) = chi_square_corrected(b, c);
        McNemarResult {
            b,
            c,
            statistic,
            p,
            method: McNemarMethod::ChiSquareCorrected,
        }
    }
}

/// `min(1, 2·P(X ≤ min(b,c)))` for `X ~ Binomial(b+c, 1/2)`.
pub fn exact_binomial_p(b: u64, c: u64) -> f64 {
    let n = b + c;
    if n == 0 {
        return 1.0;
    }
    let k = b.min(c);
    // ln C(n, i) built incrementally; pmf = C(n,i) / 2^n.
    let ln_half_n = n as f64 * 0.5f64.ln();
    let mut ln_choose = 0.0f64;
    let mut tail = 0.0;
    for i in 0..=k {
        if i > 0 {
            ln_choose += ((n - i + 1) as f64).ln() - (i as f64).ln();
        }
        tail += (ln_choose + ln_half_n).exp();
    }
    (2.0 * tail).min(1.0)
}

/// Statistic `(|b−c|−1)²/(b+c)` and its chi-square(1) upper tail.
pub fn chi_square_corrected(b: u64, c: u64) -> (f64, f64) {
    let n = (b + c) as f64;
    if n == 0.0 {
        return (0.0, 1.0);
    }
    let diff = (b as f64 - c as f64).abs() - 1.0;
    let statistic = diff.powi(2) / n;
    let dist = ChiSquared::new(1.0).expect("one degree of freedom");
    (statistic, dist.sf(statistic))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "r", rename_all = "snake_case")]
pub enum Correlation {
    Defined(f64),
    /// One of the series has zero variance.
    Undefined,
}

/// Pearson correlation between each class's relative frequency and its F1.
pub fn category_size_correlation(f1: &[f64], counts: &[u64]) -> Result<Correlation> {
    if f1.len() != counts.len() || f1.len() < 3 {
        return Err(Error::Contract(format!(
            "need at least 3 paired values, got {} f1 and {} counts",
            f1.len(),
            counts.len()
        )));
    }
    if counts.contains(&0) {
        return Err(Error::Contract("class counts must be positive".into()));
    }
    let total: u64 = counts.iter().sum();
    let sizes: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mx, my) = (mean(&sizes), mean(f1));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in sizes.iter().zip(f1) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    // Spreads below ~1e-10 of the series scale are rounding noise.
    let flat = |ss: f64, m: f64| ss <= 1e-20 * m.abs().max(1.0).powi(2) * sizes.len() as f64;
    if flat(sxx, mx) || flat(syy, my) {
        return Ok(Correlation::Undefined);
    }
    Ok(Correlation::Defined((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_examples() {
        let m = confusion_matrix(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!(m.trace(), 3);
        assert_eq!(m.total(), 3);
        let m = confusion_matrix(&[0, 0, 1], &[0, 1, 1], 2).unwrap();
        assert_eq!(m.rows(), &[vec![1, 1], vec![0, 1]]);
        let m = confusion_matrix(&[], &[], 2).unwrap();
        assert_eq!(m.total(), 0);
        assert!(confusion_matrix(&[0], &[0, 1], 2).is_err());
        assert!(confusion_matrix(&[0], &[2], 2).is_err());
    }

    #[test]
    fn metrics_examples() {
        let perfect = ConfusionMatrix::from_rows(vec![vec![3, 0], vec![0, 4]]).unwrap();
        let r = metrics(&perfect, &[]).unwrap();
        assert_eq!((r.accuracy, r.macro_f1), (1.0, 1.0));

        let absent = ConfusionMatrix::from_rows(vec![vec![2, 0], vec![0, 0]]).unwrap();
        let r = metrics(&absent, &[]).unwrap();
        assert_eq!(r.per_class[1].f1, 0.0);
        assert_eq!(r.macro_f1, 0.5);

        let empty = ConfusionMatrix::from_rows(vec![vec![0, 0], vec![0, 0]]).unwrap();
        assert!(matches!(metrics(&empty, &[]), Err(Error::Data(_))));
    }

    #[test]
    fn metrics_hand_computed() {
        let m = ConfusionMatrix::from_rows(vec![vec![5, 1], vec![2, 4]]).unwrap();
        let r = metrics(&m, &["a".into(), "b".into()]).unwrap();
        let (p0, r0) = (5.0 / 7.0, 5.0 / 6.0);
        let (p1, r1) = (4.0 / 5.0, 4.0 / 6.0);
        let f0 = 2.0 * p0 * r0 / (p0 + r0);
        let f1 = 2.0 * p1 * r1 / (p1 + r1);
        assert_eq!(r.accuracy, 0.75);
        assert!((r.per_class[0].f1 - f0).abs() < 1e-12);
        assert!((r.per_class[1].f1 - f1).abs() < 1e-12);
        assert!((r.per_class[0].f1 - 0.7692).abs() < 1e-4);
        assert!((r.per_class[1].f1 - 0.7273).abs() < 1e-4);
        assert!((r.macro_f1 - 0.7483).abs() < 1e-4);
        assert_eq!(r.per_class[1].label, "b");
        assert_eq!(r.per_class[0].support, 6);
    }

    #[test]
    fn mcnemar_examples() {
        let r = mcnemar_counts(5, 5);
        assert_eq!(r.p, 1.0);
        assert_eq!(r.method, McNemarMethod::ExactBinomial);

        let r = mcnemar_counts(10, 0);
        assert!((r.p - 1.0 / 512.0).abs() < 1e-15);

        let r = mcnemar_counts(40, 20);
        assert_eq!(r.method, McNemarMethod::ChiSquareCorrected);
        assert!((r.statistic - 361.0 / 60.0).abs() < 1e-12);
        assert!((r.p - 0.0142).abs() < 1e-3);

        let r = mcnemar_counts(0, 0);
        assert_eq!((r.statistic, r.p), (0.0, 1.0));
    }

    #[test]
    fn mcnemar_from_predictions() {
        let gold = [0, 1, 1, 0, 2];
        let a = [0, 1, 0, 0, 2];
        let b = [0, 0, 1, 1, 1];
        let r = mcnemar(&gold, &a, &b).unwrap();
        assert_eq!((r.b, r.c), (3, 1));
        let same = mcnemar(&gold, &a, &a).unwrap();
        assert_eq!(same.p, 1.0);
        assert!(mcnemar(&[], &[], &[]).is_err());
    }

    #[test]
    fn correlation_examples() {
        match category_size_correlation(&[0.1, 0.2, 0.3], &[1, 2, 3]).unwrap() {
            Correlation::Defined(r) => assert!((r - 1.0).abs() < 1e-12),
            Correlation::Undefined => panic!("expected defined"),
        }
        assert_eq!(
            category_size_correlation(&[0.5, 0.5, 0.5], &[1, 2, 3]).unwrap(),
            Correlation::Undefined
        );
        assert_eq!(
            category_size_correlation(&[0.1, 0.5, 0.9], &[4, 4, 4]).unwrap(),
            Correlation::Undefined
        );
        match category_size_correlation(&[0.5, 0.7, 0.9], &[2, 3, 5]).unwrap() {
            Correlation::Defined(r) => assert!((r - 0.9820).abs() < 1e-4, "{r}"),
            Correlation::Undefined => panic!("expected defined"),
        }
        assert!(category_size_correlation(&[0.1, 0.2], &[1, 2]).is_err());
    }
}
