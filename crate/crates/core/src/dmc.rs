//! Distribution-matching curriculum: per-domain class-distribution
//! estimates, the running tally of accepted pseudo-labels, and the dynamic
//! per-class thresholds that push the two toward each other.

use std::collections::VecDeque;
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use crate::distribution::ClassDistribution;
use crate::error::{Error, Result};

/// Base threshold.
pub const DEFAULT_TAU: f64 = 0.7;
/// Scale of the ratio term.
pub const DEFAULT_MU: f64 = 0.1;

/// Rescales the labeled prior by the ratio of predicted-box counts on an
/// unlabeled domain to those on the labeled domain, then renormalizes.
///
/// Both count vectors must come from the same detector so its class bias
/// cancels in the ratio.
pub fn estimate_class_distribution(
    p_labeled: &ClassDistribution,
    labeled_counts: &[u64],
    unlabeled_counts: &[u64],
) -> Result<ClassDistribution> {
    let classes = p_labeled.len();
    for got in [labeled_counts.len(), unlabeled_counts.len()] {
        if got != classes {
            return Err(Error::DimensionMismatch {
                expected: classes,
                got,
            });
        }
    }
    let mut raw = Vec::with_capacity(classes);
    for c in 0..classes {
        let prior = p_labeled[c];
        if prior == 0.0 {
            raw.push(0.0);
        } else if labeled_counts[c] == 0 {
            return Err(Error::EstimationUndefined { class: c });
        } else {
            raw.push(prior * unlabeled_counts[c] as f64 / labeled_counts[c] as f64);
        }
    }
    ClassDistribution::from_weights(&raw)
}

/// Running per-domain, per-class counts of accepted pseudo-labels.
///
/// By default counts accumulate over the whole run and never decrease.
/// With a window, only the most recent `n` labels of each domain count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AccumulatorSnapshot")]
pub struct PseudoLabelAccumulator {
    domains: Arc<[String]>,
    classes: usize,
    counts: Vec<u64>,
    totals: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    window: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    recent: Vec<VecDeque<u32>>,
}

impl PseudoLabelAccumulator {
    pub fn new(domains: &[String], classes: usize) -> Result<Self> {
        if domains.is_empty() || classes == 0 {
            return Err(Error::Config(format!(
                "accumulator needs at least one domain and one class (got {} x {classes})",
                domains.len()
            )));
        }
        for (i, d) in domains.iter().enumerate() {
            if domains[..i].contains(d) {
                return Err(Error::validation(format!("duplicate domain `{d}`")));
            }
        }
        let k = domains.len();
        Ok(PseudoLabelAccumulator {
            domains: domains.into(),
            classes,
            counts: vec![0; k * classes],
            totals: vec![0; k],
            window: None,
            recent: Vec::new(),
        })
    }

    /// Keeps only the last `size` labels per domain.
    pub fn with_window(mut self, size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::Config("window size must be positive".into()));
        }
        if self.totals.iter().any(|&t| t > 0) {
            return Err(Error::Config(
                "window must be set before accumulating".into(),
            ));
        }
        self.window = Some(size);
        self.recent = vec![VecDeque::new(); self.domains.len()];
        Ok(self)
    }

    pub fn domains(&self) -> &[String] {
        &self.domains
    }

    pub(crate) fn shared_domains(&self) -> Arc<[String]> {
        Arc::clone(&self.domains)
    }

    pub fn domain_index(&self, id: &str) -> Option<usize> {
        self.domains.iter().position(|d| d == id)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn counts(&self, domain: usize) -> &[u64] {
        &self.counts[domain * self.classes..(domain + 1) * self.classes]
    }

    pub fn total(&self, domain: usize) -> u64 {
        self.totals[domain]
    }

    /// Adds one accepted label per entry of `classes` to `domain`. Either
    /// every label is recorded or, on a bad index, none is.
    pub fn record(&mut self, domain: usize, classes: &[usize]) -> Result<()> {
        if domain >= self.domains.len() {
            return Err(Error::OutOfRange {
                index: domain,
                limit: self.domains.len(),
            });
        }
        if let Some(&c) = classes.iter().find(|&&c| c >= self.classes) {
            return Err(Error::OutOfRange {
                index: c,
                limit: self.classes,
            });
        }
        let row = domain * self.classes;
        for &c in classes {
            self.counts[row + c] += 1;
            self.totals[domain] += 1;
            if let Some(size) = self.window {
                let q = &mut self.recent[domain];
                q.push_back(c as u32);
                if q.len() > size {
                    let old = q.pop_front().expect("non-empty") as usize;
                    self.counts[row + old] -= 1;
                    self.totals[domain] -= 1;
                }
            }
        }
        Ok(())
    }

    /// Share of each class among the domain's accepted labels, or the
    /// flagged empty distribution when nothing has been accepted yet.
    pub fn distribution(&self, domain: usize) -> ClassDistribution {
        let total = self.totals[domain];
        if total == 0 {
            return ClassDistribution::empty(self.classes);
        }
        ClassDistribution::from_counts(self.counts(domain)).expect("total is positive")
    }
}

#[derive(Deserialize)]
struct AccumulatorSnapshot {
    domains: Vec<String>,
    classes: usize,
    counts: Vec<u64>,
    totals: Vec<u64>,
    #[serde(default)]
    window: Option<usize>,
    #[serde(default)]
    recent: Vec<VecDeque<u32>>,
}

impl TryFrom<AccumulatorSnapshot> for PseudoLabelAccumulator {
    type Error = Error;

    fn try_from(s: AccumulatorSnapshot) -> Result<Self> {
        let mut acc = PseudoLabelAccumulator::new(&s.domains, s.classes)?;
        if let Some(size) = s.window {
            acc = acc.with_window(size)?;
        }
        if s.counts.len() != acc.counts.len() || s.totals.len() != acc.totals.len() {
            return Err(Error::validation(
                "accumulator snapshot has inconsistent dimensions",
            ));
        }
        for (j, &total) in s.totals.iter().enumerate() {
            let row: u64 = s.counts[j * s.classes..(j + 1) * s.classes].iter().sum();
            if row != total {
                return Err(Error::validation(format!(
                    "accumulator snapshot: domain `{}` total {total} != row sum {row}",
                    s.domains[j]
                )));
            }
        }
        if acc.window.is_some() {
            if s.recent.len() != s.domains.len() {
                return Err(Error::validation(
                    "accumulator snapshot: window history missing",
                ));
            }
            for (j, q) in s.recent.iter().enumerate() {
                let mut row = vec![0u64; s.classes];
                for &c in q {
                    *row.get_mut(c as usize).ok_or(Error::OutOfRange {
                        index: c as usize,
                        limit: s.classes,
                    })? += 1;
                }
                if row != s.counts[j * s.classes..(j + 1) * s.classes] {
                    return Err(Error::validation(
                        "accumulator snapshot: window history disagrees with counts",
                    ));
                }
            }
            acc.recent = s.recent;
        }
        acc.counts = s.counts;
        acc.totals = s.totals;
        Ok(acc)
    }
}

/// Free-function form of [`PseudoLabelAccumulator::record`].
pub fn record_pseudo_labels(
    acc: &mut PseudoLabelAccumulator,
    domain: usize,
    classes: &[usize],
) -> Result<()> {
    acc.record(domain, classes)
}

pub fn pseudo_label_distribution(acc: &PseudoLabelAccumulator, domain: usize) -> ClassDistribution {
    acc.distribution(domain)
}

/// Per-(domain, class) thresholds. Values may exceed 1 (the class is then
/// never accepted) and may be `+inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdTable {
    domains: Arc<[String]>,
    classes: usize,
    values: Vec<f64>,
    tau: f64,
    mu: f64,
}

pub(crate) fn check_tau_mu(tau: f64, mu: f64) -> Result<()> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Config(format!("tau = {tau} must lie in (0, 1)")));
    }
    if !(mu >= 0.0 && mu.is_finite()) {
        return Err(Error::Config(format!("mu = {mu} must be finite and >= 0")));
    }
    Ok(())
}

impl ThresholdTable {
    /// The same threshold everywhere.
    pub fn fixed(domains: &[String], classes: usize, tau: f64) -> Result<Self> {
        check_tau_mu(tau, 0.0)?;
        Ok(ThresholdTable {
            domains: domains.into(),
            classes,
            values: vec![tau; domains.len() * classes],
            tau,
            mu: 0.0,
        })
    }

    /// A table with explicit row-major values, each at least `tau`.
    pub fn from_values(
        domains: &[String],
        classes: usize,
        values: Vec<f64>,
        tau: f64,
        mu: f64,
    ) -> Result<Self> {
        check_tau_mu(tau, mu)?;
        if values.len() != domains.len() * classes {
            return Err(Error::DimensionMismatch {
                expected: domains.len() * classes,
                got: values.len(),
            });
        }
        if let Some(v) = values.iter().find(|v| v.is_nan() || **v < tau) {
            return Err(Error::Config(format!("threshold {v} is below tau = {tau}")));
        }
        Ok(ThresholdTable {
            domains: domains.into(),
            classes,
            values,
            tau,
            mu,
        })
    }

    pub fn domains(&self) -> &[String] {
        &self.domains
    }

    pub fn domain_index(&self, id: &str) -> Option<usize> {
        self.domains.iter().position(|d| d == id)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn get(&self, domain: usize, class: usize) -> f64 {
        self.values[domain * self.classes + class]
    }

    pub fn row(&self, domain: usize) -> &[f64] {
        &self.values[domain * self.classes..(domain + 1) * self.classes]
    }
}

/// `T = tau + mu * p_tilde / p_hat` per domain and class.
///
/// A domain with no accepted labels yet gets `tau` everywhere. Where the
/// estimate is zero the ratio is taken as 0 if nothing was accepted for
/// the class and as `+inf` otherwise.
pub fn thresholds(
    acc: &PseudoLabelAccumulator,
    estimates: &[ClassDistribution],
    tau: f64,
    mu: f64,
) -> Result<ThresholdTable> {
    check_tau_mu(tau, mu)?;
    let k = acc.domains.len();
    let classes = acc.classes;
    if estimates.len() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            got: estimates.len(),
        });
    }
    let mut values = Vec::with_capacity(k * classes);
    for (j, est) in estimates.iter().enumerate() {
        if est.len() != classes {
            return Err(Error::DimensionMismatch {
                expected: classes,
                got: est.len(),
            });
        }
        if est.is_empty() {
            return Err(Error::UndefinedDistribution(format!(
                "estimate for domain `{}` is empty",
                acc.domains[j]
            )));
        }
        let total = acc.totals[j];
        let counts = acc.counts(j);
        for c in 0..classes {
            let t = if total == 0 || counts[c] == 0 {
                tau
            } else if est[c] == 0.0 {
                f64::INFINITY
            } else {
                let p_tilde = counts[c] as f64 / total as f64;
                tau + mu * (p_tilde / est[c])
            };
            values.push(t);
        }
    }
    Ok(ThresholdTable {
        domains: acc.shared_domains(),
        classes,
        values,
        tau,
        mu,
    })
}

/// Writes `domain,class,value` rows for a `k x C` matrix given row-wise.
pub fn write_matrix_csv<W: Write>(
    mut w: W,
    domains: &[String],
    class_names: &[String],
    rows: impl IntoIterator<Item = Vec<f64>>,
) -> Result<()> {
    writeln!(w, "domain,class,value")?;
    for (domain, row) in domains.iter().zip(rows) {
        for (name, v) in class_names.iter().zip(row) {
            writeln!(w, "{domain},{name},{v}")?;
        }
    }
    Ok(())
}

pub fn write_thresholds_csv<W: Write>(
    w: W,
    table: &ThresholdTable,
    class_names: &[String],
) -> Result<()> {
    let rows = (0..table.domains.len()).map(|j| table.row(j).to_vec());
    write_matrix_csv(w, &table.domains, class_names, rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(v: &[f64]) -> ClassDistribution {
        ClassDistribution::new(v.to_vec()).unwrap()
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("d{i}")).collect()
    }

    #[test]
    fn estimate_examples() {
        let p = dist(&[0.8, 0.2]);
        let e = estimate_class_distribution(&p, &[80, 20], &[40, 40]).unwrap();
        assert!((e[0] - 0.5).abs() < 1e-12 && (e[1] - 0.5).abs() < 1e-12);

        let e = estimate_class_distribution(&p, &[80, 20], &[80, 20]).unwrap();
        assert!((e[0] - 0.8).abs() < 1e-12 && (e[1] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn estimate_errors() {
        let p = dist(&[0.8, 0.2]);
        assert!(matches!(
            estimate_class_distribution(&p, &[80, 0], &[1, 1]),
            Err(Error::EstimationUndefined { class: 1 })
        ));
        assert!(estimate_class_distribution(&p, &[80, 20], &[0, 0]).is_err());
        assert!(estimate_class_distribution(&p, &[80], &[1, 1]).is_err());
        // zero prior with zero labeled count is fine
        let q = dist(&[1.0, 0.0]);
        let e = estimate_class_distribution(&q, &[5, 0], &[3, 9]).unwrap();
        assert_eq!(e.probs(), &[1.0, 0.0]);
    }

    #[test]
    fn accumulator_init() {
        let acc = PseudoLabelAccumulator::new(&ids(2), 6).unwrap();
        assert_eq!(acc.counts(0), &[0; 6]);
        assert_eq!(acc.counts(1), &[0; 6]);
        assert_eq!((acc.total(0), acc.total(1)), (0, 0));
        let one = PseudoLabelAccumulator::new(&ids(1), 1).unwrap();
        assert_eq!(one.counts(0), &[0]);
        assert!(PseudoLabelAccumulator::new(&[], 2).is_err());
        assert!(PseudoLabelAccumulator::new(&ids(2), 0).is_err());
    }

    #[test]
    fn accumulator_records() {
        let mut acc = PseudoLabelAccumulator::new(&ids(1), 3).unwrap();
        record_pseudo_labels(&mut acc, 0, &[0, 0, 1]).unwrap();
        assert_eq!(acc.counts(0), &[2, 1, 0]);
        assert_eq!(acc.total(0), 3);
        let before = acc.clone();
        record_pseudo_labels(&mut acc, 0, &[]).unwrap();
        assert_eq!(acc, before);
        assert!(record_pseudo_labels(&mut acc, 0, &[0, 3]).is_err());
        assert_eq!(acc, before, "failed record must not partially apply");
        assert!(record_pseudo_labels(&mut acc, 1, &[0]).is_err());
    }

    #[test]
    fn distribution_examples() {
        let mut acc = PseudoLabelAccumulator::new(&ids(1), 2).unwrap();
        assert!(pseudo_label_distribution(&acc, 0).is_empty());
        acc.record(0, &[0; 5]).unwrap();
        assert_eq!(pseudo_label_distribution(&acc, 0).probs(), &[1.0, 0.0]);
        acc.record(0, &[1; 1]).unwrap();
        let mut acc2 = PseudoLabelAccumulator::new(&ids(1), 2).unwrap();
        acc2.record(0, &[0, 0, 0, 1]).unwrap();
        assert_eq!(pseudo_label_distribution(&acc2, 0).probs(), &[0.75, 0.25]);
    }

    #[test]
    fn snapshot_round_trip() {
        let mut acc = PseudoLabelAccumulator::new(&ids(2), 3).unwrap();
        acc.record(1, &[0, 2, 2]).unwrap();
        let text = serde_json::to_string(&acc).unwrap();
        let back: PseudoLabelAccumulator = serde_json::from_str(&text).unwrap();
        assert_eq!(back, acc);

        let mut w = PseudoLabelAccumulator::new(&ids(1), 2)
            .unwrap()
            .with_window(2)
            .unwrap();
        w.record(0, &[0, 1, 1]).unwrap();
        let back: PseudoLabelAccumulator =
            serde_json::from_str(&serde_json::to_string(&w).unwrap()).unwrap();
        assert_eq!(back, w);

        let broken = text.replace("\"totals\":[0,3]", "\"totals\":[0,4]");
        assert_ne!(broken, text);
        assert!(serde_json::from_str::<PseudoLabelAccumulator>(&broken).is_err());
    }

    #[test]
    fn window_forgets_old_labels() {
        let mut acc = PseudoLabelAccumulator::new(&ids(1), 2)
            .unwrap()
            .with_window(3)
            .unwrap();
        acc.record(0, &[0, 0, 0, 1, 1]).unwrap();
        assert_eq!(acc.counts(0), &[1, 2]);
        assert_eq!(acc.total(0), 3);
    }

    #[test]
    fn threshold_examples() {
        let mut acc = PseudoLabelAccumulator::new(&ids(1), 3).unwrap();
        let est = vec![dist(&[0.5, 0.3, 0.2])];
        // cold start
        let t = thresholds(&acc, &est, DEFAULT_TAU, DEFAULT_MU).unwrap();
        assert_eq!(t.row(0), &[0.7, 0.7, 0.7]);

        // ratio 1 on class 0, ratio 0 on class 2
        acc.record(0, &[0, 0, 0, 0, 0, 1, 1, 1, 1, 1]).unwrap();
        let t = thresholds(&acc, &est, DEFAULT_TAU, DEFAULT_MU).unwrap();
        assert!((t.get(0, 0) - 0.8).abs() < 1e-12, "{}", t.get(0, 0));
        assert_eq!(t.get(0, 2), 0.7);
    }

    #[test]
    fn threshold_suppression() {
        let mut acc = PseudoLabelAccumulator::new(&ids(1), 2).unwrap();
        acc.record(0, &[0, 0, 0, 1, 1]).unwrap();
        // p_tilde = 0.6, p_hat = 0.2
        let t = thresholds(&acc, &[dist(&[0.2, 0.8])], 0.7, 0.1).unwrap();
        assert!((t.get(0, 0) - 1.0).abs() < 1e-12);

        let t = thresholds(&acc, &[dist(&[0.0, 1.0])], 0.7, 0.1).unwrap();
        assert_eq!(t.get(0, 0), f64::INFINITY);

        let mut only1 = PseudoLabelAccumulator::new(&ids(1), 2).unwrap();
        only1.record(0, &[1]).unwrap();
        let t = thresholds(&only1, &[dist(&[0.0, 1.0])], 0.7, 0.1).unwrap();
        assert_eq!(t.get(0, 0), 0.7);
    }

    #[test]
    fn threshold_parameter_checks() {
        let acc = PseudoLabelAccumulator::new(&ids(1), 2).unwrap();
        let est = vec![dist(&[0.5, 0.5])];
        for (tau, mu) in [
            (0.0, 0.1),
            (1.0, 0.1),
            (0.7, -0.1),
            (0.7, f64::NAN),
            (f64::NAN, 0.1),
        ] {
            assert!(thresholds(&acc, &est, tau, mu).is_err(), "{tau} {mu}");
        }
        assert!(thresholds(&acc, &[], 0.7, 0.1).is_err());
        assert!(thresholds(&acc, &[ClassDistribution::empty(2)], 0.7, 0.1).is_err());
    }

    #[test]
    fn csv_export() {
        let t = ThresholdTable::fixed(&ids(1), 2, 0.7).unwrap();
        let mut buf = Vec::new();
        write_thresholds_csv(&mut buf, &t, &["car".into(), "ped".into()]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "domain,class,value\nd0,car,0.7\nd0,ped,0.7\n"
        );
    }
}
