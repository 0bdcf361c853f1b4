//! End-to-end curriculum run: similarity, estimates, schedule, then one
//! filtering round per phase.

use serde::{Deserialize, Serialize};

use crate::dec::{self, CurriculumSchedule, DomainStats, ScheduleMode};
use crate::distribution::ClassDistribution;
use crate::dmc::{self, PseudoLabelAccumulator, ThresholdTable};
use crate::error::{Error, Result};
use crate::filter::{self, PseudoLabel, RoundConfig, RoundReport, ThresholdPolicy};
use crate::records::{labeled_class_distribution, Catalogs, GroundTruthRecord, PredictionRecord};

/// Where the per-domain class distribution used by the thresholds comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateSource {
    /// Labeled prior rescaled by unlabeled/labeled predicted-box counts.
    CountRatio,
    /// The labeled prior itself, for every domain.
    LabeledPrior,
    /// Externally supplied distributions, one per unlabeled domain (for
    /// example a simulator's ground truth).
    Given(Vec<ClassDistribution>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub tau: f64,
    pub mu: f64,
    pub phase_count: usize,
    pub batch_size: usize,
    pub mode: ScheduleMode,
    pub cumulative: bool,
    pub policy: ThresholdPolicy,
    pub estimates: EstimateSource,
    /// Recompute count-ratio estimates from the active records at every
    /// phase boundary instead of once up front.
    pub reestimate_each_phase: bool,
    /// Accumulate only the most recent labels per domain.
    pub window: Option<usize>,
    /// Seed for the per-round processing order; `None` keeps input order.
    pub shuffle_seed: Option<u64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            tau: dmc::DEFAULT_TAU,
            mu: dmc::DEFAULT_MU,
            phase_count: dec::DEFAULT_PHASES,
            batch_size: filter::DEFAULT_BATCH_SIZE,
            mode: ScheduleMode::Domain,
            cumulative: true,
            policy: ThresholdPolicy::Dynamic,
            estimates: EstimateSource::CountRatio,
            reestimate_each_phase: false,
            window: None,
            shuffle_seed: None,
        }
    }
}

impl PipelineConfig {
    pub fn round_config(&self) -> RoundConfig {
        RoundConfig {
            tau: self.tau,
            mu: self.mu,
            batch_size: self.batch_size,
            policy: self.policy,
            cumulative: self.cumulative,
            shuffle_seed: self.shuffle_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        dmc::check_tau_mu(self.tau, self.mu)?;
        if self.phase_count == 0 {
            return Err(Error::Config("phase count must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.window == Some(0) {
            return Err(Error::Config("window size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    /// Stats for every catalog domain, in catalog order.
    pub stats: Vec<DomainStats>,
    pub prior: ClassDistribution,
    /// Estimates in force at the end of the run, one per unlabeled domain.
    pub estimates: Vec<ClassDistribution>,
    pub schedule: CurriculumSchedule,
    pub labels: Vec<PseudoLabel>,
    pub reports: Vec<RoundReport>,
    pub accumulator: PseudoLabelAccumulator,
    pub thresholds: ThresholdTable,
}

impl RunOutput {
    /// Unlabeled domain ids in accumulator order.
    pub fn domains(&self) -> &[String] {
        self.accumulator.domains()
    }
}

fn count_ratio_estimates(
    prior: &ClassDistribution,
    labeled: &DomainStats,
    unlabeled: &[&DomainStats],
) -> Result<Vec<ClassDistribution>> {
    unlabeled
        .iter()
        .map(|s| {
            dmc::estimate_class_distribution(
                prior,
                &labeled.per_class_box_counts,
                &s.per_class_box_counts,
            )
        })
        .collect()
}

/// Argmax box counts over the records whose unit is in `active`.
fn active_counts(
    records: &[PredictionRecord],
    schedule: &CurriculumSchedule,
    active: &std::collections::BTreeSet<&str>,
    domain: &str,
    classes: usize,
) -> Vec<u64> {
    let mut counts = vec![0u64; classes];
    for r in records
        .iter()
        .filter(|r| r.domain_id == domain && active.contains(schedule.unit_of(r)))
    {
        for b in &r.boxes {
            counts[b.top().0] += 1;
        }
    }
    counts
}

/// Runs every phase of the curriculum over `records`.
///
/// `labeled_gt` supplies the labeled class prior; only records of the
/// catalog's labeled domain are used from it.
pub fn run(
    records: &[PredictionRecord],
    labeled_gt: &[GroundTruthRecord],
    catalogs: &Catalogs,
    cfg: &PipelineConfig,
) -> Result<RunOutput> {
    cfg.validate()?;
    let classes = catalogs.classes.len();
    let domains = &catalogs.domains;
    for r in records {
        r.validate(&catalogs.classes, domains)?;
    }
    let unlabeled_ids = domains.unlabeled();
    let labeled_id = domains.labeled();

    let stats = dec::domain_similarity(records, domains, classes)?;
    let labeled_only: Vec<GroundTruthRecord> = labeled_gt
        .iter()
        .filter(|r| r.domain_id == labeled_id)
        .cloned()
        .collect();
    let prior = labeled_class_distribution(&labeled_only, classes)?;
    let unlabeled_stats: Vec<&DomainStats> = stats
        .iter()
        .filter(|s| unlabeled_ids.contains(&s.domain_id))
        .collect();
    let labeled_stats = stats.iter().find(|s| s.domain_id == labeled_id);

    let mut estimates = match &cfg.estimates {
        EstimateSource::CountRatio => {
            let labeled = labeled_stats.ok_or_else(|| {
                Error::Config("count-ratio estimates need predictions on the labeled domain".into())
            })?;
            count_ratio_estimates(&prior, labeled, &unlabeled_stats)?
        }
        EstimateSource::LabeledPrior => vec![prior.clone(); unlabeled_ids.len()],
        EstimateSource::Given(given) => {
            if given.len() != unlabeled_ids.len() {
                return Err(Error::DimensionMismatch {
                    expected: unlabeled_ids.len(),
                    got: given.len(),
                });
            }
            given.clone()
        }
    };

    let schedule = match cfg.mode {
        ScheduleMode::Domain => {
            let owned: Vec<DomainStats> = unlabeled_stats.iter().map(|s| (*s).clone()).collect();
            dec::build_schedule(&owned, cfg.phase_count)?
        }
        ScheduleMode::Image => {
            let unlabeled: Vec<PredictionRecord> = records
                .iter()
                .filter(|r| r.domain_id != labeled_id || domains.labeled_is_external())
                .cloned()
                .collect();
            dec::build_schedule_imagewise(&unlabeled, cfg.phase_count)?
        }
    };

    let mut acc = PseudoLabelAccumulator::new(&unlabeled_ids, classes)?;
    if let Some(size) = cfg.window {
        acc = acc.with_window(size)?;
    }
    let round = cfg.round_config();
    let mut labels = Vec::new();
    let mut reports = Vec::with_capacity(schedule.phase_count());
    for phase in 1..=schedule.phase_count() {
        if cfg.reestimate_each_phase && phase > 1 && cfg.estimates == EstimateSource::CountRatio {
            let active = dec::active_set(&schedule, phase)?;
            let labeled = labeled_stats.expect("checked above");
            for (j, id) in unlabeled_ids.iter().enumerate() {
                let counts = active_counts(records, &schedule, &active, id, classes);
                // a domain with no active boxes keeps its previous estimate
                if let Ok(e) =
                    dmc::estimate_class_distribution(&prior, &labeled.per_class_box_counts, &counts)
                {
                    estimates[j] = e;
                }
            }
        }
        let out = filter::run_round(records, &schedule, phase, &mut acc, &estimates, &round)?;
        labels.extend(out.labels);
        reports.push(out.report);
    }
    let thresholds = match cfg.policy {
        ThresholdPolicy::Dynamic => dmc::thresholds(&acc, &estimates, cfg.tau, cfg.mu)?,
        ThresholdPolicy::Fixed => ThresholdTable::fixed(acc.domains(), classes, cfg.tau)?,
    };
    Ok(RunOutput {
        stats,
        prior,
        estimates,
        schedule,
        labels,
        reports,
        accumulator: acc,
        thresholds,
    })
}

/// Per-class ratio of pseudo-label share to estimated share for one domain.
/// `None` where the estimate is zero; empty when nothing was accepted.
pub fn distribution_ratios(
    acc: &PseudoLabelAccumulator,
    domain: usize,
    estimate: &ClassDistribution,
) -> Vec<Option<f64>> {
    let p = acc.distribution(domain);
    if p.is_empty() {
        return Vec::new();
    }
    p.probs()
        .iter()
        .zip(estimate.probs())
        .map(|(&got, &want)| (want > 0.0).then(|| got / want))
        .collect()
}

/// Largest `|ratio - 1|` over the classes of one domain.
pub fn max_ratio_deviation(
    acc: &PseudoLabelAccumulator,
    domain: usize,
    estimate: &ClassDistribution,
) -> f64 {
    distribution_ratios(acc, domain, estimate)
        .into_iter()
        .flatten()
        .map(|r| (r - 1.0).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::records::{ClassCatalog, DomainCatalog, GroundTruthObject, ScoredBox};

    fn catalogs() -> Catalogs {
        Catalogs {
            classes: ClassCatalog::new(["car", "ped"]).unwrap(),
            domains: DomainCatalog::new(["src", "easy", "hard"], "src").unwrap(),
        }
    }

    fn rec(image: &str, domain: &str, boxes: &[(usize, f64)]) -> PredictionRecord {
        PredictionRecord {
            image_id: image.into(),
            domain_id: domain.into(),
            boxes: boxes
                .iter()
                .map(|&(c, s)| {
                    let mut scores = vec![0.0; 2];
                    scores[c] = s;
                    ScoredBox {
                        bbox: [0.0, 0.0, 1.0, 1.0],
                        scores,
                    }
                })
                .collect(),
        }
    }

    fn gt() -> Vec<GroundTruthRecord> {
        vec![GroundTruthRecord {
            image_id: "g".into(),
            domain_id: "src".into(),
            objects: [0, 0, 0, 1]
                .iter()
                .map(|&class| GroundTruthObject {
                    class,
                    bbox: [0.0, 0.0, 1.0, 1.0],
                })
                .collect(),
        }]
    }

    fn records() -> Vec<PredictionRecord> {
        vec![
            rec("s1", "src", &[(0, 0.9), (0, 0.9), (0, 0.8), (1, 0.8)]),
            rec("e1", "easy", &[(0, 0.95), (1, 0.9)]),
            rec("e2", "easy", &[(0, 0.9)]),
            rec("h1", "hard", &[(0, 0.75)]),
            rec("h2", "hard", &[]),
        ]
    }

    #[test]
    fn phases_follow_similarity() {
        let cfg = PipelineConfig {
            phase_count: 2,
            ..PipelineConfig::default()
        };
        let out = run(&records(), &gt(), &catalogs(), &cfg).unwrap();
        assert_eq!(
            out.schedule.phases,
            vec![vec!["easy".to_string()], vec!["hard".to_string()]]
        );
        assert_eq!(out.reports.len(), 2);
        assert_eq!(out.reports[0].records_processed, 2);
        assert_eq!(out.reports[1].records_processed, 4);
        // prior (0.75, 0.25); easy counts (2, 1) vs labeled (3, 1): raw (0.5, 0.25)
        let e = &out.estimates[0];
        assert!((e[0] - 2.0 / 3.0).abs() < 1e-12, "{e:?}");
        let total: u64 = out.reports.iter().map(|r| r.accepted_total()).sum();
        assert_eq!(total as usize, out.labels.len());
        assert_eq!(out.accumulator.total(0) + out.accumulator.total(1), total);
    }

    #[test]
    fn labeled_prior_and_given_sources() {
        let mut cfg = PipelineConfig {
            phase_count: 1,
            estimates: EstimateSource::LabeledPrior,
            ..PipelineConfig::default()
        };
        let out = run(&records(), &gt(), &catalogs(), &cfg).unwrap();
        assert_eq!(out.estimates, vec![out.prior.clone(); 2]);

        cfg.estimates = EstimateSource::Given(vec![ClassDistribution::uniform(2).unwrap()]);
        assert!(run(&records(), &gt(), &catalogs(), &cfg).is_err());
    }

    #[test]
    fn count_ratio_needs_labeled_predictions() {
        let recs: Vec<_> = records()
            .into_iter()
            .filter(|r| r.domain_id != "src")
            .collect();
        let cat = Catalogs {
            classes: catalogs().classes,
            domains: DomainCatalog::with_external_labeled(["easy", "hard"], "src").unwrap(),
        };
        assert!(run(
            &recs,
            &gt(),
            &cat,
            &PipelineConfig {
                phase_count: 2,
                ..Default::default()
            }
        )
        .is_err());
        let cfg = PipelineConfig {
            phase_count: 2,
            estimates: EstimateSource::LabeledPrior,
            mode: ScheduleMode::Image,
            ..Default::default()
        };
        let out = run(&recs, &gt(), &cat, &cfg).unwrap();
        assert_eq!(out.schedule.phases.iter().flatten().count(), 4);
    }

    #[test]
    fn ratio_helpers() {
        let ids = vec!["d".to_string()];
        let mut acc = PseudoLabelAccumulator::new(&ids, 2).unwrap();
        let est = ClassDistribution::new(vec![0.5, 0.5]).unwrap();
        assert!(distribution_ratios(&acc, 0, &est).is_empty());
        assert_eq!(max_ratio_deviation(&acc, 0, &est), 0.0);
        acc.record(0, &[0, 0, 0, 1]).unwrap();
        assert_eq!(
            distribution_ratios(&acc, 0, &est),
            vec![Some(1.5), Some(0.5)]
        );
        assert_eq!(max_ratio_deviation(&acc, 0, &est), 0.5);
    }

    #[test]
    fn invalid_config() {
        for cfg in [
            PipelineConfig {
                tau: 1.0,
                ..Default::default()
            },
            PipelineConfig {
                mu: -1.0,
                ..Default::default()
            },
            PipelineConfig {
                batch_size: 0,
                ..Default::default()
            },
            PipelineConfig {
                phase_count: 0,
                ..Default::default()
            },
            PipelineConfig {
                window: Some(0),
                ..Default::default()
            },
        ] {
            assert!(run(&records(), &gt(), &catalogs(), &cfg).is_err());
        }
        // more phases than unlabeled domains
        let cfg = PipelineConfig {
            phase_count: 3,
            ..Default::default()
        };
        assert!(run(&records(), &gt(), &catalogs(), &cfg).is_err());
    }
}
