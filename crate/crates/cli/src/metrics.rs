//! Per-run summary numbers shared by `run` and `ablate`.

use std::collections::HashSet;
use std::io::Write;

use dualcurr::pipeline::{self, RunOutput};
use dualcurr::records::GroundTruthRecord;
use dualcurr::sim::{self, Detection};

/// IoU a pseudo-label needs with a same-class object to count as correct.
pub const MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub tau: f64,
    pub mu: f64,
    /// Labels emitted over all rounds, repeats included.
    pub pseudo_labels: u64,
    /// Distinct (image, box) labels.
    pub distinct_labels: u64,
    /// Labels per image processed in the final round.
    pub final_boxes_per_image: f64,
    /// Largest `|pseudo share / estimate - 1|` over domains and classes.
    pub max_ratio_deviation: f64,
    /// Mean over domains of each domain's largest deviation.
    pub mean_ratio_deviation: f64,
    /// Share of distinct labels matching an unlabeled-domain object; absent
    /// without ground truth for those domains.
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

pub const HEADER: &str = "tau,mu,pseudo_labels,distinct_labels,final_boxes_per_image,max_ratio_deviation,mean_ratio_deviation,precision,recall";

impl RunMetrics {
    pub fn compute(out: &RunOutput, tau: f64, mu: f64, gt: &[GroundTruthRecord]) -> Self {
        let domains = out.domains();
        let devs: Vec<f64> = (0..domains.len())
            .filter(|&j| out.accumulator.total(j) > 0)
            .map(|j| pipeline::max_ratio_deviation(&out.accumulator, j, &out.estimates[j]))
            .collect();
        let max_ratio_deviation = devs.iter().copied().fold(0.0, f64::max);
        let mean_ratio_deviation = if devs.is_empty() {
            0.0
        } else {
            devs.iter().sum::<f64>() / devs.len() as f64
        };

        let mut seen = HashSet::new();
        let distinct: Vec<Detection<'_>> = out
            .labels
            .iter()
            .filter(|l| {
                seen.insert((
                    l.image_id.as_str(),
                    l.domain_id.as_str(),
                    l.bbox.map(f64::to_bits),
                ))
            })
            .map(|l| Detection {
                image_id: &l.image_id,
                domain_id: &l.domain_id,
                bbox: l.bbox,
                class: l.class,
                score: l.score,
            })
            .collect();
        let distinct_labels = distinct.len() as u64;

        let target: HashSet<&str> = domains.iter().map(String::as_str).collect();
        let unlabeled_gt: Vec<GroundTruthRecord> = gt
            .iter()
            .filter(|r| target.contains(r.domain_id.as_str()))
            .cloned()
            .collect();
        let (precision, recall) = if unlabeled_gt.is_empty() {
            (None, None)
        } else {
            let mut tp = 0;
            let mut dets = 0;
            let mut objects = 0;
            for (_, m) in sim::match_detections(&unlabeled_gt, distinct, MATCH_IOU) {
                tp += m.true_positives;
                dets += m.detections;
                objects += m.objects;
            }
            (
                (dets > 0).then(|| tp as f64 / dets as f64),
                (objects > 0).then(|| tp as f64 / objects as f64),
            )
        };

        RunMetrics {
            tau,
            mu,
            pseudo_labels: out.labels.len() as u64,
            distinct_labels,
            final_boxes_per_image: out.reports.last().map_or(0.0, |r| r.boxes_per_image),
            max_ratio_deviation,
            mean_ratio_deviation,
            precision,
            recall,
        }
    }

    pub fn write_row<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            self.tau,
            self.mu,
            self.pseudo_labels,
            self.distinct_labels,
            self.final_boxes_per_image,
            self.max_ratio_deviation,
            self.mean_ratio_deviation,
            opt(self.precision),
            opt(self.recall)
        )
    }
}

/// Writes the header and one row per run.
pub fn write_metrics_csv<W: Write>(mut w: W, rows: &[RunMetrics]) -> std::io::Result<()> {
    writeln!(w, "{HEADER}")?;
    for r in rows {
        r.write_row(&mut w)?;
    }
    Ok(())
}
