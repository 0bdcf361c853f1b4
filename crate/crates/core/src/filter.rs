//! Pseudo-label selection: the closed loop that filters predictions from
//! the curriculum's active set against the current thresholds and feeds the
//! accepted labels back into the accumulator.

use std::collections::HashSet;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dec::{self, CurriculumSchedule};
use crate::dmc::{self, ClassDistribution, PseudoLabelAccumulator, ThresholdTable};
use crate::error::{Error, Result};
use crate::records::{BBox, PredictionRecord};

/// Records per threshold refresh unless configured otherwise.
pub const DEFAULT_BATCH_SIZE: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub image_id: String,
    pub domain_id: String,
    pub bbox: BBox,
    pub scores: Vec<f64>,
    pub class: usize,
    pub score: f64,
    pub threshold_used: f64,
}

/// Accepts each box whose top score strictly exceeds the threshold of its
/// argmax class in the record's domain.
pub fn select_pseudo_labels(
    record: &PredictionRecord,
    table: &ThresholdTable,
) -> Result<Vec<PseudoLabel>> {
    let j = table.domain_index(&record.domain_id).ok_or_else(|| {
        Error::validation(format!("domain `{}` has no thresholds", record.domain_id))
    })?;
    let mut out = Vec::new();
    select_into(record, table.row(j), &mut out)?;
    Ok(out)
}

fn select_into(record: &PredictionRecord, row: &[f64], out: &mut Vec<PseudoLabel>) -> Result<()> {
    for b in &record.boxes {
        if b.scores.len() != row.len() {
            return Err(Error::DimensionMismatch {
                expected: row.len(),
                got: b.scores.len(),
            });
        }
        let (class, score) = b.top();
        let threshold = row[class];
        if score > threshold {
            out.push(PseudoLabel {
                image_id: record.image_id.clone(),
                domain_id: record.domain_id.clone(),
                bbox: b.bbox,
                scores: b.scores.clone(),
                class,
                score,
                threshold_used: threshold,
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdPolicy {
    /// Per-class thresholds driven by the accumulator.
    Dynamic,
    /// `tau` everywhere; the accumulator is still updated.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundConfig {
    pub tau: f64,
    pub mu: f64,
    pub batch_size: usize,
    pub policy: ThresholdPolicy,
    /// Process the union of phases `1..=phase` rather than phase alone.
    pub cumulative: bool,
    /// Shuffle the active records before batching. `None` keeps input order.
    pub shuffle_seed: Option<u64>,
}

impl Default for RoundConfig {
    fn default() -> Self {
        RoundConfig {
            tau: dmc::DEFAULT_TAU,
            mu: dmc::DEFAULT_MU,
            batch_size: DEFAULT_BATCH_SIZE,
            policy: ThresholdPolicy::Dynamic,
            cumulative: true,
            shuffle_seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub phase: usize,
    pub records_processed: usize,
    pub boxes_seen: u64,
    /// Accepted labels per domain (accumulator order) and class.
    pub accepted: Vec<Vec<u64>>,
    /// Accepted labels per processed image.
    pub boxes_per_image: f64,
    /// Number of threshold snapshots taken this round; the last one's id.
    pub threshold_snapshot: u64,
}

impl RoundReport {
    pub fn accepted_total(&self) -> u64 {
        self.accepted.iter().flatten().sum()
    }
}

#[derive(Debug, Clone)]
pub struct RoundOutput {
    pub labels: Vec<PseudoLabel>,
    pub report: RoundReport,
    /// Thresholds in force after the last batch.
    pub final_table: ThresholdTable,
}

/// Deterministic processing order of `indices` for a round.
pub fn processing_order(mut indices: Vec<usize>, seed: Option<u64>, phase: usize) -> Vec<usize> {
    if let Some(seed) = seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(phase as u64);
        indices.shuffle(&mut rng);
    }
    indices
}

fn snapshot(
    acc: &PseudoLabelAccumulator,
    estimates: &[ClassDistribution],
    cfg: &RoundConfig,
) -> Result<ThresholdTable> {
    match cfg.policy {
        ThresholdPolicy::Dynamic => dmc::thresholds(acc, estimates, cfg.tau, cfg.mu),
        ThresholdPolicy::Fixed => ThresholdTable::fixed(acc.domains(), acc.classes(), cfg.tau),
    }
}

/// One pass over the records active at `phase`.
///
/// Thresholds are recomputed from the accumulator at the start of every
/// batch of `cfg.batch_size` records; the labels a batch accepts are
/// recorded into the accumulator when the batch ends.
pub fn run_round(
    records: &[PredictionRecord],
    schedule: &CurriculumSchedule,
    phase: usize,
    acc: &mut PseudoLabelAccumulator,
    estimates: &[ClassDistribution],
    cfg: &RoundConfig,
) -> Result<RoundOutput> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let active: HashSet<&str> = if cfg.cumulative {
        dec::active_set(schedule, phase)?.into_iter().collect()
    } else {
        schedule.phase_units(phase)?.into_iter().collect()
    };
    let eligible: Vec<usize> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| active.contains(schedule.unit_of(r)))
        .map(|(i, _)| i)
        .collect();
    let order = processing_order(eligible, cfg.shuffle_seed, phase);

    let k = acc.domains().len();
    let classes = acc.classes();
    let mut accepted = vec![vec![0u64; classes]; k];
    let mut labels = Vec::new();
    let mut boxes_seen = 0u64;
    let mut snapshots = 0u64;
    let mut batch_classes: Vec<Vec<usize>> = vec![Vec::new(); k];

    for batch in order.chunks(cfg.batch_size) {
        let table = snapshot(acc, estimates, cfg)?;
        snapshots += 1;
        for &i in batch {
            let record = &records[i];
            let j = acc.domain_index(&record.domain_id).ok_or_else(|| {
                Error::validation(format!("domain `{}` has no thresholds", record.domain_id))
            })?;
            boxes_seen += record.boxes.len() as u64;
            let start = labels.len();
            select_into(record, table.row(j), &mut labels)?;
            for l in &labels[start..] {
                batch_classes[j].push(l.class);
                accepted[j][l.class] += 1;
            }
        }
        for (j, cs) in batch_classes.iter_mut().enumerate() {
            acc.record(j, cs)?;
            cs.clear();
        }
    }

    let final_table = snapshot(acc, estimates, cfg)?;
    let records_processed = order.len();
    let boxes_per_image = if records_processed == 0 {
        0.0
    } else {
        labels.len() as f64 / records_processed as f64
    };
    Ok(RoundOutput {
        labels,
        report: RoundReport {
            phase,
            records_processed,
            boxes_seen,
            accepted,
            boxes_per_image,
            threshold_snapshot: snapshots,
        },
        final_table,
    })
}

#[derive(Serialize)]
struct LabelBox<'a> {
    bbox: &'a BBox,
    scores: &'a [f64],
    class: usize,
    threshold_used: f64,
}

#[derive(Serialize)]
struct LabelLine<'a> {
    image_id: &'a str,
    domain_id: &'a str,
    boxes: Vec<LabelBox<'a>>,
}

/// Writes labels as one line per image (consecutive labels of one image
/// share a line), mirroring the prediction stream layout.
pub fn write_pseudo_labels<W: Write>(mut w: W, labels: &[PseudoLabel]) -> Result<()> {
    let mut i = 0;
    while i < labels.len() {
        let head = &labels[i];
        let mut end = i + 1;
        while end < labels.len()
            && labels[end].image_id == head.image_id
            && labels[end].domain_id == head.domain_id
        {
            end += 1;
        }
        let line = LabelLine {
            image_id: &head.image_id,
            domain_id: &head.domain_id,
            boxes: labels[i..end]
                .iter()
                .map(|l| LabelBox {
                    bbox: &l.bbox,
                    scores: &l.scores,
                    class: l.class,
                    threshold_used: l.threshold_used,
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
        i = end;
    }
    Ok(())
}

#[derive(Deserialize)]
struct OwnedLabelBox {
    bbox: BBox,
    scores: Vec<f64>,
    class: usize,
    threshold_used: f64,
}

#[derive(Deserialize)]
struct OwnedLabelLine {
    image_id: String,
    domain_id: String,
    boxes: Vec<OwnedLabelBox>,
}

/// Parses a stream written by [`write_pseudo_labels`].
pub fn read_pseudo_labels<R: std::io::BufRead>(r: R) -> Result<Vec<PseudoLabel>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: OwnedLabelLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        for b in parsed.boxes {
            let score = b.scores.get(b.class).copied().ok_or(Error::OutOfRange {
                index: b.class,
                limit: b.scores.len(),
            })?;
            out.push(PseudoLabel {
                image_id: parsed.image_id.clone(),
                domain_id: parsed.domain_id.clone(),
                bbox: b.bbox,
                scores: b.scores,
                class: b.class,
                score,
                threshold_used: b.threshold_used,
            });
        }
    }
    Ok(out)
}

/// Appends round reports as CSV rows. Writes the header when `header` is set.
pub fn write_round_reports<W: Write>(
    mut w: W,
    reports: &[RoundReport],
    domains: &[String],
    class_names: &[String],
    header: bool,
) -> Result<()> {
    if header {
        write!(
            w,
            "phase,records_processed,boxes_seen,accepted,boxes_per_image,threshold_snapshot"
        )?;
        for d in domains {
            for c in class_names {
                write!(w, ",accepted:{d}:{c}")?;
            }
        }
        writeln!(w)?;
    }
    for r in reports {
        write!(
            w,
            "{},{},{},{},{},{}",
            r.phase,
            r.records_processed,
            r.boxes_seen,
            r.accepted_total(),
            r.boxes_per_image,
            r.threshold_snapshot
        )?;
        for n in r.accepted.iter().flatten() {
            write!(w, ",{n}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}
