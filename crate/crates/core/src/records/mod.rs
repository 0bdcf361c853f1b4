//! Detector outputs and ground truth: the data model every other module
//! consumes, plus ingestion from line-delimited JSON and COCO-style files.

mod catalog;
pub mod coco;

use std::collections::HashSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

pub use catalog::{Catalogs, ClassCatalog, DomainCatalog};

use crate::distribution::ClassDistribution;
use crate::error::{Error, Result};
use crate::numeric::argmax;

/// Box geometry in pixels: `[x, y, w, h]`.
pub type BBox = [f64; 4];

/// One detected box with its per-class scores as emitted by the detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub scores: Vec<f64>,
}

impl ScoredBox {
    /// Predicted class (argmax, ties to the lowest index) and its score.
    pub fn top(&self) -> (usize, f64) {
        let c = argmax(&self.scores).unwrap_or(0);
        (c, self.scores.get(c).copied().unwrap_or(0.0))
    }

    pub fn max_score(&self) -> f64 {
        self.top().1
    }
}

/// One image's detector output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: String,
    pub domain_id: String,
    pub boxes: Vec<ScoredBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    pub class: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    pub image_id: String,
    pub domain_id: String,
    pub objects: Vec<GroundTruthObject>,
}

fn check_bbox(bbox: &BBox) -> std::result::Result<(), String> {
    if bbox.iter().any(|v| !v.is_finite()) {
        return Err(format!("bbox {bbox:?} has non-finite components"));
    }
    if bbox[2] <= 0.0 || bbox[3] <= 0.0 {
        return Err(format!("bbox {bbox:?} needs positive width and height"));
    }
    Ok(())
}

impl PredictionRecord {
    /// Checks the record against the catalogs.
    pub fn validate(&self, classes: &ClassCatalog, domains: &DomainCatalog) -> Result<()> {
        self.check(classes.len(), domains)
            .map_err(Error::validation)
    }

    fn check(&self, classes: usize, domains: &DomainCatalog) -> std::result::Result<(), String> {
        if self.image_id.is_empty() {
            return Err("empty image_id".into());
        }
        if !domains.contains(&self.domain_id) {
            return Err(format!("unknown domain `{}`", self.domain_id));
        }
        for (b, bx) in self.boxes.iter().enumerate() {
            check_bbox(&bx.bbox).map_err(|m| format!("box {b}: {m}"))?;
            if bx.scores.len() != classes {
                return Err(format!(
                    "box {b}: expected {classes} scores, got {}",
                    bx.scores.len()
                ));
            }
            if let Some(s) = bx
                .scores
                .iter()
                .find(|s| !s.is_finite() || **s < 0.0 || **s > 1.0)
            {
                return Err(format!("box {b}: score {s} outside [0, 1]"));
            }
        }
        Ok(())
    }

    /// The canonical single-line JSON form used by the prediction stream.
    pub fn to_canonical_line(&self) -> String {
        serde_json::to_string(self).expect("prediction records always serialize")
    }
}

impl GroundTruthRecord {
    pub fn validate(&self, classes: &ClassCatalog, domains: &DomainCatalog) -> Result<()> {
        if self.image_id.is_empty() {
            return Err(Error::validation("empty image_id"));
        }
        if !domains.contains(&self.domain_id) && domains.labeled() != self.domain_id {
            return Err(Error::validation(format!(
                "unknown domain `{}`",
                self.domain_id
            )));
        }
        for obj in &self.objects {
            if obj.class >= classes.len() {
                return Err(Error::validation(format!(
                    "image `{}`: class index {} outside [0, {})",
                    self.image_id,
                    obj.class,
                    classes.len()
                )));
            }
            check_bbox(&obj.bbox)
                .map_err(|m| Error::validation(format!("image `{}`: {m}", self.image_id)))?;
        }
        Ok(())
    }
}

/// Reads a line-delimited prediction stream, validating each record.
///
/// Blank lines are skipped; line numbers in errors are 1-based.
pub fn ingest_predictions<R: BufRead>(
    source: R,
    catalogs: &Catalogs,
) -> Result<Vec<PredictionRecord>> {
    let mut records = Vec::new();
    let mut seen: HashSet<(String, String)> = HashSet::new();
    for (i, line) in source.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PredictionRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        record
            .check(catalogs.classes.len(), &catalogs.domains)
            .map_err(|m| Error::at_line(line_no, m))?;
        if !seen.insert((record.image_id.clone(), record.domain_id.clone())) {
            return Err(Error::at_line(
                line_no,
                format!(
                    "duplicate image `{}` in domain `{}`",
                    record.image_id, record.domain_id
                ),
            ));
        }
        records.push(record);
    }
    Ok(records)
}

/// Writes records in canonical form, one per line.
pub fn write_predictions<W: Write>(mut sink: W, records: &[PredictionRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut sink, r)?;
        sink.write_all(b"\n")?;
    }
    Ok(())
}

/// Class frequencies over every object in `gt`.
pub fn labeled_class_distribution(
    gt: &[GroundTruthRecord],
    classes: usize,
) -> Result<ClassDistribution> {
    let mut counts = vec![0u64; classes];
    for record in gt {
        for obj in &record.objects {
            let slot = counts.get_mut(obj.class).ok_or(Error::OutOfRange {
                index: obj.class,
                limit: classes,
            })?;
            *slot += 1;
        }
    }
    ClassDistribution::from_counts(&counts)
}
