//! Domain-evolving curriculum: similarity scores per image and per domain,
//! and the phased schedule that introduces easy (similar) data first.

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::order_free_mean;
use crate::records::{DomainCatalog, PredictionRecord};

/// Phase count used when none is configured.
pub const DEFAULT_PHASES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainStats {
    pub domain_id: String,
    pub image_count: usize,
    pub similarity: f64,
    /// Boxes per argmax class, over all boxes regardless of score.
    pub per_class_box_counts: Vec<u64>,
}

/// Mean over boxes of the max class score; an image without boxes scores 0.
pub fn image_score(record: &PredictionRecord) -> f64 {
    let mut maxes: Vec<f64> = record.boxes.iter().map(|b| b.max_score()).collect();
    order_free_mean(&mut maxes).unwrap_or(0.0)
}

/// Per-domain similarity, image counts and argmax box counts, one entry per
/// catalog domain in catalog order.
pub fn domain_similarity(
    records: &[PredictionRecord],
    domains: &DomainCatalog,
    classes: usize,
) -> Result<Vec<DomainStats>> {
    let slot: HashMap<&str, usize> = domains
        .ids()
        .iter()
        .enumerate()
        .map(|(i, d)| (d.as_str(), i))
        .collect();
    let mut scores: Vec<Vec<f64>> = vec![Vec::new(); slot.len()];
    let mut counts = vec![vec![0u64; classes]; slot.len()];
    for r in records {
        let &j = slot
            .get(r.domain_id.as_str())
            .ok_or_else(|| Error::validation(format!("unknown domain `{}`", r.domain_id)))?;
        scores[j].push(image_score(r));
        for b in &r.boxes {
            let (c, _) = b.top();
            *counts[j].get_mut(c).ok_or(Error::DimensionMismatch {
                expected: classes,
                got: b.scores.len(),
            })? += 1;
        }
    }
    domains
        .ids()
        .iter()
        .zip(scores)
        .zip(counts)
        .map(|((id, mut s), per_class_box_counts)| {
            let image_count = s.len();
            let similarity =
                order_free_mean(&mut s).ok_or_else(|| Error::EmptyDomain(id.clone()))?;
            Ok(DomainStats {
                domain_id: id.clone(),
                image_count,
                similarity,
                per_class_box_counts,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleMode {
    /// Units are whole domains.
    Domain,
    /// Units are individual images; used when domain labels are absent.
    Image,
}

impl std::str::FromStr for ScheduleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "domain" => Ok(ScheduleMode::Domain),
            "image" => Ok(ScheduleMode::Image),
            other => Err(Error::Config(format!("unknown schedule mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for ScheduleMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScheduleMode::Domain => "domain",
            ScheduleMode::Image => "image",
        })
    }
}

/// Disjoint phases of unit ids, most similar first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    pub mode: ScheduleMode,
    pub phases: Vec<Vec<String>>,
}

/// Splits `n` items into `parts` contiguous sizes; earlier parts take the
/// remainder.
fn split_sizes(n: usize, parts: usize) -> impl Iterator<Item = usize> {
    let base = n / parts;
    let rem = n % parts;
    (0..parts).map(move |p| base + usize::from(p < rem))
}

fn partition(units: Vec<String>, parts: usize) -> Vec<Vec<String>> {
    let mut it = units.into_iter();
    split_sizes(it.len(), parts)
        .map(|size| it.by_ref().take(size).collect())
        .collect()
}

/// Orders domains by similarity (descending, ties by id) into `phase_count`
/// groups.
pub fn build_schedule(stats: &[DomainStats], phase_count: usize) -> Result<CurriculumSchedule> {
    if phase_count < 1 || phase_count > stats.len() {
        return Err(Error::Config(format!(
            "phase count {phase_count} must be within [1, {}]",
            stats.len()
        )));
    }
    let mut ranked: Vec<&DomainStats> = stats.iter().collect();
    ranked.sort_by(|a, b| {
        b.similarity
            .total_cmp(&a.similarity)
            .then_with(|| a.domain_id.cmp(&b.domain_id))
    });
    let units = ranked.into_iter().map(|s| s.domain_id.clone()).collect();
    Ok(CurriculumSchedule {
        mode: ScheduleMode::Domain,
        phases: partition(units, phase_count),
    })
}

/// Orders individual images by [`image_score`] (descending, ties by image
/// id) into `phase_count` groups. Image ids must be unique.
pub fn build_schedule_imagewise(
    records: &[PredictionRecord],
    phase_count: usize,
) -> Result<CurriculumSchedule> {
    if phase_count < 1 || phase_count > records.len() {
        return Err(Error::Config(format!(
            "phase count {phase_count} must be within [1, {}] (one image per phase at least)",
            records.len()
        )));
    }
    let mut scored: Vec<(f64, &str)> = records
        .iter()
        .map(|r| (image_score(r), r.image_id.as_str()))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    let mut ids = BTreeSet::new();
    for (_, id) in &scored {
        if !ids.insert(*id) {
            return Err(Error::validation(format!("duplicate image id `{id}`")));
        }
    }
    let units = scored.into_iter().map(|(_, id)| id.to_owned()).collect();
    Ok(CurriculumSchedule {
        mode: ScheduleMode::Image,
        phases: partition(units, phase_count),
    })
}

impl CurriculumSchedule {
    pub fn phase_count(&self) -> usize {
        self.phases.len()
    }

    fn check_phase(&self, phase: usize) -> Result<()> {
        if phase < 1 || phase > self.phases.len() {
            return Err(Error::OutOfRange {
                index: phase,
                limit: self.phases.len(),
            });
        }
        Ok(())
    }

    /// Units of phase `phase` alone (1-based).
    pub fn phase_units(&self, phase: usize) -> Result<BTreeSet<&str>> {
        self.check_phase(phase)?;
        Ok(self.phases[phase - 1].iter().map(String::as_str).collect())
    }

    /// The unit of `record` under this schedule's mode.
    pub fn unit_of<'r>(&self, record: &'r PredictionRecord) -> &'r str {
        match self.mode {
            ScheduleMode::Domain => &record.domain_id,
            ScheduleMode::Image => &record.image_id,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schedules always serialize")
    }

    pub fn from_reader<R: Read>(r: R) -> Result<Self> {
        let s: CurriculumSchedule = serde_json::from_reader(r)?;
        let mut seen = BTreeSet::new();
        for unit in s.phases.iter().flatten() {
            if !seen.insert(unit.as_str()) {
                return Err(Error::validation(format!(
                    "unit `{unit}` appears in two phases"
                )));
            }
        }
        Ok(s)
    }
}

/// Union of phases `1..=phase`.
pub fn active_set(schedule: &CurriculumSchedule, phase: usize) -> Result<BTreeSet<&str>> {
    schedule.check_phase(phase)?;
    Ok(schedule.phases[..phase]
        .iter()
        .flatten()
        .map(String::as_str)
        .collect())
}

/// Writes the stats CSV: `domain_id,N,S,N_<class>...`.
pub fn write_stats_csv<W: Write>(
    mut w: W,
    stats: &[DomainStats],
    class_names: &[String],
) -> Result<()> {
    write!(w, "domain_id,N,S")?;
    for name in class_names {
        write!(w, ",N_{name}")?;
    }
    writeln!(w)?;
    for s in stats {
        write!(w, "{},{},{}", s.domain_id, s.image_count, s.similarity)?;
        for n in &s.per_class_box_counts {
            write!(w, ",{n}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Reads back what [`write_stats_csv`] produced.
pub fn read_stats_csv<R: Read>(mut r: R) -> Result<Vec<DomainStats>> {
    let mut text = String::new();
    r.read_to_string(&mut text)?;
    let mut lines = text.lines().enumerate();
    let header = match lines.next() {
        Some((_, h)) => h,
        None => return Ok(Vec::new()),
    };
    let columns = header.split(',').count();
    if columns < 3 || !header.starts_with("domain_id,N,S") {
        return Err(Error::Parse {
            line: 1,
            message: "expected header `domain_id,N,S,...`".into(),
        });
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Parse {
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns {
            return Err(bad(format!(
                "expected {columns} fields, got {}",
                fields.len()
            )));
        }
        let image_count = fields[1].parse().map_err(|e| bad(format!("N: {e}")))?;
        let similarity: f64 = fields[2].parse().map_err(|e| bad(format!("S: {e}")))?;
        if !(0.0..=1.0).contains(&similarity) {
            return Err(bad(format!("S = {similarity} outside [0, 1]")));
        }
        let per_class_box_counts = fields[3..]
            .iter()
            .map(|f| f.parse::<u64>().map_err(|e| bad(format!("count: {e}"))))
            .collect::<Result<_>>()?;
        out.push(DomainStats {
            domain_id: fields[0].to_owned(),
            image_count,
            similarity,
            per_class_box_counts,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::records::ScoredBox;

    fn rec(image: &str, domain: &str, maxes: &[f64]) -> PredictionRecord {
        PredictionRecord {
            image_id: image.into(),
            domain_id: domain.into(),
            boxes: maxes
                .iter()
                .map(|&m| ScoredBox {
                    bbox: [0.0, 0.0, 1.0, 1.0],
                    scores: vec![m, m / 2.0],
                })
                .collect(),
        }
    }

    fn stats(pairs: &[(&str, f64)]) -> Vec<DomainStats> {
        pairs
            .iter()
            .map(|&(d, s)| DomainStats {
                domain_id: d.into(),
                image_count: 1,
                similarity: s,
                per_class_box_counts: vec![],
            })
            .collect()
    }

    fn phases(s: &CurriculumSchedule) -> Vec<Vec<&str>> {
        s.phases
            .iter()
            .map(|p| p.iter().map(String::as_str).collect())
            .collect()
    }

    #[test]
    fn image_score_examples() {
        assert!((image_score(&rec("a", "d", &[0.9, 0.7])) - 0.8).abs() < 1e-12);
        assert_eq!(image_score(&rec("a", "d", &[0.42])), 0.42);
        assert_eq!(image_score(&rec("a", "d", &[])), 0.0);
    }

    #[test]
    fn similarity_examples() {
        let cat = DomainCatalog::new(["src", "x", "y"], "src").unwrap();
        let records = vec![
            rec("s", "src", &[0.5]),
            rec("a", "x", &[0.8]),
            rec("b", "x", &[0.9, 0.7]),
            rec("c", "y", &[1.0]),
            rec("d", "y", &[]),
        ];
        let s = domain_similarity(&records, &cat, 2).unwrap();
        assert_eq!(s.len(), 3);
        assert!((s[1].similarity - 0.8).abs() < 1e-12);
        assert_eq!(s[1].image_count, 2);
        assert_eq!(s[1].per_class_box_counts, vec![3, 0]);
        assert_eq!(s[2].similarity, 0.5);
    }

    #[test]
    fn similarity_empty_domain_named() {
        let cat = DomainCatalog::new(["src", "x", "fog"], "src").unwrap();
        let records = vec![rec("s", "src", &[0.5]), rec("a", "x", &[0.8])];
        let err = domain_similarity(&records, &cat, 2).unwrap_err();
        assert!(matches!(&err, Error::EmptyDomain(d) if d == "fog"));
    }

    #[test]
    fn argmax_tie_counts_lowest_class() {
        let cat = DomainCatalog::new(["src", "x"], "src").unwrap();
        let mut r = rec("a", "x", &[]);
        r.boxes.push(ScoredBox {
            bbox: [0.0, 0.0, 1.0, 1.0],
            scores: vec![0.4, 0.4],
        });
        let s = domain_similarity(&[rec("s", "src", &[0.1]), r], &cat, 2).unwrap();
        assert_eq!(s[1].per_class_box_counts, vec![1, 0]);
    }

    #[test]
    fn schedule_examples() {
        let st = stats(&[("A", 0.9), ("B", 0.5), ("C", 0.7)]);
        assert_eq!(
            phases(&build_schedule(&st, 3).unwrap()),
            vec![vec!["A"], vec!["C"], vec!["B"]]
        );
        assert_eq!(
            phases(&build_schedule(&st, 1).unwrap()),
            vec![vec!["A", "C", "B"]]
        );
        let tie = stats(&[("B", 0.6), ("A", 0.6)]);
        assert_eq!(
            phases(&build_schedule(&tie, 2).unwrap()),
            vec![vec!["A"], vec!["B"]]
        );
        assert!(build_schedule(&st, 0).is_err());
        assert!(build_schedule(&st, 4).is_err());
    }

    #[test]
    fn schedule_remainder_goes_first() {
        let st = stats(&[("a", 0.9), ("b", 0.8), ("c", 0.7), ("d", 0.6), ("e", 0.5)]);
        let s = build_schedule(&st, 3).unwrap();
        assert_eq!(phases(&s), vec![vec!["a", "b"], vec!["c", "d"], vec!["e"]]);
    }

    #[test]
    fn imagewise_examples() {
        let records = vec![
            rec("i3", "d", &[0.3]),
            rec("i9", "d", &[0.9]),
            rec("i2", "d", &[0.2]),
            rec("i8", "d", &[0.8]),
        ];
        let s = build_schedule_imagewise(&records, 2).unwrap();
        assert_eq!(phases(&s), vec![vec!["i9", "i8"], vec!["i3", "i2"]]);
        let one = build_schedule_imagewise(&records[..1], 1).unwrap();
        assert_eq!(phases(&one), vec![vec!["i3"]]);
        assert!(build_schedule_imagewise(&records[..1], 2).is_err());
        let dup = vec![rec("x", "d", &[0.3]), rec("x", "e", &[0.3])];
        assert!(build_schedule_imagewise(&dup, 1).is_err());
    }

    #[test]
    fn active_set_examples() {
        let st = stats(&[("A", 0.9), ("B", 0.5), ("C", 0.7)]);
        let s = build_schedule(&st, 3).unwrap();
        assert_eq!(active_set(&s, 1).unwrap(), BTreeSet::from(["A"]));
        assert_eq!(active_set(&s, 2).unwrap(), BTreeSet::from(["A", "C"]));
        assert_eq!(active_set(&s, 3).unwrap(), BTreeSet::from(["A", "B", "C"]));
        assert!(active_set(&s, 0).is_err());
        assert!(active_set(&s, 4).is_err());
        assert_eq!(s.phase_units(2).unwrap(), BTreeSet::from(["C"]));
    }

    #[test]
    fn stats_csv_round_trip() {
        let st = vec![DomainStats {
            domain_id: "fog".into(),
            image_count: 3,
            similarity: 0.1 + 0.2,
            per_class_box_counts: vec![4, 0],
        }];
        let mut buf = Vec::new();
        write_stats_csv(&mut buf, &st, &["car".into(), "ped".into()]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("domain_id,N,S,N_car,N_ped\n"));
        assert_eq!(read_stats_csv(buf.as_slice()).unwrap(), st);
    }

    #[test]
    fn schedule_json_rejects_overlap() {
        let text = r#"{"mode":"domain","phases":[["a"],["a"]]}"#;
        assert!(CurriculumSchedule::from_reader(text.as_bytes()).is_err());
    }
}
