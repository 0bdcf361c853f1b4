//! Synthetic multi-domain detection world.
//!
//! Each domain has a shift level `delta` in `[0, 1]` and its own class
//! distribution. A parametric detector sees objects with recall
//! `r0 * (1 - lambda * delta)`, assigns classes through a confusion matrix
//! that is the same in every domain, and emits scores from per-class Beta
//! laws pushed down by `delta`. Because the bias is domain-independent,
//! count-ratio estimation can recover each domain's class distribution,
//! and the world's ground truth is available to check it.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Gamma, Poisson};
use serde::{Deserialize, Serialize};

use crate::dec;
use crate::distribution::ClassDistribution;
use crate::dmc;
use crate::error::{Error, Result};
use crate::records::{
    labeled_class_distribution, BBox, Catalogs, ClassCatalog, DomainCatalog, GroundTruthObject,
    GroundTruthRecord, PredictionRecord, ScoredBox,
};

const DEFAULT_CANVAS: [f64; 2] = [1280.0, 720.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub id: String,
    /// 0 means identical to the labeled domain.
    pub shift: f64,
    pub class_distribution: Vec<f64>,
    pub images: usize,
    pub objects_mean: f64,
    /// Variance-to-mean ratio of the object count; 1 is Poisson.
    #[serde(default = "one")]
    pub objects_dispersion: f64,
}

fn one() -> f64 {
    1.0
}

impl DomainSpec {
    fn validate(&self, classes: Option<usize>) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("domain `{}`: {m}", self.id)));
        if self.id.is_empty() {
            return Err(Error::Config("domain id must be non-empty".into()));
        }
        if !(0.0..=1.0).contains(&self.shift) {
            return bad(format!("shift {} outside [0, 1]", self.shift));
        }
        if self.images == 0 {
            return bad("needs at least one image".into());
        }
        if !(self.objects_mean >= 0.0 && self.objects_mean.is_finite()) {
            return bad(format!(
                "objects_mean {} must be finite and >= 0",
                self.objects_mean
            ));
        }
        if !(self.objects_dispersion >= 1.0 && self.objects_dispersion.is_finite()) {
            return bad(format!(
                "objects_dispersion {} must be >= 1",
                self.objects_dispersion
            ));
        }
        if let Some(c) = classes {
            if self.class_distribution.len() != c {
                return bad(format!(
                    "class_distribution has {} entries, expected {c}",
                    self.class_distribution.len()
                ));
            }
        }
        ClassDistribution::new(self.class_distribution.clone())
            .map_err(|e| Error::Config(format!("domain `{}`: {e}", self.id)))?;
        Ok(())
    }
}

/// Two-parameter Beta law on `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaLaw {
    pub alpha: f64,
    pub beta: f64,
}

impl BetaLaw {
    pub fn new(alpha: f64, beta: f64) -> Self {
        BetaLaw { alpha, beta }
    }

    fn sampler(&self) -> Result<Beta<f64>> {
        Beta::new(self.alpha, self.beta)
            .map_err(|e| Error::Config(format!("beta law ({}, {}): {e}", self.alpha, self.beta)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorSkill {
    pub base_recall: f64,
    pub shift_sensitivity: f64,
    /// Max-score law of detected objects, indexed by true class.
    pub tp_score: Vec<BetaLaw>,
    pub fp_score: BetaLaw,
    /// Amount subtracted from a detected object's score per unit of shift.
    #[serde(default)]
    pub score_shift: f64,
    /// Row `t` is the distribution of the predicted class for true class `t`.
    pub confusion: Vec<Vec<f64>>,
    /// Mean spurious boxes per image.
    pub fp_rate: f64,
    /// Class weights of spurious boxes; uniform when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fp_class_weights: Option<Vec<f64>>,
    /// Box corner jitter as a fraction of object size, at zero shift.
    #[serde(default = "default_jitter")]
    pub localization_jitter: f64,
    /// Extra jitter per unit of shift.
    #[serde(default)]
    pub jitter_shift: f64,
}

fn default_jitter() -> f64 {
    0.05
}

impl DetectorSkill {
    /// A detector that finds everything, never confuses classes and emits
    /// no spurious boxes.
    pub fn perfect(classes: usize) -> Self {
        DetectorSkill {
            base_recall: 1.0,
            shift_sensitivity: 0.0,
            tp_score: vec![BetaLaw::new(20.0, 1.0); classes],
            fp_score: BetaLaw::new(1.0, 10.0),
            score_shift: 0.0,
            confusion: (0..classes)
                .map(|t| (0..classes).map(|p| f64::from(u8::from(t == p))).collect())
                .collect(),
            fp_rate: 0.0,
            fp_class_weights: None,
            localization_jitter: 0.0,
            jitter_shift: 0.0,
        }
    }

    /// Per-object detection probability at shift `delta`.
    pub fn recall(&self, delta: f64) -> f64 {
        (self.base_recall * (1.0 - self.shift_sensitivity * delta)).clamp(0.0, 1.0)
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("detector: {m}")));
        if !(self.base_recall >= 0.0 && self.base_recall <= 1.0) {
            return bad(format!("base_recall {} outside [0, 1]", self.base_recall));
        }
        for (name, v) in [
            ("shift_sensitivity", self.shift_sensitivity),
            ("score_shift", self.score_shift),
            ("fp_rate", self.fp_rate),
            ("localization_jitter", self.localization_jitter),
            ("jitter_shift", self.jitter_shift),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be finite and >= 0"));
            }
        }
        if self.tp_score.len() != classes {
            return bad(format!(
                "tp_score has {} laws, expected {classes}",
                self.tp_score.len()
            ));
        }
        for law in self.tp_score.iter().chain([&self.fp_score]) {
            law.sampler()?;
        }
        if self.confusion.len() != classes {
            return bad(format!(
                "confusion has {} rows, expected {classes}",
                self.confusion.len()
            ));
        }
        for (t, row) in self.confusion.iter().enumerate() {
            if row.len() != classes {
                return bad(format!("confusion row {t} has {} entries", row.len()));
            }
            ClassDistribution::new(row.clone())
                .map_err(|e| Error::Config(format!("detector: confusion row {t}: {e}")))?;
        }
        if let Some(w) = &self.fp_class_weights {
            if w.len() != classes {
                return bad(format!("fp_class_weights has {} entries", w.len()));
            }
            ClassDistribution::from_weights(w)?;
        }
        Ok(())
    }
}

/// Generated ground truth with the specs that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub specs: Vec<DomainSpec>,
    pub canvas: [f64; 2],
    pub seed: u64,
    pub ground_truth: Vec<GroundTruthRecord>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent random stream for one (seed, domain, image, purpose) cell.
fn cell_rng(seed: u64, domain: usize, image: usize, purpose: u64) -> ChaCha8Rng {
    let mut key = splitmix(seed);
    key = splitmix(key ^ domain as u64);
    key = splitmix(key ^ image as u64);
    key = splitmix(key ^ purpose);
    ChaCha8Rng::seed_from_u64(key)
}

const GT_STREAM: u64 = 0x47_54;
const DET_STREAM: u64 = 0x44_45_54;

/// Image id of image `index` in `domain`.
pub fn image_id(domain: &str, index: usize) -> String {
    format!("{domain}_{index:06}")
}

fn object_count(rng: &mut ChaCha8Rng, mean: f64, dispersion: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    let rate = if dispersion > 1.0 {
        let shape = mean / (dispersion - 1.0);
        Gamma::new(shape, dispersion - 1.0)
            .expect("validated parameters")
            .sample(rng)
    } else {
        mean
    };
    if rate <= 0.0 {
        return 0;
    }
    Poisson::new(rate).expect("positive rate").sample(rng) as usize
}

fn random_box(rng: &mut ChaCha8Rng, canvas: [f64; 2]) -> BBox {
    let w = canvas[0] * rng.random_range(0.04..0.2);
    let h = canvas[1] * rng.random_range(0.04..0.2);
    let x = rng.random_range(0.0..canvas[0] - w);
    let y = rng.random_range(0.0..canvas[1] - h);
    [x, y, w, h]
}

pub fn generate_world(specs: &[DomainSpec], seed: u64) -> Result<SyntheticWorld> {
    generate_world_on(specs, seed, DEFAULT_CANVAS)
}

pub fn generate_world_on(
    specs: &[DomainSpec],
    seed: u64,
    canvas: [f64; 2],
) -> Result<SyntheticWorld> {
    let first = specs
        .first()
        .ok_or_else(|| Error::Config("world needs at least one domain".into()))?;
    let classes = first.class_distribution.len();
    for (i, s) in specs.iter().enumerate() {
        s.validate(Some(classes))?;
        if specs[..i].iter().any(|o| o.id == s.id) {
            return Err(Error::Config(format!("duplicate domain `{}`", s.id)));
        }
    }
    let mut ground_truth = Vec::new();
    for (d, spec) in specs.iter().enumerate() {
        let classes_law = WeightedIndex::new(&spec.class_distribution)
            .map_err(|e| Error::Config(e.to_string()))?;
        for i in 0..spec.images {
            let mut rng = cell_rng(seed, d, i, GT_STREAM);
            let n = object_count(&mut rng, spec.objects_mean, spec.objects_dispersion);
            let objects = (0..n)
                .map(|_| GroundTruthObject {
                    class: classes_law.sample(&mut rng),
                    bbox: random_box(&mut rng, canvas),
                })
                .collect();
            ground_truth.push(GroundTruthRecord {
                image_id: image_id(&spec.id, i),
                domain_id: spec.id.clone(),
                objects,
            });
        }
    }
    Ok(SyntheticWorld {
        specs: specs.to_vec(),
        canvas,
        seed,
        ground_truth,
    })
}

/// Spreads `1 - top` (at most `top`) over the other classes so `class`
/// stays the strict argmax whenever `top > 0`.
fn score_vector(rng: &mut ChaCha8Rng, classes: usize, class: usize, top: f64) -> Vec<f64> {
    let budget = top.min(1.0 - top) / (classes.max(2) - 1) as f64;
    (0..classes)
        .map(|c| {
            if c == class {
                top
            } else {
                budget * rng.random::<f64>()
            }
        })
        .collect()
}

fn jittered(rng: &mut ChaCha8Rng, b: &BBox, amount: f64, canvas: [f64; 2]) -> BBox {
    if amount == 0.0 {
        return *b;
    }
    let mut j = |scale: f64| scale * amount * rng.random_range(-1.0..1.0);
    let x0 = b[0] + j(b[2]);
    let y0 = b[1] + j(b[3]);
    let x1 = b[0] + b[2] + j(b[2]);
    let y1 = b[1] + b[3] + j(b[3]);
    let (x0, x1) = (x0.clamp(0.0, canvas[0]), x1.clamp(0.0, canvas[0]));
    let (y0, y1) = (y0.clamp(0.0, canvas[1]), y1.clamp(0.0, canvas[1]));
    [x0, y0, (x1 - x0).max(1.0), (y1 - y0).max(1.0)]
}

/// Runs the parametric detector over every image of the world, in world
/// order.
pub fn simulate_detector(
    world: &SyntheticWorld,
    skill: &DetectorSkill,
    seed: u64,
) -> Result<Vec<PredictionRecord>> {
    let classes = world.specs[0].class_distribution.len();
    skill.validate(classes)?;
    let tp_laws: Vec<Beta<f64>> = skill
        .tp_score
        .iter()
        .map(|l| l.sampler())
        .collect::<Result<_>>()?;
    let fp_law = skill.fp_score.sampler()?;
    let confusion: Vec<WeightedIndex<f64>> = skill
        .confusion
        .iter()
        .map(|row| WeightedIndex::new(row).map_err(|e| Error::Config(e.to_string())))
        .collect::<Result<_>>()?;
    let fp_class = WeightedIndex::new(
        skill
            .fp_class_weights
            .clone()
            .unwrap_or_else(|| vec![1.0; classes]),
    )
    .map_err(|e| Error::Config(e.to_string()))?;
    let fp_count = if skill.fp_rate > 0.0 {
        Some(Poisson::new(skill.fp_rate).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };

    let slot: HashMap<&str, usize> = world
        .specs
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id.as_str(), i))
        .collect();
    let mut index_in_domain = vec![0usize; world.specs.len()];
    let mut out = Vec::with_capacity(world.ground_truth.len());
    for gt in &world.ground_truth {
        let d = slot[gt.domain_id.as_str()];
        let i = index_in_domain[d];
        index_in_domain[d] += 1;
        let delta = world.specs[d].shift;
        let recall = skill.recall(delta);
        let jitter = skill.localization_jitter + skill.jitter_shift * delta;
        let mut rng = cell_rng(seed, d, i, DET_STREAM);
        let mut boxes = Vec::new();
        for obj in &gt.objects {
            if rng.random::<f64>() >= recall {
                continue;
            }
            let class = confusion[obj.class].sample(&mut rng);
            let top =
                (tp_laws[obj.class].sample(&mut rng) - skill.score_shift * delta).clamp(0.0, 1.0);
            boxes.push(ScoredBox {
                bbox: jittered(&mut rng, &obj.bbox, jitter, world.canvas),
                scores: score_vector(&mut rng, classes, class, top),
            });
        }
        let spurious = fp_count.as_ref().map_or(0, |p| p.sample(&mut rng) as usize);
        for _ in 0..spurious {
            let class = fp_class.sample(&mut rng);
            let top = fp_law.sample(&mut rng);
            let bbox = random_box(&mut rng, world.canvas);
            boxes.push(ScoredBox {
                bbox,
                scores: score_vector(&mut rng, classes, class, top),
            });
        }
        out.push(PredictionRecord {
            image_id: gt.image_id.clone(),
            domain_id: gt.domain_id.clone(),
            boxes,
        });
    }
    Ok(out)
}

/// Exact class frequencies of a domain's ground truth.
pub fn oracle_class_distribution(
    world: &SyntheticWorld,
    domain: &str,
) -> Result<ClassDistribution> {
    let spec = world
        .specs
        .iter()
        .find(|s| s.id == domain)
        .ok_or_else(|| Error::validation(format!("unknown domain `{domain}`")))?;
    let records: Vec<GroundTruthRecord> = world
        .ground_truth
        .iter()
        .filter(|r| r.domain_id == domain)
        .cloned()
        .collect();
    labeled_class_distribution(&records, spec.class_distribution.len())
        .map_err(|_| Error::EmptyDomain(domain.to_owned()))
}

/// `sum p ln(p / q)` with `0 ln 0 = 0`; `+inf` where `q` is zero and `p` is not.
pub fn kl_divergence(p: &ClassDistribution, q: &ClassDistribution) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            got: q.len(),
        });
    }
    if p.is_empty() || q.is_empty() {
        return Err(Error::UndefinedDistribution(
            "KL of an empty distribution".into(),
        ));
    }
    let mut total = 0.0;
    for (&a, &b) in p.probs().iter().zip(q.probs()) {
        if a == 0.0 {
            continue;
        }
        if b == 0.0 {
            return Ok(f64::INFINITY);
        }
        total += a * (a / b).ln();
    }
    Ok(total.max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimationReport {
    pub domain_id: String,
    pub kl_estimated: f64,
    pub kl_labeled_prior: f64,
    pub truth: ClassDistribution,
    pub estimate: ClassDistribution,
}

/// Compares count-ratio estimates and the labeled prior against each
/// unlabeled domain's true class distribution.
pub fn evaluate_estimation(
    world: &SyntheticWorld,
    predictions: &[PredictionRecord],
    labeled_domain: &str,
) -> Result<Vec<EstimationReport>> {
    let classes = world.specs[0].class_distribution.len();
    let ids: Vec<&str> = world.specs.iter().map(|s| s.id.as_str()).collect();
    let catalog = DomainCatalog::new(ids.iter().copied(), labeled_domain)?;
    let labeled_gt: Vec<GroundTruthRecord> = world
        .ground_truth
        .iter()
        .filter(|r| r.domain_id == labeled_domain)
        .cloned()
        .collect();
    let prior = labeled_class_distribution(&labeled_gt, classes)?;
    let stats = dec::domain_similarity(predictions, &catalog, classes)?;
    let labeled_counts = &stats
        .iter()
        .find(|s| s.domain_id == labeled_domain)
        .expect("labeled domain is in the catalog")
        .per_class_box_counts;
    stats
        .iter()
        .filter(|s| s.domain_id != labeled_domain)
        .map(|s| {
            let truth = oracle_class_distribution(world, &s.domain_id)?;
            let estimate =
                dmc::estimate_class_distribution(&prior, labeled_counts, &s.per_class_box_counts)?;
            Ok(EstimationReport {
                domain_id: s.domain_id.clone(),
                kl_estimated: kl_divergence(&truth, &estimate)?,
                kl_labeled_prior: kl_divergence(&truth, &prior)?,
                truth,
                estimate,
            })
        })
        .collect()
}

pub fn write_estimation_csv<W: Write>(mut w: W, reports: &[EstimationReport]) -> Result<()> {
    writeln!(w, "domain_id,kl_estimated,kl_labeled_prior")?;
    for r in reports {
        writeln!(
            w,
            "{},{},{}",
            r.domain_id, r.kl_estimated, r.kl_labeled_prior
        )?;
    }
    Ok(())
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let x0 = a[0].max(b[0]);
    let y0 = a[1].max(b[1]);
    let x1 = (a[0] + a[2]).min(b[0] + b[2]);
    let y1 = (a[1] + a[3]).min(b[1] + b[3]);
    let inter = (x1 - x0).max(0.0) * (y1 - y0).max(0.0);
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// A box to be judged against ground truth.
#[derive(Debug, Clone, Copy)]
pub struct Detection<'a> {
    pub image_id: &'a str,
    pub domain_id: &'a str,
    pub bbox: BBox,
    pub class: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MatchCounts {
    pub true_positives: u64,
    pub detections: u64,
    pub objects: u64,
}

impl MatchCounts {
    pub fn precision(&self) -> Option<f64> {
        (self.detections > 0).then(|| self.true_positives as f64 / self.detections as f64)
    }

    pub fn recall(&self) -> Option<f64> {
        (self.objects > 0).then(|| self.true_positives as f64 / self.objects as f64)
    }
}

/// Greedy matching per image: detections in descending score order each
/// claim the unclaimed same-class object of highest IoU, if that IoU is at
/// least `min_iou`. Returns counts per domain in first-seen order of the
/// ground truth.
pub fn match_detections<'a>(
    gt: &[GroundTruthRecord],
    detections: impl IntoIterator<Item = Detection<'a>>,
    min_iou: f64,
) -> Vec<(String, MatchCounts)> {
    let mut domain_slot: HashMap<&str, usize> = HashMap::new();
    let mut out: Vec<(String, MatchCounts)> = Vec::new();
    let mut image_slot: HashMap<(&str, &str), usize> = HashMap::new();
    for (i, r) in gt.iter().enumerate() {
        let d = *domain_slot.entry(r.domain_id.as_str()).or_insert_with(|| {
            out.push((r.domain_id.clone(), MatchCounts::default()));
            out.len() - 1
        });
        out[d].1.objects += r.objects.len() as u64;
        image_slot.insert((r.domain_id.as_str(), r.image_id.as_str()), i);
    }
    let mut per_image: HashMap<usize, Vec<Detection<'a>>> = HashMap::new();
    for det in detections {
        let Some(&d) = domain_slot.get(det.domain_id) else {
            continue;
        };
        out[d].1.detections += 1;
        if let Some(&i) = image_slot.get(&(det.domain_id, det.image_id)) {
            per_image.entry(i).or_default().push(det);
        }
    }
    let mut images: Vec<usize> = per_image.keys().copied().collect();
    images.sort_unstable();
    for i in images {
        let mut dets = per_image.remove(&i).expect("key present");
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        let objects = &gt[i].objects;
        let mut claimed = vec![false; objects.len()];
        let mut tp = 0;
        for det in dets {
            let best = objects
                .iter()
                .enumerate()
                .filter(|(o, obj)| !claimed[*o] && obj.class == det.class)
                .map(|(o, obj)| (o, iou(&obj.bbox, &det.bbox)))
                .filter(|(_, v)| *v >= min_iou)
                .max_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((o, _)) = best {
                claimed[o] = true;
                tp += 1;
            }
        }
        let d = domain_slot[gt[i].domain_id.as_str()];
        out[d].1.true_positives += tp;
    }
    out
}

/// Every predicted box whose top score exceeds `min_score`, as detections.
pub fn detections_above(
    records: &[PredictionRecord],
    min_score: f64,
) -> impl Iterator<Item = Detection<'_>> {
    records.iter().flat_map(move |r| {
        r.boxes.iter().filter_map(move |b| {
            let (class, score) = b.top();
            (score > min_score).then_some(Detection {
                image_id: &r.image_id,
                domain_id: &r.domain_id,
                bbox: b.bbox,
                class,
                score,
            })
        })
    })
}

/// The world spec file: class names, labeled domain, domain specs,
/// detector skill and seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub seed: u64,
    pub detector_seed: u64,
    pub classes: Vec<String>,
    pub labeled: String,
    #[serde(default = "default_canvas")]
    pub canvas: [f64; 2],
    pub domains: Vec<DomainSpec>,
    pub detector: DetectorSkill,
}

fn default_canvas() -> [f64; 2] {
    DEFAULT_CANVAS
}

impl WorldSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: WorldSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.catalogs()?;
        spec.detector.validate(spec.classes.len())?;
        for d in &spec.domains {
            d.validate(Some(spec.classes.len()))?;
        }
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("world specs always serialize")
    }

    pub fn catalogs(&self) -> Result<Catalogs> {
        Ok(Catalogs {
            classes: ClassCatalog::new(self.classes.iter().cloned())?,
            domains: DomainCatalog::new(
                self.domains.iter().map(|d| d.id.clone()),
                self.labeled.clone(),
            )?,
        })
    }

    pub fn generate(&self) -> Result<(SyntheticWorld, Vec<PredictionRecord>)> {
        let world = generate_world_on(&self.domains, self.seed, self.canvas)?;
        let predictions = simulate_detector(&world, &self.detector, self.detector_seed)?;
        Ok((world, predictions))
    }

    /// Eight unlabeled domains with shifts evenly spread over `[0, 0.9]`
    /// and shifted class mixes, a labeled source domain, and a detector
    /// biased toward the head class (`car`).
    pub fn standard(seed: u64, images_per_domain: usize) -> Self {
        let classes = ["car", "truck", "pedestrian", "cyclist", "tram", "tricycle"];
        let labeled_prior = [0.55, 0.12, 0.16, 0.09, 0.05, 0.03];
        let mixes: [[f64; 6]; 8] = [
            [0.36, 0.08, 0.28, 0.15, 0.06, 0.07],
            [0.74, 0.16, 0.04, 0.03, 0.02, 0.01],
            [0.34, 0.05, 0.30, 0.13, 0.10, 0.08],
            [0.66, 0.23, 0.04, 0.03, 0.02, 0.02],
            [0.38, 0.10, 0.22, 0.18, 0.03, 0.09],
            [0.72, 0.03, 0.12, 0.03, 0.08, 0.02],
            [0.34, 0.23, 0.22, 0.06, 0.10, 0.05],
            [0.44, 0.04, 0.20, 0.22, 0.04, 0.06],
        ];
        let mut domains = vec![DomainSpec {
            id: "source".into(),
            shift: 0.0,
            class_distribution: labeled_prior.to_vec(),
            images: images_per_domain,
            objects_mean: 5.0,
            objects_dispersion: 1.5,
        }];
        for (j, mix) in mixes.iter().enumerate() {
            domains.push(DomainSpec {
                id: format!("domain{j}"),
                shift: 0.9 * j as f64 / 7.0,
                class_distribution: mix.to_vec(),
                images: images_per_domain,
                objects_mean: 5.0,
                objects_dispersion: 1.5,
            });
        }
        // head-biased: every tail class leaks 10% of its detections to car
        let confusion = (0..6)
            .map(|t| {
                (0..6)
                    .map(|p| match (t, p) {
                        (0, 0) => 1.0,
                        (0, _) => 0.0,
                        (_, 0) => 0.1,
                        _ if t == p => 0.9,
                        _ => 0.0,
                    })
                    .collect()
            })
            .collect();
        WorldSpec {
            seed,
            detector_seed: seed.wrapping_add(1),
            classes: classes.iter().map(|s| s.to_string()).collect(),
            labeled: "source".into(),
            canvas: DEFAULT_CANVAS,
            domains,
            detector: DetectorSkill {
                base_recall: 0.9,
                shift_sensitivity: 0.6,
                tp_score: vec![
                    BetaLaw::new(9.0, 2.0),
                    BetaLaw::new(8.0, 2.5),
                    BetaLaw::new(8.0, 2.5),
                    BetaLaw::new(7.5, 2.5),
                    BetaLaw::new(7.0, 2.5),
                    BetaLaw::new(7.0, 2.5),
                ],
                fp_score: BetaLaw::new(2.0, 4.0),
                score_shift: 0.15,
                confusion,
                fp_rate: 0.3,
                fp_class_weights: None,
                localization_jitter: 0.15,
                jitter_shift: 0.25,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(id: &str, shift: f64, pi: &[f64], images: usize, mean: f64) -> DomainSpec {
        DomainSpec {
            id: id.into(),
            shift,
            class_distribution: pi.to_vec(),
            images,
            objects_mean: mean,
            objects_dispersion: 1.0,
        }
    }

    fn dist(v: &[f64]) -> ClassDistribution {
        ClassDistribution::new(v.to_vec()).unwrap()
    }

    #[test]
    fn degenerate_class_law() {
        let w = generate_world(&[spec("a", 0.0, &[1.0], 3, 2.0)], 0).unwrap();
        assert_eq!(w.ground_truth.len(), 3);
        assert!(w
            .ground_truth
            .iter()
            .flat_map(|r| &r.objects)
            .all(|o| o.class == 0));
        assert!(
            w.ground_truth
                .iter()
                .map(|r| r.objects.len())
                .sum::<usize>()
                > 0
        );
        assert_eq!(oracle_class_distribution(&w, "a").unwrap().probs(), &[1.0]);
    }

    #[test]
    fn world_is_deterministic() {
        let specs = [
            spec("a", 0.2, &[0.3, 0.7], 50, 3.0),
            spec("b", 0.6, &[0.5, 0.5], 40, 2.0),
        ];
        assert_eq!(
            generate_world(&specs, 9).unwrap(),
            generate_world(&specs, 9).unwrap()
        );
        assert_ne!(
            generate_world(&specs, 9).unwrap(),
            generate_world(&specs, 10).unwrap()
        );
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(generate_world(&[], 0).is_err());
        assert!(generate_world(&[spec("a", 1.5, &[1.0], 3, 2.0)], 0).is_err());
        assert!(generate_world(&[spec("a", 0.0, &[0.5, 0.4], 3, 2.0)], 0).is_err());
        assert!(generate_world(&[spec("a", 0.0, &[1.0], 0, 2.0)], 0).is_err());
        assert!(generate_world(
            &[
                spec("a", 0.0, &[1.0], 3, 2.0),
                spec("a", 0.0, &[1.0], 3, 2.0)
            ],
            0
        )
        .is_err());
        let mut s = spec("a", 0.0, &[1.0], 3, 2.0);
        s.objects_dispersion = 0.5;
        assert!(generate_world(&[s], 0).is_err());
    }

    #[test]
    fn perfect_detector_finds_everything() {
        let w = generate_world(&[spec("a", 0.0, &[0.5, 0.5], 30, 3.0)], 1).unwrap();
        let preds = simulate_detector(&w, &DetectorSkill::perfect(2), 2).unwrap();
        for (gt, p) in w.ground_truth.iter().zip(&preds) {
            assert_eq!(gt.objects.len(), p.boxes.len());
            for (o, b) in gt.objects.iter().zip(&p.boxes) {
                assert_eq!(b.top().0, o.class);
                assert_eq!(b.bbox, o.bbox);
            }
        }
    }

    #[test]
    fn zero_recall_detector_is_silent() {
        let w = generate_world(&[spec("a", 0.3, &[0.5, 0.5], 30, 3.0)], 1).unwrap();
        let mut skill = DetectorSkill::perfect(2);
        skill.base_recall = 0.0;
        let preds = simulate_detector(&w, &skill, 2).unwrap();
        assert!(preds.iter().all(|p| p.boxes.is_empty()));
    }

    #[test]
    fn scores_are_valid_and_peaked() {
        let ws = WorldSpec::standard(3, 100);
        let (_, preds) = ws.generate().unwrap();
        let catalogs = ws.catalogs().unwrap();
        for p in &preds {
            p.validate(&catalogs.classes, &catalogs.domains).unwrap();
        }
    }

    #[test]
    fn detector_validation() {
        let mut skill = DetectorSkill::perfect(2);
        skill.confusion[0] = vec![0.5, 0.4];
        assert!(skill.validate(2).is_err());
        let mut skill = DetectorSkill::perfect(2);
        skill.base_recall = 1.2;
        assert!(skill.validate(2).is_err());
        assert!(DetectorSkill::perfect(2).validate(3).is_err());
    }

    #[test]
    fn kl_examples() {
        let p = dist(&[0.2, 0.3, 0.5]);
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        let v = kl_divergence(&dist(&[1.0, 0.0]), &dist(&[0.5, 0.5])).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        // 0.5 ln 2 + 0.5 ln(2/3), evaluated independently
        let v = kl_divergence(&dist(&[0.5, 0.5]), &dist(&[0.25, 0.75])).unwrap();
        assert!((v - 0.143_841_036_225_890_2).abs() < 1e-12, "{v}");
        assert_eq!(
            kl_divergence(&dist(&[0.5, 0.5]), &dist(&[1.0, 0.0])).unwrap(),
            f64::INFINITY
        );
        assert!(kl_divergence(&dist(&[1.0]), &dist(&[0.5, 0.5])).is_err());
    }

    #[test]
    fn oracle_is_additive_over_halves() {
        let w = generate_world(&[spec("a", 0.0, &[0.2, 0.3, 0.5], 400, 4.0)], 5).unwrap();
        let whole = oracle_class_distribution(&w, "a").unwrap();
        let mut counts = [0u64; 3];
        for half in w.ground_truth.chunks(200) {
            for o in half.iter().flat_map(|r| &r.objects) {
                counts[o.class] += 1;
            }
        }
        assert_eq!(whole, ClassDistribution::from_counts(&counts).unwrap());
        assert!(oracle_class_distribution(&w, "zzz").is_err());
    }

    #[test]
    fn oracle_empty_domain() {
        let w = generate_world(&[spec("a", 0.0, &[1.0], 3, 0.0)], 5).unwrap();
        assert!(matches!(
            oracle_class_distribution(&w, "a"),
            Err(Error::EmptyDomain(_))
        ));
    }

    #[test]
    fn iou_basics() {
        assert_eq!(iou(&[0.0, 0.0, 2.0, 2.0], &[0.0, 0.0, 2.0, 2.0]), 1.0);
        assert_eq!(iou(&[0.0, 0.0, 2.0, 2.0], &[3.0, 3.0, 1.0, 1.0]), 0.0);
        assert!((iou(&[0.0, 0.0, 2.0, 2.0], &[1.0, 0.0, 2.0, 2.0]) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn matching_is_greedy_and_class_aware() {
        let gt = vec![GroundTruthRecord {
            image_id: "i".into(),
            domain_id: "d".into(),
            objects: vec![
                GroundTruthObject {
                    class: 0,
                    bbox: [0.0, 0.0, 10.0, 10.0],
                },
                GroundTruthObject {
                    class: 1,
                    bbox: [50.0, 50.0, 10.0, 10.0],
                },
            ],
        }];
        let det = |bbox, class, score| Detection {
            image_id: "i",
            domain_id: "d",
            bbox,
            class,
            score,
        };
        let dets = vec![
            det([0.0, 0.0, 10.0, 10.0], 0, 0.9),
            det([1.0, 0.0, 10.0, 10.0], 0, 0.8),   // duplicate
            det([50.0, 50.0, 10.0, 10.0], 0, 0.7), // wrong class
        ];
        let m = match_detections(&gt, dets, 0.5);
        assert_eq!(
            m[0].1,
            MatchCounts {
                true_positives: 1,
                detections: 3,
                objects: 2
            }
        );
    }

    #[test]
    fn world_spec_toml_round_trip() {
        let ws = WorldSpec::standard(7, 10);
        let back = WorldSpec::from_toml_str(&ws.to_toml_string()).unwrap();
        assert_eq!(back, ws);
    }
}
