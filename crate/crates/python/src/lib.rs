//! Python bindings for the `dualcurr` core.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use dualcurr::dec::{self, ScheduleMode};
use dualcurr::dmc;
use dualcurr::ema;
use dualcurr::filter::ThresholdPolicy;
use dualcurr::pipeline::{self, EstimateSource, PipelineConfig};
use dualcurr::records::{self, GroundTruthObject, GroundTruthRecord, ScoredBox};
use dualcurr::sim::WorldSpec;
use dualcurr::ClassDistribution;

fn err(e: dualcurr::Error) -> PyErr {
    match e {
        dualcurr::Error::Io(e) => PyIOError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn distribution(p: Vec<f64>) -> PyResult<ClassDistribution> {
    ClassDistribution::new(p).map_err(err)
}

/// Class and domain catalogs.
#[pyclass(frozen, skip_from_py_object, module = "dualcurr_py")]
#[derive(Clone)]
struct Catalogs(records::Catalogs);

#[pymethods]
impl Catalogs {
    #[new]
    fn new(classes: Vec<String>, domains: Vec<String>, labeled: String) -> PyResult<Self> {
        Ok(Catalogs(records::Catalogs {
            classes: records::ClassCatalog::new(classes).map_err(err)?,
            domains: records::DomainCatalog::new(domains, labeled).map_err(err)?,
        }))
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        records::Catalogs::from_toml_str(text)
            .map(Catalogs)
            .map_err(err)
    }

    fn to_toml(&self) -> String {
        self.0.to_toml_string()
    }

    #[getter]
    fn classes(&self) -> Vec<String> {
        self.0.classes.names().to_vec()
    }

    #[getter]
    fn domains(&self) -> Vec<String> {
        self.0.domains.ids().to_vec()
    }

    #[getter]
    fn labeled(&self) -> String {
        self.0.domains.labeled().to_string()
    }

    fn unlabeled(&self) -> Vec<String> {
        self.0.domains.unlabeled()
    }
}

/// One image's detector output: boxes as `(bbox, scores)` pairs.
#[pyclass(frozen, from_py_object, module = "dualcurr_py")]
#[derive(Clone)]
struct PredictionRecord(records::PredictionRecord);

#[pymethods]
impl PredictionRecord {
    #[new]
    fn new(image_id: String, domain_id: String, boxes: Vec<([f64; 4], Vec<f64>)>) -> Self {
        PredictionRecord(records::PredictionRecord {
            image_id,
            domain_id,
            boxes: boxes
                .into_iter()
                .map(|(bbox, scores)| ScoredBox { bbox, scores })
                .collect(),
        })
    }

    #[getter]
    fn image_id(&self) -> String {
        self.0.image_id.clone()
    }

    #[getter]
    fn domain_id(&self) -> String {
        self.0.domain_id.clone()
    }

    #[getter]
    fn boxes(&self) -> Vec<([f64; 4], Vec<f64>)> {
        self.0
            .boxes
            .iter()
            .map(|b| (b.bbox, b.scores.clone()))
            .collect()
    }

    fn to_json(&self) -> String {
        self.0.to_canonical_line()
    }

    fn __repr__(&self) -> String {
        format!(
            "PredictionRecord({:?}, {:?}, {} boxes)",
            self.0.image_id,
            self.0.domain_id,
            self.0.boxes.len()
        )
    }
}

fn unwrap_records(records: &[PredictionRecord]) -> Vec<records::PredictionRecord> {
    records.iter().map(|r| r.0.clone()).collect()
}

/// Parses a JSON-lines prediction stream against the catalogs.
#[pyfunction]
fn read_predictions(text: &str, catalogs: &Catalogs) -> PyResult<Vec<PredictionRecord>> {
    let recs = records::ingest_predictions(text.as_bytes(), &catalogs.0).map_err(err)?;
    Ok(recs.into_iter().map(PredictionRecord).collect())
}

/// Mean over boxes of the top class score; 0 for an empty image.
#[pyfunction]
fn image_score(record: &PredictionRecord) -> f64 {
    dec::image_score(&record.0)
}

#[pyclass(frozen, get_all, from_py_object, module = "dualcurr_py")]
#[derive(Clone)]
struct DomainStats {
    domain_id: String,
    image_count: usize,
    similarity: f64,
    per_class_box_counts: Vec<u64>,
}

impl From<dec::DomainStats> for DomainStats {
    fn from(s: dec::DomainStats) -> Self {
        DomainStats {
            domain_id: s.domain_id,
            image_count: s.image_count,
            similarity: s.similarity,
            per_class_box_counts: s.per_class_box_counts,
        }
    }
}

impl DomainStats {
    fn inner(&self) -> dec::DomainStats {
        dec::DomainStats {
            domain_id: self.domain_id.clone(),
            image_count: self.image_count,
            similarity: self.similarity,
            per_class_box_counts: self.per_class_box_counts.clone(),
        }
    }
}

#[pymethods]
impl DomainStats {
    fn __repr__(&self) -> String {
        format!(
            "DomainStats({:?}, images={}, similarity={})",
            self.domain_id, self.image_count, self.similarity
        )
    }
}

#[pyfunction]
fn domain_similarity(
    records: Vec<PredictionRecord>,
    catalogs: &Catalogs,
) -> PyResult<Vec<DomainStats>> {
    let c = &catalogs.0;
    let stats = dec::domain_similarity(&unwrap_records(&records), &c.domains, c.classes.len())
        .map_err(err)?;
    Ok(stats.into_iter().map(DomainStats::from).collect())
}

#[pyclass(frozen, skip_from_py_object, module = "dualcurr_py")]
#[derive(Clone)]
struct Schedule(dec::CurriculumSchedule);

#[pymethods]
impl Schedule {
    #[getter]
    fn mode(&self) -> String {
        self.0.mode.to_string()
    }

    #[getter]
    fn phases(&self) -> Vec<Vec<String>> {
        self.0.phases.clone()
    }

    /// Units active at `phase` (1-based), cumulative.
    fn active_set(&self, phase: usize) -> PyResult<Vec<String>> {
        let set = dec::active_set(&self.0, phase).map_err(err)?;
        Ok(set.into_iter().map(str::to_string).collect())
    }

    fn to_json(&self) -> String {
        self.0.to_json()
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        dec::CurriculumSchedule::from_reader(text.as_bytes())
            .map(Schedule)
            .map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.phase_count()
    }
}

/// Domain schedule from stats; the caller drops the labeled domain.
#[pyfunction]
#[pyo3(signature = (stats, phases = dec::DEFAULT_PHASES))]
fn build_schedule(stats: Vec<DomainStats>, phases: usize) -> PyResult<Schedule> {
    let stats: Vec<_> = stats.iter().map(DomainStats::inner).collect();
    dec::build_schedule(&stats, phases)
        .map(Schedule)
        .map_err(err)
}

#[pyfunction]
#[pyo3(signature = (records, phases = dec::DEFAULT_PHASES))]
fn build_schedule_imagewise(records: Vec<PredictionRecord>, phases: usize) -> PyResult<Schedule> {
    dec::build_schedule_imagewise(&unwrap_records(&records), phases)
        .map(Schedule)
        .map_err(err)
}

/// Labeled prior rescaled by unlabeled over labeled predicted-box counts.
#[pyfunction]
fn estimate_class_distribution(
    prior: Vec<f64>,
    labeled_counts: Vec<u64>,
    unlabeled_counts: Vec<u64>,
) -> PyResult<Vec<f64>> {
    let e =
        dmc::estimate_class_distribution(&distribution(prior)?, &labeled_counts, &unlabeled_counts)
            .map_err(err)?;
    Ok(e.probs().to_vec())
}

#[pyfunction]
fn kl_divergence(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    dualcurr::sim::kl_divergence(&distribution(p)?, &distribution(q)?).map_err(err)
}

/// Running per-domain pseudo-label class counts.
#[pyclass(skip_from_py_object, module = "dualcurr_py")]
#[derive(Clone)]
struct Accumulator(dmc::PseudoLabelAccumulator);

#[pymethods]
impl Accumulator {
    #[new]
    #[pyo3(signature = (domains, classes, window = None))]
    fn new(domains: Vec<String>, classes: usize, window: Option<usize>) -> PyResult<Self> {
        let mut acc = dmc::PseudoLabelAccumulator::new(&domains, classes).map_err(err)?;
        if let Some(w) = window {
            acc = acc.with_window(w).map_err(err)?;
        }
        Ok(Accumulator(acc))
    }

    fn record(&mut self, domain: &str, classes: Vec<usize>) -> PyResult<()> {
        let j = self.index(domain)?;
        dmc::record_pseudo_labels(&mut self.0, j, &classes).map_err(err)
    }

    fn counts(&self, domain: &str) -> PyResult<Vec<u64>> {
        Ok(self.0.counts(self.index(domain)?).to_vec())
    }

    fn total(&self, domain: &str) -> PyResult<u64> {
        Ok(self.0.total(self.index(domain)?))
    }

    /// Normalized counts; empty before the domain has any label.
    fn distribution(&self, domain: &str) -> PyResult<Vec<f64>> {
        let j = self.index(domain)?;
        Ok(dmc::pseudo_label_distribution(&self.0, j).probs().to_vec())
    }

    /// Per-class thresholds for every domain, rows in domain order.
    fn thresholds(&self, estimates: Vec<Vec<f64>>, tau: f64, mu: f64) -> PyResult<Vec<Vec<f64>>> {
        let est = estimates
            .into_iter()
            .map(distribution)
            .collect::<PyResult<Vec<_>>>()?;
        let t = dmc::thresholds(&self.0, &est, tau, mu).map_err(err)?;
        Ok((0..self.0.domains().len())
            .map(|j| t.row(j).to_vec())
            .collect())
    }

    #[getter]
    fn domains(&self) -> Vec<String> {
        self.0.domains().to_vec()
    }

    fn to_json(&self) -> String {
        serde_json_string(&self.0)
    }
}

impl Accumulator {
    fn index(&self, domain: &str) -> PyResult<usize> {
        self.0
            .domain_index(domain)
            .ok_or_else(|| PyValueError::new_err(format!("unknown domain `{domain}`")))
    }
}

fn serde_json_string<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("state serializes")
}

/// Teacher weights kept as an exponential moving average of the student.
#[pyclass(skip_from_py_object, module = "dualcurr_py")]
#[derive(Clone)]
struct EmaState(ema::EmaState);

#[pymethods]
impl EmaState {
    #[new]
    #[pyo3(signature = (teacher, alpha = ema::DEFAULT_ALPHA))]
    fn new(teacher: Vec<f64>, alpha: f64) -> PyResult<Self> {
        ema::EmaState::new(teacher, alpha)
            .map(EmaState)
            .map_err(err)
    }

    fn update(&mut self, student: Vec<f64>) -> PyResult<()> {
        self.0.update(&student).map_err(err)
    }

    #[getter]
    fn teacher(&self) -> Vec<f64> {
        self.0.teacher().to_vec()
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.0.alpha()
    }

    #[getter]
    fn steps(&self) -> u64 {
        self.0.steps()
    }
}

/// Ground truth as `(image_id, domain_id, [(class, bbox), ...])` rows.
type GtRow = (String, String, Vec<(usize, [f64; 4])>);

fn gt_records(rows: Vec<GtRow>) -> Vec<GroundTruthRecord> {
    rows.into_iter()
        .map(|(image_id, domain_id, objects)| GroundTruthRecord {
            image_id,
            domain_id,
            objects: objects
                .into_iter()
                .map(|(class, bbox)| GroundTruthObject { class, bbox })
                .collect(),
        })
        .collect()
}

/// Built-in eight-domain synthetic world.
#[pyclass(frozen, module = "dualcurr_py")]
struct World {
    catalogs: records::Catalogs,
    predictions: Vec<records::PredictionRecord>,
    ground_truth: Vec<GroundTruthRecord>,
    true_distributions: Vec<(String, Vec<f64>)>,
}

#[pymethods]
impl World {
    #[getter]
    fn catalogs(&self) -> Catalogs {
        Catalogs(self.catalogs.clone())
    }

    #[getter]
    fn predictions(&self) -> Vec<PredictionRecord> {
        self.predictions
            .iter()
            .cloned()
            .map(PredictionRecord)
            .collect()
    }

    #[getter]
    fn ground_truth(&self) -> Vec<GtRow> {
        self.ground_truth
            .iter()
            .map(|r| {
                (
                    r.image_id.clone(),
                    r.domain_id.clone(),
                    r.objects.iter().map(|o| (o.class, o.bbox)).collect(),
                )
            })
            .collect()
    }

    /// Injected class mix of every domain.
    #[getter]
    fn true_distributions(&self) -> Vec<(String, Vec<f64>)> {
        self.true_distributions.clone()
    }
}

#[pyfunction]
#[pyo3(signature = (seed, images_per_domain = 2000))]
fn simulate(seed: u64, images_per_domain: usize) -> PyResult<World> {
    let spec = WorldSpec::standard(seed, images_per_domain);
    let (world, predictions) = spec.generate().map_err(err)?;
    Ok(World {
        catalogs: spec.catalogs().map_err(err)?,
        predictions,
        ground_truth: world.ground_truth,
        true_distributions: spec
            .domains
            .iter()
            .map(|d| (d.id.clone(), d.class_distribution.clone()))
            .collect(),
    })
}

#[pyclass(frozen, get_all, module = "dualcurr_py")]
struct PseudoLabel {
    image_id: String,
    domain_id: String,
    bbox: [f64; 4],
    class_index: usize,
    score: f64,
    threshold: f64,
}

#[pyclass(frozen, get_all, module = "dualcurr_py")]
struct RunResult {
    schedule: Schedule,
    estimates: Vec<Vec<f64>>,
    labels: Vec<Py<PseudoLabel>>,
    accumulator: Accumulator,
    thresholds: Vec<Vec<f64>>,
    boxes_per_image: Vec<f64>,
}

/// Runs every curriculum phase. `ground_truth` must cover the labeled
/// domain; its class mix is the prior.
#[pyfunction]
#[pyo3(signature = (
    records, ground_truth, catalogs, *, tau = dmc::DEFAULT_TAU, mu = dmc::DEFAULT_MU,
    phases = dec::DEFAULT_PHASES, batch_size = dualcurr::filter::DEFAULT_BATCH_SIZE,
    mode = "domain", policy = "dynamic", estimates = None, seed = None,
))]
#[allow(clippy::too_many_arguments)]
fn run(
    py: Python<'_>,
    records: Vec<PredictionRecord>,
    ground_truth: Vec<GtRow>,
    catalogs: &Catalogs,
    tau: f64,
    mu: f64,
    phases: usize,
    batch_size: usize,
    mode: &str,
    policy: &str,
    estimates: Option<Vec<Vec<f64>>>,
    seed: Option<u64>,
) -> PyResult<RunResult> {
    let mode: ScheduleMode = mode.parse().map_err(err)?;
    let policy = match policy {
        "dynamic" => ThresholdPolicy::Dynamic,
        "fixed" => ThresholdPolicy::Fixed,
        other => return Err(PyValueError::new_err(format!("unknown policy `{other}`"))),
    };
    let estimates = match estimates {
        None => EstimateSource::CountRatio,
        Some(rows) => EstimateSource::Given(
            rows.into_iter()
                .map(distribution)
                .collect::<PyResult<_>>()?,
        ),
    };
    let cfg = PipelineConfig {
        tau,
        mu,
        phase_count: phases,
        batch_size,
        mode,
        policy,
        estimates,
        shuffle_seed: seed,
        ..PipelineConfig::default()
    };
    let recs = unwrap_records(&records);
    let gt = gt_records(ground_truth);
    let out = py
        .detach(|| pipeline::run(&recs, &gt, &catalogs.0, &cfg))
        .map_err(err)?;
    let labels = out
        .labels
        .iter()
        .map(|l| {
            Py::new(
                py,
                PseudoLabel {
                    image_id: l.image_id.clone(),
                    domain_id: l.domain_id.clone(),
                    bbox: l.bbox,
                    class_index: l.class,
                    score: l.score,
                    threshold: l.threshold_used,
                },
            )
        })
        .collect::<PyResult<_>>()?;
    let domains = out.domains().len();
    Ok(RunResult {
        schedule: Schedule(out.schedule.clone()),
        estimates: out.estimates.iter().map(|e| e.probs().to_vec()).collect(),
        labels,
        thresholds: (0..domains)
            .map(|j| out.thresholds.row(j).to_vec())
            .collect(),
        boxes_per_image: out.reports.iter().map(|r| r.boxes_per_image).collect(),
        accumulator: Accumulator(out.accumulator),
    })
}

#[pymodule]
fn dualcurr_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DEFAULT_TAU", dmc::DEFAULT_TAU)?;
    m.add("DEFAULT_MU", dmc::DEFAULT_MU)?;
    m.add("DEFAULT_ALPHA", ema::DEFAULT_ALPHA)?;
    m.add("DEFAULT_PHASES", dec::DEFAULT_PHASES)?;
    m.add_class::<Catalogs>()?;
    m.add_class::<PredictionRecord>()?;
    m.add_class::<DomainStats>()?;
    m.add_class::<Schedule>()?;
    m.add_class::<Accumulator>()?;
    m.add_class::<EmaState>()?;
    m.add_class::<World>()?;
    m.add_class::<PseudoLabel>()?;
    m.add_class::<RunResult>()?;
    m.add_function(wrap_pyfunction!(read_predictions, m)?)?;
    m.add_function(wrap_pyfunction!(image_score, m)?)?;
    m.add_function(wrap_pyfunction!(domain_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(build_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(build_schedule_imagewise, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_class_distribution, m)?)?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
