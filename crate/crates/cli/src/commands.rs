use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use dualcurr::dec::{self, CurriculumSchedule, ScheduleMode};
use dualcurr::dmc;
use dualcurr::ema::EmaState;
use dualcurr::pipeline::{self, RunOutput};
use dualcurr::records::{self, coco, Catalogs, DomainCatalog, GroundTruthRecord, PredictionRecord};
use dualcurr::sim::{self, WorldSpec};
use dualcurr::ClassDistribution;
use serde::Serialize;

use crate::config::{Estimates, Inputs, Params, RunConfig};
use crate::error::{Failure, Outcome, WithContext};
use crate::metrics::{self, RunMetrics};

fn open(path: &Path) -> Outcome<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Failure::Runtime(anyhow::anyhow!("opening {}: {e}", path.display())))
}

fn write_file(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> Outcome<()>) -> Outcome<()> {
    let file = File::create(path)
        .map_err(|e| Failure::Runtime(anyhow::anyhow!("creating {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    body(&mut w)?;
    w.flush()?;
    Ok(())
}

fn make_dir(dir: &Path) -> Outcome<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Failure::Runtime(anyhow::anyhow!("creating {}: {e}", dir.display())))
}

pub fn load_catalogs(path: &Path) -> Outcome<Catalogs> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Runtime(anyhow::anyhow!("reading {}: {e}", path.display())))?;
    Catalogs::from_toml_str(&text).ctx(format!("catalog {}", path.display()))
}

/// Reads one or more prediction streams; image ids must stay unique per
/// domain across all of them.
pub fn load_predictions(paths: &[PathBuf], catalogs: &Catalogs) -> Outcome<Vec<PredictionRecord>> {
    let mut all = Vec::new();
    for p in paths {
        all.extend(
            records::ingest_predictions(open(p)?, catalogs)
                .ctx(format!("predictions {}", p.display()))?,
        );
    }
    let mut seen = std::collections::HashSet::new();
    for r in &all {
        if !seen.insert((&r.image_id, &r.domain_id)) {
            return Err(Failure::validation(format!(
                "image `{}` of domain `{}` appears in more than one prediction file",
                r.image_id, r.domain_id
            )));
        }
    }
    Ok(all)
}

pub fn load_ground_truth(
    coco_path: &Path,
    sidecar: &Path,
    catalogs: &Catalogs,
) -> Outcome<Vec<GroundTruthRecord>> {
    coco::read_ground_truth(open(coco_path)?, open(sidecar)?, catalogs)
        .ctx(format!("ground truth {}", coco_path.display()))
}

pub fn cmd_similarity(predictions: &[PathBuf], catalog: &Path, out: &Path) -> Outcome<()> {
    let catalogs = load_catalogs(catalog)?;
    let records = load_predictions(predictions, &catalogs)?;
    let stats = dec::domain_similarity(&records, &catalogs.domains, catalogs.classes.len())?;
    write_file(out, |w| {
        dec::write_stats_csv(w, &stats, catalogs.classes.names())?;
        Ok(())
    })?;
    eprintln!("wrote {} domain rows to {}", stats.len(), out.display());
    Ok(())
}

/// Source of a schedule: precomputed stats (domain mode only) or raw
/// predictions.
pub enum ScheduleInput<'a> {
    Stats(&'a Path),
    Predictions(&'a [PathBuf]),
}

pub fn cmd_schedule(
    input: ScheduleInput<'_>,
    catalog: &Path,
    mode: ScheduleMode,
    phases: usize,
    out: &Path,
) -> Outcome<CurriculumSchedule> {
    let catalogs = load_catalogs(catalog)?;
    let unlabeled = catalogs.domains.unlabeled();
    let schedule = match (input, mode) {
        (ScheduleInput::Stats(path), ScheduleMode::Domain) => {
            let stats =
                dec::read_stats_csv(open(path)?).ctx(format!("stats {}", path.display()))?;
            let stats: Vec<_> = stats
                .into_iter()
                .filter(|s| unlabeled.contains(&s.domain_id))
                .collect();
            dec::build_schedule(&stats, phases)?
        }
        (ScheduleInput::Stats(_), ScheduleMode::Image) => {
            return Err(Failure::validation(
                "image mode needs predictions, not domain stats",
            ))
        }
        (ScheduleInput::Predictions(paths), mode) => {
            let records = load_predictions(paths, &catalogs)?;
            let records: Vec<PredictionRecord> = records
                .into_iter()
                .filter(|r| unlabeled.contains(&r.domain_id))
                .collect();
            match mode {
                ScheduleMode::Domain => {
                    let only = DomainCatalog::with_external_labeled(
                        unlabeled.iter().cloned(),
                        catalogs.domains.labeled(),
                    )?;
                    let stats = dec::domain_similarity(&records, &only, catalogs.classes.len())?;
                    dec::build_schedule(&stats, phases)?
                }
                ScheduleMode::Image => dec::build_schedule_imagewise(&records, phases)?,
            }
        }
    };
    write_file(out, |w| {
        w.write_all(schedule.to_json().as_bytes())?;
        w.write_all(b"\n")?;
        Ok(())
    })?;
    eprintln!(
        "wrote {} phases ({} mode) to {}",
        schedule.phase_count(),
        schedule.mode,
        out.display()
    );
    Ok(schedule)
}

pub fn cmd_estimate(
    catalog: &Path,
    ground_truth: &Path,
    sidecar: &Path,
    predictions: &[PathBuf],
    out: &Path,
) -> Outcome<Vec<ClassDistribution>> {
    let catalogs = load_catalogs(catalog)?;
    let gt = load_ground_truth(ground_truth, sidecar, &catalogs)?;
    let records = load_predictions(predictions, &catalogs)?;
    let estimates = count_ratio(&catalogs, &gt, &records)?;
    write_file(out, |w| {
        dmc::write_matrix_csv(
            w,
            &catalogs.domains.unlabeled(),
            catalogs.classes.names(),
            estimates.iter().map(|e| e.probs().to_vec()),
        )?;
        Ok(())
    })?;
    eprintln!(
        "wrote estimates for {} domains to {}",
        estimates.len(),
        out.display()
    );
    Ok(estimates)
}

fn count_ratio(
    catalogs: &Catalogs,
    gt: &[GroundTruthRecord],
    records: &[PredictionRecord],
) -> Outcome<Vec<ClassDistribution>> {
    let classes = catalogs.classes.len();
    let labeled = catalogs.domains.labeled();
    if catalogs.domains.labeled_is_external() {
        return Err(Failure::validation(format!(
            "labeled domain `{labeled}` has no predictions; count-ratio estimates need them"
        )));
    }
    let labeled_gt: Vec<GroundTruthRecord> = gt
        .iter()
        .filter(|r| r.domain_id == labeled)
        .cloned()
        .collect();
    let prior = records::labeled_class_distribution(&labeled_gt, classes)
        .ctx(format!("labeled domain `{labeled}`"))?;
    let stats = dec::domain_similarity(records, &catalogs.domains, classes)?;
    let labeled_counts = &stats
        .iter()
        .find(|s| s.domain_id == labeled)
        .expect("catalog lists the labeled domain")
        .per_class_box_counts;
    catalogs
        .domains
        .unlabeled()
        .iter()
        .map(|d| {
            let s = stats
                .iter()
                .find(|s| &s.domain_id == d)
                .expect("catalog domain");
            dmc::estimate_class_distribution(&prior, labeled_counts, &s.per_class_box_counts)
                .ctx(format!("domain `{d}`"))
        })
        .collect()
}

/// True class frequencies of every unlabeled domain.
fn ground_truth_estimates(
    catalogs: &Catalogs,
    gt: &[GroundTruthRecord],
) -> Outcome<Vec<ClassDistribution>> {
    catalogs
        .domains
        .unlabeled()
        .iter()
        .map(|d| {
            let part: Vec<GroundTruthRecord> =
                gt.iter().filter(|r| &r.domain_id == d).cloned().collect();
            records::labeled_class_distribution(&part, catalogs.classes.len())
                .ctx(format!("ground truth of domain `{d}`"))
        })
        .collect()
}

/// Inputs of a run, read once.
pub struct RunInputs {
    pub catalogs: Catalogs,
    pub predictions: Vec<PredictionRecord>,
    pub ground_truth: Vec<GroundTruthRecord>,
    pub student_trace: Vec<Vec<f64>>,
}

impl RunInputs {
    pub fn load(inputs: &Inputs) -> Outcome<Self> {
        let catalogs = load_catalogs(&inputs.catalog)?;
        let predictions = load_predictions(std::slice::from_ref(&inputs.predictions), &catalogs)?;
        let ground_truth = load_ground_truth(&inputs.ground_truth, &inputs.sidecar, &catalogs)?;
        let student_trace = match &inputs.student_trace {
            Some(p) => read_trace(p)?,
            None => Vec::new(),
        };
        Ok(RunInputs {
            catalogs,
            predictions,
            ground_truth,
            student_trace,
        })
    }

    pub fn execute(&self, params: &Params) -> Outcome<RunOutput> {
        params.validate()?;
        let given = match params.estimates {
            Estimates::GroundTruth => {
                Some(ground_truth_estimates(&self.catalogs, &self.ground_truth)?)
            }
            _ => None,
        };
        Ok(pipeline::run(
            &self.predictions,
            &self.ground_truth,
            &self.catalogs,
            &params.pipeline(given),
        )?)
    }
}

fn read_trace(path: &Path) -> Outcome<Vec<Vec<f64>>> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Vec<f64> = serde_json::from_str(&line)
            .map_err(|e| Failure::validation(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.push(v);
    }
    Ok(out)
}

/// Teacher state after folding in every student step of the trace.
pub fn teacher_from_trace(trace: &[Vec<f64>], alpha: f64) -> Outcome<Option<EmaState>> {
    let Some((first, rest)) = trace.split_first() else {
        return Ok(None);
    };
    let mut state = EmaState::new(first.clone(), alpha)?;
    for (i, student) in rest.iter().enumerate() {
        state
            .update(student)
            .ctx(format!("student step {}", i + 1))?;
    }
    Ok(Some(state))
}

#[derive(Serialize)]
struct Snapshot<'a> {
    accumulator: &'a dmc::PseudoLabelAccumulator,
    ema: Option<EmaState>,
}

pub struct RunArtifacts {
    pub output: RunOutput,
    pub metrics: RunMetrics,
    pub teacher: Option<EmaState>,
}

pub const ARTIFACTS: [&str; 10] = [
    "config.toml",
    "stats.csv",
    "estimates.csv",
    "schedule.json",
    "pseudo_labels.jsonl",
    "rounds.csv",
    "thresholds.csv",
    "snapshot.json",
    "metrics.csv",
    "accepted.csv",
];

/// Runs every phase and writes all artifacts into `out`.
pub fn cmd_run(cfg: &RunConfig, out: &Path) -> Outcome<RunArtifacts> {
    cfg.params.validate()?;
    let inputs = RunInputs::load(&cfg.inputs)?;
    run_loaded(cfg, &inputs, out)
}

pub fn run_loaded(cfg: &RunConfig, inputs: &RunInputs, out: &Path) -> Outcome<RunArtifacts> {
    let params = &cfg.params;
    let output = inputs.execute(params)?;
    let teacher = teacher_from_trace(&inputs.student_trace, params.alpha)?;
    let metrics = RunMetrics::compute(&output, params.tau, params.mu, &inputs.ground_truth);
    for r in &output.reports {
        eprintln!(
            "phase {}: {} images, {} boxes, {} accepted",
            r.phase,
            r.records_processed,
            r.boxes_seen,
            r.accepted_total()
        );
    }

    make_dir(out)?;
    let names = inputs.catalogs.classes.names();
    let domains = output.domains().to_vec();
    write_file(&out.join("config.toml"), |w| {
        w.write_all(cfg.to_toml_string().as_bytes())?;
        Ok(())
    })?;
    write_file(&out.join("stats.csv"), |w| {
        dec::write_stats_csv(w, &output.stats, names)?;
        Ok(())
    })?;
    write_file(&out.join("estimates.csv"), |w| {
        dmc::write_matrix_csv(
            w,
            &domains,
            names,
            output.estimates.iter().map(|e| e.probs().to_vec()),
        )?;
        Ok(())
    })?;
    write_file(&out.join("schedule.json"), |w| {
        w.write_all(output.schedule.to_json().as_bytes())?;
        w.write_all(b"\n")?;
        Ok(())
    })?;
    write_file(&out.join("pseudo_labels.jsonl"), |w| {
        dualcurr::filter::write_pseudo_labels(w, &output.labels)?;
        Ok(())
    })?;
    write_file(&out.join("rounds.csv"), |w| {
        dualcurr::filter::write_round_reports(w, &output.reports, &domains, names, true)?;
        Ok(())
    })?;
    write_file(&out.join("thresholds.csv"), |w| {
        dmc::write_thresholds_csv(w, &output.thresholds, names)?;
        Ok(())
    })?;
    write_file(&out.join("accepted.csv"), |w| {
        dmc::write_matrix_csv(
            w,
            &domains,
            names,
            (0..domains.len()).map(|j| {
                output
                    .accumulator
                    .counts(j)
                    .iter()
                    .map(|&n| n as f64)
                    .collect()
            }),
        )?;
        Ok(())
    })?;
    write_file(&out.join("snapshot.json"), |w| {
        serde_json::to_writer_pretty(
            &mut *w,
            &Snapshot {
                accumulator: &output.accumulator,
                ema: teacher.clone(),
            },
        )
        .map_err(|e| Failure::Runtime(e.into()))?;
        w.write_all(b"\n")?;
        Ok(())
    })?;
    write_file(&out.join("metrics.csv"), |w| {
        metrics::write_metrics_csv(w, std::slice::from_ref(&metrics))?;
        Ok(())
    })?;
    eprintln!(
        "{} pseudo-labels over {} phases written to {}",
        output.labels.len(),
        output.reports.len(),
        out.display()
    );
    Ok(RunArtifacts {
        output,
        metrics,
        teacher,
    })
}

/// Files written by `simulate`.
pub const SIMULATED: [&str; 6] = [
    "world.toml",
    "catalog.toml",
    "gt.json",
    "sidecar.json",
    "predictions.jsonl",
    "run.toml",
];

/// Generates a world and detector output, plus a run config that points at
/// them.
pub fn cmd_simulate(
    spec: &WorldSpec,
    out: &Path,
) -> Outcome<(sim::SyntheticWorld, Vec<PredictionRecord>)> {
    let catalogs = spec.catalogs()?;
    let (world, predictions) = spec.generate()?;
    make_dir(out)?;
    write_file(&out.join("world.toml"), |w| {
        w.write_all(spec.to_toml_string().as_bytes())?;
        Ok(())
    })?;
    write_file(&out.join("catalog.toml"), |w| {
        w.write_all(catalogs.to_toml_string().as_bytes())?;
        Ok(())
    })?;
    {
        let gt = File::create(out.join("gt.json"))?;
        let side = File::create(out.join("sidecar.json"))?;
        let mut gt = BufWriter::new(gt);
        let mut side = BufWriter::new(side);
        coco::write_ground_truth(&world.ground_truth, &catalogs.classes, &mut gt, &mut side)?;
        gt.flush()?;
        side.flush()?;
    }
    write_file(&out.join("predictions.jsonl"), |w| {
        records::write_predictions(w, &predictions)?;
        Ok(())
    })?;
    let run = RunConfig {
        inputs: Inputs {
            catalog: "catalog.toml".into(),
            predictions: "predictions.jsonl".into(),
            ground_truth: "gt.json".into(),
            sidecar: "sidecar.json".into(),
            student_trace: None,
        },
        params: Params {
            seed: Some(spec.seed),
            ..Params::default()
        },
    };
    write_file(&out.join("run.toml"), |w| {
        w.write_all(run.to_toml_string().as_bytes())?;
        Ok(())
    })?;
    let boxes: usize = predictions.iter().map(|r| r.boxes.len()).sum();
    eprintln!(
        "simulated {} images, {} boxes into {}",
        predictions.len(),
        boxes,
        out.display()
    );
    Ok((world, predictions))
}

/// Runs the grid `taus x mus` and writes one metrics row per cell.
pub fn cmd_ablate(
    cfg: &RunConfig,
    taus: &[f64],
    mus: &[f64],
    out: &Path,
) -> Outcome<Vec<RunMetrics>> {
    if taus.is_empty() || mus.is_empty() {
        return Err(Failure::validation("ablation grid is empty"));
    }
    let inputs = RunInputs::load(&cfg.inputs)?;
    let mut rows = Vec::with_capacity(taus.len() * mus.len());
    for &tau in taus {
        for &mu in mus {
            let params = Params {
                tau,
                mu,
                ..cfg.params.clone()
            };
            let output = inputs
                .execute(&params)
                .ctx(format!("cell tau={tau} mu={mu}"))?;
            let m = RunMetrics::compute(&output, tau, mu, &inputs.ground_truth);
            eprintln!(
                "tau={tau} mu={mu}: {} labels, max ratio deviation {:.4}",
                m.pseudo_labels, m.max_ratio_deviation
            );
            rows.push(m);
        }
    }
    make_dir(out)?;
    write_file(&out.join("config.toml"), |w| {
        w.write_all(cfg.to_toml_string().as_bytes())?;
        Ok(())
    })?;
    write_file(&out.join("metrics.csv"), |w| {
        metrics::write_metrics_csv(w, &rows)?;
        Ok(())
    })?;
    Ok(rows)
}
