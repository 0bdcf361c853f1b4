//! Run configuration: one TOML file plus command-line overrides.

use std::path::{Path, PathBuf};

use dualcurr::dec::{ScheduleMode, DEFAULT_PHASES};
use dualcurr::dmc::{DEFAULT_MU, DEFAULT_TAU};
use dualcurr::ema::DEFAULT_ALPHA;
use dualcurr::filter::{ThresholdPolicy, DEFAULT_BATCH_SIZE};
use dualcurr::pipeline::PipelineConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Failure, Outcome};

/// Where per-domain estimates come from in a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Estimates {
    /// Labeled prior rescaled by predicted-box counts.
    CountRatio,
    /// The labeled prior for every domain.
    LabeledPrior,
    /// True class frequencies of each unlabeled domain, read from the
    /// ground truth (simulator worlds only).
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inputs {
    pub catalog: PathBuf,
    pub predictions: PathBuf,
    /// COCO-style ground truth; must cover the labeled domain.
    pub ground_truth: PathBuf,
    /// Image file name to domain id.
    pub sidecar: PathBuf,
    /// Line-delimited JSON arrays of student parameters; the first line
    /// seeds the teacher.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub student_trace: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Params {
    pub tau: f64,
    pub mu: f64,
    pub alpha: f64,
    pub phases: usize,
    pub batch_size: usize,
    pub mode: ScheduleMode,
    pub policy: ThresholdPolicy,
    pub cumulative: bool,
    pub estimates: Estimates,
    pub reestimate_each_phase: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    /// Shuffle seed for the processing order; input order when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for Params {
    fn default() -> Self {
        Params {
            tau: DEFAULT_TAU,
            mu: DEFAULT_MU,
            alpha: DEFAULT_ALPHA,
            phases: DEFAULT_PHASES,
            batch_size: DEFAULT_BATCH_SIZE,
            mode: ScheduleMode::Domain,
            policy: ThresholdPolicy::Dynamic,
            cumulative: true,
            estimates: Estimates::CountRatio,
            reestimate_each_phase: false,
            window: None,
            seed: None,
        }
    }
}

/// ```toml
/// [inputs]
/// catalog = "catalog.toml"
/// predictions = "predictions.jsonl"
/// ground_truth = "gt.json"
/// sidecar = "sidecar.json"
///
/// [params]
/// tau = 0.7
/// mu = 0.1
/// ```
///
/// Relative input paths are resolved against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub inputs: Inputs,
    #[serde(default)]
    pub params: Params,
}

/// Values given on the command line; each one that is set wins over the file.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// Base confidence threshold, in (0, 1)
    #[arg(long)]
    pub tau: Option<f64>,
    /// Scale of the distribution-matching term, >= 0
    #[arg(long)]
    pub mu: Option<f64>,
    /// Teacher EMA decay, in [0, 1]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Number of curriculum phases
    #[arg(long)]
    pub phases: Option<usize>,
    /// Images per threshold refresh
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Schedule unit
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<ScheduleMode>,
    /// Shuffle seed for the processing order
    #[arg(long)]
    pub seed: Option<u64>,
}

fn parse_mode(s: &str) -> Result<ScheduleMode, String> {
    s.parse().map_err(|e: dualcurr::Error| e.to_string())
}

impl Params {
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.tau {
            self.tau = v;
        }
        if let Some(v) = o.mu {
            self.mu = v;
        }
        if let Some(v) = o.alpha {
            self.alpha = v;
        }
        if let Some(v) = o.phases {
            self.phases = v;
        }
        if let Some(v) = o.batch_size {
            self.batch_size = v;
        }
        if let Some(v) = o.mode {
            self.mode = v;
        }
        if let Some(v) = o.seed {
            self.seed = Some(v);
        }
    }

    pub fn validate(&self) -> Outcome<()> {
        if !(self.alpha >= 0.0 && self.alpha <= 1.0) {
            return Err(Failure::validation(format!(
                "alpha = {} must lie in [0, 1]",
                self.alpha
            )));
        }
        self.pipeline(None).validate()?;
        Ok(())
    }

    /// Pipeline settings; `given` supplies the estimates when the source is
    /// the ground truth.
    pub fn pipeline(&self, given: Option<Vec<dualcurr::ClassDistribution>>) -> PipelineConfig {
        use dualcurr::pipeline::EstimateSource;
        PipelineConfig {
            tau: self.tau,
            mu: self.mu,
            phase_count: self.phases,
            batch_size: self.batch_size,
            mode: self.mode,
            cumulative: self.cumulative,
            policy: self.policy,
            estimates: match (self.estimates, given) {
                (Estimates::LabeledPrior, _) => EstimateSource::LabeledPrior,
                (Estimates::GroundTruth, Some(g)) => EstimateSource::Given(g),
                _ => EstimateSource::CountRatio,
            },
            reestimate_each_phase: self.reestimate_each_phase,
            window: self.window,
            shuffle_seed: self.seed,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str, base: &Path) -> Outcome<Self> {
        let mut cfg: RunConfig =
            toml::from_str(text).map_err(|e| Failure::validation(format!("run config: {e}")))?;
        cfg.inputs.resolve(base);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Outcome<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Runtime(anyhow::anyhow!("reading {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml_str(&text, base)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run configs always serialize")
    }
}

impl Inputs {
    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.catalog);
        fix(&mut self.predictions);
        fix(&mut self.ground_truth);
        fix(&mut self.sidecar);
        if let Some(p) = &mut self.student_trace {
            fix(p);
        }
    }
}
