use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default decay of the teacher average.
pub const DEFAULT_ALPHA: f64 = 0.9996;

/// Teacher parameters tracked as an exponential moving average of the
/// student's.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    teacher: Vec<f64>,
    alpha: f64,
    steps: u64,
}

impl EmaState {
    pub fn new(teacher: Vec<f64>, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("alpha = {alpha} must lie in [0, 1]")));
        }
        Ok(EmaState {
            teacher,
            alpha,
            steps: 0,
        })
    }

    /// `teacher = alpha * teacher + (1 - alpha) * student`, elementwise.
    pub fn update(&mut self, student: &[f64]) -> Result<()> {
        if student.len() != self.teacher.len() {
            return Err(Error::DimensionMismatch {
                expected: self.teacher.len(),
                got: student.len(),
            });
        }
        let keep = self.alpha;
        let take = 1.0 - self.alpha;
        for (t, s) in self.teacher.iter_mut().zip(student) {
            *t = keep * *t + take * s;
        }
        self.steps += 1;
        Ok(())
    }

    pub fn teacher(&self) -> &[f64] {
        &self.teacher
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }
}

/// Returns the updated state, leaving `state` untouched.
pub fn ema_update(state: &EmaState, student: &[f64]) -> Result<EmaState> {
    let mut next = state.clone();
    next.update(student)?;
    Ok(next)
}
