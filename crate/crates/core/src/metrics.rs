//! Accuracy matrix and the continual-learning summary metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `S[t][T']`: accuracy on task `t` after training through task `T'`
/// (0-based, defined for `T' ≥ t`).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AccuracyMatrix {
    cells: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        Self {
            cells: vec![vec![None; tasks]; tasks],
        }
    }

    /// Builds a matrix from rows; entries below the diagonal are ignored.
    pub fn from_rows(rows: Vec<Vec<Option<f64>>>) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::dim("accuracy matrix must be square"));
        }
        let mut m = Self::new(n);
        for (t, row) in rows.into_iter().enumerate() {
            for (tp, v) in row.into_iter().enumerate().skip(t) {
                if let Some(v) = v {
                    m.set(t, tp, v)?;
                }
            }
        }
        Ok(m)
    }

    pub fn tasks(&self) -> usize {
        self.cells.len()
    }

    pub fn set(&mut self, task: usize, after: usize, accuracy: f64) -> Result<()> {
        if task > after || after >= self.cells.len() {
            return Err(Error::dim(format!("S[{task}][{after}] is outside the upper triangle")));
        }
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(Error::input(format!("accuracy {accuracy} outside [0, 1]")));
        }
        self.cells[task][after] = Some(accuracy);
        Ok(())
    }

    pub fn get(&self, task: usize, after: usize) -> Option<f64> {
        self.cells.get(task).and_then(|r| r.get(after)).copied().flatten()
    }

    pub fn rows(&self) -> &[Vec<Option<f64>>] {
        &self.cells
    }

    fn need(&self, task: usize, after: usize) -> Result<f64> {
        self.get(task, after)
            .ok_or_else(|| Error::input(format!("S[{task}][{after}] has not been measured")))
    }
}

/// `A_T = (1/T) Σ_t S[t][T]` for `T` trained tasks.
pub fn average_accuracy(s: &AccuracyMatrix, tasks: usize) -> Result<f64> {
    if tasks == 0 || tasks > s.tasks() {
        return Err(Error::input(format!("cannot average over {tasks} tasks")));
    }
    let last = tasks - 1;
    let mut total = 0.0;
    for t in 0..tasks {
        total += s.need(t, last)?;
    }
    Ok(total / tasks as f64)
}

/// `F_T = (1/(T−1)) Σ_{t<T} max_{t ≤ t' < T} (S[t][t'] − S[t][T])`; absent
/// for fewer than two tasks. May be negative.
pub fn forgetting(s: &AccuracyMatrix, tasks: usize) -> Result<Option<f64>> {
    if tasks > s.tasks() {
        return Err(Error::input(format!("matrix covers only {} tasks", s.tasks())));
    }
    if tasks < 2 {
        return Ok(None);
    }
    let last = tasks - 1;
    let mut total = 0.0;
    for t in 0..last {
        let fin = s.need(t, last)?;
        let mut best = f64::NEG_INFINITY;
        for tp in t..last {
            best = best.max(s.need(t, tp)? - fin);
        }
        total += best;
    }
    Ok(Some(total / last as f64))
}
