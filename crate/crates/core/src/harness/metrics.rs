use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `A[t][j]`: test accuracy on task `j` after training through task `t`.
/// Sequential modes fill `j <= t`; reference mode fills the diagonal only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    cells: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        Self { cells: vec![vec![None; tasks]; tasks] }
    }

    /// Builds a full lower-triangular matrix from rows of length `t + 1`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let mut m = Self::new(rows.len());
        for (t, row) in rows.iter().enumerate() {
            if row.len() != t + 1 {
                return Err(Error::Shape { context: "accuracy matrix row".into(), dim: 1, expected: t + 1, actual: row.len() });
            }
            for (j, &v) in row.iter().enumerate() {
                m.set(t, j, v)?;
            }
        }
        Ok(m)
    }

    pub fn tasks(&self) -> usize {
        self.cells.len()
    }

    pub fn set(&mut self, t: usize, j: usize, value: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::Config(format!("accuracy {value} outside [0, 1]")));
        }
        if j > t || t >= self.tasks() {
            return Err(Error::Shape { context: "accuracy matrix cell".into(), dim: 1, expected: t, actual: j });
        }
        self.cells[t][j] = Some(value);
        Ok(())
    }

    pub fn get(&self, t: usize, j: usize) -> Option<f64> {
        self.cells.get(t).and_then(|r| r.get(j)).copied().flatten()
    }

    pub fn diagonal(&self) -> Vec<Option<f64>> {
        (0..self.tasks()).map(|t| self.get(t, t)).collect()
    }

    /// Last row, if every cell in it is filled.
    pub fn final_row(&self) -> Option<Vec<f64>> {
        self.cells.last()?.iter().copied().collect()
    }

    /// CSV with header `after_task,task_0,..`; unfilled cells are empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("after_task");
        for j in 0..self.tasks() {
            let _ = write!(out, ",task_{j}");
        }
        out.push('\n');
        for (t, row) in self.cells.iter().enumerate() {
            let _ = write!(out, "{t}");
            for cell in row {
                out.push(',');
                if let Some(v) = cell {
                    out.push_str(&fmt_value(*v));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Fixed six-decimal rendering used by every CSV the harness writes.
pub fn fmt_value(v: f64) -> String {
    format!("{v:.6}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingMetrics {
    /// Mean of the final row.
    pub avg_final_accuracy: f64,
    /// Mean of `per_task_drop` over every task but the last.
    pub avg_forgetting: f64,
    /// `A[j][j] − A[T−1][j]`.
    pub per_task_drop: Vec<f64>,
}

pub fn forgetting_metrics(matrix: &AccuracyMatrix) -> Result<ForgettingMetrics> {
    let t = matrix.tasks();
    let final_row = matrix.final_row().ok_or(Error::Empty("final accuracy row"))?;
    let diag: Vec<f64> = matrix
        .diagonal()
        .into_iter()
        .collect::<Option<_>>()
        .ok_or(Error::Empty("accuracy diagonal"))?;
    let per_task_drop: Vec<f64> = diag.iter().zip(&final_row).map(|(d, f)| d - f).collect();
    let avg_forgetting = if t > 1 { per_task_drop[..t - 1].iter().sum::<f64>() / (t - 1) as f64 } else { 0.0 };
    Ok(ForgettingMetrics {
        avg_final_accuracy: final_row.iter().sum::<f64>() / t as f64,
        avg_forgetting,
        per_task_drop,
    })
}

/// Mean final accuracy over every task but the last: what the model kept.
pub fn retained_accuracy(matrix: &AccuracyMatrix) -> Option<f64> {
    let row = matrix.final_row()?;
    if row.len() < 2 {
        return row.first().copied();
    }
    let kept = &row[..row.len() - 1];
    Some(kept.iter().sum::<f64>() / kept.len() as f64)
}

impl ForgettingMetrics {
    pub fn to_csv(&self, retained: Option<f64>) -> String {
        let mut out = String::from("metric,value\n");
        let _ = writeln!(out, "avg_final_accuracy,{}", fmt_value(self.avg_final_accuracy));
        let _ = writeln!(out, "avg_forgetting,{}", fmt_value(self.avg_forgetting));
        if let Some(r) = retained {
            let _ = writeln!(out, "retained_accuracy,{}", fmt_value(r));
        }
        for (j, d) in self.per_task_drop.iter().enumerate() {
            let _ = writeln!(out, "drop_task_{j},{}", fmt_value(*d));
        }
        out
    }
}

/// Metrics for reference runs, which only have own-task accuracies.
pub fn reference_metrics_csv(matrix: &AccuracyMatrix) -> String {
    let mut out = String::from("metric,value\n");
    let diag: Vec<f64> = matrix.diagonal().into_iter().flatten().collect();
    if !diag.is_empty() {
        let _ = writeln!(out, "avg_reference_accuracy,{}", fmt_value(diag.iter().sum::<f64>() / diag.len() as f64));
    }
    for (j, v) in diag.iter().enumerate() {
        let _ = writeln!(out, "reference_task_{j},{}", fmt_value(*v));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_forgetting_when_final_row_equals_diagonal() {
        let m = AccuracyMatrix::from_rows(&[vec![0.9], vec![0.9, 0.8]]).unwrap();
        let f = forgetting_metrics(&m).unwrap();
        assert_eq!(f.avg_forgetting, 0.0);
        assert_eq!(f.per_task_drop, vec![0.0, 0.0]);
    }

    #[test]
    fn drop_arithmetic() {
        let m = AccuracyMatrix::from_rows(&[vec![0.9], vec![0.6, 0.9]]).unwrap();
        let f = forgetting_metrics(&m).unwrap();
        assert!((f.per_task_drop[0] - 0.3).abs() < 1e-15);
        assert_eq!(f.per_task_drop[1], 0.0);
        assert!((f.avg_forgetting - 0.3).abs() < 1e-15);
        assert!((f.avg_final_accuracy - 0.75).abs() < 1e-15);
    }

    #[test]
    fn constant_matrix() {
        let m = AccuracyMatrix::from_rows(&[vec![0.75], vec![0.75, 0.75], vec![0.75, 0.75, 0.75]]).unwrap();
        let f = forgetting_metrics(&m).unwrap();
        assert_eq!(f.avg_final_accuracy, 0.75);
        assert_eq!(f.avg_forgetting, 0.0);
        assert!(f.per_task_drop.iter().all(|&d| d == 0.0));
        assert_eq!(retained_accuracy(&m), Some(0.75));
    }

    #[test]
    fn csv_layout() {
        let m = AccuracyMatrix::from_rows(&[vec![0.5], vec![0.25, 1.0]]).unwrap();
        assert_eq!(m.to_csv(), "after_task,task_0,task_1\n0,0.500000,\n1,0.250000,1.000000\n");
        let mut r = AccuracyMatrix::new(2);
        r.set(0, 0, 0.5).unwrap();
        r.set(1, 1, 0.75).unwrap();
        assert!(forgetting_metrics(&r).is_err());
        assert_eq!(reference_metrics_csv(&r), "metric,value\navg_reference_accuracy,0.625000\nreference_task_0,0.500000\nreference_task_1,0.750000\n");
    }

    #[test]
    fn out_of_range_cells_rejected() {
        let mut m = AccuracyMatrix::new(2);
        assert!(m.set(0, 1, 0.5).is_err());
        assert!(m.set(1, 0, 1.5).is_err());
    }
}
