//! Token error rate and the continual-learning summary metrics.
//!
//! `R[i][j]` is the WER (%) on task `j`'s test set after training task `i`
//! (`j <= i`, both 1-based). AVG is the mean of the final row, BWT the mean
//! change of earlier tasks since they were learned (negative = forgetting),
//! FWT the mean diagonal improvement over Fine-Tuning from task 2 on, and COV
//! the share of the Fine-Tuning to Separate-Model AVG gap a method closes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How task identity is resolved when evaluating.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EvalMode {
    #[serde(rename = "task_label")]
    TaskLabel,
    #[serde(rename = "conf-infer")]
    ConfInfer,
    #[serde(rename = "avg-apt")]
    AvgApt,
}

impl EvalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::TaskLabel => "task_label",
            EvalMode::ConfInfer => "conf-infer",
            EvalMode::AvgApt => "avg-apt",
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "task_label" | "task-label" => Ok(EvalMode::TaskLabel),
            "conf-infer" | "conf_infer" => Ok(EvalMode::ConfInfer),
            "avg-apt" | "avg_apt" => Ok(EvalMode::AvgApt),
            other => Err(Error::Config(format!("unknown evaluation mode '{other}'"))),
        }
    }
}

pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `100 * edit_distance / len(reference)`.
pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Invalid("wer needs a nonempty reference".into()));
    }
    Ok(100.0 * levenshtein(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Lower-triangular result matrix for one evaluation mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultMatrix {
    pub mode: EvalMode,
    rows: Vec<Vec<f64>>,
}

impl ResultMatrix {
    pub fn new(mode: EvalMode) -> Self {
        ResultMatrix { mode, rows: vec![] }
    }

    pub fn from_rows(mode: EvalMode, rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = ResultMatrix::new(mode);
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    /// Appends the evaluations made after training the next task.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let expected = self.rows.len() + 1;
        if row.len() != expected {
            return Err(Error::Invalid(format!(
                "row {expected} must hold {expected} entries, got {}",
                row.len()
            )));
        }
        if let Some(bad) = row.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Invalid(format!("invalid WER entry {bad}")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// `R[after][task]`, 1-based; `None` above the diagonal.
    pub fn get(&self, after: usize, task: usize) -> Option<f64> {
        if task == 0 || task > after {
            return None;
        }
        self.rows.get(after.checked_sub(1)?)?.get(task - 1).copied()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        self.rows.iter().enumerate().map(|(i, r)| r[i]).collect()
    }

    pub fn final_row(&self) -> Option<&[f64]> {
        self.rows.last().map(Vec::as_slice)
    }

    pub fn scaled(&self, k: f64) -> ResultMatrix {
        ResultMatrix {
            mode: self.mode,
            rows: self
                .rows
                .iter()
                .map(|r| r.iter().map(|v| v * k).collect())
                .collect(),
        }
    }
}

pub fn avg(r: &ResultMatrix) -> Result<f64> {
    let row = r
        .final_row()
        .ok_or_else(|| Error::Invalid("avg needs a final row".into()))?;
    Ok(row.iter().sum::<f64>() / row.len() as f64)
}

pub fn bwt(r: &ResultMatrix) -> Result<f64> {
    let t = r.num_tasks();
    if t < 2 {
        return Err(Error::Invalid("bwt needs at least two tasks".into()));
    }
    let last = &r.rows[t - 1];
    let total: f64 = (0..t - 1).map(|i| r.rows[i][i] - last[i]).sum();
    Ok(total / (t - 1) as f64)
}

/// `ft_diagonal` is Fine-Tuning's diagonal on the same task sequence.
pub fn fwt(r: &ResultMatrix, ft_diagonal: &[f64]) -> Result<f64> {
    let t = r.num_tasks();
    if ft_diagonal.len() != t {
        return Err(Error::Invalid(format!(
            "fwt: method has {t} tasks, fine-tuning diagonal has {}",
            ft_diagonal.len()
        )));
    }
    if t < 2 {
        return Err(Error::Invalid("fwt needs at least two tasks".into()));
    }
    let diag = r.diagonal();
    let total: f64 = (1..t).map(|i| ft_diagonal[i] - diag[i]).sum();
    Ok(total / (t - 1) as f64)
}

/// Percentage of the Fine-Tuning to Separate-Model AVG gap closed.
pub fn cov(avg_method: f64, avg_ft: f64, avg_sep: f64) -> Result<f64> {
    let gap = avg_ft - avg_sep;
    if gap == 0.0 {
        return Err(Error::UndefinedCov(avg_ft));
    }
    Ok(100.0 * (avg_ft - avg_method) / gap)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub avg: f64,
    pub bwt: Option<f64>,
    pub fwt: Option<f64>,
    pub cov: Option<f64>,
}

/// Reference runs that define FWT and COV.
#[derive(Clone, Copy, Debug, Default)]
pub struct Baselines<'a> {
    pub fine_tuning: Option<&'a ResultMatrix>,
    pub separate_model: Option<&'a ResultMatrix>,
}

pub fn summarize(r: &ResultMatrix, baselines: Baselines<'_>) -> Result<Summary> {
    let a = avg(r)?;
    let b = if r.num_tasks() >= 2 { Some(bwt(r)?) } else { None };
    let f = match baselines.fine_tuning {
        Some(ft) if r.num_tasks() >= 2 => Some(fwt(r, &ft.diagonal())?),
        _ => None,
    };
    let c = match (baselines.fine_tuning, baselines.separate_model) {
        (Some(ft), Some(sep)) => match cov(a, avg(ft)?, avg(sep)?) {
            Ok(v) => Some(v),
            Err(Error::UndefinedCov(_)) => None,
            Err(e) => return Err(e),
        },
        _ => None,
    };
    Ok(Summary {
        avg: a,
        bwt: b,
        fwt: f,
        cov: c,
    })
}
