//! Result tables: one row per (method, evaluation mode).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::methods::Method;
use crate::metrics::{summarize, Baselines, EvalMode, ResultMatrix, Summary};

/// Parameter accounting of one method's model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Storage {
    pub shared_params: usize,
    pub bank_params: Option<usize>,
    /// Tasks until the banks hold as many parameters as the shared model.
    pub tasks_to_double: Option<f64>,
}

impl Storage {
    pub fn new(shared_params: usize, bank_params: Option<usize>) -> Self {
        Storage {
            shared_params,
            bank_params,
            tasks_to_double: bank_params.map(|b| shared_params as f64 / b as f64),
        }
    }
}

/// Matrices of one method trained with one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodRun {
    pub method: Method,
    pub seed: u64,
    pub config_hash: String,
    pub matrices: Vec<ResultMatrix>,
    pub storage: Storage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub summary: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: Method,
    pub label: String,
    pub mode: EvalMode,
    pub needs_task_label: bool,
    pub seeds: Vec<u64>,
    /// Final-model WER per task, averaged over seeds.
    pub final_wer: Vec<f64>,
    pub avg: f64,
    pub bwt: Option<f64>,
    pub fwt: Option<f64>,
    pub cov: Option<f64>,
    pub per_seed: Vec<SeedSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_hashes: Vec<String>,
    pub num_tasks: usize,
    pub rows: Vec<ReportRow>,
    pub storage: BTreeMap<String, Storage>,
    pub notices: Vec<String>,
}

fn mean_matrix(ms: &[&ResultMatrix]) -> Result<ResultMatrix> {
    let first = ms[0];
    let n = ms.len() as f64;
    let rows = (0..first.num_tasks())
        .map(|i| {
            (0..=i)
                .map(|j| ms.iter().map(|m| m.rows()[i][j]).sum::<f64>() / n)
                .collect()
        })
        .collect();
    ResultMatrix::from_rows(first.mode, rows)
}

fn find(runs: &[MethodRun], method: Method, seed: Option<u64>) -> Vec<&ResultMatrix> {
    runs.iter()
        .filter(|r| r.method == method && seed.is_none_or(|s| r.seed == s))
        .filter_map(|r| r.matrices.iter().find(|m| m.mode == EvalMode::TaskLabel))
        .collect()
}

pub fn emit_report(runs: &[MethodRun]) -> Result<Report> {
    let first = runs
        .first()
        .ok_or_else(|| Error::Invalid("report needs at least one run".into()))?;
    let num_tasks = first
        .matrices
        .first()
        .map(ResultMatrix::num_tasks)
        .ok_or_else(|| Error::Invalid("run without result matrices".into()))?;
    for r in runs {
        for m in &r.matrices {
            if m.num_tasks() != num_tasks {
                return Err(Error::Invalid(format!(
                    "{} (seed {}) covers {} tasks, expected {num_tasks}",
                    r.method,
                    r.seed,
                    m.num_tasks()
                )));
            }
        }
    }

    let mut notices = vec![];
    let ft_all = find(runs, Method::FineTune, None);
    let sep_all = find(runs, Method::SepModel, None);
    let ft_mean = if ft_all.is_empty() { None } else { Some(mean_matrix(&ft_all)?) };
    let sep_mean = if sep_all.is_empty() { None } else { Some(mean_matrix(&sep_all)?) };
    if ft_mean.is_none() {
        notices.push("FWT and COV omitted: no Fine-Tuning run".to_string());
    } else if sep_mean.is_none() {
        notices.push("COV omitted: no Sep. Model run".to_string());
    }

    let mut groups: BTreeMap<(Method, EvalMode), Vec<(u64, &ResultMatrix)>> = BTreeMap::new();
    let mut storage = BTreeMap::new();
    let mut hashes: Vec<String> = vec![];
    for r in runs {
        for m in &r.matrices {
            groups.entry((r.method, m.mode)).or_default().push((r.seed, m));
        }
        storage.insert(r.method.label().to_string(), r.storage.clone());
        if !hashes.contains(&r.config_hash) {
            hashes.push(r.config_hash.clone());
        }
    }

    let mut rows = vec![];
    for ((method, mode), mut entries) in groups {
        entries.sort_by_key(|e| e.0);
        let ms: Vec<&ResultMatrix> = entries.iter().map(|e| e.1).collect();
        let mean = mean_matrix(&ms)?;
        let summary = summarize(
            &mean,
            Baselines {
                fine_tuning: ft_mean.as_ref(),
                separate_model: sep_mean.as_ref(),
            },
        )?;
        if ft_mean.is_some() && sep_mean.is_some() && summary.cov.is_none() {
            notices.push(format!("COV undefined for {method} ({mode}): Fine-Tuning and Sep. Model AVG coincide"));
        }
        let mut per_seed = vec![];
        for (seed, m) in &entries {
            let ft = find(runs, Method::FineTune, Some(*seed));
            let sep = find(runs, Method::SepModel, Some(*seed));
            let s = summarize(
                m,
                Baselines {
                    fine_tuning: ft.first().copied(),
                    separate_model: sep.first().copied(),
                },
            )?;
            per_seed.push(SeedSummary { seed: *seed, summary: s });
        }
        rows.push(ReportRow {
            method,
            label: method.label().to_string(),
            mode,
            needs_task_label: method.needs_task_label(mode),
            seeds: entries.iter().map(|e| e.0).collect(),
            final_wer: mean.final_row().expect("nonempty").to_vec(),
            avg: summary.avg,
            bwt: summary.bwt,
            fwt: summary.fwt,
            cov: summary.cov,
            per_seed,
        });
    }
    Ok(Report {
        config_hashes: hashes,
        num_tasks,
        rows,
        storage,
        notices,
    })
}

/// One decimal, rounding the exact binary value half to even.
pub fn round1(x: f64) -> String {
    format!("{x:.1}")
}

fn cell(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), round1)
}

impl Report {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut header = format!("{:<13} {:<4} {:<11}", "Model", "NTL", "Mode");
        for t in 1..=self.num_tasks {
            let _ = write!(header, " {:>7}", format!("T{t}"));
        }
        for c in ["AVG", "BWT", "FWT", "COV"] {
            let _ = write!(header, " {c:>7}");
        }
        s.push_str(&header);
        s.push('\n');
        s.push_str(&"-".repeat(header.len()));
        s.push('\n');
        for r in &self.rows {
            let ntl = if r.needs_task_label { "yes" } else { "no" };
            let _ = write!(s, "{:<13} {:<4} {:<11}", r.label, ntl, r.mode.as_str());
            for w in &r.final_wer {
                let _ = write!(s, " {:>7}", round1(*w));
            }
            for v in [Some(r.avg), r.bwt, r.fwt, r.cov] {
                let _ = write!(s, " {:>7}", cell(v));
            }
            s.push('\n');
        }
        if !self.storage.is_empty() {
            s.push_str("\nStorage\n");
            for (label, st) in &self.storage {
                let _ = write!(s, "{label:<13} shared {:>9}", st.shared_params);
                if let (Some(b), Some(t)) = (st.bank_params, st.tasks_to_double) {
                    let _ = write!(s, "  per-task bank {b:>7}  tasks to double {}", round1(t));
                }
                s.push('\n');
            }
        }
        if !self.notices.is_empty() {
            s.push_str("\nNotes\n");
            for n in &self.notices {
                let _ = writeln!(s, "- {n}");
            }
        }
        let _ = writeln!(s, "\nconfig {}", self.config_hashes.join(", "));
        s
    }

    pub fn to_json(&self) -> Result<String> {
        let mut j = serde_json::to_string_pretty(self)?;
        j.push('\n');
        Ok(j)
    }
}
