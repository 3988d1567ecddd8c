use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Count,
    Rank,
    Multi,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Count => "count",
            Phase::Rank => "rank",
            Phase::Multi => "multi",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iteration: usize,
    pub phase: Phase,
    pub lr: f64,
    pub loss: f64,
    pub l_c: Option<f64>,
    pub l_r: Option<f64>,
    pub active_pairs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Number of completed iterations when the evaluation ran.
    pub iteration: usize,
    pub mae: f64,
    pub mse: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<IterRecord>,
    pub evals: Vec<EvalRecord>,
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl TrainLog {
    /// Contiguous runs of equal phase as `(phase, length)`.
    pub fn phase_runs(&self) -> Vec<(Phase, usize)> {
        let mut runs: Vec<(Phase, usize)> = Vec::new();
        for r in &self.records {
            match runs.last_mut() {
                Some((p, n)) if *p == r.phase => *n += 1,
                _ => runs.push((r.phase, 1)),
            }
        }
        runs
    }

    pub fn iterations_csv(&self) -> String {
        let mut out = String::from("iteration,phase,lr,loss,l_c,l_r,active_pairs\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.iteration,
                r.phase,
                r.lr,
                r.loss,
                opt(r.l_c),
                opt(r.l_r),
                opt(r.active_pairs)
            );
        }
        out
    }

    pub fn evals_csv(&self) -> String {
        let mut out = String::from("iteration,mae,mse\n");
        for e in &self.evals {
            let _ = writeln!(out, "{},{},{}", e.iteration, e.mae, e.mse);
        }
        out
    }

    /// Writes `train_log.csv` and `eval_log.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for (name, body) in [("train_log.csv", self.iterations_csv()), ("eval_log.csv", self.evals_csv())] {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Reads a `train_log.csv` written by [`TrainLog::write`].
    pub fn read_iterations(path: impl AsRef<Path>) -> Result<Vec<IterRecord>> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |line: usize| Error::Config(format!("{}:{}: malformed training log row", path.display(), line));
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad(i + 1));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(i + 1));
            let optn = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
            out.push(IterRecord {
                iteration: f[0].parse().map_err(|_| bad(i + 1))?,
                phase: match f[1] {
                    "count" => Phase::Count,
                    "rank" => Phase::Rank,
                    "multi" => Phase::Multi,
                    _ => return Err(bad(i + 1)),
                },
                lr: num(f[2])?,
                loss: num(f[3])?,
                l_c: optn(f[4])?,
                l_r: optn(f[5])?,
                active_pairs: if f[6].is_empty() { None } else { Some(f[6].parse().map_err(|_| bad(i + 1))?) },
            });
        }
        Ok(out)
    }
}
