//! End-to-end benchmark: sequential oracle against the strict and relaxed
//! vectorized executors, per node and in total.

use std::fmt::Write as _;

use thiserror::Error;

use crate::arith::ArithMode;
use crate::network::{forward, forward_sequential, ForwardOutput, GranularityPlan, Model};
use crate::pool::WorkerPool;
use crate::simd::fma_available;
use crate::tensor::Tensor3;
use crate::tuner::median;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub name: String,
    pub sequential_ms: f64,
    pub strict_ms: f64,
    pub relaxed_ms: f64,
}

impl BenchRow {
    pub fn strict_speedup(&self) -> f64 {
        self.sequential_ms / self.strict_ms
    }

    pub fn relaxed_speedup(&self) -> f64 {
        self.sequential_ms / self.relaxed_ms
    }
}

/// Per-node median times plus the median end-to-end wall time of each
/// executor. Model loading and image decoding are never timed.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    /// Ordered `key=value` facts about the machine that produced the report.
    pub machine: Vec<(String, String)>,
    pub rows: Vec<BenchRow>,
    pub wall: BenchRow,
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Engine(#[from] crate::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("report line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

pub fn machine_descriptor(threads: usize) -> Vec<(String, String)> {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|v| v.trim().to_string())
        })
        .unwrap_or_else(|| "unknown".into());
    vec![
        ("arch".into(), std::env::consts::ARCH.into()),
        ("os".into(), std::env::consts::OS.into()),
        ("cpu".into(), cpu),
        (
            "hardware_threads".into(),
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
                .to_string(),
        ),
        ("pool_threads".into(), threads.to_string()),
        ("fma".into(), fma_available().to_string()),
    ]
}

fn collect(
    repeats: usize,
    mut run: impl FnMut() -> crate::Result<ForwardOutput>,
) -> crate::Result<(Vec<String>, Vec<f64>, f64)> {
    run()?;
    let runs = (0..repeats.max(1)).map(|_| run()).collect::<crate::Result<Vec<_>>>()?;
    let names: Vec<String> = runs[0].timings.iter().map(|t| t.name.clone()).collect();
    let per_node = (0..names.len())
        .map(|i| {
            let mut v: Vec<f64> = runs
                .iter()
                .map(|r| r.timings[i].elapsed.as_secs_f64() * 1e3)
                .collect();
            median(&mut v)
        })
        .collect();
    let mut totals: Vec<f64> = runs.iter().map(|r| r.total.as_secs_f64() * 1e3).collect();
    Ok((names, per_node, median(&mut totals)))
}

/// Runs each executor once to warm up, then `repeats` times.
pub fn run_bench(
    pool: &WorkerPool,
    model: &Model,
    input: &Tensor3,
    plan: &GranularityPlan,
    repeats: usize,
) -> crate::Result<BenchReport> {
    plan.validate(model.def())?;
    let sequential = model.to_sequential();
    let (names, seq, seq_wall) = collect(repeats, || forward_sequential(&sequential, input))?;
    let (_, strict, strict_wall) =
        collect(repeats, || forward(pool, model, input, plan, ArithMode::Strict))?;
    let (_, relaxed, relaxed_wall) =
        collect(repeats, || forward(pool, model, input, plan, ArithMode::Relaxed))?;
    let rows = names
        .into_iter()
        .enumerate()
        .map(|(i, name)| BenchRow {
            name,
            sequential_ms: seq[i],
            strict_ms: strict[i],
            relaxed_ms: relaxed[i],
        })
        .collect();
    Ok(BenchReport {
        machine: machine_descriptor(pool.threads()),
        rows,
        wall: BenchRow {
            name: "wall".into(),
            sequential_ms: seq_wall,
            strict_ms: strict_wall,
            relaxed_ms: relaxed_wall,
        },
    })
}

const HEADER: [&str; 7] = [
    "row",
    "name",
    "sequential_ms",
    "strict_ms",
    "relaxed_ms",
    "strict_speedup",
    "relaxed_speedup",
];

impl BenchReport {
    /// Sum of the per-node rows.
    pub fn total(&self) -> BenchRow {
        let sum = |f: fn(&BenchRow) -> f64| self.rows.iter().map(f).sum();
        BenchRow {
            name: "total".into(),
            sequential_ms: sum(|r| r.sequential_ms),
            strict_ms: sum(|r| r.strict_ms),
            relaxed_ms: sum(|r| r.relaxed_ms),
        }
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.machine {
            writeln!(s, "# {k}: {v}").unwrap();
        }
        let width = self
            .rows
            .iter()
            .map(|r| r.name.len())
            .chain([5])
            .max()
            .unwrap_or(5);
        writeln!(
            s,
            "{:<width$}  {:>14}  {:>14}  {:>14}  {:>9}  {:>9}",
            "node", "sequential ms", "strict ms", "relaxed ms", "strict x", "relaxed x"
        )
        .unwrap();
        let total = self.total();
        for r in self.rows.iter().chain([&total, &self.wall]) {
            writeln!(
                s,
                "{:<width$}  {:>14.3}  {:>14.3}  {:>14.3}  {:>9.2}  {:>9.2}",
                r.name,
                r.sequential_ms,
                r.strict_ms,
                r.relaxed_ms,
                r.strict_speedup(),
                r.relaxed_speedup()
            )
            .unwrap();
        }
        s
    }

    /// CSV with `# key=value` machine lines first. Every number is printed
    /// exactly, so parsing and re-emitting reproduces the text.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.machine {
            writeln!(s, "# {k}={v}").unwrap();
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(HEADER).unwrap();
        let total = self.total();
        let tagged = self
            .rows
            .iter()
            .map(|r| ("node", r))
            .chain([("total", &total), ("wall", &self.wall)]);
        for (tag, r) in tagged {
            w.write_record([
                tag.to_string(),
                r.name.clone(),
                r.sequential_ms.to_string(),
                r.strict_ms.to_string(),
                r.relaxed_ms.to_string(),
                r.strict_speedup().to_string(),
                r.relaxed_speedup().to_string(),
            ])
            .unwrap();
        }
        s.push_str(&String::from_utf8(w.into_inner().unwrap()).unwrap());
        s
    }

    pub fn from_csv(text: &str) -> Result<Self, BenchError> {
        let mut machine = Vec::new();
        let mut body_start = 0;
        for (i, line) in text.lines().enumerate() {
            match line.strip_prefix("# ") {
                Some(kv) => {
                    let (k, v) = kv.split_once('=').ok_or_else(|| BenchError::Parse {
                        line: i + 1,
                        reason: "machine line without `=`".into(),
                    })?;
                    machine.push((k.to_string(), v.to_string()));
                    body_start += line.len() + 1;
                }
                None => break,
            }
        }
        let mut reader = csv::Reader::from_reader(&text.as_bytes()[body_start.min(text.len())..]);
        if reader.headers()?.iter().ne(HEADER) {
            return Err(BenchError::Parse {
                line: machine.len() + 1,
                reason: "unexpected header".into(),
            });
        }
        let mut rows = Vec::new();
        let mut wall = None;
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            let line = machine.len() + 2 + i;
            let num = |k: usize| -> Result<f64, BenchError> {
                rec[k].parse().map_err(|_| BenchError::Parse {
                    line,
                    reason: format!("bad number `{}`", &rec[k]),
                })
            };
            let row = BenchRow {
                name: rec[1].to_string(),
                sequential_ms: num(2)?,
                strict_ms: num(3)?,
                relaxed_ms: num(4)?,
            };
            let (s, r) = (num(5)?, num(6)?);
            if s.to_bits() != row.strict_speedup().to_bits()
                && !(s.is_nan() && row.strict_speedup().is_nan())
                || r.to_bits() != row.relaxed_speedup().to_bits()
                    && !(r.is_nan() && row.relaxed_speedup().is_nan())
            {
                return Err(BenchError::Parse {
                    line,
                    reason: "speedup column is not the ratio of the time columns".into(),
                });
            }
            match &rec[0] {
                "node" => rows.push(row),
                "total" => {}
                "wall" => wall = Some(row),
                other => {
                    return Err(BenchError::Parse {
                        line,
                        reason: format!("unknown row kind `{other}`"),
                    })
                }
            }
        }
        let wall = wall.ok_or_else(|| BenchError::Parse {
            line: 0,
            reason: "missing wall row".into(),
        })?;
        Ok(Self { machine, rows, wall })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> BenchReport {
        BenchReport {
            machine: vec![("arch".into(), "x86_64".into()), ("cpu".into(), "Test, CPU".into())],
            rows: vec![
                BenchRow {
                    name: "conv1".into(),
                    sequential_ms: 100.0,
                    strict_ms: 12.5,
                    relaxed_ms: 10.0,
                },
                BenchRow {
                    name: "fire2".into(),
                    sequential_ms: 0.1 + 0.2,
                    strict_ms: 1.0 / 3.0,
                    relaxed_ms: 0.07,
                },
            ],
            wall: BenchRow {
                name: "wall".into(),
                sequential_ms: 101.0,
                strict_ms: 13.0,
                relaxed_ms: 10.5,
            },
        }
    }

    #[test]
    fn csv_round_trip_is_identical() {
        let csv = sample().to_csv();
        let back = BenchReport::from_csv(&csv).unwrap();
        assert_eq!(back, sample());
        assert_eq!(back.to_csv(), csv);
    }

    #[test]
    fn speedups_are_ratios() {
        let r = &sample().rows[0];
        assert_eq!(r.strict_speedup(), 8.0);
        assert_eq!(r.relaxed_speedup(), 10.0);
        assert_eq!(sample().total().sequential_ms, 100.0 + (0.1 + 0.2));
    }

    #[test]
    fn table_and_csv_agree() {
        let rep = sample();
        let table = rep.to_table();
        for r in &rep.rows {
            let line = table.lines().find(|l| l.starts_with(&r.name)).unwrap();
            assert!(line.contains(&format!("{:.3}", r.sequential_ms)));
            assert!(line.contains(&format!("{:.2}", r.strict_speedup())));
        }
    }

    #[test]
    fn tampered_speedup_rejected() {
        let csv = sample().to_csv().replace(",8,", ",9,");
        assert!(BenchReport::from_csv(&csv).is_err());
    }
}
