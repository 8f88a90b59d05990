//! Per-layer granularity autotuning.
//!
//! Plans are stored as text, one record per line:
//!
//! ```text
//! # comment
//! time <node-id> <g> <median-micros>
//! plan <node-id> <g>
//! ```
//!
//! Fields are separated by single spaces. Times are printed with the
//! shortest representation that parses back to the same `f64`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::arith::ArithMode;
use crate::conv::{conv_granular, enumerate_valid_g, Granularity, WeightBank};
use crate::network::{conv_site_inputs, forward, GranularityPlan, Model};
use crate::pool::WorkerPool;
use crate::tensor::Tensor3;

pub const DEFAULT_REPEATS: usize = 10;
pub const MIN_REPEATS: usize = 3;

#[derive(Debug, Error)]
pub enum TuneError {
    #[error(transparent)]
    Engine(#[from] crate::Error),

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("node `{node}`: no valid granularity for {layers} output layers (needs a multiple of 4)")]
    NoValidGranularity { node: String, layers: usize },

    #[error("node `{node}`: output with g={g} differs from g=1")]
    Divergent { node: String, g: usize },

    #[error("at least {MIN_REPEATS} repeats are needed, got {0}")]
    TooFewRepeats(usize),

    #[error("plan file line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// Median timings of one convolution for every valid granularity.
#[derive(Debug, Clone, PartialEq)]
pub struct TuneRow {
    pub node: String,
    /// `(g, median microseconds)` in increasing `g`.
    pub times: Vec<(Granularity, f64)>,
}

impl TuneRow {
    /// Fastest granularity; ties go to the smaller g.
    pub fn g_opt(&self) -> Option<Granularity> {
        self.times
            .iter()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|t| t.0)
    }

    /// Slowest granularity; ties go to the smaller g.
    pub fn g_pess(&self) -> Option<Granularity> {
        self.times
            .iter()
            .rev()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|t| t.0)
    }

    pub fn time_of(&self, g: usize) -> Option<f64> {
        self.times.iter().find(|t| t.0.get() == g).map(|t| t.1)
    }
}

/// Tuning results for a network plus its selected plan.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TuneTable {
    pub rows: Vec<TuneRow>,
    pub plan: GranularityPlan,
}

impl TuneTable {
    pub fn from_rows(rows: Vec<TuneRow>) -> Self {
        let mut plan = GranularityPlan::new();
        for row in &rows {
            if let Some(g) = row.g_opt() {
                plan.set(row.node.clone(), g);
            }
        }
        Self { rows, plan }
    }

    pub fn row(&self, node: &str) -> Option<&TuneRow> {
        self.rows.iter().find(|r| r.node == node)
    }

    /// Plan selecting the slowest measured g for every row.
    pub fn pessimal_plan(&self) -> GranularityPlan {
        let mut plan = GranularityPlan::new();
        for row in &self.rows {
            if let Some(g) = row.g_pess() {
                plan.set(row.node.clone(), g);
            }
        }
        plan
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# granularity tuning: time <node> <g> <median-micros>, plan <node> <g>\n");
        for row in &self.rows {
            for (g, t) in &row.times {
                writeln!(s, "time {} {} {}", row.node, g, t).unwrap();
            }
        }
        for (node, g) in self.plan.iter() {
            writeln!(s, "plan {node} {g}").unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, TuneError> {
        let mut rows: Vec<TuneRow> = Vec::new();
        let mut index: BTreeMap<String, usize> = BTreeMap::new();
        let mut plan = GranularityPlan::new();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let err = |reason: String| TuneError::Parse { line, reason };
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = trimmed.split_whitespace().collect();
            let g_of = |s: &str| -> Result<usize, TuneError> {
                match s.parse::<usize>() {
                    Ok(g) if g > 0 => Ok(g),
                    _ => Err(err(format!("bad granularity `{s}`"))),
                }
            };
            match fields.as_slice() {
                ["time", node, g, micros] => {
                    let g = g_of(g)?;
                    let t: f64 = micros
                        .parse()
                        .ok()
                        .filter(|t: &f64| t.is_finite() && *t >= 0.0)
                        .ok_or_else(|| err(format!("bad time `{micros}`")))?;
                    let i = *index.entry(node.to_string()).or_insert_with(|| {
                        rows.push(TuneRow {
                            node: node.to_string(),
                            times: Vec::new(),
                        });
                        rows.len() - 1
                    });
                    if rows[i].time_of(g).is_some() {
                        return Err(err(format!("duplicate time for {node} g={g}")));
                    }
                    rows[i].times.push((Granularity::unchecked(g), t));
                }
                ["plan", node, g] => plan.set(node.to_string(), Granularity::unchecked(g_of(g)?)),
                _ => return Err(err(format!("unrecognised record `{trimmed}`"))),
            }
        }
        Ok(Self { rows, plan })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TuneError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TuneError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

pub fn median(samples: &mut [f64]) -> f64 {
    assert!(!samples.is_empty(), "median of no samples");
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    }
}

fn micros(d: Duration) -> f64 {
    d.as_secs_f64() * 1e6
}

/// Times one convolution at every valid g: a discarded warm-up run, then
/// `repeats` timed runs summarised by their median. Outputs for every g
/// must match bit for bit.
pub fn tune_layer(
    pool: &WorkerPool,
    node: &str,
    bank: &WeightBank,
    sample: &Tensor3,
    repeats: usize,
    mode: ArithMode,
) -> Result<TuneRow, TuneError> {
    if repeats < MIN_REPEATS {
        return Err(TuneError::TooFewRepeats(repeats));
    }
    let layers = bank.spec().out_layers;
    let candidates = enumerate_valid_g(layers);
    if candidates.is_empty() {
        return Err(TuneError::NoValidGranularity {
            node: node.to_string(),
            layers,
        });
    }
    let run = |g| conv_granular(pool, sample, bank, g, mode).map_err(|e| e.at_node(node));
    let mut reference: Option<Tensor3> = None;
    let mut times = Vec::with_capacity(candidates.len());
    for g in candidates {
        let warm = run(g)?;
        match &reference {
            None => reference = Some(warm),
            Some(r) if r.bit_eq(&warm) => {}
            Some(_) => {
                return Err(TuneError::Divergent {
                    node: node.to_string(),
                    g: g.get(),
                })
            }
        }
        let mut samples: Vec<f64> = (0..repeats)
            .map(|_| {
                let t = Instant::now();
                let out = run(g);
                let elapsed = t.elapsed();
                out.map(|_| micros(elapsed))
            })
            .collect::<Result<_, _>>()?;
        times.push((g, median(&mut samples)));
    }
    Ok(TuneRow {
        node: node.to_string(),
        times,
    })
}

/// Tunes every convolution of `model` on the activations `input` produces.
pub fn tune_network(
    pool: &WorkerPool,
    model: &Model,
    input: &Tensor3,
    repeats: usize,
    mode: ArithMode,
) -> Result<TuneTable, TuneError> {
    tune_network_with(pool, model, input, repeats, mode, |_| {})
}

/// As [`tune_network`], calling `progress` after each finished row.
pub fn tune_network_with(
    pool: &WorkerPool,
    model: &Model,
    input: &Tensor3,
    repeats: usize,
    mode: ArithMode,
    mut progress: impl FnMut(&TuneRow),
) -> Result<TuneTable, TuneError> {
    if repeats < MIN_REPEATS {
        return Err(TuneError::TooFewRepeats(repeats));
    }
    let inputs = conv_site_inputs(pool, model, input)?;
    let banks = model.banks();
    let mut rows = Vec::with_capacity(banks.len());
    for ((id, bank), (input_id, sample)) in banks.iter().zip(&inputs) {
        debug_assert_eq!(id, input_id);
        let row = tune_layer(pool, id, bank, sample, repeats, mode)?;
        progress(&row);
        rows.push(row);
    }
    Ok(TuneTable::from_rows(rows))
}

/// Reuses the table stored at `path` when present; otherwise tunes and
/// writes it there. The flag reports whether measurement ran.
pub fn tune_network_cached(
    pool: &WorkerPool,
    model: &Model,
    input: &Tensor3,
    repeats: usize,
    mode: ArithMode,
    path: impl AsRef<Path>,
) -> Result<(TuneTable, bool), TuneError> {
    let path = path.as_ref();
    if path.exists() {
        let table = TuneTable::load(path)?;
        table.plan.validate(model.def())?;
        return Ok((table, false));
    }
    let table = tune_network(pool, model, input, repeats, mode)?;
    table.save(path)?;
    Ok((table, true))
}

/// Whole-network medians under the optimal and pessimal plans.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanComparison {
    pub optimal_ms: f64,
    pub pessimal_ms: f64,
}

impl PlanComparison {
    pub fn ratio(&self) -> f64 {
        self.pessimal_ms / self.optimal_ms
    }
}

pub fn compare_plans(
    pool: &WorkerPool,
    model: &Model,
    input: &Tensor3,
    table: &TuneTable,
    repeats: usize,
    mode: ArithMode,
) -> Result<PlanComparison, TuneError> {
    let time = |plan: &GranularityPlan| -> Result<f64, TuneError> {
        forward(pool, model, input, plan, mode)?;
        let mut samples = (0..repeats.max(1))
            .map(|_| forward(pool, model, input, plan, mode).map(|o| o.total.as_secs_f64() * 1e3))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(median(&mut samples))
    };
    Ok(PlanComparison {
        optimal_ms: time(&table.plan)?,
        pessimal_ms: time(&table.pessimal_plan())?,
    })
}
