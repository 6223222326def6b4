//! Monte-Carlo experiments: simulate, filter, score under 0-1 loss, aggregate.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::{
    run_filters, select_bandwidth, warm_up_end, FilterConfig, FilterRun, Methods, StepRecord,
};
use crate::model::{simulate, ModelSpec, SwitchingArModel, Trajectory};

/// Environment variable capping repeat-level parallelism (0 = all cores).
pub const THREADS_ENV: &str = "HMMAR_THREADS";

pub const SUMMARY_FILE: &str = "summary.csv";

fn default_burn_in() -> usize {
    100
}

fn default_stride() -> usize {
    1
}

fn default_tau() -> usize {
    2
}

/// Experiment definition, read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub n_total: usize,
    /// Inclusive 1-based range of indices that are scored.
    pub eval_window: [usize; 2],
    #[serde(default = "default_tau")]
    pub tau: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    pub repeats: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    #[serde(default)]
    pub mode: Methods,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| Error::ConfigParse {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Checks every field and builds the model.
    pub fn validate(&self) -> Result<SwitchingArModel> {
        let model = SwitchingArModel::from_spec(self.model.clone())?;
        let bad = |field, reason: String| Err(Error::InvalidConfig { field, reason });
        if self.tau == 0 {
            return bad("tau", "must be at least 1".into());
        }
        if self.stride == 0 {
            return bad("stride", "must be at least 1".into());
        }
        if self.repeats == 0 {
            return bad("repeats", "must be at least 1".into());
        }
        if self.n_total == 0 {
            return bad("n_total", "must be at least 1".into());
        }
        let [lo, hi] = self.eval_window;
        let warm_up = warm_up_end(model.order(), self.tau);
        if lo <= warm_up {
            return bad(
                "eval_window",
                format!("start {lo} must exceed the warm-up threshold {warm_up}"),
            );
        }
        if hi < lo {
            return bad("eval_window", format!("end {hi} precedes start {lo}"));
        }
        if hi > self.n_total {
            return bad(
                "eval_window",
                format!("end {hi} exceeds n_total {}", self.n_total),
            );
        }
        if self.seed.checked_add(self.repeats as u64 - 1).is_none() {
            return bad("seed", "seed + repeats overflows u64".into());
        }
        Ok(model)
    }

    pub fn eval_len(&self) -> usize {
        self.eval_window[1] + 1 - self.eval_window[0]
    }
}

/// Error rates of one repeat; `None` for methods that did not run.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RepeatErrors {
    pub optimal_filtering: Option<f64>,
    pub optimal_prediction: Option<f64>,
    pub nonparametric_filtering: Option<f64>,
    pub nonparametric_prediction: Option<f64>,
}

/// Everything produced by one repeat.
#[derive(Debug, Clone, PartialEq)]
pub struct RepeatRun {
    pub repeat: usize,
    pub seed: u64,
    pub trajectory: Trajectory,
    pub filters: FilterRun,
    pub errors: RepeatErrors,
}

/// Mean and standard error of an error rate across repeats.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorStat {
    pub mean: f64,
    pub stderr: f64,
    pub repeats: usize,
}

impl ErrorStat {
    pub fn from_samples(samples: &[f64]) -> Self {
        let r = samples.len();
        let mean = samples.iter().sum::<f64>() / r as f64;
        let stderr = if r > 1 {
            let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1) as f64;
            (var / r as f64).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            stderr,
            repeats: r,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ErrorSummary {
    pub optimal_filtering: Option<ErrorStat>,
    pub optimal_prediction: Option<ErrorStat>,
    pub nonparametric_filtering: Option<ErrorStat>,
    pub nonparametric_prediction: Option<ErrorStat>,
}

impl ErrorSummary {
    fn from_repeats(repeats: &[RepeatRun]) -> Self {
        let stat = |pick: fn(&RepeatErrors) -> Option<f64>| {
            let samples: Option<Vec<f64>> = repeats.iter().map(|r| pick(&r.errors)).collect();
            samples
                .filter(|s| !s.is_empty())
                .map(|s| ErrorStat::from_samples(&s))
        };
        Self {
            optimal_filtering: stat(|e| e.optimal_filtering),
            optimal_prediction: stat(|e| e.optimal_prediction),
            nonparametric_filtering: stat(|e| e.nonparametric_filtering),
            nonparametric_prediction: stat(|e| e.nonparametric_prediction),
        }
    }

    /// `(method, task, stat)` rows in output order.
    pub fn rows(&self) -> Vec<(&'static str, &'static str, ErrorStat)> {
        [
            ("optimal", "filtering", self.optimal_filtering),
            ("optimal", "prediction", self.optimal_prediction),
            ("nonparametric", "filtering", self.nonparametric_filtering),
            ("nonparametric", "prediction", self.nonparametric_prediction),
        ]
        .into_iter()
        .filter_map(|(m, t, s)| s.map(|s| (m, t, s)))
        .collect()
    }

    /// CSV text with header `method,task,mean_error,stderr,repeats`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,task,mean_error,stderr,repeats\n");
        for (method, task, s) in self.rows() {
            out.push_str(&format!(
                "{method},{task},{},{},{}\n",
                s.mean, s.stderr, s.repeats
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub summary: ErrorSummary,
    pub repeats: Vec<RepeatRun>,
}

impl ExperimentOutcome {
    pub fn fallback_count(&self) -> usize {
        self.repeats
            .iter()
            .map(|r| r.filters.fallback_count())
            .sum()
    }
}

fn error_rate<'a>(
    records: impl Iterator<Item = &'a StepRecord>,
    truth: &[usize],
    decision: impl Fn(&StepRecord) -> Option<usize>,
) -> Option<f64> {
    let mut total = 0usize;
    let mut wrong = 0usize;
    for r in records {
        let d = decision(r)?;
        total += 1;
        if d != truth[r.n - 1] {
            wrong += 1;
        }
    }
    (total > 0).then(|| wrong as f64 / total as f64)
}

/// Runs repeat `r` with seed `config.seed + r`.
pub fn run_repeat(
    config: &ExperimentConfig,
    model: &SwitchingArModel,
    repeat: usize,
) -> Result<RepeatRun> {
    let seed = config.seed + repeat as u64;
    let full = simulate(model, config.n_total, config.burn_in, seed);
    let [lo, hi] = config.eval_window;
    let bandwidth = if config.mode.nonparametric() {
        Some(select_bandwidth(&full.x, config.tau, config.stride)?)
    } else {
        None
    };
    let trajectory = full.truncated(hi);
    let filter_config = FilterConfig {
        tau: config.tau,
        stride: config.stride,
        eval_start: lo,
        bandwidth,
        methods: config.mode,
    };
    let filters = run_filters(&trajectory, model, &filter_config)?;
    let s = &trajectory.s;
    let recs = || filters.records.iter();
    let errors = RepeatErrors {
        optimal_filtering: error_rate(recs(), s, |r| {
            r.optimal.as_ref().map(|o| o.output.filtered_state)
        }),
        optimal_prediction: error_rate(recs(), s, |r| {
            r.optimal.as_ref().map(|o| o.output.predicted_state)
        }),
        nonparametric_filtering: error_rate(recs(), s, |r| {
            r.nonparametric.as_ref().map(|o| o.output.filtered_state)
        }),
        nonparametric_prediction: error_rate(recs(), s, |r| {
            r.nonparametric.as_ref().map(|o| o.output.predicted_state)
        }),
    };
    let fallbacks = filters.fallback_count();
    if fallbacks > 0 {
        log::info!("repeat {repeat} (seed {seed}): {fallbacks} QP steps used the projected-gradient fallback");
    }
    log::debug!(
        "repeat {repeat} (seed {seed}): bandwidth {:?}, errors {errors:?}",
        filters.bandwidth
    );
    Ok(RepeatRun {
        repeat,
        seed,
        trajectory,
        filters,
        errors,
    })
}

/// Reads [`THREADS_ENV`]; unset or unparsable means 0 (automatic).
pub fn threads_from_env() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(0)
}

/// Runs all repeats on up to `threads` worker threads (0 = automatic).
/// Results are ordered by repeat index, so they do not depend on scheduling.
pub fn run_experiment(config: &ExperimentConfig, threads: usize) -> Result<ExperimentOutcome> {
    let model = config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("failed to build thread pool");
    let repeats = pool.install(|| {
        (0..config.repeats)
            .into_par_iter()
            .map(|r| run_repeat(config, &model, r))
            .collect::<Result<Vec<_>>>()
    })?;
    let summary = ErrorSummary::from_repeats(&repeats);
    Ok(ExperimentOutcome { summary, repeats })
}

fn csv_error(path: &Path) -> impl FnOnce(csv::Error) -> Error + '_ {
    move |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    }
}

/// Trace CSV column names for `m` states.
pub fn trace_header(m: usize) -> Vec<String> {
    let mut header: Vec<String> = [
        "n",
        "s_true",
        "x",
        "s_opt_filter",
        "s_np_filter",
        "s_opt_pred",
        "s_np_pred",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((1..=m).map(|k| format!("post_opt_{k}")));
    header.extend((1..=m).map(|k| format!("post_np_{k}")));
    header
}

/// Writes one row per record. States are printed 1-based; fields of a method
/// that did not run are left empty.
pub fn emit_trace(
    trajectory: &Trajectory,
    records: &[StepRecord],
    m: usize,
    path: &Path,
) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(csv_error(path))?;
    w.write_record(trace_header(m)).map_err(csv_error(path))?;
    let state = |s: Option<usize>| s.map_or(String::new(), |s| (s + 1).to_string());
    for r in records {
        let opt = r.optimal.as_ref();
        let np = r.nonparametric.as_ref();
        let mut row = vec![
            r.n.to_string(),
            (trajectory.s[r.n - 1] + 1).to_string(),
            trajectory.x[r.n - 1].to_string(),
            state(opt.map(|o| o.output.filtered_state)),
            state(np.map(|o| o.output.filtered_state)),
            state(opt.map(|o| o.output.predicted_state)),
            state(np.map(|o| o.output.predicted_state)),
        ];
        let posterior = |p: Option<&Vec<f64>>| -> Vec<String> {
            match p {
                Some(v) => v.iter().map(f64::to_string).collect(),
                None => vec![String::new(); m],
            }
        };
        row.extend(posterior(opt.map(|o| &o.state.posterior)));
        row.extend(posterior(np.map(|o| &o.state.posterior)));
        w.write_record(&row).map_err(csv_error(path))?;
    }
    w.flush().map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `summary.csv` (and `trace_<r>.csv` per repeat when `traces` is set) into `dir`.
pub fn write_outputs(outcome: &ExperimentOutcome, dir: &Path, traces: bool) -> Result<PathBuf> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| Error::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let summary_path = dir.join(SUMMARY_FILE);
    fs::write(&summary_path, outcome.summary.to_csv()).map_err(io(&summary_path))?;
    if traces {
        for rep in &outcome.repeats {
            let m = rep
                .filters
                .records
                .first()
                .and_then(|r| {
                    r.optimal
                        .as_ref()
                        .map(|o| o.state.posterior.len())
                        .or_else(|| r.nonparametric.as_ref().map(|o| o.state.posterior.len()))
                })
                .unwrap_or(0);
            let path = dir.join(format!("trace_{}.csv", rep.repeat));
            emit_trace(&rep.trajectory, &rep.filters.records, m, &path)?;
        }
    }
    Ok(summary_path)
}
