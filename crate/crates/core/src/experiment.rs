//! Single trials and seeded Monte Carlo sweeps over `(m, sigma)`.
//!
//! Every trial draws its instance from `mix_seed(base_seed, m, sigma_index,
//! trial_index)`, so results do not depend on scheduling. Trials inside a
//! grid cell run in parallel; records are written in trial order and flushed
//! once per cell, which is also the granularity of `--resume`.

use std::collections::{BTreeMap, HashSet};
use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blockmat::BlockPartition;
use crate::certificate::{
    build_decomposition, certify_decomposition, corollary_condition, deterministic_condition, lemma5_bounds,
    lemma7_bounds, observed_perturbation, sigma_star, Variant,
};
use crate::error::{OtsmError, Result};
use crate::model::{assemble, mix_seed, random_stiefel, sample_noise, ProblemInstance};
use crate::sdp::{solve_sdp, tightness_gap, SdpConfig};
use crate::solver::{align, solve, SolverConfig};

/// Allowed negative slack when checking an inequality `lhs <= rhs`.
pub const BOUND_SLACK: f64 = 1e-8;
/// SDP cross-checks are skipped above this total dimension.
pub const MAX_SDP_DIM: usize = 300;

const TRUTH_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;

pub fn bound_holds(lhs: f64, rhs: f64) -> bool {
    lhs - rhs <= BOUND_SLACK
}

pub fn trial_seed(base_seed: u64, m: usize, sigma_index: usize, trial_index: usize) -> u64 {
    mix_seed(&[base_seed, m as u64, sigma_index as u64, trial_index as u64])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialParams {
    pub m: usize,
    pub d: usize,
    pub r: usize,
    pub sigma: f64,
    pub sigma_index: usize,
    pub trial_index: usize,
    pub seed: u64,
}

impl TrialParams {
    /// Random ground truth and noise, each from its own stream of `seed`.
    pub fn instance(&self) -> Result<ProblemInstance> {
        let p = BlockPartition::uniform(self.m, self.d, self.r)?;
        let truth = random_stiefel(&p, mix_seed(&[self.seed, TRUTH_STREAM]));
        let noise = sample_noise(&p, self.sigma, mix_seed(&[self.seed, NOISE_STREAM]))?;
        Ok(assemble(truth, noise)?.with_metadata(Some(self.sigma), self.seed))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdpMode {
    Off,
    Cold,
    /// Start from the solver output.
    Warm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialOptions {
    pub solver: SolverConfig,
    pub sdp: SdpConfig,
    pub sdp_mode: SdpMode,
}

impl Default for TrialOptions {
    fn default() -> Self {
        TrialOptions { solver: SolverConfig::default(), sdp: SdpConfig::default(), sdp_mode: SdpMode::Off }
    }
}

/// One CSV row. Every `*_ok` / `*_holds` column is a pure function of the
/// scalar columns next to it (see [`TrialRecord::flags_consistent`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub m: usize,
    pub d: usize,
    pub r: usize,
    pub sigma_index: usize,
    pub sigma: f64,
    pub trial_index: usize,
    pub seed: u64,
    pub w_norm: f64,
    pub sigma_star: f64,

    pub objective: f64,
    pub sweeps: usize,
    pub stationarity: f64,
    pub converged: bool,

    /// False when the solver did not converge and no certificate was built.
    pub certified_attempted: bool,
    pub cert_valid: bool,
    pub lambda_min_blocks: Option<f64>,
    pub c: Option<f64>,
    pub lambda_complement: Option<f64>,

    pub eq4_lhs: f64,
    pub eq4_rhs: f64,
    pub eq4_holds: bool,
    pub eq4_lemma7_rhs: f64,
    pub eq4_lemma7_holds: bool,
    pub corollary_rhs: f64,
    pub corollary_holds: bool,

    pub align_error: Option<f64>,
    pub align_error_blockwise: Option<f64>,
    pub lemma7_global_bound: f64,
    pub lemma7_global_ok: Option<bool>,
    pub wv_aligned_max: Option<f64>,
    pub lemma7_wv_bound: f64,
    pub lemma7_wv_ok: Option<bool>,
    pub lemma7_blockwise_bound: f64,
    pub lemma7_blockwise_ok: Option<bool>,
    pub lemma5_t1_gap: Option<f64>,
    pub lemma5_bound1: Option<f64>,
    pub lemma5_bound1_ok: Option<bool>,
    /// `min_i (bound2_i - ||Λ_i - (m - 1) I||)`.
    pub lemma5_bound2_slack: Option<f64>,
    pub lemma5_bound2_ok: Option<bool>,

    pub sdp_ran: bool,
    pub sdp_skip_reason: Option<String>,
    pub sdp_gap: Option<f64>,
    pub sdp_rank: Option<usize>,
    pub sdp_objective: Option<f64>,
    pub sdp_primal_residual: Option<f64>,
    pub sdp_dual_residual: Option<f64>,
    pub sdp_iterations: Option<usize>,
    pub sdp_converged: Option<bool>,

    pub time_generate_ms: f64,
    pub time_solve_ms: f64,
    pub time_certify_ms: f64,
    pub time_sdp_ms: f64,
}

fn ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

fn flag(lhs: Option<f64>, rhs: f64) -> Option<bool> {
    lhs.map(|l| bound_holds(l, rhs))
}

impl TrialRecord {
    /// Recomputes every flag from the stored scalars.
    pub fn flags_consistent(&self) -> bool {
        let opt_eq = |stored: Option<bool>, derived: Option<bool>| stored == derived;
        self.eq4_holds == (self.eq4_lhs > self.eq4_rhs)
            && self.eq4_lemma7_holds == (self.eq4_lhs > self.eq4_lemma7_rhs)
            && self.corollary_holds == (self.eq4_lhs > self.corollary_rhs)
            && self.certified_attempted == self.converged
            && opt_eq(self.lemma7_global_ok, flag(self.align_error, self.lemma7_global_bound))
            && opt_eq(self.lemma7_wv_ok, flag(self.wv_aligned_max, self.lemma7_wv_bound))
            && opt_eq(self.lemma7_blockwise_ok, flag(self.align_error_blockwise, self.lemma7_blockwise_bound))
            && opt_eq(
                self.lemma5_bound1_ok,
                self.lemma5_t1_gap.zip(self.lemma5_bound1).map(|(g, b)| bound_holds(g, b)),
            )
            && opt_eq(self.lemma5_bound2_ok, self.lemma5_bound2_slack.map(|s| s >= -BOUND_SLACK))
            && (!self.cert_valid
                || self.lambda_min_blocks.zip(self.c).is_some_and(|(l, c)| l > c)
                    && self.lambda_complement.is_some_and(|x| x < 0.0))
    }

    /// Whether every perturbation bound that applies holds (`None` when the
    /// trial was not certified).
    pub fn bounds_hold(&self) -> Option<bool> {
        if !self.cert_valid {
            return None;
        }
        Some(
            [self.lemma7_global_ok, self.lemma7_wv_ok, self.lemma5_bound1_ok, self.lemma5_bound2_ok]
                .iter()
                .all(|f| f.unwrap_or(false)),
        )
    }
}

pub fn run_trial(params: &TrialParams, options: &TrialOptions) -> Result<TrialRecord> {
    let t0 = Instant::now();
    let inst = params.instance()?;
    let truth = inst.truth().expect("generated instances carry a truth").clone();
    let noise = inst.noise().expect("generated instances carry noise").clone();
    let time_generate_ms = ms(t0);

    let t0 = Instant::now();
    let sol = solve(&inst, &options.solver)?;
    let time_solve_ms = ms(t0);

    let t0 = Instant::now();
    let eq4 = deterministic_condition(&noise, &truth, Variant::AsStated)?;
    let eq4_l7 = deterministic_condition(&noise, &truth, Variant::Lemma7Consistent)?;
    let corollary = corollary_condition(params.m, params.d, params.r, params.sigma)?;
    let b7 = lemma7_bounds(&noise, &truth)?;
    let stat_tol = options.solver.stat_tol;

    let mut rec = TrialRecord {
        m: params.m,
        d: params.d,
        r: params.r,
        sigma_index: params.sigma_index,
        sigma: params.sigma,
        trial_index: params.trial_index,
        seed: params.seed,
        w_norm: eq4.terms["w_norm"],
        sigma_star: sigma_star(params.m, params.d, params.r),
        objective: sol.objective,
        sweeps: sol.sweeps,
        stationarity: sol.stationarity,
        converged: sol.converged,
        certified_attempted: false,
        cert_valid: false,
        lambda_min_blocks: None,
        c: None,
        lambda_complement: None,
        eq4_lhs: eq4.lhs,
        eq4_rhs: eq4.rhs,
        eq4_holds: eq4.holds,
        eq4_lemma7_rhs: eq4_l7.rhs,
        eq4_lemma7_holds: eq4_l7.holds,
        corollary_rhs: corollary.condition.rhs,
        corollary_holds: corollary.condition.holds,
        align_error: None,
        align_error_blockwise: None,
        lemma7_global_bound: b7.b_global,
        lemma7_global_ok: None,
        wv_aligned_max: None,
        lemma7_wv_bound: b7.b_wv,
        lemma7_wv_ok: None,
        lemma7_blockwise_bound: b7.b_blockwise,
        lemma7_blockwise_ok: None,
        lemma5_t1_gap: None,
        lemma5_bound1: None,
        lemma5_bound1_ok: None,
        lemma5_bound2_slack: None,
        lemma5_bound2_ok: None,
        sdp_ran: false,
        sdp_skip_reason: None,
        sdp_gap: None,
        sdp_rank: None,
        sdp_objective: None,
        sdp_primal_residual: None,
        sdp_dual_residual: None,
        sdp_iterations: None,
        sdp_converged: None,
        time_generate_ms,
        time_solve_ms,
        time_certify_ms: 0.0,
        time_sdp_ms: 0.0,
    };

    if sol.converged {
        let aligned = align(&truth, &sol.stack)?;
        let decomp = build_decomposition(inst.coupling(), &aligned, stat_tol)?;
        let cert = certify_decomposition(&decomp, &aligned, inst.coupling().frobenius_norm(), stat_tol)?;
        let obs = observed_perturbation(&noise, &truth, &aligned, &decomp)?;
        let b5 = lemma5_bounds(&noise, &truth, &aligned)?;
        let slack2 = b5
            .bound2
            .iter()
            .zip(&obs.lambda_gaps)
            .map(|(b, g)| b - g)
            .fold(f64::INFINITY, f64::min);

        rec.certified_attempted = true;
        rec.cert_valid = cert.valid;
        rec.lambda_min_blocks = Some(cert.lambda_min_blocks);
        rec.c = Some(cert.c);
        rec.lambda_complement = Some(cert.lambda_complement);
        rec.align_error = Some(obs.global_error);
        rec.align_error_blockwise = Some(obs.blockwise_error);
        rec.lemma7_global_ok = flag(rec.align_error, b7.b_global);
        rec.wv_aligned_max = Some(obs.wv_block_max);
        rec.lemma7_wv_ok = flag(rec.wv_aligned_max, b7.b_wv);
        rec.lemma7_blockwise_ok = flag(rec.align_error_blockwise, b7.b_blockwise);
        rec.lemma5_t1_gap = Some(obs.t1_gap);
        rec.lemma5_bound1 = Some(b5.bound1);
        rec.lemma5_bound1_ok = Some(bound_holds(obs.t1_gap, b5.bound1));
        rec.lemma5_bound2_slack = Some(slack2);
        rec.lemma5_bound2_ok = Some(slack2 >= -BOUND_SLACK);
    }
    rec.time_certify_ms = ms(t0);

    let dim = params.m * params.d;
    match options.sdp_mode {
        SdpMode::Off => {}
        _ if dim > MAX_SDP_DIM => {
            rec.sdp_skip_reason = Some(format!("D = {dim} exceeds {MAX_SDP_DIM}"));
        }
        mode => {
            let t0 = Instant::now();
            let warm = (mode == SdpMode::Warm).then_some(&sol.stack);
            let sdp = solve_sdp(&inst, &options.sdp, warm)?;
            rec.sdp_ran = true;
            rec.sdp_gap = Some(tightness_gap(&sdp.u, &sol.stack)?);
            rec.sdp_rank = Some(sdp.numerical_rank);
            rec.sdp_objective = Some(sdp.objective);
            rec.sdp_primal_residual = Some(sdp.primal_residual);
            rec.sdp_dual_residual = Some(sdp.dual_residual);
            rec.sdp_iterations = Some(sdp.iterations);
            rec.sdp_converged = Some(sdp.converged);
            rec.time_sdp_ms = ms(t0);
        }
    }
    Ok(rec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaScale {
    Absolute,
    /// Grid values are multiples of the closed-form threshold for each `m`.
    SigmaStar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub m_values: Vec<usize>,
    pub d: usize,
    pub r: usize,
    pub sigma_values: Vec<f64>,
    pub sigma_scale: SigmaScale,
    pub trials_per_cell: usize,
    pub base_seed: u64,
    pub run_sdp: bool,
    pub output_path: PathBuf,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_values.is_empty() || self.sigma_values.is_empty() {
            return Err(OtsmError::InvalidConfig("m and sigma grids must be non-empty".into()));
        }
        if self.trials_per_cell == 0 {
            return Err(OtsmError::InvalidConfig("trials per cell must be at least 1".into()));
        }
        if let Some(bad) = self.sigma_values.iter().find(|s| !(**s >= 0.0) || !s.is_finite()) {
            return Err(OtsmError::InvalidConfig(format!("sigma values must be finite and nonnegative, got {bad}")));
        }
        for &m in &self.m_values {
            BlockPartition::uniform(m, self.d, self.r)?;
        }
        Ok(())
    }

    pub fn sigma_for(&self, m: usize, sigma_index: usize) -> f64 {
        let v = self.sigma_values[sigma_index];
        match self.sigma_scale {
            SigmaScale::Absolute => v,
            SigmaScale::SigmaStar => v * sigma_star(m, self.d, self.r),
        }
    }

    pub fn summary_path(&self) -> PathBuf {
        self.output_path.with_extension("summary.csv")
    }

    fn trial_params(&self, m: usize, sigma_index: usize, trial_index: usize) -> TrialParams {
        TrialParams {
            m,
            d: self.d,
            r: self.r,
            sigma: self.sigma_for(m, sigma_index),
            sigma_index,
            trial_index,
            seed: trial_seed(self.base_seed, m, sigma_index, trial_index),
        }
    }
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<TrialRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| OtsmError::io(path, e))?;
    csv::Reader::from_reader(file)
        .deserialize()
        .collect::<std::result::Result<Vec<TrialRecord>, _>>()
        .map_err(OtsmError::from)
}

/// Complete rows of a possibly interrupted record file; a torn final row is
/// dropped.
fn read_complete_records(path: &Path) -> Result<Vec<TrialRecord>> {
    let file = File::open(path).map_err(|e| OtsmError::io(path, e))?;
    let mut out = Vec::new();
    let mut iter = csv::Reader::from_reader(file).into_deserialize::<TrialRecord>().peekable();
    while let Some(row) = iter.next() {
        match row {
            Ok(rec) => out.push(rec),
            Err(_) if iter.peek().is_none() => break,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub m: usize,
    pub sigma_index: usize,
    pub sigma: f64,
    pub trials: usize,
    pub converged_rate: f64,
    pub cert_success_rate: f64,
    pub eq4_hold_rate: f64,
    pub eq4_lemma7_hold_rate: f64,
    pub sdp_trials: usize,
    pub mean_sdp_gap: Option<f64>,
    pub bound_violations: usize,
}

pub fn summarize(records: &[TrialRecord]) -> Vec<CellSummary> {
    let mut cells: BTreeMap<(usize, usize), Vec<&TrialRecord>> = BTreeMap::new();
    for rec in records {
        cells.entry((rec.m, rec.sigma_index)).or_default().push(rec);
    }
    cells
        .into_iter()
        .map(|((m, sigma_index), recs)| {
            let n = recs.len() as f64;
            let rate = |f: &dyn Fn(&TrialRecord) -> bool| recs.iter().filter(|r| f(r)).count() as f64 / n;
            let gaps: Vec<f64> = recs.iter().filter_map(|r| r.sdp_gap).collect();
            CellSummary {
                m,
                sigma_index,
                sigma: recs[0].sigma,
                trials: recs.len(),
                converged_rate: rate(&|r| r.converged),
                cert_success_rate: rate(&|r| r.cert_valid),
                eq4_hold_rate: rate(&|r| r.eq4_holds),
                eq4_lemma7_hold_rate: rate(&|r| r.eq4_lemma7_holds),
                sdp_trials: gaps.len(),
                mean_sdp_gap: (!gaps.is_empty()).then(|| gaps.iter().sum::<f64>() / gaps.len() as f64),
                bound_violations: recs.iter().filter(|r| r.bounds_hold() == Some(false)).count(),
            }
        })
        .collect()
}

pub fn write_summary(path: impl AsRef<Path>, summary: &[CellSummary]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| OtsmError::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for cell in summary {
        w.serialize(cell)?;
    }
    w.flush().map_err(|e| OtsmError::io(path, e))
}

/// Worker threads: `OTSM_THREADS` when set to a positive integer, otherwise
/// rayon's default.
pub fn thread_count() -> Option<usize> {
    std::env::var("OTSM_THREADS").ok()?.trim().parse().ok().filter(|&n| n > 0)
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub records: Vec<TrialRecord>,
    pub summary: Vec<CellSummary>,
    pub resumed: usize,
}

/// Runs every `(m, sigma, trial)` of `config`, writing records to
/// `config.output_path` and the per-cell summary next to it. With `resume`,
/// trials already present in the record file are kept and skipped.
pub fn run_sweep(config: &SweepConfig, options: &TrialOptions, resume: bool) -> Result<SweepOutcome> {
    config.validate()?;
    let path = config.output_path.as_path();
    let mut records = if resume && path.exists() { read_complete_records(path)? } else { Vec::new() };
    let resumed = records.len();
    let done: HashSet<(usize, usize, usize)> =
        records.iter().map(|r| (r.m, r.sigma_index, r.trial_index)).collect();

    // Rewrite the kept rows so a torn tail never survives.
    let file = File::create(path).map_err(|e| OtsmError::io(path, e))?;
    let mut writer = csv::Writer::from_writer(file);
    for rec in &records {
        writer.serialize(rec)?;
    }
    writer.flush().map_err(|e| OtsmError::io(path, e))?;
    drop(writer);
    let file = OpenOptions::new().append(true).open(path).map_err(|e| OtsmError::io(path, e))?;
    let mut writer = csv::WriterBuilder::new().has_headers(records.is_empty()).from_writer(file);

    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_count() {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| OtsmError::InvalidConfig(e.to_string()))?;
    let options = TrialOptions {
        sdp_mode: match (config.run_sdp, options.sdp_mode) {
            (false, _) => SdpMode::Off,
            (true, SdpMode::Off) => SdpMode::Warm,
            (true, mode) => mode,
        },
        ..*options
    };

    for &m in &config.m_values {
        for sigma_index in 0..config.sigma_values.len() {
            let todo: Vec<TrialParams> = (0..config.trials_per_cell)
                .filter(|&t| !done.contains(&(m, sigma_index, t)))
                .map(|t| config.trial_params(m, sigma_index, t))
                .collect();
            if todo.is_empty() {
                continue;
            }
            let cell: Vec<TrialRecord> =
                pool.install(|| todo.par_iter().map(|p| run_trial(p, &options)).collect::<Result<_>>())?;
            for rec in &cell {
                writer.serialize(rec)?;
            }
            writer.flush().map_err(|e| OtsmError::io(path, e))?;
            records.extend(cell);
        }
    }

    records.sort_by_key(|r| {
        let mi = config.m_values.iter().position(|&m| m == r.m).unwrap_or(usize::MAX);
        (mi, r.sigma_index, r.trial_index)
    });
    let summary = summarize(&records);
    write_summary(config.summary_path(), &summary)?;
    Ok(SweepOutcome { records, summary, resumed })
}
