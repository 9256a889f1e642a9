//! Experiment driver: single runs, the two reference pipelines and timing.

pub mod config;
pub mod io;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{ExperimentConfig, Method, VariantConfig};

use crate::ensemble::{
    simulate_uncontrolled, velocity_variance, write_moments_csv, write_trajectory_csv, EnsembleState, MomentTrace,
    Trajectory,
};
use crate::mdpc::{run_mdpc, BoundRow, MdpcConfig, UpdateLog};
use crate::pmp::solve_pmp;
use crate::sdre::{frozen_sdre_mpc, unflatten_state};
use crate::surrogate::{
    generate_dataset, prmse, rollout_learned, sample_states, train, Dataset, Labeler, LabelerKind, SurrogateModel,
};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTime {
    pub phase: String,
    pub seconds: f64,
}

/// Wall-clock bookkeeping; phases are contiguous so they add up to the total.
struct Clock {
    start: Instant,
    last: Instant,
    phases: Vec<PhaseTime>,
}

impl Clock {
    fn new() -> Self {
        let now = Instant::now();
        Self {
            start: now,
            last: now,
            phases: Vec::new(),
        }
    }

    fn lap(&mut self, phase: &str) -> f64 {
        let now = Instant::now();
        let seconds = (now - self.last).as_secs_f64();
        self.phases.push(PhaseTime {
            phase: phase.into(),
            seconds,
        });
        self.last = now;
        seconds
    }

    fn total(&self) -> f64 {
        (self.last - self.start).as_secs_f64()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: Method,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub phases: Vec<PhaseTime>,
    pub total_seconds: f64,
    pub final_cost: f64,
    /// Mean squared velocity deviation from the fixed target.
    pub final_variance: f64,
    /// Mean squared velocity deviation from the ensemble mean.
    pub final_spread: f64,
    pub update_times: Option<Vec<f64>>,
    pub outputs: Vec<PathBuf>,
}

/// Initial state for a seed: i.i.d. uniform draws in the configured boxes.
pub fn initial_state(config: &ExperimentConfig, seed: u64) -> Result<EnsembleState> {
    let (n, d) = (config.sim.n_agents, config.sim.dim);
    let flat = sample_states(1, n, d, config.sim.position_box, config.sim.velocity_box, seed)?;
    unflatten_state(&flat[0], n, d, 0.0)
}

fn phase<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_phase(name))
}

fn load_model(config: &ExperimentConfig) -> Result<SurrogateModel> {
    let path = config
        .learned
        .model
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("model path missing".into()))?;
    let (model, _) = SurrogateModel::load_json(path)?;
    if Some(model.kind) != config.expected_model_kind() {
        return Err(Error::InvalidInput(format!(
            "{} expects a {:?} model, file holds {:?}",
            config.method.name(),
            config.expected_model_kind(),
            model.kind
        )));
    }
    if (model.n_agents, model.dim) != (config.sim.n_agents, config.sim.dim) {
        return Err(Error::DimensionMismatch("model size differs from the configured ensemble".into()));
    }
    Ok(model)
}

struct MethodOutcome {
    trajectory: Trajectory,
    moments: MomentTrace,
    updates: Option<UpdateLog>,
    pmp_summary: Option<serde_json::Value>,
}

fn run_method(config: &ExperimentConfig, state0: &EnsembleState, model: Option<&SurrogateModel>) -> Result<MethodOutcome> {
    let params = config.params();
    let plain = |(trajectory, moments): (Trajectory, MomentTrace)| MethodOutcome {
        trajectory,
        moments,
        updates: None,
        pmp_summary: None,
    };
    match config.method {
        Method::Uncontrolled => simulate_uncontrolled(state0, &params).map(plain),
        Method::SdreMpc => frozen_sdre_mpc(state0, &params, config.sdre.refresh_steps).map(plain),
        Method::Mdpc => {
            let (trajectory, log, moments) = run_mdpc(state0, &config.mdpc_config())?;
            Ok(MethodOutcome {
                trajectory,
                moments,
                updates: Some(log),
                pmp_summary: None,
            })
        }
        Method::Pmp => {
            let sol = solve_pmp(state0, &params, &config.pmp)?;
            let trajectory = sol.trajectory();
            let mut moments = MomentTrace::default();
            let target = params.target(state0.dim());
            trajectory.states.iter().for_each(|s| moments.record(s, &target));
            Ok(MethodOutcome {
                trajectory,
                moments,
                updates: None,
                pmp_summary: Some(serde_json::json!({
                    "cost": sol.cost,
                    "iterations": sol.iterations,
                    "converged": sol.converged,
                })),
            })
        }
        Method::LearnedU | Method::LearnedV => {
            let model = model.ok_or_else(|| Error::InvalidInput("learned method without a model".into()))?;
            let r = rollout_learned(state0, model, &params)?;
            Ok(MethodOutcome {
                trajectory: r.trajectory,
                moments: r.moments,
                updates: None,
                pmp_summary: None,
            })
        }
    }
}

fn run_single(config: &ExperimentConfig, seed: u64, model: Option<&SurrogateModel>) -> Result<RunReport> {
    let mut clock = Clock::new();
    let dir = config.out_dir.join(format!("{}-seed{seed}", config.method.name()));
    io::ensure_dir(&dir)?;
    let state0 = phase("setup", initial_state(config, seed))?;
    clock.lap("setup");

    let outcome = phase(config.method.name(), run_method(config, &state0, model))?;
    clock.lap("solve");

    let mut outputs = vec![dir.join("trajectory.csv"), dir.join("moments.csv")];
    let write = || -> Result<()> {
        write_trajectory_csv(&outputs[0], &outcome.trajectory)?;
        write_moments_csv(&outputs[1], &outcome.moments)
    };
    phase("write", write())?;
    if let Some(log) = &outcome.updates {
        let bounds = dir.join("bounds.csv");
        let updates = dir.join("updates.json");
        phase("write", io::write_bounds_csv(&bounds, &log.bounds))?;
        phase("write", io::write_json(&updates, log))?;
        outputs.extend([bounds, updates]);
    }
    if let Some(summary) = &outcome.pmp_summary {
        let path = dir.join("pmp.json");
        phase("write", io::write_json(&path, summary))?;
        outputs.push(path);
    }
    let report_path = dir.join("report.json");
    outputs.push(report_path.clone());
    clock.lap("write");

    let report = RunReport {
        method: config.method,
        seed,
        config: config.clone(),
        total_seconds: clock.total(),
        phases: clock.phases,
        final_cost: outcome.trajectory.cost_accumulated,
        final_variance: outcome.moments.final_variance(),
        final_spread: outcome.trajectory.final_spread(),
        update_times: outcome.updates.map(|l| l.update_times),
        outputs,
    };
    io::write_json(&report_path, &report)?;
    Ok(report)
}

/// Runs the configured method once per seed and writes one directory per run.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<RunReport>> {
    config.validate()?;
    let model = match config.method {
        Method::LearnedU | Method::LearnedV => Some(phase("load model", load_model(config))?),
        _ => None,
    };
    config
        .seeds
        .par_iter()
        .map(|&seed| run_single(config, seed, model.as_ref()))
        .collect()
}

// ---------------------------------------------------------------------------
// Test 1: learned feedback against the solvers it imitates.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub name: String,
    pub labeler: LabelerKind,
    pub train_samples: usize,
    pub test_samples: usize,
    /// `100 * RMSE / RMS(labels)` on held-out samples.
    pub prmse: f64,
    pub final_train_loss: f64,
    pub train_seconds: f64,
    pub model_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    /// Final mean squared deviation from the instantaneous mean velocity.
    pub final_spreads: Vec<f64>,
    pub final_costs: Vec<f64>,
    pub rollout_seconds: Vec<f64>,
}

impl MethodSummary {
    pub fn mean_final_spread(&self) -> f64 {
        mean(&self.final_spreads)
    }

    pub fn mean_rollout_seconds(&self) -> f64 {
        mean(&self.rollout_seconds)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub labeler: LabelerKind,
    pub train: usize,
    pub test: usize,
    pub dropped: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Test1Report {
    pub datasets: Vec<DatasetSummary>,
    pub variants: Vec<VariantReport>,
    pub methods: Vec<MethodSummary>,
    pub rollout_seeds: Vec<u64>,
    /// Mean frozen-SDRE rollout time over mean learned rollout time, per variant.
    pub speedups: Vec<(String, f64)>,
    pub comparison_csv: PathBuf,
    pub phases: Vec<PhaseTime>,
    pub total_seconds: f64,
}

impl Test1Report {
    pub fn method(&self, name: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == name)
    }
}

/// Trained models and datasets kept in memory for callers that want to
/// inspect them further.
pub struct Test1Artifacts {
    pub report: Test1Report,
    pub models: Vec<(String, SurrogateModel)>,
    pub datasets: Vec<(LabelerKind, Dataset, Dataset)>,
}

fn build_datasets(config: &ExperimentConfig, kind: LabelerKind, train_n: usize, test_n: usize) -> Result<(Dataset, Dataset, DatasetSummary)> {
    let (n, d) = (config.sim.n_agents, config.sim.dim);
    let t = Instant::now();
    let labeler = match kind {
        LabelerKind::Sdre => Labeler::Sdre,
        LabelerKind::Pmp => Labeler::Pmp(config.pmp.clone()),
    };
    let boxes = (config.sim.position_box, config.sim.velocity_box);
    // Train and test states come from disjoint seeds.
    let seed = config.test1.data_seed.wrapping_mul(2);
    let train_states = sample_states(train_n, n, d, boxes.0, boxes.1, seed)?;
    let test_states = sample_states(test_n, n, d, boxes.0, boxes.1, seed + 1)?;
    let params = config.params();
    let (train_ds, dropped_a) = generate_dataset(&train_states, n, d, &labeler, &params)?;
    let (test_ds, dropped_b) = generate_dataset(&test_states, n, d, &labeler, &params)?;
    let summary = DatasetSummary {
        labeler: kind,
        train: train_ds.len(),
        test: test_ds.len(),
        dropped: dropped_a + dropped_b,
        seconds: t.elapsed().as_secs_f64(),
    };
    Ok((train_ds, test_ds, summary))
}

/// Generates both datasets, trains every configured variant, and rolls out
/// all controllers from a shared set of initial states.
pub fn run_pipeline_test1(config: &ExperimentConfig) -> Result<Test1Artifacts> {
    config.validate()?;
    let t1 = &config.test1;
    let params = config.params();
    let out = config.out_dir.join("test1");
    io::ensure_dir(&out)?;
    let mut clock = Clock::new();

    let mut datasets = Vec::new();
    let mut summaries = Vec::new();
    for kind in [LabelerKind::Sdre, LabelerKind::Pmp] {
        if !t1.variants.iter().any(|v| v.labeler == kind) {
            continue;
        }
        let (train_n, test_n) = match kind {
            LabelerKind::Sdre => (t1.sdre_train_samples, t1.sdre_test_samples),
            LabelerKind::Pmp => (t1.pmp_train_samples, t1.pmp_test_samples),
        };
        let (tr, te, summary) = phase("dataset", build_datasets(config, kind, train_n, test_n))?;
        let file = out.join(format!("dataset-{}.csv", if kind == LabelerKind::Sdre { "sdre" } else { "pmp" }));
        phase("dataset", tr.write_csv(&file))?;
        summaries.push(summary);
        datasets.push((kind, tr, te));
    }
    clock.lap("datasets");

    let mut variants = Vec::new();
    let mut models = Vec::new();
    for (i, v) in t1.variants.iter().enumerate() {
        let (_, tr, te) = datasets
            .iter()
            .find(|(k, _, _)| *k == v.labeler)
            .expect("datasets built for every labeler in use");
        let t = Instant::now();
        let mut model = SurrogateModel::new(
            v.kind,
            Default::default(),
            config.sim.n_agents,
            config.sim.dim,
            v.hidden_widths.clone(),
            v.activation,
            t1.data_seed + i as u64,
        )?;
        let report = phase(&format!("train {}", v.name), train(tr, &mut model, &v.train))?;
        let err = phase(&format!("evaluate {}", v.name), prmse(&model, te))?;
        let path = out.join(format!("model-{}.json", v.name));
        model.save_json(
            &path,
            serde_json::json!({
                "name": v.name,
                "labeler": v.labeler,
                "train": v.train,
                "loss_history": report.loss_history,
                "prmse": err,
            }),
        )?;
        variants.push(VariantReport {
            name: v.name.clone(),
            labeler: v.labeler,
            train_samples: tr.len(),
            test_samples: te.len(),
            prmse: err,
            final_train_loss: report.loss_history.last().copied().unwrap_or(f64::NAN),
            train_seconds: t.elapsed().as_secs_f64(),
            model_path: path,
        });
        models.push((v.name.clone(), model));
    }
    clock.lap("training");

    // Rollouts run sequentially so the wall-clock numbers are comparable.
    let mut names: Vec<String> = vec!["uncontrolled".into(), "pmp".into(), "sdre-mpc".into()];
    names.extend(models.iter().map(|(n, _)| n.clone()));
    let mut methods: Vec<MethodSummary> = names
        .iter()
        .map(|n| MethodSummary {
            method: n.clone(),
            final_spreads: Vec::new(),
            final_costs: Vec::new(),
            rollout_seconds: Vec::new(),
        })
        .collect();
    let mut comparison: Vec<(String, Vec<f64>)> = Vec::new();
    let mut times = Vec::new();
    for (k, &seed) in t1.rollout_seeds.iter().enumerate() {
        let s0 = initial_state(config, seed)?;
        for (mi, name) in names.iter().enumerate() {
            let t = Instant::now();
            let traj = match mi {
                0 => simulate_uncontrolled(&s0, &params)?.0,
                1 => phase("pmp rollout", solve_pmp(&s0, &params, &config.pmp))?.trajectory(),
                2 => phase("sdre rollout", frozen_sdre_mpc(&s0, &params, config.sdre.refresh_steps))?.0,
                _ => phase(&format!("{name} rollout"), rollout_learned(&s0, &models[mi - 3].1, &params))?.trajectory,
            };
            let secs = t.elapsed().as_secs_f64();
            let m = &mut methods[mi];
            m.final_spreads.push(traj.final_spread());
            m.final_costs.push(traj.cost_accumulated);
            m.rollout_seconds.push(secs);
            if k == 0 {
                let spreads: Vec<f64> = traj
                    .states
                    .iter()
                    .map(|s| velocity_variance(s, &crate::ensemble::mean_velocity(s)))
                    .collect();
                if times.is_empty() {
                    times = traj.states.iter().map(|s| s.time).collect();
                }
                comparison.push((name.clone(), spreads));
            }
        }
    }
    let comparison_csv = out.join("comparison.csv");
    if !times.is_empty() {
        io::write_series_csv(&comparison_csv, &times, &comparison)?;
    }
    clock.lap("rollouts");

    let sdre_time = methods[2].mean_rollout_seconds();
    let speedups = methods[3..]
        .iter()
        .map(|m| (m.method.clone(), sdre_time / m.mean_rollout_seconds()))
        .collect();
    let report = Test1Report {
        datasets: summaries,
        variants,
        methods,
        rollout_seeds: t1.rollout_seeds.clone(),
        speedups,
        comparison_csv,
        total_seconds: clock.total(),
        phases: clock.phases,
    };
    io::write_json(out.join("report.json"), &report)?;
    let datasets = datasets;
    Ok(Test1Artifacts {
        report,
        models,
        datasets,
    })
}

// ---------------------------------------------------------------------------
// Test 2: event-triggered Riccati feedback.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Test2Run {
    pub seed: u64,
    pub delta_tol: f64,
    pub update_times: Vec<f64>,
    pub final_variance: f64,
    /// Smallest `sigma2 / lower` over the run.
    pub min_ratio_to_lower: f64,
    /// Largest `sigma2 / upper` over the run.
    pub max_ratio_to_upper: f64,
    pub within_sandwich: bool,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Test2Report {
    pub runs: Vec<Test2Run>,
    pub seeds: Vec<u64>,
    pub uncontrolled_final: Vec<f64>,
    pub sandwich_slack: f64,
    pub phases: Vec<PhaseTime>,
    pub total_seconds: f64,
}

impl Test2Report {
    pub fn runs_for(&self, delta_tol: f64) -> impl Iterator<Item = &Test2Run> {
        self.runs.iter().filter(move |r| r.delta_tol == delta_tol)
    }

    pub fn mean_final(&self, delta_tol: f64) -> f64 {
        mean(&self.runs_for(delta_tol).map(|r| r.final_variance).collect::<Vec<_>>())
    }

    pub fn mean_uncontrolled(&self) -> f64 {
        mean(&self.uncontrolled_final)
    }
}

/// Ratios of the measured variance to the predicted envelope, with the
/// relative slack applied to both sides.
pub fn sandwich_ratios(rows: &[BoundRow], slack: f64) -> (f64, f64, bool) {
    let mut min_lower = f64::INFINITY;
    let mut max_upper: f64 = 0.0;
    let mut ok = true;
    for r in rows {
        if r.lower > 0.0 {
            min_lower = min_lower.min(r.sigma2 / r.lower);
        }
        if r.upper > 0.0 {
            max_upper = max_upper.max(r.sigma2 / r.upper);
        }
        if r.sigma2 < r.lower * (1.0 - slack) || r.sigma2 > r.upper * (1.0 + slack) {
            ok = false;
        }
    }
    (min_lower, max_upper, ok)
}

fn tol_label(tol: f64) -> String {
    format!("{tol}").replace('.', "p")
}

/// MdPC at every configured tolerance plus the uncontrolled reference, on
/// every seed.
pub fn run_pipeline_test2(config: &ExperimentConfig) -> Result<Test2Report> {
    config.validate()?;
    let t2 = &config.test2;
    let params = config.params();
    let out = config.out_dir.join("test2");
    io::ensure_dir(&out)?;
    let mut clock = Clock::new();

    let per_seed: Vec<Result<(f64, Vec<Test2Run>)>> = t2
        .seeds
        .par_iter()
        .map(|&seed| {
            let s0 = initial_state(config, seed)?;
            let (_, free) = simulate_uncontrolled(&s0, &params)?;
            write_moments_csv(out.join(format!("uncontrolled-seed{seed}.csv")), &free)?;
            let mut runs = Vec::new();
            for &tol in &t2.tolerances {
                let cfg = MdpcConfig {
                    delta_tol: tol,
                    ..config.mdpc_config()
                };
                let t = Instant::now();
                let (_, log, moments) = phase("mdpc", run_mdpc(&s0, &cfg))?;
                let wall_seconds = t.elapsed().as_secs_f64();
                let stem = format!("mdpc-tol{}-seed{seed}", tol_label(tol));
                io::write_bounds_csv(out.join(format!("{stem}-bounds.csv")), &log.bounds)?;
                io::write_json(out.join(format!("{stem}-updates.json")), &log)?;
                write_moments_csv(out.join(format!("{stem}-moments.csv")), &moments)?;
                let (min_ratio_to_lower, max_ratio_to_upper, within_sandwich) =
                    sandwich_ratios(&log.bounds, t2.sandwich_slack);
                runs.push(Test2Run {
                    seed,
                    delta_tol: tol,
                    update_times: log.update_times,
                    final_variance: moments.final_variance(),
                    min_ratio_to_lower,
                    max_ratio_to_upper,
                    within_sandwich,
                    wall_seconds,
                });
            }
            Ok((free.final_variance(), runs))
        })
        .collect();
    clock.lap("runs");

    let mut report = Test2Report {
        runs: Vec::new(),
        seeds: t2.seeds.clone(),
        uncontrolled_final: Vec::new(),
        sandwich_slack: t2.sandwich_slack,
        phases: Vec::new(),
        total_seconds: 0.0,
    };
    for r in per_seed {
        let (free, runs) = r?;
        report.uncontrolled_final.push(free);
        report.runs.extend(runs);
    }
    clock.lap("summary");
    report.total_seconds = clock.total();
    report.phases = clock.phases.clone();
    io::write_json(out.join("report.json"), &report)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Timing.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub n_agents: usize,
    pub steps: usize,
    pub seeds: Vec<u64>,
    /// Mean wall-clock seconds per rollout, by method.
    pub mean_seconds: Vec<(String, f64)>,
    /// Frozen-SDRE time over learned-model time, when a model is given.
    pub speedup: Option<f64>,
}

/// Times uncontrolled, frozen-SDRE, MdPC and (optionally) learned rollouts.
pub fn bench(config: &ExperimentConfig, model: Option<&Path>) -> Result<BenchReport> {
    config.params().validate()?;
    let params = config.params();
    let learned = match model {
        Some(p) => Some(SurrogateModel::load_json(p)?.0),
        None => None,
    };
    let mut totals = vec![0.0; if learned.is_some() { 4 } else { 3 }];
    for &seed in &config.seeds {
        let s0 = initial_state(config, seed)?;
        let t = Instant::now();
        simulate_uncontrolled(&s0, &params)?;
        totals[0] += t.elapsed().as_secs_f64();
        let t = Instant::now();
        frozen_sdre_mpc(&s0, &params, config.sdre.refresh_steps)?;
        totals[1] += t.elapsed().as_secs_f64();
        let t = Instant::now();
        run_mdpc(&s0, &config.mdpc_config())?;
        totals[2] += t.elapsed().as_secs_f64();
        if let Some(m) = &learned {
            let t = Instant::now();
            rollout_learned(&s0, m, &params)?;
            totals[3] += t.elapsed().as_secs_f64();
        }
    }
    let k = config.seeds.len().max(1) as f64;
    let names = ["uncontrolled", "sdre-mpc", "mdpc", "learned"];
    let mean_seconds: Vec<(String, f64)> = totals.iter().zip(names).map(|(t, n)| (n.to_string(), t / k)).collect();
    let speedup = learned.as_ref().map(|_| mean_seconds[1].1 / mean_seconds[3].1);
    Ok(BenchReport {
        n_agents: config.sim.n_agents,
        steps: params.steps(),
        seeds: config.seeds.clone(),
        mean_seconds,
        speedup,
    })
}
