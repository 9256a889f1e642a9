use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use flock_control::harness::{self, io, ExperimentConfig, Method};
use flock_control::surrogate::{
    generate_dataset, prmse, sample_states, train, Activation, Dataset, Labeler, LabelerKind, ModelKind, Structure,
    SurrogateModel,
};
use flock_control::Result;

#[derive(Parser)]
#[command(name = "flockctl", version, about = "Consensus control of Cucker-Smale ensembles")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed list; overrides the configured seeds.
    #[arg(long, global = true, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Number of agents.
    #[arg(long, global = true)]
    n: Option<usize>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    gamma: Option<f64>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    horizon: Option<f64>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    dt: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Free dynamics.
    Simulate,
    /// Open-loop optimal control by the adjoint method.
    Pmp,
    /// Receding-horizon control with a frozen Riccati gain.
    SdreMpc {
        #[arg(long)]
        refresh_steps: Option<usize>,
    },
    /// Event-triggered Riccati feedback on the mean-field model.
    Mdpc {
        #[arg(long)]
        delta_tol: Option<f64>,
    },
    /// Sample states and label them with an optimal-control solver.
    GenData {
        #[arg(long, value_enum)]
        labeler: Option<LabelerKind>,
        #[arg(long)]
        samples: Option<usize>,
        /// Held-out samples written next to the training file.
        #[arg(long)]
        test_samples: Option<usize>,
    },
    /// Fit a network to a labelled dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "control")]
        kind: ModelKind,
        #[arg(long, value_delimiter = ',', default_value = "128")]
        widths: Vec<usize>,
        #[arg(long, value_enum, default_value = "tanh")]
        activation: Activation,
        #[arg(long, value_enum, default_value = "anchored")]
        structure: Structure,
        #[arg(long, default_value_t = 40)]
        epochs: usize,
        #[arg(long, default_value_t = 3e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0.97)]
        lr_decay: f64,
        #[arg(long, default_value_t = 0.0)]
        mu: f64,
        #[arg(long, default_value_t = 200)]
        batch_size: usize,
        /// Where to write the model JSON.
        #[arg(long)]
        model: PathBuf,
    },
    /// Closed-loop rollout of a trained model.
    Rollout {
        #[arg(long)]
        model: PathBuf,
    },
    /// Learned feedback against the solvers it imitates.
    Test1,
    /// Event-triggered feedback at several tolerances.
    Test2,
    /// Wall-clock comparison of the controllers.
    Bench {
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = &c.seed {
        cfg.seeds = s.clone();
        cfg.test2.seeds = s.clone();
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    if let Some(n) = c.n {
        cfg.sim.n_agents = n;
    }
    if let Some(g) = c.gamma {
        cfg.sim.gamma = g;
    }
    if let Some(h) = c.horizon {
        cfg.sim.horizon = h;
    }
    if let Some(dt) = c.dt {
        cfg.sim.dt = dt;
    }
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run_method(mut cfg: ExperimentConfig, method: Method) -> Result<()> {
    cfg.method = method;
    for r in harness::run_experiment(&cfg)? {
        println!(
            "{} seed {}: cost {:.6e}, final variance {:.6e}, final spread {:.6e}, {:.3} s{}",
            r.method.name(),
            r.seed,
            r.final_cost,
            r.final_variance,
            r.final_spread,
            r.total_seconds,
            r.update_times.map(|u| format!(", {} updates", u.len())).unwrap_or_default()
        );
    }
    Ok(())
}

fn gen_data(cfg: &ExperimentConfig) -> Result<()> {
    let (n, d) = (cfg.sim.n_agents, cfg.sim.dim);
    let labeler = match cfg.data.labeler {
        LabelerKind::Sdre => Labeler::Sdre,
        LabelerKind::Pmp => Labeler::Pmp(cfg.pmp.clone()),
    };
    let name = match cfg.data.labeler {
        LabelerKind::Sdre => "sdre",
        LabelerKind::Pmp => "pmp",
    };
    io::ensure_dir(&cfg.out_dir)?;
    let (lo, hi) = (cfg.sim.position_box, cfg.sim.velocity_box);
    for (split, count, seed) in [
        ("train", cfg.data.train_samples, cfg.data.seed.wrapping_mul(2)),
        ("test", cfg.data.test_samples, cfg.data.seed.wrapping_mul(2) + 1),
    ] {
        if count == 0 {
            continue;
        }
        let states = sample_states(count, n, d, lo, hi, seed)?;
        let (ds, dropped) = generate_dataset(&states, n, d, &labeler, &cfg.params())?;
        let path = cfg.out_dir.join(format!("{name}-{split}.csv"));
        ds.write_csv(&path)?;
        println!("{}: {} samples, {dropped} dropped", path.display(), ds.len());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.common)?;
    match cli.command {
        Command::Simulate => run_method(cfg, Method::Uncontrolled),
        Command::Pmp => run_method(cfg, Method::Pmp),
        Command::SdreMpc { refresh_steps } => {
            if let Some(k) = refresh_steps {
                cfg.sdre.refresh_steps = k;
            }
            run_method(cfg, Method::SdreMpc)
        }
        Command::Mdpc { delta_tol } => {
            if let Some(t) = delta_tol {
                cfg.mdpc.delta_tol = t;
            }
            run_method(cfg, Method::Mdpc)
        }
        Command::GenData {
            labeler,
            samples,
            test_samples,
        } => {
            if let Some(l) = labeler {
                cfg.data.labeler = l;
            }
            if let Some(s) = samples {
                cfg.data.train_samples = s;
            }
            if let Some(s) = test_samples {
                cfg.data.test_samples = s;
            }
            cfg.validate()?;
            gen_data(&cfg)
        }
        Command::Train {
            data,
            test,
            kind,
            widths,
            activation,
            structure,
            epochs,
            lr,
            lr_decay,
            mu,
            batch_size,
            model,
        } => {
            let n = cfg.sim.n_agents;
            let ds = Dataset::read_csv(&data, n)?;
            let seed = cli.common.seed.as_ref().and_then(|s| s.first().copied()).unwrap_or(0);
            let mut m = SurrogateModel::new(kind, structure, ds.n_agents, ds.dim, widths, activation, seed)?;
            let tc = flock_control::surrogate::TrainConfig {
                mu,
                learning_rate: lr,
                lr_decay,
                batch_size,
                epochs,
                seed,
                ..Default::default()
            };
            let report = train(&ds, &mut m, &tc)?;
            let held_out = match &test {
                Some(p) => Some(prmse(&m, &Dataset::read_csv(p, n)?)?),
                None => None,
            };
            m.save_json(
                &model,
                serde_json::json!({ "train": tc, "loss_history": report.loss_history, "prmse": held_out }),
            )?;
            println!(
                "trained {} epochs, final loss {:.4e}, train PRMSE {:.3}%{}",
                report.epochs,
                report.loss_history.last().copied().unwrap_or(f64::NAN),
                prmse(&m, &ds)?,
                held_out.map(|p| format!(", test PRMSE {p:.3}%")).unwrap_or_default()
            );
            Ok(())
        }
        Command::Rollout { model } => {
            let (m, _) = SurrogateModel::load_json(&model)?;
            cfg.learned.model = Some(model);
            let method = match m.kind {
                ModelKind::Control => Method::LearnedU,
                ModelKind::Value => Method::LearnedV,
            };
            run_method(cfg, method)
        }
        Command::Test1 => {
            let a = harness::run_pipeline_test1(&cfg)?;
            print_json(&a.report)
        }
        Command::Test2 => print_json(&harness::run_pipeline_test2(&cfg)?),
        Command::Bench { model } => print_json(&harness::bench(&cfg, model.as_deref())?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
