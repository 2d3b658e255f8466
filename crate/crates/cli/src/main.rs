//! `fluiddiff` command-line pipeline.
//!
//! Exit codes: 0 success, 1 other failure, 2 invalid flags or config,
//! 3 I/O or dataset integrity, 4 solver failure, 5 non-finite values.
//! On failure the last stderr line is `error code=<n> kind=<kind>: <message>`.

mod config;
mod exit;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fluiddiff::dataset::{generate_dataset, load_dataset, Split};
use fluiddiff::ddpm::{build_condition, make_schedule};
use fluiddiff::fdt::{decode_tensor, read_bytes, write_tensor};
use fluiddiff::fluid::Grid;
use fluiddiff::metrics::{spearman, Component, MetricsReport};
use fluiddiff::predict::{oracle_cases, predict_pairs, zero_cases};
use fluiddiff::train::{Checkpoint, Trainer};
use fluiddiff::unet::UNetConfig;
use serde::Serialize;

use config::{create_dir, write_file, RunConfig, SplitName};
use exit::{Failure, EXIT_USAGE};

#[derive(Parser)]
#[command(name = "fluiddiff", version, about = "Conditional diffusion surrogate for 2-D smoke flow")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate smoke scenes and write a dataset directory
    GenData(GenDataArgs),
    /// Train the denoiser on a dataset's training split
    Train(TrainArgs),
    /// Draw one conditional velocity prediction
    Sample(SampleArgs),
    /// Predict a dataset split and write metrics
    Eval(EvalArgs),
    /// Write the noise schedule as CSV
    Schedule(ScheduleArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// JSON run configuration; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scenes: Option<usize>,
    /// grid height and width
    #[arg(long, num_args = 2, value_names = ["H", "W"])]
    size: Option<Vec<usize>>,
    #[arg(long)]
    total_time: Option<f64>,
    #[arg(long)]
    record_every: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// train:test scene ratio
    #[arg(long, num_args = 2, value_names = ["TRAIN", "TEST"])]
    split: Option<Vec<u32>>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// checkpoint directory
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// diffusion steps T
    #[arg(long = "T")]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// U-Net preset replacing the config's `unet` section
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// continue from the checkpoint already in `--out`
    #[arg(long)]
    resume: bool,
    /// stop (with a checkpoint) once this many iterations are done
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Preset {
    Tiny,
    Default,
    Reference,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// initial density, a tensor file of shape [H, W]
    #[arg(long)]
    rho0: PathBuf,
    #[arg(long)]
    tau: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// draws averaged into the prediction
    #[arg(long, default_value_t = 1)]
    samples: usize,
    /// output tensor file, physical units, shape [2, H, W]
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, required_unless_present = "oracle")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    split: Option<SplitName>,
    #[arg(long)]
    samples_per_case: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    bins: Option<usize>,
    /// score the ground truth against itself
    #[arg(long)]
    oracle: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScheduleArgs {
    #[arg(long = "T", default_value_t = 400)]
    steps: usize,
    #[arg(long, default_value_t = 1e-4)]
    beta_start: f64,
    #[arg(long, default_value_t = 0.02)]
    beta_end: f64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            if code != 0 {
                eprintln!("{}", Failure::usage(e.kind().to_string()).line());
                return ExitCode::from(EXIT_USAGE as u8);
            }
            return ExitCode::SUCCESS;
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::Eval(a) => eval(a),
        Command::Schedule(a) => schedule(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.line());
            ExitCode::from(f.code as u8)
        }
    }
}

/// Echo path for a command whose output is a single file.
fn sibling_echo(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".config.json");
    out.with_file_name(name)
}

fn gen_data(a: GenDataArgs) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(n) = a.scenes {
        cfg.data.scenes = n;
    }
    if let Some(s) = &a.size {
        cfg.sim.height = s[0];
        cfg.sim.width = s[1];
    }
    if let Some(t) = a.total_time {
        cfg.sim.total_time = t;
    }
    if let Some(r) = a.record_every {
        cfg.sim.record_every = r;
    }
    if let Some(s) = a.seed {
        cfg.data.seed = s;
    }
    if let Some(s) = &a.split {
        cfg.data.split_ratio = [s[0], s[1]];
    }
    cfg.sim.validate()?;
    if cfg.data.scenes == 0 {
        return Err(Failure::usage("--scenes must be >= 1"));
    }
    create_dir(&a.out)?;
    let [tr, te] = cfg.data.split_ratio;
    log::info!("simulating {} scenes at {}x{}", cfg.data.scenes, cfg.sim.height, cfg.sim.width);
    let m = generate_dataset(&cfg.sim, cfg.data.scenes, cfg.data.seed, (tr, te), &a.out)?;
    cfg.echo(&a.out)?;
    log::info!(
        "wrote {} scenes x {} snapshots ({} train / {} test)",
        m.n_scenes,
        m.snapshots_per_scene,
        m.split.train.len(),
        m.split.test.len()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.train.base_lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.steps {
        cfg.train.steps = v;
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = a.checkpoint_every {
        cfg.train.checkpoint_every = v;
    }
    if let Some(p) = a.preset {
        cfg.unet = match p {
            Preset::Tiny => UNetConfig::tiny(),
            Preset::Default => UNetConfig::default(),
            Preset::Reference => UNetConfig::reference(),
        };
    }
    cfg.train.validate()?;
    cfg.unet.validate()?;

    let ds = load_dataset(&a.data)?;
    cfg.sim = ds.manifest.sim_params();
    cfg.data.scenes = ds.manifest.n_scenes;
    cfg.data.seed = ds.manifest.base_seed;
    cfg.data.split_ratio = ds.manifest.split_ratio;
    let pairs = ds.pairs(Split::Train)?;
    create_dir(&a.out)?;

    let mut trainer = if a.resume {
        let ckpt = Checkpoint::<f32>::load(&a.out)?;
        if ckpt.meta.train != cfg.train || ckpt.meta.unet != cfg.unet {
            return Err(Failure::usage(
                "--resume: resolved train/unet config differs from the checkpoint's",
            ));
        }
        Trainer::resume(&pairs, ckpt)?
    } else {
        Trainer::new(&pairs, cfg.train.clone(), cfg.unet.clone(), ds.manifest.normalization.clone())?
    };
    cfg.echo(&a.out)?;
    log::info!(
        "training on {} pairs, iterations {}..{}",
        pairs.len(),
        trainer.iteration(),
        trainer.total_iterations()
    );
    let stop = a.stop_after.unwrap_or(usize::MAX);
    let res = trainer.run_until(Some(&a.out), stop);
    if let Some(last) = trainer.losses().last() {
        log::info!("iteration {} loss {:.6}", last.iteration, last.loss);
    }
    res.map_err(Failure::from)
}

fn read_rho0(path: &Path) -> Result<Grid, Failure> {
    let t = decode_tensor(&read_bytes(path)?)?;
    let shape = t.shape().to_vec();
    let t: fluiddiff::Tensor<f64> = match t {
        fluiddiff::fdt::AnyTensor::F32(t) => t.cast(),
        fluiddiff::fdt::AnyTensor::F64(t) => t,
    };
    let (h, w) = match shape.as_slice() {
        [h, w] | [1, h, w] => (*h, *w),
        _ => return Err(Failure::usage(format!("--rho0 must have shape [H, W], got {shape:?}"))),
    };
    Ok(Grid::from_vec(h, w, t.data().to_vec()).expect("element count matches shape"))
}

fn sample(a: SampleArgs) -> Result<(), Failure> {
    let ckpt = Checkpoint::<f32>::load(&a.checkpoint)?;
    let rho0 = read_rho0(&a.rho0)?;
    let [h, w] = ckpt.meta.grid_size;
    if (rho0.ny(), rho0.nx()) != (h, w) {
        return Err(Failure::usage(format!(
            "--rho0 is {}x{}, checkpoint expects {h}x{w}",
            rho0.ny(),
            rho0.nx()
        )));
    }
    if a.samples == 0 {
        return Err(Failure::usage("--samples must be >= 1"));
    }
    let y = build_condition(&rho0, a.tau, ckpt.meta.total_time)?;
    let sched = ckpt.meta.train.schedule()?;
    let net = ckpt.denoiser();
    let mean = net.sample_mean(&y, &sched, a.samples, a.seed)?;
    let (ux, uy) = fluiddiff::dataset::velocity_grids(&mean, &ckpt.meta.normalization)?;
    let mut data = ux.data().to_vec();
    data.extend_from_slice(uy.data());
    let out = fluiddiff::Tensor::new(vec![2, h, w], data).expect("two grids of H x W");
    write_tensor(&a.out, &out)?;

    #[derive(Serialize)]
    struct SampleEcho<'a> {
        checkpoint: &'a Path,
        rho0: &'a Path,
        tau: f64,
        seed: u64,
        samples: usize,
        train: &'a fluiddiff::train::TrainConfig,
        unet: &'a UNetConfig,
    }
    let echo = SampleEcho {
        checkpoint: &a.checkpoint,
        rho0: &a.rho0,
        tau: a.tau,
        seed: a.seed,
        samples: a.samples,
        train: &ckpt.meta.train,
        unet: &ckpt.meta.unet,
    };
    let text = serde_json::to_string_pretty(&echo).expect("echo serializes") + "\n";
    write_file(&sibling_echo(&a.out), text.as_bytes())
}

#[derive(Serialize)]
struct Baseline {
    mae: f64,
    rmse: f64,
}

#[derive(Serialize)]
struct EvalSummary<'a> {
    split: SplitName,
    oracle: bool,
    samples_per_case: usize,
    n_cases: usize,
    /// predict-zero-velocity reference on the same cases
    zero_baseline: Baseline,
    /// model RMSE divided by the zero baseline RMSE
    rmse_ratio_to_zero: f64,
    /// Spearman correlation of per-tau RMSE (both components) with tau
    tau_rmse_spearman: Option<f64>,
    mse_identity_gap: f64,
    report: &'a MetricsReport,
}

fn eval(a: EvalArgs) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(v) = a.split {
        cfg.eval.split = v;
    }
    if let Some(v) = a.samples_per_case {
        cfg.eval.samples_per_case = v;
    }
    if let Some(v) = a.seed {
        cfg.eval.seed = v;
    }
    if let Some(v) = a.bins {
        cfg.eval.bins = v;
    }
    if cfg.eval.samples_per_case == 0 || cfg.eval.bins == 0 {
        return Err(Failure::usage("--samples-per-case and --bins must be >= 1"));
    }
    let ds = load_dataset(&a.data)?;
    cfg.sim = ds.manifest.sim_params();
    cfg.data.scenes = ds.manifest.n_scenes;
    cfg.data.seed = ds.manifest.base_seed;
    cfg.data.split_ratio = ds.manifest.split_ratio;
    let pairs = ds.pairs(cfg.eval.split.into())?;
    if pairs.is_empty() {
        return Err(Failure::usage(format!("split {:?} has no scenes", cfg.eval.split)));
    }
    let stats = &ds.manifest.normalization;

    let cases = if a.oracle {
        oracle_cases(&pairs, stats)
    } else {
        let path = a.checkpoint.as_deref().expect("clap requires --checkpoint without --oracle");
        let ckpt = Checkpoint::<f32>::load(path)?;
        if ckpt.meta.normalization != *stats || ckpt.meta.grid_size != ds.manifest.grid_size {
            return Err(Failure::usage("checkpoint was trained on a dataset with different grid or normalization"));
        }
        cfg.train = ckpt.meta.train.clone();
        cfg.unet = ckpt.meta.unet.clone();
        let sched = ckpt.meta.train.schedule()?;
        log::info!("sampling {} cases x {} draws", pairs.len(), cfg.eval.samples_per_case);
        predict_pairs(&ckpt.denoiser(), &sched, &pairs, stats, cfg.eval.samples_per_case, cfg.eval.seed)?
    };
    let report = MetricsReport::from_cases(&cases, cfg.eval.bins)?;
    let zero = MetricsReport::from_cases(&zero_cases(&pairs, stats), cfg.eval.bins)?;
    let (taus, series): (Vec<f64>, Vec<f64>) = report
        .per_tau(Component::All)
        .iter()
        .map(|r| (r.tau.expect("per-tau rows carry tau"), r.rmse))
        .unzip();
    let summary = EvalSummary {
        split: cfg.eval.split,
        oracle: a.oracle,
        samples_per_case: cfg.eval.samples_per_case,
        n_cases: cases.len(),
        zero_baseline: Baseline {
            mae: zero.global_mae,
            rmse: zero.global_rmse,
        },
        rmse_ratio_to_zero: report.global_rmse / zero.global_rmse,
        tau_rmse_spearman: spearman(&taus, &series),
        mse_identity_gap: report.mse_identity_gap(),
        report: &report,
    };

    create_dir(&a.out)?;
    write_file(&a.out.join("metrics.csv"), report.metrics_csv().as_bytes())?;
    for c in [Component::Ux, Component::Uy, Component::All] {
        if let Some(csv) = report.histogram_csv(c) {
            write_file(&a.out.join(format!("hist_{}.csv", c.name())), csv.as_bytes())?;
        }
    }
    let json = serde_json::to_string_pretty(&summary).expect("report serializes") + "\n";
    write_file(&a.out.join("report.json"), json.as_bytes())?;
    cfg.echo(&a.out)?;
    log::info!(
        "MAE {:.5} RMSE {:.5} (zero baseline RMSE {:.5})",
        report.global_mae,
        report.global_rmse,
        zero.global_rmse
    );
    Ok(())
}

fn schedule(a: ScheduleArgs) -> Result<(), Failure> {
    let sched = make_schedule(a.steps, a.beta_start, a.beta_end)?;
    write_file(&a.out, sched.to_csv().as_bytes())?;
    let mut cfg = RunConfig::default();
    cfg.train.steps = a.steps;
    cfg.train.beta_start = a.beta_start;
    cfg.train.beta_end = a.beta_end;
    write_file(&sibling_echo(&a.out), cfg.to_json().as_bytes())
}
