//! Dataset generation, training and advection benchmarks from the command line.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use mlsl::bench::contour::emit_contour;
use mlsl::bench::{
    rotation_center, rotation_period, run_rotation, run_vortex, write_report_csv, write_timing, BenchRun,
    BenchSettings, Method, DISK_RADIUS,
};
use mlsl::dataset::{
    generate_dataset, read_dataset_csv, stratified_split, write_dataset_csv, write_manifest, GenerationConfig, Manifest,
    DEFAULT_BINS, SPLIT_FRACTIONS,
};
use mlsl::hybrid::write_step_csv;
use mlsl::neural::{
    evaluate, evaluate_numerical, fit_bundle, load_model, sample_set, save_model, write_training_log, EvalReport,
    TrainConfig,
};
use mlsl::preprocess::DEFAULT_COMPONENTS;

#[derive(Parser)]
#[command(name = "mlsl", version, about = "Neural error correction for semi-Lagrangian level-set advection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate labeled training tuples from paired coarse/fine simulations.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Override the generation seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit preprocessing and train the corrector on a generated dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory holding dataset.csv and manifest.json.
        #[arg(long)]
        data: PathBuf,
    },
    /// Run the rotation or vortex benchmark.
    Bench(BenchArgs),
    /// Print a summary of a saved model.
    InspectModel { path: PathBuf },
}

#[derive(Args)]
struct Common {
    /// TOML file with optional [generation], [training] and [preprocess] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Case {
    Rotation,
    Vortex,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Numerical,
    Hybrid,
}

#[derive(Args)]
struct BenchArgs {
    case: Case,
    #[arg(long, value_enum, default_value = "numerical")]
    method: MethodArg,
    #[arg(long, default_value_t = 6)]
    lmax: u32,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Rotation only.
    #[arg(long, default_value_t = 1)]
    revolutions: usize,
    /// Vortex only: time at which the flow reverses.
    #[arg(long, default_value_t = 0.625)]
    t_mid: f64,
    #[arg(long, default_value_t = 10)]
    nu: usize,
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    generation: GenerationConfig,
    training: TrainConfig,
    preprocess: PreprocessConfig,
}

#[derive(Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PreprocessConfig {
    n_components: usize,
    split_seed: u64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { n_components: DEFAULT_COMPONENTS, split_seed: 0 }
    }
}

fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn gen_data(common: &Common, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(common.config.as_deref())?.generation;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    fs::create_dir_all(&common.out)?;
    let (tuples, manifest) = generate_dataset(&cfg)?;
    write_dataset_csv(&tuples, &common.out.join("dataset.csv"))?;
    write_manifest(&manifest, &common.out.join("manifest.json"))?;
    log::info!("{} tuples from {} runs", tuples.len(), manifest.runs.len());
    Ok(())
}

fn write_evaluation(path: &Path, model: &EvalReport, numerical: &EvalReport) -> Result<()> {
    let mut s = String::from("predictor,mae,linf,rmse\n");
    for (name, r) in [("model", model), ("numerical", numerical)] {
        s.push_str(&format!("{name},{:.16e},{:.16e},{:.16e}\n", r.mae, r.linf, r.rmse));
    }
    fs::write(path, s)?;
    Ok(())
}

fn train_cmd(common: &Common, data: &Path) -> Result<()> {
    let FileConfig { training, preprocess, .. } = load_config(common.config.as_deref())?;
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(data.join("manifest.json"))?).context("reading manifest.json")?;
    let tuples = read_dataset_csv(&data.join("dataset.csv"))?;
    let split = stratified_split(&tuples, SPLIT_FRACTIONS, DEFAULT_BINS, preprocess.split_seed)?;
    let h = manifest.config.h_c();
    let (bundle, log) = fit_bundle(&split.train, &split.validation, h, manifest.config.l_c_max, preprocess.n_components, &training)?;
    fs::create_dir_all(&common.out)?;
    save_model(&bundle, &common.out.join("model.json"))?;
    write_training_log(&log, &common.out.join("training_log.csv"))?;
    let test = sample_set(&split.test, &bundle.stats, &bundle.pca, h)?;
    let (m, n) = (evaluate(&bundle.mlp, &test)?, evaluate_numerical(&test)?);
    write_evaluation(&common.out.join("evaluation.csv"), &m, &n)?;
    println!("test MAE: model {:.4e}, numerical {:.4e} ({:.2}x)", m.mae, n.mae, n.mae / m.mae);
    Ok(())
}

fn bench_cmd(a: &BenchArgs) -> Result<()> {
    let method = match a.method {
        MethodArg::Numerical => Method::Numerical,
        MethodArg::Hybrid => Method::Hybrid,
    };
    let model = match (&a.model, method) {
        (Some(p), _) => Some(load_model(p)?),
        (None, Method::Hybrid) => bail!("--method hybrid needs --model"),
        (None, Method::Numerical) => None,
    };
    let mut s = BenchSettings::new(a.lmax);
    s.nu = a.nu;
    fs::create_dir_all(&a.out)?;
    let (run, reference): (BenchRun, (_, f64)) = match a.case {
        Case::Rotation => {
            let run = run_rotation(method, &s, a.revolutions, model.as_ref())?;
            let c = rotation_center(rotation_period() * a.revolutions as f64);
            (run, (c, DISK_RADIUS))
        }
        Case::Vortex => (run_vortex(method, &s, a.t_mid, model.as_ref())?, ([0.5, 0.75], DISK_RADIUS)),
    };
    write_report_csv(&run.reports, &a.out.join("report.csv"))?;
    write_timing(&run, &a.out.join("timing.csv"))?;
    if method == Method::Hybrid {
        write_step_csv(&run.step_stats, &a.out.join("steps.csv"))?;
    }
    let st = &run.final_state;
    emit_contour(&st.grid, &st.phi, &a.out.join("contour"), Some(reference))?;
    for r in &run.reports {
        if r.vanished {
            log::warn!("{}: interface vanished", r.label);
        }
        println!("{:>6}  t={:.4}  mae={:.4e}  linf={:.4e}  area_loss={:.3}%", r.label, r.time, r.mae, r.linf, r.area_loss_pct);
    }
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    let b = load_model(path)?;
    println!("l_max          {}", b.l_max);
    println!("h              {:e}", b.h);
    println!("components     {}", b.mlp.n_components);
    println!("hidden widths  {:?}", b.mlp.hidden_widths());
    println!("parameters     {}", b.mlp.parameter_count());
    println!("eigenvalues    {:?}", b.pca.eigenvalues.iter().map(|v| format!("{v:.3e}")).collect::<Vec<_>>());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::GenData { common, seed } => gen_data(common, *seed),
        Command::Train { common, data } => train_cmd(common, data),
        Command::Bench(a) => bench_cmd(a),
        Command::InspectModel { path } => inspect(path),
    }
}
