use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cookscale_core::bootstrap::BootstrapMode;
use cookscale_core::deletion::{singletons, SubsetIndex};
use cookscale_core::experiment::{run_figure1_default, run_table1};
use cookscale_core::io::{dataset_to_csv, read_dataset, read_subsets};
use cookscale_core::model::{fit, FitOptions, InfoMode, Interest, ModelKind};
use cookscale_core::report::{diagnose, DiagnoseOptions};
use cookscale_core::scenario::{gen_scenario, ScenarioConfig, ScenarioKind, SweepPoint};
use cookscale_core::{Dataset, Error};

#[derive(Parser)]
#[command(
    name = "cookscale",
    version,
    about = "Scaled Cook's distance diagnostics for linear and linear mixed models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the model and print the fit as JSON.
    Fit(Shared),
    /// Influence report for a list of subsets.
    Diagnose(Shared),
    /// Write simulated clustered data sets as CSV.
    Simulate(SimArgs),
    /// Run a simulation experiment and write its aggregate CSV.
    Experiment(ExperimentArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Lm,
    Lmm,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Exact,
    Approx,
}

#[derive(Clone, Copy, ValueEnum)]
enum InterestArg {
    Beta,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum InfoArg {
    Observed,
    Expected,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExperimentName {
    Table1,
    Figure1,
}

#[derive(Args)]
struct Shared {
    /// Input CSV (`y,x1,..` or `cluster,y,x1,..`).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    /// `singletons`, `clusters`, or a file with one comma-separated subset per line.
    #[arg(long)]
    subsets: Option<String>,
    /// Bootstrap replicates (0 disables calibration).
    #[arg(long = "S")]
    replicates: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Scale conditionally on the design (default true).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    conditional: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    interest: Option<InterestArg>,
    /// Information used for the weighting matrix and first-order distances.
    #[arg(long, value_enum)]
    info: Option<InfoArg>,
    /// Monte Carlo draws for the perturbation cross-check (0 skips it).
    #[arg(long)]
    mc_draws: Option<usize>,
    /// File of `key = value` lines; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ScenarioArgs {
    /// Number of clusters.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    datasets: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SimArgs {
    #[command(flatten)]
    common: ScenarioArgs,
    /// `clean`, `injected` or `sweep`.
    #[arg(long)]
    scenario: Option<String>,
    /// Size of the last cluster in the sweep scenario.
    #[arg(long)]
    m_n: Option<usize>,
    /// Random intercept of the last cluster in the sweep scenario.
    #[arg(long)]
    b_n: Option<f64>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(value_enum)]
    name: ExperimentName,
    #[command(flatten)]
    common: ScenarioArgs,
    /// Bootstrap replicates per data set (default 200 for table1, 100 for figure1).
    #[arg(long = "S")]
    replicates: Option<usize>,
    /// `clean` or `injected` (table1 only).
    #[arg(long)]
    scenario: Option<String>,
}

/// Values from an optional `key = value` file; keys match the long flag names.
struct ConfigFile(HashMap<String, String>);

impl ConfigFile {
    fn load(path: Option<&Path>) -> Result<Self, Error> {
        let Some(path) = path else {
            return Ok(Self(HashMap::new()));
        };
        let text = fs::read_to_string(path)?;
        let mut map = HashMap::new();
        for (k, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                message: format!("line {}: expected `key = value`", k + 1),
            })?;
            map.insert(key.trim().replace('_', "-"), value.trim().to_string());
        }
        Ok(Self(map))
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, Error> {
        match self.0.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Invalid(format!("config value `{v}` for `{key}` is invalid"))),
        }
    }

    fn pick<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, Error> {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.get(key),
        }
    }
}

fn parse_model(s: &str) -> Result<ModelKind, Error> {
    match s {
        "lm" => Ok(ModelKind::Lm),
        "lmm" => Ok(ModelKind::Lmm),
        _ => Err(Error::Invalid(format!("unknown model `{s}`"))),
    }
}

fn parse_scenario(s: &str) -> Result<ScenarioKind, Error> {
    match s {
        "clean" => Ok(ScenarioKind::Clean),
        "injected" => Ok(ScenarioKind::Injected),
        "sweep" => Ok(ScenarioKind::Sweep),
        _ => Err(Error::Invalid(format!("unknown scenario `{s}`"))),
    }
}

fn init_threads(threads: Option<usize>) -> Result<(), Error> {
    let threads = match threads {
        Some(t) => Some(t),
        None => match std::env::var("COOKSCALE_THREADS") {
            Ok(v) => Some(
                v.trim()
                    .parse()
                    .map_err(|_| Error::Invalid(format!("COOKSCALE_THREADS=`{v}`")))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(t) = threads {
        if t == 0 {
            return Err(Error::Invalid("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<(), Error> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, contents)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

struct Loaded {
    data: Dataset,
    options: FitOptions,
    cfg: ConfigFile,
}

fn load(args: &Shared) -> Result<Loaded, Error> {
    let cfg = ConfigFile::load(args.config.as_deref())?;
    init_threads(cfg.pick(args.threads, "threads")?)?;
    let data_path: PathBuf = cfg
        .pick(args.data.clone(), "data")?
        .ok_or_else(|| Error::Invalid("--data is required".into()))?;
    let model = match args.model {
        Some(ModelArg::Lm) => ModelKind::Lm,
        Some(ModelArg::Lmm) => ModelKind::Lmm,
        None => match cfg.get::<String>("model")? {
            Some(m) => parse_model(&m)?,
            None => return Err(Error::Invalid("--model is required".into())),
        },
    };
    let interest = match args.interest {
        Some(InterestArg::Beta) => Interest::Beta,
        Some(InterestArg::Full) => Interest::Full,
        None => match cfg.get::<String>("interest")?.as_deref() {
            None | Some("beta") => Interest::Beta,
            Some("full") => Interest::Full,
            Some(other) => return Err(Error::Invalid(format!("unknown interest `{other}`"))),
        },
    };
    let info_mode = match args.info {
        Some(InfoArg::Observed) => InfoMode::Observed,
        Some(InfoArg::Expected) => InfoMode::Expected,
        None => match cfg.get::<String>("info")?.as_deref() {
            None | Some("observed") => InfoMode::Observed,
            Some("expected") => InfoMode::Expected,
            Some(other) => return Err(Error::Invalid(format!("unknown information `{other}`"))),
        },
    };
    let data = read_dataset(&data_path, model)?;
    let options = FitOptions {
        interest,
        info_mode,
        ..Default::default()
    };
    Ok(Loaded { data, options, cfg })
}

fn run_fit(args: &Shared) -> Result<(), Error> {
    let Loaded { data, options, cfg } = load(args)?;
    let result = fit(&data, &options)?;
    let json = serde_json::to_string_pretty(&result.to_json()).expect("fit serializes") + "\n";
    match cfg.pick(args.out.clone(), "out")? {
        Some(dir) => write_file(&dir, "fit.json", &json),
        None => {
            print!("{json}");
            Ok(())
        }
    }
}

fn resolve_subsets(spec: &str, data: &Dataset) -> Result<Vec<SubsetIndex>, Error> {
    match spec {
        "singletons" => singletons(data),
        "clusters" => match data {
            Dataset::Lmm(_) => singletons(data),
            Dataset::Lm(_) => Err(Error::Invalid(
                "`clusters` subsets need clustered data".into(),
            )),
        },
        path => read_subsets(Path::new(path), data),
    }
}

fn run_diagnose(args: &Shared) -> Result<(), Error> {
    let Loaded { data, options, cfg } = load(args)?;
    let result = fit(&data, &options)?;
    let spec: String = cfg
        .pick(args.subsets.clone(), "subsets")?
        .unwrap_or_else(|| "singletons".into());
    let subsets = resolve_subsets(&spec, &data)?;
    let mut opts = DiagnoseOptions::default_for(result.model);
    if let Some(s) = cfg.pick(args.replicates, "S")? {
        opts.replicates = s;
    }
    let mode = match args.mode {
        Some(ModeArg::Exact) => Some("exact".to_string()),
        Some(ModeArg::Approx) => Some("approx".to_string()),
        None => cfg.get::<String>("mode")?,
    };
    match mode.as_deref() {
        None => {}
        Some("exact") => opts.mode = BootstrapMode::Exact,
        Some("approx") => opts.mode = BootstrapMode::FirstOrder,
        Some(other) => return Err(Error::Invalid(format!("unknown mode `{other}`"))),
    }
    if let Some(c) = cfg.pick(args.conditional, "conditional")? {
        opts.conditional = c;
    }
    if let Some(s) = cfg.pick(args.seed, "seed")? {
        opts.seed = s;
    }
    if let Some(d) = cfg.pick(args.mc_draws, "mc-draws")? {
        opts.mc_draws = d;
    }
    let report = diagnose(&data, &result, &subsets, &opts)?;
    let out: PathBuf = cfg
        .pick(args.out.clone(), "out")?
        .unwrap_or_else(|| PathBuf::from("."));
    write_file(&out, "report.csv", &report.to_csv())?;
    write_file(&out, "report.json", &report.to_json())?;
    write_file(&out, "perturbation.csv", &report.perturbation_csv())
}

fn scenario_config(
    args: &ScenarioArgs,
    cfg: &ConfigFile,
    datasets_default: usize,
) -> Result<ScenarioConfig, Error> {
    let mut sc = ScenarioConfig {
        n_datasets: datasets_default,
        ..Default::default()
    };
    if let Some(n) = cfg.pick(args.n, "n")? {
        sc.n = n;
    }
    if let Some(d) = cfg.pick(args.datasets, "datasets")? {
        sc.n_datasets = d;
    }
    if let Some(s) = cfg.pick(args.seed, "seed")? {
        sc.seed = s;
    }
    Ok(sc)
}

fn run_simulate(args: &SimArgs) -> Result<(), Error> {
    let cfg = ConfigFile::load(args.common.config.as_deref())?;
    init_threads(cfg.pick(args.common.threads, "threads")?)?;
    let mut sc = scenario_config(&args.common, &cfg, 1)?;
    if let Some(s) = cfg.pick(args.scenario.clone(), "scenario")? {
        sc.scenario = parse_scenario(&s)?;
    }
    sc.sweep = SweepPoint {
        m_n: cfg.pick(args.m_n, "m-n")?.unwrap_or(sc.sweep.m_n),
        b_n: cfg.pick(args.b_n, "b-n")?.unwrap_or(sc.sweep.b_n),
    };
    let out: PathBuf = cfg
        .pick(args.common.out.clone(), "out")?
        .unwrap_or_else(|| PathBuf::from("."));
    for (k, d) in gen_scenario(&sc)?.into_iter().enumerate() {
        write_file(
            &out,
            &format!("dataset_{:03}.csv", k + 1),
            &dataset_to_csv(&Dataset::Lmm(d)),
        )?;
    }
    Ok(())
}

fn run_experiment(args: &ExperimentArgs) -> Result<(), Error> {
    let cfg = ConfigFile::load(args.common.config.as_deref())?;
    init_threads(cfg.pick(args.common.threads, "threads")?)?;
    let mut sc = scenario_config(&args.common, &cfg, 100)?;
    let out: PathBuf = cfg
        .pick(args.common.out.clone(), "out")?
        .unwrap_or_else(|| PathBuf::from("."));
    match args.name {
        ExperimentName::Table1 => {
            if let Some(s) = cfg.pick(args.scenario.clone(), "scenario")? {
                sc.scenario = parse_scenario(&s)?;
            }
            let s = cfg.pick(args.replicates, "S")?.unwrap_or(200);
            let table = run_table1(&sc, s)?;
            write_file(&out, "table1.csv", &table.to_csv())
        }
        ExperimentName::Figure1 => {
            let s = cfg.pick(args.replicates, "S")?.unwrap_or(100);
            let fig = run_figure1_default(&sc, s)?;
            write_file(&out, "figure1.csv", &fig.to_csv())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Fit(a) => run_fit(a),
        Command::Diagnose(a) => run_diagnose(a),
        Command::Simulate(a) => run_simulate(a),
        Command::Experiment(a) => run_experiment(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}
