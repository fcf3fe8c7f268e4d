use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use soav_mud::detect::{soav_weights, DetectorConfig, DetectorKind};
use soav_mud::frontend::{FrontendModel, WaveformBank, WhitenMode};
use soav_mud::harness::{parse_values, run_sweep, write_csv, ExperimentConfig, SweepResult};
use soav_mud::optim::ProxRule;
use soav_mud::prior::SymbolPrior;
use soav_mud::soav::{build_weight_system, default_offset};

#[derive(Parser)]
#[command(name = "soav-sim", version, about = "Monte Carlo experiments for ternary multiuser detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sweep SNR (or rho) and report mean error ratios as CSV.
    Simulate(SimulateArgs),
    /// Sweep the non-active rate at a fixed noise variance.
    SweepRho(SweepRhoArgs),
    /// Print the relaxation weights for a given non-active rate.
    Weights(WeightsArgs),
    /// Small-system comparison that includes exhaustive MAP search.
    OracleCompare(OracleArgs),
    /// Build whitened signature matrices from a waveform bank.
    Frontend(FrontendArgs),
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON experiment config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated detector list, e.g. lmmse,lasso,map-soav.
    #[arg(long, value_delimiter = ',')]
    detectors: Option<Vec<DetectorKind>>,
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    meas: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores). Does not affect results.
    #[arg(long)]
    parallelism: Option<usize>,
    /// Reuse one signature matrix for every trial.
    #[arg(long)]
    fix_matrix: bool,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    offset: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    rel_tol: Option<f64>,
    /// Use the exact enumeration prox instead of the closed form.
    #[arg(long)]
    exact_prox: bool,
    /// Output CSV path; stdout when absent.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    /// Non-active rate: a value, a comma list, or start:stop:step.
    #[arg(long)]
    rho: Option<String>,
    /// SNR in dB: a value, a comma list, or start:stop:step.
    #[arg(long)]
    snr: Option<String>,
    /// Fixed noise variance instead of an SNR axis.
    #[arg(long)]
    sigma2: Option<f64>,
}

#[derive(Args)]
struct SweepRhoArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "0.05,0.2,0.5,0.8,0.95")]
    rho: String,
    #[arg(long, default_value_t = 0.0226)]
    sigma2: f64,
}

#[derive(Args)]
struct WeightsArgs {
    #[arg(long)]
    rho: f64,
    #[arg(long, default_value_t = soav_mud::soav::DEFAULT_OFFSET)]
    offset: f64,
    /// Emit JSON instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct OracleArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "0.8")]
    rho: String,
    #[arg(long, default_value = "12")]
    snr: String,
}

#[derive(Args)]
struct FrontendArgs {
    /// JSON file with sample_period, signatures and filters.
    #[arg(long)]
    bank: PathBuf,
    #[arg(long, default_value = "symmetric")]
    mode: String,
}

fn base_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::from_json_file(path).with_context(|| format!("reading {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(kinds) = &common.detectors {
        cfg.detectors = kinds.iter().map(|&k| DetectorConfig::new(k)).collect();
    }
    macro_rules! set {
        ($field:expr, $value:expr) => {
            if let Some(v) = $value {
                $field = v;
            }
        };
    }
    set!(cfg.n_users, common.users);
    set!(cfg.n_meas, common.meas);
    set!(cfg.trials, common.trials);
    set!(cfg.master_seed, common.seed);
    set!(cfg.parallelism, common.parallelism);
    cfg.fix_matrix |= common.fix_matrix;
    for d in &mut cfg.detectors {
        set!(d.lambda, common.lambda);
        set!(d.alpha, common.alpha);
        set!(d.offset, common.offset);
        set!(d.solver.max_iters, common.max_iters);
        set!(d.solver.rel_tol, common.rel_tol);
        if common.exact_prox {
            d.prox = ProxRule::Exact;
        }
    }
    Ok(cfg)
}

fn run_and_write(cfg: &ExperimentConfig, out: &Option<PathBuf>) -> Result<Vec<SweepResult>> {
    cfg.validate()?;
    let results = run_sweep(cfg)?;
    match out {
        Some(path) => {
            let file = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
            write_csv(&results, cfg, std::io::BufWriter::new(file))?;
        }
        None => write_csv(&results, cfg, std::io::stdout().lock())?,
    }
    Ok(results)
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let mut cfg = base_config(&args.common)?;
    if let Some(rho) = &args.rho {
        cfg.rho = parse_values(rho)?;
    }
    if let Some(snr) = &args.snr {
        cfg.snr_db = Some(parse_values(snr)?);
        cfg.sigma_w2_override = None;
    }
    if let Some(s2) = args.sigma2 {
        if args.snr.is_some() {
            bail!("--snr and --sigma2 are mutually exclusive");
        }
        cfg.sigma_w2_override = Some(s2);
        cfg.snr_db = None;
    }
    run_and_write(&cfg, &args.common.out).map(drop)
}

fn sweep_rho(args: SweepRhoArgs) -> Result<()> {
    let mut cfg = base_config(&args.common)?;
    cfg.rho = parse_values(&args.rho)?;
    cfg.sigma_w2_override = Some(args.sigma2);
    cfg.snr_db = None;
    run_and_write(&cfg, &args.common.out).map(drop)
}

fn oracle_compare(args: OracleArgs) -> Result<()> {
    let mut common = args.common.clone();
    common.users = common.users.or(Some(8));
    common.meas = common.meas.or(Some(6));
    common.trials = common.trials.or(Some(200));
    let mut cfg = base_config(&common)?;
    if common.detectors.is_none() && common.config.is_none() {
        cfg.detectors.push(DetectorConfig::new(DetectorKind::ExhaustiveMap));
    }
    cfg.rho = parse_values(&args.rho)?;
    cfg.snr_db = Some(parse_values(&args.snr)?);
    cfg.sigma_w2_override = None;
    let results = run_and_write(&cfg, &common.out)?;
    let mut err = std::io::stderr().lock();
    for r in &results {
        let best = r
            .detectors
            .iter()
            .min_by(|a, b| a.error_ratio.total_cmp(&b.error_ratio))
            .expect("at least one detector");
        writeln!(err, "{}={}: lowest error ratio {} ({})", r.axis.name(), r.axis_value, best.error_ratio, best.kind)?;
    }
    Ok(())
}

fn weights(args: WeightsArgs) -> Result<()> {
    let prior = SymbolPrior::bpsk_with_inactivity(args.rho)?;
    let c = default_offset(&prior, args.offset);
    let w = soav_weights(&prior, args.offset)?;
    let (_, p_c) = build_weight_system(&prior, c);
    if args.json {
        let value = serde_json::json!({
            "rho": args.rho,
            "alphabet": prior.alphabet(),
            "probs": prior.probs(),
            "C": w.c,
            "q": w.q,
            "P_C": p_c.as_slice(),
            "convex": w.is_convex(),
        });
        println!("{}", serde_json::to_string_pretty(&value)?);
    } else {
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(", ");
        println!("rho    = {}", args.rho);
        println!("C      = {:.4}", w.c);
        println!("P_C    = [{}]", fmt(p_c.as_slice()));
        println!("q      = [{}]", fmt(&w.q));
        println!("convex = {}", w.is_convex());
    }
    Ok(())
}

fn frontend(args: FrontendArgs) -> Result<()> {
    let mode: WhitenMode = serde_json::from_value(serde_json::Value::String(args.mode.clone()))
        .with_context(|| format!("unknown whitening mode {:?} (paper or symmetric)", args.mode))?;
    let bank = WaveformBank::from_json_file(&args.bank).with_context(|| format!("reading {}", args.bank.display()))?;
    let model = FrontendModel::build(&bank, mode)?;
    let rows = |m: &nalgebra::DMatrix<f64>| -> Vec<Vec<f64>> {
        m.row_iter().map(|r| r.iter().copied().collect()).collect()
    };
    let value = serde_json::json!({
        "mode": mode,
        "s_tilde": rows(&model.s_tilde),
        "h": rows(&model.h),
        "s": rows(&model.s),
        "noise_transform": rows(&model.noise_transform),
    });
    println!("{}", serde_json::to_string_pretty(&value)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::SweepRho(a) => sweep_rho(a),
        Command::Weights(a) => weights(a),
        Command::OracleCompare(a) => oracle_compare(a),
        Command::Frontend(a) => frontend(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
