//! `mwiv`: many-instrument IV inference from the command line.
//!
//! Every subcommand prints one JSON document `{manifest, result, warnings}`
//! to stdout. Exit codes: 0 success, 1 data or validation error, 2 usage
//! error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use mwiv::artest::{ar_test, invert_ar, VarianceMethod};
use mwiv::confset::{Extended, Grid};
use mwiv::dataio::{load_csv, partial_out, InstrumentSelector, Roles};
use mwiv::jive::{jive_ci, jive_estimate};
use mwiv::kernels::ProjectionCache;
use mwiv::pretest::{
    audit_table2, calibrate_cutoff, pretest_f, rmax_rho_scan, simulate_rmax, two_step, two_step_ci, TwoStepConfig,
    DEFAULT_CUTOFF, TABLE2,
};
use mwiv::simulate::{
    build_cache, power_curve, run_study, DesignSpec, FirstStage, GroupDesign, SimulationSpec,
};
use mwiv::{Dataset64, Error, ProjectionCache64};

const COMPUTE_THRESHOLD: f64 = 0.99;
const REPORT_THRESHOLD: f64 = 0.5;

#[derive(Parser, Debug)]
#[command(name = "mwiv", version, about = "Weak-identification-robust inference with many instruments")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "MWIV_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Jackknife AR test of `beta = beta0`.
    ArTest(ArTestArgs),
    /// Jackknife AR confidence set.
    ArCi(ArCiArgs),
    /// JIVE estimate with its robust Wald interval.
    Jive(JiveArgs),
    /// Weak-identification pre-test.
    Pretest(PretestArgs),
    /// Two-step test.
    Twostep(TwostepArgs),
    /// Two-step confidence set.
    TwostepCi(TwostepCiArgs),
    /// Hat values and design balance.
    Diagnose(DiagnoseArgs),
    /// Monte Carlo study from a TOML spec.
    Study(StudyArgs),
    /// Power curves of the cross-fit and naive AR tests.
    Power(PowerArgs),
    /// Worst-case two-step rejection rate in the limit experiment.
    Rmax(RmaxArgs),
    /// Pre-test cutoff and audit of the built-in two-step table.
    Calibrate(CalibrateArgs),
}

#[derive(Args, Debug, Serialize)]
struct DataArgs {
    /// CSV file with a header row.
    #[arg(long)]
    data: PathBuf,
    /// Outcome column.
    #[arg(long)]
    y: String,
    /// Endogenous regressor column.
    #[arg(long)]
    x: String,
    /// Instrument columns, comma separated.
    #[arg(long, value_delimiter = ',', required_unless_present = "z_prefix", conflicts_with = "z_prefix")]
    z: Vec<String>,
    /// Use every column starting with this prefix as an instrument.
    #[arg(long)]
    z_prefix: Option<String>,
    /// Control columns, comma separated; an intercept is added with them.
    #[arg(long, value_delimiter = ',')]
    w: Vec<String>,
}

#[derive(Debug, Clone, Copy, Serialize)]
struct GridArg {
    lo: f64,
    hi: f64,
    points: usize,
}

impl From<GridArg> for Grid {
    fn from(g: GridArg) -> Self {
        Grid::new(g.lo, g.hi, g.points)
    }
}

fn parse_grid(s: &str) -> Result<GridArg, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [lo, hi, n] = parts[..] else {
        return Err("expected lo,hi,n".into());
    };
    let lo: f64 = lo.parse().map_err(|e| format!("lo: {e}"))?;
    let hi: f64 = hi.parse().map_err(|e| format!("hi: {e}"))?;
    let points: usize = n.parse().map_err(|e| format!("n: {e}"))?;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) || points < 2 {
        return Err("need finite lo < hi and n ≥ 2".into());
    }
    Ok(GridArg { lo, hi, points })
}

fn parse_first_stage(s: &str) -> Result<FirstStage, String> {
    match s {
        "sparse" => Ok(FirstStage::Sparse),
        "dense" => Ok(FirstStage::Dense),
        "zero" => Ok(FirstStage::Zero),
        _ => match s.strip_prefix("strength:") {
            Some(v) => v.parse().map(FirstStage::Strength).map_err(|e| format!("strength: {e}")),
            None => Err("expected sparse, dense, zero or strength:<value>".into()),
        },
    }
}

fn parse_unit(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err("must lie in (0, 1)".into())
    }
}

#[derive(Args, Debug, Serialize)]
struct ArTestArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    beta0: f64,
    #[arg(long, default_value_t = 0.05, value_parser = parse_unit)]
    alpha: f64,
    #[arg(long, default_value = "crossfit")]
    variance: VarianceMethod,
}

#[derive(Args, Debug, Serialize)]
struct ArCiArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 0.05, value_parser = parse_unit)]
    alpha: f64,
    #[arg(long, default_value = "crossfit")]
    variance: VarianceMethod,
    /// Inversion grid `lo,hi,n` (default: JIVE estimate ± 50 se, 2001 points).
    #[arg(long, allow_hyphen_values = true, value_parser = parse_grid)]
    grid: Option<GridArg>,
}

#[derive(Args, Debug, Serialize)]
struct JiveArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 0.05, value_parser = parse_unit)]
    alpha: f64,
}

#[derive(Args, Debug, Serialize)]
struct PretestArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = DEFAULT_CUTOFF)]
    cutoff: f64,
}

#[derive(Args, Debug, Serialize)]
struct ConfigArgs {
    /// Declared overall size in percent: 15, 5 or 10.
    #[arg(long, default_value_t = 15)]
    overall: u32,
    /// Row of the calibrated table for that size.
    #[arg(long)]
    row: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
struct TwostepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    beta0: f64,
}

#[derive(Args, Debug, Serialize)]
struct TwostepCiArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, allow_hyphen_values = true, value_parser = parse_grid)]
    grid: Option<GridArg>,
}

#[derive(Args, Debug, Serialize)]
struct DiagnoseArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = COMPUTE_THRESHOLD, value_parser = parse_unit)]
    threshold: f64,
}

#[derive(Args, Debug, Serialize)]
struct StudyArgs {
    /// TOML study spec.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the spec's replication count.
    #[arg(long)]
    reps: Option<usize>,
    /// Directory for `study.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct PowerArgs {
    /// TOML study spec; its design, alpha, seed and reps are used.
    #[arg(long, conflicts_with_all = ["n", "k", "rho", "first_stage"])]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 40)]
    k: usize,
    #[arg(long, default_value_t = 0.2)]
    rho: f64,
    /// sparse, dense, zero or strength:<mu2/sqrt(K)>.
    #[arg(long, default_value = "sparse", value_parser = parse_first_stage)]
    first_stage: FirstStage,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true,
          default_value = "-1,-0.75,-0.5,-0.25,0,0.25,0.5,0.75,1")]
    deltas: Vec<f64>,
    #[arg(long, value_parser = parse_unit)]
    alpha: Option<f64>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for `power.csv` and `power.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct RmaxArgs {
    #[arg(long)]
    s: f64,
    #[arg(long, default_value_t = 0.05, value_parser = parse_unit)]
    alpha: f64,
    #[arg(long, default_value_t = 1_000_000)]
    draws: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Also report the rejection rate over a grid of correlations.
    #[arg(long)]
    scan: bool,
}

#[derive(Args, Debug, Serialize)]
struct CalibrateArgs {
    #[arg(long, default_value_t = 2.5)]
    s_star: f64,
    #[arg(long, default_value_t = 0.05, value_parser = parse_unit)]
    level: f64,
    /// Audit the built-in table by simulation.
    #[arg(long)]
    audit: bool,
    #[arg(long, default_value_t = 1_000_000)]
    draws: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Serialize)]
struct Manifest<'a> {
    subcommand: &'a str,
    options: Value,
    input_sha256: Option<String>,
    version: &'static str,
    seed: Option<u64>,
    timestamp: String,
}

struct Output {
    result: Value,
    warnings: Vec<String>,
    input: Option<PathBuf>,
    seed: Option<u64>,
}

impl Output {
    fn new(result: impl Serialize) -> Result<Self, Error> {
        Ok(Self {
            result: to_value(result)?,
            warnings: Vec::new(),
            input: None,
            seed: None,
        })
    }
}

fn to_value(v: impl Serialize) -> Result<Value, Error> {
    serde_json::to_value(v).map_err(|e| Error::Config(e.to_string()))
}

fn sha256_file(path: &Path) -> Result<String, Error> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

struct Loaded {
    data: Dataset64,
    cache: ProjectionCache64,
    warnings: Vec<String>,
}

fn load(a: &DataArgs) -> Result<Loaded, Error> {
    let roles = Roles {
        outcome: a.y.clone(),
        endogenous: a.x.clone(),
        instruments: match &a.z_prefix {
            Some(p) => InstrumentSelector::Prefix(p.clone()),
            None => InstrumentSelector::Columns(a.z.clone()),
        },
        controls: a.w.clone(),
    };
    let data: Dataset64 = partial_out(&load_csv(&a.data, &roles)?)?;
    let cache = ProjectionCache::build(&data)?;
    let mut warnings = Vec::new();
    let b = cache.check_balance(COMPUTE_THRESHOLD);
    if !b.balanced {
        warnings.push(format!(
            "unbalanced design: {} observations with P_ii > {} (max {:.6})",
            b.n_above, b.threshold, b.delta_max
        ));
    }
    Ok(Loaded { data, cache, warnings })
}

fn with_data(a: &DataArgs, f: impl FnOnce(&Loaded) -> Result<Output, Error>) -> Result<Output, Error> {
    let l = load(a)?;
    let mut out = f(&l)?;
    let mut w = l.warnings.clone();
    w.append(&mut out.warnings);
    out.warnings = w;
    out.input = Some(a.data.clone());
    Ok(out)
}

fn decision(reject: bool) -> &'static str {
    if reject {
        "reject"
    } else {
        "accept"
    }
}

fn merge(mut base: Value, extra: Value) -> Value {
    if let (Value::Object(b), Value::Object(e)) = (&mut base, extra) {
        b.extend(e);
    }
    base
}

fn spec_for_power(a: &PowerArgs) -> Result<(SimulationSpec, Option<PathBuf>), Error> {
    let mut spec = match &a.config {
        Some(p) => SimulationSpec::from_path(p)?,
        None => SimulationSpec::new(
            DesignSpec::Group(GroupDesign::new(a.n, a.k, a.rho, a.first_stage.clone())?),
            1000,
            0,
        ),
    };
    if let Some(r) = a.reps {
        spec.reps = r;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(al) = a.alpha {
        spec.alpha = al;
    }
    Ok((spec, a.config.clone()))
}

fn write_out(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), Error> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), bytes)?;
    Ok(())
}

fn run(cmd: &Command) -> Result<(Output, Option<(PathBuf, &'static str)>), Error> {
    let out = match cmd {
        Command::ArTest(a) => with_data(&a.data, |l| {
            let r = ar_test(&l.data, &l.cache, a.beta0, a.alpha, a.variance)?;
            let mut o = Output::new(json!({
                "statistic": r.statistic,
                "variance": r.variance,
                "method": a.variance,
                "decision": decision(r.reject),
                "beta0": r.beta0,
                "numerator": r.numerator,
                "critical_value": r.critical_value,
                "alpha": r.alpha,
            }))?;
            if r.variance.fallback {
                o.warnings.push("cross-fit variance degenerate; naive variance used".into());
            }
            Ok(o)
        })?,
        Command::ArCi(a) => with_data(&a.data, |l| {
            let set = invert_ar(&l.data, &l.cache, a.alpha, a.variance, a.grid.map(Grid::from))?;
            Output::new(merge(json!({ "method": a.variance }), to_value(&set)?))
        })?,
        Command::Jive(a) => with_data(&a.data, |l| {
            let r = jive_estimate(&l.data, &l.cache)?;
            let (ci, warn) = if r.variance_ok() {
                let s = jive_ci(&r, a.alpha)?;
                let (lo, hi) = s.intervals()[0];
                (json!([Extended(lo), Extended(hi)]), None)
            } else {
                (Value::Null, Some(format!("JIVE variance {:e} is not positive", r.var_hat)))
            };
            let mut o = Output::new(json!({
                "betaHat": r.beta_hat,
                "se": r.se,
                "ci": ci,
                "alpha": a.alpha,
                "varHat": r.var_hat,
                "numerator": r.numerator,
                "denominator": r.denominator,
            }))?;
            o.warnings.extend(warn);
            Ok(o)
        })?,
        Command::Pretest(a) => with_data(&a.data, |l| {
            let p = pretest_f(&l.data, &l.cache, a.cutoff)?;
            let mut o = Output::new(p)?;
            if p.fallback {
                o.warnings.push("cross-fit variance degenerate; naive variance used".into());
            }
            Ok(o)
        })?,
        Command::Twostep(a) => with_data(&a.data, |l| {
            let config = TwoStepConfig::from_table(a.config.overall, a.config.row)?;
            let r = two_step(&l.data, &l.cache, a.beta0, &config)?;
            let mut o = Output::new(merge(to_value(&r)?, json!({ "decision": decision(r.reject) })))?;
            o.warnings.extend(r.warning.clone());
            Ok(o)
        })?,
        Command::TwostepCi(a) => with_data(&a.data, |l| {
            let config = TwoStepConfig::from_table(a.config.overall, a.config.row)?;
            let r = two_step_ci(&l.data, &l.cache, &config, a.grid.map(Grid::from))?;
            let mut o = Output::new(&r)?;
            o.warnings.extend(r.warning.clone());
            Ok(o)
        })?,
        Command::Diagnose(a) => with_data(&a.data, |l| {
            let c = &l.cache;
            Output::new(json!({
                "n": c.n(),
                "k": c.k(),
                "group_design": c.is_group(),
                "delta_max": c.delta_max(),
                "balance": c.check_balance(a.threshold),
                "balance_report_threshold": c.check_balance(REPORT_THRESHOLD),
                "controls": l.data.provenance().controls,
                "intercept_partialled": l.data.provenance().intercept,
            }))
        })?,
        Command::Study(a) => {
            let mut spec = SimulationSpec::from_path(&a.config)?;
            if let Some(s) = a.seed {
                spec.seed = s;
            }
            if let Some(r) = a.reps {
                spec.reps = r;
            }
            let report = run_study(&spec)?;
            let mut o = Output::new(merge(json!({ "spec": to_value(&spec)? }), to_value(&report)?))?;
            o.warnings.extend(report.failures.iter().map(|(m, n)| format!("{n} failed replications: {m}")));
            o.input = Some(a.config.clone());
            o.seed = Some(spec.seed);
            return Ok((o, a.out.clone().map(|d| (d, "study.json"))));
        }
        Command::Power(a) => {
            let (spec, input) = spec_for_power(a)?;
            let design = spec.design.instantiate()?;
            let cache = build_cache(design.as_ref())?;
            let table = power_curve(design.as_ref(), &cache, &a.deltas, spec.alpha, spec.reps, spec.seed)?;
            if let Some(dir) = &a.out {
                let mut buf = Vec::new();
                table.write_csv(&mut buf)?;
                write_out(dir, "power.csv", &buf)?;
            }
            let mut o = Output::new(&table)?;
            o.input = input;
            o.seed = Some(spec.seed);
            return Ok((o, a.out.clone().map(|d| (d, "power.json"))));
        }
        Command::Rmax(a) => {
            let mut o = if a.scan {
                Output::new(rmax_rho_scan(a.s, a.alpha, a.draws, a.seed))?
            } else {
                Output::new(json!({
                    "s": a.s,
                    "alpha": a.alpha,
                    "draws": a.draws,
                    "rmax": simulate_rmax(a.s, a.alpha, a.draws, a.seed),
                }))?
            };
            o.seed = Some(a.seed);
            o
        }
        Command::Calibrate(a) => {
            let audit = if a.audit { Some(audit_table2(a.draws, a.seed)) } else { None };
            let mut o = Output::new(json!({
                "s_star": a.s_star,
                "level": a.level,
                "cutoff": calibrate_cutoff(a.s_star, a.level),
                "table": TABLE2,
                "audit": audit,
            }))?;
            if let Some(rows) = &audit {
                o.warnings
                    .extend(rows.iter().filter(|r| !r.pass).map(|r| format!("table row fails audit: {:?}", r.config)));
                o.seed = Some(a.seed);
            }
            o
        }
    };
    Ok((out, None))
}

fn subcommand_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::ArTest(_) => "ar-test",
        Command::ArCi(_) => "ar-ci",
        Command::Jive(_) => "jive",
        Command::Pretest(_) => "pretest",
        Command::Twostep(_) => "twostep",
        Command::TwostepCi(_) => "twostep-ci",
        Command::Diagnose(_) => "diagnose",
        Command::Study(_) => "study",
        Command::Power(_) => "power",
        Command::Rmax(_) => "rmax",
        Command::Calibrate(_) => "calibrate",
    }
}

fn execute(cli: &Cli) -> Result<String, Error> {
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    let (out, artifact) = run(&cli.command)?;
    let name = subcommand_name(&cli.command);
    let options = match to_value(&cli.command)? {
        Value::Object(mut m) => m.remove(name).unwrap_or(Value::Null),
        other => other,
    };
    let manifest = Manifest {
        subcommand: name,
        options,
        input_sha256: out.input.as_deref().map(sha256_file).transpose()?,
        version: env!("CARGO_PKG_VERSION"),
        seed: out.seed,
        timestamp: chrono::Utc::now().to_rfc3339(),
    };
    let doc = json!({ "manifest": manifest, "result": out.result, "warnings": out.warnings });
    let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::Config(e.to_string()))?;
    if let Some((dir, file)) = artifact {
        write_out(&dir, file, text.as_bytes())?;
    }
    Ok(text)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(&cli) {
        Ok(text) => {
            println!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
