//! The `riskgrad` command line: scenario ingestion, report, verification and
//! coherence runs.
//!
//! [`run`] never exits the process or panics on bad input; every failure comes
//! back as an [`Outcome`] carrying a JSON error object and the exit code
//! (0 success, 1 usage or parse, 2 numerical guard, 3 internal).

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::coherence::{self, SuiteConfig};
use crate::derivatives::{allocation_summary, evaluate, AllocationSummary, Query, QueryInput};
use crate::error::RiskError;
use crate::gaussian::{self, GaussianModel};
use crate::kernel::{Bandwidth, KernelConfig, KernelKind, DEFAULT_MIN_DENSITY};
use crate::model::{
    empirical_tail_moment, portfolio_outcomes, tail_indices, Method, RiskReport, RiskSpec, ScenarioSet, Tail, WeightVector,
};
use crate::oracle::{self, FDConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_GUARD: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "riskgrad", version, about = "Quantile and shortfall sensitivities of weighted sums")]
pub struct Cli {
    /// Worker threads for the numerical kernels (results do not depend on it).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute functionals, gradients and the Euler allocation for one query.
    Report(ReportArgs),
    /// Check gradients against finite differences and Monte Carlo references.
    Verify(VerifyArgs),
    /// Run the seeded coherence-axiom suite.
    Coherence(CoherenceArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TailArg {
    Lower,
    Upper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Empirical,
    Kernel,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KernelArg {
    Gaussian,
    Epanechnikov,
}

#[derive(Debug, Clone, Args)]
pub struct QueryArgs {
    /// Scenario CSV: header row of asset names, optional leading `weight` column.
    #[arg(long, conflicts_with_all = ["gaussian_mu", "gaussian_cov"])]
    pub scenarios: Option<PathBuf>,
    /// Gaussian mean vector, comma separated.
    #[arg(long, requires = "gaussian_cov")]
    pub gaussian_mu: Option<String>,
    /// Gaussian covariance as a d x d CSV file.
    #[arg(long, requires = "gaussian_mu")]
    pub gaussian_cov: Option<PathBuf>,
    /// Portfolio weights, comma separated.
    #[arg(long, conflicts_with = "u_file", allow_hyphen_values = true)]
    pub u: Option<String>,
    /// File holding the portfolio weights (comma or newline separated).
    #[arg(long)]
    pub u_file: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Shortfall exponent (>= 1).
    #[arg(long, default_value_t = 1.0)]
    pub delta: f64,
    /// Tail-moment order (>= 1).
    #[arg(long, default_value_t = 1)]
    pub n: u32,
    #[arg(long, value_enum, default_value_t = TailArg::Lower)]
    pub tail: TailArg,
    /// Backend; defaults to `gaussian` for model input and `kernel` for scenarios.
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    #[arg(long, value_enum, default_value_t = KernelArg::Gaussian)]
    pub kernel: KernelArg,
    /// `auto` (rule of thumb) or a positive number.
    #[arg(long, default_value = "auto")]
    pub bandwidth: String,
    #[arg(long, default_value_t = DEFAULT_MIN_DENSITY)]
    pub min_density: f64,
}

#[derive(Debug, Clone, Args)]
pub struct OutputArgs {
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = OutputFormat::Json)]
    pub format: OutputFormat,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub query: QueryArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub query: QueryArgs,
    #[command(flatten)]
    pub output: OutputArgs,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Monte Carlo sample size for the Gaussian reference.
    #[arg(long, default_value_t = 100_000)]
    pub mc_samples: usize,
    #[arg(long, default_value_t = oracle::DEFAULT_RESAMPLES)]
    pub bootstrap: usize,
    /// Finite-difference step relative to max(1, |u|_inf).
    #[arg(long, default_value_t = 1e-6)]
    pub fd_step: f64,
    /// Relative tolerance for exact gradients against finite differences.
    #[arg(long, default_value_t = 1e-5)]
    pub tol_fd: f64,
    /// Relative tolerance for kernel gradients against smoothed finite differences.
    #[arg(long, default_value_t = 0.05)]
    pub tol_kernel: f64,
    /// Monte Carlo acceptance band in standard errors.
    #[arg(long, default_value_t = 3.0)]
    pub mc_sigmas: f64,
}

#[derive(Debug, Clone, Args)]
pub struct CoherenceArgs {
    #[command(flatten)]
    pub output: OutputArgs,
    /// Cases per axiom.
    #[arg(long, default_value_t = 10_000)]
    pub cases: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value = "20,100,500")]
    pub sizes: String,
    #[arg(long, default_value = "0.05,0.1,0.25")]
    pub alphas: String,
    /// Rounding slack for the pathwise inequalities.
    #[arg(long, default_value_t = 1e-12)]
    pub slack: f64,
    /// Number of random large-N subset checks of the tail-mean inequality.
    #[arg(long, default_value_t = 1000)]
    pub inequality_random: usize,
    #[arg(long, default_value_t = 200)]
    pub inequality_n: usize,
}

/// Structured CLI failure.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CliError {
    pub kind: String,
    pub message: String,
    pub exit_code: i32,
}

impl CliError {
    pub fn usage(kind: &str, message: impl Into<String>) -> Self {
        Self { kind: kind.into(), message: message.into(), exit_code: EXIT_USAGE }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self { kind: "Internal".into(), message: message.into(), exit_code: EXIT_INTERNAL }
    }
}

impl From<RiskError> for CliError {
    fn from(e: RiskError) -> Self {
        let exit_code = if e.is_numerical_guard() { EXIT_GUARD } else { EXIT_USAGE };
        Self { kind: e.kind().into(), message: e.to_string(), exit_code }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Exit code plus what goes to stdout.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub exit_code: i32,
    pub stdout: String,
}

impl Outcome {
    fn error(e: &CliError) -> Self {
        #[derive(Serialize)]
        struct Wrapper<'a> {
            error: &'a CliError,
        }
        let text = to_json(&Wrapper { error: e }).unwrap_or_else(|_| format!("{{\"error\":{{\"kind\":\"{}\"}}}}\n", e.kind));
        Self { exit_code: e.exit_code, stdout: text }
    }
}

// ---------------------------------------------------------------------------
// JSON with 17 significant digits
// ---------------------------------------------------------------------------

/// Pretty JSON whose floats carry 17 significant digits.
struct SigFigFormatter<'a>(PrettyFormatter<'a>);

impl Formatter for SigFigFormatter<'_> {
    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        if value.is_finite() {
            write!(w, "{value:.16e}")
        } else {
            w.write_all(b"null")
        }
    }
    fn write_f32<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, value as f64)
    }
    fn begin_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

pub fn to_json<T: Serialize>(value: &T) -> CliResult<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, SigFigFormatter(PrettyFormatter::new()));
    value.serialize(&mut ser).map_err(|e| CliError::internal(e.to_string()))?;
    buf.push(b'\n');
    String::from_utf8(buf).map_err(|e| CliError::internal(e.to_string()))
}

fn fmt_csv_f64(v: f64) -> String {
    format!("{v:.16e}")
}

// ---------------------------------------------------------------------------
// Ingestion
// ---------------------------------------------------------------------------

fn read_file(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::usage("Io", format!("{}: {e}", path.display())))
}

/// Parses a scenario CSV document. The header names the assets; a leading
/// `weight` column carries row probabilities (uniform otherwise).
pub fn parse_scenarios(text: &str) -> CliResult<ScenarioSet> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| CliError::usage("Parse", format!("header: {e}")))?.clone();
    let names: Vec<String> = headers.iter().map(str::to_string).collect();
    let weighted = names.first().is_some_and(|h| h == "weight");
    let assets: Vec<String> = names.iter().skip(weighted as usize).cloned().collect();
    if assets.is_empty() {
        return Err(CliError::usage("Parse", "line 1: no asset columns"));
    }
    let mut outcomes = Vec::new();
    let mut probs = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            CliError::usage("Parse", format!("line {line}: {e}"))
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != names.len() {
            return Err(CliError::usage(
                "Parse",
                format!("line {line}: expected {} fields, found {}", names.len(), record.len()),
            ));
        }
        for (field, name) in record.iter().zip(&names) {
            let v: f64 = field
                .parse()
                .map_err(|_| CliError::usage("Parse", format!("line {line}, column {name}: cannot parse {field:?}")))?;
            if !v.is_finite() {
                return Err(CliError::usage("Parse", format!("line {line}, column {name}: non-finite value {field:?}")));
            }
            if weighted && name == &names[0] && probs.len() == outcomes.len() / assets.len() {
                probs.push(v);
            } else {
                outcomes.push(v);
            }
        }
    }
    if probs.is_empty() && outcomes.is_empty() {
        return Err(CliError::usage("Parse", "no scenario rows"));
    }
    if !weighted {
        let n = outcomes.len() / assets.len();
        probs = vec![1.0 / n as f64; n];
    }
    Ok(ScenarioSet::from_flat(assets, outcomes, probs)?)
}

pub fn ingest_scenarios(path: &Path) -> CliResult<ScenarioSet> {
    parse_scenarios(&read_file(path)?)
}

/// Serialises a scenario set so that [`parse_scenarios`] reproduces it
/// exactly. The `weight` column is written only for non-uniform sets.
pub fn write_scenarios(s: &ScenarioSet) -> String {
    let weighted = !s.is_uniform();
    let mut out = String::new();
    let mut header: Vec<&str> = Vec::new();
    if weighted {
        header.push("weight");
    }
    header.extend(s.assets().iter().map(String::as_str));
    out.push_str(&header.join(","));
    out.push('\n');
    for (k, row) in s.rows().enumerate() {
        let mut fields: Vec<String> = Vec::with_capacity(row.len() + 1);
        if weighted {
            fields.push(format!("{:?}", s.probabilities()[k]));
        }
        fields.extend(row.iter().map(|v| format!("{v:?}")));
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn parse_list(text: &str, what: &str) -> CliResult<Vec<f64>> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| {
            let v: f64 = t.parse().map_err(|_| CliError::usage("Parse", format!("{what}: cannot parse {t:?}")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(CliError::usage("Parse", format!("{what}: non-finite value {t:?}")))
            }
        })
        .collect()
}

/// Reads a d x d covariance CSV; a non-numeric first row is taken as a header.
pub fn parse_covariance(text: &str) -> CliResult<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match parse_list(line, &format!("covariance line {}", i + 1)) {
            Ok(r) => rows.push(r),
            Err(_) if i == 0 => continue,
            Err(e) => return Err(e),
        }
    }
    let d = rows.len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(CliError::usage("Parse", "covariance must be a square d x d table"));
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Query assembly
// ---------------------------------------------------------------------------

struct Prepared {
    query: Query,
    assets: Vec<String>,
}

fn kernel_config(q: &QueryArgs) -> CliResult<KernelConfig> {
    let bandwidth = if q.bandwidth.eq_ignore_ascii_case("auto") {
        Bandwidth::Auto
    } else {
        let h: f64 = q
            .bandwidth
            .parse()
            .map_err(|_| CliError::usage("Usage", format!("--bandwidth: expected `auto` or a number, got {:?}", q.bandwidth)))?;
        Bandwidth::Fixed(h)
    };
    let kernel = match q.kernel {
        KernelArg::Gaussian => KernelKind::Gaussian,
        KernelArg::Epanechnikov => KernelKind::Epanechnikov,
    };
    let cfg = KernelConfig { kernel, bandwidth, min_density: q.min_density };
    cfg.validate()?;
    Ok(cfg)
}

fn prepare(q: &QueryArgs) -> CliResult<Prepared> {
    let (input, assets) = match (&q.scenarios, &q.gaussian_mu, &q.gaussian_cov) {
        (Some(path), None, None) => {
            let s = ingest_scenarios(path)?;
            let assets = s.assets().to_vec();
            (QueryInput::Scenarios(s), assets)
        }
        (None, Some(mu), Some(cov)) => {
            let mu = parse_list(mu, "--gaussian-mu")?;
            let sigma = parse_covariance(&read_file(cov)?)?;
            let m = GaussianModel::new(mu, sigma)?;
            let assets = (1..=m.dim()).map(|i| format!("x{i}")).collect();
            (QueryInput::Gaussian(m), assets)
        }
        _ => {
            return Err(CliError::usage(
                "Usage",
                "give exactly one input: --scenarios FILE, or --gaussian-mu LIST with --gaussian-cov FILE",
            ))
        }
    };
    let u = match (&q.u, &q.u_file) {
        (Some(text), None) => parse_list(text, "--u")?,
        (None, Some(path)) => parse_list(&read_file(path)?, "--u-file")?,
        _ => return Err(CliError::usage("Usage", "give the weights with --u or --u-file")),
    };
    let u = WeightVector::new(u)?;
    let tail = match q.tail {
        TailArg::Lower => Tail::Lower,
        TailArg::Upper => Tail::Upper,
    };
    let spec = RiskSpec::new(q.alpha, q.delta, q.n, tail)?;
    let method = match (q.method, &input) {
        (Some(MethodArg::Empirical), _) => Method::Empirical,
        (Some(MethodArg::Kernel), _) => Method::Kernel,
        (Some(MethodArg::Gaussian), _) => Method::Gaussian,
        (None, QueryInput::Gaussian(_)) => Method::Gaussian,
        (None, QueryInput::Scenarios(_)) => Method::Kernel,
    };
    let query = Query { input, u, spec, method, kernel: kernel_config(q)? };
    query.validate()?;
    Ok(Prepared { query, assets })
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
pub struct ReportDocument {
    pub assets: Vec<String>,
    pub u: Vec<f64>,
    #[serde(flatten)]
    pub report: RiskReport,
    pub allocation: AllocationSummary,
}

fn report_csv(doc: &ReportDocument) -> String {
    let mut out = String::from("metric,asset,value\n");
    let r = &doc.report;
    let mut scalar = |name: &str, v: f64| {
        let _ = writeln!(out, "{name},,{}", fmt_csv_f64(v));
    };
    scalar("q_alpha", r.q_alpha);
    scalar("t_lower", r.t_lower);
    scalar("t_upper", r.t_upper);
    scalar("s_lower", r.s_lower);
    scalar("s_upper", r.s_upper);
    scalar("density_at_q", r.density_at_q);
    scalar("residual_q", doc.allocation.residual_q);
    scalar("residual_t", doc.allocation.residual_t);
    scalar("residual_s", doc.allocation.residual_s);
    let a = &doc.allocation;
    let vectors: [(&str, &[f64]); 7] = [
        ("u", &doc.u),
        ("grad_q", &r.grad_q),
        ("grad_t", &r.grad_t),
        ("grad_s", &r.grad_s),
        ("contrib_q", &a.contrib_q),
        ("contrib_t", &a.contrib_t),
        ("contrib_s", &a.contrib_s),
    ];
    for (name, v) in vectors {
        for (asset, x) in doc.assets.iter().zip(v) {
            let _ = writeln!(out, "{name},{asset},{}", fmt_csv_f64(*x));
        }
    }
    out
}

fn run_report(args: &ReportArgs) -> CliResult<String> {
    let p = prepare(&args.query)?;
    let report = evaluate(&p.query)?;
    let allocation = allocation_summary(&report, &p.query.u)?;
    let doc = ReportDocument { assets: p.assets, u: p.query.u.as_slice().to_vec(), report, allocation };
    match args.output.format {
        OutputFormat::Json => to_json(&doc),
        OutputFormat::Csv => Ok(report_csv(&doc)),
    }
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyRow {
    pub quantity: String,
    pub asset: Option<String>,
    /// Analytic or estimated value under test.
    pub subject: f64,
    pub fd: Option<f64>,
    pub mc: Option<f64>,
    pub mc_se: Option<f64>,
    /// Absolute tolerance applied to the finite-difference comparison.
    pub fd_tolerance: Option<f64>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyDocument {
    pub method: Method,
    pub spec: RiskSpec,
    pub seed: u64,
    pub bandwidth: Option<f64>,
    pub rows: Vec<VerifyRow>,
    pub all_pass: bool,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Rows comparing a gradient with its finite-difference counterpart under a
/// relative tolerance on the sup norm.
fn gradient_rows(name: &str, assets: &[String], subject: &[f64], fd: &[f64], rel_tol: f64) -> Vec<VerifyRow> {
    let tol = rel_tol * inf_norm(subject).max(f64::MIN_POSITIVE);
    assets
        .iter()
        .zip(subject.iter().zip(fd))
        .map(|(a, (s, f))| VerifyRow {
            quantity: name.into(),
            asset: Some(a.clone()),
            subject: *s,
            fd: Some(*f),
            mc: None,
            mc_se: None,
            fd_tolerance: Some(tol),
            pass: (s - f).abs() <= tol,
        })
        .collect()
}

fn with_mc(row: &mut VerifyRow, est: oracle::Estimate, sigmas: f64) {
    row.mc = Some(est.value);
    row.mc_se = Some(est.se);
    row.pass &= (row.subject - est.value).abs() <= sigmas * est.se;
}

fn verify_gaussian(m: &GaussianModel, p: &Prepared, a: &VerifyArgs) -> CliResult<Vec<VerifyRow>> {
    let spec = p.query.spec;
    let u = &p.query.u;
    let fd_cfg = FDConfig { step: a.fd_step, ..FDConfig::default() };
    let w = |v: &[f64]| WeightVector::new(v.to_vec());
    let report = evaluate(&p.query)?;

    let fd_q = oracle::fd_gradient(|v| gaussian::gaussian_quantile(m, &w(v)?, spec.alpha()), u.as_slice(), &fd_cfg)?;
    let fd_t = oracle::fd_gradient(
        |v| Ok(gaussian::gaussian_tail_moment(m, &w(v)?, spec.alpha(), spec.n())?.get(spec.tail())),
        u.as_slice(),
        &fd_cfg,
    )?;
    let fd_s = oracle::fd_gradient(
        |v| Ok(gaussian::gaussian_shortfall(m, &w(v)?, &spec)?.get(spec.tail())),
        u.as_slice(),
        &fd_cfg,
    )?;
    let mc = oracle::mc_reference(m, u.as_slice(), &spec, a.mc_samples, a.seed, a.bootstrap)?;

    let mut rows = Vec::new();
    let scalar = |name: &str, subject: f64, est: oracle::Estimate| {
        let mut r = VerifyRow {
            quantity: name.into(),
            asset: None,
            subject,
            fd: None,
            mc: None,
            mc_se: None,
            fd_tolerance: None,
            pass: true,
        };
        with_mc(&mut r, est, a.mc_sigmas);
        r
    };
    rows.push(scalar("q_alpha", report.q_alpha, mc.quantile));
    rows.push(scalar("t", report.t_selected(), mc.tail_moment));
    rows.push(scalar("s", report.s_selected(), mc.shortfall));
    rows.extend(gradient_rows("grad_q", &p.assets, &report.grad_q, &fd_q, a.tol_fd));
    let mut grad_t = gradient_rows("grad_t", &p.assets, &report.grad_t, &fd_t, a.tol_fd);
    for (row, est) in grad_t.iter_mut().zip(&mc.tail_gradient) {
        with_mc(row, *est, a.mc_sigmas);
    }
    rows.extend(grad_t);
    rows.extend(gradient_rows("grad_s", &p.assets, &report.grad_s, &fd_s, a.tol_fd));
    Ok(rows)
}

fn verify_scenarios(s: &ScenarioSet, p: &Prepared, a: &VerifyArgs) -> CliResult<(Vec<VerifyRow>, f64)> {
    let spec = p.query.spec;
    let u = &p.query.u;
    let report = evaluate(&p.query)?;
    let h = report.diagnostics.bandwidth.ok_or_else(|| CliError::internal("kernel report without bandwidth"))?;
    let kernel = p.query.kernel.kernel;
    let fd_cfg = FDConfig { step: a.fd_step, ..FDConfig::default() };
    let sample = |v: &[f64]| portfolio_outcomes(s, &WeightVector::new(v.to_vec())?);

    let fd_q = oracle::fd_gradient(|v| oracle::smoothed_quantile(&sample(v)?, spec.alpha(), h, kernel), u.as_slice(), &fd_cfg)?;
    let fd_t = oracle::fd_gradient(
        |v| Ok(empirical_tail_moment(s, &WeightVector::new(v.to_vec())?, &spec)?.get(spec.tail())),
        u.as_slice(),
        &fd_cfg,
    )?;
    let fd_s = oracle::fd_gradient(|v| oracle::smoothed_shortfall(&sample(v)?, &spec, h, kernel), u.as_slice(), &fd_cfg)?;

    let mut rows = gradient_rows("grad_q", &p.assets, &report.grad_q, &fd_q, a.tol_kernel);
    rows.extend(gradient_rows("grad_t", &p.assets, &report.grad_t, &fd_t, a.tol_fd));
    // the quantile-gradient error reaches grad_s scaled by delta * E[|Z - q|^(delta-1) | tail]
    let z = sample(u.as_slice())?;
    let tail = tail_indices(&z, report.q_alpha, spec.tail());
    let carry = spec.delta() * tail.iter().map(|&k| (z.values()[k] - report.q_alpha).abs().powf(spec.delta() - 1.0)).sum::<f64>()
        / tail.len().max(1) as f64;
    let rel = a.tol_kernel * (carry * inf_norm(&report.grad_q)).max(inf_norm(&report.grad_s))
        / inf_norm(&report.grad_s).max(f64::MIN_POSITIVE);
    rows.extend(gradient_rows("grad_s", &p.assets, &report.grad_s, &fd_s, rel));
    Ok((rows, h))
}

fn run_verify(args: &VerifyArgs) -> CliResult<(String, bool)> {
    let p = prepare(&args.query)?;
    let (rows, bandwidth) = match &p.query.input {
        QueryInput::Gaussian(m) => (verify_gaussian(m, &p, args)?, None),
        QueryInput::Scenarios(s) => {
            let (rows, h) = verify_scenarios(s, &p, args)?;
            (rows, Some(h))
        }
    };
    let all_pass = rows.iter().all(|r| r.pass);
    let doc = VerifyDocument { method: p.query.method, spec: p.query.spec, seed: args.seed, bandwidth, rows, all_pass };
    let text = match args.output.format {
        OutputFormat::Json => to_json(&doc)?,
        OutputFormat::Csv => {
            let mut out = String::from("quantity,asset,subject,fd,mc,mc_se,fd_tolerance,pass\n");
            let opt = |v: Option<f64>| v.map(fmt_csv_f64).unwrap_or_default();
            for r in &doc.rows {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    r.quantity,
                    r.asset.as_deref().unwrap_or(""),
                    fmt_csv_f64(r.subject),
                    opt(r.fd),
                    opt(r.mc),
                    opt(r.mc_se),
                    opt(r.fd_tolerance),
                    r.pass
                );
            }
            out
        }
    };
    Ok((text, all_pass))
}

// ---------------------------------------------------------------------------
// coherence
// ---------------------------------------------------------------------------

fn run_coherence(args: &CoherenceArgs) -> CliResult<(String, bool)> {
    let sizes = parse_list(&args.sizes, "--sizes")?
        .into_iter()
        .map(|v| {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(CliError::usage("Usage", format!("--sizes: {v} is not a positive integer")))
            }
        })
        .collect::<CliResult<Vec<_>>>()?;
    let cfg = SuiteConfig {
        cases: args.cases,
        seed: args.seed,
        sizes,
        alphas: parse_list(&args.alphas, "--alphas")?,
        slack: args.slack,
        inequality_random: args.inequality_random,
        inequality_random_n: args.inequality_n,
    };
    let summary = coherence::run_suite(&cfg)?;
    let ok = summary.total_violations == 0;
    let text = match args.output.format {
        OutputFormat::Json => to_json(&summary)?,
        OutputFormat::Csv => {
            let mut out = String::from("check,cases,violations,worst_margin\n");
            for a in &summary.axioms {
                let name = serde_json::to_value(a.axiom).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
                let _ = writeln!(out, "{name},{},{},{}", a.cases, a.violations, fmt_csv_f64(a.worst_margin));
            }
            for (name, l) in [("inequality_exhaustive", &summary.inequality_exhaustive), ("inequality_random", &summary.inequality_random)] {
                let _ = writeln!(out, "{name},{},{},{}", l.checks, l.violations, fmt_csv_f64(l.worst_margin));
            }
            out
        }
    };
    Ok((text, ok))
}

// ---------------------------------------------------------------------------
// entry point
// ---------------------------------------------------------------------------

fn emit(text: String, out: &Option<PathBuf>) -> CliResult<String> {
    match out {
        Some(path) => {
            fs::write(path, &text)
                .map_err(|e| CliError { kind: "Io".into(), message: format!("{}: {e}", path.display()), exit_code: EXIT_INTERNAL })?;
            Ok(String::new())
        }
        None => Ok(text),
    }
}

fn dispatch(cli: &Cli) -> CliResult<Outcome> {
    let (text, ok, out) = match &cli.command {
        Command::Report(a) => (run_report(a)?, true, &a.output.out),
        Command::Verify(a) => {
            let (t, ok) = run_verify(a)?;
            (t, ok, &a.output.out)
        }
        Command::Coherence(a) => {
            let (t, ok) = run_coherence(a)?;
            (t, ok, &a.output.out)
        }
    };
    let stdout = emit(text, out)?;
    Ok(Outcome { exit_code: if ok { EXIT_OK } else { EXIT_GUARD }, stdout })
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> Outcome
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => Outcome { exit_code: EXIT_OK, stdout: e.to_string() },
                _ => Outcome::error(&CliError::usage("Usage", e.to_string())),
            };
        }
    };
    let result = match cli.workers {
        Some(0) => Err(CliError::usage("Usage", "--workers must be positive")),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(&cli)),
            Err(e) => Err(CliError::internal(e.to_string())),
        },
        None => dispatch(&cli),
    };
    result.unwrap_or_else(|e| Outcome::error(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_floats_have_17_digits() {
        let s = to_json(&vec![7.0, -1.1630871, 0.0]).unwrap();
        assert!(s.contains("7.0000000000000000e0"));
        assert!(s.contains("-1.1630871000000000e0"));
        let back: Vec<f64> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, vec![7.0, -1.1630871, 0.0]);
    }

    #[test]
    fn parses_scenarios() {
        let s = parse_scenarios("a,b\n1,1\n2,3\n3,2\n4,5\n5,4\n").unwrap();
        assert_eq!((s.n_rows(), s.n_assets()), (5, 2));
        assert!(s.is_uniform());
        let s = parse_scenarios("weight,a,b\n0.25,1,2\n0.75,3,4\n").unwrap();
        assert_eq!(s.probabilities(), &[0.25, 0.75]);
        assert_eq!(s.row(1), &[3.0, 4.0]);
    }

    #[test]
    fn scenario_errors_name_the_cell() {
        let e = parse_scenarios("a,b\n1,2\n3,NaN\n").unwrap_err();
        assert_eq!(e.exit_code, EXIT_USAGE);
        assert!(e.message.contains("line 3") && e.message.contains("column b"), "{}", e.message);
        let e = parse_scenarios("a,b\n1,2\n3,x\n").unwrap_err();
        assert!(e.message.contains("line 3"), "{}", e.message);
        let e = parse_scenarios("weight,a\n0.5,1\n0.6,2\n").unwrap_err();
        assert_eq!(e.kind, "InvalidInput");
        assert!(parse_scenarios("a,b\n1,2\n3\n").is_err());
    }

    #[test]
    fn covariance_with_optional_header() {
        assert_eq!(parse_covariance("1,0\n0,1\n").unwrap(), vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(parse_covariance("x1,x2\n2,0.5\n0.5,1\n").unwrap()[0], vec![2.0, 0.5]);
        assert!(parse_covariance("1,0\n0\n").is_err());
    }

    #[test]
    fn usage_errors_are_structured() {
        let o = run(["riskgrad", "report", "--alpha", "0.05"]);
        assert_eq!(o.exit_code, EXIT_USAGE);
        let v: serde_json::Value = serde_json::from_str(&o.stdout).unwrap();
        assert_eq!(v["error"]["kind"], "Usage");
        let o = run(["riskgrad", "frobnicate"]);
        assert_eq!(o.exit_code, EXIT_USAGE);
        assert!(serde_json::from_str::<serde_json::Value>(&o.stdout).is_ok());
    }
}
