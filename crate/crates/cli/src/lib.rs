//! Argument parsing, execution and rendering for the `bootrank` binary.

use std::path::PathBuf;
use std::str::FromStr;

use bootrank::dataset::{assemble, lag_name, load_csv, Roles, Schema};
use bootrank::engine::{KpVariance, SampleScale, TestConfig, TestReport, DEFAULT_SEED};
use bootrank::{run_test, BootstrapScheme};
use clap::{Parser, ValueEnum};
use serde_json::{json, Map, Value};
use thiserror::Error;

pub const COMMAND: &str = "bootrank";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] bootrank::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            _ => 1,
        }
    }
}

/// `column:order` from `--lag`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lag {
    pub column: String,
    pub order: usize,
}

impl FromStr for Lag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (column, order) = match s.rsplit_once(':') {
            Some((c, o)) => (c, o),
            None => (s, "1"),
        };
        let order: usize = order
            .parse()
            .map_err(|_| format!("invalid lag order in `{s}`"))?;
        if column.is_empty() || order == 0 {
            return Err(format!("expected COLUMN:ORDER with ORDER >= 1, got `{s}`"));
        }
        Ok(Self {
            column: column.to_string(),
            order,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kappa {
    Auto,
    Value(f64),
}

impl FromStr for Kappa {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(Self::Auto);
        }
        match s.parse::<f64>() {
            Ok(v) if v > 0.0 && v.is_finite() => Ok(Self::Value(v)),
            _ => Err(format!("kappan must be `auto` or a positive number, got `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Text,
    Json,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KpVarianceArg {
    NullScores,
    Bootstrap,
}

/// Bootstrap test of the rank of the first-stage coefficient matrix.
#[derive(Debug, Clone, Parser)]
#[command(name = "bootrank", version, about)]
pub struct Invocation {
    /// CSV file with a header row.
    #[arg(long)]
    pub data: PathBuf,

    /// Endogenous variables (X), comma-separated.
    #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
    pub endog: Vec<String>,

    /// Excluded instruments (Z), comma-separated.
    #[arg(long = "inst", value_delimiter = ',', required = true, num_args = 1..)]
    pub instruments: Vec<String>,

    /// Nonconstant exogenous controls (W), comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub partial: Vec<String>,

    /// Lagged variable COLUMN:ORDER, available as COLUMN_L<ORDER>. Repeatable.
    #[arg(long = "lag")]
    pub lags: Vec<Lag>,

    /// Integer time variable; rows are sorted by it. Required for --lag.
    #[arg(long)]
    pub time: Option<String>,

    /// Hypothesized rank r (default k - 1).
    #[arg(long, conflicts_with = "allrank")]
    pub rank: Option<usize>,

    /// Report results for every r = 0, ..., k - 1.
    #[arg(long)]
    pub allrank: bool,

    /// Number of bootstrap samples.
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
    pub numboot: u64,

    /// Level of the sequential rank tests in the two-step approach.
    #[arg(long, default_value_t = 0.005)]
    pub beta: f64,

    /// Threshold for the analytic rank estimate: `auto` (n^(-1/4)) or a number.
    #[arg(long, default_value = "auto")]
    pub kappan: Kappa,

    /// Block length; selects the moving-block bootstrap.
    #[arg(long, conflicts_with = "cluster")]
    pub blocksize: Option<usize>,

    /// Cluster variable; selects the cluster bootstrap.
    #[arg(long)]
    pub cluster: Option<String>,

    /// Do not add a constant to W.
    #[arg(long)]
    pub noconstant: bool,

    /// Also report the analytic approach.
    #[arg(long)]
    pub cfa: bool,

    /// Seed for the bootstrap draws.
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,

    #[arg(long, value_enum, default_value = "text")]
    pub output: OutputFormat,

    /// Write the JSON results to this file instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,

    /// Scale by the rows used in the regression rather than the rows in the file.
    #[arg(long)]
    pub scale_by_sample: bool,

    /// Covariance used by the sequential Kleibergen-Paap step.
    #[arg(long, value_enum, default_value = "null-scores")]
    pub kp_variance: KpVarianceArg,
}

pub fn parse<I, T>(argv: I) -> Result<Invocation, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    Invocation::try_parse_from(argv)
}

impl Invocation {
    pub fn scheme(&self) -> BootstrapScheme {
        match (self.blocksize, &self.cluster) {
            (Some(length), _) => BootstrapScheme::Block { length },
            (None, Some(_)) => BootstrapScheme::Cluster,
            (None, None) => BootstrapScheme::Wild,
        }
    }

    pub fn config(&self) -> TestConfig {
        TestConfig {
            rank: self.rank,
            beta: self.beta,
            kappa_n: match self.kappan {
                Kappa::Auto => None,
                Kappa::Value(v) => Some(v),
            },
            num_boot: self.numboot as usize,
            scheme: self.scheme(),
            seed: self.seed,
            analytic: self.cfa,
            allrank: self.allrank,
            kp_variance: match self.kp_variance {
                KpVarianceArg::NullScores => KpVariance::NullScores,
                KpVarianceArg::Bootstrap => KpVariance::Bootstrap,
            },
            scale: if self.scale_by_sample {
                SampleScale::Estimation
            } else {
                SampleScale::Table
            },
            ..TestConfig::default()
        }
    }
}

/// Loads the data, builds the blocks and runs the test.
pub fn execute(inv: &Invocation) -> Result<TestReport, CliError> {
    if !inv.lags.is_empty() && inv.time.is_none() {
        return Err(CliError::Usage("--lag requires --time".into()));
    }
    let derived: Vec<String> = inv.lags.iter().map(|l| lag_name(&l.column, l.order)).collect();
    let mut numeric: Vec<String> = Vec::new();
    let referenced = inv
        .endog
        .iter()
        .chain(&inv.instruments)
        .chain(&inv.partial)
        .filter(|v| !derived.contains(v))
        .chain(inv.lags.iter().map(|l| &l.column));
    for name in referenced {
        if !numeric.contains(name) {
            numeric.push(name.clone());
        }
    }
    let schema = Schema {
        numeric,
        label: inv.cluster.clone(),
        time: inv.time.clone(),
    };

    let mut table = load_csv(&inv.data, &schema)?;
    for lag in &inv.lags {
        table = table.lag(&lag.column, lag.order)?;
    }
    let roles = Roles {
        endogenous: inv.endog.clone(),
        instruments: inv.instruments.clone(),
        partial: inv.partial.clone(),
        noconstant: inv.noconstant,
        cluster: inv.cluster.clone(),
    };
    let d = assemble(&table, &roles)?;
    if let Some(r) = inv.rank {
        if r >= d.k() {
            return Err(CliError::Usage(format!(
                "rank({r}): the value of r must be strictly less than k = {}",
                d.k()
            )));
        }
    }
    Ok(run_test(&d, &inv.config())?)
}

/// Up to eight significant digits, Stata style (no leading zero, trailing
/// zeros trimmed).
pub fn format_statistic(x: f64) -> String {
    stata_trim(format_significant(x, 8))
}

/// Three decimals, Stata style.
pub fn format_p_value(p: f64) -> String {
    stata_trim(format!("{p:.3}"))
}

fn format_significant(x: f64, digits: i32) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (digits - 1 - magnitude).max(0) as usize;
    format!("{x:.decimals$}")
}

fn stata_trim(s: String) -> String {
    let mut s = s;
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
    if let Some(rest) = s.strip_prefix("0.") {
        s = format!(".{rest}");
    } else if let Some(rest) = s.strip_prefix("-0.") {
        s = format!("-.{rest}");
    }
    if s.is_empty() || s == "-" {
        s = "0".into();
    }
    s
}

pub const FIRST_STEP_REJECTION: &str =
    "rank estimate exceeds hypothesized rank; H0 rejected in the first step";

fn render_rank_block(out: &mut String, report: &TestReport, row: &bootrank::RankResult) {
    let ts = &row.two_step;
    if ts.first_step_rejected {
        out.push_str(&format!(
            "Rank estimate in the first step of the two-step approach = {}\n",
            ts.rank_estimate
        ));
        out.push_str(&format!("({FIRST_STEP_REJECTION})\n"));
    } else {
        out.push_str(&format!(
            "Test statistic in the second step of the two-step approach = {}\n",
            format_statistic(ts.statistic.unwrap_or(row.statistic))
        ));
        out.push_str(&format!(
            "The p-value in the second step of the two-step approach = {}\n",
            format_p_value(ts.p_value.unwrap_or(f64::NAN))
        ));
        out.push_str(&format!(
            "(Note: the null hypothesis is rejected at alpha level if the p-value is smaller than alpha-{}).\n",
            format_p_value(report.beta)
        ));
    }
    if let Some(a) = &row.analytic {
        out.push_str(&format!(
            "Test statistic for the analytical approach = {}\n",
            format_statistic(a.statistic)
        ));
        out.push_str(&format!(
            "The p-value for the analytical approach = {}\n",
            format_p_value(a.p_value)
        ));
    }
}

pub fn render_text(report: &TestReport) -> String {
    let mut out = String::new();
    if report.allrank {
        for (i, row) in report.results.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            out.push_str(&format!("Hypothesized rank r = {}\n", row.rank));
            render_rank_block(&mut out, report, row);
        }
    } else {
        render_rank_block(&mut out, report, report.primary());
    }
    out
}

fn opt(v: Option<f64>) -> Value {
    v.map_or(Value::Null, |x| json!(x))
}

pub fn render_json(report: &TestReport) -> Result<Value, CliError> {
    let mut doc = Map::new();
    doc.insert("command".into(), json!(COMMAND));

    let row = report.primary();
    let ts = &row.two_step;
    if !ts.first_step_rejected {
        doc.insert("cft_Teststat".into(), opt(ts.statistic));
        doc.insert("cft_Pvalue".into(), opt(ts.p_value));
    }
    doc.insert("cft_Rankestimate".into(), json!(ts.rank_estimate));
    if let Some(a) = &row.analytic {
        doc.insert("cfa_Teststat".into(), json!(a.statistic));
        doc.insert("cfa_Pvalue".into(), json!(a.p_value));
        doc.insert("cfa_Rankestimate".into(), json!(a.rank_estimate));
    }

    if report.allrank {
        let cft: Vec<Value> = report
            .results
            .iter()
            .map(|r| {
                json!([
                    r.rank,
                    r.two_step.rank_estimate,
                    opt(r.two_step.statistic),
                    opt(r.two_step.p_value)
                ])
            })
            .collect();
        doc.insert("cft_rkmatrix".into(), Value::Array(cft));
        if report.results.iter().all(|r| r.analytic.is_some()) {
            let cfa: Vec<Value> = report
                .results
                .iter()
                .filter_map(|r| r.analytic.as_ref().map(|a| (r.rank, a)))
                .map(|(rank, a)| json!([rank, a.rank_estimate, a.statistic, a.p_value]))
                .collect();
            doc.insert("cfa_rkmatrix".into(), Value::Array(cfa));
        }
        doc.insert(
            "rkmatrix_columns".into(),
            json!(["rank", "rank_estimate", "statistic", "p_value"]),
        );
    }

    let blocksize = match report.scheme {
        BootstrapScheme::Block { length } => json!(length),
        _ => Value::Null,
    };
    doc.insert(
        "reproducibility".into(),
        json!({
            "seed": report.seed,
            "numboot": report.num_boot,
            "scheme": report.scheme.name(),
            "blocksize": blocksize,
            "version": env!("CARGO_PKG_VERSION"),
        }),
    );
    doc.insert("report".into(), serde_json::to_value(report)?);
    Ok(Value::Object(doc))
}

/// Recovers the full report from a document produced by [`render_json`].
pub fn report_from_json(doc: &Value) -> Result<TestReport, CliError> {
    let report = doc
        .get("report")
        .ok_or_else(|| CliError::Usage("document has no `report` field".into()))?;
    Ok(serde_json::from_value(report.clone())?)
}

/// Full run as the binary performs it: returns (stdout, warnings).
pub fn run(inv: &Invocation) -> Result<(String, Vec<String>), CliError> {
    let report = execute(inv)?;
    let mut stdout = String::new();
    if matches!(inv.output, OutputFormat::Text | OutputFormat::Both) {
        stdout.push_str(&render_text(&report));
    }
    if matches!(inv.output, OutputFormat::Json | OutputFormat::Both) || inv.out.is_some() {
        let doc = serde_json::to_string_pretty(&render_json(&report)?)?;
        match &inv.out {
            Some(path) => std::fs::write(path, doc + "\n")?,
            None => {
                stdout.push_str(&doc);
                stdout.push('\n');
            }
        }
    }
    Ok((stdout, report.warnings))
}
