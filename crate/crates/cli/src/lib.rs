//! Command-line front end: reads a dose-response CSV, runs one test procedure
//! and writes a text, JSON or CSV report.

use std::fmt::Write as _;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use trendlab::data::{parse_table, DoseResponseTable, Scaling, ZeroDosePolicy};
use trendlab::glm::Link;
use trendlab::mvn::MvnOptions;
use trendlab::trendtest::{
    ca_test, double_max_test, joint_regression_williams_test, overdispersed_trend_test, tukey_trend_test, Alternative,
    CaResult, PseudoCounts, TestOptions, TrendReport,
};

pub const DEFAULT_SEED: u64 = 20240101;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "trendlab", version, about = "Multiplicity-adjusted trend tests for proportions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Cochran–Armitage trend test.
    Catest {
        #[command(flatten)]
        io: IoArgs,
        #[arg(long, default_value = "greater")]
        alternative: Alternative,
        /// Shrink the numerator toward zero before standardizing.
        #[arg(long)]
        continuity: bool,
    },
    /// Max-test over dose metameters for one link.
    Trend {
        #[command(flatten)]
        io: IoArgs,
        #[arg(long, default_value = "logit")]
        link: Link,
        #[command(flatten)]
        test: TestArgs,
    },
    /// Max-test over links and dose metameters jointly.
    Links {
        #[command(flatten)]
        io: IoArgs,
        #[arg(long, value_delimiter = ',', default_value = "logit,identity,log")]
        link: Vec<Link>,
        #[command(flatten)]
        test: TestArgs,
    },
    /// Regression slopes and Williams contrasts in one max-test.
    Joint {
        #[command(flatten)]
        io: IoArgs,
        #[arg(long, default_value = "logit")]
        link: Link,
        #[command(flatten)]
        test: TestArgs,
    },
    /// Quasi-binomial logit max-test for replicated proportions.
    Overdisp {
        #[command(flatten)]
        io: IoArgs,
        #[command(flatten)]
        test: TestArgs,
    },
}

#[derive(Debug, Args)]
struct IoArgs {
    /// CSV with columns dose,events,trials and an optional unit.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
    /// Write the report here instead of standard output.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TestArgs {
    #[arg(long, value_delimiter = ',', default_value = "ari,ord,log")]
    scaling: Vec<Scaling>,
    #[arg(long, default_value = "greater")]
    alternative: Alternative,
    /// Simultaneous confidence level in (0.5, 1).
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// `off`, a number, `auto[:c]` or per link as `logit=0.5,identity=0.5,log=0`.
    #[arg(long)]
    pseudo_count: Option<String>,
    /// `extrapolate` or `fixed:<dose>` for zero under log scaling.
    #[arg(long, default_value = "extrapolate")]
    zero_dose: String,
    #[arg(long, env = "TRENDLAB_SEED", default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Absolute error target of each multivariate normal probability, in (0, 0.01].
    #[arg(long, default_value_t = 1e-5)]
    mvn_tol: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Text,
    Json,
    Csv,
}

/// Effective settings of a run, echoed in every report.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub input: String,
    pub links: Vec<Link>,
    pub scalings: Vec<String>,
    pub alternative: Alternative,
    pub level: Option<f64>,
    pub pseudo_counts: Option<PseudoCounts>,
    pub zero_dose: Option<ZeroDosePolicy>,
    pub continuity: Option<bool>,
    pub seed: Option<u64>,
    pub mvn_tol: Option<f64>,
    pub format: Format,
    pub output: Option<String>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Numerical(String),
}

impl From<trendlab::Error> for Failure {
    fn from(e: trendlab::Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

enum Outcome {
    Ca(CaResult),
    Trend(TrendReport),
}

#[derive(Serialize)]
struct CaComponent {
    label: &'static str,
    statistic: f64,
    raw_p: f64,
    adjusted_p: f64,
}

#[derive(Serialize)]
struct CaJson<'a> {
    command: &'a str,
    config: &'a RunConfig,
    components: [CaComponent; 1],
    best: &'static str,
    statistic: f64,
    p_value: f64,
    alternative: Alternative,
    continuity: bool,
    n: u64,
    warnings: Vec<String>,
    seed: Option<u64>,
}

#[derive(Serialize)]
struct TrendJson<'a> {
    command: &'a str,
    config: &'a RunConfig,
    #[serde(flatten)]
    report: &'a TrendReport,
    best_effect_size: String,
    best_metameter: &'a str,
}

/// Runs the command line `argv` (program name first), printing to standard
/// output and error, and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    execute(argv, &mut stdout.lock(), &mut stderr.lock())
}

/// As [`run`] with explicit output streams.
pub fn execute<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { err.write_all(text.as_bytes()) } else { out.write_all(text.as_bytes()) };
            return code;
        }
    };
    match dispatch(cli, out) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(message)) => {
            let _ = writeln!(err, "error: {message}");
            EXIT_USAGE
        }
        Err(Failure::Numerical(message)) => {
            let _ = writeln!(err, "numerical failure: {message}");
            EXIT_NUMERICAL
        }
    }
}

fn dispatch(cli: Cli, out: &mut dyn Write) -> Result<(), Failure> {
    let (io, config, outcome) = match cli.command {
        Command::Catest { io, alternative, continuity } => {
            let table = read_table(&io)?;
            let config = RunConfig {
                command: "catest".into(),
                input: io.input.display().to_string(),
                links: Vec::new(),
                scalings: Vec::new(),
                alternative,
                level: None,
                pseudo_counts: None,
                zero_dose: None,
                continuity: Some(continuity),
                seed: None,
                mvn_tol: None,
                format: io.format,
                output: io.output.as_ref().map(|p| p.display().to_string()),
            };
            let total = table.rows().iter().map(|r| r.trials).sum::<u64>();
            let result = ca_test(&table.collapse(), alternative, continuity)?;
            (io, config, (Outcome::Ca(result), total))
        }
        Command::Trend { io, link, test } => {
            let (table, config, options) = prepare(&io, "trend", vec![link], &test)?;
            let report = tukey_trend_test(&table, link, &test.scaling, &options)?;
            (io, config, (Outcome::Trend(report), 0))
        }
        Command::Links { io, link, test } => {
            let (table, config, options) = prepare(&io, "links", link.clone(), &test)?;
            let report = double_max_test(&table, &link, &test.scaling, &options)?;
            (io, config, (Outcome::Trend(report), 0))
        }
        Command::Joint { io, link, test } => {
            let (table, config, options) = prepare(&io, "joint", vec![link], &test)?;
            let report = joint_regression_williams_test(&table, link, &test.scaling, &options)?;
            (io, config, (Outcome::Trend(report), 0))
        }
        Command::Overdisp { io, test } => {
            let (table, config, options) = prepare(&io, "overdisp", vec![Link::Logit], &test)?;
            let report = overdispersed_trend_test(&table, &test.scaling, &options)?;
            (io, config, (Outcome::Trend(report), 0))
        }
    };
    let rendered = render(&config, &outcome.0, outcome.1)?;
    match &io.output {
        Some(path) => {
            std::fs::write(path, rendered).map_err(|e| Failure::Usage(format!("cannot write {}: {e}", path.display())))
        }
        None => out.write_all(rendered.as_bytes()).map_err(|e| Failure::Usage(format!("cannot write report: {e}"))),
    }
}

fn read_table(io: &IoArgs) -> Result<DoseResponseTable, Failure> {
    let text = std::fs::read_to_string(&io.input)
        .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", io.input.display())))?;
    parse_table(&text).map_err(|e| Failure::Usage(format!("{}: {e}", io.input.display())))
}

fn prepare(
    io: &IoArgs,
    command: &str,
    links: Vec<Link>,
    test: &TestArgs,
) -> Result<(DoseResponseTable, RunConfig, TestOptions), Failure> {
    if !(test.level > 0.5 && test.level < 1.0) {
        return Err(Failure::Usage(format!("--level must lie in (0.5, 1), got {}", test.level)));
    }
    if !(test.mvn_tol > 0.0 && test.mvn_tol <= 0.01) {
        return Err(Failure::Usage(format!("--mvn-tol must lie in (0, 0.01], got {}", test.mvn_tol)));
    }
    if links.is_empty() {
        return Err(Failure::Usage("at least one link is required".into()));
    }
    let pseudo_counts = match &test.pseudo_count {
        Some(spec) => spec.parse::<PseudoCounts>()?,
        None => PseudoCounts::default(),
    };
    let zero_dose: ZeroDosePolicy = test.zero_dose.parse()?;
    let table = read_table(io)?;
    let options = TestOptions {
        alternative: test.alternative,
        level: test.level,
        zero_dose,
        pseudo_counts,
        mvn: MvnOptions { tol: test.mvn_tol, seed: test.seed, ..MvnOptions::default() },
        ..TestOptions::default()
    };
    let config = RunConfig {
        command: command.into(),
        input: io.input.display().to_string(),
        links,
        scalings: test.scaling.iter().map(|s| s.short_name().to_string()).collect(),
        alternative: test.alternative,
        level: Some(test.level),
        pseudo_counts: Some(pseudo_counts),
        zero_dose: Some(zero_dose),
        continuity: None,
        seed: Some(test.seed),
        mvn_tol: Some(test.mvn_tol),
        format: io.format,
        output: io.output.as_ref().map(|p| p.display().to_string()),
    };
    Ok((table, config, options))
}

fn render(config: &RunConfig, outcome: &Outcome, total: u64) -> Result<String, Failure> {
    let json_error = |e: serde_json::Error| Failure::Usage(format!("cannot serialize report: {e}"));
    match (config.format, outcome) {
        (Format::Json, Outcome::Ca(r)) => {
            let doc = CaJson {
                command: &config.command,
                config,
                components: [CaComponent {
                    label: "CA",
                    statistic: r.statistic,
                    raw_p: r.p_value,
                    adjusted_p: r.p_value,
                }],
                best: "CA",
                statistic: r.statistic,
                p_value: r.p_value,
                alternative: r.alternative,
                continuity: r.continuity,
                n: total,
                warnings: Vec::new(),
                seed: None,
            };
            serde_json::to_string_pretty(&doc).map(|s| s + "\n").map_err(json_error)
        }
        (Format::Json, Outcome::Trend(r)) => {
            let best = r.best_component();
            let doc = TrendJson {
                command: &config.command,
                config,
                report: r,
                best_effect_size: best.effect_size.to_string(),
                best_metameter: &best.metameter,
            };
            serde_json::to_string_pretty(&doc).map(|s| s + "\n").map_err(json_error)
        }
        (Format::Csv, outcome) => csv_report(outcome),
        (Format::Text, Outcome::Ca(r)) => Ok(ca_text(config, r, total)),
        (Format::Text, Outcome::Trend(r)) => Ok(trend_text(config, r)),
    }
}

fn csv_report(outcome: &Outcome) -> Result<String, Failure> {
    let csv_error = |e: csv::Error| Failure::Usage(format!("cannot write CSV: {e}"));
    let mut writer = csv::Writer::from_writer(Vec::new());
    match outcome {
        Outcome::Ca(r) => {
            let row = CaComponent { label: "CA", statistic: r.statistic, raw_p: r.p_value, adjusted_p: r.p_value };
            writer.serialize(row).map_err(csv_error)?;
        }
        Outcome::Trend(r) => {
            for c in &r.components {
                writer.serialize(c).map_err(csv_error)?;
            }
        }
    }
    let bytes = writer.into_inner().map_err(|e| Failure::Usage(format!("cannot write CSV: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Failure::Usage(e.to_string()))
}

fn ca_text(config: &RunConfig, r: &CaResult, total: u64) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Cochran–Armitage trend test ({})", config.input);
    let _ = writeln!(s, "alternative: {}, continuity correction: {}, N = {total}", r.alternative, r.continuity);
    let _ = writeln!(s);
    let _ = writeln!(s, "statistic  {:.4}", r.statistic);
    let _ = writeln!(s, "p-value    {:.5}", r.p_value);
    let _ = writeln!(s);
    let _ = writeln!(s, "exact values:");
    let _ = writeln!(s, "CA\tstatistic={:?}\traw_p={:?}\tadjusted_p={:?}", r.statistic, r.p_value, r.p_value);
    s
}

fn title(r: &TrendReport, config: &RunConfig) -> String {
    use trendlab::trendtest::Procedure;
    let links: Vec<String> = config.links.iter().map(|l| l.to_string()).collect();
    match r.procedure {
        Procedure::Tukey => format!("Tukey trend test, {} link", links.join(",")),
        Procedure::DoubleMax => format!("Double maximum test over links {}", links.join(",")),
        Procedure::JointWilliams => format!("Joint regression and Williams test, {} link", links.join(",")),
        Procedure::Overdispersed => "Quasi-binomial trend test, logit link".to_string(),
    }
}

fn bound(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

fn exact(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), |v| format!("{v:?}"))
}

fn trend_text(config: &RunConfig, r: &TrendReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{} ({})", title(r, config), config.input);
    let _ = writeln!(
        s,
        "alternative: {}, simultaneous level {}, N = {}, M = {}, critical value {:.4}",
        r.alternative, r.level, r.n, r.m, r.critical_value
    );
    let _ = writeln!(s, "seed {}, MVN error {:.1e}", r.seed, r.mvn_error);
    let _ = writeln!(s);

    let width = r.components.iter().map(|c| c.label.len()).max().unwrap_or(0).max("component".len());
    let _ = writeln!(
        s,
        "{:<width$}  {:>9}  {:>9}  {:>9}  {:>9}  {:>9}  {:>9}  {:>10}",
        "component", "estimate", "effect", "lower", "upper", "statistic", "raw p", "adjusted p"
    );
    for c in &r.components {
        let _ = writeln!(
            s,
            "{:<width$}  {:>9.4}  {:>9.4}  {:>9}  {:>9}  {:>9.4}  {:>9.5}  {:>10.5}",
            c.label,
            c.estimate,
            c.estimate_effect,
            bound(c.lower_effect),
            bound(c.upper_effect),
            c.statistic,
            c.raw_p,
            c.adjusted_p
        );
    }
    let _ = writeln!(s);
    if r.tied_best.len() > 1 {
        let _ = writeln!(s, "best: {} (tied: {})", r.best, r.tied_best.join(", "));
    } else {
        let _ = writeln!(s, "best: {}", r.best);
    }
    if r.components.iter().any(|c| c.pearson_dispersion.is_some() && c.dispersion != 1.0) {
        let phis: Vec<String> = r.components.iter().map(|c| format!("{} {:.4}", c.label, c.dispersion)).collect();
        let _ = writeln!(s, "dispersion: {}", phis.join(", "));
    }
    if !r.warnings.is_empty() {
        let _ = writeln!(s);
        let _ = writeln!(s, "warnings:");
        for w in &r.warnings {
            let _ = writeln!(s, "  - {w}");
        }
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "exact values:");
    for c in &r.components {
        let _ = writeln!(
            s,
            "{}\testimate={:?}\testimate_effect={:?}\tstd_error={:?}\tstatistic={:?}\traw_p={:?}\tadjusted_p={:?}\tlower={}\tupper={}\tdispersion={:?}",
            c.label,
            c.estimate,
            c.estimate_effect,
            c.std_error,
            c.statistic,
            c.raw_p,
            c.adjusted_p,
            exact(c.lower),
            exact(c.upper),
            c.dispersion
        );
    }
    let _ = writeln!(s, "critical_value={:?}", r.critical_value);
    s
}
