mod config;

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, bail, Context};
use clap::{ArgGroup, Args, Parser, Subcommand};
use serde::Serialize;

use muie_core::corpus::{load_manifest, validate_corpus, Manifest, Violation};
use muie_core::harness::stub::{serve_lines, EchoStub, OracleStub, Stub};
use muie_core::harness::{
    load_prediction_dir, run_pipeline, score_store, BackendKind, BackendSpec, Backends,
    PredictionStore, RunConfig, ScoreConfig, ScoreOutcome,
};
use muie_core::metaresponse::parse_meta_response_bytes;
use muie_core::model::Task;
use muie_core::scoring::{
    render_report, AggregateOptions, MatchOptions, ReportFormat, ScoreReport, SplitKey,
};

use config::FileConfig;

const EXIT_OK: u8 = 0;
const EXIT_CONFIG: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_PARTIAL: u8 = 3;

/// An error that maps to the input-format exit code rather than the
/// fatal-config one.
#[derive(Debug)]
struct InputError(anyhow::Error);

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for InputError {}

fn input_err(e: impl Into<anyhow::Error>) -> anyhow::Error {
    anyhow::Error::new(InputError(e.into()))
}

#[derive(Parser)]
#[command(
    name = "muie",
    version,
    about = "Grounded multimodal information extraction toolkit"
)]
struct Cli {
    /// TOML file supplying defaults for any long flag.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a corpus manifest and every gold file it references.
    Validate {
        manifest: PathBuf,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Parse a meta-response (file or `-` for stdin) into canonical json.
    Parse {
        input: String,
        #[arg(long)]
        task: Task,
    },
    /// Run every manifest instance through the configured backends.
    Run(RunArgs),
    /// Score a prediction store or a directory of prediction files.
    Score(ScoreArgs),
    /// Re-render a saved json report.
    Report {
        #[arg(long = "in", value_name = "FILE")]
        input: PathBuf,
        #[arg(long)]
        format: Option<ReportFormat>,
    },
    /// Serve a deterministic stub backend over stdin/stdout.
    #[command(subcommand)]
    Stub(StubCommand),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// `kind=stdio:<command>` or `kind=http(s)://...`; kind is one of uie,
    /// image_segmenter, video_tracker, audio_segmenter. Repeatable.
    #[arg(long = "backend", value_name = "SPEC")]
    backends: Vec<String>,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long)]
    jobs: Option<usize>,
    /// Per-request timeout in seconds.
    #[arg(long)]
    timeout: Option<f64>,
    #[arg(long)]
    retries: Option<u32>,
    /// Requests in flight per backend.
    #[arg(long)]
    max_inflight: Option<usize>,
}

#[derive(Args)]
#[command(group(ArgGroup::new("source").required(true).args(["store", "pred"])))]
struct ScoreArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Store written by `muie run`.
    #[arg(long, value_name = "DIR")]
    store: Option<PathBuf>,
    /// Directory of `<instance id>.json` prediction files in the gold format.
    #[arg(long, value_name = "DIR")]
    pred: Option<PathBuf>,
    /// Comma-separated splits: all, shared, specific, entity-buckets.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    format: Option<ReportFormat>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    case_insensitive: bool,
    #[arg(long)]
    strict_relations: bool,
    #[arg(long)]
    exclude_vacuous: bool,
    /// Row label in table output.
    #[arg(long)]
    label: Option<String>,
}

#[derive(Subcommand)]
enum StubCommand {
    /// Replay canned responses from a json-lines fixture.
    Echo {
        #[arg(long)]
        fixture: PathBuf,
    },
    /// Answer every request from gold.
    Oracle {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Answer from gold with a deterministic share of items corrupted.
    Corrupt {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        percent: f64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK });
        }
    };
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("muie: {e:#}");
            let code = if e.downcast_ref::<InputError>().is_some() {
                EXIT_INPUT
            } else {
                EXIT_CONFIG
            };
            ExitCode::from(code)
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<u8> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    match cli.command {
        Command::Validate { manifest, jobs } => validate(&manifest, resolve_jobs(jobs, &file)?),
        Command::Parse { input, task } => parse(&input, task),
        Command::Run(args) => run(args, &file),
        Command::Score(args) => score(args, &file),
        Command::Report { input, format } => report(&input, resolve_format(format, &file)?),
        Command::Stub(cmd) => stub(cmd),
    }
}

fn resolve_jobs(flag: Option<usize>, file: &FileConfig) -> anyhow::Result<usize> {
    match flag.or(file.jobs) {
        Some(0) => bail!("--jobs must be at least 1"),
        Some(n) => Ok(n),
        None => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn resolve_format(flag: Option<ReportFormat>, file: &FileConfig) -> anyhow::Result<ReportFormat> {
    match (flag, &file.format) {
        (Some(f), _) => Ok(f),
        (None, Some(s)) => Ok(s.parse()?),
        (None, None) => Ok(ReportFormat::Table),
    }
}

fn open_manifest(path: &Path) -> anyhow::Result<Manifest> {
    let manifest = load_manifest(path).map_err(input_err)?;
    for w in &manifest.warnings {
        eprintln!("warning: {w}");
    }
    Ok(manifest)
}

fn emit_violations(violations: &[Violation]) {
    let stderr = io::stderr();
    let mut err = stderr.lock();
    for v in violations {
        let line = serde_json::to_string(v).expect("violation serializes");
        let _ = writeln!(err, "{line}");
    }
}

fn write_stdout(bytes: &[u8]) -> anyhow::Result<()> {
    let mut out = io::stdout().lock();
    out.write_all(bytes)?;
    out.flush()?;
    Ok(())
}

fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_stdout(&bytes)
}

fn validate(path: &Path, jobs: usize) -> anyhow::Result<u8> {
    let manifest = open_manifest(path)?;
    let report = validate_corpus(&manifest, jobs);
    emit_violations(&report.violations);
    print_json(&report.summary)?;
    Ok(if report.is_clean() {
        EXIT_OK
    } else {
        EXIT_INPUT
    })
}

#[derive(Serialize)]
struct ParseFailure<'a> {
    code: &'a str,
    offset: usize,
    message: String,
}

fn parse(input: &str, task: Task) -> anyhow::Result<u8> {
    let bytes = if input == "-" {
        let mut buf = Vec::new();
        io::stdin().read_to_end(&mut buf)?;
        buf
    } else {
        std::fs::read(input)
            .with_context(|| format!("cannot read {input}"))
            .map_err(input_err)?
    };
    match parse_meta_response_bytes(&bytes, task) {
        Ok(meta) => {
            for w in &meta.warnings {
                eprintln!("warning: byte {}: {}", w.offset, w.message);
            }
            print_json(&meta)?;
            Ok(EXIT_OK)
        }
        Err(e) => {
            let failure = ParseFailure {
                code: "PARSE_ERROR",
                offset: e.offset(),
                message: e.to_string(),
            };
            eprintln!("{}", serde_json::to_string(&failure)?);
            Ok(EXIT_INPUT)
        }
    }
}

#[derive(Serialize)]
struct RunSummary {
    instances: usize,
    failed: usize,
    errors: BTreeMap<String, usize>,
    store: PathBuf,
}

fn run(args: RunArgs, file: &FileConfig) -> anyhow::Result<u8> {
    let jobs = resolve_jobs(args.jobs, file)?;
    let timeout = args.timeout.or(file.timeout).unwrap_or(60.0);
    if !(timeout.is_finite() && timeout > 0.0) {
        bail!("--timeout must be a positive number of seconds");
    }
    let timeout = Duration::from_secs_f64(timeout);
    let max_inflight = args.max_inflight.or(file.max_inflight).unwrap_or(jobs);
    let specs = if args.backends.is_empty() {
        &file.backends
    } else {
        &args.backends
    };

    let mut uie = None;
    let mut grounding = BTreeMap::new();
    for raw in specs {
        let spec = BackendSpec::parse(raw, timeout, max_inflight)?;
        let backend = spec
            .connect()
            .with_context(|| format!("cannot start backend `{raw}`"))?;
        match spec.kind.grounding_modality() {
            None => uie = Some(backend),
            Some(m) => {
                grounding.insert(m, backend);
            }
        }
    }
    let uie = uie.ok_or_else(|| anyhow!("a `{}=...` backend is required", BackendKind::Uie))?;

    let manifest = open_manifest(&args.manifest)?;
    let backends = Backends { uie, grounding };
    let config = RunConfig {
        jobs,
        timeout,
        retries: args.retries.or(file.retries).unwrap_or(1),
        ..RunConfig::default()
    };
    let mut store = PredictionStore::create(&args.out)?;
    let records = run_pipeline(&manifest, &backends, &config, &mut store)?;

    let mut errors = BTreeMap::new();
    for r in &records {
        if let Some(e) = &r.error {
            eprintln!("{}: {} {}", r.instance_id, e.code, e.message);
            *errors.entry(e.code.to_string()).or_default() += 1;
        }
    }
    let failed = errors.values().sum();
    print_json(&RunSummary {
        instances: records.len(),
        failed,
        errors,
        store: args.out,
    })?;
    Ok(if failed == 0 { EXIT_OK } else { EXIT_PARTIAL })
}

fn score(args: ScoreArgs, file: &FileConfig) -> anyhow::Result<u8> {
    let split = args
        .split
        .as_deref()
        .or(file.split.as_deref())
        .unwrap_or("all");
    let splits = SplitKey::parse_list(split)?;
    if splits.is_empty() {
        bail!("--split names no splits");
    }
    let format = resolve_format(args.format, file)?;
    let config = ScoreConfig {
        match_options: MatchOptions {
            case_insensitive: args.case_insensitive || file.case_insensitive.unwrap_or(false),
            strict_relations: args.strict_relations || file.strict_relations.unwrap_or(false),
        },
        aggregate: AggregateOptions {
            exclude_vacuous: args.exclude_vacuous || file.exclude_vacuous.unwrap_or(false),
            label: args
                .label
                .or_else(|| file.label.clone())
                .unwrap_or_default(),
        },
        splits,
        jobs: resolve_jobs(args.jobs, file)?,
    };

    let manifest = open_manifest(&args.manifest)?;
    let outcome = match (&args.store, &args.pred) {
        (Some(dir), None) => {
            let store = PredictionStore::open(dir).map_err(input_err)?;
            score_store(&store, &manifest, &config).map_err(input_err)?
        }
        (None, Some(dir)) => {
            if !dir.is_dir() {
                return Err(input_err(anyhow!("{} is not a directory", dir.display())));
            }
            let (preds, mut violations) = load_prediction_dir(dir, &manifest);
            let mut outcome =
                muie_core::harness::score_predictions(&manifest, &preds, Vec::new(), &config);
            violations.append(&mut outcome.violations);
            violations.sort();
            ScoreOutcome {
                report: outcome.report,
                violations,
            }
        }
        _ => unreachable!("clap enforces exactly one source"),
    };

    emit_violations(&outcome.violations);
    for e in &outcome.report.errors {
        eprintln!("{}: {} {}", e.instance_id, e.code, e.message);
    }
    write_stdout(&render_report(&outcome.report, format))?;
    Ok(if !outcome.violations.is_empty() {
        EXIT_INPUT
    } else if !outcome.report.errors.is_empty() {
        EXIT_PARTIAL
    } else {
        EXIT_OK
    })
}

fn report(input: &Path, format: ReportFormat) -> anyhow::Result<u8> {
    let bytes = std::fs::read(input)
        .with_context(|| format!("cannot read {}", input.display()))
        .map_err(input_err)?;
    let report = ScoreReport::from_json(&bytes)
        .with_context(|| input.display().to_string())
        .map_err(input_err)?;
    write_stdout(&render_report(&report, format))?;
    Ok(EXIT_OK)
}

fn oracle(manifest: &Path, percent: f64) -> anyhow::Result<OracleStub> {
    if !(0.0..=100.0).contains(&percent) {
        bail!("--percent must be within [0, 100]");
    }
    let manifest = open_manifest(manifest)?;
    OracleStub::from_manifest(&manifest, percent).map_err(|violations| {
        emit_violations(&violations);
        input_err(anyhow!("gold files have {} violation(s)", violations.len()))
    })
}

fn stub(cmd: StubCommand) -> anyhow::Result<u8> {
    let stub: Box<dyn Stub> = match cmd {
        StubCommand::Echo { fixture } => {
            let text = std::fs::read_to_string(&fixture)
                .with_context(|| format!("cannot read {}", fixture.display()))
                .map_err(input_err)?;
            Box::new(EchoStub::from_jsonl(&text).map_err(input_err)?)
        }
        StubCommand::Oracle { manifest } => Box::new(oracle(&manifest, 0.0)?),
        StubCommand::Corrupt { manifest, percent } => Box::new(oracle(&manifest, percent)?),
    };
    let stdin = BufReader::new(io::stdin().lock());
    serve_lines(stub.as_ref(), stdin, io::stdout().lock())?;
    Ok(EXIT_OK)
}
