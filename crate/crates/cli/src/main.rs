use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use waveletnet::complexity::{report_config, ComplexityReport};
use waveletnet::connectivity::haar_matrix;
use waveletnet::data::load_cifar10;
use waveletnet::models::{HeadKind, KappaMode, ModelConfig};
use waveletnet::train::{ablation_pair, run, RunResult, ToyProfile, TrainLog, HALVING_WINDOW};
use waveletnet::verify::{run_suite, Suite, VerifyOptions};
use waveletnet::{Error, SignConvention};

const DATA_ENV: &str = "WAVELETNET_DATA";

#[derive(Parser)]
#[command(
    name = "waveletnet",
    version,
    about = "Accounting and verification tools for wavelet convolutions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parameter and MAC accounting for a model.
    Report(ReportArgs),
    /// Run the property suites.
    Verify(VerifyArgs),
    /// Print a modified Haar matrix.
    Haar(HaarArgs),
    /// Desk-scale training runs.
    Train(TrainArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Imagenet,
    Cifar,
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadArg {
    Dense,
    Wconv,
}

#[derive(clap::Args)]
struct ReportArgs {
    #[arg(
        long,
        value_enum,
        default_value = "imagenet",
        conflicts_with = "config"
    )]
    model: ModelArg,
    #[arg(long)]
    width: Option<f64>,
    #[arg(long)]
    kappa: Option<u32>,
    #[arg(long, value_enum)]
    head: Option<HeadArg>,
    /// Expansion ratio.
    #[arg(long)]
    t: Option<usize>,
    /// Units per CIFAR stage.
    #[arg(long = "M")]
    m: Option<usize>,
    /// Error instead of clamping infeasible depths.
    #[arg(long)]
    strict: bool,
    /// Model configuration file (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Pretty-print the JSON payload.
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Connectivity,
    Oracle,
    Gradients,
    All,
}

#[derive(clap::Args)]
struct VerifyArgs {
    #[arg(long, value_enum, default_value = "all")]
    suite: SuiteArg,
    /// Perturb entry `row,col` of the generated 8×8 Haar matrices.
    #[arg(long, hide = true, value_parser = parse_pair)]
    corrupt_haar: Option<(usize, usize)>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SignArg {
    Algorithm2,
    Matrix,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Ascii,
    Json,
}

#[derive(clap::Args)]
struct HaarArgs {
    #[arg(long)]
    d: usize,
    /// Defaults to log2 d.
    #[arg(long)]
    kappa: Option<u32>,
    #[arg(long, value_enum, default_value = "algorithm2")]
    sign: SignArg,
    #[arg(long, value_enum, default_value = "ascii")]
    format: FormatArg,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ProfileArg {
    ToySynth,
    ToyCifar,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long, value_enum, default_value = "toy-synth")]
    profile: ProfileArg,
    /// Train the DFWT-free twin.
    #[arg(long, conflicts_with = "pair")]
    ablate_dfwt: bool,
    /// Train both variants from shared initialization and compare.
    #[arg(long)]
    pair: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON-lines epoch log; with --pair, one file per variant.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    /// CIFAR-10 binary directory for toy-cifar (falls back to $WAVELETNET_DATA).
    #[arg(long)]
    data: Option<PathBuf>,
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected ROW,COL")?;
    Ok((
        a.trim().parse().map_err(|e| format!("{e}"))?,
        b.trim().parse().map_err(|e| format!("{e}"))?,
    ))
}

enum Failure {
    Check(String),
    Usage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_)
            | Error::Io { .. }
            | Error::Format { .. }
            | Error::NotPowerOfTwo(_)
            | Error::DepthTooLarge { .. }
            | Error::Divisibility { .. }
            | Error::Json(_) => Failure::Usage(e.to_string()),
            other => Failure::Check(other.to_string()),
        }
    }
}

type CmdResult = Result<bool, Failure>;

fn emit<T: Serialize>(value: &T, pretty: bool) {
    let text = if pretty {
        serde_json::to_string_pretty(value)
    } else {
        serde_json::to_string(value)
    };
    println!("{}", text.expect("payload serializes"));
}

fn report_model(args: &ReportArgs) -> Result<ModelConfig, Failure> {
    let usage = |m: &str| Err(Failure::Usage(m.into()));
    if let Some(path) = &args.config {
        if args.width.is_some() || args.kappa.is_some() || args.t.is_some() || args.m.is_some() {
            return usage("--config cannot be combined with --width, --kappa, --t or --M");
        }
        let mut c = ModelConfig::from_path(path)?;
        if let Some(h) = args.head {
            c.head = head_kind(h);
        }
        if args.strict {
            c.kappa_mode = KappaMode::Strict;
        }
        return Ok(c);
    }
    let width = args.width.unwrap_or(1.0);
    if !(width > 0.0 && width.is_finite()) {
        return usage("--width must be a positive number");
    }
    let mut c = match args.model {
        ModelArg::Imagenet => {
            if args.m.is_some() {
                return usage("--M applies only to --model cifar");
            }
            ModelConfig::imagenet(width, args.kappa.unwrap_or(3), args.t.unwrap_or(6))
        }
        ModelArg::Cifar => {
            if matches!(args.head, Some(HeadArg::Wconv)) {
                return usage("the cifar model has no 1280-wide head; --head wconv does not apply");
            }
            let m = args.m.unwrap_or(24);
            if m == 0 {
                return usage("--M must be at least 1");
            }
            let mut c = ModelConfig::cifar(m, width);
            if let Some(k) = args.kappa {
                c = c.with_kappas((0, k, k));
            }
            if let Some(t) = args.t {
                c.expansion = t;
            }
            c
        }
    };
    if args.t == Some(0) {
        return usage("--t must be at least 1");
    }
    if let Some(h) = args.head {
        c.head = head_kind(h);
    }
    if args.strict {
        c.kappa_mode = KappaMode::Strict;
    }
    Ok(c)
}

fn head_kind(h: HeadArg) -> HeadKind {
    match h {
        HeadArg::Dense => HeadKind::Dense,
        HeadArg::Wconv => HeadKind::Wconv,
    }
}

fn summarize(r: &ComplexityReport) {
    eprintln!(
        "{} w={} kappas={:?}: {:.3}M params, {:.1}M MACs, {} conv layers",
        r.model,
        r.width_mult,
        r.kappas,
        r.total_params as f64 / 1e6,
        r.total_macs as f64 / 1e6,
        r.conv_layers
    );
    for h in &r.head_readings {
        eprintln!(
            "  head {:?}: {:.3}M params, {:.1}M MACs",
            h.head,
            h.total_params as f64 / 1e6,
            h.total_macs as f64 / 1e6
        );
    }
    for c in &r.clamped {
        eprintln!(
            "  clamped {} {}: depth {} -> {}",
            c.layer, c.stage, c.requested, c.applied
        );
    }
    if !r.discrepancies.is_empty() {
        eprintln!(
            "  {} layers differ from the closed-form reference",
            r.discrepancies.len()
        );
    }
}

fn cmd_report(args: ReportArgs) -> CmdResult {
    let config = report_model(&args)?;
    let report = report_config(&config)?;
    summarize(&report);
    emit(&report, args.json);
    Ok(true)
}

fn cmd_verify(args: VerifyArgs) -> CmdResult {
    let suite = match args.suite {
        SuiteArg::Connectivity => Suite::Connectivity,
        SuiteArg::Oracle => Suite::Oracle,
        SuiteArg::Gradients => Suite::Gradients,
        SuiteArg::All => Suite::All,
    };
    if let Some((i, j)) = args.corrupt_haar {
        if i >= 8 || j >= 8 {
            return Err(Failure::Usage(
                "--corrupt-haar indices must be below 8".into(),
            ));
        }
    }
    let report = run_suite(
        suite,
        &VerifyOptions {
            corrupt_haar: args.corrupt_haar,
        },
    );
    for p in &report.properties {
        eprintln!(
            "{} {}/{}: {}",
            if p.passed { "PASS" } else { "FAIL" },
            p.suite,
            p.name,
            p.detail
        );
    }
    eprintln!("{:.2}s", report.seconds);
    emit(&report, false);
    Ok(report.passed)
}

fn cmd_haar(args: HaarArgs) -> CmdResult {
    if args.d == 0 || !args.d.is_power_of_two() {
        return Err(Failure::Usage(format!(
            "--d must be a power of two, got {}",
            args.d
        )));
    }
    let kappa = args.kappa.unwrap_or(args.d.trailing_zeros());
    let sign = match args.sign {
        SignArg::Algorithm2 => SignConvention::Algorithm2,
        SignArg::Matrix => SignConvention::Matrix,
    };
    let h = haar_matrix(args.d, kappa, sign)?;
    match args.format {
        FormatArg::Ascii => print!("{}", h.to_ascii()),
        FormatArg::Json => emit(
            &json!({
                "schema": "waveletnet.haar/v1",
                "d": args.d,
                "kappa": kappa,
                "sign": sign,
                "rows": h.rows(),
            }),
            false,
        ),
    }
    eprintln!(
        "H_{} depth {kappa}, row blocks {:?}",
        args.d,
        h.row_blocks()
    );
    Ok(true)
}

#[derive(Serialize)]
struct RunSummary {
    ablate_dfwt: bool,
    steps: usize,
    initial_loss: Option<f64>,
    final_loss: Option<f64>,
    halved: bool,
    monotone: bool,
    flagged: bool,
    test_err: f64,
}

impl RunSummary {
    fn of(log: &TrainLog, ablate: bool, test_err: f64) -> Self {
        RunSummary {
            ablate_dfwt: ablate,
            steps: log.steps(),
            initial_loss: log.initial_loss(),
            final_loss: log.final_loss(HALVING_WINDOW),
            halved: log.halved(),
            monotone: log.monotone(),
            flagged: !log.monotone(),
            test_err,
        }
    }
}

fn write_log(path: &Path, log: &TrainLog) -> Result<(), Failure> {
    std::fs::write(path, log.to_jsonl())
        .map_err(|e| Failure::Usage(format!("cannot write {}: {e}", path.display())))
}

fn suffixed(path: &Path, tag: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("log");
    let ext = path.extension().and_then(|s| s.to_str()).unwrap_or("jsonl");
    path.with_file_name(format!("{stem}.{tag}.{ext}"))
}

fn cmd_train(args: TrainArgs) -> CmdResult {
    let t0 = Instant::now();
    let mut profile = match args.profile {
        ProfileArg::ToySynth => ToyProfile::synth(args.seed),
        ProfileArg::ToyCifar => ToyProfile::cifar(args.seed),
    };
    if let Some(s) = args.steps {
        if s == 0 {
            return Err(Failure::Usage("--steps must be positive".into()));
        }
        profile.train.max_steps = Some(s);
    }
    let (train_set, test_set) = match args.profile {
        ProfileArg::ToySynth => profile.datasets()?,
        ProfileArg::ToyCifar => {
            let dir = args
                .data
                .clone()
                .or_else(|| std::env::var_os(DATA_ENV).map(PathBuf::from))
                .ok_or_else(|| Failure::Usage(format!("toy-cifar needs --data or ${DATA_ENV}")))?;
            let (train, test) = load_cifar10(&dir)?;
            (train.take(profile.data.n), test.take(profile.test_n))
        }
    };
    let profile_name = match args.profile {
        ProfileArg::ToySynth => "toy-synth",
        ProfileArg::ToyCifar => "toy-cifar",
    };
    if args.pair {
        let pair = ablation_pair(
            &profile.model,
            &profile.train,
            &train_set,
            &test_set,
            args.seed,
        )?;
        if let Some(out) = &args.out {
            write_log(&suffixed(out, "with_dfwt"), &pair.with_dfwt)?;
            write_log(&suffixed(out, "without_dfwt"), &pair.without_dfwt)?;
        }
        eprintln!(
            "seed {}: with DFWT {:.2}% error, without {:.2}%, gap {:+.2} ({:.1}s)",
            args.seed,
            pair.with_dfwt_err,
            pair.without_dfwt_err,
            pair.gap,
            t0.elapsed().as_secs_f64()
        );
        emit(
            &json!({
                "schema": "waveletnet.train/v1",
                "profile": profile_name,
                "seed": args.seed,
                "with_dfwt_err": pair.with_dfwt_err,
                "without_dfwt_err": pair.without_dfwt_err,
                "gap": pair.gap,
                "runs": [
                    RunSummary::of(&pair.with_dfwt, false, pair.with_dfwt_err),
                    RunSummary::of(&pair.without_dfwt, true, pair.without_dfwt_err),
                ],
                "seconds": t0.elapsed().as_secs_f64(),
            }),
            false,
        );
        return Ok(true);
    }
    let mut model = profile.model.clone();
    model.ablate_dfwt = args.ablate_dfwt;
    let RunResult { log, test_err, .. } =
        run(&model, &profile.train, &train_set, &test_set, args.seed)?;
    if let Some(out) = &args.out {
        write_log(out, &log)?;
    }
    let summary = RunSummary::of(&log, args.ablate_dfwt, test_err);
    if summary.flagged {
        eprintln!("warning: epoch-mean training loss increased at least once");
    }
    eprintln!(
        "{} steps, loss {:.3} -> {:.3}, test error {:.2}% ({:.1}s)",
        summary.steps,
        summary.initial_loss.unwrap_or(f64::NAN),
        summary.final_loss.unwrap_or(f64::NAN),
        test_err,
        t0.elapsed().as_secs_f64()
    );
    emit(
        &json!({
            "schema": "waveletnet.train/v1",
            "profile": profile_name,
            "seed": args.seed,
            "runs": [summary],
            "seconds": t0.elapsed().as_secs_f64(),
        }),
        false,
    );
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Report(a) => cmd_report(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Haar(a) => cmd_haar(a),
        Command::Train(a) => cmd_train(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Check(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(m)) => {
            eprintln!("usage error: {m}");
            ExitCode::from(2)
        }
    }
}
