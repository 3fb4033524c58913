//! Command-line front end.
//!
//! Exit codes: 0 success, 1 validation error, 2 numerical divergence,
//! 3 certificate failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use pwa_mrac::certificate::CertificateError;
use pwa_mrac::plot::render_svg;
use pwa_mrac::scenario::{
    compare, describe_metrics, export_trace, load_document_file, parse_scenario_spec, run, scenario_certificate,
    Document, RunOutput, Scenario, ScenarioError,
};
use pwa_mrac::{IntegrationError, LawVariant};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_DIVERGENCE: i32 = 2;
pub const EXIT_CERTIFICATE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "pwa-mrac", version, about = "Adaptive control of piecewise affine systems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a scenario and write its trace CSV and event log.
    Simulate(RunArgs),
    /// Check (or synthesize) the common Lyapunov certificate.
    VerifyClf(CommonArgs),
    /// Monte-Carlo check that the regions partition the sampling box.
    ValidatePartition(PartitionArgs),
    /// Run the extended and ablated laws side by side.
    Compare(RunArgs),
    /// Run a scenario and write a four-panel SVG chart.
    ExportPlot(RunArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum VariantArg {
    Extended,
    NoAffineCompensation,
}

impl From<VariantArg> for LawVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Extended => LawVariant::Extended,
            VariantArg::NoAffineCompensation => LawVariant::NoAffineCompensation,
        }
    }
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Scenario file.
    pub scenario: PathBuf,
    /// Print a JSON summary on standard output.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Output directory.
    #[arg(short = 'o', long = "out-dir", env = "PWA_MRAC_OUT", default_value = ".")]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long = "t-final")]
    pub t_final: Option<f64>,
    #[arg(long = "law-variant", value_enum)]
    pub law_variant: Option<VariantArg>,
    /// Trace sampling stride in steps.
    #[arg(long)]
    pub stride: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PartitionArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Error taxonomy mapped onto exit codes.
pub fn exit_code(e: &ScenarioError) -> i32 {
    match e {
        ScenarioError::Certificate(_) => EXIT_CERTIFICATE,
        ScenarioError::Divergence { .. } | ScenarioError::Integration(IntegrationError::Divergence { .. }) => {
            EXIT_DIVERGENCE
        }
        _ => EXIT_VALIDATION,
    }
}

struct Io<'a> {
    out: &'a mut dyn Write,
    err: &'a mut dyn Write,
}

/// Runs a parsed command line; returns the process exit code.
pub fn execute(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let mut io = Io { out, err };
    let json = match &cli.command {
        Command::Simulate(a) | Command::Compare(a) | Command::ExportPlot(a) => a.common.json,
        Command::VerifyClf(a) => a.json,
        Command::ValidatePartition(a) => a.common.json,
    };
    let result = match cli.command {
        Command::Simulate(a) => simulate(&a, &mut io),
        Command::VerifyClf(a) => verify_clf(&a, &mut io),
        Command::ValidatePartition(a) => validate_partition(&a, &mut io),
        Command::Compare(a) => compare_cmd(&a, &mut io),
        Command::ExportPlot(a) => export_plot(&a, &mut io),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(io.err, "error: {e}");
            let code = exit_code(&e);
            if json {
                let mut summary = json!({ "status": "error", "exit_code": code, "error": e.to_string() });
                if let ScenarioError::Divergence { t, metrics, .. } = &e {
                    summary["t_divergence"] = json!(t);
                    summary["metrics"] = serde_json::to_value(metrics).unwrap_or(Value::Null);
                }
                let _ = writeln!(io.out, "{summary:#}");
            }
            code
        }
    }
}

fn load(path: &Path) -> Result<Document, ScenarioError> {
    load_document_file(path)
}

fn load_mrac(args: &RunArgs) -> Result<Scenario, ScenarioError> {
    match load(&args.common.scenario)? {
        Document::Mrac(s) => prepare(*s, args),
        Document::Demo(_) => Err(ScenarioError::Validation(
            "this command needs an adaptive-control scenario, not an open-loop demo".into(),
        )),
    }
}

fn prepare(s: Scenario, args: &RunArgs) -> Result<Scenario, ScenarioError> {
    let mut s = s.with_timing(args.dt, args.t_final)?;
    if let Some(v) = args.law_variant {
        s = s.with_variant(v.into());
    }
    if let Some(stride) = args.stride {
        if stride == 0 {
            return Err(ScenarioError::Validation("--stride must be at least 1".into()));
        }
        s = s.with_stride(stride);
    }
    Ok(s)
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "scenario".into(), |s| s.to_string_lossy().into_owned())
}

fn out_file(args: &RunArgs, suffix: &str) -> Result<PathBuf, ScenarioError> {
    fs::create_dir_all(&args.out_dir)?;
    Ok(args.out_dir.join(format!("{}{suffix}", file_stem(&args.common.scenario))))
}

fn print_json(io: &mut Io, v: &Value) {
    let _ = writeln!(io.out, "{v:#}");
}

fn simulate(args: &RunArgs, io: &mut Io) -> Result<i32, ScenarioError> {
    match load(&args.common.scenario)? {
        Document::Demo(mut demo) => {
            if let Some(dt) = args.dt {
                demo.dt = dt;
            }
            if let Some(t) = args.t_final {
                demo.t_final = t;
            }
            if let Some(s) = args.stride {
                demo.sample_stride = s;
            }
            let trace = demo.run()?;
            let path = out_file(args, ".csv")?;
            trace.write_csv(&path)?;
            let last = trace.samples.last().copied().unwrap_or_default();
            if args.common.json {
                print_json(
                    io,
                    &json!({
                        "status": "ok",
                        "scenario": demo.name,
                        "kind": "open-loop-demo",
                        "trace": path,
                        "final_state": [last[1], last[2]],
                        "final_v": last[3],
                    }),
                );
            } else {
                let _ = writeln!(io.out, "open-loop demo {}: final V = {:.6e}", demo.name, last[3]);
                let _ = writeln!(io.out, "trace written to {}", path.display());
            }
            Ok(EXIT_OK)
        }
        Document::Mrac(s) => {
            let s = prepare(*s, args)?;
            let path = out_file(args, ".csv")?;
            let out = match run(&s) {
                Ok(o) => o,
                Err(ScenarioError::Divergence { t, result, metrics }) => {
                    export_trace(&result, &path)?;
                    return Err(ScenarioError::Divergence { t, result, metrics });
                }
                Err(e) => return Err(e),
            };
            export_trace(&out.result, &path)?;
            report_run(io, &s, &out, &path, args.common.json);
            Ok(EXIT_OK)
        }
    }
}

fn report_run(io: &mut Io, s: &Scenario, out: &RunOutput, path: &Path, json: bool) {
    if json {
        print_json(
            io,
            &json!({
                "status": "ok",
                "scenario": s.name(),
                "law_variant": s.spec().law_variant,
                "trace": path,
                "events": pwa_mrac::scenario::events_path(path),
                "metrics": out.metrics,
            }),
        );
    } else {
        let _ = writeln!(io.out, "scenario {} ({:?})", s.name(), s.spec().law_variant);
        let _ = write!(io.out, "{}", describe_metrics(&out.metrics));
        let _ = writeln!(io.out, "trace written to {}", path.display());
    }
}

fn verify_clf(args: &CommonArgs, io: &mut Io) -> Result<i32, ScenarioError> {
    let text = fs::read_to_string(&args.scenario)?;
    let spec = parse_scenario_spec(&text)?;
    let reference = spec.reference.build(spec.n, "reference")?;
    match scenario_certificate(&spec, &reference) {
        Ok(cert) => {
            let eig: Vec<f64> = cert.q_list.iter().map(|q| -q.symmetric_eigenvalues().min()).collect();
            if args.json {
                let p: Vec<Vec<f64>> = cert.p.row_iter().map(|r| r.iter().copied().collect()).collect();
                print_json(
                    io,
                    &json!({
                        "status": "ok",
                        "scenario": spec.name,
                        "p": p,
                        "margin": cert.margin,
                        "lambda_max_per_mode": eig,
                    }),
                );
            } else {
                let _ = writeln!(io.out, "common Lyapunov certificate found for {} mode(s)", eig.len());
                let _ = writeln!(io.out, "P = {:?}", cert.p.row_iter().map(|r| r.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>());
                for (i, e) in eig.iter().enumerate() {
                    let _ = writeln!(io.out, "mode {i}: lambda_max(PA + A^T P) = {e:.6e}");
                }
                let _ = writeln!(io.out, "margin = {:.6e}", cert.margin);
            }
            Ok(EXIT_OK)
        }
        Err(ScenarioError::Certificate(e)) => {
            if args.json {
                let modes: Vec<Value> = match &e {
                    CertificateError::Violated { violations, .. } => violations
                        .iter()
                        .map(|v| json!({ "mode": v.mode, "lambda_min_q": v.lambda_min }))
                        .collect(),
                    _ => Vec::new(),
                };
                print_json(
                    io,
                    &json!({ "status": "certificate-failure", "scenario": spec.name, "error": e.to_string(), "violations": modes }),
                );
            }
            let _ = writeln!(io.err, "certificate failure: {e}");
            Ok(EXIT_CERTIFICATE)
        }
        Err(e) => Err(e),
    }
}

fn validate_partition(args: &PartitionArgs, io: &mut Io) -> Result<i32, ScenarioError> {
    let text = fs::read_to_string(&args.common.scenario)?;
    let spec = parse_scenario_spec(&text)?;
    let bounds = pwa_mrac::SampleBox::new(spec.partition.bounds.iter().map(|r| (r[0], r[1])).collect());
    let mut ok = true;
    let mut reports = Vec::new();
    for (what, sys) in [("plant", &spec.plant), ("reference", &spec.reference)] {
        let system = sys.build(spec.n, what)?;
        let r = system.validate_partition(args.samples, &bounds, args.seed);
        ok &= r.passed();
        if !args.common.json {
            let _ = writeln!(
                io.out,
                "{what}: {} samples, {} cover defect(s), {} overlap defect(s)",
                r.samples,
                r.cover_defects.len(),
                r.overlap_defects.len()
            );
        }
        reports.push(json!({
            "system": what,
            "samples": r.samples,
            "cover_defects": r.cover_defects.len(),
            "overlap_defects": r.overlap_defects.len(),
            "first_cover_defect": r.cover_defects.first(),
            "first_overlap_defect": r.overlap_defects.first().map(|(x, regions)| json!({ "x": x, "regions": regions })),
        }));
    }
    if args.common.json {
        print_json(
            io,
            &json!({ "status": if ok { "ok" } else { "partition-defect" }, "seed": args.seed, "reports": reports }),
        );
    }
    Ok(if ok { EXIT_OK } else { EXIT_VALIDATION })
}

fn compare_cmd(args: &RunArgs, io: &mut Io) -> Result<i32, ScenarioError> {
    let s = load_mrac(args)?;
    let (cmp, ext, abl) = compare(&s)?;
    let pe = out_file(args, ".extended.csv")?;
    let pa = out_file(args, ".ablated.csv")?;
    export_trace(&ext.result, &pe)?;
    export_trace(&abl.result, &pa)?;
    if args.common.json {
        print_json(
            io,
            &json!({
                "status": "ok",
                "scenario": cmp.scenario,
                "extended_final_error": cmp.extended.metrics.final_error_norm,
                "ablated_final_error": cmp.ablated.metrics.final_error_norm,
                "ratio": if cmp.ratio.is_finite() { json!(cmp.ratio) } else { json!("inf") },
                "verdict": cmp.verdict,
                "extended": cmp.extended,
                "ablated": cmp.ablated,
            }),
        );
    } else {
        let _ = writeln!(io.out, "scenario {}", cmp.scenario);
        let _ = writeln!(io.out, "extended final |x_e| {:.6e}", cmp.extended.metrics.final_error_norm);
        let _ = writeln!(io.out, "ablated  final |x_e| {:.6e}", cmp.ablated.metrics.final_error_norm);
        let _ = writeln!(io.out, "ratio {:.3e}, verdict {:?}", cmp.ratio, cmp.verdict);
    }
    Ok(EXIT_OK)
}

fn export_plot(args: &RunArgs, io: &mut Io) -> Result<i32, ScenarioError> {
    let s = load_mrac(args)?;
    let out = run(&s)?;
    let path = out_file(args, ".svg")?;
    fs::write(&path, render_svg(&out.result))?;
    if args.common.json {
        print_json(io, &json!({ "status": "ok", "scenario": s.name(), "svg": path, "metrics": out.metrics }));
    } else {
        let _ = writeln!(io.out, "plot written to {}", path.display());
    }
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_flags_parse() {
        let cli = Cli::try_parse_from([
            "pwa-mrac", "simulate", "s.scn", "--dt", "0.005", "--law-variant", "no-affine-compensation", "-o", "out",
        ])
        .unwrap();
        let Command::Simulate(args) = cli.command else { panic!("wrong subcommand") };
        assert_eq!(args.dt, Some(0.005));
        assert_eq!(args.out_dir, PathBuf::from("out"));
        assert!(matches!(args.law_variant, Some(VariantArg::NoAffineCompensation)));
    }

    #[test]
    fn partition_defaults() {
        let cli = Cli::try_parse_from(["pwa-mrac", "validate-partition", "s.scn"]).unwrap();
        let Command::ValidatePartition(args) = cli.command else { panic!("wrong subcommand") };
        assert_eq!((args.samples, args.seed), (10_000, 0));
    }

    #[test]
    fn unknown_variant_is_rejected() {
        assert!(Cli::try_parse_from(["pwa-mrac", "compare", "s.scn", "--law-variant", "other"]).is_err());
    }
}
