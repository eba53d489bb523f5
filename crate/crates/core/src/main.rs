//! Command-line pipeline around the bias-correction library.
//!
//! Subcommands: `phantom`, `correct`, `segment`, `evaluate`, `profile`.
//! Logs go to stderr; data and CSV only to files. Exit codes are stable:
//! 0 success, 1 I/O, 2 validation, 3 non-convergence.

use biascorrect::evaluation::{
    bone_per_slice, confusion_metrics, material_uniformity, two_sample_ttest, EvalReport,
};
use biascorrect::mfcm::FcmParams;
use biascorrect::phantom::{self, BiasSpec, PhantomSpec};
use biascorrect::pipeline;
use biascorrect::preprocess::PreprocessError;
use biascorrect::thresholding::ThresholdError;
use biascorrect::volume::{
    read_labels, read_mask, read_volume, write_labels, write_mask, write_volume, Mask, VolumeError,
};
use clap::{Args, Parser, Subcommand};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_IO: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_UNCONVERGED: u8 = 3;

#[derive(Parser)]
#[command(
    name = "biascorrect",
    version,
    about = "Shading / bias-field correction for volumetric images"
)]
struct Cli {
    /// Worker threads for the solver (default: all cores, or
    /// BIASCORRECT_THREADS). Results are identical for any thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic phantom with ground truth and an injected bias.
    Phantom(PhantomArgs),
    /// Estimate and remove the bias field of a volume.
    Correct(CorrectArgs),
    /// Hard-segment a volume into air / tissue / bone.
    Segment(SegmentArgs),
    /// Score predicted labels against ground truth, or t-test two batches.
    Evaluate(EvaluateArgs),
    /// Dump a 1-D intensity line as CSV.
    Profile(ProfileArgs),
}

#[derive(Args)]
struct PhantomArgs {
    /// JSON file with {"phantom": PhantomSpec, "bias": BiasSpec}; defaults
    /// are used when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output directory for truth/labels/mask/observed/bias VBF sets.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the phantom noise seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct CorrectArgs {
    /// Input volume (VBF header path).
    #[arg(long)]
    input: PathBuf,
    /// Output directory for corrected/bias_raw/bias_smooth + convergence.csv.
    #[arg(long)]
    out: PathBuf,
    /// Solver parameter JSON; defaults otherwise.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Overrides the bias-init seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Smoothing sigma in voxels as "x,y,z".
    #[arg(long)]
    sigma: Option<String>,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    input: PathBuf,
    /// Output label volume (VBF header path).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Predicted labels (VBF).
    #[arg(long, required_unless_present = "ttest")]
    pred: Option<PathBuf>,
    /// Ground-truth labels (VBF).
    #[arg(long, required_unless_present = "ttest")]
    truth: Option<PathBuf>,
    /// Intensity volume for per-material uniformity statistics.
    #[arg(long)]
    volume: Option<PathBuf>,
    /// Foreground mask; confusion metrics restrict to it. Defaults to all
    /// voxels.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Report JSON output path.
    #[arg(long)]
    report: PathBuf,
    /// Also append a CSV row (with header when the file is new).
    #[arg(long)]
    csv: Option<PathBuf>,
    /// T-test mode: compare mean_error_percent columns of two batch CSVs.
    #[arg(long, requires = "group_a", requires = "group_b")]
    ttest: bool,
    #[arg(long)]
    group_a: Option<PathBuf>,
    #[arg(long)]
    group_b: Option<PathBuf>,
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long)]
    input: PathBuf,
    /// Line direction: x, y or z.
    #[arg(long)]
    axis: String,
    /// Fixed coordinates of the two remaining axes, in axis order, e.g.
    /// "32,16" for axis x meaning y=32, z=16. Defaults to the volume center.
    #[arg(long)]
    index: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

enum CliError {
    Io(String),
    Validation(String),
    Unconverged,
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Io(_) => EXIT_IO,
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Unconverged => EXIT_UNCONVERGED,
        }
    }
}

impl From<VolumeError> for CliError {
    fn from(e: VolumeError) -> Self {
        match e {
            // A missing, malformed or inconsistent file is unreadable input.
            VolumeError::Io { .. }
            | VolumeError::Header { .. }
            | VolumeError::Version(_)
            | VolumeError::Dtype { .. }
            | VolumeError::SizeMismatch { .. }
            | VolumeError::NonFinite(_)
            | VolumeError::BadLabel { .. } => CliError::Io(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<pipeline::PipelineError> for CliError {
    fn from(e: pipeline::PipelineError) -> Self {
        match e {
            pipeline::PipelineError::Volume(v) => v.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<PreprocessError> for CliError {
    fn from(e: PreprocessError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<ThresholdError> for CliError {
    fn from(e: ThresholdError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<phantom::PhantomError> for CliError {
    fn from(e: phantom::PhantomError) -> Self {
        CliError::Validation(e.to_string())
    }
}

fn io_err<E: std::fmt::Display>(path: &Path) -> impl FnOnce(E) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_threads(cli.threads);
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Io(msg) => eprintln!("error: {msg}"),
                CliError::Validation(msg) => eprintln!("error: {msg}"),
                CliError::Unconverged => {
                    eprintln!("error: solver hit the sweep cap before converging")
                }
            }
            ExitCode::from(e.code())
        }
    }
}

fn init_threads(flag: Option<usize>) {
    let n = flag.or_else(|| {
        std::env::var("BIASCORRECT_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = n {
        // Ignore failure: the global pool can only be set once per process.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
}

fn run(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Phantom(a) => cmd_phantom(a),
        Cmd::Correct(a) => cmd_correct(a),
        Cmd::Segment(a) => cmd_segment(a),
        Cmd::Evaluate(a) => cmd_evaluate(a),
        Cmd::Profile(a) => cmd_profile(a),
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct PhantomFile {
    phantom: PhantomSpec,
    #[serde(default)]
    bias: BiasSpec,
}

fn cmd_phantom(args: PhantomArgs) -> Result<(), CliError> {
    let mut file = match &args.spec {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            serde_json::from_str::<PhantomFile>(&text)
                .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?
        }
        None => PhantomFile {
            phantom: PhantomSpec::default(),
            bias: BiasSpec::default(),
        },
    };
    if let Some(seed) = args.seed {
        file.phantom.rng_seed = seed;
    }
    file.phantom.validate()?;
    file.bias.validate()?;

    fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;
    let (truth, labels, mask) = phantom::make_phantom(&file.phantom)?;
    let bias = phantom::make_bias(&file.bias, truth.dims(), &mask)?;
    let observed = phantom::corrupt(&truth, &bias)?;

    let out = |name: &str| args.out.join(format!("{name}.vbf.json"));
    write_volume(&truth, out("truth"))?;
    write_labels(&labels, out("labels"))?;
    write_mask(&mask, out("mask"))?;
    write_volume(&bias, out("bias"))?;
    write_volume(&observed, out("observed"))?;
    eprintln!(
        "phantom: dims {:?}, bias amplitude {}, seed {}",
        file.phantom.dims, file.bias.amplitude, file.phantom.rng_seed
    );
    Ok(())
}

fn load_params(args: &CorrectArgs) -> Result<FcmParams, CliError> {
    let mut params = match &args.params {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            serde_json::from_str::<FcmParams>(&text)
                .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?
        }
        None => FcmParams::default(),
    };
    if let Some(seed) = args.seed {
        params.rng_seed = seed;
    }
    if let Some(sigma) = &args.sigma {
        params.smooth_sigma = parse_triple(sigma)
            .ok_or_else(|| CliError::Validation(format!("bad --sigma value {sigma:?}")))?;
    }
    params
        .validate()
        .map_err(|e| CliError::Validation(e.to_string()))?;
    Ok(params)
}

fn parse_triple(s: &str) -> Option<[f64; 3]> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse().ok())
        .collect::<Option<_>>()?;
    if parts.len() != 3 || parts.iter().any(|v| *v < 0.0) {
        return None;
    }
    Some([parts[0], parts[1], parts[2]])
}

fn cmd_correct(args: CorrectArgs) -> Result<(), CliError> {
    let params = load_params(&args)?;
    let input = read_volume(&args.input)?;
    fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;

    let mut log = String::from("sweep,objective,delta_c\n");
    let out = pipeline::correct(&input, params, |ev| {
        eprintln!(
            "sweep {:3}  J {:.6e}  |dc| {:.3e}",
            ev.sweep, ev.objective, ev.delta_c
        );
        log.push_str(&format!("{},{},{}\n", ev.sweep, ev.objective, ev.delta_c));
    })?;

    let path = |name: &str| args.out.join(format!("{name}.vbf.json"));
    write_volume(&out.corrected, path("corrected"))?;
    write_volume(&out.bias_raw, path("bias_raw"))?;
    write_volume(&out.bias_smooth, path("bias_smooth"))?;
    let log_path = args.out.join("convergence.csv");
    fs::write(&log_path, log).map_err(io_err(&log_path))?;
    eprintln!(
        "correct: {} sweeps, {}",
        out.sweeps,
        if out.converged {
            "converged"
        } else {
            "hit sweep cap"
        }
    );
    if out.converged {
        Ok(())
    } else {
        Err(CliError::Unconverged)
    }
}

fn cmd_segment(args: SegmentArgs) -> Result<(), CliError> {
    let input = read_volume(&args.input)?;
    let labels = pipeline::segment(&input)?;
    write_labels(&labels, &args.out)?;
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    if args.ttest {
        return cmd_evaluate_ttest(args);
    }
    let pred = read_labels(args.pred.as_ref().expect("clap enforces"))?;
    let truth = read_labels(args.truth.as_ref().expect("clap enforces"))?;
    if pred.dims() != truth.dims() {
        return Err(CliError::Validation(format!(
            "label dims mismatch: {:?} vs {:?}",
            pred.dims(),
            truth.dims()
        )));
    }
    let mask = match &args.mask {
        Some(path) => {
            let m = read_mask(path)?;
            if m.dims() != pred.dims() {
                return Err(CliError::Validation("mask dims mismatch".into()));
            }
            m
        }
        None => Mask::full(pred.dims()),
    };
    let confusion =
        confusion_metrics(&pred, &truth, &mask).map_err(|e| CliError::Validation(e.to_string()))?;
    let uniformity = match &args.volume {
        Some(path) => {
            let v = read_volume(path)?;
            if v.dims() != pred.dims() {
                return Err(CliError::Validation("volume dims mismatch".into()));
            }
            Some(material_uniformity(&v, &truth))
        }
        None => None,
    };
    let report = EvalReport::new(&confusion, uniformity.as_ref(), bone_per_slice(&pred));

    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&args.report, json).map_err(io_err(&args.report))?;
    if let Some(csv) = &args.csv {
        let mut text = if csv.exists() {
            fs::read_to_string(csv).map_err(io_err(csv))?
        } else {
            format!("{}\n", EvalReport::csv_header())
        };
        text.push_str(&report.csv_row());
        text.push('\n');
        fs::write(csv, text).map_err(io_err(csv))?;
    }
    Ok(())
}

fn read_error_column(path: &Path) -> Result<Vec<f64>, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| CliError::Validation(format!("{}: empty CSV", path.display())))?;
    let col = header
        .split(',')
        .position(|c| c.trim() == "mean_error_percent")
        .ok_or_else(|| {
            CliError::Validation(format!("{}: no mean_error_percent column", path.display()))
        })?;
    let mut values = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let cell = line.split(',').nth(col).unwrap_or_default();
        let v: f64 = cell
            .trim()
            .parse()
            .map_err(|_| CliError::Validation(format!("{}: bad value {cell:?}", path.display())))?;
        values.push(v);
    }
    Ok(values)
}

fn cmd_evaluate_ttest(args: EvaluateArgs) -> Result<(), CliError> {
    let a = read_error_column(args.group_a.as_ref().expect("clap enforces"))?;
    let b = read_error_column(args.group_b.as_ref().expect("clap enforces"))?;
    let result = two_sample_ttest(&a, &b).map_err(|e| CliError::Validation(e.to_string()))?;
    let json = serde_json::to_string_pretty(&result).expect("result serializes");
    fs::write(&args.report, json).map_err(io_err(&args.report))?;
    eprintln!(
        "t = {:.4}, dof = {}, p = {:.4e}{}",
        result.t,
        result.dof,
        result.p,
        if result.significant_at_5pct {
            " (significant at 5%)"
        } else {
            ""
        }
    );
    Ok(())
}

fn cmd_profile(args: ProfileArgs) -> Result<(), CliError> {
    let v = read_volume(&args.input)?;
    let dims = v.dims();
    let axis = match args.axis.as_str() {
        "x" => 0usize,
        "y" => 1,
        "z" => 2,
        other => return Err(CliError::Validation(format!("bad axis {other:?}"))),
    };
    let extents = [dims.nx, dims.ny, dims.nz];
    let others: [usize; 2] = match axis {
        0 => [1, 2],
        1 => [0, 2],
        _ => [0, 1],
    };
    let fixed: [usize; 2] = match &args.index {
        Some(s) => {
            let parts: Vec<usize> = s
                .split(',')
                .map(|p| p.trim().parse().ok())
                .collect::<Option<_>>()
                .ok_or_else(|| CliError::Validation(format!("bad --index value {s:?}")))?;
            if parts.len() != 2 {
                return Err(CliError::Validation("--index needs two coordinates".into()));
            }
            [parts[0], parts[1]]
        }
        None => [extents[others[0]] / 2, extents[others[1]] / 2],
    };
    for (slot, &coord) in fixed.iter().enumerate() {
        if coord >= extents[others[slot]] {
            return Err(CliError::Validation(format!(
                "index {coord} out of range on axis {}",
                others[slot]
            )));
        }
    }

    let mut csv = String::from("position,value\n");
    for pos in 0..extents[axis] {
        let mut coord = [0usize; 3];
        coord[axis] = pos;
        coord[others[0]] = fixed[0];
        coord[others[1]] = fixed[1];
        let value = v.get(coord[0], coord[1], coord[2]);
        csv.push_str(&format!("{pos},{value}\n"));
    }
    fs::write(&args.out, csv).map_err(io_err(&args.out))?;
    Ok(())
}
