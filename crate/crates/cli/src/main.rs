//! `s4c`: command-line front end for the detection pipeline.
//!
//! Machine-readable JSON goes to stdout, logs to stderr. Exit codes: 0 ok,
//! 1 usage, 2 data error, 3 numerical failure.

mod commands;
mod overlay;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use s4c_core::{Error, Phase};

#[derive(Parser, Debug)]
#[command(name = "s4c", version, about = "Tumor detection in dual-phase 3D volumes by segmentation-for-classification")]
struct Cli {
    /// Worker threads (default: all cores; 1 gives bit-exact reruns).
    #[arg(long, global = true, env = "S4C_THREADS")]
    threads: Option<usize>,

    /// RunConfig JSON; flags given explicitly override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a phantom dataset and its manifest.
    Gen(GenArgs),
    /// Train the segmentation network for one phase.
    Train(TrainArgs),
    /// Sliding-window prediction of one case volume.
    Infer(InferArgs),
    /// Apply retention and the voxel-count rule to predicted masks.
    Classify(ClassifyArgs),
    /// Score predicted masks of a dataset against its ground truth.
    Eval(EvalArgs),
    /// k-fold cross-validation of the whole pipeline.
    Cv(CvArgs),
    /// Train the Pool3 classification head for one phase.
    TrainCls(TrainClsArgs),
    /// Classify one case with a trained head.
    InferCls(InferClsArgs),
    /// Segment, post-process and fuse both phases of one case.
    Run(RunArgs),
    /// Write color overlay slices as PPM images.
    Overlay(OverlayArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long, default_value = "phantoms")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Edge length of the cubic volumes.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 30)]
    pub easy_normal: usize,
    #[arg(long, default_value_t = 30)]
    pub easy_abnormal: usize,
    #[arg(long, default_value_t = 10)]
    pub hard_normal: usize,
    #[arg(long, default_value_t = 10)]
    pub hard_abnormal: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub phase: Phase,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the configured iteration count.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Overrides the configured training crop edge.
    #[arg(long)]
    pub train_patch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write the per-iteration loss log as JSON.
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Directory holding `{phase}.raw`.
    #[arg(long)]
    pub case_dir: PathBuf,
    #[arg(long)]
    pub phase: Phase,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub stride: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct PostArgs {
    /// 6 or 26.
    #[arg(long)]
    pub connectivity: Option<s4c_core::Connectivity>,
    #[arg(long)]
    pub tumor_thresh: Option<usize>,
    #[arg(long)]
    pub duct_thresh: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub mask: PathBuf,
    /// Mask of the other phase, fused by OR.
    #[arg(long)]
    pub mask2: Option<PathBuf>,
    #[arg(long, default_value = "arterial")]
    pub phase: Phase,
    #[arg(long, default_value = "venous")]
    pub phase2: Phase,
    #[command(flatten)]
    pub post: PostArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory with `{case_id}/{phase}_pred.raw` masks.
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "arterial,venous")]
    pub phases: Vec<Phase>,
    #[arg(long)]
    pub emit_table: bool,
    #[command(flatten)]
    pub post: PostArgs,
}

#[derive(Args, Debug)]
pub struct CvArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub mode: Option<s4c_core::CvMode>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub train_patch: Option<usize>,
    /// Print the detection tables to stderr.
    #[arg(long)]
    pub emit_table: bool,
}

#[derive(Args, Debug)]
pub struct TrainClsArgs {
    #[arg(long)]
    pub segmodel: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub phase: Phase,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub iters: Option<usize>,
}

#[derive(Args, Debug)]
pub struct InferClsArgs {
    #[arg(long)]
    pub segmodel: PathBuf,
    #[arg(long)]
    pub clsmodel: PathBuf,
    #[arg(long)]
    pub case_dir: PathBuf,
    #[arg(long)]
    pub phase: Phase,
    /// Predicted mask for the ROI; segmented on the fly when absent.
    #[arg(long)]
    pub mask: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[arg(long)]
    pub case_dir: PathBuf,
    #[arg(long)]
    pub arterial_model: Option<PathBuf>,
    #[arg(long)]
    pub venous_model: Option<PathBuf>,
    #[arg(long)]
    pub stride: Option<usize>,
    /// Also save each predicted mask as `{phase}_pred.raw` here.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[command(flatten)]
    pub post: PostArgs,
}

#[derive(Args, Debug)]
pub struct OverlayArgs {
    #[arg(long)]
    pub case_dir: PathBuf,
    #[arg(long)]
    pub phase: Phase,
    /// Mask to draw; defaults to the case's `{phase}_mask.raw`.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Write every n-th axial slice.
    #[arg(long, default_value_t = 1)]
    pub every: usize,
}

/// Maps an error chain to the documented exit code.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Numerical(_) => 3,
                Error::InvalidArgument(_) => 1,
                _ => 2,
            };
        }
        if cause.downcast_ref::<commands::UsageError>().is_some() {
            return 1;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() || cause.downcast_ref::<serde_json::Error>().is_some() {
            return 2;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("could not configure thread pool: {e}");
        }
    }
    match commands::dispatch(cli.cmd, cli.config.as_deref()) {
        Ok(value) => {
            println!("{}", serde_json::to_string_pretty(&value).expect("JSON values serialize"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
