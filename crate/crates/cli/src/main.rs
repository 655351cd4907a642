//! `livo`: simulate sequences, run the odometry, score trajectories and
//! convert maps.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use livo_core::error::ErrorCategory;
use livo_core::eval::{
    endpoint_drift_against, parse_lengths, path_length, relative_pose_errors, RpeOptions, Trajectory,
    DEFAULT_MAX_DT,
};
use livo_core::pipeline::{self, ExportFormat, PipelineConfig, SimulateSpec};
use livo_core::Error;

const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "livo", version, about = "LiDAR-inertial-visual odometry on simulated sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a sequence directory from a spec file.
    Simulate { spec: PathBuf },
    /// Run the odometry pipeline described by a config file.
    Run { config: PathBuf },
    /// Relative pose errors and endpoint drift of an estimate.
    Eval {
        est: PathBuf,
        gt: PathBuf,
        /// Comma-separated sub-sequence lengths, meters.
        #[arg(long, default_value = "50,100,150,200,250,300")]
        lengths: String,
        /// Association window between estimate and ground truth, seconds.
        #[arg(long, default_value_t = DEFAULT_MAX_DT)]
        max_dt: f64,
        /// Print CSV instead of a table.
        #[arg(long)]
        csv: bool,
    },
    /// Write the colored map of a run directory in another format.
    Export {
        run_dir: PathBuf,
        #[arg(long, value_enum)]
        format: Format,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Ply,
    Pcd,
}

fn exit_code(err: &Error) -> u8 {
    match err.category() {
        ErrorCategory::Io => 3,
        ErrorCategory::Config => 4,
        ErrorCategory::Data => 5,
        ErrorCategory::Numeric => 6,
    }
}

fn execute(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Simulate { spec } => {
            let spec = SimulateSpec::load(&spec)?;
            let seq = pipeline::simulate(&spec)?;
            println!(
                "wrote {} ({} IMU samples, {} scans, {} frames)",
                spec.output.display(),
                seq.imu.len(),
                seq.scans.len(),
                seq.frames.times.len()
            );
        }
        Command::Run { config } => {
            let cfg = PipelineConfig::load(&config)?;
            let rep = pipeline::run(&cfg)?;
            println!(
                "wrote {} ({} poses, {} map points)",
                cfg.output.display(),
                rep.trajectory.len(),
                rep.map.len()
            );
        }
        Command::Eval {
            est,
            gt,
            lengths,
            max_dt,
            csv,
        } => {
            let lengths = parse_lengths(&lengths)?;
            let est = Trajectory::read_csv(&est)?;
            let gt = Trajectory::read_csv(&gt)?;
            let opts = RpeOptions {
                max_dt,
                ..RpeOptions::default()
            };
            let rpe = relative_pose_errors(&est, &gt, &lengths, &opts);
            let drift = endpoint_drift_against(&est, &gt, max_dt)?;
            if csv {
                print!("{}", rpe.to_csv());
            } else {
                print!("{}", rpe.to_table());
                print!("{}", drift.to_table(Some(path_length(&gt)).filter(|l| *l > 0.0)));
            }
            if rpe.unmatched > 0 {
                log::warn!("{} estimates had no ground truth within {max_dt} s", rpe.unmatched);
            }
        }
        Command::Export {
            run_dir,
            format,
            output,
        } => {
            let format = match format {
                Format::Ply => ExportFormat::Ply,
                Format::Pcd => ExportFormat::Pcd,
            };
            let out = pipeline::export(&run_dir, format, output.as_deref())?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
