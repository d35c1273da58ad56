use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use epicorr::pipeline::commands::{
    bench_cmd, correct_cmd, evaluate_cmd, exit_code, simulate, sweep_cmd, train_cmd,
};
use epicorr::pipeline::config::JobConfig;
use epicorr::Result;

/// EPI distortion correction by registration to a T1-weighted reference.
#[derive(Parser, Debug)]
#[command(name = "epicorr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Key-value job file.
    #[arg(long, short = 'c', global = true)]
    config: Option<PathBuf>,
    /// Override one key; repeatable, applied after the job file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, short = 'o', global = true)]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write seeded phantoms with field maps and distorted EPI.
    Simulate {
        #[arg(long)]
        phantoms: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        /// Extents such as 64x64x32.
        #[arg(long)]
        size: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the displacement network on a directory of subjects.
    Train {
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// supervised, semi or self.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        dims: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Train one self-supervised model per smoothness weight.
    Sweep {
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Comma-separated weights.
        #[arg(long)]
        lambdas: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Correct an EPI series with trained weights or a static field map.
    Correct {
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        epi: Option<PathBuf>,
        #[arg(long)]
        t1w: Option<PathBuf>,
        /// Field map in Hz; corrects every frame with its voxel shift.
        #[arg(long)]
        static_vdm: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Slice-wise NMI/SSIM/PSNR with group statistics.
    Evaluate {
        /// label=path; repeatable.
        #[arg(long = "method", value_name = "LABEL=PATH")]
        methods: Vec<String>,
        #[arg(long)]
        t1w: Option<PathBuf>,
        /// label=path of the SSIM/PSNR reference.
        #[arg(long)]
        baseline: Option<String>,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Time per-frame map estimation and correction.
    Bench {
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        epi: Option<PathBuf>,
        #[arg(long)]
        t1w: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn flag<T: ToString>(out: &mut Vec<String>, key: &str, v: &Option<T>) {
    if let Some(v) = v {
        out.push(format!("{key}={}", v.to_string()));
    }
}

fn path_flag(out: &mut Vec<String>, key: &str, v: &Option<PathBuf>) {
    flag(out, key, &v.as_ref().map(|p| p.display().to_string()));
}

fn resolve(common: &Common, flags: Vec<String>) -> Result<JobConfig> {
    let mut overrides = common.set.clone();
    path_flag(&mut overrides, "output_dir", &common.output_dir);
    flag(&mut overrides, "seed", &common.seed);
    overrides.extend(flags);
    JobConfig::resolve(common.config.as_deref(), &overrides)
}

fn run(cli: Cli) -> Result<()> {
    let mut f = Vec::new();
    match cli.command {
        Command::Simulate {
            phantoms,
            frames,
            size,
            common,
        } => {
            flag(&mut f, "phantoms", &phantoms);
            flag(&mut f, "frames", &frames);
            flag(&mut f, "size", &size);
            let cfg = resolve(&common, f)?;
            for d in simulate(&cfg)? {
                println!("{}", d.display());
            }
        }
        Command::Train {
            data_dir,
            mode,
            dims,
            epochs,
            lambda,
            learning_rate,
            common,
        } => {
            path_flag(&mut f, "data_dir", &data_dir);
            flag(&mut f, "mode", &mode);
            flag(&mut f, "dims", &dims);
            flag(&mut f, "epochs", &epochs);
            flag(&mut f, "lambda", &lambda);
            flag(&mut f, "learning_rate", &learning_rate);
            let cfg = resolve(&common, f)?;
            let (_, history) = train_cmd(&cfg)?;
            if let Some(last) = history.epochs.last() {
                println!("epoch {} loss {:.6}", last.epoch, last.total);
            }
        }
        Command::Sweep {
            data_dir,
            lambdas,
            epochs,
            common,
        } => {
            path_flag(&mut f, "data_dir", &data_dir);
            flag(&mut f, "lambdas", &lambdas);
            flag(&mut f, "sweep_epochs", &epochs);
            let cfg = resolve(&common, f)?;
            print!("{}", sweep_cmd(&cfg)?.to_tsv());
        }
        Command::Correct {
            weights,
            epi,
            t1w,
            static_vdm,
            common,
        } => {
            path_flag(&mut f, "weights", &weights);
            path_flag(&mut f, "epi", &epi);
            path_flag(&mut f, "t1w", &t1w);
            path_flag(&mut f, "static_vdm", &static_vdm);
            let cfg = resolve(&common, f)?;
            let out = correct_cmd(&cfg)?;
            println!("corrected {} frames with {} displacement maps", out.frames, out.maps);
        }
        Command::Evaluate {
            methods,
            t1w,
            baseline,
            mask,
            common,
        } => {
            if !methods.is_empty() {
                f.push(format!("methods={}", methods.join(",")));
            }
            path_flag(&mut f, "t1w", &t1w);
            flag(&mut f, "baseline", &baseline);
            path_flag(&mut f, "mask", &mask);
            let cfg = resolve(&common, f)?;
            print!("{}", evaluate_cmd(&cfg)?.render());
        }
        Command::Bench {
            frames,
            weights,
            epi,
            t1w,
            common,
        } => {
            flag(&mut f, "frames", &frames);
            path_flag(&mut f, "weights", &weights);
            path_flag(&mut f, "epi", &epi);
            path_flag(&mut f, "t1w", &t1w);
            let cfg = resolve(&common, f)?;
            print!("{}", bench_cmd(&cfg)?.render());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
