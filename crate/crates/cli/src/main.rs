use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hierasurg::denoiser::LabelProvider;
use hierasurg::pipeline::{
    cmd_evaluate, cmd_generate, cmd_generate_split, cmd_label, cmd_make_data, cmd_train, ConfigOverrides,
    EvaluateOptions, GenerateMode, LabelOptions, RunConfig, Stage, SEED_ENV,
};
use hierasurg::seg_pipeline::LabelConfig;
use hierasurg::Error;

#[derive(Parser)]
#[command(name = "hierasurg", version, about = "Segmentation-conditioned surgical video diffusion at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a train/test split.
    MakeData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Replace a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Run the panoptic labeling pipeline with oracle backends and score it.
    Label {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Relative feature noise of the oracle feature extractor.
        #[arg(long, default_value_t = 0.0)]
        feature_noise: f64,
        /// Probability of dropping each mask boundary pixel.
        #[arg(long, default_value_t = 0.0)]
        boundary_noise: f64,
        /// Clip length in frames (0 = 16 seconds).
        #[arg(long, default_value_t = 0)]
        clip_len: usize,
        /// Fraction shared by consecutive clips.
        #[arg(long, default_value_t = 0.5)]
        overlap: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one stage; resumes when the checkpoint already exists.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint path; the loss log is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate videos from trained checkpoints.
    Generate {
        #[arg(long)]
        s2m: Option<PathBuf>,
        #[arg(long)]
        m2v: PathBuf,
        /// A single sample directory to condition on.
        #[arg(long, conflicts_with = "dataset", required_unless_present = "dataset")]
        sample: Option<PathBuf>,
        /// Generate every sample of a dataset split instead.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        /// full, m2v_only or unconditioned.
        #[arg(long, default_value = "full")]
        mode: String,
        #[arg(long, default_value_t = 0, env = SEED_ENV)]
        seed: u64,
        /// Sample every N-th timestep (defaults to the checkpoint config).
        #[arg(long)]
        stride: Option<usize>,
    },
    /// Compare generated samples with real ones and write a JSON report.
    Evaluate {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Evaluate only the ids present in the generated directory.
        #[arg(long)]
        allow_subset: bool,
    },
}

/// Flags shared by commands that read a run config.
#[derive(Args)]
struct ConfigArgs {
    /// JSON run config; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    stage: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    fps: Option<u32>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    num_blocks: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    /// Train s2m without phase/triplet conditioning.
    #[arg(long)]
    no_labels: bool,
    /// label_embedding or pretrained_table.
    #[arg(long)]
    provider: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let provider = match self.provider.as_deref() {
            None => None,
            Some("label_embedding") => Some(LabelProvider::LabelEmbedding),
            Some("pretrained_table") => Some(LabelProvider::PretrainedTable),
            Some(other) => return Err(Error::Parameter(format!("unknown provider {other:?}"))),
        };
        let overrides = ConfigOverrides {
            stage: self.stage.as_deref().map(str::parse::<Stage>).transpose()?,
            seed: self.seed,
            steps: self.steps,
            lr: self.lr,
            batch_size: self.batch_size,
            dataset_dir: self.dataset.clone(),
            count: self.count,
            fps: self.fps,
            embed_dim: self.embed_dim,
            num_blocks: self.num_blocks,
            sample_stride: self.stride,
            use_labels: self.no_labels.then_some(false),
            provider,
        };
        let env = std::env::var(SEED_ENV).ok();
        RunConfig::resolve(self.config.as_deref(), env.as_deref(), &overrides)
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::MakeData { config, out, force } => {
            let cfg = config.resolve()?;
            let m = cmd_make_data(&cfg, &out, cfg.data.count, force)?;
            println!("wrote {} samples to {}", m.count, out.display());
        }
        Command::Label {
            dataset,
            out,
            feature_noise,
            boundary_noise,
            clip_len,
            overlap,
            seed,
        } => {
            let opts = LabelOptions {
                feature_noise,
                boundary_noise,
                clip_len,
                overlap,
                seed,
                config: LabelConfig::default(),
            };
            let s = cmd_label(&dataset, &out, &opts)?;
            println!(
                "labeled {} samples: mean IoU {:.4}, identity switches {}",
                s.samples.len(),
                s.mean_iou,
                s.identity_switches
            );
        }
        Command::Train { config, out } => {
            let cfg = config.resolve()?;
            let r = cmd_train(&cfg, &out)?;
            let last = r.losses.last().map_or(f64::NAN, |l| l.1);
            println!(
                "{} trained steps {}..{} (last loss {last:.5}); log at {}",
                r.stage.name(),
                r.start_step,
                r.end_step,
                r.loss_log.display()
            );
        }
        Command::Generate {
            s2m,
            m2v,
            sample,
            dataset,
            split,
            out,
            mode,
            seed,
            stride,
        } => {
            let mode: GenerateMode = mode.parse()?;
            if let Some(dataset) = dataset {
                let p = cmd_generate_split(s2m.as_deref(), &m2v, &dataset, &split, &out, mode, stride, seed)?;
                println!("generated {} samples into {}", p.len(), out.display());
            } else {
                let sample = sample.expect("clap requires --sample or --dataset");
                cmd_generate(s2m.as_deref(), &m2v, &sample, &out, mode, stride, seed)?;
                println!("generated {}", out.display());
            }
        }
        Command::Evaluate {
            real,
            generated,
            report,
            allow_subset,
        } => {
            let r = cmd_evaluate(&real, &generated, &report, EvaluateOptions { allow_subset })?;
            println!("{}", serde_json::to_string(&r).expect("report serializes"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Refusal(_) | Error::Usage(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
