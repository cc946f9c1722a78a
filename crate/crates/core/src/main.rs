use clap::{Args, Parser, Subcommand};
use facedet::checkpoint;
use facedet::config::Config;
use facedet::dataset::{annotations_by_image, read_annotations, read_detections, write_detections};
use facedet::detect::{collect_inputs, detect_files};
use facedet::eval::{curve_to_csv, match_detections, pr_curve};
use facedet::gradsuite;
use facedet::model::Model;
use facedet::synth;
use facedet::train;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "facedet",
    about = "Multi-scale context-aware face detector: synthetic data, training, inference, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Configuration file (key = value lines); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Repeated key=value config overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> facedet::Result<Config> {
        let mut cfg = match &self.config {
            Some(path) => Config::load(path)?,
            None => Config::default(),
        };
        for pair in &self.set {
            let (key, value) = pair.split_once('=').ok_or_else(|| {
                facedet::Error::Config(format!("--set expects key=value, got '{pair}'"))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generates a synthetic train/val dataset.
    GenData {
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Trains a detector on a generated split directory.
    Train {
        /// Split directory containing images plus faces.txt.
        data: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Runs detection on an image or a directory of images.
    Detect {
        /// Trained checkpoint.
        checkpoint: PathBuf,
        /// A .pgm file or a directory of them.
        input: PathBuf,
        /// Detection file output path.
        #[arg(long)]
        out: PathBuf,
        /// Worker threads; results are identical for any value.
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Scores a detection file against annotations and reports AP.
    Eval {
        /// Detection file.
        detections: PathBuf,
        /// Face annotation file.
        annotations: PathBuf,
        /// PR-curve CSV output path; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Runs the finite-difference gradient suite; fails on any violation.
    GradCheck,
    /// Prints the resolved configuration in canonical form.
    DumpConfig {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn run() -> facedet::Result<bool> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData { out, cfg } => {
            let cfg = cfg.resolve()?;
            let summary = synth::generate(&cfg, &out)?;
            println!(
                "wrote {} train images ({} faces) and {} val images ({} faces) under {}",
                summary.train_images,
                summary.train_faces,
                summary.val_images,
                summary.val_faces,
                out.display()
            );
            Ok(true)
        }
        Command::Train { data, out, cfg } => {
            let cfg = cfg.resolve()?;
            println!("iter,loss_rpn_cls,loss_rpn_reg,loss_det_cls,loss_det_reg");
            train::train(&cfg, &data, &out, |log| println!("{}", log.csv_line()))?;
            println!("# checkpoint written to {}", out.display());
            Ok(true)
        }
        Command::Detect {
            checkpoint: ckpt_path,
            input,
            out,
            threads,
            cfg,
        } => {
            let cfg = cfg.resolve()?;
            let mut model = Model::new(&cfg, None)?;
            checkpoint::load(&mut model, &cfg, &ckpt_path)?;
            let files = collect_inputs(&input)?;
            let (detections, warnings) = detect_files(&model, &files, threads);
            write_detections(&out, &detections)?;
            for w in &warnings {
                eprintln!("warning: {w}");
            }
            println!("{} detections over {} images", detections.len(), files.len());
            Ok(warnings.is_empty())
        }
        Command::Eval {
            detections,
            annotations,
            out,
        } => {
            let dets = read_detections(&detections)?;
            let anns = read_annotations(&annotations)?;
            let gts = annotations_by_image(&anns);
            let flags = match_detections(&dets, &gts, 0.5);
            let ranked: Vec<bool> = flags.iter().map(|&(_, tp)| tp).collect();
            let scores: Vec<f32> = flags.iter().map(|&(i, _)| dets[i].score).collect();
            let curve = pr_curve(&ranked, &scores, anns.len());
            let csv = curve_to_csv(&curve);
            match out {
                Some(path) => std::fs::write(&path, &csv)
                    .map_err(|e| facedet::Error::io(format!("writing {}", path.display()), e))?,
                None => print!("{csv}"),
            }
            println!("AP={:.6}", curve.ap);
            Ok(true)
        }
        Command::GradCheck => {
            let reports = gradsuite::run_suite();
            let mut ok = true;
            for r in &reports {
                println!(
                    "{:45} {:.3e} (tolerance {:.0e})  {}",
                    r.name,
                    r.error,
                    r.tolerance,
                    if r.passed() { "PASS" } else { "FAIL" }
                );
                ok &= r.passed();
            }
            println!(
                "{}/{} gradient checks passed",
                reports.iter().filter(|r| r.passed()).count(),
                reports.len()
            );
            Ok(ok)
        }
        Command::DumpConfig { cfg } => {
            let cfg = cfg.resolve()?;
            print!("{}", cfg.dump());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
