use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use biplanar_ct::dataset::{generate_dataset, load_dataset};
use biplanar_ct::drr::{read_pair, synthesize_biplanar, write_pair};
use biplanar_ct::infer::{as_ct_container, evaluate_oracle, export_slices, parse_planes, Reconstructor};
use biplanar_ct::volume::{read_volume, write_volume, PhantomSpec, Preprocess};
use biplanar_ct::{checks, train, Error, Result};

#[derive(Parser)]
#[command(name = "biplanar-ct", version, about = "CT volume reconstruction from biplanar radiographs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate seeded phantoms with their radiograph pairs.
    Phantom {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2.0)]
        spacing: f32,
    },
    /// Preprocess a `.ctv` volume and write its frontal/lateral pair.
    Drr {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Cube edge after cropping; defaults to the largest resampled extent.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long, default_value_t = 2.0)]
        spacing: f32,
    },
    /// Train from a `key = value` config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a directory of paired samples.
    Eval {
        #[arg(long, required_unless_present = "oracle")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Compare each ground truth with itself instead of running a model.
        #[arg(long, conflicts_with = "ckpt")]
        oracle: bool,
        /// Cube edge for --oracle; defaults to the extent stored in the first `.bxr`.
        #[arg(long, requires = "oracle")]
        size: Option<usize>,
    },
    /// Reconstruct a volume from a `.bxr` pair.
    Reconstruct {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        xrays: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify backward rules against central differences.
    Gradcheck {
        #[arg(long)]
        op: Option<String>,
    },
    /// Write mid-slices of a volume as 8-bit PGM images.
    ExportSlices {
        #[arg(long)]
        vol: PathBuf,
        /// axial, coronal, sagittal or mid3
        #[arg(long)]
        plane: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "volume".into())
}

fn stored_extent(dir: &Path) -> Result<usize> {
    let mut pairs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(format!("listing {}", dir.display()), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "bxr"))
        .collect();
    pairs.sort();
    let first = pairs
        .first()
        .ok_or_else(|| Error::Dataset(format!("no .bxr files in {}", dir.display())))?;
    Ok(read_pair(first)?.dims.into_iter().max().unwrap_or(0))
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Phantom { count, size, seed, out, spacing } => {
            let spec = PhantomSpec { size, spacing_mm: spacing, ..Default::default() };
            let pre = Preprocess { size, spacing_mm: spacing, ..Default::default() };
            let ids = generate_dataset(&out, count, seed, &spec, &pre)?;
            println!("wrote {} samples to {}", ids.len(), out.display());
        }
        Command::Drr { input, out, size, spacing } => {
            let vol = read_volume(&input)?;
            let size = match size {
                Some(s) => s,
                None => {
                    let resampled = biplanar_ct::volume::resample_isotropic(&vol, spacing)?;
                    resampled.dims.into_iter().max().unwrap_or(0)
                }
            };
            let pre = Preprocess { size, spacing_mm: spacing, ..Default::default() };
            write_pair(&synthesize_biplanar(&pre.apply(&vol)?), &out)?;
            println!("wrote {}", out.display());
        }
        Command::Train { config, resume } => {
            let cfg = train::TrainConfig::load(&config)?;
            let t = Instant::now();
            let outcome = train::fit(&cfg, resume.as_deref())?;
            if let Some(r) = outcome.losses.last() {
                println!("final step {}: {}", r.step, r.csv_row());
            }
            println!(
                "trained {} epochs in {:.1?}; log {}; checkpoint {}",
                outcome.trainer.epoch(),
                t.elapsed(),
                outcome.loss_log.display(),
                outcome.last_checkpoint.display()
            );
        }
        Command::Eval { ckpt, data, report, oracle, size } => {
            let rep = if oracle {
                let size = match size {
                    Some(s) => s,
                    None => stored_extent(&data)?,
                };
                evaluate_oracle(&load_dataset(&data, &Preprocess { size, ..Default::default() })?)?
            } else {
                let ckpt = ckpt.ok_or_else(|| Error::InvalidArgument("--ckpt is required".into()))?;
                let model = Reconstructor::load(&ckpt)?;
                model.evaluate(&load_dataset(&data, &model.config.preprocess())?)?
            };
            rep.write_csv(&report)?;
            if let Some(m) = rep.mean() {
                println!(
                    "{} samples: mae={:.5} mse={:.6} cosine={:.5} psnr_db={:.3} ssim={:.5}",
                    rep.samples.len(),
                    m[0],
                    m[1],
                    m[2],
                    m[3],
                    m[4]
                );
            }
            println!("wrote {}", report.display());
        }
        Command::Reconstruct { ckpt, xrays, out } => {
            let model = Reconstructor::load(&ckpt)?;
            let vol = model.reconstruct(&read_pair(&xrays)?)?;
            write_volume(&as_ct_container(&vol)?, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Gradcheck { op } => {
            let names: Vec<&str> = match &op {
                Some(name) => vec![name.as_str()],
                None => checks::REGISTERED.to_vec(),
            };
            let mut failed = Vec::new();
            let t = Instant::now();
            for name in names {
                let rep = checks::run(name)?;
                let status = if rep.passed { "pass" } else { "fail" };
                println!("gradcheck op={name} max_rel_err={:.3e} status={status}", rep.max_rel_err);
                if !rep.passed {
                    failed.push(name.to_string());
                }
            }
            println!("elapsed {:.1?}", t.elapsed());
            if !failed.is_empty() {
                return Err(Error::InvalidArgument(format!("gradient check failed for {}", failed.join(","))));
            }
        }
        Command::ExportSlices { vol, plane, out } => {
            let planes = parse_planes(&plane)?;
            let v = read_volume(&vol)?;
            for p in export_slices(&v, &planes, &out, &file_stem(&vol))? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: code={} msg={msg}", e.code());
            ExitCode::FAILURE
        }
    }
}
