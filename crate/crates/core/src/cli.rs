//! Command-line interface.
//!
//! Every command prints a `RESULT key=value ...` line on success. Exit
//! codes: 0 success, 1 usage or configuration error, 2 data or format
//! error, 3 numerical failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::io::{list_images, read_all, read_image, write_image, dataset_paths, MANIFEST};
use crate::data::synth::dataset_min;
use crate::data::{generate_phantom, synth_noise, Image2D, NoiseKind, PhantomSpec};
use crate::diagnostics;
use crate::error::{Error, Result};
use crate::inference::{predict, predict_dihedral};
use crate::metrics::{self, ModelVariant};
use crate::networks::checkpoint;
use crate::trainer::{train_with_progress, TrainConfig, TrainOutputs};

#[derive(Debug, Parser)]
#[command(name = "bldn", version, about = "Self-supervised blind denoising with a learned noise model")]
pub struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (1 forces fully sequential execution).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NoiseModelArg {
    Gaussian,
    PoissonGaussian,
    Speckle,
    ShiftedExponential,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train both networks on a directory of noisy images.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the per-epoch loss log here.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Denoise one image or every image in a directory.
    Denoise {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Single pass instead of the symmetry-averaged prediction.
        #[arg(long)]
        no_ensemble: bool,
    },
    /// PSNR and SSIM of predictions against ground truth, matched by name.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Binned noise statistics, optionally compared with trained models.
    NoiseReport {
        #[arg(long)]
        noisy: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Checkpoint to compare against; repeat for several variants.
        #[arg(long)]
        ckpt: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        bins: usize,
    },
    /// Add synthetic noise to a directory of clean images.
    Synth {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_enum)]
        model: NoiseModelArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        eta: Option<f64>,
        /// Noise scale at the dataset minimum (shifted exponential).
        #[arg(long)]
        base: Option<f64>,
        /// Growth of the noise scale with the signal (shifted exponential).
        #[arg(long)]
        slope: Option<f64>,
    },
    /// Generate blob phantoms as clean ground truth.
    Phantom {
        #[arg(long)]
        count: usize,
        /// Image size as `HxW`.
        #[arg(long)]
        size: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = PhantomSpec::default().blob_count)]
        blobs: usize,
    },
    /// Best Gaussian-blur baseline over a sigma grid.
    Baseline {
        #[arg(long)]
        noisy: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Gradient, masking and centering self-checks.
    Selftest,
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Shape(_) | Error::Config(_) => 1,
        Error::Format { .. } | Error::Decode(_) | Error::Data(_) | Error::Io { .. } => 2,
        Error::Numerical(_) | Error::NonFiniteGradient(_) => 3,
    }
}

/// Parses `argv`, runs the command and returns the exit code. Normal output
/// goes to `out`, errors to `err`.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                0
            } else {
                let _ = write!(err, "{e}");
                1
            };
        }
    };
    // the pool may run the command on another thread, so buffer its output
    let mut buf = Vec::new();
    let result = match cli.threads {
        Some(0) => Err(Error::Config("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("cannot start thread pool: {e}")))
            .and_then(|pool| pool.install(|| execute(&cli, &mut buf))),
        None => execute(&cli, &mut buf),
    };
    let _ = out.write_all(&buf);
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn emit(out: &mut dyn Write, fields: &[(&str, String)]) -> Result<()> {
    let line: Vec<String> = fields.iter().map(|(k, v)| format!("{k}={v}")).collect();
    writeln!(out, "RESULT {}", line.join(" ")).map_err(|e| Error::io("<stdout>", e))
}

fn fmt_db(v: f64) -> String {
    if v == f64::INFINITY {
        "+inf".into()
    } else {
        format!("{v:.4}")
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn file_name(p: &Path) -> Result<String> {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .ok_or_else(|| Error::Data(format!("no file name in {}", p.display())))
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Images of `a` paired with the image of the same stem in `b`.
fn paired(a: &Path, b: &Path) -> Result<(Vec<PathBuf>, Vec<Image2D>, Vec<Image2D>)> {
    let left = list_images(a)?;
    if left.is_empty() {
        return Err(Error::Data(format!("no images in {}", a.display())));
    }
    let right: BTreeMap<String, PathBuf> = list_images(b)?.into_iter().map(|p| (stem(&p), p)).collect();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for p in &left {
        let q = right
            .get(&stem(p))
            .ok_or_else(|| Error::Data(format!("no counterpart for {} in {}", file_name(p).unwrap_or_default(), b.display())))?;
        let (x, y) = (read_image(p)?, read_image(q)?);
        x.same_shape(&y)
            .map_err(|_| Error::Data(format!("shape mismatch between {} and {}", p.display(), q.display())))?;
        xs.push(x);
        ys.push(y);
    }
    Ok((left, xs, ys))
}

fn execute(cli: &Cli, out: &mut Vec<u8>) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Train { config, data, out: ckpt, log } => {
            let mut cfg = TrainConfig::load(config)?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let paths = dataset_paths(data)?;
            if paths.is_empty() {
                return Err(Error::Data(format!("no training images in {}", data.display())));
            }
            let images = read_all(&paths)?;
            let outputs = TrainOutputs {
                checkpoint: Some(ckpt.clone()),
                log: log.clone(),
            };
            let mut last = f64::NAN;
            let bundle = train_with_progress(&cfg, &images, &outputs, |s| last = s.mean_loss)?;
            emit(
                out,
                &[
                    ("epochs", cfg.epochs.to_string()),
                    ("images", images.len().to_string()),
                    ("final_loss", format!("{last:.6}")),
                    ("receptive_field", bundle.receptive_field().to_string()),
                    ("checkpoint", ckpt.display().to_string()),
                ],
            )
        }
        Command::Denoise {
            ckpt,
            input,
            out: dest,
            no_ensemble,
        } => {
            let bundle = checkpoint::load(ckpt)?;
            let run_one = |img: &Image2D| -> Result<Image2D> {
                if *no_ensemble {
                    Ok(predict(&bundle, img)?.denoised)
                } else {
                    predict_dihedral(&bundle, img)
                }
            };
            let count = if input.is_dir() {
                create_dir(dest)?;
                let paths = list_images(input)?;
                for p in &paths {
                    write_image(&dest.join(file_name(p)?), &run_one(&read_image(p)?)?)?;
                }
                paths.len()
            } else {
                write_image(dest, &run_one(&read_image(input)?)?)?;
                1
            };
            emit(
                out,
                &[
                    ("images", count.to_string()),
                    ("ensemble", (!no_ensemble).to_string()),
                    ("out", dest.display().to_string()),
                ],
            )
        }
        Command::Eval { pred, gt } => {
            let (names, preds, gts) = paired(pred, gt)?;
            let w = |e| Error::io("<stdout>", e);
            writeln!(out, "image\tpsnr\tssim").map_err(w)?;
            let (mut sp, mut ss) = (0.0, 0.0);
            for ((n, p), g) in names.iter().zip(&preds).zip(&gts) {
                let (ps, s) = (metrics::psnr(p, g)?, metrics::ssim(p, g)?);
                writeln!(out, "{}\t{}\t{s:.6}", file_name(n)?, fmt_db(ps)).map_err(w)?;
                sp += ps;
                ss += s;
            }
            let n = names.len() as f64;
            writeln!(out, "mean\t{}\t{:.6}", fmt_db(sp / n), ss / n).map_err(w)?;
            emit(
                out,
                &[
                    ("images", names.len().to_string()),
                    ("mean_psnr", fmt_db(sp / n)),
                    ("mean_ssim", format!("{:.6}", ss / n)),
                ],
            )
        }
        Command::NoiseReport {
            noisy,
            gt,
            ckpt,
            out: dest,
            bins,
        } => {
            let (_, ns, gs) = paired(noisy, gt)?;
            let bundles = ckpt.iter().map(|p| checkpoint::load(p)).collect::<Result<Vec<_>>>()?;
            let variants: Vec<ModelVariant> = ckpt
                .iter()
                .zip(&bundles)
                .enumerate()
                .map(|(i, (p, b))| {
                    let name = stem(p);
                    let name = if ckpt[..i].iter().any(|q| stem(q) == name) {
                        format!("{name}_{i}")
                    } else {
                        name
                    };
                    ModelVariant::bundle(name, b)
                })
                .collect();
            let report = metrics::noise_report(&ns, &gs, &variants, *bins)?;
            fs::write(dest, report.to_tsv()).map_err(|e| Error::io(dest, e))?;
            let mut fields = vec![
                ("bins", report.bins.len().to_string()),
                ("confident", report.confident_bins().count().to_string()),
                ("included", report.included.to_string()),
                ("cutoff", format!("{:.4}", report.cutoff)),
            ];
            let kl: Vec<String> = (0..variants.len())
                .map(|i| format!("{}:{:.6}", report.variants[i], report.median_kl(i).unwrap_or(f64::NAN)))
                .collect();
            if !kl.is_empty() {
                fields.push(("median_kl", kl.join(",")));
            }
            fields.push(("out", dest.display().to_string()));
            emit(out, &fields)
        }
        Command::Synth {
            gt,
            model,
            out: dest,
            sigma,
            alpha,
            eta,
            base,
            slope,
        } => {
            let need = |v: &Option<f64>, name: &str| {
                v.ok_or_else(|| Error::Config(format!("--{name} is required for this noise model")))
            };
            let kind = match model {
                NoiseModelArg::Gaussian => NoiseKind::Gaussian { sigma: need(sigma, "sigma")? },
                NoiseModelArg::PoissonGaussian => NoiseKind::PoissonGaussian {
                    alpha: need(alpha, "alpha")?,
                    eta: need(eta, "eta")?,
                },
                NoiseModelArg::Speckle => NoiseKind::Speckle { sigma: need(sigma, "sigma")? },
                NoiseModelArg::ShiftedExponential => NoiseKind::ShiftedExponential {
                    base: need(base, "base")?,
                    slope: need(slope, "slope")?,
                },
            };
            let paths = list_images(gt)?;
            if paths.is_empty() {
                return Err(Error::Data(format!("no images in {}", gt.display())));
            }
            let clean = read_all(&paths)?;
            let xmin = dataset_min(&clean);
            create_dir(dest)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut manifest = String::new();
            for (p, c) in paths.iter().zip(&clean) {
                let name = format!("{}.blim", stem(p));
                write_image(&dest.join(&name), &synth_noise(c, kind, &mut rng, xmin)?)?;
                let gt_abs = fs::canonicalize(p).map_err(|e| Error::io(p, e))?;
                manifest.push_str(&format!("{name}\t{}\n", gt_abs.display()));
            }
            let mpath = dest.join(MANIFEST);
            fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
            emit(
                out,
                &[
                    ("images", paths.len().to_string()),
                    ("dataset_min", format!("{xmin}")),
                    ("out", dest.display().to_string()),
                ],
            )
        }
        Command::Phantom {
            count,
            size,
            out: dest,
            blobs,
        } => {
            let (h, w) = parse_size(size)?;
            if h < 32 || w < 32 {
                return Err(Error::Config(format!("phantoms must be at least 32x32, got {size}")));
            }
            let spec = PhantomSpec {
                blob_count: *blobs,
                ..PhantomSpec::default()
            };
            create_dir(dest)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let digits = count.saturating_sub(1).to_string().len().max(3);
            for i in 0..*count {
                let img = generate_phantom(h, w, &mut rng, &spec)?;
                write_image(&dest.join(format!("phantom_{i:0digits$}.blim")), &img)?;
            }
            emit(
                out,
                &[
                    ("images", count.to_string()),
                    ("size", format!("{h}x{w}")),
                    ("out", dest.display().to_string()),
                ],
            )
        }
        Command::Baseline { noisy, gt } => {
            let (_, ns, gs) = paired(noisy, gt)?;
            let r = metrics::gaussian_baseline(&ns, &gs, &metrics::default_sigma_grid())?;
            emit(
                out,
                &[
                    ("sigma", format!("{:.1}", r.sigma)),
                    ("psnr", fmt_db(r.psnr)),
                    ("ssim", format!("{:.6}", r.ssim)),
                    ("noisy_psnr", fmt_db(metrics::mean_psnr(&ns, &gs)?)),
                ],
            )
        }
        Command::Selftest => selftest(seed, out),
    }
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("size must look like 128x128, got `{s}`"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?))
}

fn selftest(seed: u64, out: &mut dyn Write) -> Result<()> {
    let mut checks: Vec<(String, bool, String)> = Vec::new();
    for (name, e) in diagnostics::primitive_grad_errors(seed)? {
        checks.push((format!("grad:{name}"), e < 1e-4, format!("{e:.2e}")));
    }
    for n in 1..=3 {
        let e = diagnostics::composition_grad_error(n, 20, seed.wrapping_add(n as u64))?;
        checks.push((format!("grad:composition:N={n}"), e < 1e-3, format!("{e:.2e}")));
    }
    let f = diagnostics::mean_masked_fraction(256, 1000, seed)?;
    checks.push(("masking:fraction".into(), (f - 0.068).abs() <= 0.003, format!("{f:.5}")));
    for n in 2..=3 {
        let e = diagnostics::max_centering_error(n, 10_000, seed.wrapping_add(10 + n as u64));
        checks.push((format!("centering:N={n}"), e < 1e-6, format!("{e:.2e}")));
    }
    let w = |e| Error::io("<stdout>", e);
    for (name, ok, detail) in &checks {
        writeln!(out, "{} {name} ({detail})", if *ok { "PASS" } else { "FAIL" }).map_err(w)?;
    }
    let failed = checks.iter().filter(|c| !c.1).count();
    emit(
        out,
        &[
            ("passed", (checks.len() - failed).to_string()),
            ("failed", failed.to_string()),
        ],
    )?;
    if failed > 0 {
        return Err(Error::Numerical(format!("{failed} self-check(s) failed")));
    }
    Ok(())
}
