use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::Rng as _;

use ribsup_core::config::RunConfig;
use ribsup_core::impipe::{histogram_match, load_dataset, read_pgm, write_dataset, write_pgm, PhantomConfig};
use ribsup_core::pipeline::{
    evaluate_dirs, fmt_float, mean_nps, mean_scores, run_ablation, run_training, write_ablation_csv, write_nps_csv, write_scores_csv,
    Suppressor,
};
use ribsup_core::rng::substream;
use ribsup_core::theory::{check_equilibrium, js_divergence, optimal_discriminator, value_function, DiscreteDistribution};
use ribsup_core::training::write_loss_csv;
use ribsup_core::Error;

#[derive(Parser)]
#[command(name = "ribsup", version, about = "Wavelet-domain adversarial bone suppression on synthetic radiographs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a paired phantom dataset with a train/val/test manifest.
    PhantomGen {
        /// Dataset directory to create.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        count: usize,
        /// Side length in pixels; must be even and at least 8.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a generator; writes best.ckpt, loss.csv and config.txt.
    Train {
        /// Run configuration (`key = value` lines); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory written by phantom-gen.
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Bone-suppress one image with a trained checkpoint.
    Suppress {
        #[arg(long)]
        ckpt: PathBuf,
        /// Composite image (PGM).
        #[arg(long = "in")]
        input: PathBuf,
        /// Output image (PGM).
        #[arg(long)]
        out: PathBuf,
        /// Remap the output's gray levels onto the input's histogram.
        #[arg(long)]
        match_histogram: bool,
        /// Histogram bins used by --match-histogram.
        #[arg(long, default_value_t = 65536)]
        bins: usize,
    },
    /// Score predictions against ground truth; files pair by id prefix.
    Evaluate {
        /// Directory of predicted PGMs.
        #[arg(long)]
        pred: PathBuf,
        /// Directory of ground-truth PGMs (`<id>_clean.pgm` preferred).
        #[arg(long)]
        gt: PathBuf,
        /// Directory of lung masks (`<id>_mask.pgm` preferred).
        #[arg(long)]
        mask: PathBuf,
        /// Per-image CSV `image,psnr,psnr_roi,ssim_roi`.
        #[arg(long)]
        out: PathBuf,
        /// Mean radial NPS CSV; defaults to `<out stem>_nps.csv`.
        #[arg(long)]
        nps_out: Option<PathBuf>,
        /// Run configuration supplying the NPS settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train and score the four ablation variants; writes ablation.csv.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Base configuration; each row overrides haar_on and gan_on.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Check the optimal-discriminator identity on random histograms.
    TheoryCheck {
        #[arg(long, default_value_t = 100)]
        pairs: usize,
        #[arg(long, default_value_t = 16)]
        bins: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Residual bound for the theory checks.
const THEORY_TOL: f64 = 1e-12;

enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_numeric() {
            Failure::Numeric(e.to_string())
        } else if matches!(e, Error::Config(_)) {
            Failure::Usage(e.to_string())
        } else {
            Failure::Data(e.to_string())
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Error> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn create_dir(path: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn phantom_gen(out: &Path, count: usize, size: usize, seed: u64) -> Result<(), Failure> {
    let rows = write_dataset(out, count, size, seed, &PhantomConfig::default())?;
    let count_of = |s: &str| rows.iter().filter(|r| r.split.as_str() == s).count();
    println!("wrote {} phantoms to {}: train {} val {} test {}", rows.len(), out.display(), count_of("train"), count_of("val"), count_of("test"));
    Ok(())
}

fn train(config: Option<&Path>, data: &Path, out: &Path) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let ds = load_dataset(data)?;
    create_dir(out)?;
    let run = run_training(&cfg, &ds, &mut |r| {
        if let Some(v) = r.val_l1 {
            eprintln!("step {:>6}  j_d {:.5}  j_g_adv {:.5}  l1 {:.5}  val_l1 {:.5}", r.step, r.j_d, r.j_g_adv, r.l1, v);
        }
    })?;
    run.best.save(&out.join("best.ckpt"))?;
    write_loss_csv(&out.join("loss.csv"), &run.log)?;
    write_text(&out.join("config.txt"), &run.best.config)?;
    println!(
        "best val_l1 {} at step {} (step 0: {}); wrote {}",
        run.best_val_l1,
        run.best_step,
        run.initial_val_l1(),
        out.join("best.ckpt").display()
    );
    Ok(())
}

fn suppress(ckpt: &Path, input: &Path, out: &Path, match_hist: bool, bins: usize) -> Result<(), Failure> {
    let model = Suppressor::load(ckpt)?;
    let img = read_pgm(input)?;
    let mut pred = model.suppress(&img)?;
    if match_hist {
        pred = histogram_match(&pred, &img, bins)?;
    }
    write_pgm(out, &pred)?;
    Ok(())
}

fn evaluate(pred: &Path, gt: &Path, mask: &Path, out: &Path, nps_out: Option<&Path>, config: Option<&Path>) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let scores = evaluate_dirs(pred, gt, mask, &cfg.nps)?;
    write_scores_csv(out, &scores)?;
    let nps_path = match nps_out {
        Some(p) => p.to_path_buf(),
        None => {
            let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("metrics");
            out.with_file_name(format!("{stem}_nps.csv"))
        }
    };
    write_nps_csv(&nps_path, &mean_nps(&scores)?)?;
    let (p, pr, s) = mean_scores(&scores)?;
    println!("{} images  mean psnr {}  psnr_roi {}  ssim_roi {}", scores.len(), fmt_float(p), fmt_float(pr), fmt_float(s));
    Ok(())
}

fn ablate(data: &Path, out: &Path, config: Option<&Path>) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let ds = load_dataset(data)?;
    create_dir(out)?;
    let rows = run_ablation(&cfg, &ds, &mut |r| {
        eprintln!(
            "{:<26} psnr {:.3}  psnr_roi {:.3}  ssim_roi {:.4}  val_l1 {:.5} -> {:.5}",
            r.model,
            r.psnr,
            r.psnr_roi,
            r.ssim_roi,
            r.run.initial_val_l1(),
            r.run.final_val_l1()
        );
    })?;
    for (i, r) in rows.iter().enumerate() {
        write_loss_csv(&out.join(format!("loss_{i}.csv")), &r.run.log)?;
    }
    write_ablation_csv(&out.join("ablation.csv"), &rows)?;
    println!("wrote {}", out.join("ablation.csv").display());
    Ok(())
}

fn theory_check(pairs: usize, bins: usize, seed: u64) -> Result<(), Failure> {
    let mut rng = substream(seed, "theory");
    let mut worst_eq: f64 = 0.0;
    let mut worst_opt: f64 = 0.0;
    for _ in 0..pairs {
        let p = DiscreteDistribution::random(bins, &mut rng)?;
        let q = DiscreteDistribution::random(bins, &mut rng)?;
        worst_eq = worst_eq.max(check_equilibrium(&p, &q)?.residual);
        // D* must beat a perturbed discriminator.
        let d = optimal_discriminator(&p, &q)?;
        let best = value_function(&p, &q, &d)?;
        let bumped: Vec<f64> = d.iter().map(|v| (v + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0)).collect();
        worst_opt = worst_opt.max(value_function(&p, &q, &bumped)? - best);
    }
    let u = DiscreteDistribution::uniform(bins)?;
    let eq = check_equilibrium(&u, &u)?;
    let jsd_same = js_divergence(&u, &u)?;
    let jsd_disjoint = js_divergence(&DiscreteDistribution::delta(2, 0)?, &DiscreteDistribution::delta(2, 1)?)?;

    let checks = [
        ("equilibrium residual (max)", worst_eq, worst_eq < THEORY_TOL),
        ("perturbed D gain over D* (max)", worst_opt, worst_opt <= THEORY_TOL),
        ("value at p = q", eq.value, (eq.value + 4f64.ln()).abs() < THEORY_TOL),
        ("JSD(p, p)", jsd_same, jsd_same.abs() < THEORY_TOL),
        ("JSD(disjoint) - ln 2", jsd_disjoint - 2f64.ln(), (jsd_disjoint - 2f64.ln()).abs() < THEORY_TOL),
    ];
    println!("{pairs} random pairs over {bins} bins");
    for (name, v, ok) in &checks {
        println!("{:<32} {:>14.6e}  {}", name, v, if *ok { "ok" } else { "FAIL" });
    }
    println!("equilibrium value {:.6}", eq.value);
    if checks.iter().all(|c| c.2) {
        Ok(())
    } else {
        Err(Failure::Numeric("theory check failed".into()))
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::PhantomGen { out, count, size, seed } => phantom_gen(&out, count, size, seed),
        Command::Train { config, data, out } => train(config.as_deref(), &data, &out),
        Command::Suppress { ckpt, input, out, match_histogram, bins } => suppress(&ckpt, &input, &out, match_histogram, bins),
        Command::Evaluate { pred, gt, mask, out, nps_out, config } => evaluate(&pred, &gt, &mask, &out, nps_out.as_deref(), config.as_deref()),
        Command::Ablate { data, out, config } => ablate(&data, &out, config.as_deref()),
        Command::TheoryCheck { pairs, bins, seed } => theory_check(pairs, bins, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Numeric(m)) => {
            eprintln!("numeric failure: {m}");
            ExitCode::from(3)
        }
    }
}
