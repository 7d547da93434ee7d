//! End-to-end plumbing: precision dispatch, suppression from a checkpoint,
//! per-image scoring and the four-way ablation grid.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::config::{Precision, RunConfig};
use crate::error::{Error, Result};
use crate::impipe::{read_mask, read_pgm, Dataset, RawImage, Split};
use crate::metrics::{evaluate_pair, psnr, NpsConfig};
use crate::models::{Checkpoint, Generator};
use crate::rng::substream;
use crate::training::{suppress_with, train, LogRow, TrainOutcome};

/// Full 16-bit range used for every image metric.
pub const DYNAMIC_RANGE: f64 = 65535.0;

/// Result of one training run, independent of the working precision.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub log: Vec<LogRow>,
    pub best_step: usize,
    pub best_val_l1: f64,
    /// Best-validation parameters; the config text is the effective run
    /// configuration.
    pub best: Checkpoint,
}

impl TrainRun {
    pub fn initial_val_l1(&self) -> f64 {
        self.log[0].val_l1.expect("step 0 is always evaluated")
    }

    pub fn final_val_l1(&self) -> f64 {
        self.log.iter().rev().find_map(|r| r.val_l1).expect("step 0 is always evaluated")
    }
}

fn summarize<T>(o: TrainOutcome<T>) -> TrainRun {
    TrainRun { log: o.log, best_step: o.best_step, best_val_l1: o.best_val_l1, best: o.best }
}

/// Trains with `cfg` on `ds`. The image size always comes from the dataset.
pub fn run_training(cfg: &RunConfig, ds: &Dataset, on_row: &mut dyn FnMut(&LogRow)) -> Result<TrainRun> {
    let size = ds.size().ok_or(Error::Empty("dataset"))?;
    let mut cfg = cfg.clone();
    cfg.generator.input_size = size;
    cfg.validate()?;
    let text = cfg.echo();
    let (t, g, d) = (&cfg.train, &cfg.generator, &cfg.discriminator);
    Ok(match cfg.precision {
        Precision::F32 => summarize(train::<f32>(t, g, d, ds, &text, on_row)?),
        Precision::F64 => summarize(train::<f64>(t, g, d, ds, &text, on_row)?),
    })
}

#[derive(Debug, Clone)]
enum Net {
    F32(Generator<f32>),
    F64(Generator<f64>),
}

/// Trained generator restored from a checkpoint.
#[derive(Debug, Clone)]
pub struct Suppressor {
    net: Net,
    config: RunConfig,
}

impl Suppressor {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = RunConfig::parse(&ck.config)?;
        let io = config.train.io_channels();
        // Initial values are overwritten by the checkpoint.
        let mut rng = substream(0, "init");
        let net = match config.precision {
            Precision::F32 => {
                let mut g = Generator::<f32>::new(&config.generator, io, &mut rng)?;
                ck.load_module("gen", &mut g)?;
                Net::F32(g)
            }
            Precision::F64 => {
                let mut g = Generator::<f64>::new(&config.generator, io, &mut rng)?;
                ck.load_module("gen", &mut g)?;
                Net::F64(g)
            }
        };
        Ok(Self { net, config })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn suppress(&self, composite: &RawImage) -> Result<RawImage> {
        let size = self.config.generator.input_size;
        if composite.width != size || composite.height != size {
            return Err(Error::shape("suppress", "image", format!("{size}x{size}"), format!("{}x{}", composite.width, composite.height)));
        }
        let haar = self.config.train.haar_on;
        match &self.net {
            Net::F32(g) => suppress_with(g, haar, composite),
            Net::F64(g) => suppress_with(g, haar, composite),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageScore {
    pub image: String,
    pub psnr: f64,
    pub psnr_roi: f64,
    pub ssim_roi: f64,
    pub nps_radial: Vec<(f64, f64)>,
}

pub fn score_image(image: &str, pred: &RawImage, gt: &RawImage, mask: &[bool], nps: &NpsConfig) -> Result<ImageScore> {
    let r = evaluate_pair(&pred.to_tensor(), &gt.to_tensor(), mask, DYNAMIC_RANGE, nps)?;
    Ok(ImageScore { image: image.to_string(), psnr: r.psnr_full, psnr_roi: r.psnr_roi, ssim_roi: r.ssim_roi, nps_radial: r.nps_radial })
}

/// Column means of the per-image scores.
pub fn mean_scores(scores: &[ImageScore]) -> Result<(f64, f64, f64)> {
    if scores.is_empty() {
        return Err(Error::Empty("scores"));
    }
    let n = scores.len() as f64;
    let mean = |f: fn(&ImageScore) -> f64| scores.iter().map(f).sum::<f64>() / n;
    Ok((mean(|s| s.psnr), mean(|s| s.psnr_roi), mean(|s| s.ssim_roi)))
}

/// Mean radial NPS over images, bin by bin.
pub fn mean_nps(scores: &[ImageScore]) -> Result<Vec<(f64, f64)>> {
    let first = scores.first().ok_or(Error::Empty("scores"))?;
    let mut acc: Vec<(f64, f64)> = first.nps_radial.iter().map(|&(f, _)| (f, 0.0)).collect();
    for s in scores {
        if s.nps_radial.len() != acc.len() {
            return Err(Error::shape("mean_nps", "bins", acc.len(), s.nps_radial.len()));
        }
        for (a, (_, v)) in acc.iter_mut().zip(&s.nps_radial) {
            a.1 += v;
        }
    }
    let n = scores.len() as f64;
    Ok(acc.into_iter().map(|(f, v)| (f, v / n)).collect())
}

/// Text for a float cell; infinities print as `inf`.
pub fn fmt_float(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        v.to_string()
    }
}

/// Leading id of a file stem: the part before the first `_`.
fn stem_id(path: &Path) -> Option<String> {
    let stem = path.file_stem()?.to_str()?;
    Some(stem.split('_').next().unwrap_or(stem).to_string())
}

/// PGM files in `dir` and its direct subdirectories, sorted.
fn pgm_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let list = |d: &Path| -> Result<Vec<PathBuf>> {
        let rd = std::fs::read_dir(d).map_err(|e| Error::io(d, e))?;
        let mut out = Vec::new();
        for entry in rd {
            out.push(entry.map_err(|e| Error::io(d, e))?.path());
        }
        Ok(out)
    };
    let mut files = Vec::new();
    for p in list(dir)? {
        if p.is_dir() {
            files.extend(list(&p)?.into_iter().filter(|q| q.is_file()));
        } else {
            files.push(p);
        }
    }
    files.retain(|p| p.extension().is_some_and(|e| e == "pgm"));
    files.sort();
    Ok(files)
}

/// Files keyed by id. When several share an id, one whose stem ends in
/// `_{role}` wins.
fn index_by_id(dir: &Path, role: &str) -> Result<BTreeMap<String, PathBuf>> {
    let mut map: BTreeMap<String, PathBuf> = BTreeMap::new();
    let suffix = format!("_{role}");
    for p in pgm_files(dir)? {
        let Some(id) = stem_id(&p) else { continue };
        let preferred = p.file_stem().and_then(|s| s.to_str()).is_some_and(|s| s.ends_with(&suffix));
        match map.get(&id) {
            Some(old) if !preferred || old.file_stem().and_then(|s| s.to_str()).is_some_and(|s| s.ends_with(&suffix)) => {}
            _ => {
                map.insert(id, p);
            }
        }
    }
    Ok(map)
}

/// Scores every prediction in `pred_dir` against the ground truth and mask
/// sharing its id (the file-name part before the first `_`).
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path, mask_dir: &Path, nps: &NpsConfig) -> Result<Vec<ImageScore>> {
    let preds = pgm_files(pred_dir)?;
    if preds.is_empty() {
        return Err(Error::Format { path: pred_dir.to_path_buf(), msg: "no .pgm predictions found".into() });
    }
    let gts = index_by_id(gt_dir, "clean")?;
    let masks = index_by_id(mask_dir, "mask")?;
    let mut out = Vec::with_capacity(preds.len());
    for p in preds {
        let id = stem_id(&p).unwrap_or_default();
        let missing = |what: &str, dir: &Path| Error::Format { path: p.clone(), msg: format!("no {what} with id {id:?} in {}", dir.display()) };
        let gt_path = gts.get(&id).ok_or_else(|| missing("ground truth", gt_dir))?;
        let mask_path = masks.get(&id).ok_or_else(|| missing("mask", mask_dir))?;
        let pred = read_pgm(&p)?;
        let gt = read_pgm(gt_path)?;
        let (mw, mh, mask) = read_mask(mask_path)?;
        if (pred.width, pred.height) != (gt.width, gt.height) || (mw, mh) != (gt.width, gt.height) {
            return Err(Error::Format { path: p.clone(), msg: "prediction, ground truth and mask sizes differ".into() });
        }
        let name = p.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        out.push(score_image(&name, &pred, &gt, &mask, nps)?);
    }
    Ok(out)
}

pub fn write_scores_csv(path: &Path, scores: &[ImageScore]) -> Result<()> {
    let err = |e: csv::Error| crate::impipe::csv_error(path, e);
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["image", "psnr", "psnr_roi", "ssim_roi"]).map_err(err)?;
    for s in scores {
        w.write_record([s.image.clone(), fmt_float(s.psnr), fmt_float(s.psnr_roi), fmt_float(s.ssim_roi)]).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_nps_csv(path: &Path, curve: &[(f64, f64)]) -> Result<()> {
    let err = |e: csv::Error| crate::impipe::csv_error(path, e);
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["radial_bin", "amplitude"]).map_err(err)?;
    for (f, a) in curve {
        w.write_record([f.to_string(), fmt_float(*a)]).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Suppresses every sample of `split` and scores it against its clean image.
pub fn evaluate_split(model: &Suppressor, ds: &Dataset, split: Split, nps: &NpsConfig) -> Result<Vec<ImageScore>> {
    let samples = ds.split(split);
    if samples.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    samples
        .iter()
        .map(|s| {
            let pred = model.suppress(&s.composite)?;
            score_image(&s.id, &pred, &s.clean, &s.mask, nps)
        })
        .collect()
}

/// Mean full-frame PSNR of the untouched composite against the clean image.
pub fn baseline_psnr(ds: &Dataset, split: Split) -> Result<f64> {
    let samples = ds.split(split);
    if samples.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let mut total = 0.0;
    for s in &samples {
        total += psnr(&s.clean.to_tensor(), &s.composite.to_tensor(), DYNAMIC_RANGE, None)?;
    }
    Ok(total / samples.len() as f64)
}

/// Ablation rows in table order: name, Haar input, adversarial term.
pub const ABLATION_MODELS: [(&str, bool, bool); 4] = [
    ("CNN", false, false),
    ("CNN + Haar Wavelets", true, false),
    ("CNN + GAN", false, true),
    ("CNN + GAN + Haar Wavelets", true, true),
];

/// `base` with only the two ablated switches changed.
pub fn ablation_config(base: &RunConfig, haar: bool, gan: bool) -> RunConfig {
    let mut c = base.clone();
    c.train.haar_on = haar;
    c.train.gan_on = gan;
    c
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub model: String,
    pub psnr: f64,
    pub psnr_roi: f64,
    pub ssim_roi: f64,
    pub run: TrainRun,
}

/// Trains the four variants with identical seeds and steps and scores each
/// best checkpoint on the test split.
pub fn run_ablation(base: &RunConfig, ds: &Dataset, on_done: &mut dyn FnMut(&AblationRow)) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(ABLATION_MODELS.len());
    for (name, haar, gan) in ABLATION_MODELS {
        let cfg = ablation_config(base, haar, gan);
        let run = run_training(&cfg, ds, &mut |_| {})?;
        let model = Suppressor::from_checkpoint(&run.best)?;
        let (psnr, psnr_roi, ssim_roi) = mean_scores(&evaluate_split(&model, ds, Split::Test, &cfg.nps)?)?;
        let row = AblationRow { model: name.to_string(), psnr, psnr_roi, ssim_roi, run };
        on_done(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let err = |e: csv::Error| crate::impipe::csv_error(path, e);
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["model", "psnr", "psnr_roi", "ssim_roi"]).map_err(err)?;
    for r in rows {
        w.write_record([r.model.clone(), fmt_float(r.psnr), fmt_float(r.psnr_roi), fmt_float(r.ssim_roi)]).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::impipe::{load_dataset, write_dataset, write_mask, write_pgm, PhantomConfig};

    fn tiny_config() -> RunConfig {
        RunConfig::parse(
            "steps = 3\nbatch_size = 2\neval_every = 2\ngen_base_channels = 4\ngen_res_blocks = 2\ngen_depth = 1\ngen_se_reduction = 2\n\
             disc_convs = 3\ndisc_base_channels = 4\nmbd_kernels = 3\nmbd_dim = 2\nnps_roi_size = 8\nnps_n_roi = 2\nimage_size = 16\n",
        )
        .unwrap()
    }

    fn tiny_dataset(dir: &Path) -> Dataset {
        write_dataset(dir, 10, 16, 1, &PhantomConfig::default()).unwrap();
        load_dataset(dir).unwrap()
    }

    #[test]
    fn checkpoint_restores_the_trained_generator() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path());
        for precision in ["f32", "f64"] {
            let cfg = RunConfig::parse(&format!("{}precision = {precision}\n", tiny_config().echo().replace("precision = f32\n", ""))).unwrap();
            let run = run_training(&cfg, &ds, &mut |_| {}).unwrap();
            assert_eq!(run.log.len(), 4);
            let path = dir.path().join("m.ckpt");
            run.best.save(&path).unwrap();
            let model = Suppressor::load(&path).unwrap();
            assert_eq!(model.config().echo(), cfg.echo());
            let img = &ds.samples[0].composite;
            let a = model.suppress(img).unwrap();
            assert_eq!(a, model.suppress(img).unwrap());
            assert_eq!((a.width, a.height), (16, 16));
            let wrong = RawImage::new(8, 8, 10, vec![0; 64]).unwrap();
            assert!(model.suppress(&wrong).is_err());
        }
    }

    #[test]
    fn image_size_comes_from_the_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path());
        let mut cfg = tiny_config();
        cfg.generator.input_size = 64;
        let run = run_training(&cfg, &ds, &mut |_| {}).unwrap();
        assert!(run.best.config.contains("image_size = 16\n"));
    }

    #[test]
    fn directory_evaluation_pairs_by_id() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path());
        let pred_dir = dir.path().join("pred");
        std::fs::create_dir(&pred_dir).unwrap();
        let test = ds.split(Split::Test);
        for s in &test {
            write_pgm(pred_dir.join(format!("{}_pred.pgm", s.id)), &s.clean).unwrap();
        }
        let nps = tiny_config().nps;
        let scores = evaluate_dirs(&pred_dir, dir.path(), dir.path(), &nps).unwrap();
        assert_eq!(scores.len(), test.len());
        for s in &scores {
            assert_eq!(s.psnr, f64::INFINITY);
            assert_eq!(s.ssim_roi, 1.0);
            assert!(s.nps_radial.iter().all(|&(_, a)| a == 0.0));
        }
        let csv = dir.path().join("scores.csv");
        write_scores_csv(&csv, &scores).unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        assert!(text.starts_with("image,psnr,psnr_roi,ssim_roi\n"));
        assert!(text.lines().nth(1).unwrap().ends_with(",inf,inf,1"));

        let other = tempfile::tempdir().unwrap();
        let orphan = other.path();
        write_pgm(orphan.join("99999.pgm"), &test[0].clean).unwrap();
        write_mask(orphan.join("zzz_mask.pgm"), 16, 16, &test[0].mask).unwrap();
        assert!(evaluate_dirs(orphan, dir.path(), dir.path(), &nps).is_err());
    }

    #[test]
    fn means_match_rows() {
        let mk = |p: f64| ImageScore { image: String::new(), psnr: p, psnr_roi: p + 1.0, ssim_roi: 0.5, nps_radial: vec![(1.0, p), (2.0, 2.0 * p)] };
        let rows = [mk(10.0), mk(20.0), mk(30.0)];
        assert_eq!(mean_scores(&rows).unwrap(), (20.0, 21.0, 0.5));
        assert_eq!(mean_nps(&rows).unwrap(), vec![(1.0, 20.0), (2.0, 40.0)]);
        assert!(mean_scores(&[]).is_err());
        assert_eq!(fmt_float(f64::INFINITY), "inf");
    }

    #[test]
    fn ablation_grid_order_and_switches() {
        let names: Vec<&str> = ABLATION_MODELS.iter().map(|m| m.0).collect();
        assert_eq!(names, ["CNN", "CNN + Haar Wavelets", "CNN + GAN", "CNN + GAN + Haar Wavelets"]);
        let base = RunConfig::default();
        for (_, haar, gan) in ABLATION_MODELS {
            let c = ablation_config(&base, haar, gan);
            assert_eq!((c.train.haar_on, c.train.gan_on), (haar, gan));
            assert_eq!(c.train.seed, base.train.seed);
            assert_eq!(c.train.steps, base.train.steps);
        }
    }
}
