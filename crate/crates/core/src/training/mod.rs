//! Adversarial training: losses, history buffer, the alternating update step
//! and the epoch loop with best-validation checkpointing.

mod history;
mod losses;

use std::path::Path;

pub use history::HistoryBuffer;
pub use losses::{discriminator_loss, generator_adv_loss, generator_minimax_loss, generator_total_loss, l1_guidance, DiscLoss, PROB_CLAMP};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::impipe::{Dataset, RawImage, Sample, Split, ZScore};
use crate::models::{Checkpoint, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};
use crate::nn::{concat_channels, split_channels, AdamHyper, Module};
use crate::rng::{derive_seed, substream, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::wavelet::{decompose_batch, reconstruct_batch};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum L1Domain {
    /// All four packed subbands.
    Wavelet,
    /// The reconstructed image.
    Image,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeneratorLoss {
    /// `-0.5 mean ln D(G(x))`.
    NonSaturating,
    /// The negated discriminator cost.
    Minimax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub lambda_l1: f64,
    pub steps: usize,
    pub seed: u64,
    pub history_buffer_on: bool,
    pub mbd_on: bool,
    /// Generator and discriminator work on packed Haar subbands instead of
    /// the raw image.
    pub haar_on: bool,
    /// Without the adversarial term training is plain L1 regression.
    pub gan_on: bool,
    /// Validation interval in steps.
    pub eval_every: usize,
    /// Only meaningful with `haar_on`.
    pub l1_domain: L1Domain,
    pub generator_loss: GeneratorLoss,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            lr: 0.0008,
            lambda_l1: 100.0,
            steps: 1000,
            seed: 0,
            history_buffer_on: true,
            mbd_on: true,
            haar_on: true,
            gan_on: true,
            eval_every: 50,
            l1_domain: L1Domain::Wavelet,
            generator_loss: GeneratorLoss::NonSaturating,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if self.history_buffer_on && self.gan_on && self.batch_size % 2 != 0 {
            return fail(format!("batch_size {} must be even when the history buffer is on", self.batch_size));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.lambda_l1 >= 0.0 && self.lambda_l1.is_finite()) {
            return fail(format!("lambda_l1 must be non-negative, got {}", self.lambda_l1));
        }
        if self.eval_every == 0 {
            return fail("eval_every must be positive".into());
        }
        Ok(())
    }

    /// Channels the generator sees: 4 packed subbands or 1 raw plane.
    pub fn io_channels(&self) -> usize {
        if self.haar_on {
            4
        } else {
            1
        }
    }

    fn history_k(&self) -> usize {
        if self.history_buffer_on && self.gan_on {
            self.batch_size / 2
        } else {
            0
        }
    }
}

/// One training pair in network space.
#[derive(Debug, Clone)]
pub struct Prepared<T> {
    /// `[c, h, w]` generator input.
    pub input: Tensor<T>,
    /// `[c, h, w]` regression target in the same space.
    pub target: Tensor<T>,
    /// `[1, s, s]` normalized clean image.
    pub target_image: Tensor<T>,
}

/// Z-scores `img` with its own statistics; returns `[1, 1, s, s]`.
fn normalized_plane(img: &RawImage, norm: &ZScore) -> Result<Tensor<f64>> {
    norm.apply(&img.to_tensor()).reshape(&[1, 1, img.height, img.width])
}

/// Network-space input for a composite image and the normalization used.
pub fn encode_input<T: Scalar>(composite: &RawImage, haar: bool) -> Result<(Tensor<T>, ZScore)> {
    let norm = ZScore::fit(&composite.to_tensor())?;
    let x = normalized_plane(composite, &norm)?;
    let x = if haar { decompose_batch(&x)? } else { x };
    Ok((x.cast(), norm))
}

/// Inverse of [`encode_input`] for a single network output `[1, c, h, w]`.
pub fn decode_output<T: Scalar>(y: &Tensor<T>, norm: &ZScore, haar: bool, maxval: u16) -> Result<RawImage> {
    let y: Tensor<f64> = y.cast();
    let img = if haar { reconstruct_batch(&y)? } else { y };
    let (_, _, h, w) = img.dims4("decode_output")?;
    RawImage::from_tensor(&norm.invert(&img.reshape(&[h, w])?), maxval)
}

/// Source and target both use the composite's statistics, so the network
/// never needs the clean image's scale at inference time.
pub fn prepare_sample<T: Scalar>(s: &Sample, haar: bool) -> Result<Prepared<T>> {
    let (input, norm) = encode_input::<T>(&s.composite, haar)?;
    let y = normalized_plane(&s.clean, &norm)?;
    let target = if haar { decompose_batch(&y)? } else { y.clone() };
    Ok(Prepared {
        input: input.item(0),
        target: target.cast::<T>().item(0),
        target_image: y.cast::<T>().item(0),
    })
}

fn stack_field<T: Scalar>(items: &[&Prepared<T>], f: impl Fn(&Prepared<T>) -> &Tensor<T>) -> Result<Tensor<T>> {
    Tensor::stack(&items.iter().map(|p| f(p).clone()).collect::<Vec<_>>())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub j_d: f64,
    pub j_g_adv: f64,
    pub l1: f64,
}

/// Generator, optional discriminator, their optimizer state and the replay
/// buffer.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    cfg: TrainConfig,
    gen: Generator<T>,
    disc: Option<Discriminator<T>>,
    condition: bool,
    history: HistoryBuffer<T>,
    hyper: AdamHyper,
    steps_done: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: &TrainConfig, gen_cfg: &GeneratorConfig, disc_cfg: &DiscriminatorConfig, image_size: usize) -> Result<Self> {
        cfg.validate()?;
        let hyper = AdamHyper { lr: cfg.lr, ..AdamHyper::default() };
        hyper.validate()?;
        let io = cfg.io_channels();
        let gen_cfg = GeneratorConfig { input_size: image_size, ..gen_cfg.clone() };
        let mut rng: Rng = substream(cfg.seed, "init");
        let gen = Generator::new(&gen_cfg, io, &mut rng)?;
        let spatial = if cfg.haar_on { image_size / 2 } else { image_size };
        let disc = if cfg.gan_on {
            Some(Discriminator::new(disc_cfg, disc_cfg.input_channels(io), spatial, cfg.mbd_on, &mut rng)?)
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            gen,
            disc,
            condition: disc_cfg.condition_on_source,
            history: HistoryBuffer::new(cfg.history_k(), derive_seed(cfg.seed, "buffer")),
            hyper,
            steps_done: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn generator(&self) -> &Generator<T> {
        &self.gen
    }

    pub fn discriminator(&self) -> Option<&Discriminator<T>> {
        self.disc.as_ref()
    }

    pub fn history(&self) -> &HistoryBuffer<T> {
        &self.history
    }

    pub fn steps_done(&self) -> usize {
        self.steps_done
    }

    fn disc_input(&self, src: &Tensor<T>, sample: &Tensor<T>) -> Result<Tensor<T>> {
        if self.condition {
            concat_channels(src, sample)
        } else {
            Ok(sample.clone())
        }
    }

    fn l1_term(&self, pred: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
        if self.cfg.haar_on && self.cfg.l1_domain == L1Domain::Image {
            let (v, g) = l1_guidance(&reconstruct_batch(pred)?, &reconstruct_batch(target)?)?;
            // Orthonormal transform: the adjoint of reconstruction is decomposition.
            Ok((v, decompose_batch(&g)?))
        } else {
            l1_guidance(pred, target)
        }
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, src: &Tensor<T>, tgt: &Tensor<T>) -> Result<StepLosses> {
        let step = self.steps_done + 1;
        let fake = self.gen.forward(src)?;
        fake.ensure_finite(&format!("step {step}: generator output"))?;
        let (l1, l1_grad) = self.l1_term(&fake, tgt)?;

        let mut j_d = 0.0;
        let mut j_g_adv = 0.0;
        let mut grad = l1_grad.scale(T::lit(self.cfg.lambda_l1));
        if self.disc.is_some() {
            let real_in = self.disc_input(src, tgt)?;
            let fake_in = self.disc_input(src, &fake)?;
            let mixed = self.history.mix(&fake_in)?;
            let d = self.disc.as_mut().expect("checked above");

            let p_real: Vec<f64> = d.forward(&real_in)?.data().iter().map(|v| v.as_f64()).collect();
            let (vr, gr) = losses::real_term(&p_real)?;
            d.backward(&Tensor::from_vec(&[gr.len()], gr.iter().map(|&g| T::lit(g)).collect())?)?;
            let p_mixed: Vec<f64> = d.forward(&mixed)?.data().iter().map(|v| v.as_f64()).collect();
            let (vf, gf) = losses::fake_term(&p_mixed)?;
            d.backward(&Tensor::from_vec(&[gf.len()], gf.iter().map(|&g| T::lit(g)).collect())?)?;
            j_d = vr + vf;
            d.adam_step_all(&self.hyper)
                .map_err(|e| annotate(e, step, "discriminator"))?;

            let p_gen: Vec<f64> = d.forward(&fake_in)?.data().iter().map(|v| v.as_f64()).collect();
            let (v, gp) = match self.cfg.generator_loss {
                GeneratorLoss::NonSaturating => generator_adv_loss(&p_gen)?,
                GeneratorLoss::Minimax => generator_minimax_loss(&p_real, &p_gen)?,
            };
            j_g_adv = v;
            let gx = d.backward(&Tensor::from_vec(&[gp.len()], gp.iter().map(|&g| T::lit(g)).collect())?)?;
            d.zero_grad();
            let g_fake = if self.condition { split_channels(&gx, src.shape()[1])?.1 } else { gx };
            grad.add_assign(&g_fake)?;
        }

        for (name, v) in [("j_d", j_d), ("j_g_adv", j_g_adv), ("l1", l1)] {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("step {step}: loss {name}")));
            }
        }
        self.gen.backward(&grad)?;
        self.gen.adam_step_all(&self.hyper).map_err(|e| annotate(e, step, "generator"))?;
        self.steps_done = step;
        Ok(StepLosses { j_d, j_g_adv, l1 })
    }

    /// Losses on a batch without touching any state.
    pub fn probe(&self, src: &Tensor<T>, tgt: &Tensor<T>) -> Result<StepLosses> {
        let fake = self.gen.infer(src)?;
        let (l1, _) = self.l1_term(&fake, tgt)?;
        let (mut j_d, mut j_g_adv) = (0.0, 0.0);
        if let Some(d) = &self.disc {
            let p_real: Vec<f64> = d.infer(&self.disc_input(src, tgt)?)?.data().iter().map(|v| v.as_f64()).collect();
            let p_fake: Vec<f64> = d.infer(&self.disc_input(src, &fake)?)?.data().iter().map(|v| v.as_f64()).collect();
            j_d = discriminator_loss(&p_real, &p_fake)?.value;
            j_g_adv = match self.cfg.generator_loss {
                GeneratorLoss::NonSaturating => generator_adv_loss(&p_fake)?.0,
                GeneratorLoss::Minimax => generator_minimax_loss(&p_real, &p_fake)?.0,
            };
        }
        Ok(StepLosses { j_d, j_g_adv, l1 })
    }

    /// Mean absolute error between reconstructed predictions and the
    /// normalized clean images.
    pub fn validation_l1(&self, items: &[Prepared<T>]) -> Result<f64> {
        if items.is_empty() {
            return Err(Error::Empty("validation split"));
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in items.chunks(self.cfg.batch_size) {
            let refs: Vec<&Prepared<T>> = chunk.iter().collect();
            let pred = self.gen.infer(&stack_field(&refs, |p| &p.input)?)?;
            let img = if self.cfg.haar_on { reconstruct_batch(&pred)? } else { pred };
            let tgt = stack_field(&refs, |p| &p.target_image)?;
            for (a, b) in img.data().iter().zip(tgt.data()) {
                total += (*a - *b).abs().as_f64();
            }
            count += img.len();
        }
        Ok(total / count as f64)
    }

    /// Generator parameters under `gen.`, discriminator under `disc.`.
    pub fn checkpoint(&self, config_text: &str) -> Checkpoint {
        let mut ck = Checkpoint::new(config_text);
        ck.add_module("gen", &self.gen);
        if let Some(d) = &self.disc {
            ck.add_module("disc", d);
        }
        ck
    }

    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        ck.load_module("gen", &mut self.gen)?;
        if let Some(d) = &mut self.disc {
            ck.load_module("disc", d)?;
        }
        Ok(())
    }

    /// Bone-suppressed version of a composite image.
    pub fn suppress(&self, composite: &RawImage) -> Result<RawImage> {
        suppress_with(&self.gen, self.cfg.haar_on, composite)
    }
}

/// Runs a trained generator on one composite image.
pub fn suppress_with<T: Scalar>(gen: &Generator<T>, haar: bool, composite: &RawImage) -> Result<RawImage> {
    let (x, norm) = encode_input::<T>(composite, haar)?;
    let y = gen.infer(&x)?;
    y.ensure_finite("generator output")?;
    decode_output(&y, &norm, haar, composite.maxval)
}

fn annotate(e: Error, step: usize, who: &str) -> Error {
    match e {
        Error::NonFinite(ctx) => Error::NonFinite(format!("step {step}: {who} {ctx}")),
        other => other,
    }
}

/// Endless epoch-shuffled stream of full batches over `n` items.
struct BatchSampler {
    n: usize,
    order: Vec<usize>,
    cursor: usize,
    rng: Rng,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Self { n, order: Vec::new(), cursor: 0, rng: substream(seed, "data") };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n).collect();
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.n {
                self.reshuffle();
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub j_d: f64,
    pub j_g_adv: f64,
    pub l1: f64,
    pub val_l1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub log: Vec<LogRow>,
    pub best_step: usize,
    pub best_val_l1: f64,
    /// Parameters at the best validation step.
    pub best: Checkpoint,
    /// State after the last step.
    pub trainer: Trainer<T>,
}

impl<T> TrainOutcome<T> {
    pub fn initial_val_l1(&self) -> f64 {
        self.log[0].val_l1.expect("step 0 is always evaluated")
    }

    pub fn final_val_l1(&self) -> f64 {
        self.log.iter().rev().find_map(|r| r.val_l1).expect("step 0 is always evaluated")
    }
}

/// Trains on the train split, validating every `eval_every` steps and at the
/// end. `config_text` is stored in every checkpoint; `on_row` sees each log
/// row as it is produced.
pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    gen_cfg: &GeneratorConfig,
    disc_cfg: &DiscriminatorConfig,
    dataset: &Dataset,
    config_text: &str,
    on_row: &mut dyn FnMut(&LogRow),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let train_set = dataset.split(Split::Train);
    let val_set = dataset.split(Split::Val);
    if train_set.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if val_set.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    let size = dataset.size().expect("non-empty dataset");
    let prep = |set: &[&Sample]| set.iter().map(|s| prepare_sample::<T>(s, cfg.haar_on)).collect::<Result<Vec<_>>>();
    let train_items = prep(&train_set)?;
    let val_items = prep(&val_set)?;

    let mut trainer = Trainer::<T>::new(cfg, gen_cfg, disc_cfg, size)?;
    let mut sampler = BatchSampler::new(train_items.len(), cfg.seed);
    let batch = |idx: &[usize]| -> Result<(Tensor<T>, Tensor<T>)> {
        let refs: Vec<&Prepared<T>> = idx.iter().map(|&i| &train_items[i]).collect();
        Ok((stack_field(&refs, |p| &p.input)?, stack_field(&refs, |p| &p.target)?))
    };

    let probe_idx: Vec<usize> = (0..cfg.batch_size).map(|i| i % train_items.len()).collect();
    let (ps, pt) = batch(&probe_idx)?;
    let first = trainer.probe(&ps, &pt)?;
    let val0 = trainer.validation_l1(&val_items)?;
    let mut log = vec![LogRow { step: 0, j_d: first.j_d, j_g_adv: first.j_g_adv, l1: first.l1, val_l1: Some(val0) }];
    on_row(&log[0]);
    let mut best = trainer.checkpoint(config_text);
    let (mut best_step, mut best_val) = (0, val0);

    for step in 1..=cfg.steps {
        let (src, tgt) = batch(&sampler.next(cfg.batch_size))?;
        let l = trainer.train_step(&src, &tgt)?;
        let val_l1 = if step % cfg.eval_every == 0 || step == cfg.steps {
            let v = trainer.validation_l1(&val_items)?;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("step {step}: validation L1")));
            }
            if v < best_val {
                best_val = v;
                best_step = step;
                best = trainer.checkpoint(config_text);
            }
            Some(v)
        } else {
            None
        };
        let row = LogRow { step, j_d: l.j_d, j_g_adv: l.j_g_adv, l1: l.l1, val_l1 };
        on_row(&row);
        log.push(row);
    }
    Ok(TrainOutcome { log, best_step, best_val_l1: best_val, best, trainer })
}

/// Loss log with header `step,j_d,j_g_adv,l1,val_l1`; `val_l1` is empty on
/// steps without validation.
pub fn write_loss_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    let err = |e: csv::Error| crate::impipe::csv_error(path, e);
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["step", "j_d", "j_g_adv", "l1", "val_l1"]).map_err(err)?;
    for r in rows {
        let val = r.val_l1.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([r.step.to_string(), r.j_d.to_string(), r.j_g_adv.to_string(), r.l1.to_string(), val]).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests;
