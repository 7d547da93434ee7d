use super::*;
use crate::impipe::{generate_phantom, PhantomConfig};
use crate::rng::substream;
use rand::Rng as _;

fn small_gen() -> GeneratorConfig {
    GeneratorConfig { input_size: 16, base_channels: 4, n_res_blocks: 2, se_reduction: 2, depth: 1, noise_std: 0.0 }
}

fn small_disc() -> DiscriminatorConfig {
    DiscriminatorConfig { n_conv: 3, base_channels: 4, mbd_kernels: 4, mbd_dim: 3, condition_on_source: true }
}

fn small_train(steps: usize) -> TrainConfig {
    TrainConfig { batch_size: 4, steps, eval_every: 5, ..TrainConfig::default() }
}

fn tiny_dataset(n: usize) -> Dataset {
    let samples = (0..n)
        .map(|i| {
            let p = generate_phantom(100 + i as u64, 16, &PhantomConfig::default()).unwrap();
            let split = match i % 5 {
                0 => Split::Val,
                1 => Split::Test,
                _ => Split::Train,
            };
            Sample { id: format!("{i:05}"), split, composite: p.composite, clean: p.clean, mask: p.roi_mask }
        })
        .collect();
    Dataset { samples }
}

fn random_batch(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    assert!(TrainConfig { batch_size: 7, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { batch_size: 7, history_buffer_on: false, ..TrainConfig::default() }.validate().is_ok());
    assert!(TrainConfig { batch_size: 7, gan_on: false, ..TrainConfig::default() }.validate().is_ok());
    assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { lambda_l1: -1.0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { eval_every: 0, ..TrainConfig::default() }.validate().is_err());
}

#[test]
fn encode_decode_roundtrip_without_network() {
    let p = generate_phantom(4, 16, &PhantomConfig::default()).unwrap();
    for haar in [false, true] {
        let (x, norm) = encode_input::<f64>(&p.composite, haar).unwrap();
        assert_eq!(x.shape(), if haar { &[1, 4, 8, 8][..] } else { &[1, 1, 16, 16][..] });
        assert_eq!(decode_output(&x, &norm, haar, p.composite.maxval).unwrap(), p.composite);
    }
}

#[test]
fn prepared_targets_share_source_statistics() {
    let ds = tiny_dataset(5);
    let s = &ds.samples[0];
    let p = prepare_sample::<f64>(s, true).unwrap();
    let norm = ZScore::fit(&s.composite.to_tensor()).unwrap();
    let back = norm.invert(&p.target_image.clone().reshape(&[16, 16]).unwrap());
    assert!(back.max_abs_diff(&s.clean.to_tensor()).unwrap() < 1e-9);
    let img = reconstruct_batch(&p.target.reshape(&[1, 4, 8, 8]).unwrap()).unwrap();
    assert!(img.reshape(&[1, 16, 16]).unwrap().max_abs_diff(&p.target_image).unwrap() < 1e-12);
}

#[test]
fn image_domain_l1_gradient_is_adjoint() {
    let cfg = TrainConfig { l1_domain: L1Domain::Image, batch_size: 2, ..small_train(1) };
    let t = Trainer::<f64>::new(&cfg, &small_gen(), &small_disc(), 16).unwrap();
    let mut rng = substream(5, "l1");
    let pred = random_batch(&mut rng, &[2, 4, 8, 8]);
    let tgt = random_batch(&mut rng, &[2, 4, 8, 8]);
    let (v, g) = t.l1_term(&pred, &tgt).unwrap();
    let h = 1e-7;
    for idx in [0, 17, 100, 300, 511] {
        let mut up = pred.clone();
        let mut dn = pred.clone();
        up.data_mut()[idx] += h;
        dn.data_mut()[idx] -= h;
        let fd = (t.l1_term(&up, &tgt).unwrap().0 - t.l1_term(&dn, &tgt).unwrap().0) / (2.0 * h);
        assert!((fd - g.data()[idx]).abs() < 1e-6, "idx {idx}: {fd} vs {}", g.data()[idx]);
    }
    let direct = l1_guidance(&reconstruct_batch(&pred).unwrap(), &reconstruct_batch(&tgt).unwrap()).unwrap().0;
    assert_eq!(v, direct);
}

#[test]
fn steps_stay_finite_for_every_variant() {
    let mut rng = substream(6, "steps");
    for (haar, gan, mbd, buffer, loss) in [
        (true, true, true, true, GeneratorLoss::NonSaturating),
        (true, true, false, false, GeneratorLoss::Minimax),
        (false, true, true, true, GeneratorLoss::NonSaturating),
        (false, false, true, true, GeneratorLoss::NonSaturating),
        (true, false, false, false, GeneratorLoss::NonSaturating),
    ] {
        let cfg = TrainConfig { haar_on: haar, gan_on: gan, mbd_on: mbd, history_buffer_on: buffer, generator_loss: loss, ..small_train(1) };
        let mut t = Trainer::<f64>::new(&cfg, &small_gen(), &small_disc(), 16).unwrap();
        assert_eq!(t.discriminator().is_some(), gan);
        let c = cfg.io_channels();
        let s = if haar { 8 } else { 16 };
        for _ in 0..6 {
            let src = random_batch(&mut rng, &[4, c, s, s]);
            let tgt = src.map(|v| 0.5 * v);
            let l = t.train_step(&src, &tgt).unwrap();
            assert!(l.j_d.is_finite() && l.j_g_adv.is_finite() && l.l1.is_finite());
            if !gan {
                assert_eq!((l.j_d, l.j_g_adv), (0.0, 0.0));
            }
        }
        assert_eq!(t.steps_done(), 6);
        assert_eq!(t.history().is_full(), gan && buffer);
    }
}

#[test]
fn step_reduces_l1_on_a_fixed_batch() {
    let cfg = TrainConfig { gan_on: false, lr: 0.002, ..small_train(1) };
    let mut t = Trainer::<f64>::new(&cfg, &small_gen(), &small_disc(), 16).unwrap();
    let mut rng = substream(7, "fit");
    let src = random_batch(&mut rng, &[4, 4, 8, 8]);
    let tgt = src.map(|v| 0.3 * v);
    let first = t.probe(&src, &tgt).unwrap().l1;
    for _ in 0..40 {
        t.train_step(&src, &tgt).unwrap();
    }
    let last = t.probe(&src, &tgt).unwrap().l1;
    assert!(last < 0.7 * first, "{first} -> {last}");
}

#[test]
fn training_is_deterministic_per_seed() {
    let ds = tiny_dataset(10);
    let run = |seed| {
        let cfg = TrainConfig { seed, ..small_train(6) };
        train::<f64>(&cfg, &small_gen(), &small_disc(), &ds, "x", &mut |_| {}).unwrap()
    };
    let a = run(3);
    let b = run(3);
    assert_eq!(a.log, b.log);
    assert_eq!(a.best.to_bytes(), b.best.to_bytes());
    assert_eq!(a.trainer.checkpoint("x").to_bytes(), b.trainer.checkpoint("x").to_bytes());
    let c = run(4);
    assert_ne!(a.log, c.log);
}

#[test]
fn train_log_and_best_checkpoint() {
    let ds = tiny_dataset(10);
    let mut seen = Vec::new();
    let cfg = small_train(7);
    let out = train::<f64>(&cfg, &small_gen(), &small_disc(), &ds, "cfg text", &mut |r| seen.push(r.step)).unwrap();
    assert_eq!(seen, (0..=7).collect::<Vec<_>>());
    let evaluated: Vec<usize> = out.log.iter().filter(|r| r.val_l1.is_some()).map(|r| r.step).collect();
    assert_eq!(evaluated, vec![0, 5, 7]);
    let min = out.log.iter().filter_map(|r| r.val_l1).fold(f64::INFINITY, f64::min);
    assert_eq!(out.best_val_l1, min);
    assert_eq!(out.best.config, "cfg text");

    let mut restored = Trainer::<f64>::new(&cfg, &small_gen(), &small_disc(), 16).unwrap();
    restored.load_checkpoint(&out.best).unwrap();
    let val: Vec<Prepared<f64>> = ds.split(Split::Val).iter().map(|s| prepare_sample(s, true).unwrap()).collect();
    assert_eq!(restored.validation_l1(&val).unwrap(), out.best_val_l1);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("loss.csv");
    write_loss_csv(&path, &out.log).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "step,j_d,j_g_adv,l1,val_l1");
    assert_eq!(lines.len(), 9);
    assert!(lines[2].ends_with(','));
    assert!(!lines[1].ends_with(','));
}

#[test]
fn empty_splits_are_rejected() {
    let mut ds = tiny_dataset(5);
    ds.samples.retain(|s| s.split != Split::Val);
    assert!(train::<f64>(&small_train(1), &small_gen(), &small_disc(), &ds, "", &mut |_| {}).is_err());
    ds.samples.retain(|s| s.split != Split::Train);
    assert!(train::<f64>(&small_train(1), &small_gen(), &small_disc(), &ds, "", &mut |_| {}).is_err());
}

#[test]
fn sampler_visits_every_item_each_epoch() {
    let mut s = BatchSampler::new(10, 1);
    let mut idx = s.next(5);
    idx.extend(s.next(5));
    idx.sort_unstable();
    assert_eq!(idx, (0..10).collect::<Vec<_>>());
    assert_eq!(s.next(12).len(), 12);
}

#[test]
fn suppression_keeps_image_geometry() {
    let ds = tiny_dataset(5);
    let t = Trainer::<f32>::new(&small_train(1), &small_gen(), &small_disc(), 16).unwrap();
    let out = t.suppress(&ds.samples[0].composite).unwrap();
    assert_eq!((out.width, out.height, out.maxval), (16, 16, ds.samples[0].composite.maxval));
}
