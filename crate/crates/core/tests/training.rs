use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xview::diagnostics::micro_model_config;
use xview::model::{Batch, LossOptions, LossToggles, Model};
use xview::nn::{Grads, ParamStore, Tensor, WeightInit};
use xview::reconstruction::reconstruction_loss_with_grads;
use xview::trainer::{Adam, TrainConfig, TrainItem, Trainer};

fn noise(shape: &[usize], amp: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-amp..amp)).collect()).unwrap()
}

/// Random images whose clips are noisy copies, so image and clip agree.
fn items(n: usize, seed: u64) -> Vec<TrainItem> {
    let cfg = micro_model_config().encoder;
    let shape = [cfg.channels, cfg.image_size, cfg.image_size];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let image = noise(&shape, 1.0, &mut rng);
            let frames = (0..cfg.frames)
                .map(|_| image.add(&noise(&shape, 0.1, &mut rng)))
                .collect();
            TrainItem { image, frames }
        })
        .collect()
}

fn config(steps: usize, batch: usize) -> TrainConfig {
    let mut model = micro_model_config();
    model.encoder.init = WeightInit::FanIn;
    model.decoder.init = WeightInit::FanIn;
    TrainConfig {
        model,
        batch_size: batch,
        steps,
        lr_encoder: 1e-3,
        lr_new: 1e-3,
        seed: 17,
        ..TrainConfig::default()
    }
}

fn grads_for(toggles: LossToggles) -> (ParamStore, Grads) {
    let cfg = config(1, 4);
    let mut store = ParamStore::new();
    let model = Model::new(&mut store, cfg.model.clone(), 3).unwrap();
    let data = items(4, 9);
    let batch = Batch {
        images: data.iter().map(|i| i.image.clone()).collect(),
        clips: data.iter().map(|i| i.frames.clone()).collect(),
    };
    let opts = LossOptions {
        toggles,
        ..LossOptions::default()
    };
    let mut g = Grads::zeros_like(&store);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    model.objective(&store, &batch, &opts, None, &mut rng, Some(&mut g)).unwrap();
    (store, g)
}

fn component_norm(store: &ParamStore, g: &Grads, prefix: &str) -> f64 {
    store
        .iter()
        .filter(|(_, p)| p.name.starts_with(prefix))
        .map(|(id, _)| g.get(id).sum_squares())
        .sum::<f64>()
        .sqrt()
}

#[test]
fn disabled_components_receive_exactly_zero_gradient() {
    let (store, g) = grads_for(LossToggles {
        icl: true,
        pmd: false,
        pfr: false,
    });
    assert_eq!(component_norm(&store, &g, "decoder."), 0.0);
    assert_eq!(component_norm(&store, &g, "pfr."), 0.0);
    assert!(component_norm(&store, &g, "encoder.") > 0.0);

    let (store, g) = grads_for(LossToggles {
        icl: true,
        pmd: true,
        pfr: false,
    });
    assert_eq!(component_norm(&store, &g, "pfr."), 0.0);
    assert!(component_norm(&store, &g, "decoder.") > 0.0);

    let (store, g) = grads_for(LossToggles::default());
    assert!(component_norm(&store, &g, "pfr.") > 0.0);
}

#[test]
fn identical_runs_give_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = items(8, 4);
    let run = |name: &str| {
        let mut t = Trainer::new(config(12, 4)).unwrap();
        t.train(&data, None).unwrap();
        t.save(&dir.path().join(name)).unwrap()
    };
    assert_eq!(run("a.bin"), run("b.bin"));
}

#[test]
fn resuming_from_a_checkpoint_is_bitwise_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let data = items(8, 5);
    let cfg = config(20, 4);

    let mut straight = Trainer::new(cfg.clone()).unwrap();
    straight.train_until(&data, 20, None, None).unwrap();

    let mut first = Trainer::new(cfg).unwrap();
    first.train_until(&data, 10, None, None).unwrap();
    let mid = dir.path().join("mid.bin");
    first.save(&mid).unwrap();
    let mut resumed = Trainer::load(&mid).unwrap();
    assert_eq!(resumed.step, 10);
    resumed.train_until(&data, 20, None, None).unwrap();

    for ((_, a), (_, b)) in straight.store.iter().zip(resumed.store.iter()) {
        assert_eq!(a.name, b.name);
        assert!(
            a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()),
            "{} diverged",
            a.name
        );
    }
    assert_eq!(
        straight.save(&dir.path().join("s.bin")).unwrap(),
        resumed.save(&dir.path().join("r.bin")).unwrap()
    );
}

#[test]
fn overfits_four_pairs_within_fifty_steps() {
    let data = items(4, 6);
    let mut cfg = config(50, 4);
    cfg.augment = false;
    cfg.warmup_fraction = 0.0;
    let mut t = Trainer::new(cfg).unwrap();
    let reports = t.train(&data, None).unwrap();
    let first = reports[0].losses.total;
    let last = reports.last().unwrap().losses.total;
    assert!(last < 0.1 * first, "loss {first} -> {last}");
}

/// Mean reconstruction loss over `data` and, with `grads`, its gradient
/// through the coefficient net, the decoder and the encoder.
fn reconstruction_step(model: &Model, store: &ParamStore, data: &[TrainItem], mut grads: Option<&mut Grads>) -> f64 {
    let b = data.len() as f64;
    let mut total = 0.0;
    for item in data {
        let (img, img_cache) = model.encoder.encode_image(store, &item.image).unwrap();
        let (vid, vid_caches) = model.encoder.encode_video(store, &item.frames).unwrap();
        let (res, dec_cache) = model.decoder.decode_pair(store, &img, &vid).unwrap();
        let (w, coef_cache) = model.coefficients.coefficients_from_attention(store, &res.attn).unwrap();
        let (loss, rg) = reconstruction_loss_with_grads(&vid.patches, &img.patches, &w).unwrap();
        total += loss / b;
        if let Some(g) = grads.as_deref_mut() {
            let scaled = |mut t: Tensor| {
                t.scale(1.0 / b);
                t
            };
            let da = model.coefficients.backward(store, &coef_cache, &scaled(rg.coefficients), g);
            let d = model.decoder.decode_backward(store, &dec_cache, 0.0, Some(&da), g);
            let mut dy = scaled(rg.image_patches);
            dy.add_assign(&d.img_patches);
            let mut dx = scaled(rg.video_patches);
            dx.add_assign(&d.vid_patches);
            model.encoder.image_backward(store, &img_cache, &d.img_cls, &dy, g);
            model.encoder.video_backward(store, &vid_caches, &Tensor::zeros(&[img.cls.len()]), &dx, g);
        }
    }
    total
}

#[test]
fn reconstruction_alone_drops_below_a_tenth_in_500_steps() {
    // the image itself is one clip frame; the other frames are distractors
    let data: Vec<TrainItem> = items(4, 8)
        .into_iter()
        .map(|mut it| {
            it.frames[0] = it.image.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            for f in &mut it.frames[1..] {
                *f = noise(f.shape(), 1.0, &mut rng);
            }
            it
        })
        .collect();
    let cfg = config(500, 4);
    let mut store = ParamStore::new();
    let model = Model::new(&mut store, cfg.model.clone(), 5).unwrap();
    let mut adam = Adam::new(&store);
    let lrs = vec![1e-3; store.len()];
    let first = reconstruction_step(&model, &store, &data, None);
    for _ in 0..500 {
        let mut g = Grads::zeros_like(&store);
        reconstruction_step(&model, &store, &data, Some(&mut g));
        adam.update(&mut store, &g, &lrs);
    }
    let last = reconstruction_step(&model, &store, &data, None);
    assert!(first > 0.0);
    assert!(last < 0.1 * first, "L_r {first} -> {last}");
}
