//! Fine-tuning behavior: freeze contract, ignore-label contract, argmax
//! semantics, the synthetic training task, cloud-gap skipping and the
//! data-efficiency sweep plumbing.

use geofm_core::finetune::{
    cloudgap_finetune_step, finetune_seg_step, infer_gapfill, infer_seg, run_data_efficiency_sweep,
    seg_forward, stack_samples, subsample, synthetic_patch_labels, train_seg_with_curve,
    FinetuneError, FinetuneRegime, SegDataset, SegHeadConfig, SegLoss, SegModel, SegRunConfig,
};
use geofm_core::mae::{standardize_chip_tensor, MaeConfig, MaeModel};
use geofm_core::nn::losses::inverse_frequency_weights;
use geofm_core::nn::optim::AdamWConfig;
use geofm_core::nn::{Graph, Tensor};
use geofm_core::raster::{
    compute_band_stats, generate_synthetic_tile, BandStats, QualityMask, RasterChip,
};

const CHIP: usize = 64;
const T: usize = 3;

fn enc_cfg() -> MaeConfig {
    MaeConfig {
        input: (T, 6, CHIP, CHIP),
        patch: (1, 16, 16),
        enc_dim: 32,
        enc_depth: 1,
        enc_heads: 2,
        dec_dim: 16,
        dec_depth: 1,
        dec_heads: 2,
        mask_ratio: 0.75,
    }
}

fn make_dataset(seeds: std::ops::Range<u64>, stats: &BandStats) -> SegDataset {
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    for seed in seeds {
        let (chip, _) = generate_synthetic_tile(seed, CHIP, T, 0.0).unwrap();
        samples.push(standardize_chip_tensor::<f32>(&chip, stats).unwrap());
        labels.push(synthetic_patch_labels(&chip, 16, 3));
    }
    SegDataset { samples, labels }
}

fn shared_stats() -> BandStats {
    let chips: Vec<RasterChip> =
        (0..8).map(|s| generate_synthetic_tile(s, CHIP, T, 0.0).unwrap().0).collect();
    compute_band_stats(chips.iter().map(|c| (c, None))).unwrap()
}

fn head_cfg(train_labels: &[Vec<u8>]) -> SegHeadConfig {
    let flat: Vec<u8> = train_labels.iter().flatten().copied().collect();
    let weights = inverse_frequency_weights(&flat, 2, 255);
    SegHeadConfig {
        classes: 2,
        neck_channels: [32, 24, 16, 8],
        loss: SegLoss::WeightedCrossEntropy { class_weights: weights },
        ignore_label: 255,
    }
}

#[test]
fn seg_forward_shapes_match_input_resolution() {
    let cfg = enc_cfg();
    let head = SegHeadConfig {
        classes: 2,
        neck_channels: [16, 12, 8, 8],
        loss: SegLoss::Dice,
        ignore_label: 255,
    };
    let model = SegModel::<f32>::new(cfg.clone(), head, 0).unwrap();
    let mut g = Graph::new();
    let gp = model.params.stage(&mut g, |_| false);
    let x = g.constant(Tensor::zeros(&[2, T, 6, CHIP, CHIP]));
    let logits = seg_forward(&model, &mut g, &gp, x).unwrap();
    assert_eq!(g.shape(logits), &[2, 2, CHIP, CHIP]);
    // neck input channels concatenate timesteps: T * D
    assert_eq!(
        model.params.get("head.neck0.weight").unwrap().value.shape()[0],
        T * cfg.enc_dim
    );
}

#[test]
fn all_ignored_labels_is_degenerate_error() {
    let cfg = enc_cfg();
    let head = head_cfg(&[vec![0, 1]]);
    let mut model = SegModel::<f32>::new(cfg, head, 1).unwrap();
    let x = Tensor::zeros(&[1, T, 6, CHIP, CHIP]);
    let labels = vec![255u8; CHIP * CHIP];
    match finetune_seg_step(
        &mut model,
        &x,
        &labels,
        FinetuneRegime::RANDOM,
        &AdamWConfig::default(),
        1e-3,
    ) {
        Err(FinetuneError::Nn(geofm_core::nn::NnError::Degenerate(_))) => {}
        other => panic!("expected degenerate-input error, got {other:?}"),
    }
}

#[test]
fn frozen_regime_keeps_encoder_bytes_invariant() {
    let stats = shared_stats();
    let train = make_dataset(0..4, &stats);
    let cfg = enc_cfg();
    let pre = MaeModel::<f32>::new(cfg.clone(), 9).unwrap();
    let mut model =
        SegModel::from_pretrained(cfg, head_cfg(&train.labels), &pre.params, 2).unwrap();

    let before: Vec<(String, Vec<u8>)> = model
        .params
        .iter()
        .filter(|(n, _)| !n.starts_with("head."))
        .map(|(n, e)| {
            (n.to_string(), e.value.data().iter().flat_map(|v| v.to_le_bytes()).collect())
        })
        .collect();

    let opt = AdamWConfig::default();
    for step in 0..10 {
        let i = step % train.len();
        finetune_seg_step(
            &mut model,
            &train.samples[i],
            &train.labels[i],
            FinetuneRegime::FROZEN,
            &opt,
            1e-3,
        )
        .unwrap();
    }
    for (name, bytes) in before {
        let now: Vec<u8> = model
            .params
            .get(&name)
            .unwrap()
            .value
            .data()
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        assert_eq!(bytes, now, "encoder parameter {name} moved under the frozen regime");
    }
}

#[test]
fn hundred_steps_reach_high_training_miou() {
    let stats = shared_stats();
    let train = make_dataset(0..8, &stats);
    let run = SegRunConfig {
        enc_cfg: enc_cfg(),
        head_cfg: head_cfg(&train.labels),
        regime: FinetuneRegime::RANDOM,
        epochs: 25, // 8 samples / batch 2 = 4 steps per epoch -> 100 steps
        batch_size: 2,
        max_lr: 2e-3,
        weight_decay: 0.01,
    };
    let (model, _) = train_seg_with_curve(&run, None, &train, &train, 7).unwrap();
    let miou = geofm_core::finetune::eval_miou(&model, &train).unwrap();
    assert!(miou > 0.9, "training mIoU after 100 steps: {miou}");
}

#[test]
fn ignored_pixels_change_neither_loss_nor_gradients() {
    use geofm_core::nn::losses::{dice_loss, weighted_cross_entropy};
    use rand::{Rng, SeedableRng};
    let (b, k, h, w) = (1usize, 2usize, 4usize, 4usize);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let base: Vec<f32> = (0..b * k * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let mut labels: Vec<u8> = (0..h * w).map(|i| (i % 2) as u8).collect();
    let ignored: Vec<usize> = vec![0, 5, 9];
    for &i in &ignored {
        labels[i] = 255;
    }

    let run = |logits_data: &[f32], dice: bool| -> (f32, Vec<f32>) {
        let mut g = Graph::<f32>::new();
        let logits =
            g.param(Tensor::from_vec(&[b, k, h, w], logits_data.to_vec()).unwrap());
        let loss = if dice {
            dice_loss(&mut g, logits, &labels, 255).unwrap()
        } else {
            weighted_cross_entropy(&mut g, logits, &labels, &[1.0, 1.5], 255).unwrap()
        };
        let grads = g.backward(loss).unwrap();
        (g.value(loss).item().unwrap(), grads[logits].as_ref().unwrap().data().to_vec())
    };

    // perturb logits only at ignored positions (both class planes)
    let mut perturbed = base.clone();
    for &i in &ignored {
        perturbed[i] += 10.0; // class-0 plane
        perturbed[h * w + i] -= 7.0; // class-1 plane
    }

    for dice in [false, true] {
        let (loss_a, grad_a) = run(&base, dice);
        let (loss_b, grad_b) = run(&perturbed, dice);
        assert_eq!(loss_a, loss_b, "loss moved (dice={dice})");
        for &i in &ignored {
            assert_eq!(grad_a[i], 0.0, "gradient at ignored pixel (dice={dice})");
            assert_eq!(grad_b[i], 0.0);
        }
        for i in 0..grad_a.len() {
            if ignored.contains(&(i % (h * w))) {
                continue;
            }
            assert_eq!(grad_a[i], grad_b[i], "gradient at kept pixel {i} moved (dice={dice})");
        }
    }
}

#[test]
fn argmax_matches_bruteforce_and_breaks_ties_low() {
    let stats = shared_stats();
    let data = make_dataset(30..31, &stats);
    let model = SegModel::<f32>::new(enc_cfg(), head_cfg(&data.labels), 11).unwrap();
    let pred = infer_seg(&model, &data.samples[0]).unwrap();

    // brute-force oracle over the raw logits
    let mut g = Graph::<f32>::new();
    let gp = model.params.stage(&mut g, |_| false);
    let xid = g.constant(data.samples[0].clone());
    let logits = seg_forward(&model, &mut g, &gp, xid).unwrap();
    let vals = g.value(logits).data();
    let plane = CHIP * CHIP;
    for p in 0..plane {
        let a = vals[p];
        let b = vals[plane + p];
        let want = if b > a { 1u8 } else { 0u8 }; // ties resolve to class 0
        assert_eq!(pred[p], want, "pixel {p}: logits ({a}, {b})");
    }
}

#[test]
fn cloudgap_skips_clear_samples_and_fills_only_masked_pixels() {
    let stats = shared_stats();
    let cfg = enc_cfg();
    let mut model = MaeModel::<f32>::new(cfg.clone(), 3).unwrap();

    let (clear_chip, clear_masks) = generate_synthetic_tile(40, CHIP, T, 0.0).unwrap();
    let (cloudy_chip, cloudy_masks) = generate_synthetic_tile(41, CHIP, T, 0.3).unwrap();
    let clear_x = standardize_chip_tensor::<f32>(&clear_chip, &stats).unwrap();
    let cloudy_x = standardize_chip_tensor::<f32>(&cloudy_chip, &stats).unwrap();

    let result = cloudgap_finetune_step(
        &mut model,
        &[clear_x, cloudy_x],
        &[clear_masks.clone(), cloudy_masks.clone()],
        &AdamWConfig::default(),
        1e-4,
    )
    .unwrap();
    assert_eq!(result.skipped, 1);
    assert_eq!(result.used, 1);
    assert!(result.loss.unwrap() > 0.0);

    // all-clear inference passes the input through untouched
    let (filled, plan) = infer_gapfill(&model, &clear_chip, &clear_masks, &stats).unwrap();
    assert!(plan.is_none());
    for i in 0..clear_chip.numel() {
        assert_eq!(filled.data.get(i), clear_chip.data.get(i));
    }

    // cloudy inference: clear pixels bit-unchanged, masked footprints replaced
    let (filled, plan) = infer_gapfill(&model, &cloudy_chip, &cloudy_masks, &stats).unwrap();
    let plan = plan.unwrap();
    let (gh, gw) = (CHIP / 16, CHIP / 16);
    let masked: std::collections::HashSet<usize> = plan.masked.iter().copied().collect();
    for t in 0..T {
        for c in 0..6usize {
            for y in 0..CHIP {
                for x in 0..CHIP {
                    let token = (t * gh + y / 16) * gw + x / 16;
                    if masked.contains(&token) {
                        continue;
                    }
                    let i = ((t * 6 + c) * CHIP + y) * CHIP + x;
                    assert_eq!(filled.data.get(i), cloudy_chip.data.get(i));
                }
            }
        }
    }
}

#[test]
fn sweep_rows_cover_fractions_and_subsample_sizes() {
    let stats = shared_stats();
    let train = make_dataset(50..58, &stats);
    let val = make_dataset(60..62, &stats);
    let run = SegRunConfig {
        enc_cfg: enc_cfg(),
        head_cfg: head_cfg(&train.labels),
        regime: FinetuneRegime::RANDOM,
        epochs: 1,
        batch_size: 4,
        max_lr: 1e-3,
        weight_decay: 0.01,
    };
    let rows =
        run_data_efficiency_sweep(&run, None, &train, &val, &[1.0, 0.5], &[0, 1]).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.metric == "miou" && (0.0..=1.0).contains(&r.value)));

    // floor(f * n) items, none shared with validation by construction
    let sub = subsample(&train, 4, 3);
    assert_eq!(sub.len(), 4);

    // fraction too small to yield a sample is an argument error
    assert!(matches!(
        run_data_efficiency_sweep(&run, None, &train, &val, &[0.01], &[0]),
        Err(FinetuneError::Argument(_))
    ));
}

#[test]
fn stacking_validates_shapes() {
    let a = Tensor::<f32>::zeros(&[1, 2, 3, 8, 8]);
    let b = Tensor::<f32>::zeros(&[1, 2, 3, 8, 8]);
    let c = Tensor::<f32>::zeros(&[1, 2, 3, 4, 4]);
    assert_eq!(stack_samples(&[&a, &b]).unwrap().shape(), &[2, 2, 3, 8, 8]);
    assert!(stack_samples(&[&a, &c]).is_err());
}
