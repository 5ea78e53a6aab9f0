//! Segmentation model: encoder trunk plus transposed-convolution neck.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::mae::{MaeConfig, MaeModel};
use crate::metrics::{summarize, ConfusionMatrix};
use crate::nn::blocks::{init_rng, transpose_conv2d, trunc_normal};
use crate::nn::graph::{Graph, NodeId};
use crate::nn::losses::{dice_loss, weighted_cross_entropy};
use crate::nn::optim::{AdamWConfig, GraphParams, LrSchedule, ParamStore};
use crate::nn::{Scalar, Tensor};
use crate::util::derive_seed;

use super::{EncoderInit, FinetuneError, FinetuneRegime, SegHeadConfig, SegLoss};

/// Encoder (patch embedding + transformer trunk) with a segmentation head.
/// Timestep token maps are concatenated along channels before the neck.
pub struct SegModel<S: Scalar> {
    pub enc_cfg: MaeConfig,
    pub head_cfg: SegHeadConfig,
    pub params: ParamStore<S>,
}

impl<S: Scalar> SegModel<S> {
    /// Random encoder and head.
    pub fn new(
        enc_cfg: MaeConfig,
        head_cfg: SegHeadConfig,
        seed: u64,
    ) -> Result<Self, FinetuneError> {
        enc_cfg.validate()?;
        head_cfg.validate()?;
        let (_, ph, pw) = enc_cfg.patch;
        if ph != 16 || pw != 16 {
            return Err(FinetuneError::Config(format!(
                "four stride-2 neck stages restore 16x, so the spatial patch must be 16x16 (got {ph}x{pw})"
            )));
        }
        let mut rng = init_rng(derive_seed(seed, 0x5E6));
        let mut params = ParamStore::new();
        crate::mae::init_encoder_params(&mut params, &enc_cfg, &mut rng)?;

        let (gt, _, _) = enc_cfg.grid();
        let mut cin = gt * enc_cfg.enc_dim;
        for (i, &cout) in head_cfg.neck_channels.iter().enumerate() {
            params.insert(
                format!("head.neck{i}.weight"),
                trunc_normal(&[cin, cout * 4], 0.02, &mut rng),
            )?;
            params.insert(format!("head.neck{i}.bias"), Tensor::zeros(&[cout]))?;
            cin = cout;
        }
        params.insert(
            "head.out.weight",
            trunc_normal(&[cin, head_cfg.classes], 0.02, &mut rng),
        )?;
        params.insert("head.out.bias", Tensor::zeros(&[head_cfg.classes]))?;
        Ok(Self { enc_cfg, head_cfg, params })
    }

    /// Random head over encoder weights copied from a pretrained store.
    pub fn from_pretrained(
        enc_cfg: MaeConfig,
        head_cfg: SegHeadConfig,
        pretrained: &ParamStore<S>,
        seed: u64,
    ) -> Result<Self, FinetuneError> {
        let mut model = Self::new(enc_cfg, head_cfg, seed)?;
        let mut encoder_only = ParamStore::new();
        for (name, entry) in pretrained.iter() {
            if MaeModel::<S>::is_encoder_param(name) {
                encoder_only.insert(name.to_string(), entry.value.clone())?;
            }
        }
        if encoder_only.is_empty() {
            return Err(FinetuneError::Compatibility(
                "pretrained store holds no encoder parameters".into(),
            ));
        }
        model.params.load_values_from(&encoder_only).map_err(|e| {
            FinetuneError::Compatibility(format!("encoder transfer failed: {e}"))
        })?;
        Ok(model)
    }

    /// Which parameters the given regime trains.
    pub fn trainable_filter(regime: FinetuneRegime) -> impl Fn(&str) -> bool {
        move |name: &str| {
            if regime.encoder_trainable {
                true
            } else {
                name.starts_with("head.")
            }
        }
    }
}

/// Full forward pass to per-pixel logits `[B, K, H, W]` (all tokens
/// visible, no masking).
pub fn seg_forward<S: Scalar>(
    model: &SegModel<S>,
    g: &mut Graph<S>,
    gp: &GraphParams,
    x: NodeId,
) -> Result<NodeId, FinetuneError> {
    // encoder trunk, bundled as a decoder-less view of the MAE
    let enc_view = MaeModel { cfg: model.enc_cfg.clone(), params: ParamStore::new() };
    let tokens = enc_view.encode_all(g, gp, x)?; // [B, N, D]

    let (gt, gh, gw) = model.enc_cfg.grid();
    let d = model.enc_cfg.enc_dim;
    let b = g.shape(tokens)[0];
    // concat timesteps along channels: [B, T*D, gh, gw]
    let grid5 = g.reshape(tokens, &[b, gt, gh, gw, d])?;
    let chan_first = g.permute(grid5, &[0, 1, 4, 2, 3])?;
    let mut fm = g.reshape(chan_first, &[b, gt * d, gh, gw])?;

    for i in 0..model.head_cfg.neck_channels.len() {
        let w = gp.get(&format!("head.neck{i}.weight"))?;
        let bias = gp.get(&format!("head.neck{i}.bias"))?;
        fm = transpose_conv2d(g, fm, w, bias)?;
        fm = g.gelu(fm);
    }
    // 1x1 convolution: per-pixel linear over channels
    let shape = g.shape(fm).to_vec();
    let (cin, hh, ww) = (shape[1], shape[2], shape[3]);
    let nhwc = g.permute(fm, &[0, 2, 3, 1])?;
    let rows = g.reshape(nhwc, &[b, hh * ww, cin])?;
    let w = gp.get("head.out.weight")?;
    let bias = gp.get("head.out.bias")?;
    let mixed = g.matmul(rows, w)?;
    let logits_rows = g.add(mixed, bias)?;
    let back = g.reshape(logits_rows, &[b, hh, ww, model.head_cfg.classes])?;
    Ok(g.permute(back, &[0, 3, 1, 2])?)
}

/// One fine-tuning step over a `[B, T, C, H, W]` batch with `[B*H*W]`
/// labels. Returns the loss.
pub fn finetune_seg_step<S: Scalar>(
    model: &mut SegModel<S>,
    x: &Tensor<S>,
    labels: &[u8],
    regime: FinetuneRegime,
    opt: &AdamWConfig,
    lr: f64,
) -> Result<f64, FinetuneError> {
    regime.validate()?;
    let trainable = SegModel::<S>::trainable_filter(regime);
    let mut g = Graph::<S>::new();
    let gp = model.params.stage(&mut g, &trainable);
    let xid = g.constant(x.clone());
    let logits = seg_forward(model, &mut g, &gp, xid)?;
    let loss = match &model.head_cfg.loss {
        SegLoss::WeightedCrossEntropy { class_weights } => weighted_cross_entropy(
            &mut g,
            logits,
            labels,
            class_weights,
            model.head_cfg.ignore_label,
        )?,
        SegLoss::Dice => dice_loss(&mut g, logits, labels, model.head_cfg.ignore_label)?,
    };
    let loss_val = g.value(loss).item()?.to_f64();
    let grads = g.backward(loss)?;
    model.params.collect_grads(&gp, &grads)?;
    model.params.adamw_step(opt, lr, &trainable)?;
    model.params.clear_grads();
    Ok(loss_val)
}

/// Label map by per-pixel argmax; ties resolve to the lowest class index.
pub fn infer_seg<S: Scalar>(
    model: &SegModel<S>,
    x: &Tensor<S>,
) -> Result<Vec<u8>, FinetuneError> {
    let mut g = Graph::<S>::new();
    let gp = model.params.stage(&mut g, |_| false);
    let xid = g.constant(x.clone());
    let logits = seg_forward(model, &mut g, &gp, xid)?;
    let shape = g.shape(logits).to_vec();
    let (b, k, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let data = g.value(logits).data();
    let plane = h * w;
    let mut out = vec![0u8; b * plane];
    for bi in 0..b {
        for p in 0..plane {
            let mut best = 0usize;
            let mut best_v = data[(bi * k) * plane + p];
            for c in 1..k {
                let v = data[(bi * k + c) * plane + p];
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            out[bi * plane + p] = best as u8;
        }
    }
    Ok(out)
}

/// In-memory fine-tuning dataset: standardized sample tensors
/// (`[1, T, C, H, W]` each) and per-pixel label maps.
pub struct SegDataset {
    pub samples: Vec<Tensor<f32>>,
    pub labels: Vec<Vec<u8>>,
}

impl SegDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Stacks `[1, T, C, H, W]` sample tensors into one `[B, T, C, H, W]`.
pub fn stack_samples<S: Scalar>(samples: &[&Tensor<S>]) -> Result<Tensor<S>, FinetuneError> {
    let first = samples
        .first()
        .ok_or_else(|| FinetuneError::Argument("empty sample stack".into()))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * first.numel());
    for s in samples {
        if s.shape() != shape {
            return Err(FinetuneError::Shape(format!(
                "sample shape {:?} differs from {:?}",
                s.shape(),
                shape
            )));
        }
        data.extend_from_slice(s.data());
    }
    let mut out_shape = shape;
    out_shape[0] = samples.len();
    Ok(Tensor::from_vec(&out_shape, data)?)
}

/// One fine-tuning run configuration.
#[derive(Debug, Clone)]
pub struct SegRunConfig {
    pub enc_cfg: MaeConfig,
    pub head_cfg: SegHeadConfig,
    pub regime: FinetuneRegime,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub weight_decay: f64,
}

/// Trains a segmentation model and records the validation mIoU after every
/// epoch. The pretrained store is required by pretrained/frozen regimes.
pub fn train_seg_with_curve(
    run: &SegRunConfig,
    pretrained: Option<&ParamStore<f32>>,
    train: &SegDataset,
    val: &SegDataset,
    seed: u64,
) -> Result<(SegModel<f32>, Vec<f64>), FinetuneError> {
    run.regime.validate()?;
    if train.is_empty() {
        return Err(FinetuneError::Argument("empty training set".into()));
    }
    let mut model = match run.regime.encoder_init {
        EncoderInit::Pretrained => {
            let store = pretrained.ok_or_else(|| {
                FinetuneError::Config("pretrained regime without a pretrained store".into())
            })?;
            SegModel::from_pretrained(run.enc_cfg.clone(), run.head_cfg.clone(), store, seed)?
        }
        EncoderInit::Random => {
            SegModel::new(run.enc_cfg.clone(), run.head_cfg.clone(), seed)?
        }
    };
    let opt = AdamWConfig { weight_decay: run.weight_decay, ..AdamWConfig::default() };
    let steps_per_epoch = train.len().div_ceil(run.batch_size).max(1);
    let schedule = LrSchedule::new(
        run.max_lr,
        (run.epochs * steps_per_epoch) as u64,
        0.1,
    )?;

    let mut curve = Vec::with_capacity(run.epochs);
    let mut step = 0u64;
    for epoch in 0..run.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xC0DE + epoch as u64));
        order.shuffle(&mut rng);
        for chunk in order.chunks(run.batch_size) {
            let refs: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &train.samples[i]).collect();
            let x = stack_samples(&refs)?;
            let mut labels = Vec::new();
            for &i in chunk {
                labels.extend_from_slice(&train.labels[i]);
            }
            finetune_seg_step(&mut model, &x, &labels, run.regime, &opt, schedule.lr_at(step))?;
            step += 1;
        }
        curve.push(eval_miou(&model, val)?);
    }
    Ok((model, curve))
}

/// Validation mIoU of a model over a dataset.
pub fn eval_miou(model: &SegModel<f32>, data: &SegDataset) -> Result<f64, FinetuneError> {
    let mut cm = ConfusionMatrix::new(model.head_cfg.classes);
    for (x, labels) in data.samples.iter().zip(&data.labels) {
        let pred = infer_seg(model, x)?;
        cm.accumulate(&pred, labels, model.head_cfg.ignore_label)?;
    }
    Ok(summarize(&cm)?.mean_iou)
}
