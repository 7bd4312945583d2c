//! Training loop, dataset loss and evaluation.

use aqs_tensor::{AdamConfig, OptimizerState, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_batch, Batch, SqaTriplet};
use crate::error::{AqsError, Result};
use crate::layers::{apply_bn_updates, Ctx, Mode};
use crate::loss::{combined_loss, AuxTarget, LossConfig};
use crate::metrics::{MetricsReport, Tally};
use crate::model::AqsNet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 10, batch_size: 8, lr: 1e-3, beta1: 0.9, beta2: 0.999, adam_eps: 1e-8, seed: 0, loss: LossConfig::default() }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.lr.is_nan() || self.lr <= 0.0 {
            return Err(AqsError::Config("batch_size must be positive and lr > 0".into()));
        }
        self.loss.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    /// Mean over the epoch's batches of the total loss.
    pub loss: f64,
    pub ce: f64,
    pub dice: f64,
    pub aux: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Training-mode loss over the whole set before the first update.
    pub initial_loss: f64,
    pub epochs: Vec<EpochLog>,
    /// Training-mode loss over the whole set after the last update.
    pub final_loss: f64,
    pub frozen_digest: String,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub total: f64,
    pub ce: f64,
    pub dice: f64,
    pub aux: Option<f64>,
}

fn aux_labels<'a>(batch: &'a Batch, cfg: &LossConfig) -> &'a [u8] {
    match cfg.aux_target {
        AuxTarget::QaLabels => &batch.labels,
        AuxTarget::BuildingMask => &batch.gt,
    }
}

/// Records the forward pass and loss for one batch.
fn record<'s>(net: &'s AqsNet, batch: &Batch, cfg: &LossConfig, tape: Tape<f32>) -> Result<(Ctx<'s, f32>, crate::loss::CombinedLoss)> {
    let mut ctx = Ctx::with_tape(&net.store, Mode::Train, tape);
    let image = ctx.tape.input(batch.image.clone());
    let mask = ctx.tape.input(batch.mask.clone());
    let out = net.forward(&mut ctx, image, mask)?;
    let loss = combined_loss(&mut ctx.tape, out.logits, out.aux, &batch.labels, aux_labels(batch, cfg), cfg)?;
    Ok((ctx, loss))
}

fn read_loss(tape: &Tape<f32>, l: &crate::loss::CombinedLoss) -> StepLoss {
    let v = |x| tape.data(x)[0] as f64;
    StepLoss { total: v(l.total), ce: v(l.main.ce), dice: v(l.main.dice), aux: l.aux.map(|a| v(a.total)) }
}

/// One optimizer step; running batch-norm statistics are updated as well.
pub fn train_step(net: &mut AqsNet, opt: &mut OptimizerState, batch: &Batch, cfg: &LossConfig, step: usize) -> Result<StepLoss> {
    let (grads, updates, loss) = {
        let (mut ctx, l) = record(net, batch, cfg, Tape::new())?;
        let loss = read_loss(&ctx.tape, &l);
        if !loss.total.is_finite() {
            let (node, op) = ctx.tape.first_non_finite().unwrap_or((l.total.index(), "loss"));
            return Err(AqsError::NonFiniteLoss { step, op, node });
        }
        let grads = ctx.tape.backward(l.total)?.param_grads(&ctx.tape);
        (grads, ctx.take_bn_updates(), loss)
    };
    opt.step(&mut net.store, &grads)?;
    apply_bn_updates(&mut net.store, &updates, net.config.bn_momentum);
    Ok(loss)
}

/// Mean training-mode loss over `data` in order, without updating anything.
pub fn dataset_loss(net: &AqsNet, data: &[SqaTriplet], batch_size: usize, cfg: &LossConfig) -> Result<f64> {
    if data.is_empty() {
        return Err(AqsError::Usage("dataset is empty".into()));
    }
    let mut sum = 0.0;
    let mut n = 0;
    for chunk in data.chunks(batch_size) {
        let items: Vec<&SqaTriplet> = chunk.iter().collect();
        let batch = make_batch(&items)?;
        let (ctx, l) = record(net, &batch, cfg, Tape::new().without_grad())?;
        sum += read_loss(&ctx.tape, &l).total;
        n += 1;
    }
    Ok(sum / n as f64)
}

/// Adam over shuffled mini-batches; `on_epoch` sees each epoch's log as it
/// completes.
pub fn train(net: &mut AqsNet, data: &[SqaTriplet], cfg: &TrainConfig, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(AqsError::Usage("training set is empty".into()));
    }
    let frozen_before = net.store.digest("vit.");
    let initial_loss = dataset_loss(net, data, cfg.batch_size, &cfg.loss)?;
    let mut opt = OptimizerState::new(cfg.adam(), &net.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut ce, mut dice, mut aux) = (0.0, 0.0, 0.0, 0.0);
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let items: Vec<&SqaTriplet> = chunk.iter().map(|&i| &data[i]).collect();
            let batch = make_batch(&items)?;
            let l = train_step(net, &mut opt, &batch, &cfg.loss, step)?;
            step += 1;
            steps += 1;
            total += l.total;
            ce += l.ce;
            dice += l.dice;
            aux += l.aux.unwrap_or(0.0);
        }
        let n = steps as f64;
        let log = EpochLog {
            epoch,
            steps,
            loss: total / n,
            ce: ce / n,
            dice: dice / n,
            aux: net.neck.aux_head.as_ref().map(|_| aux / n),
        };
        on_epoch(&log);
        epochs.push(log);
    }
    let final_loss = dataset_loss(net, data, cfg.batch_size, &cfg.loss)?;
    let frozen_digest = net.store.digest("vit.");
    debug_assert_eq!(frozen_before, frozen_digest);
    Ok(TrainLog { initial_loss, epochs, final_loss, frozen_digest })
}

/// Anything producing (B, H, W) labels for a batch.
pub trait Predictor {
    fn predict(&self, batch: &Batch) -> Result<Vec<u8>>;
}

impl Predictor for AqsNet {
    fn predict(&self, batch: &Batch) -> Result<Vec<u8>> {
        AqsNet::predict(self, &batch.image, &batch.mask)
    }
}

/// Labels every pixel background.
#[derive(Clone, Copy, Debug, Default)]
pub struct AllBackground;

impl Predictor for AllBackground {
    fn predict(&self, batch: &Batch) -> Result<Vec<u8>> {
        Ok(vec![0; batch.labels.len()])
    }
}

/// Pixel-pooled metrics over `data`.
pub fn evaluate(predictor: &dyn Predictor, data: &[SqaTriplet], batch_size: usize) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(AqsError::Usage("evaluation set is empty".into()));
    }
    let mut tally = Tally::default();
    for chunk in data.chunks(batch_size.max(1)) {
        let items: Vec<&SqaTriplet> = chunk.iter().collect();
        let batch = make_batch(&items)?;
        tally.add(&predictor.predict(&batch)?, &batch.labels)?;
    }
    Ok(tally.report())
}

/// Per-scene labels, in order.
pub fn predict_scenes(net: &AqsNet, data: &[SqaTriplet], batch_size: usize) -> Result<Vec<Vec<u8>>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(batch_size.max(1)) {
        let items: Vec<&SqaTriplet> = chunk.iter().collect();
        let batch = make_batch::<f32>(&items)?;
        let labels = net.predict(&batch.image, &batch.mask)?;
        let hw = labels.len() / chunk.len();
        out.extend(labels.chunks(hw).map(<[u8]>::to_vec));
    }
    Ok(out)
}
