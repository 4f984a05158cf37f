//! Dice metric and loss, Adam, the training loop and per-volume evaluation.

use std::fmt;

use crate::error::{Error, Result};
use crate::numerics::{Real, Rng, Tensor};
use crate::unet::{backward, forward, predict, UNetConfig, UNetGrads, UNetParams};
use crate::volume_io::Dims;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Added to numerator and denominator of the soft Dice ratio.
    pub smooth: f64,
    /// Probability at which predictions are binarized.
    pub threshold: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 40,
            batch_size: 32,
            adam: AdamConfig::default(),
            smooth: 1.0,
            threshold: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Phantom-scale schedule: ten epochs of batch 8.
    pub fn desk() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidParam(
                "epochs and batch size must be at least 1".into(),
            ));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidParam(format!(
                "threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        if !(self.smooth >= 0.0) {
            return Err(Error::InvalidParam(format!(
                "smooth must be >= 0, got {}",
                self.smooth
            )));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::InvalidParam(
                "Adam needs betas in [0, 1) and eps > 0".into(),
            ));
        }
        Ok(())
    }
}

fn check_binary(name: &str, m: &[u8]) -> Result<()> {
    if m.iter().any(|&v| v > 1) {
        return Err(Error::InvalidParam(format!("{name} mask is not binary")));
    }
    Ok(())
}

/// `2|X ∩ Y| / (|X| + |Y|)`; two empty masks score 1.
pub fn dice_coefficient(pred: &[u8], gt: &[u8]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape(&[pred.len()], &[gt.len()]));
    }
    check_binary("predicted", pred)?;
    check_binary("ground-truth", gt)?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p & g) as usize;
        total += (p + g) as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// `1 - (2 Σpg + s) / (Σp + Σg + s)` and its gradient w.r.t. `probs`.
pub fn soft_dice_loss<T: Real>(
    probs: &Tensor<T>,
    gt: &Tensor<T>,
    smooth: f64,
) -> Result<(T, Tensor<T>)> {
    if probs.shape() != gt.shape() {
        return Err(Error::shape(probs.shape(), gt.shape()));
    }
    let s = T::from_f64_lossy(smooth);
    let two = T::one() + T::one();
    let (mut inter, mut sp, mut sg) = (T::zero(), T::zero(), T::zero());
    for (&p, &g) in probs.data().iter().zip(gt.data()) {
        inter = inter + p * g;
        sp = sp + p;
        sg = sg + g;
    }
    let num = two * inter + s;
    let den = sp + sg + s;
    if !(den > T::zero()) {
        return Err(Error::InvalidParam(
            "soft Dice is undefined for empty inputs without smoothing".into(),
        ));
    }
    let loss = T::one() - num / den;
    let den2 = den * den;
    let grad = gt.map(|g| (num - two * g * den) / den2);
    Ok((loss, grad))
}

/// Adam moments for a list of tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[Vec<T>]) -> Self {
        let zeros: Vec<Vec<T>> = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        Self {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update. Nothing is modified when a gradient
/// is non-finite; the error names the offending tensor index.
pub fn adam_step<T: Real>(
    params: &mut [Vec<T>],
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    let lens = |v: &[Vec<T>]| v.iter().map(Vec::len).collect::<Vec<_>>();
    if lens(params) != lens(grads) || lens(params) != lens(&state.m) {
        return Err(Error::shape(&lens(params), &lens(grads)));
    }
    if let Some(i) = grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite(format!("gradient of tensor {i}")));
    }
    state.t += 1;
    let t = state.t as i32;
    let a = &cfg.adam;
    let b1 = T::from_f64_lossy(a.beta1);
    let b2 = T::from_f64_lossy(a.beta2);
    let c1 = T::from_f64_lossy(1.0 - a.beta1.powi(t));
    let c2 = T::from_f64_lossy(1.0 - a.beta2.powi(t));
    let lr = T::from_f64_lossy(cfg.learning_rate);
    let eps = T::from_f64_lossy(a.eps);
    let one = T::one();
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (one - b1) * g[i];
            v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

fn step_network<T: Real>(
    params: &mut UNetParams<T>,
    grads: &UNetGrads<T>,
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    let names: Vec<String> = params.specs().iter().map(|s| s.name.clone()).collect();
    adam_step(params.tensors_mut(), &grads.tensors, state, cfg).map_err(|e| match e {
        Error::NonFinite(_) => {
            let i = grads
                .tensors
                .iter()
                .position(|g| g.iter().any(|v| !v.is_finite()))
                .unwrap_or(0);
            let part = if i % 2 == 0 { "weight" } else { "bias" };
            Error::NonFinite(format!("gradient of {} {part}", names[i / 2]))
        }
        other => other,
    })
}

/// Preprocessed volume with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub dims: Dims,
    pub image: Vec<f64>,
    pub mask: Vec<u8>,
}

impl Sample {
    pub fn new(id: impl Into<String>, dims: Dims, image: Vec<f64>, mask: Vec<u8>) -> Result<Self> {
        if image.len() != dims.len() || mask.len() != dims.len() {
            return Err(Error::shape(&[dims.len()], &[image.len(), mask.len()]));
        }
        check_binary("ground-truth", &mask)?;
        Ok(Self {
            id: id.into(),
            dims,
            image,
            mask,
        })
    }

    fn slice_tensor<T: Real>(&self, zs: &[usize]) -> (Vec<T>, Vec<T>) {
        let n = self.dims.slice_len();
        let mut x = Vec::with_capacity(zs.len() * n);
        let mut y = Vec::with_capacity(zs.len() * n);
        for &z in zs {
            x.extend(
                self.image[z * n..(z + 1) * n]
                    .iter()
                    .map(|&v| T::from_f64_lossy(v)),
            );
            y.extend(
                self.mask[z * n..(z + 1) * n]
                    .iter()
                    .map(|&v| T::from_f64_lossy(v as f64)),
            );
        }
        (x, y)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Anything that maps a volume to per-voxel foreground probabilities.
pub trait Predictor {
    fn probabilities(&self, sample: &Sample) -> Result<Vec<f64>>;
}

impl<T: Real> Predictor for UNetParams<T> {
    fn probabilities(&self, sample: &Sample) -> Result<Vec<f64>> {
        let d = sample.dims;
        let zs: Vec<usize> = (0..d.depth).collect();
        let (x, _) = sample.slice_tensor::<T>(&zs);
        let batch = Tensor::new(vec![d.depth, 1, d.height, d.width], x)?;
        Ok(predict(self, &batch)?
            .data()
            .iter()
            .map(|v| v.as_f64())
            .collect())
    }
}

/// Dice of the binarized prediction for each volume.
pub fn volume_dice(model: &dyn Predictor, samples: &[Sample], threshold: f64) -> Result<Vec<f64>> {
    samples
        .iter()
        .map(|s| {
            let pred: Vec<u8> = model
                .probabilities(s)?
                .iter()
                .map(|&p| u8::from(p >= threshold))
                .collect();
            dice_coefficient(&pred, &s.mask)
        })
        .collect()
}

/// Mean of the per-volume Dice scores.
pub fn evaluate(model: &dyn Predictor, samples: &[Sample], threshold: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("no volumes to evaluate".into()));
    }
    let scores = volume_dice(model, samples, threshold)?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    /// Mean soft Dice loss over the epoch's batches.
    pub train_loss: f64,
    pub train_dice: f64,
    pub val_dice: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,train_dice,val_dice";
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{:.6},{:.6},{:.6}",
            self.epoch, self.train_loss, self.train_dice, self.val_dice
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    /// Parameters after the epoch with the highest validation Dice.
    pub params: UNetParams<T>,
    pub best_epoch: usize,
    pub logs: Vec<EpochLog>,
}

const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;

/// Mini-batch training on every axial slice of the training volumes.
pub fn train<T: Real>(
    cfg: &TrainConfig,
    net: &UNetConfig,
    data: &Dataset,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    net.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::EmptyDataset(
            "training needs train and validation volumes".into(),
        ));
    }
    for s in data.train.iter().chain(&data.val) {
        net.check_spatial(s.dims.height, s.dims.width)?;
    }
    let slices: Vec<(usize, usize)> = data
        .train
        .iter()
        .enumerate()
        .flat_map(|(v, s)| (0..s.dims.depth).map(move |z| (v, z)))
        .collect();

    let root = Rng::new(cfg.seed);
    let mut params = UNetParams::<T>::init(net, &mut root.derive(INIT_STREAM))?;
    let mut state = AdamState::new(params.tensors());
    let mut shuffler = root.derive(SHUFFLE_STREAM);
    let mut best: Option<(f64, usize, UNetParams<T>)> = None;
    let mut logs = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let mut order = slices.clone();
        shuffler.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (batch, gt) = assemble::<T>(&data.train, chunk)?;
            let (probs, cache) = forward(&params, &batch)?;
            let (loss, d_probs) = soft_dice_loss(&probs, &gt, cfg.smooth)?;
            let grads = backward(&params, &cache, &d_probs)?;
            step_network(&mut params, &grads, &mut state, cfg)?;
            loss_sum += loss.as_f64();
            batches += 1;
        }
        let log = EpochLog {
            epoch,
            train_loss: loss_sum / batches as f64,
            train_dice: evaluate(&params, &data.train, cfg.threshold)?,
            val_dice: evaluate(&params, &data.val, cfg.threshold)?,
        };
        on_epoch(&log);
        logs.push(log);
        if best
            .as_ref()
            .map_or(true, |(score, _, _)| log.val_dice > *score)
        {
            best = Some((log.val_dice, epoch, params.clone()));
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        params,
        best_epoch,
        logs,
    })
}

fn assemble<T: Real>(
    volumes: &[Sample],
    chunk: &[(usize, usize)],
) -> Result<(Tensor<T>, Tensor<T>)> {
    let d = volumes[chunk[0].0].dims;
    let mut x = Vec::new();
    let mut y = Vec::new();
    for &(v, z) in chunk {
        let s = &volumes[v];
        if (s.dims.height, s.dims.width) != (d.height, d.width) {
            return Err(Error::shape(
                &[d.height, d.width],
                &[s.dims.height, s.dims.width],
            ));
        }
        let (xs, ys) = s.slice_tensor::<T>(&[z]);
        x.extend(xs);
        y.extend(ys);
    }
    let shape = vec![chunk.len(), 1, d.height, d.width];
    Ok((Tensor::new(shape.clone(), x)?, Tensor::new(shape, y)?))
}
