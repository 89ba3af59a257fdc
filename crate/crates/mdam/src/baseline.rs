//! Direct-cascade baseline: one small feedforward network per physical
//! device, each trained only on that device's input/output spectrum pairs,
//! then chained at inference. The chain has no mechanism to correct its own
//! mistakes, so single-step errors compound along the link — which is exactly
//! the failure mode the sequence model is built to avoid.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::domain::{Dataset, DeviceConfig, PowerSpectrum, Topology, FEATURE_LEN};
use crate::error::{MdamError, Result};
use crate::model::{ModelBundle, NormStats, NORMALIZED_SENTINEL};
use crate::rng::{labeled_rng, stream_label};
use crate::training::{clip_gradients, EpochRecord, Phase};

/// Hidden width used for the shipped baseline, matching the capacity of one
/// sequence-model decoder for a fair comparison.
pub const BASELINE_HIDDEN: usize = 100;

/// Single-device feedforward model: normalized spectrum and normalized device
/// features in, next normalized spectrum out.
#[derive(Debug, Clone)]
pub struct DeviceModel {
    pub channels: usize,
    pub hidden: usize,
    /// hidden x (channels + FEATURE_LEN)
    pub w_hidden: Tensor,
    pub b_hidden: Tensor,
    /// channels x hidden
    pub w_out: Tensor,
    pub b_out: Tensor,
}

impl DeviceModel {
    pub fn init(channels: usize, hidden: usize, rng: &mut impl rand::Rng) -> Self {
        let fan_in = channels + FEATURE_LEN;
        let kh = 1.0 / (fan_in as f64).sqrt();
        let ko = 1.0 / (hidden as f64).sqrt();
        Self {
            channels,
            hidden,
            w_hidden: Tensor::uniform(crate::autodiff::Shape::Matrix(hidden, fan_in), kh, rng),
            b_hidden: Tensor::uniform(crate::autodiff::Shape::Vector(hidden), kh, rng),
            w_out: Tensor::uniform(crate::autodiff::Shape::Matrix(channels, hidden), ko, rng),
            b_out: Tensor::uniform(crate::autodiff::Shape::Vector(channels), ko, rng),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.w_hidden, &self.b_hidden, &self.w_out, &self.b_out]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [
            &mut self.w_hidden,
            &mut self.b_hidden,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }

    /// Plain single-step inference on normalized data.
    pub fn forward(&self, spectrum: &[f64], features: &[f64]) -> Vec<f64> {
        let fan_in = self.channels + FEATURE_LEN;
        debug_assert_eq!(spectrum.len(), self.channels);
        debug_assert_eq!(features.len(), FEATURE_LEN);
        let mut hid = vec![0.0; self.hidden];
        for (i, h) in hid.iter_mut().enumerate() {
            let row = &self.w_hidden.data[i * fan_in..(i + 1) * fan_in];
            let mut acc = self.b_hidden.data[i];
            for (w, x) in row.iter().zip(spectrum.iter().chain(features)) {
                acc += w * x;
            }
            *h = acc.tanh();
        }
        let mut out = vec![0.0; self.channels];
        for (c, o) in out.iter_mut().enumerate() {
            let row = &self.w_out.data[c * self.hidden..(c + 1) * self.hidden];
            *o = self.b_out.data[c] + row.iter().zip(&hid).map(|(w, h)| w * h).sum::<f64>();
        }
        out
    }

    fn bind(&self, tape: &mut Tape) -> BoundDeviceModel {
        BoundDeviceModel {
            w_hidden: tape.param(&self.w_hidden),
            b_hidden: tape.param(&self.b_hidden),
            w_out: tape.param(&self.w_out),
            b_out: tape.param(&self.b_out),
        }
    }
}

struct BoundDeviceModel {
    w_hidden: Var,
    b_hidden: Var,
    w_out: Var,
    b_out: Var,
}

impl BoundDeviceModel {
    fn params(&self) -> [Var; 4] {
        [self.w_hidden, self.b_hidden, self.w_out, self.b_out]
    }

    fn forward(&self, tape: &mut Tape, spectrum: Var, features: Var) -> Result<Var> {
        let x = tape.concat(&[spectrum, features])?;
        let pre = tape.matmul(self.w_hidden, x)?;
        let pre = tape.add(pre, self.b_hidden)?;
        let hid = tape.tanh(pre)?;
        let out = tape.matmul(self.w_out, hid)?;
        tape.add(out, self.b_out)
    }
}

/// Training data for one device: normalized (input, target) spectrum pairs
/// plus each pair's loading mask.
#[derive(Debug, Clone)]
pub struct DevicePairs {
    pub device: DeviceConfig,
    pub inputs: Vec<Tensor>,
    pub targets: Vec<Tensor>,
    pub masks: Vec<Vec<bool>>,
}

impl DevicePairs {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Pull the (P_n, P_n+1) pairs for component `index` out of a sequence
/// dataset, normalized and sentinel-masked exactly as the sequence model
/// sees them.
pub fn extract_pairs(
    dataset: &Dataset,
    topo: &Topology,
    index: usize,
    norm: &NormStats,
) -> Result<DevicePairs> {
    let device = topo.components.get(index).ok_or_else(|| {
        MdamError::Config(format!(
            "component index {index} out of range for {}-component topology",
            topo.len()
        ))
    })?;
    let mut pairs = DevicePairs {
        device: device.clone(),
        inputs: Vec::with_capacity(dataset.sequences.len()),
        targets: Vec::with_capacity(dataset.sequences.len()),
        masks: Vec::with_capacity(dataset.sequences.len()),
    };
    for (si, seq) in dataset.sequences.iter().enumerate() {
        crate::domain::validate_sequence(seq, topo).map_err(|e| MdamError::SequenceMismatch {
            index: si,
            detail: e.to_string(),
        })?;
        pairs.inputs.push(norm.normalize_spectrum(&seq.spectra[index]));
        pairs
            .targets
            .push(norm.normalize_spectrum(&seq.spectra[index + 1]));
        pairs.masks.push(seq.mask().to_vec());
    }
    Ok(pairs)
}

/// Schedule for single-step device-model training. Same knobs as the
/// sequence trainer minus the phase split, which has no meaning when every
/// example is one step.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DeviceTrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub decay_every: usize,
    pub decay_gamma: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DeviceTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3000,
            lr0: 1e-3,
            decay_every: 1000,
            decay_gamma: 0.9,
            clip_norm: 1.0,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl DeviceTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr0.is_finite() || self.lr0 < 0.0 {
            return Err(MdamError::Config(format!(
                "lr0 must be finite and nonnegative, got {}",
                self.lr0
            )));
        }
        if !(self.decay_gamma > 0.0 && self.decay_gamma <= 1.0) {
            return Err(MdamError::Config(format!(
                "decay_gamma must be in (0, 1], got {}",
                self.decay_gamma
            )));
        }
        if self.decay_every == 0 || self.batch_size == 0 {
            return Err(MdamError::Config(
                "decay_every and batch_size must be positive".into(),
            ));
        }
        if !(self.clip_norm > 0.0) {
            return Err(MdamError::Config(format!(
                "clip_norm must be positive, got {}",
                self.clip_norm
            )));
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.decay_gamma.powi((epoch / self.decay_every) as i32)
    }
}

/// SGD on the masked single-step MAE of one device's pairs.
pub fn train_device_model(
    pairs: &DevicePairs,
    norm: &NormStats,
    cfg: &DeviceTrainConfig,
) -> Result<(DeviceModel, Vec<EpochRecord>)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(MdamError::Config(
            "device training needs at least one pair".into(),
        ));
    }
    let channels = pairs.inputs[0].len();
    for (i, (inp, tgt)) in pairs.inputs.iter().zip(&pairs.targets).enumerate() {
        if inp.len() != channels || tgt.len() != channels || pairs.masks[i].len() != channels {
            return Err(MdamError::SequenceMismatch {
                index: i,
                detail: "pair shapes disagree".into(),
            });
        }
    }

    let mut init_rng = labeled_rng(cfg.seed, "baseline-init", &[]);
    let mut model = DeviceModel::init(channels, BASELINE_HIDDEN, &mut init_rng);
    let features = norm.normalize_features(&pairs.device);
    let log = train_device_model_inner(&mut model, pairs, &features, cfg)?;
    Ok((model, log))
}

fn train_device_model_inner(
    model: &mut DeviceModel,
    pairs: &DevicePairs,
    features: &Tensor,
    cfg: &DeviceTrainConfig,
) -> Result<Vec<EpochRecord>> {
    use rand::seq::SliceRandom;

    let n = pairs.len();
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = labeled_rng(cfg.seed, "baseline-shuffle", &[epoch as u64]);
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        let mut norm_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let shapes: Vec<_> = model.tensors().iter().map(|t| t.shape).collect();
            let mut accum: Vec<Tensor> = shapes.iter().map(|&s| Tensor::zeros(s)).collect();
            for &pi in batch {
                let mut tape = Tape::new();
                let bound = model.bind(&mut tape);
                let x = tape.constant(&pairs.inputs[pi]);
                let f = tape.constant(features);
                let pred = bound.forward(&mut tape, x, f)?;
                let target = tape.constant(&pairs.targets[pi]);
                let loss = tape.masked_mae(pred, target, &pairs.masks[pi])?;
                let loss_val = tape.value(loss)[0];
                if !loss_val.is_finite() {
                    return Err(MdamError::Diverged {
                        epoch,
                        phase: Phase::TeacherForced.as_str().to_string(),
                        loss: loss_val,
                    });
                }
                epoch_loss += loss_val;
                let params = bound.params();
                let grads = tape.backward(loss)?;
                for (acc, &p) in accum.iter_mut().zip(&params) {
                    if let Some(g) = grads.try_get(p) {
                        for (a, v) in acc.data.iter_mut().zip(&g.data) {
                            *a += v;
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for acc in &mut accum {
                for v in &mut acc.data {
                    *v *= scale;
                }
            }
            let pre_clip = clip_gradients(&mut accum, cfg.clip_norm);
            if !pre_clip.is_finite() {
                return Err(MdamError::Diverged {
                    epoch,
                    phase: Phase::TeacherForced.as_str().to_string(),
                    loss: pre_clip,
                });
            }
            norm_sum += pre_clip;
            batches += 1;
            if lr > 0.0 {
                for (t, g) in model.tensors_mut().into_iter().zip(&accum) {
                    for (w, gv) in t.data.iter_mut().zip(&g.data) {
                        *w -= lr * gv;
                    }
                }
            }
        }
        let rec = EpochRecord {
            epoch,
            phase: Phase::TeacherForced,
            lr,
            loss: epoch_loss / n as f64,
            grad_norm: norm_sum / batches.max(1) as f64,
        };
        log::debug!(
            "device '{}' epoch {} lr {:.3e} loss {:.6}",
            pairs.device.device_id,
            rec.epoch,
            rec.lr,
            rec.loss
        );
        records.push(rec);
    }
    Ok(records)
}

/// The full baseline: one trained model per device, plus the normalization
/// stats they share.
#[derive(Debug, Clone)]
pub struct CascadeModel {
    pub channels: usize,
    pub models: BTreeMap<String, DeviceModel>,
    pub norm: NormStats,
}

/// Train one model per device of `topo` on that device's pairs from
/// `dataset`. Each device draws its own seed stream, so per-device training
/// is order-independent.
pub fn train_cascade(
    dataset: &Dataset,
    topo: &Topology,
    cfg: &DeviceTrainConfig,
) -> Result<(CascadeModel, Vec<(String, Vec<EpochRecord>)>)> {
    cfg.validate()?;
    let norm = NormStats::compute(dataset)?;
    let mut models = BTreeMap::new();
    let mut logs = Vec::with_capacity(topo.len());
    for (i, dev) in topo.components.iter().enumerate() {
        let pairs = extract_pairs(dataset, topo, i, &norm)?;
        let dev_cfg = DeviceTrainConfig {
            seed: stream_label("baseline-device", &[cfg.seed, i as u64]),
            ..cfg.clone()
        };
        let (model, log) = train_device_model(&pairs, &norm, &dev_cfg)?;
        models.insert(dev.device_id.clone(), model);
        logs.push((dev.device_id.clone(), log));
    }
    Ok((
        CascadeModel {
            channels: topo.grid.num_channels,
            models,
            norm,
        },
        logs,
    ))
}

/// Chain the per-device models: each model's (sentinel-masked) output becomes
/// the next model's input. Returns one denormalized spectrum per component.
pub fn cascade_predict(
    cascade: &CascadeModel,
    launch: &PowerSpectrum,
    topo: &Topology,
) -> Result<Vec<PowerSpectrum>> {
    if launch.len() != cascade.channels || topo.grid.num_channels != cascade.channels {
        return Err(MdamError::Config(format!(
            "channel mismatch: launch {} / topology {} / cascade {}",
            launch.len(),
            topo.grid.num_channels,
            cascade.channels
        )));
    }
    let mask = launch.loaded.clone();
    let mut x = cascade.norm.normalize_spectrum(launch).data;
    let mut out = Vec::with_capacity(topo.len());
    for dev in &topo.components {
        let model = cascade
            .models
            .get(&dev.device_id)
            .ok_or_else(|| MdamError::MissingDecoder(dev.device_id.clone()))?;
        let features = cascade.norm.normalize_features(dev);
        let mut y = model.forward(&x, &features.data);
        for (v, &on) in y.iter_mut().zip(&mask) {
            if !on {
                *v = NORMALIZED_SENTINEL;
            }
        }
        out.push(cascade.norm.denormalize(&y, &mask));
        x = y;
    }
    Ok(out)
}

/// Mean absolute dB error of each device model on *true* inputs (no
/// chaining), pooled over loaded channels of every sequence. One value per
/// component position.
pub fn single_step_maes(cascade: &CascadeModel, dataset: &Dataset, topo: &Topology) -> Result<Vec<f64>> {
    let mut sums = vec![0.0; topo.len()];
    let mut counts = vec![0usize; topo.len()];
    for seq in &dataset.sequences {
        crate::domain::validate_sequence(seq, topo)?;
        for (i, dev) in topo.components.iter().enumerate() {
            let model = cascade
                .models
                .get(&dev.device_id)
                .ok_or_else(|| MdamError::MissingDecoder(dev.device_id.clone()))?;
            let features = cascade.norm.normalize_features(dev);
            let x = cascade.norm.normalize_spectrum(&seq.spectra[i]);
            let y = model.forward(&x.data, &features.data);
            let denorm = cascade.norm.denormalize(&y, seq.mask());
            for (ch, &on) in seq.mask().iter().enumerate() {
                if on {
                    sums[i] += (denorm.powers_dbm[ch] - seq.spectra[i + 1].powers_dbm[ch]).abs();
                    counts[i] += 1;
                }
            }
        }
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(MdamError::EmptyPool("no loaded channels in evaluation pool".into()));
    }
    Ok(sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| s / c as f64)
        .collect())
}

/// Mean absolute dB error of the *chained* prediction at each component
/// position, pooled over loaded channels of every sequence.
pub fn cascade_step_maes(cascade: &CascadeModel, dataset: &Dataset, topo: &Topology) -> Result<Vec<f64>> {
    let mut sums = vec![0.0; topo.len()];
    let mut counts = vec![0usize; topo.len()];
    for seq in &dataset.sequences {
        crate::domain::validate_sequence(seq, topo)?;
        let preds = cascade_predict(cascade, seq.launch(), topo)?;
        for (i, pred) in preds.iter().enumerate() {
            for (ch, &on) in seq.mask().iter().enumerate() {
                if on {
                    sums[i] += (pred.powers_dbm[ch] - seq.spectra[i + 1].powers_dbm[ch]).abs();
                    counts[i] += 1;
                }
            }
        }
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(MdamError::EmptyPool("no loaded channels in evaluation pool".into()));
    }
    Ok(sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| s / c as f64)
        .collect())
}

/// Convenience mirror of [`cascade_step_maes`] for the sequence model, so the
/// two approaches can be compared with identical pooling.
pub fn bundle_step_maes(bundle: &ModelBundle, dataset: &Dataset, topo: &Topology) -> Result<Vec<f64>> {
    let mut sums = vec![0.0; topo.len()];
    let mut counts = vec![0usize; topo.len()];
    for seq in &dataset.sequences {
        crate::domain::validate_sequence(seq, topo)?;
        let preds = bundle.forward_autoregressive(seq.launch(), topo)?;
        for (i, pred) in preds.iter().enumerate() {
            let denorm = bundle.norm.denormalize(&pred.data, seq.mask());
            for (ch, &on) in seq.mask().iter().enumerate() {
                if on {
                    sums[i] += (denorm.powers_dbm[ch] - seq.spectra[i + 1].powers_dbm[ch]).abs();
                    counts[i] += 1;
                }
            }
        }
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(MdamError::EmptyPool("no loaded channels in evaluation pool".into()));
    }
    Ok(sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| s / c as f64)
        .collect())
}
