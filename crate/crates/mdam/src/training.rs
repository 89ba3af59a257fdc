//! Two-phase SGD training: teacher forcing first, then autoregression, with
//! exponential learning-rate decay, global-norm gradient clipping, and a
//! weighted masked-MAE objective over all component steps.
//!
//! The loop is deliberately single-threaded: gradients accumulate in the
//! canonical parameter order, so two runs with the same seed match bit for
//! bit.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::domain::{Dataset, Topology};
use crate::error::{MdamError, Result};
use crate::model::{
    forward_pass, BoundModel, FeedMode, ForwardOptions, ModelBundle, ModelConfig, NormStats,
    ParamKey, TrainScope, bundle_tensor_mut,
};
use crate::rng::labeled_rng;

/// Schedule and optimizer settings. Defaults reproduce the base-training
/// recipe; fine-tuning swaps in its own via [`TrainConfig::fine_tune`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub tf_epochs: usize,
    pub ar_epochs: usize,
    pub lr0: f64,
    pub decay_every: usize,
    pub decay_gamma: f64,
    pub clip_norm: f64,
    /// Per-step loss weights; `None` means uniform.
    pub component_weights: Option<Vec<f64>>,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tf_epochs: 3000,
            ar_epochs: 9000,
            lr0: 1e-3,
            decay_every: 1000,
            decay_gamma: 0.9,
            clip_norm: 1.0,
            component_weights: None,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Transfer-phase defaults: strongly reduced rate and tighter clipping.
    pub fn fine_tune() -> Self {
        Self {
            lr0: 1e-5,
            clip_norm: 0.5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 >= 0.0) || !self.lr0.is_finite() {
            return Err(MdamError::Config(format!("lr0 {} must be finite and >= 0", self.lr0)));
        }
        if !(self.decay_gamma > 0.0 && self.decay_gamma <= 1.0) {
            return Err(MdamError::Config(format!(
                "decay_gamma {} outside (0, 1]",
                self.decay_gamma
            )));
        }
        if self.decay_every == 0 {
            return Err(MdamError::Config("decay_every must be positive".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(MdamError::Config(format!(
                "clip_norm {} must be positive",
                self.clip_norm
            )));
        }
        if self.batch_size == 0 {
            return Err(MdamError::Config("batch_size must be positive".into()));
        }
        if let Some(w) = &self.component_weights {
            if w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
                return Err(MdamError::Config(
                    "component weights must be finite and non-negative".into(),
                ));
            }
            if w.iter().sum::<f64>() <= 0.0 {
                return Err(MdamError::Config("component weights sum to zero".into()));
            }
        }
        Ok(())
    }
}

/// Exponential step decay: `lr0 · gamma^floor(epoch / decay_every)`.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr0 * cfg.decay_gamma.powi((epoch / cfg.decay_every) as i32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    TeacherForced,
    Autoregressive,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::TeacherForced => "tf",
            Phase::Autoregressive => "ar",
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

pub fn log_to_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,phase,lr,loss,grad_norm\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch,
            r.phase.as_str(),
            r.lr,
            r.loss,
            r.grad_norm
        ));
    }
    out
}

/// Build the weighted sequence objective on the tape:
/// `Σ w_n · masked_mae(pred_n, target_n) / Σ w_n`.
pub fn sequence_loss(
    tape: &mut Tape,
    preds: &[Var],
    targets: &[Tensor],
    mask: &[bool],
    weights: Option<&[f64]>,
) -> Result<Var> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(MdamError::SequenceMismatch {
            index: preds.len(),
            detail: format!(
                "loss needs matching prediction/target lists, got {} vs {}",
                preds.len(),
                targets.len()
            ),
        });
    }
    if let Some(w) = weights {
        if w.len() != preds.len() {
            return Err(MdamError::SequenceMismatch {
                index: w.len(),
                detail: format!("{} weights for {} steps", w.len(), preds.len()),
            });
        }
    }
    let wsum: f64 = match weights {
        Some(w) => w.iter().sum(),
        None => preds.len() as f64,
    };
    if wsum <= 0.0 {
        return Err(MdamError::Config("loss weights sum to zero".into()));
    }
    let mut total: Option<Var> = None;
    for (n, (&pred, target)) in preds.iter().zip(targets).enumerate() {
        let w = weights.map_or(1.0, |w| w[n]);
        if w == 0.0 {
            continue;
        }
        let t = tape.constant(target);
        let mae = tape.masked_mae(pred, t, mask)?;
        let term = tape.mul_const(mae, w)?;
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let total = total.ok_or_else(|| MdamError::Config("all loss weights are zero".into()))?;
    tape.mul_const(total, 1.0 / wsum)
}

/// Global-norm clipping in place. Returns the pre-clip norm.
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| &g.data)
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in &mut g.data {
                *v *= scale;
            }
        }
    }
    norm
}

/// Run the two-phase schedule over `bundle` in place, returning the per-epoch
/// log. `scope` controls which parameter groups update (fine-tuning may
/// freeze the encoder); base training passes [`TrainScope::all`].
pub fn train_loop(
    bundle: &mut ModelBundle,
    dataset: &Dataset,
    topo: &Topology,
    cfg: &TrainConfig,
    scope: TrainScope,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if dataset.sequences.is_empty() {
        return Err(MdamError::Config("training dataset is empty".into()));
    }
    for (i, seq) in dataset.sequences.iter().enumerate() {
        crate::domain::validate_sequence(seq, topo).map_err(|e| MdamError::SequenceMismatch {
            index: i,
            detail: e.to_string(),
        })?;
    }
    if let Some(w) = &cfg.component_weights {
        if w.len() != topo.len() {
            return Err(MdamError::Config(format!(
                "{} component weights for a {}-component topology",
                w.len(),
                topo.len()
            )));
        }
    }

    // canonical parameter order and shapes, shared by every epoch
    let (keys, shapes): (Vec<ParamKey>, Vec<crate::autodiff::Shape>) = {
        let mut scratch = Tape::new();
        let bound = BoundModel::bind(&mut scratch, bundle, topo, scope)?;
        let shapes = bound.param_vars().iter().map(|&v| scratch.shape(v)).collect();
        (bound.param_keys().to_vec(), shapes)
    };
    if keys.is_empty() && cfg.tf_epochs + cfg.ar_epochs > 0 {
        return Err(MdamError::Config(
            "training scope leaves no trainable parameters".into(),
        ));
    }

    // normalized views of every sequence, computed once
    let normalized: Vec<Vec<Tensor>> = dataset
        .sequences
        .iter()
        .map(|seq| {
            seq.spectra
                .iter()
                .map(|s| bundle.norm.normalize_spectrum(s))
                .collect()
        })
        .collect();

    let total_epochs = cfg.tf_epochs + cfg.ar_epochs;
    let mut records = Vec::with_capacity(total_epochs);
    let mut order: Vec<usize> = (0..dataset.sequences.len()).collect();

    for epoch in 0..total_epochs {
        let phase = if epoch < cfg.tf_epochs {
            Phase::TeacherForced
        } else {
            Phase::Autoregressive
        };
        let mode = match phase {
            Phase::TeacherForced => FeedMode::TeacherForced,
            Phase::Autoregressive => FeedMode::Autoregressive,
        };
        let lr = lr_at_epoch(cfg, epoch);

        let mut shuffle_rng = labeled_rng(cfg.seed, "shuffle", &[epoch as u64]);
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        let mut norm_sum = 0.0;
        let mut batch_count = 0usize;

        for batch in order.chunks(cfg.batch_size) {
            let mut accum: Vec<Tensor> = Vec::new();
            let mut batch_loss = 0.0;
            for &si in batch {
                let seq = &dataset.sequences[si];
                let inputs = &normalized[si];
                let mut tape = Tape::new();
                let bound = BoundModel::bind(&mut tape, bundle, topo, scope)?;
                let mut dropout_rng =
                    labeled_rng(cfg.seed, "dropout", &[epoch as u64, si as u64]);
                let trace = forward_pass(
                    &mut tape,
                    &bound,
                    inputs,
                    seq.mask(),
                    mode,
                    &ForwardOptions { training: true },
                    &mut dropout_rng,
                    None,
                )?;
                let loss = sequence_loss(
                    &mut tape,
                    &trace.predictions,
                    &inputs[1..],
                    seq.mask(),
                    cfg.component_weights.as_deref(),
                )?;
                let loss_val = tape.value(loss)[0];
                if !loss_val.is_finite() {
                    return Err(MdamError::Diverged {
                        epoch,
                        phase: phase.as_str().to_string(),
                        loss: loss_val,
                    });
                }
                batch_loss += loss_val;

                let param_vars: Vec<Var> = bound.param_vars().to_vec();
                let grads = tape.backward(loss)?;
                if accum.is_empty() {
                    accum = shapes.iter().map(|&s| Tensor::zeros(s)).collect();
                }
                for (acc, &v) in accum.iter_mut().zip(&param_vars) {
                    if let Some(g) = grads.try_get(v) {
                        for (a, b) in acc.data.iter_mut().zip(&g.data) {
                            *a += b;
                        }
                    }
                }
            }

            let inv = 1.0 / batch.len() as f64;
            for g in &mut accum {
                for v in &mut g.data {
                    *v *= inv;
                }
            }
            let pre_norm = clip_gradients(&mut accum, cfg.clip_norm);
            if !pre_norm.is_finite() {
                return Err(MdamError::Diverged {
                    epoch,
                    phase: phase.as_str().to_string(),
                    loss: pre_norm,
                });
            }
            norm_sum += pre_norm;
            batch_count += 1;
            epoch_loss += batch_loss;

            if lr > 0.0 {
                for (key, g) in keys.iter().zip(&accum) {
                    let t = bundle_tensor_mut(bundle, key)?;
                    for (p, gv) in t.data.iter_mut().zip(&g.data) {
                        *p -= lr * gv;
                    }
                }
            }
        }

        let rec = EpochRecord {
            epoch,
            phase,
            lr,
            loss: epoch_loss / dataset.sequences.len() as f64,
            grad_norm: norm_sum / batch_count.max(1) as f64,
        };
        log::debug!(
            "epoch {} [{}] lr {:.3e} loss {:.6} grad {:.4}",
            rec.epoch,
            rec.phase.as_str(),
            rec.lr,
            rec.loss,
            rec.grad_norm
        );
        records.push(rec);
    }

    Ok(records)
}

/// Initialize a fresh bundle for `topo` and run the full two-phase schedule.
pub fn train_base(
    dataset: &Dataset,
    topo: &Topology,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    init_seed: u64,
) -> Result<(ModelBundle, Vec<EpochRecord>)> {
    let norm = NormStats::compute(dataset)?;
    let mut bundle = ModelBundle::init(model_cfg, &topo.kinds(), norm, init_seed)?;
    let log = train_loop(&mut bundle, dataset, topo, cfg, TrainScope::all())?;
    Ok((bundle, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Shape;
    use crate::domain::{ComponentKind, DeviceConfig, LoadingLabel, PowerSpectrum};
    use crate::linksim::{generate_dataset, PhysicsConfig};
    use crate::rng::stream_rng;

    fn tiny_topology() -> Topology {
        let grid = crate::domain::ChannelGrid::new(6, 50.0, 191.35).unwrap();
        let components = vec![
            DeviceConfig::edfa(ComponentKind::Booster, "b0", 6.0, 0.0).unwrap(),
            DeviceConfig::span("s0", 30.0, 0.2).unwrap(),
            DeviceConfig::edfa(ComponentKind::Preamp, "p0", 6.0, 0.0).unwrap(),
        ];
        Topology::new("tiny", components, grid).unwrap()
    }

    fn tiny_dataset(topo: &Topology, n: usize, seed: u64) -> Dataset {
        let cfg = PhysicsConfig {
            network_seed: 33,
            ..PhysicsConfig::default()
        }
        .noiseless();
        let counts = crate::domain::LoadingCounts {
            fixed: n / 2,
            random: n - n / 2,
            goalpost: 0,
        };
        generate_dataset(topo, &cfg, counts, -2.0, seed).unwrap()
    }

    fn model_cfg() -> ModelConfig {
        ModelConfig {
            channels: 6,
            hidden: 8,
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn lr_schedule_matches_literals() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at_epoch(&cfg, 0), 1e-3);
        assert_eq!(lr_at_epoch(&cfg, 999), 1e-3);
        assert!((lr_at_epoch(&cfg, 2500) - 8.1e-4).abs() < 1e-18);
        assert!((lr_at_epoch(&cfg, 1000) - 9e-4).abs() < 1e-18);
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let mut cfg = TrainConfig::default();
        cfg.decay_gamma = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.clip_norm = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.component_weights = Some(vec![0.0, 0.0]);
        assert!(cfg.validate().is_err());
        // lr0 = 0 is allowed: it makes fine-tuning an exact no-op
        let mut cfg = TrainConfig::default();
        cfg.lr0 = 0.0;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn sequence_loss_matches_hand_values() {
        // three steps engineered to per-step MAEs of exactly 1, 2, 3
        let mask = vec![true, true];
        let mut tape = Tape::new();
        let z = Tensor::vector(vec![0.0, 0.0]);
        let preds: Vec<Var> = [1.0, 2.0, 3.0]
            .iter()
            .map(|&m| tape.constant(&Tensor::vector(vec![m, m])))
            .collect();
        let targets = vec![z.clone(), z.clone(), z.clone()];

        let uniform = sequence_loss(&mut tape, &preds, &targets, &mask, None).unwrap();
        assert!((tape.value(uniform)[0] - 2.0).abs() < 1e-15);

        let first_only =
            sequence_loss(&mut tape, &preds, &targets, &mask, Some(&[1.0, 0.0, 0.0])).unwrap();
        assert!((tape.value(first_only)[0] - 1.0).abs() < 1e-15);

        let perfect: Vec<Var> = (0..3).map(|_| tape.constant(&z)).collect();
        let zero = sequence_loss(&mut tape, &perfect, &targets, &mask, None).unwrap();
        assert_eq!(tape.value(zero)[0], 0.0);
    }

    #[test]
    fn sequence_loss_rejects_mismatched_lengths() {
        let mask = vec![true];
        let mut tape = Tape::new();
        let p = tape.constant(&Tensor::vector(vec![1.0]));
        let t = Tensor::vector(vec![0.0]);
        assert!(sequence_loss(&mut tape, &[p], &[t.clone(), t.clone()], &mask, None).is_err());
        assert!(sequence_loss(&mut tape, &[p], &[t], &mask, Some(&[1.0, 1.0])).is_err());
    }

    #[test]
    fn clipping_scales_to_the_threshold() {
        // two tensors with overall norm 5 = sqrt(9 + 16)
        let mut grads = vec![
            Tensor::vector(vec![3.0, 0.0]),
            Tensor::vector(vec![0.0, 4.0]),
        ];
        let pre = clip_gradients(&mut grads, 1.0);
        assert!((pre - 5.0).abs() < 1e-12);
        assert!((grads[0].data[0] - 0.6).abs() < 1e-12);
        assert!((grads[1].data[1] - 0.8).abs() < 1e-12);
        let post = clip_gradients(&mut grads, 1.0);
        assert!((post - 1.0).abs() < 1e-12);

        // under the threshold: identity
        let mut small = vec![Tensor::vector(vec![0.3])];
        let pre = clip_gradients(&mut small, 0.5);
        assert!((pre - 0.3).abs() < 1e-15);
        assert_eq!(small[0].data[0], 0.3);
    }

    #[test]
    fn clipped_norm_matches_recompute_oracle() {
        let mut rng = stream_rng(5, 0);
        let mut grads: Vec<Tensor> = (0..4)
            .map(|i| Tensor::uniform(Shape::Vector(3 + i), 2.0, &mut rng))
            .collect();
        clip_gradients(&mut grads, 0.7);
        let recomputed = grads
            .iter()
            .flat_map(|g| &g.data)
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        assert!(recomputed <= 0.7 + 1e-12, "post-clip norm {recomputed}");
    }

    #[test]
    fn zero_epochs_returns_initialized_bundle_unchanged() {
        let topo = tiny_topology();
        let ds = tiny_dataset(&topo, 4, 1);
        let cfg = TrainConfig {
            tf_epochs: 0,
            ar_epochs: 0,
            ..TrainConfig::default()
        };
        let (bundle, log) = train_base(&ds, &topo, &model_cfg(), &cfg, 7).unwrap();
        assert!(log.is_empty());
        let norm = NormStats::compute(&ds).unwrap();
        let fresh = ModelBundle::init(&model_cfg(), &topo.kinds(), norm, 7).unwrap();
        assert_eq!(bundle, fresh);
    }

    #[test]
    fn fixed_seed_training_is_bit_reproducible() {
        let topo = tiny_topology();
        let ds = tiny_dataset(&topo, 6, 2);
        let cfg = TrainConfig {
            tf_epochs: 3,
            ar_epochs: 3,
            lr0: 5e-3,
            batch_size: 4,
            seed: 9,
            ..TrainConfig::default()
        };
        let (b1, log1) = train_base(&ds, &topo, &model_cfg(), &cfg, 3).unwrap();
        let (b2, log2) = train_base(&ds, &topo, &model_cfg(), &cfg, 3).unwrap();
        assert_eq!(log1, log2);
        assert_eq!(b1, b2);
        for (r1, r2) in log1.iter().zip(&log2) {
            assert_eq!(r1.loss.to_bits(), r2.loss.to_bits());
            assert_eq!(r1.grad_norm.to_bits(), r2.grad_norm.to_bits());
        }
    }

    #[test]
    fn phase_boundary_is_visible_in_log() {
        let topo = tiny_topology();
        let ds = tiny_dataset(&topo, 4, 3);
        let cfg = TrainConfig {
            tf_epochs: 2,
            ar_epochs: 3,
            ..TrainConfig::default()
        };
        let (_, log) = train_base(&ds, &topo, &model_cfg(), &cfg, 1).unwrap();
        let phases: Vec<Phase> = log.iter().map(|r| r.phase).collect();
        assert_eq!(
            phases,
            vec![
                Phase::TeacherForced,
                Phase::TeacherForced,
                Phase::Autoregressive,
                Phase::Autoregressive,
                Phase::Autoregressive,
            ]
        );
        let epochs: Vec<usize> = log.iter().map(|r| r.epoch).collect();
        assert_eq!(epochs, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn single_sample_step_decreases_its_loss() {
        let topo = tiny_topology();
        let ds = tiny_dataset(&topo, 1, 4);
        let base_cfg = TrainConfig {
            tf_epochs: 1,
            ar_epochs: 0,
            lr0: 1e-6,
            batch_size: 1,
            seed: 11,
            ..TrainConfig::default()
        };

        let eval_loss = |bundle: &ModelBundle| -> f64 {
            let seq = &ds.sequences[0];
            let preds = bundle.forward_teacher_forced(seq, &topo).unwrap();
            let targets: Vec<Tensor> = seq.spectra[1..]
                .iter()
                .map(|s| bundle.norm.normalize_spectrum(s))
                .collect();
            let mut tape = Tape::new();
            let pred_vars: Vec<Var> = preds.iter().map(|p| tape.constant(p)).collect();
            let loss = sequence_loss(&mut tape, &pred_vars, &targets, seq.mask(), None).unwrap();
            tape.value(loss)[0]
        };

        let norm = NormStats::compute(&ds).unwrap();
        let init = ModelBundle::init(&model_cfg(), &topo.kinds(), norm, 5).unwrap();
        let before = eval_loss(&init);
        let mut stepped = init.clone();
        train_loop(&mut stepped, &ds, &topo, &base_cfg, TrainScope::all()).unwrap();
        let after = eval_loss(&stepped);
        assert!(
            after < before,
            "one small SGD step did not reduce the sample loss ({before} -> {after})"
        );
    }

    #[test]
    fn overfits_sixteen_sequences() {
        // downsized model memorizes a small noiseless set well under the
        // 0.05 dB bar within a 4000-epoch budget
        let topo = tiny_topology();
        let ds = tiny_dataset(&topo, 16, 8);
        // two tuning facts baked into this schedule: MAE + SGD settles at a
        // floor set by the final learning rate (sign gradients never shrink),
        // so decay runs all the way down to ~2e-4; and full-batch sign
        // gradients cancel at a median-balanced equilibrium well above zero
        // loss, so batch_size 1 is load-bearing -- per-sample updates are the
        // noise that walks the model off that plateau
        let cfg = TrainConfig {
            tf_epochs: 300,
            ar_epochs: 3700,
            lr0: 0.1,
            decay_every: 400,
            decay_gamma: 0.5,
            clip_norm: 5.0,
            batch_size: 1,
            seed: 2,
            ..TrainConfig::default()
        };
        let mcfg = ModelConfig {
            channels: 6,
            hidden: 16,
            dropout: 0.0,
            ..ModelConfig::default()
        };
        let (bundle, log) = train_base(&ds, &topo, &mcfg, &cfg, 6).unwrap();
        assert_eq!(log.len(), 4000);

        // report train error in dB over all steps and sequences
        let mut worst = 0.0f64;
        let mut total = 0.0;
        let mut count = 0usize;
        for seq in &ds.sequences {
            let preds = bundle
                .forward_autoregressive(seq.launch(), &topo)
                .unwrap();
            for (n, pred) in preds.iter().enumerate() {
                let denorm = bundle.norm.denormalize(&pred.data, seq.mask());
                let truth = &seq.spectra[n + 1];
                for (ch, &on) in seq.mask().iter().enumerate() {
                    if on {
                        let err = (denorm.powers_dbm[ch] - truth.powers_dbm[ch]).abs();
                        worst = worst.max(err);
                        total += err;
                        count += 1;
                    }
                }
            }
        }
        let mean = total / count as f64;
        assert!(
            mean < 0.05,
            "mean train error {mean:.4} dB (worst {worst:.4}) above overfit bar"
        );
    }

    #[test]
    fn divergence_is_reported_with_context() {
        let topo = tiny_topology();
        let ds = tiny_dataset(&topo, 4, 5);
        let cfg = TrainConfig {
            tf_epochs: 1,
            ar_epochs: 0,
            batch_size: 4,
            seed: 1,
            ..TrainConfig::default()
        };
        // output biases near the float ceiling overflow the loss sum, which
        // is exactly the state the detector must catch and report
        let norm = NormStats::compute(&ds).unwrap();
        let mut bundle = ModelBundle::init(&model_cfg(), &topo.kinds(), norm, 2).unwrap();
        for dec in bundle.decoder_bases.values_mut() {
            for v in &mut dec.b_out.data {
                *v = 1.7e308;
            }
        }
        match train_loop(&mut bundle, &ds, &topo, &cfg, TrainScope::all()) {
            Err(MdamError::Diverged { epoch, phase, loss }) => {
                assert_eq!(epoch, 0);
                assert_eq!(phase, "tf");
                assert!(!loss.is_finite());
            }
            Ok(_) => panic!("overflowing loss went undetected"),
            Err(other) => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn csv_log_has_expected_shape() {
        let records = vec![EpochRecord {
            epoch: 0,
            phase: Phase::TeacherForced,
            lr: 1e-3,
            loss: 0.5,
            grad_norm: 1.25,
        }];
        let csv = log_to_csv(&records);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("epoch,phase,lr,loss,grad_norm"));
        assert_eq!(lines.next(), Some("0,tf,0.001,0.5,1.25"));
    }
}
