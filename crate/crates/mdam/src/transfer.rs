//! Move a trained base bundle onto a deployed multi-span network.
//!
//! The base model carries one decoder per component *kind*. A deployed
//! topology has many physical devices of each kind, each with its own ripple
//! signature, so the transfer step replicates the kind decoder once per
//! device and then fine-tunes the whole bundle on a handful of measurements
//! from the real network.

use std::collections::BTreeMap;

use crate::domain::{Dataset, Topology};
use crate::error::{MdamError, Result};
use crate::linksim::{topo1, topo2, PhysicsConfig, TARGET_NETWORK_SEED};
use crate::model::{ModelBundle, TrainScope};
use crate::training::{train_loop, EpochRecord, TrainConfig};

/// Deployed-network presets addressable by name from the CLI. Each pairs a
/// span plan with the target-network physics seed, so device ripples differ
/// from anything seen during base training.
pub fn target_preset(name: &str) -> Result<(Topology, PhysicsConfig)> {
    let physics = PhysicsConfig {
        network_seed: TARGET_NETWORK_SEED,
        ..PhysicsConfig::default()
    };
    match name {
        "topo1-cosmos" => Ok((topo1(), physics)),
        "topo2-cosmos" => Ok((topo2(), physics)),
        other => Err(MdamError::Config(format!(
            "unknown target preset '{other}' (expected topo1-cosmos or topo2-cosmos)"
        ))),
    }
}

/// Build a target bundle from a trained base: the encoder and normalization
/// stats are copied, and every device in `target` receives its own decoder
/// cloned from the matching kind-base decoder. The copies start identical and
/// drift apart during fine-tuning. The base bundle is left untouched.
pub fn instantiate_target(base: &ModelBundle, target: &Topology) -> Result<ModelBundle> {
    if target.grid.num_channels != base.config.channels {
        return Err(MdamError::TransferIncompatible(format!(
            "target grid has {} channels, base model expects {}",
            target.grid.num_channels, base.config.channels
        )));
    }
    let mut decoders = BTreeMap::new();
    for dev in &target.components {
        let src = base.decoder_bases.get(&dev.kind).ok_or_else(|| {
            MdamError::TransferIncompatible(format!(
                "base bundle has no {} decoder for device '{}'",
                dev.kind, dev.device_id
            ))
        })?;
        decoders.insert(dev.device_id.clone(), src.clone());
    }
    Ok(ModelBundle {
        config: base.config.clone(),
        encoder: base.encoder.clone(),
        // kind bases stay with the lab model; the target bundle is
        // exclusively per-device from here on
        decoder_bases: BTreeMap::new(),
        decoders,
        norm: base.norm.clone(),
    })
}

/// Fine-tune an instantiated target bundle on measurements from the deployed
/// network. Runs the same two-phase loop as base training; `cfg` is expected
/// to come from [`TrainConfig::fine_tune`] (reduced learning rate and clip
/// threshold). The encoder adapts along with the decoders unless
/// `freeze_encoder` is set.
pub fn fine_tune(
    bundle: &mut ModelBundle,
    dataset: &Dataset,
    topo: &Topology,
    cfg: &TrainConfig,
    freeze_encoder: bool,
) -> Result<Vec<EpochRecord>> {
    let scope = if freeze_encoder {
        TrainScope::decoders_only()
    } else {
        TrainScope::all()
    };
    train_loop(bundle, dataset, topo, cfg, scope)
}
