use std::time::Instant;

use mdam::domain::{ChannelGrid, LoadingCounts, Topology};
use mdam::linksim::{generate_dataset, lab_topology, PhysicsConfig, LAB_NETWORK_SEED};
use mdam::model::ModelConfig;
use mdam::training::{train_base, TrainConfig};

const CH: usize = 16;

fn lab16() -> Topology {
    let grid = ChannelGrid::new(CH, 50.0, 191.35).unwrap();
    Topology::new("lab16", lab_topology().components, grid).unwrap()
}

#[test]
fn probe_base() {
    let lab = lab16();
    let lab_phys = PhysicsConfig {
        network_seed: LAB_NETWORK_SEED,
        ..PhysicsConfig::default()
    };
    let lab_ds = generate_dataset(
        &lab,
        &lab_phys,
        LoadingCounts { fixed: 168, random: 3000, goalpost: 0 },
        -2.0,
        1001,
    )
    .unwrap();

    // variant grid: (hidden, dropout, lr0, decay_every, gamma, batch, tf, ar)
    let variants: &[(usize, f64, f64, usize, f64, usize, usize, usize)] = &[
        (24, 0.0, 5e-3, 200, 0.7, 4, 120, 0),
        (24, 0.2, 2e-2, 200, 0.7, 32, 120, 0),
        (32, 0.0, 1e-2, 200, 0.7, 8, 120, 0),
    ];
    for &(hid, dropout, lr0, de, gamma, bs, tf, ar) in variants {
        let model_cfg = ModelConfig {
            channels: CH,
            hidden: hid,
            dropout,
            ..ModelConfig::default()
        };
        let cfg = TrainConfig {
            tf_epochs: tf,
            ar_epochs: ar,
            lr0,
            decay_every: de,
            decay_gamma: gamma,
            clip_norm: 1.0,
            batch_size: bs,
            seed: 0,
            ..TrainConfig::default()
        };
        let t = Instant::now();
        let (_bundle, log) = train_base(&lab_ds, &lab, &model_cfg, &cfg, 1).unwrap();
        println!(
            "hid {hid} drop {dropout} lr0 {lr0} bs {bs}: {:.1?} ({:.0?}/epoch)",
            t.elapsed(),
            t.elapsed() / (tf + ar).max(1) as u32
        );
        for r in log.iter().step_by(10) {
            print!("  e{} {:.4}", r.epoch, r.loss);
        }
        println!("\n  final {:.5}", log.last().unwrap().loss);
    }
}
