use std::time::Instant;

use mdam::baseline::{train_cascade, DeviceTrainConfig};
use mdam::domain::{
    ChannelGrid, Dataset, LoadingCounts, LoadingLabel, PowerSpectrum, Topology, SENTINEL_DBM,
};
use mdam::eval::{compare_models, EvalModel};
use mdam::linksim::{
    lab_topology, propagate_sequence, topo1, PhysicsConfig, LAB_NETWORK_SEED, TARGET_NETWORK_SEED,
};
use mdam::model::ModelConfig;
use mdam::rng::labeled_rng;
use mdam::training::{train_base, TrainConfig};
use mdam::transfer::{fine_tune, instantiate_target};
use rand::Rng;

const CH: usize = 16;
const HID: usize = 24;

const BASE_TF: usize = 300;
const BASE_AR: usize = 300;
const FT_TF: usize = 600;
const FT_AR: usize = 1200;
const CASCADE_EPOCHS: usize = 300;

fn grid() -> ChannelGrid {
    ChannelGrid::new(CH, 50.0, 191.35).unwrap()
}

fn lab16() -> Topology {
    Topology::new("lab16", lab_topology().components, grid()).unwrap()
}

fn topo1_16() -> Topology {
    Topology::new("t1-16", topo1().components, grid()).unwrap()
}

// Varied launch conditions: random mask, per-sequence level, per-channel
// jitter.  With a constant flat launch the whole sequence is a function of
// the mask alone and nothing forces the model to read its input values.
fn varied_dataset(topo: &Topology, phys: &PhysicsConfig, n: usize, seed: u64) -> Dataset {
    let ch = topo.grid.num_channels;
    let mut sequences = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = labeled_rng(seed, "acc-launch", &[i as u64]);
        let mut mask: Vec<bool> = (0..ch).map(|_| rng.gen_bool(0.5)).collect();
        if !mask.iter().any(|&b| b) {
            let ix = rng.gen_range(0..ch);
            mask[ix] = true;
        }
        let level: f64 = rng.gen_range(-5.0..1.0);
        let powers: Vec<f64> = mask
            .iter()
            .map(|&on| {
                if on {
                    level + rng.gen_range(-0.75..0.75)
                } else {
                    SENTINEL_DBM
                }
            })
            .collect();
        let launch = PowerSpectrum::new(powers, mask).unwrap();
        let seq = propagate_sequence(&launch, topo, phys, LoadingLabel::Random, &mut rng).unwrap();
        sequences.push(seq);
    }
    Dataset {
        topology_name: topo.name.clone(),
        grid: topo.grid.clone(),
        seed,
        counts: LoadingCounts {
            fixed: 0,
            random: n,
            goalpost: 0,
        },
        config_hash: None,
        sequences,
    }
}

fn print_log(tag: &str, log: &[mdam::training::EpochRecord], every: usize) {
    let mut line = String::new();
    for r in log.iter().step_by(every) {
        line.push_str(&format!("e{}[{}] {:.4}  ", r.epoch, r.phase.as_str(), r.loss));
    }
    if let Some(last) = log.last() {
        line.push_str(&format!("| final {:.5}", last.loss));
    }
    println!("{tag}: {line}");
}

#[test]
fn probe() {
    let lab = lab16();
    let tgt = topo1_16();
    let lab_phys = PhysicsConfig {
        network_seed: LAB_NETWORK_SEED,
        ..PhysicsConfig::default()
    };
    let tgt_phys = PhysicsConfig {
        network_seed: TARGET_NETWORK_SEED,
        ..PhysicsConfig::default()
    };

    let t0 = Instant::now();
    let lab_ds = varied_dataset(&lab, &lab_phys, 3168, 1001);
    let tl_ds = varied_dataset(&tgt, &tgt_phys, 48, 2002);
    let cas_ds = varied_dataset(&tgt, &tgt_phys, 3216, 3003);
    let test_ds = varied_dataset(&tgt, &tgt_phys, 200, 4004);
    println!("datasets generated in {:.1?}", t0.elapsed());

    let model_cfg = ModelConfig {
        channels: CH,
        hidden: HID,
        dropout: 0.2,
        ..ModelConfig::default()
    };
    let base_cfg = TrainConfig {
        tf_epochs: BASE_TF,
        ar_epochs: BASE_AR,
        lr0: 5e-3,
        decay_every: 100,
        decay_gamma: 0.7,
        clip_norm: 1.0,
        batch_size: 32,
        seed: 0,
        ..TrainConfig::default()
    };
    let t1 = Instant::now();
    let (base_bundle, base_log) = train_base(&lab_ds, &lab, &model_cfg, &base_cfg, 1).unwrap();
    println!(
        "base: {:.1?} total ({:.2?}/epoch)",
        t1.elapsed(),
        t1.elapsed() / (BASE_TF + BASE_AR) as u32,
    );
    print_log("base", &base_log, 25);

    let zero_shot = instantiate_target(&base_bundle, &tgt).unwrap();

    let mut tuned = zero_shot.clone();
    let ft_cfg = TrainConfig {
        tf_epochs: FT_TF,
        ar_epochs: FT_AR,
        lr0: 2e-3,
        decay_every: 300,
        decay_gamma: 0.5,
        clip_norm: 0.5,
        batch_size: 4,
        seed: 1,
        ..TrainConfig::default()
    };
    let t2 = Instant::now();
    let ft_log = fine_tune(&mut tuned, &tl_ds, &tgt, &ft_cfg, false).unwrap();
    println!(
        "fine-tune: {:.1?} ({:.2?}/epoch)",
        t2.elapsed(),
        t2.elapsed() / (FT_TF + FT_AR) as u32,
    );
    print_log("ft", &ft_log, 100);

    let cas_cfg = DeviceTrainConfig {
        epochs: CASCADE_EPOCHS,
        lr0: 3e-3,
        decay_every: 75,
        decay_gamma: 0.5,
        clip_norm: 1.0,
        batch_size: 32,
        seed: 2,
    };
    let t3 = Instant::now();
    let (cascade, cas_logs) = train_cascade(&cas_ds, &tgt, &cas_cfg).unwrap();
    let worst_dev = cas_logs
        .iter()
        .filter_map(|(id, log)| log.last().map(|r| (id.clone(), r.loss)))
        .max_by(|a, b| a.1.total_cmp(&b.1));
    println!(
        "cascade: {:.1?} ({:.2?}/epoch), worst device final {:?}",
        t3.elapsed(),
        t3.elapsed() / CASCADE_EPOCHS as u32,
        worst_dev
    );
    if let Some((_, log)) = cas_logs.first() {
        print_log("cas[0]", log, 50);
    }

    let entries = vec![
        ("zero-shot".to_string(), EvalModel::Sequence(&zero_shot)),
        ("mdam-tl".to_string(), EvalModel::Sequence(&tuned)),
        ("cascade".to_string(), EvalModel::Cascade(&cascade)),
    ];
    let t4 = Instant::now();
    let report = compare_models(&entries, &test_ds, &tgt).unwrap();
    println!("eval in {:.1?}", t4.elapsed());
    for row in &report.rows {
        println!(
            "  {:>10}: end {}  last-quartiles {:?}",
            row.name,
            row.end.cell(),
            row.per_component.last().unwrap()
        );
    }
    let zs = report.rows[0].end.mean_db;
    let ft = report.rows[1].end.mean_db;
    let cas = report.rows[2].end.mean_db;
    println!(
        "improvement over zero-shot: {:.1}% (need >=30), ft mean {:.4} (need <0.5)",
        100.0 * (zs - ft) / zs,
        ft
    );
    println!("mdam/cascade ratio: {:.3} (need <=0.5)", ft / cas);
    println!("TOTAL {:.1?}", t0.elapsed());
}
