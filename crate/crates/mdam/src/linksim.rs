//! Synthetic link simulator: the ground-truth oracle the model is trained
//! against.
//!
//! Components apply kind-specific transfer functions in the dB domain to
//! loaded channels. Per-device character comes from ripple curves drawn
//! deterministically from a network seed and the device id, so two networks
//! with different seeds behave like different physical hardware of the same
//! type. All tunable constants live in [`PhysicsConfig`], which round-trips
//! through JSON so runs can pin their physics alongside their datasets.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{
    build_topology, ChannelGrid, ComponentKind, Dataset, DeviceConfig, LoadingCounts,
    LoadingLabel, MeasurementSequence, PowerSpectrum, Topology,
};
use crate::error::{MdamError, Result};
use crate::rng::{fnv1a, labeled_rng, stream_label, stream_rng};

pub const DEFAULT_ATTEN_DB_PER_KM: f64 = 0.21;
pub const DEFAULT_SPAN_TILT_DB_PER_KM: f64 = 0.002;
pub const DEFAULT_EDFA_RIPPLE_AMP_DB: f64 = 0.3;
pub const DEFAULT_P_SAT_DBM: f64 = 21.0;
pub const DEFAULT_SAT_SOFTNESS_DB: f64 = 1.0;
pub const DEFAULT_GAIN_OFFSET_DB: f64 = 0.5;
pub const DEFAULT_WSS_MEAN_ATTEN_DB: f64 = 5.0;
pub const DEFAULT_WSS_RIPPLE_AMP_DB: f64 = 0.2;
pub const DEFAULT_OCM_SIGMA_DB: f64 = 0.05;
pub const DEFAULT_LAUNCH_POWER_DBM: f64 = -2.0;
pub const DEFAULT_RANDOM_LOAD_P: f64 = 0.5;
pub const DEFAULT_GOALPOST_WIDTH: usize = 10;
pub const DEFAULT_EDFA_GAIN_DB: f64 = 18.0;

/// Network seed of the bench ("lab") installation.
pub const LAB_NETWORK_SEED: u64 = 101;
/// Network seed of the deployed ("target") installation.
pub const TARGET_NETWORK_SEED: u64 = 202;

/// Global physics constants. Per-device numbers (gain, length, attenuation)
/// come from each [`DeviceConfig`]; everything else is configured here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhysicsConfig {
    /// Seed from which every device's ripple curve is derived.
    pub network_seed: u64,
    /// Max amplitude of each EDFA ripple harmonic (dB).
    pub edfa_ripple_amp_db: f64,
    /// Total-output saturation point of every EDFA (dBm).
    pub p_sat_dbm: f64,
    /// Softness of the saturation knee (dB); smaller = harder clamp.
    pub sat_softness_db: f64,
    /// Gain shift per unit of missing load: shift = g_off * (fraction - 1).
    pub gain_offset_db: f64,
    /// Extra span loss slope across the band (dB/km at band position 1).
    pub span_tilt_db_per_km: f64,
    /// OCM measurement noise sigma (dB); 0 disables.
    pub ocm_sigma_db: f64,
    /// Optional OCM quantization step (dB).
    pub quantization_db: Option<f64>,
    /// Flat per-channel launch power (dBm).
    pub launch_power_dbm: f64,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        Self {
            network_seed: LAB_NETWORK_SEED,
            edfa_ripple_amp_db: DEFAULT_EDFA_RIPPLE_AMP_DB,
            p_sat_dbm: DEFAULT_P_SAT_DBM,
            sat_softness_db: DEFAULT_SAT_SOFTNESS_DB,
            gain_offset_db: DEFAULT_GAIN_OFFSET_DB,
            span_tilt_db_per_km: DEFAULT_SPAN_TILT_DB_PER_KM,
            ocm_sigma_db: DEFAULT_OCM_SIGMA_DB,
            quantization_db: None,
            launch_power_dbm: DEFAULT_LAUNCH_POWER_DBM,
        }
    }
}

impl PhysicsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.edfa_ripple_amp_db < 0.0 {
            return Err(MdamError::Config("EDFA ripple amplitude must be >= 0".into()));
        }
        if self.sat_softness_db <= 0.0 {
            return Err(MdamError::Config("saturation softness must be > 0".into()));
        }
        if self.ocm_sigma_db < 0.0 {
            return Err(MdamError::Config("OCM sigma must be >= 0".into()));
        }
        if let Some(q) = self.quantization_db {
            if q <= 0.0 {
                return Err(MdamError::Config("quantization step must be > 0".into()));
            }
        }
        Ok(())
    }

    /// Variant with measurement noise and quantization turned off.
    pub fn noiseless(&self) -> Self {
        Self {
            ocm_sigma_db: 0.0,
            quantization_db: None,
            ..self.clone()
        }
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Resolved per-device EDFA physics.
#[derive(Debug, Clone, PartialEq)]
pub struct EdfaPhysics {
    pub target_gain_db: f64,
    pub tilt_db: f64,
    pub ripple_db: Vec<f64>,
    pub p_sat_dbm: f64,
    pub sat_softness_db: f64,
    pub gain_offset_db: f64,
}

/// Resolved per-device span physics.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanPhysics {
    pub length_km: f64,
    pub atten_db_per_km: f64,
    pub tilt_db_per_km: f64,
}

/// Resolved per-device WSS physics.
#[derive(Debug, Clone, PartialEq)]
pub struct WssPhysics {
    pub mean_atten_db: f64,
    pub ripple_db: Vec<f64>,
}

/// OCM measurement noise.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    pub ocm_sigma_db: f64,
    pub quantization_db: Option<f64>,
}

/// Harmonic amplitudes and phases behind one EDFA's ripple curve.
pub fn edfa_ripple_coeffs(
    network_seed: u64,
    device_id: &str,
    amp_db: f64,
) -> ([f64; 3], [f64; 3]) {
    let mut rng = labeled_rng(network_seed, "edfa-ripple", &[fnv1a(device_id.as_bytes())]);
    let mut amps = [0.0; 3];
    let mut phases = [0.0; 3];
    for k in 0..3 {
        amps[k] = rng.gen_range(-amp_db..=amp_db);
        phases[k] = rng.gen_range(0.0..std::f64::consts::TAU);
    }
    (amps, phases)
}

/// Mean-centered smooth ripple curve over the grid: a three-harmonic
/// sinusoid in band position, shifted so its channel mean is exactly zero.
pub fn edfa_ripple_curve(
    network_seed: u64,
    device_id: &str,
    amp_db: f64,
    grid: &ChannelGrid,
) -> Vec<f64> {
    let (amps, phases) = edfa_ripple_coeffs(network_seed, device_id, amp_db);
    let n = grid.num_channels;
    let mut curve: Vec<f64> = (0..n)
        .map(|i| {
            let u = grid.band_position(i);
            (0..3)
                .map(|k| amps[k] * (std::f64::consts::TAU * (k as f64 + 1.0) * u + phases[k]).sin())
                .sum()
        })
        .collect();
    let mean = curve.iter().sum::<f64>() / n as f64;
    for v in &mut curve {
        *v -= mean;
    }
    curve
}

/// Mean-centered iid per-channel WSS ripple.
pub fn wss_ripple_curve(network_seed: u64, device_id: &str, amp_db: f64, n: usize) -> Vec<f64> {
    let mut rng = labeled_rng(network_seed, "wss-ripple", &[fnv1a(device_id.as_bytes())]);
    let mut curve: Vec<f64> = (0..n).map(|_| rng.gen_range(-amp_db..=amp_db)).collect();
    let mean = curve.iter().sum::<f64>() / n.max(1) as f64;
    for v in &mut curve {
        *v -= mean;
    }
    curve
}

/// Resolve a device's physics from its config entry plus the global
/// constants.
pub fn resolve_edfa(device: &DeviceConfig, cfg: &PhysicsConfig, grid: &ChannelGrid) -> EdfaPhysics {
    EdfaPhysics {
        target_gain_db: device.features[0],
        tilt_db: device.features[1],
        ripple_db: edfa_ripple_curve(cfg.network_seed, &device.device_id, cfg.edfa_ripple_amp_db, grid),
        p_sat_dbm: cfg.p_sat_dbm,
        sat_softness_db: cfg.sat_softness_db,
        gain_offset_db: cfg.gain_offset_db,
    }
}

pub fn resolve_span(device: &DeviceConfig, cfg: &PhysicsConfig) -> SpanPhysics {
    SpanPhysics {
        length_km: device.features[0],
        atten_db_per_km: device.features[1],
        tilt_db_per_km: cfg.span_tilt_db_per_km,
    }
}

pub fn resolve_wss(device: &DeviceConfig, cfg: &PhysicsConfig, grid: &ChannelGrid) -> WssPhysics {
    WssPhysics {
        mean_atten_db: device.features[0],
        ripple_db: wss_ripple_curve(
            cfg.network_seed,
            &device.device_id,
            device.features[1],
            grid.num_channels,
        ),
    }
}

fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else {
        z.exp().ln_1p()
    }
}

/// Total power of the loaded channels in dBm.
pub fn total_power_dbm(spectrum: &PowerSpectrum) -> f64 {
    let total_mw: f64 = spectrum
        .powers_dbm
        .iter()
        .zip(&spectrum.loaded)
        .filter(|(_, &on)| on)
        .map(|(&p, _)| 10f64.powf(p / 10.0))
        .sum();
    10.0 * total_mw.log10()
}

fn apply_edfa(p: &mut [f64], loaded: &[bool], grid: &ChannelGrid, phys: &EdfaPhysics) {
    let loaded_count = loaded.iter().filter(|&&b| b).count();
    if loaded_count == 0 {
        return;
    }
    let fraction = loaded_count as f64 / loaded.len() as f64;
    let load_shift = phys.gain_offset_db * (fraction - 1.0);
    for i in 0..p.len() {
        if loaded[i] {
            let u = grid.band_position(i);
            p[i] += phys.target_gain_db + phys.tilt_db * (u - 0.5) + phys.ripple_db[i] + load_shift;
        }
    }
    // soft clamp on total output power, applied uniformly in dB
    let total_mw: f64 = p
        .iter()
        .zip(loaded)
        .filter(|(_, &on)| on)
        .map(|(&v, _)| 10f64.powf(v / 10.0))
        .sum();
    let total_dbm = 10.0 * total_mw.log10();
    let s = phys.sat_softness_db;
    let compression = s * softplus((total_dbm - phys.p_sat_dbm) / s);
    if compression != 0.0 {
        for i in 0..p.len() {
            if loaded[i] {
                p[i] -= compression;
            }
        }
    }
}

fn apply_span(p: &mut [f64], loaded: &[bool], grid: &ChannelGrid, phys: &SpanPhysics) {
    for i in 0..p.len() {
        if loaded[i] {
            let u = grid.band_position(i);
            p[i] -= phys.atten_db_per_km * phys.length_km + phys.tilt_db_per_km * phys.length_km * u;
        }
    }
}

fn apply_wss(p: &mut [f64], loaded: &[bool], phys: &WssPhysics) {
    for i in 0..p.len() {
        if loaded[i] {
            p[i] -= phys.mean_atten_db + phys.ripple_db[i];
        }
    }
}

fn apply_noise(p: &mut [f64], loaded: &[bool], noise: &NoiseModel, rng: &mut impl Rng) {
    if noise.ocm_sigma_db > 0.0 {
        let dist = Normal::new(0.0, noise.ocm_sigma_db).expect("sigma validated nonnegative");
        for i in 0..p.len() {
            if loaded[i] {
                p[i] += dist.sample(rng);
            }
        }
    }
    if let Some(q) = noise.quantization_db {
        for i in 0..p.len() {
            if loaded[i] {
                p[i] = (p[i] / q).round() * q;
            }
        }
    }
}

/// Push a spectrum through one component. The transfer is applied in the dB
/// domain to loaded channels; unloaded channels stay at the sentinel;
/// measurement noise is added last.
pub fn propagate_component(
    p_in: &PowerSpectrum,
    device: &DeviceConfig,
    cfg: &PhysicsConfig,
    grid: &ChannelGrid,
    rng: &mut impl Rng,
) -> Result<PowerSpectrum> {
    if p_in.len() != grid.num_channels {
        return Err(MdamError::ShapeMismatch {
            op: "propagate_component",
            lhs: vec![p_in.len()],
            rhs: vec![grid.num_channels],
        });
    }
    let mut p = p_in.powers_dbm.clone();
    let loaded = &p_in.loaded;
    match device.kind {
        ComponentKind::Booster | ComponentKind::Preamp => {
            let phys = resolve_edfa(device, cfg, grid);
            apply_edfa(&mut p, loaded, grid, &phys);
        }
        ComponentKind::Span => {
            let phys = resolve_span(device, cfg);
            apply_span(&mut p, loaded, grid, &phys);
        }
        ComponentKind::Wss => {
            let phys = resolve_wss(device, cfg, grid);
            apply_wss(&mut p, loaded, &phys);
        }
    }
    let noise = NoiseModel {
        ocm_sigma_db: cfg.ocm_sigma_db,
        quantization_db: cfg.quantization_db,
    };
    apply_noise(&mut p, loaded, &noise, rng);
    let mut out = PowerSpectrum::new(p, loaded.clone())?;
    out.enforce_sentinel();
    Ok(out)
}

/// Fold a launch spectrum through a whole topology, recording every
/// intermediate OCM view. The launch spectrum is recorded exactly; every
/// later spectrum carries the configured measurement noise.
pub fn propagate_sequence(
    p0: &PowerSpectrum,
    topo: &Topology,
    cfg: &PhysicsConfig,
    label: LoadingLabel,
    rng: &mut impl Rng,
) -> Result<MeasurementSequence> {
    let mut spectra = Vec::with_capacity(topo.len() + 1);
    spectra.push(p0.clone());
    let mut current = p0.clone();
    for device in &topo.components {
        current = propagate_component(&current, device, cfg, &topo.grid, rng)?;
        spectra.push(current.clone());
    }
    Ok(MeasurementSequence {
        topology_name: topo.name.clone(),
        loading_label: label,
        spectra,
    })
}

/// Channel-loading patterns used to drive the simulator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LoadingSpec {
    /// All channels carry traffic.
    FixedFull,
    /// Lowest-index half of the band (48 channels of 95) carries traffic.
    FixedHalf,
    /// Each channel loaded independently with probability `p`.
    Random { p: f64 },
    /// Two blocks of `width` channels hugging the band edges.
    Goalpost { width: usize },
}

impl LoadingSpec {
    pub fn label(&self) -> LoadingLabel {
        match self {
            LoadingSpec::FixedFull | LoadingSpec::FixedHalf => LoadingLabel::Fixed,
            LoadingSpec::Random { .. } => LoadingLabel::Random,
            LoadingSpec::Goalpost { .. } => LoadingLabel::Goalpost,
        }
    }
}

/// Produce a loading mask for `n` channels.
pub fn generate_loading(spec: &LoadingSpec, n: usize, rng: &mut impl Rng) -> Result<Vec<bool>> {
    match *spec {
        LoadingSpec::FixedFull => Ok(vec![true; n]),
        LoadingSpec::FixedHalf => {
            let half = (n + 1) / 2;
            Ok((0..n).map(|i| i < half).collect())
        }
        LoadingSpec::Random { p } => {
            if !(0.0..=1.0).contains(&p) {
                return Err(MdamError::Config(format!(
                    "random loading probability {p} outside [0, 1]"
                )));
            }
            if p == 0.0 {
                return Err(MdamError::Config(
                    "random loading probability 0 can never produce a loaded channel".into(),
                ));
            }
            loop {
                let mask: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() < p).collect();
                if mask.iter().any(|&b| b) {
                    return Ok(mask);
                }
            }
        }
        LoadingSpec::Goalpost { width } => {
            if width == 0 {
                return Err(MdamError::Config("goalpost width must be positive".into()));
            }
            if 2 * width > n {
                return Err(MdamError::Config(format!(
                    "goalpost width {width} overlaps on a {n}-channel band"
                )));
            }
            Ok((0..n).map(|i| i < width || i >= n - width).collect())
        }
    }
}

/// Emit a dataset of propagated sequences. The mode schedule runs fixed
/// (alternating full/half), then random, then goalpost; each sample owns a
/// derived RNG stream so generation order cannot change the data.
pub fn generate_dataset(
    topo: &Topology,
    cfg: &PhysicsConfig,
    counts: LoadingCounts,
    launch_dbm: f64,
    seed: u64,
) -> Result<Dataset> {
    cfg.validate()?;
    topo.validate()?;
    let n = topo.grid.num_channels;
    let mut sequences = Vec::with_capacity(counts.total());
    let mut specs: Vec<LoadingSpec> = Vec::with_capacity(counts.total());
    for i in 0..counts.fixed {
        specs.push(if i % 2 == 0 {
            LoadingSpec::FixedFull
        } else {
            LoadingSpec::FixedHalf
        });
    }
    for _ in 0..counts.random {
        specs.push(LoadingSpec::Random {
            p: DEFAULT_RANDOM_LOAD_P,
        });
    }
    for _ in 0..counts.goalpost {
        specs.push(LoadingSpec::Goalpost {
            width: DEFAULT_GOALPOST_WIDTH,
        });
    }
    for (i, spec) in specs.iter().enumerate() {
        let mut rng = stream_rng(seed, stream_label("sample", &[i as u64]));
        let mask = generate_loading(spec, n, &mut rng)?;
        let launch = PowerSpectrum::flat(launch_dbm, &mask);
        let seq = propagate_sequence(&launch, topo, cfg, spec.label(), &mut rng)?;
        sequences.push(seq);
    }
    Ok(Dataset {
        topology_name: topo.name.clone(),
        grid: topo.grid.clone(),
        seed,
        counts,
        config_hash: None,
        sequences,
    })
}

/// Six-span deployed network (span plan 40/40/40/32/32/50 km).
pub fn topo1() -> Topology {
    build_topology("topo1", &[40.0, 40.0, 40.0, 32.0, 32.0, 50.0], DEFAULT_EDFA_GAIN_DB, 0.0)
        .expect("static topology is valid")
}

/// Four-span deployed network (span plan 40/72/72/50 km).
pub fn topo2() -> Topology {
    build_topology("topo2", &[40.0, 72.0, 72.0, 50.0], DEFAULT_EDFA_GAIN_DB, 0.0)
        .expect("static topology is valid")
}

/// Bench network: one physical instance of each component kind.
pub fn lab_topology() -> Topology {
    let components = vec![
        DeviceConfig::edfa(ComponentKind::Booster, "lab-booster", DEFAULT_EDFA_GAIN_DB, 0.0)
            .expect("valid device"),
        DeviceConfig::span("lab-span", 40.0, DEFAULT_ATTEN_DB_PER_KM).expect("valid device"),
        DeviceConfig::edfa(ComponentKind::Preamp, "lab-preamp", DEFAULT_EDFA_GAIN_DB, 0.0)
            .expect("valid device"),
        DeviceConfig::wss("lab-wss", DEFAULT_WSS_MEAN_ATTEN_DB, DEFAULT_WSS_RIPPLE_AMP_DB)
            .expect("valid device"),
    ];
    Topology::new("lab-loop", components, ChannelGrid::c_band()).expect("static topology is valid")
}

/// A named dataset recipe: topology + physics + sample counts.
#[derive(Debug, Clone)]
pub struct Preset {
    pub name: &'static str,
    pub topology: Topology,
    pub physics: PhysicsConfig,
    pub counts: LoadingCounts,
}

/// Look up one of the built-in dataset recipes:
/// - `lab-base`: 3,168 sequences on the bench network,
/// - `tl-target`: 48 fixed+random sequences on the deployed network,
/// - `cosmos-test`: 658 random + 27 goalpost test sequences on the deployed
///   network.
pub fn preset(name: &str) -> Result<Preset> {
    match name {
        "lab-base" => Ok(Preset {
            name: "lab-base",
            topology: lab_topology(),
            physics: PhysicsConfig {
                network_seed: LAB_NETWORK_SEED,
                ..PhysicsConfig::default()
            },
            counts: LoadingCounts {
                fixed: 168,
                random: 2700,
                goalpost: 300,
            },
        }),
        "tl-target" => Ok(Preset {
            name: "tl-target",
            topology: topo1(),
            physics: PhysicsConfig {
                network_seed: TARGET_NETWORK_SEED,
                ..PhysicsConfig::default()
            },
            counts: LoadingCounts {
                fixed: 24,
                random: 24,
                goalpost: 0,
            },
        }),
        "cosmos-test" => Ok(Preset {
            name: "cosmos-test",
            topology: topo1(),
            physics: PhysicsConfig {
                network_seed: TARGET_NETWORK_SEED,
                ..PhysicsConfig::default()
            },
            counts: LoadingCounts {
                fixed: 0,
                random: 658,
                goalpost: 27,
            },
        }),
        other => Err(MdamError::Config(format!(
            "unknown preset '{other}' (expected lab-base, tl-target or cosmos-test)"
        ))),
    }
}

/// Resolve a topology name, as stored in dataset and checkpoint headers, back
/// to its builder.
pub fn topology_by_name(name: &str) -> Result<Topology> {
    match name {
        "lab-loop" => Ok(lab_topology()),
        "topo1" => Ok(topo1()),
        "topo2" => Ok(topo2()),
        other => Err(MdamError::Config(format!(
            "unknown topology '{other}' (expected lab-loop, topo1 or topo2)"
        ))),
    }
}

/// Generate a preset dataset. The per-preset sample streams are derived from
/// both the preset name and the caller's seed, so different presets sharing a
/// seed still draw independent data.
pub fn generate_preset(name: &str, seed: u64) -> Result<Dataset> {
    let p = preset(name)?;
    let dataset_seed = stream_label(p.name, &[seed]);
    generate_dataset(
        &p.topology,
        &p.physics,
        p.counts,
        p.physics.launch_power_dbm,
        dataset_seed,
    )
}
