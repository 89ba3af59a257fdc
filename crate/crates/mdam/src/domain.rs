//! Shared domain types: channel grid, power spectra, components, topologies
//! and measurement sequences.

use serde::{Deserialize, Serialize};

use crate::error::{MdamError, Result};

/// Default channel count for the C-band grid.
pub const DEFAULT_NUM_CHANNELS: usize = 95;
/// Default channel spacing in GHz.
pub const DEFAULT_SPACING_GHZ: f64 = 50.0;
/// First channel center frequency in THz for the default grid.
pub const DEFAULT_ANCHOR_THZ: f64 = 191.35;
/// Power reading reported for channels that carry no signal, in dBm.
pub const SENTINEL_DBM: f64 = -60.0;

/// Fixed-length device feature vector width shared by all component kinds.
pub const FEATURE_LEN: usize = 4;

/// Uniform WDM channel grid. Channel index `i` maps to the i-th center
/// frequency, ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelGrid {
    pub num_channels: usize,
    pub spacing_ghz: f64,
    pub anchor_thz: f64,
}

impl ChannelGrid {
    pub fn new(num_channels: usize, spacing_ghz: f64, anchor_thz: f64) -> Result<Self> {
        if num_channels == 0 {
            return Err(MdamError::Config("grid needs at least one channel".into()));
        }
        if spacing_ghz <= 0.0 {
            return Err(MdamError::Config("grid spacing must be positive".into()));
        }
        Ok(Self {
            num_channels,
            spacing_ghz,
            anchor_thz,
        })
    }

    /// The 95 x 50 GHz C-band grid used throughout.
    pub fn c_band() -> Self {
        Self {
            num_channels: DEFAULT_NUM_CHANNELS,
            spacing_ghz: DEFAULT_SPACING_GHZ,
            anchor_thz: DEFAULT_ANCHOR_THZ,
        }
    }

    /// Center frequency of channel `i` in THz, strictly increasing in `i`.
    pub fn center_frequency_thz(&self, i: usize) -> f64 {
        self.anchor_thz + (i as f64) * self.spacing_ghz * 1e-3
    }

    pub fn center_frequencies_thz(&self) -> Vec<f64> {
        (0..self.num_channels)
            .map(|i| self.center_frequency_thz(i))
            .collect()
    }

    /// Normalized band position of channel `i` in `[0, 1]`.
    pub fn band_position(&self, i: usize) -> f64 {
        if self.num_channels <= 1 {
            0.5
        } else {
            i as f64 / (self.num_channels - 1) as f64
        }
    }
}

/// Per-channel power readings (dBm) plus the channel loading mask.
/// Unloaded channels always carry [`SENTINEL_DBM`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerSpectrum {
    pub powers_dbm: Vec<f64>,
    pub loaded: Vec<bool>,
}

impl PowerSpectrum {
    pub fn new(powers_dbm: Vec<f64>, loaded: Vec<bool>) -> Result<Self> {
        if powers_dbm.len() != loaded.len() {
            return Err(MdamError::ShapeMismatch {
                op: "PowerSpectrum::new",
                lhs: vec![powers_dbm.len()],
                rhs: vec![loaded.len()],
            });
        }
        for (i, (&p, &on)) in powers_dbm.iter().zip(&loaded).enumerate() {
            if on && !p.is_finite() {
                return Err(MdamError::NonFinite(format!("power at channel {i}")));
            }
        }
        Ok(Self { powers_dbm, loaded })
    }

    /// Flat spectrum at `level_dbm` on the masked channels, sentinel elsewhere.
    pub fn flat(level_dbm: f64, loaded: &[bool]) -> Self {
        let powers = loaded
            .iter()
            .map(|&on| if on { level_dbm } else { SENTINEL_DBM })
            .collect();
        Self {
            powers_dbm: powers,
            loaded: loaded.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.powers_dbm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.powers_dbm.is_empty()
    }

    pub fn loaded_count(&self) -> usize {
        self.loaded.iter().filter(|&&b| b).count()
    }

    /// Overwrite unloaded channels with the sentinel floor.
    pub fn enforce_sentinel(&mut self) {
        for (p, &on) in self.powers_dbm.iter_mut().zip(&self.loaded) {
            if !on {
                *p = SENTINEL_DBM;
            }
        }
    }
}

/// The four component kinds a link is made of.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentKind {
    Booster,
    Preamp,
    Span,
    Wss,
}

impl ComponentKind {
    pub const ALL: [ComponentKind; 4] = [
        ComponentKind::Booster,
        ComponentKind::Preamp,
        ComponentKind::Span,
        ComponentKind::Wss,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ComponentKind::Booster => "booster",
            ComponentKind::Preamp => "preamp",
            ComponentKind::Span => "span",
            ComponentKind::Wss => "wss",
        }
    }
}

impl std::fmt::Display for ComponentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One physical device in a topology.
///
/// `features` slot semantics by kind (always length 4, zero padded):
/// - Booster/Preamp: `[target_gain_db, tilt_db, 0, 0]`
/// - Span:           `[length_km, atten_coeff_db_per_km, 0, 0]`
/// - Wss:            `[mean_atten_db, ripple_amp_db, 0, 0]`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceConfig {
    pub kind: ComponentKind,
    pub device_id: String,
    pub features: [f64; FEATURE_LEN],
}

impl DeviceConfig {
    pub fn edfa(kind: ComponentKind, device_id: impl Into<String>, gain_db: f64, tilt_db: f64) -> Result<Self> {
        if !matches!(kind, ComponentKind::Booster | ComponentKind::Preamp) {
            return Err(MdamError::Config(format!("{kind} is not an EDFA kind")));
        }
        if gain_db < 0.0 {
            return Err(MdamError::Config("EDFA gain must be nonnegative".into()));
        }
        Ok(Self {
            kind,
            device_id: device_id.into(),
            features: [gain_db, tilt_db, 0.0, 0.0],
        })
    }

    pub fn span(device_id: impl Into<String>, length_km: f64, atten_db_per_km: f64) -> Result<Self> {
        if length_km <= 0.0 || atten_db_per_km < 0.0 {
            return Err(MdamError::Config(
                "span length must be positive and attenuation nonnegative".into(),
            ));
        }
        Ok(Self {
            kind: ComponentKind::Span,
            device_id: device_id.into(),
            features: [length_km, atten_db_per_km, 0.0, 0.0],
        })
    }

    pub fn wss(device_id: impl Into<String>, mean_atten_db: f64, ripple_amp_db: f64) -> Result<Self> {
        if mean_atten_db < 0.0 || ripple_amp_db < 0.0 {
            return Err(MdamError::Config("WSS attenuation must be nonnegative".into()));
        }
        Ok(Self {
            kind: ComponentKind::Wss,
            device_id: device_id.into(),
            features: [mean_atten_db, ripple_amp_db, 0.0, 0.0],
        })
    }
}

/// Ordered component list plus the grid the link runs on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub name: String,
    pub components: Vec<DeviceConfig>,
    pub grid: ChannelGrid,
}

impl Topology {
    pub fn new(name: impl Into<String>, components: Vec<DeviceConfig>, grid: ChannelGrid) -> Result<Self> {
        let topo = Self {
            name: name.into(),
            components,
            grid,
        };
        topo.validate()?;
        Ok(topo)
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(MdamError::InvalidTopology(format!(
                "topology '{}' has no components",
                self.name
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for c in &self.components {
            if !seen.insert(c.device_id.as_str()) {
                return Err(MdamError::InvalidTopology(format!(
                    "duplicate device_id '{}' in topology '{}'",
                    c.device_id, self.name
                )));
            }
        }
        Ok(())
    }

    /// Number of components N.
    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn edfa_count(&self) -> usize {
        self.components
            .iter()
            .filter(|c| matches!(c.kind, ComponentKind::Booster | ComponentKind::Preamp))
            .count()
    }

    /// Kinds present, deduplicated, in canonical order.
    pub fn kinds(&self) -> Vec<ComponentKind> {
        ComponentKind::ALL
            .iter()
            .copied()
            .filter(|k| self.components.iter().any(|c| c.kind == *k))
            .collect()
    }
}

/// Channel loading scheme a measurement was taken under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadingLabel {
    Fixed,
    Random,
    Goalpost,
}

impl LoadingLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            LoadingLabel::Fixed => "fixed",
            LoadingLabel::Random => "random",
            LoadingLabel::Goalpost => "goalpost",
        }
    }
}

impl std::fmt::Display for LoadingLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Ordered spectra `[P_0 .. P_N]` recorded along one topology under one
/// loading configuration. `spectra[0]` is the launch spectrum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSequence {
    pub topology_name: String,
    pub loading_label: LoadingLabel,
    pub spectra: Vec<PowerSpectrum>,
}

impl MeasurementSequence {
    /// Launch spectrum P_0.
    pub fn launch(&self) -> &PowerSpectrum {
        &self.spectra[0]
    }

    /// Spectrum after the final component.
    pub fn end(&self) -> &PowerSpectrum {
        self.spectra.last().expect("sequence has at least P_0")
    }

    pub fn mask(&self) -> &[bool] {
        &self.spectra[0].loaded
    }
}

/// A set of measurement sequences drawn from one topology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub topology_name: String,
    pub grid: ChannelGrid,
    pub seed: u64,
    pub counts: LoadingCounts,
    /// Hash of the generation config, stamped by the CLI so an artifact can
    /// be traced back to the exact settings that produced it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    pub sequences: Vec<MeasurementSequence>,
}

/// Sequence tallies per loading mode.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadingCounts {
    pub fixed: usize,
    pub random: usize,
    pub goalpost: usize,
}

impl LoadingCounts {
    pub fn total(&self) -> usize {
        self.fixed + self.random + self.goalpost
    }

    pub fn tally(sequences: &[MeasurementSequence]) -> Self {
        let mut c = LoadingCounts::default();
        for s in sequences {
            match s.loading_label {
                LoadingLabel::Fixed => c.fixed += 1,
                LoadingLabel::Random => c.random += 1,
                LoadingLabel::Goalpost => c.goalpost += 1,
            }
        }
        c
    }
}

/// Expand a span-length list into the component chain
/// `Booster, Span, Preamp` per span. All EDFAs share `edfa_gain_db` and
/// `tilt_db`; spans share the default attenuation coefficient.
pub fn build_topology(
    name: impl Into<String>,
    span_lengths_km: &[f64],
    edfa_gain_db: f64,
    tilt_db: f64,
) -> Result<Topology> {
    build_topology_with(
        name,
        span_lengths_km,
        edfa_gain_db,
        tilt_db,
        crate::linksim::DEFAULT_ATTEN_DB_PER_KM,
    )
}

/// As [`build_topology`] with an explicit span attenuation coefficient.
pub fn build_topology_with(
    name: impl Into<String>,
    span_lengths_km: &[f64],
    edfa_gain_db: f64,
    tilt_db: f64,
    atten_db_per_km: f64,
) -> Result<Topology> {
    if span_lengths_km.is_empty() {
        return Err(MdamError::InvalidTopology("empty span list".into()));
    }
    let mut components = Vec::with_capacity(span_lengths_km.len() * 3);
    for (s, &len) in span_lengths_km.iter().enumerate() {
        if !(len > 0.0) {
            return Err(MdamError::InvalidTopology(format!(
                "span {s} has nonpositive length {len}"
            )));
        }
        components.push(DeviceConfig::edfa(
            ComponentKind::Booster,
            format!("booster-{s}"),
            edfa_gain_db,
            tilt_db,
        )?);
        components.push(DeviceConfig::span(format!("span-{s}"), len, atten_db_per_km)?);
        components.push(DeviceConfig::edfa(
            ComponentKind::Preamp,
            format!("preamp-{s}"),
            edfa_gain_db,
            tilt_db,
        )?);
    }
    Topology::new(name, components, ChannelGrid::c_band())
}

/// Check a sequence against a topology: N+1 spectra, consistent masks,
/// matching grid sizes.
pub fn validate_sequence(seq: &MeasurementSequence, topo: &Topology) -> Result<()> {
    let expected = topo.len() + 1;
    if seq.spectra.len() != expected {
        return Err(MdamError::SequenceMismatch {
            index: seq.spectra.len(),
            detail: format!(
                "expected {expected} spectra for {} components, found {}",
                topo.len(),
                seq.spectra.len()
            ),
        });
    }
    let n_ch = topo.grid.num_channels;
    let mask0 = &seq.spectra[0].loaded;
    for (i, sp) in seq.spectra.iter().enumerate() {
        if sp.len() != n_ch {
            return Err(MdamError::SequenceMismatch {
                index: i,
                detail: format!("spectrum has {} channels, grid has {n_ch}", sp.len()),
            });
        }
        if &sp.loaded != mask0 {
            return Err(MdamError::SequenceMismatch {
                index: i,
                detail: "loading mask differs from launch mask".into(),
            });
        }
    }
    Ok(())
}
