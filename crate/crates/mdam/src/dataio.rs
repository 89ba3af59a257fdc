//! Persistence: line-delimited JSON datasets and a binary checkpoint
//! container with independently addressable, CRC-guarded parameter groups.
//!
//! The checkpoint layout exists to serve transfer workflows: the encoder and
//! every decoder live under their own named group, so a reader can pull the
//! encoder plus any subset of decoders without touching the rest.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Shape, Tensor};
use crate::domain::{ChannelGrid, ComponentKind, Dataset, LoadingCounts, MeasurementSequence};
use crate::error::{MdamError, Result};
use crate::model::{
    DecoderKey, DecoderParams, EncoderParams, LstmLayer, ModelBundle, ModelConfig, NormStats,
};

/// Version stamp shared by the dataset header and checkpoint container.
pub const SCHEMA_VERSION: u32 = 1;

const CHECKPOINT_MAGIC: &[u8; 4] = b"MDAM";

/// Write `bytes` to `path` through a sibling temp file plus rename, so
/// readers never observe a half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let tmp = match dir {
        Some(d) => tempfile::NamedTempFile::new_in(d)?,
        None => tempfile::NamedTempFile::new_in(".")?,
    };
    tmp.as_file().write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| MdamError::Io(e.error))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Datasets: one JSON header line, then one JSON sequence per line.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetHeader {
    schema_version: u32,
    topology_name: String,
    grid: ChannelGrid,
    seed: u64,
    counts: LoadingCounts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
}

pub fn save_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let header = DatasetHeader {
        schema_version: SCHEMA_VERSION,
        topology_name: dataset.topology_name.clone(),
        grid: dataset.grid.clone(),
        seed: dataset.seed,
        counts: dataset.counts,
        config_hash: dataset.config_hash.clone(),
    };
    let mut out = Vec::new();
    serde_json::to_writer(&mut out, &header)?;
    out.push(b'\n');
    for seq in &dataset.sequences {
        serde_json::to_writer(&mut out, seq)?;
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| MdamError::CorruptFile(format!("{}: empty dataset file", path.display())))??;
    let header: DatasetHeader = serde_json::from_str(&header_line)?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(MdamError::SchemaVersion {
            found: header.schema_version,
            expected: SCHEMA_VERSION,
        });
    }

    let mut sequences = Vec::with_capacity(header.counts.total());
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let seq: MeasurementSequence = serde_json::from_str(&line)?;
        if seq.topology_name != header.topology_name {
            return Err(MdamError::SequenceMismatch {
                index: i,
                detail: format!(
                    "record topology '{}' does not match header '{}'",
                    seq.topology_name, header.topology_name
                ),
            });
        }
        if seq.spectra.is_empty() {
            return Err(MdamError::SequenceMismatch {
                index: i,
                detail: "record has no spectra".into(),
            });
        }
        for spec in &seq.spectra {
            if spec.len() != header.grid.num_channels {
                return Err(MdamError::SequenceMismatch {
                    index: i,
                    detail: format!(
                        "spectrum has {} channels, grid has {}",
                        spec.len(),
                        header.grid.num_channels
                    ),
                });
            }
        }
        sequences.push(seq);
    }

    if sequences.len() != header.counts.total() {
        return Err(MdamError::CorruptFile(format!(
            "{}: header promises {} records, file holds {} (truncated or padded)",
            path.display(),
            header.counts.total(),
            sequences.len()
        )));
    }
    let tally = LoadingCounts::tally(&sequences);
    if tally != header.counts {
        return Err(MdamError::CorruptFile(format!(
            "{}: header counts {:?} disagree with record tallies {:?}",
            path.display(),
            header.counts,
            tally
        )));
    }

    Ok(Dataset {
        topology_name: header.topology_name,
        grid: header.grid,
        seed: header.seed,
        counts: header.counts,
        config_hash: header.config_hash,
        sequences,
    })
}

// ---------------------------------------------------------------------------
// Checkpoints: magic, version, then named groups with per-group CRC32.
//
//   "MDAM" | version u32 | group count u32 | groups...
//   group: name_len u32 | name utf-8 | payload_len u64 | payload | crc32 u32
//
// Parameter payloads hold tensors back to back, each as a shape tag, two
// u64 dims, and little-endian f64 data. All integers are little-endian.
// ---------------------------------------------------------------------------

pub const GROUP_META: &str = "meta";
pub const GROUP_ENCODER: &str = "encoder";

pub fn decoder_group_name(key: &DecoderKey) -> String {
    match key {
        DecoderKey::Base(kind) => format!("decoder-base/{}", kind.as_str()),
        DecoderKey::Device(id) => format!("decoder/{id}"),
    }
}

fn parse_decoder_group_name(name: &str) -> Option<DecoderKey> {
    if let Some(kind) = name.strip_prefix("decoder-base/") {
        let kind = ComponentKind::ALL.into_iter().find(|k| k.as_str() == kind)?;
        return Some(DecoderKey::Base(kind));
    }
    name.strip_prefix("decoder/")
        .map(|id| DecoderKey::Device(id.to_string()))
}

/// JSON group carrying everything that is not raw parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    pub config: ModelConfig,
    pub norm: NormStats,
    /// Free-form provenance (seed, config hash, phase, ...).
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

fn push_tensor(out: &mut Vec<u8>, t: &Tensor) {
    let (tag, d0, d1): (u8, u64, u64) = match t.shape {
        Shape::Scalar => (0, 0, 0),
        Shape::Vector(n) => (1, n as u64, 0),
        Shape::Matrix(r, c) => (2, r as u64, c as u64),
    };
    out.push(tag);
    out.extend_from_slice(&d0.to_le_bytes());
    out.extend_from_slice(&d1.to_le_bytes());
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(MdamError::CorruptFile(format!(
                "{}: unexpected end of data at offset {}",
                self.what, self.pos
            ))),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn read_tensor(cur: &mut Cursor<'_>) -> Result<Tensor> {
    let tag = cur.u8()?;
    let d0 = cur.u64()? as usize;
    let d1 = cur.u64()? as usize;
    let shape = match tag {
        0 => Shape::Scalar,
        1 => Shape::Vector(d0),
        2 => Shape::Matrix(d0, d1),
        other => {
            return Err(MdamError::CorruptFile(format!(
                "{}: unknown tensor tag {other}",
                cur.what
            )))
        }
    };
    let len = shape.len();
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        data.push(cur.f64()?);
    }
    Ok(Tensor { shape, data })
}

fn encode_tensors<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> Vec<u8> {
    let mut out = Vec::new();
    for t in tensors {
        push_tensor(&mut out, t);
    }
    out
}

fn decode_tensors(name: &str, payload: &[u8], expect: usize) -> Result<Vec<Tensor>> {
    let mut cur = Cursor {
        buf: payload,
        pos: 0,
        what: name,
    };
    let mut tensors = Vec::with_capacity(expect);
    while !cur.done() {
        tensors.push(read_tensor(&mut cur)?);
    }
    if tensors.len() != expect {
        return Err(MdamError::CorruptFile(format!(
            "group '{name}' holds {} tensors, expected {expect}",
            tensors.len()
        )));
    }
    Ok(tensors)
}

/// Serialize a whole container. Exposed at the byte level so tests can craft
/// malformed files; normal callers use [`save_checkpoint`].
pub fn encode_container(groups: &[(String, Vec<u8>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&SCHEMA_VERSION.to_le_bytes());
    out.extend_from_slice(&(groups.len() as u32).to_le_bytes());
    for (name, payload) in groups {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(payload);
        out.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
    }
    out
}

fn decode_container(path: &Path, bytes: &[u8]) -> Result<BTreeMap<String, Vec<u8>>> {
    let what = path.display().to_string();
    let mut cur = Cursor {
        buf: bytes,
        pos: 0,
        what: &what,
    };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(MdamError::CorruptFile(format!(
            "{what}: missing checkpoint magic"
        )));
    }
    let version = cur.u32()?;
    if version != SCHEMA_VERSION {
        return Err(MdamError::SchemaVersion {
            found: version,
            expected: SCHEMA_VERSION,
        });
    }
    let count = cur.u32()? as usize;
    let mut groups = BTreeMap::new();
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| MdamError::CorruptFile(format!("{what}: group name is not utf-8")))?
            .to_string();
        let payload_len = cur.u64()? as usize;
        let payload = cur.take(payload_len)?.to_vec();
        let stored_crc = cur.u32()?;
        let actual = crc32fast::hash(&payload);
        if stored_crc != actual {
            return Err(MdamError::CorruptFile(format!(
                "{what}: group '{name}' checksum mismatch (stored {stored_crc:08x}, computed {actual:08x})"
            )));
        }
        if groups.insert(name.clone(), payload).is_some() {
            return Err(MdamError::CorruptFile(format!(
                "{what}: duplicate group '{name}'"
            )));
        }
    }
    if !cur.done() {
        return Err(MdamError::CorruptFile(format!(
            "{what}: {} trailing bytes after last group",
            bytes.len() - cur.pos
        )));
    }
    Ok(groups)
}

pub fn save_checkpoint(
    path: &Path,
    bundle: &ModelBundle,
    extra: BTreeMap<String, serde_json::Value>,
) -> Result<()> {
    let meta = CheckpointMeta {
        schema_version: SCHEMA_VERSION,
        config: bundle.config,
        norm: bundle.norm.clone(),
        extra,
    };
    let mut groups: Vec<(String, Vec<u8>)> = Vec::new();
    groups.push((GROUP_META.to_string(), serde_json::to_vec(&meta)?));
    groups.push((
        GROUP_ENCODER.to_string(),
        encode_tensors(bundle.encoder.layers.iter().flat_map(|l| l.tensors())),
    ));
    for (kind, dec) in &bundle.decoder_bases {
        groups.push((
            decoder_group_name(&DecoderKey::Base(*kind)),
            encode_tensors(dec.tensors()),
        ));
    }
    for (id, dec) in &bundle.decoders {
        groups.push((
            decoder_group_name(&DecoderKey::Device(id.clone())),
            encode_tensors(dec.tensors()),
        ));
    }
    write_atomic(path, &encode_container(&groups))
}

/// An opened checkpoint with all groups CRC-verified and the meta group
/// parsed. Parameter groups decode lazily on request.
#[derive(Debug)]
pub struct CheckpointReader {
    groups: BTreeMap<String, Vec<u8>>,
    meta: CheckpointMeta,
}

impl CheckpointReader {
    pub fn open(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        let groups = decode_container(path, &bytes)?;
        let meta_bytes = groups
            .get(GROUP_META)
            .ok_or_else(|| MdamError::MissingGroup(GROUP_META.into()))?;
        let meta: CheckpointMeta = serde_json::from_slice(meta_bytes)?;
        if meta.schema_version != SCHEMA_VERSION {
            return Err(MdamError::SchemaVersion {
                found: meta.schema_version,
                expected: SCHEMA_VERSION,
            });
        }
        meta.config.validate()?;
        Ok(Self { groups, meta })
    }

    pub fn meta(&self) -> &CheckpointMeta {
        &self.meta
    }

    pub fn group_names(&self) -> impl Iterator<Item = &str> {
        self.groups.keys().map(String::as_str)
    }

    /// Keys of every decoder group present, bases before devices.
    pub fn decoder_keys(&self) -> Vec<DecoderKey> {
        let mut keys: Vec<DecoderKey> = self
            .groups
            .keys()
            .filter_map(|n| parse_decoder_group_name(n))
            .collect();
        keys.sort();
        keys
    }

    pub fn load_encoder(&self) -> Result<EncoderParams> {
        let payload = self
            .groups
            .get(GROUP_ENCODER)
            .ok_or_else(|| MdamError::MissingGroup(GROUP_ENCODER.into()))?;
        let cfg = &self.meta.config;
        let tensors = decode_tensors(GROUP_ENCODER, payload, cfg.num_layers * 12)?;
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for (li, chunk) in tensors.chunks_exact(12).enumerate() {
            let input = if li == 0 { cfg.channels } else { cfg.hidden };
            let mut layer = LstmLayer::zeros(input, cfg.hidden);
            for (slot, (dst, src)) in layer.tensors_mut().into_iter().zip(chunk).enumerate() {
                if dst.shape != src.shape {
                    return Err(MdamError::CorruptFile(format!(
                        "encoder layer {li} tensor {slot} has shape {:?}, expected {:?}",
                        src.shape.dims(),
                        dst.shape.dims()
                    )));
                }
                *dst = src.clone();
            }
            layers.push(layer);
        }
        Ok(EncoderParams { layers })
    }

    pub fn load_decoder(&self, key: &DecoderKey) -> Result<DecoderParams> {
        let name = decoder_group_name(key);
        let payload = self
            .groups
            .get(&name)
            .ok_or_else(|| MdamError::MissingGroup(name.clone()))?;
        let tensors = decode_tensors(&name, payload, 6)?;
        let mut dec = DecoderParams::zeros(&self.meta.config);
        for (slot, (dst, src)) in dec.tensors_mut().into_iter().zip(&tensors).enumerate() {
            if dst.shape != src.shape {
                return Err(MdamError::CorruptFile(format!(
                    "group '{name}' tensor {slot} has shape {:?}, expected {:?}",
                    src.shape.dims(),
                    dst.shape.dims()
                )));
            }
            *dst = src.clone();
        }
        Ok(dec)
    }

    /// Rebuild a bundle from the encoder plus the decoder groups `keep`
    /// selects. Kind bases the filter drops simply stay absent; a bundle
    /// needs at least one decoder to be usable.
    pub fn load_bundle_filtered(&self, keep: impl Fn(&DecoderKey) -> bool) -> Result<ModelBundle> {
        let encoder = self.load_encoder()?;
        let mut decoder_bases = BTreeMap::new();
        let mut decoders = BTreeMap::new();
        for key in self.decoder_keys() {
            if !keep(&key) {
                continue;
            }
            let dec = self.load_decoder(&key)?;
            match key {
                DecoderKey::Base(kind) => {
                    decoder_bases.insert(kind, dec);
                }
                DecoderKey::Device(id) => {
                    decoders.insert(id, dec);
                }
            }
        }
        if decoder_bases.is_empty() && decoders.is_empty() {
            return Err(MdamError::MissingGroup(
                "no decoder group matched the load filter".into(),
            ));
        }
        Ok(ModelBundle {
            config: self.meta.config,
            encoder,
            decoder_bases,
            decoders,
            norm: self.meta.norm.clone(),
        })
    }

    pub fn load_bundle(&self) -> Result<ModelBundle> {
        self.load_bundle_filtered(|_| true)
    }
}

/// Convenience wrapper: open and fully load in one call.
pub fn load_checkpoint(path: &Path) -> Result<ModelBundle> {
    CheckpointReader::open(path)?.load_bundle()
}

/// Generic JSON artifact helpers (physics configs, reports, train configs).
pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::ComponentKind;
    use crate::linksim::generate_preset;

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    fn small_bundle(seed: u64) -> ModelBundle {
        let cfg = ModelConfig::downsized(6, 5);
        let norm = NormStats::new(-4.0, 3.0).unwrap();
        ModelBundle::init(
            &cfg,
            &[ComponentKind::Booster, ComponentKind::Span],
            norm,
            seed,
        )
        .unwrap()
    }

    fn bundle_bits(b: &ModelBundle) -> Vec<u64> {
        let mut bits = Vec::new();
        for layer in &b.encoder.layers {
            for t in layer.tensors() {
                bits.extend(t.data.iter().map(|v| v.to_bits()));
            }
        }
        for dec in b.decoder_bases.values().chain(b.decoders.values()) {
            for t in dec.tensors() {
                bits.extend(t.data.iter().map(|v| v.to_bits()));
            }
        }
        bits
    }

    #[test]
    fn dataset_round_trip_is_identity() {
        let dir = tmpdir();
        let path = dir.path().join("ds.jsonl");
        let ds = generate_preset("tl-target", 7).unwrap();
        save_dataset(&path, &ds).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn dataset_wrong_schema_version_rejected() {
        let dir = tmpdir();
        let path = dir.path().join("ds.jsonl");
        let ds = generate_preset("tl-target", 7).unwrap();
        save_dataset(&path, &ds).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let bumped = text.replacen("\"schema_version\":1", "\"schema_version\":9", 1);
        assert_ne!(text, bumped);
        fs::write(&path, bumped).unwrap();
        match load_dataset(&path) {
            Err(MdamError::SchemaVersion { found: 9, expected }) => {
                assert_eq!(expected, SCHEMA_VERSION)
            }
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn dataset_truncation_detected() {
        let dir = tmpdir();
        let path = dir.path().join("ds.jsonl");
        let ds = generate_preset("tl-target", 7).unwrap();
        save_dataset(&path, &ds).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines.pop();
        fs::write(&path, lines.join("\n")).unwrap();
        match load_dataset(&path) {
            Err(MdamError::CorruptFile(msg)) => assert!(msg.contains("truncated"), "{msg}"),
            other => panic!("expected corrupt-file error, got {other:?}"),
        }
    }

    #[test]
    fn dataset_tally_mismatch_detected() {
        let dir = tmpdir();
        let path = dir.path().join("ds.jsonl");
        let ds = generate_preset("tl-target", 7).unwrap();
        save_dataset(&path, &ds).unwrap();
        // relabel one record so per-label tallies disagree with the header
        let text = fs::read_to_string(&path).unwrap();
        let swapped = text.replacen("\"loading_label\":\"fixed\"", "\"loading_label\":\"random\"", 1);
        assert_ne!(text, swapped);
        fs::write(&path, swapped).unwrap();
        match load_dataset(&path) {
            Err(MdamError::CorruptFile(msg)) => assert!(msg.contains("tallies"), "{msg}"),
            other => panic!("expected tally error, got {other:?}"),
        }
    }

    #[test]
    fn full_lab_preset_file_round_trips() {
        let dir = tmpdir();
        let path = dir.path().join("lab.jsonl");
        let ds = generate_preset("lab-base", 1).unwrap();
        assert_eq!(ds.sequences.len(), 3168);
        save_dataset(&path, &ds).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back.sequences.len(), 3168);
        assert_eq!(back.counts, ds.counts);
        // spot-check float fidelity on an arbitrary record
        let a = &ds.sequences[1234].spectra[2].powers_dbm;
        let b = &back.sequences[1234].spectra[2].powers_dbm;
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let dir = tmpdir();
        let path = dir.path().join("model.ckpt");
        let mut bundle = small_bundle(11);
        // include a device decoder so all three group flavors are exercised
        bundle
            .decoders
            .insert("dev-1".into(), bundle.decoder_bases[&ComponentKind::Span].clone());
        let mut extra = BTreeMap::new();
        extra.insert("seed".to_string(), serde_json::json!(11));
        save_checkpoint(&path, &bundle, extra.clone()).unwrap();

        let reader = CheckpointReader::open(&path).unwrap();
        assert_eq!(reader.meta().extra, extra);
        let back = reader.load_bundle().unwrap();
        assert_eq!(bundle_bits(&bundle), bundle_bits(&back));
        assert_eq!(bundle, back);
    }

    #[test]
    fn partial_load_keeps_only_requested_groups() {
        let dir = tmpdir();
        let path = dir.path().join("model.ckpt");
        let mut bundle = small_bundle(3);
        bundle
            .decoders
            .insert("dev-a".into(), bundle.decoder_bases[&ComponentKind::Span].clone());
        bundle
            .decoders
            .insert("dev-b".into(), bundle.decoder_bases[&ComponentKind::Booster].clone());
        save_checkpoint(&path, &bundle, BTreeMap::new()).unwrap();

        let reader = CheckpointReader::open(&path).unwrap();
        // encoder + kind bases only
        let bases = reader
            .load_bundle_filtered(|k| matches!(k, DecoderKey::Base(_)))
            .unwrap();
        assert!(bases.decoders.is_empty());
        assert_eq!(bases.decoder_bases.len(), 2);
        assert_eq!(bases.encoder, bundle.encoder);

        // a single named device decoder
        let one = reader
            .load_bundle_filtered(|k| matches!(k, DecoderKey::Device(id) if id == "dev-a"))
            .unwrap();
        assert_eq!(one.decoders.len(), 1);
        assert!(one.decoder_bases.is_empty());
        assert_eq!(one.decoders["dev-a"], bundle.decoders["dev-a"]);

        // encoder alone is also reachable
        let enc = reader.load_encoder().unwrap();
        assert_eq!(enc, bundle.encoder);
    }

    #[test]
    fn corrupting_one_byte_fails_the_checksum() {
        let dir = tmpdir();
        let path = dir.path().join("model.ckpt");
        let bundle = small_bundle(5);
        save_checkpoint(&path, &bundle, BTreeMap::new()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        // flip a bit deep inside the last group's payload
        let target = bytes.len() - 16;
        bytes[target] ^= 0x01;
        fs::write(&path, &bytes).unwrap();
        match CheckpointReader::open(&path) {
            Err(MdamError::CorruptFile(msg)) => assert!(msg.contains("checksum"), "{msg}"),
            other => panic!("expected checksum error, got {other:?}"),
        }
    }

    #[test]
    fn missing_groups_are_named() {
        let dir = tmpdir();
        let path = dir.path().join("model.ckpt");
        let bundle = small_bundle(8);
        save_checkpoint(&path, &bundle, BTreeMap::new()).unwrap();
        let reader = CheckpointReader::open(&path).unwrap();
        match reader.load_decoder(&DecoderKey::Device("ghost".into())) {
            Err(MdamError::MissingGroup(name)) => assert_eq!(name, "decoder/ghost"),
            other => panic!("expected missing group, got {other:?}"),
        }

        // a container without an encoder group cannot produce a bundle
        let meta = CheckpointMeta {
            schema_version: SCHEMA_VERSION,
            config: bundle.config,
            norm: bundle.norm.clone(),
            extra: BTreeMap::new(),
        };
        let groups = vec![(GROUP_META.to_string(), serde_json::to_vec(&meta).unwrap())];
        write_atomic(&path, &encode_container(&groups)).unwrap();
        let reader = CheckpointReader::open(&path).unwrap();
        match reader.load_bundle() {
            Err(MdamError::MissingGroup(name)) => assert_eq!(name, GROUP_ENCODER),
            other => panic!("expected missing encoder, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let dir = tmpdir();
        let path = dir.path().join("model.ckpt");
        fs::write(&path, b"NOPE....").unwrap();
        assert!(matches!(
            CheckpointReader::open(&path),
            Err(MdamError::CorruptFile(_))
        ));

        let bundle = small_bundle(2);
        save_checkpoint(&path, &bundle, BTreeMap::new()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4] = 99; // version field
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            CheckpointReader::open(&path),
            Err(MdamError::SchemaVersion { found: 99, .. })
        ));
    }

    #[test]
    fn atomic_write_leaves_no_temp_files() {
        let dir = tmpdir();
        let path = dir.path().join("out.json");
        save_json(&path, &serde_json::json!({"k": 1})).unwrap();
        let names: Vec<String> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, vec!["out.json".to_string()]);
        let v: serde_json::Value = load_json(&path).unwrap();
        assert_eq!(v["k"], 1);
    }
}
