//! Dataset schema, on-disk formats, splits and healthy-reference pooling.
//!
//! A dataset directory holds `manifest.csv` plus one `.axsg` signal file per
//! record:
//!
//! ```text
//! id,wheelset,place,orientation,rotation,load,speed,defect,path
//! 17,WA1,1,0,1,0,1,D2,sig/17.axsg
//! ```
//!
//! Signal files are `"AXSG"`, version `u32` = 1, sample count `u32`, sample
//! rate `f32`, then the samples as `f32`, all little-endian.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

pub const RAW_SAMPLE_RATE: f32 = 12_800.0;
pub const RAW_SAMPLE_COUNT: usize = 16_384;
pub const N_COMBINATIONS: usize = 32;

const SIGNAL_MAGIC: &[u8; 4] = b"AXSG";
const SIGNAL_VERSION: u32 = 1;
const MANIFEST_HEADER: [&str; 9] = [
    "id",
    "wheelset",
    "place",
    "orientation",
    "rotation",
    "load",
    "speed",
    "defect",
    "path",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Wheelset {
    Wa1,
    Wa2,
    Wa3,
}

impl Wheelset {
    pub const ALL: [Wheelset; 3] = [Wheelset::Wa1, Wheelset::Wa2, Wheelset::Wa3];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Wheelset::Wa1 => "WA1",
            Wheelset::Wa2 => "WA2",
            Wheelset::Wa3 => "WA3",
        }
    }
}

impl fmt::Display for Wheelset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Wheelset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "WA1" => Ok(Wheelset::Wa1),
            "WA2" => Ok(Wheelset::Wa2),
            "WA3" => Ok(Wheelset::Wa3),
            other => Err(Error::arg(format!("unknown wheelset {other:?}"))),
        }
    }
}

/// Crack severity. Depths are the induced crack sizes in millimetres.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DefectClass {
    D0,
    D1,
    D2,
    D3,
}

impl DefectClass {
    pub const ALL: [DefectClass; 4] = [
        DefectClass::D0,
        DefectClass::D1,
        DefectClass::D2,
        DefectClass::D3,
    ];
    pub const MAX_DEPTH_MM: f64 = 15.0;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn depth_mm(self) -> f64 {
        match self {
            DefectClass::D0 => 0.0,
            DefectClass::D1 => 5.7,
            DefectClass::D2 => 10.9,
            DefectClass::D3 => 15.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DefectClass::D0 => "D0",
            DefectClass::D1 => "D1",
            DefectClass::D2 => "D2",
            DefectClass::D3 => "D3",
        }
    }
}

impl fmt::Display for DefectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DefectClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "D0" => Ok(DefectClass::D0),
            "D1" => Ok(DefectClass::D1),
            "D2" => Ok(DefectClass::D2),
            "D3" => Ok(DefectClass::D3),
            other => Err(Error::arg(format!("unknown defect class {other:?}"))),
        }
    }
}

/// The five binary test conditions.
///
/// * place: 0 = RHS, 1 = LHS
/// * orientation: 0 = lengthwise, 1 = vertical
/// * rotation: 0 = counterclockwise, 1 = clockwise
/// * load: 0 = low, 1 = high (10 t)
/// * speed: 0 = 20 km/h, 1 = 50 km/h
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct ConditionVector {
    pub place: u8,
    pub orientation: u8,
    pub rotation: u8,
    pub load: u8,
    pub speed: u8,
}

impl ConditionVector {
    pub const FIELD_NAMES: [&'static str; 5] = ["place", "orientation", "rotation", "load", "speed"];

    pub fn new(place: u8, orientation: u8, rotation: u8, load: u8, speed: u8) -> Result<Self> {
        Self::from_bits([place, orientation, rotation, load, speed])
    }

    pub fn from_bits(bits: [u8; 5]) -> Result<Self> {
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::arg(format!("condition value {b} is not binary")));
        }
        Ok(ConditionVector {
            place: bits[0],
            orientation: bits[1],
            rotation: bits[2],
            load: bits[3],
            speed: bits[4],
        })
    }

    pub fn bits(&self) -> [u8; 5] {
        [self.place, self.orientation, self.rotation, self.load, self.speed]
    }

    /// Lexicographic index in `0..32` with `place` as the most significant bit.
    pub fn index(&self) -> usize {
        self.bits().iter().fold(0, |acc, &b| (acc << 1) | b as usize)
    }

    pub fn from_index(index: usize) -> Self {
        assert!(index < N_COMBINATIONS, "combination index {index} out of range");
        let bit = |shift: usize| ((index >> shift) & 1) as u8;
        ConditionVector {
            place: bit(4),
            orientation: bit(3),
            rotation: bit(2),
            load: bit(1),
            speed: bit(0),
        }
    }

    pub fn all() -> impl Iterator<Item = ConditionVector> {
        (0..N_COMBINATIONS).map(Self::from_index)
    }

    pub fn speed_kmh(&self) -> f64 {
        if self.speed == 1 {
            50.0
        } else {
            20.0
        }
    }

    /// Static network input: the five bits as reals.
    pub fn static_features(&self) -> [f32; 5] {
        self.bits().map(f32::from)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VibrationRecord {
    pub id: u64,
    pub wheelset: Wheelset,
    pub conditions: ConditionVector,
    pub defect: DefectClass,
    pub sample_rate: f32,
    pub samples: Vec<f32>,
}

impl VibrationRecord {
    /// Checks the raw-capture invariants (16384 finite samples at 12.8 kHz).
    pub fn validate_raw(&self) -> Result<()> {
        if self.samples.len() != RAW_SAMPLE_COUNT {
            return Err(Error::arg(format!(
                "record {}: expected {RAW_SAMPLE_COUNT} samples, found {}",
                self.id,
                self.samples.len()
            )));
        }
        if self.sample_rate != RAW_SAMPLE_RATE {
            return Err(Error::arg(format!(
                "record {}: sample rate {} Hz, expected {RAW_SAMPLE_RATE}",
                self.id, self.sample_rate
            )));
        }
        if let Some(i) = self.samples.iter().position(|x| !x.is_finite()) {
            return Err(Error::arg(format!("record {}: sample {i} is not finite", self.id)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Dataset {
    pub records: Vec<VibrationRecord>,
    pub provenance: String,
}

impl Dataset {
    pub fn new(records: Vec<VibrationRecord>, provenance: impl Into<String>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if !seen.insert(r.id) {
                return Err(Error::arg(format!("duplicate record id {}", r.id)));
            }
        }
        Ok(Dataset {
            records,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Map from record id to position in `records`.
    pub fn id_index(&self) -> HashMap<u64, usize> {
        self.records.iter().enumerate().map(|(i, r)| (r.id, i)).collect()
    }

    pub fn of_wheelset(&self, wa: Wheelset) -> impl Iterator<Item = &VibrationRecord> {
        self.records.iter().filter(move |r| r.wheelset == wa)
    }
}

fn signal_rel_path(id: u64) -> String {
    format!("sig/{id}.axsg")
}

pub fn encode_signal(sample_rate: f32, samples: &[f32]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + 4 * samples.len());
    buf.extend_from_slice(SIGNAL_MAGIC);
    buf.extend_from_slice(&SIGNAL_VERSION.to_le_bytes());
    buf.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    buf.extend_from_slice(&sample_rate.to_le_bytes());
    for s in samples {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    buf
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Decodes an `.axsg` payload into `(sample_rate, samples)`.
pub fn decode_signal(mut bytes: &[u8], id: u64) -> Result<(f32, Vec<f32>)> {
    let ctx = || format!("signal file of record {id}");
    let io_err = |source: io::Error| Error::RecordIo { id, source };
    let mut magic = [0u8; 4];
    bytes.read_exact(&mut magic).map_err(io_err)?;
    if &magic != SIGNAL_MAGIC {
        return Err(Error::format(ctx(), format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut bytes).map_err(io_err)?;
    if version != SIGNAL_VERSION {
        return Err(Error::format(ctx(), format!("unsupported version {version}")));
    }
    let count = read_u32(&mut bytes).map_err(io_err)? as usize;
    let rate = f32::from_bits(read_u32(&mut bytes).map_err(io_err)?);
    if bytes.len() < 4 * count {
        return Err(Error::RecordIo {
            id,
            source: io::Error::new(
                io::ErrorKind::UnexpectedEof,
                format!("truncated: {count} samples declared, {} bytes left", bytes.len()),
            ),
        });
    }
    let samples = bytes[..4 * count]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((rate, samples))
}

pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let sig_dir = dir.join("sig");
    fs::create_dir_all(&sig_dir).map_err(|e| Error::io(&sig_dir, e))?;

    let manifest_path = dir.join("manifest.csv");
    let mut manifest = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(&manifest_path)
        .map_err(|e| Error::format(manifest_path.display().to_string(), e.to_string()))?;
    let csv_err = |e: csv::Error| Error::format("manifest.csv", e.to_string());
    manifest.write_record(MANIFEST_HEADER).map_err(csv_err)?;

    for r in &dataset.records {
        let rel = signal_rel_path(r.id);
        let c = r.conditions;
        manifest
            .write_record([
                r.id.to_string(),
                r.wheelset.name().to_string(),
                c.place.to_string(),
                c.orientation.to_string(),
                c.rotation.to_string(),
                c.load.to_string(),
                c.speed.to_string(),
                r.defect.name().to_string(),
                rel.clone(),
            ])
            .map_err(csv_err)?;
        let path = dir.join(&rel);
        fs::write(&path, encode_signal(r.sample_rate, &r.samples))
            .map_err(|source| Error::RecordIo { id: r.id, source })?;
    }
    manifest.flush().map_err(|e| Error::io(&manifest_path, e))?;

    let prov_path = dir.join("provenance.txt");
    let mut f = fs::File::create(&prov_path).map_err(|e| Error::io(&prov_path, e))?;
    writeln!(f, "{}", dataset.provenance).map_err(|e| Error::io(&prov_path, e))?;
    Ok(())
}

/// One parsed manifest row.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub id: u64,
    pub wheelset: Wheelset,
    pub conditions: ConditionVector,
    pub defect: DefectClass,
    pub path: String,
}

pub fn parse_manifest_row(fields: &[&str]) -> Result<ManifestRow> {
    if fields.len() != MANIFEST_HEADER.len() {
        return Err(Error::format(
            "manifest.csv",
            format!("expected {} columns, found {}", MANIFEST_HEADER.len(), fields.len()),
        ));
    }
    let id: u64 = fields[0]
        .trim()
        .parse()
        .map_err(|_| Error::format("manifest.csv", format!("bad id {:?}", fields[0])))?;
    let bit = |i: usize| -> Result<u8> {
        fields[i]
            .trim()
            .parse::<u8>()
            .map_err(|_| Error::format("manifest.csv", format!("record {id}: bad {} {:?}", MANIFEST_HEADER[i], fields[i])))
    };
    let conditions = ConditionVector::new(bit(2)?, bit(3)?, bit(4)?, bit(5)?, bit(6)?)
        .map_err(|e| Error::format("manifest.csv", format!("record {id}: {e}")))?;
    Ok(ManifestRow {
        id,
        wheelset: fields[1].parse()?,
        conditions,
        defect: fields[7].parse()?,
        path: fields[8].trim().to_string(),
    })
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.csv");
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(&manifest_path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(&manifest_path, io),
            other => Error::format("manifest.csv", format!("{other:?}")),
        })?;
    let header = reader
        .headers()
        .map_err(|e| Error::format("manifest.csv", e.to_string()))?
        .clone();
    if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(Error::format("manifest.csv", format!("unexpected header {header:?}")));
    }

    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::format("manifest.csv", e.to_string()))?;
        let fields: Vec<&str> = row.iter().collect();
        let m = parse_manifest_row(&fields)?;
        let path: PathBuf = dir.join(&m.path);
        let bytes = fs::read(&path).map_err(|source| Error::RecordIo { id: m.id, source })?;
        let (sample_rate, samples) = decode_signal(&bytes, m.id)?;
        records.push(VibrationRecord {
            id: m.id,
            wheelset: m.wheelset,
            conditions: m.conditions,
            defect: m.defect,
            sample_rate,
            samples,
        });
    }

    let provenance = fs::read_to_string(dir.join("provenance.txt"))
        .map(|s| s.trim_end_matches('\n').to_string())
        .unwrap_or_else(|_| dir.display().to_string());
    Dataset::new(records, provenance)
}

/// Disjoint id sets for each stage. Each set is sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Splits {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test_wa1: Vec<u64>,
    pub test_wa2: Vec<u64>,
    pub test_wa3: Vec<u64>,
}

impl Splits {
    pub fn test_for(&self, wa: Wheelset) -> &[u64] {
        match wa {
            Wheelset::Wa1 => &self.test_wa1,
            Wheelset::Wa2 => &self.test_wa2,
            Wheelset::Wa3 => &self.test_wa3,
        }
    }

    pub fn all_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.train
            .iter()
            .chain(&self.val)
            .chain(&self.test_wa1)
            .chain(&self.test_wa2)
            .chain(&self.test_wa3)
            .copied()
    }
}

/// Train/validation/test proportions for the WA1 records.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.5,
            val: 0.3,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let r = [self.train, self.val, self.test];
        if r.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::arg(format!("split ratios must be non-negative, got {r:?}")));
        }
        let sum: f64 = r.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::arg(format!("split ratios must sum to 1, got {sum}")));
        }
        Ok(())
    }
}

/// Partitions the WA1 records into train/val/test and routes every WA2/WA3
/// record to its test set. Pass the dataset left over after
/// [`build_reference_pool`].
pub fn split_wa1(dataset: &Dataset, ratios: SplitRatios, seed: u64) -> Result<Splits> {
    ratios.validate()?;
    let mut wa1: Vec<u64> = dataset.of_wheelset(Wheelset::Wa1).map(|r| r.id).collect();
    if wa1.is_empty() {
        return Err(Error::arg("dataset contains no WA1 records"));
    }
    wa1.sort_unstable();
    let mut rng = rng::keyed(&[rng::TAG_SPLIT, seed]);
    wa1.shuffle(&mut rng);

    let n = wa1.len();
    let n_train = (n as f64 * ratios.train).floor() as usize;
    let n_val = ((n as f64 * ratios.val).floor() as usize).min(n - n_train);

    let sorted = |ids: &[u64]| {
        let mut v = ids.to_vec();
        v.sort_unstable();
        v
    };
    let collect = |wa: Wheelset| {
        let mut v: Vec<u64> = dataset.of_wheelset(wa).map(|r| r.id).collect();
        v.sort_unstable();
        v
    };
    Ok(Splits {
        train: sorted(&wa1[..n_train]),
        val: sorted(&wa1[n_train..n_train + n_val]),
        test_wa1: sorted(&wa1[n_train + n_val..]),
        test_wa2: collect(Wheelset::Wa2),
        test_wa3: collect(Wheelset::Wa3),
    })
}

/// Healthy reference recordings grouped by wheelset and condition combination.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct RefPool {
    cells: BTreeMap<(Wheelset, usize), Vec<u64>>,
}

impl RefPool {
    pub fn from_cells(cells: BTreeMap<(Wheelset, usize), Vec<u64>>) -> Self {
        RefPool { cells }
    }

    pub fn cell(&self, wa: Wheelset, conditions: ConditionVector) -> &[u64] {
        self.cells
            .get(&(wa, conditions.index()))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.cells.values().flatten().copied()
    }

    pub fn ids_of(&self, wa: Wheelset) -> impl Iterator<Item = u64> + '_ {
        self.cells
            .iter()
            .filter(move |((w, _), _)| *w == wa)
            .flat_map(|(_, v)| v.iter().copied())
    }

    pub fn len(&self) -> usize {
        self.cells.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cells(&self) -> impl Iterator<Item = (Wheelset, ConditionVector, &[u64])> {
        self.cells
            .iter()
            .map(|(&(w, c), v)| (w, ConditionVector::from_index(c), v.as_slice()))
    }
}

/// Moves `max(1, floor(fraction * n))` healthy records of every
/// (wheelset, combination) cell into a reference pool.
pub fn build_reference_pool(dataset: &Dataset, fraction: f64, seed: u64) -> Result<(RefPool, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::arg(format!("reference fraction must lie in (0, 1), got {fraction}")));
    }
    let mut healthy: BTreeMap<(Wheelset, usize), Vec<u64>> = BTreeMap::new();
    let mut present = Vec::new();
    for r in &dataset.records {
        if !present.contains(&r.wheelset) {
            present.push(r.wheelset);
        }
        if r.defect == DefectClass::D0 {
            healthy.entry((r.wheelset, r.conditions.index())).or_default().push(r.id);
        }
    }
    present.sort();

    let mut cells = BTreeMap::new();
    for &wa in &present {
        for combo in 0..N_COMBINATIONS {
            let Some(ids) = healthy.get(&(wa, combo)) else {
                let c = ConditionVector::from_index(combo);
                return Err(Error::arg(format!(
                    "no D0 records for {wa} conditions {:?}",
                    c.bits()
                )));
            };
            let mut ids = ids.clone();
            ids.sort_unstable();
            let mut r = rng::keyed(&[rng::TAG_POOL, seed, wa.index() as u64, combo as u64]);
            ids.shuffle(&mut r);
            let take = ((fraction * ids.len() as f64).floor() as usize).max(1);
            let mut chosen = ids[..take].to_vec();
            chosen.sort_unstable();
            cells.insert((wa, combo), chosen);
        }
    }

    let pooled: HashSet<u64> = cells.values().flatten().copied().collect();
    let rest = dataset
        .records
        .iter()
        .filter(|r| !pooled.contains(&r.id))
        .cloned()
        .collect();
    Ok((
        RefPool { cells },
        Dataset {
            records: rest,
            provenance: dataset.provenance.clone(),
        },
    ))
}

/// Draws a healthy reference id uniformly from the matching pool cell, or
/// from the whole wheelset when that cell is empty.
pub fn draw_reference(
    pool: &RefPool,
    wa: Wheelset,
    conditions: ConditionVector,
    rng: &mut impl Rng,
) -> Result<u64> {
    let cell = pool.cell(wa, conditions);
    if !cell.is_empty() {
        return Ok(cell[rng.random_range(0..cell.len())]);
    }
    let fallback: Vec<u64> = pool.ids_of(wa).collect();
    if fallback.is_empty() {
        return Err(Error::arg(format!("reference pool holds no records for {wa}")));
    }
    Ok(fallback[rng.random_range(0..fallback.len())])
}
