//! Depth frames and the L2D pretraining datasets built from them.
//!
//! A frame pairs a metric depth raster with an instance-id raster and a
//! per-frame id -> label table. The per-instance ("inst") dataset records one
//! [`DepthRecord`] per instance; the per-class ("loo") dataset pools those
//! records by label.
//!
//! A pixel is valid when its depth is finite and strictly positive.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const FRAME_MAGIC: &[u8; 4] = b"DHF1";

/// Uniform depth bins over `[min_depth, max_depth)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinningSpec {
    pub min_depth: f64,
    pub max_depth: f64,
    pub bin_count: usize,
}

impl Default for BinningSpec {
    fn default() -> Self {
        Self {
            min_depth: 0.0,
            max_depth: 10.0,
            bin_count: 256,
        }
    }
}

impl BinningSpec {
    pub fn new(min_depth: f64, max_depth: f64, bin_count: usize) -> Result<Self> {
        let spec = Self {
            min_depth,
            max_depth,
            bin_count,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min_depth.is_finite() && self.max_depth.is_finite() && self.min_depth < self.max_depth) {
            return Err(Error::invalid(format!(
                "binning range [{}, {}) is empty or not finite",
                self.min_depth, self.max_depth
            )));
        }
        if self.bin_count == 0 {
            return Err(Error::invalid("bin count must be at least 1"));
        }
        Ok(())
    }

    pub fn bin_width(&self) -> f64 {
        (self.max_depth - self.min_depth) / self.bin_count as f64
    }

    /// Bin of a valid depth. Depths at or past `max_depth` land in the last
    /// bin, depths below `min_depth` in the first.
    pub fn bin_of(&self, depth: f64) -> usize {
        let k = ((depth - self.min_depth) / self.bin_width()).floor();
        if k <= 0.0 {
            0
        } else {
            (k as usize).min(self.bin_count - 1)
        }
    }

    pub fn bin_center(&self, bin: usize) -> f64 {
        self.min_depth + (bin as f64 + 0.5) * self.bin_width()
    }
}

pub fn is_valid_depth(d: f64) -> bool {
    d.is_finite() && d > 0.0
}

/// Normalized depth-bin probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DepthHistogram {
    probs: Vec<f64>,
}

impl DepthHistogram {
    /// Wraps probabilities, checking they are non-negative and sum to 1 within 1e-6.
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("histogram has no bins"));
        }
        if probs.iter().any(|&p| !(p.is_finite() && p >= 0.0)) {
            return Err(Error::invalid(
                "histogram probabilities must be finite and non-negative",
            ));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("histogram sums to {total}, expected 1")));
        }
        Ok(Self { probs })
    }

    /// Normalizes integer bin counts. `counts` must contain at least one pixel.
    pub fn from_counts(counts: &[u64]) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::invalid("no valid depth pixels"));
        }
        let total = total as f64;
        Ok(Self {
            probs: counts.iter().map(|&c| c as f64 / total).collect(),
        })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Per-bin integer counts of the valid depths and the number of valid depths.
pub fn bin_counts(depths: impl IntoIterator<Item = f64>, spec: &BinningSpec) -> (Vec<u64>, u64) {
    let mut counts = vec![0u64; spec.bin_count];
    let mut total = 0;
    for d in depths.into_iter().filter(|&d| is_valid_depth(d)) {
        counts[spec.bin_of(d)] += 1;
        total += 1;
    }
    (counts, total)
}

pub fn histogram(depths: &[f64], spec: &BinningSpec) -> Result<DepthHistogram> {
    let (counts, _) = bin_counts(depths.iter().copied(), spec);
    DepthHistogram::from_counts(&counts)
}

/// Arithmetic mean of the valid depths.
pub fn mean_depth(depths: &[f64]) -> Result<f64> {
    let (sum, n) = depths
        .iter()
        .filter(|&&d| is_valid_depth(d))
        .fold((0.0, 0usize), |(s, n), &d| (s + d, n + 1));
    if n == 0 {
        return Err(Error::invalid("no valid depth pixels"));
    }
    Ok(sum / n as f64)
}

/// Probability-weighted sum of bin centres.
pub fn expected_depth(hist: &DepthHistogram, spec: &BinningSpec) -> f64 {
    hist.probs.iter().enumerate().map(|(k, p)| p * spec.bin_center(k)).sum()
}

/// One data point: a label with pixel count, mean depth and optional histogram.
///
/// Serves as both the per-instance and the per-class record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthRecord {
    pub label: String,
    pub pixel_count: u64,
    pub mean_depth: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub histogram: Option<DepthHistogram>,
}

pub type InstanceRecord = DepthRecord;
pub type ClassRecord = DepthRecord;

/// Depth raster plus instance ids and their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthFrame {
    height: usize,
    width: usize,
    depth: Vec<f32>,
    instance_ids: Vec<u16>,
    instance_table: BTreeMap<u16, String>,
}

impl DepthFrame {
    pub fn new(
        height: usize,
        width: usize,
        depth: Vec<f32>,
        instance_ids: Vec<u16>,
        instance_table: BTreeMap<u16, String>,
    ) -> Result<Self> {
        let n = height
            .checked_mul(width)
            .ok_or_else(|| Error::invalid("frame dimensions overflow"))?;
        if depth.len() != n || instance_ids.len() != n {
            return Err(Error::invalid(format!(
                "frame is {height}x{width} but has {} depth and {} id pixels",
                depth.len(),
                instance_ids.len()
            )));
        }
        if let Some(id) = instance_ids.iter().find(|id| !instance_table.contains_key(id)) {
            return Err(Error::invalid(format!(
                "instance id {id} appears in the raster but not in the label table"
            )));
        }
        Ok(Self {
            height,
            width,
            depth,
            instance_ids,
            instance_table,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> &[f32] {
        &self.depth
    }

    pub fn instance_ids(&self) -> &[u16] {
        &self.instance_ids
    }

    pub fn instance_table(&self) -> &BTreeMap<u16, String> {
        &self.instance_table
    }

    pub fn label_of(&self, id: u16) -> &str {
        &self.instance_table[&id]
    }

    /// Label of each pixel, row-major.
    pub fn pixel_labels(&self) -> impl Iterator<Item = &str> + '_ {
        self.instance_ids.iter().map(|id| self.label_of(*id))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::with_capacity(16 + self.depth.len() * 6);
        self.write_to(&mut buf).map_err(|e| Error::io(path, e))?;
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(FRAME_MAGIC)?;
        w.write_u32::<LittleEndian>(to_u32(self.height)?)?;
        w.write_u32::<LittleEndian>(to_u32(self.width)?)?;
        w.write_u32::<LittleEndian>(to_u32(self.instance_table.len())?)?;
        for (&id, label) in &self.instance_table {
            let len = u16::try_from(label.len())
                .map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidInput, "label longer than 65535 bytes"))?;
            w.write_u16::<LittleEndian>(id)?;
            w.write_u16::<LittleEndian>(len)?;
            w.write_all(label.as_bytes())?;
        }
        for &d in &self.depth {
            w.write_f32::<LittleEndian>(d)?;
        }
        for &id in &self.instance_ids {
            w.write_u16::<LittleEndian>(id)?;
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let fail = |m: &str| Error::format(origin, m);
        let truncated = |_| fail("truncated payload");
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| fail("bad magic"))?;
        if &magic != FRAME_MAGIC {
            return Err(fail("bad magic"));
        }
        let height = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let width = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let table_len = r.read_u32::<LittleEndian>().map_err(truncated)?;
        let mut table = BTreeMap::new();
        for _ in 0..table_len {
            let id = r.read_u16::<LittleEndian>().map_err(truncated)?;
            let len = r.read_u16::<LittleEndian>().map_err(truncated)? as usize;
            if r.len() < len {
                return Err(fail("truncated payload"));
            }
            let (label, rest) = r.split_at(len);
            r = rest;
            let label = std::str::from_utf8(label).map_err(|_| fail("label is not UTF-8"))?;
            if table.insert(id, label.to_owned()).is_some() {
                return Err(Error::format(origin, format!("instance id {id} listed twice")));
            }
        }
        let n = height
            .checked_mul(width)
            .ok_or_else(|| fail("frame dimensions overflow"))?;
        if r.len() < n * 6 {
            return Err(fail("truncated payload"));
        }
        if r.len() > n * 6 {
            return Err(fail("trailing bytes after payload"));
        }
        let mut depth = vec![0f32; n];
        r.read_f32_into::<LittleEndian>(&mut depth).map_err(truncated)?;
        let mut ids = vec![0u16; n];
        r.read_u16_into::<LittleEndian>(&mut ids).map_err(truncated)?;
        Self::new(height, width, depth, ids, table).map_err(|e| Error::format(origin, e.to_string()))
    }
}

fn to_u32(v: usize) -> std::io::Result<u32> {
    u32::try_from(v).map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidInput, "value exceeds u32"))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct InstanceExtraction {
    pub records: Vec<InstanceRecord>,
    /// Instances with no valid depth pixel.
    pub dropped: usize,
}

/// One record per instance id with at least one valid depth pixel, in id order.
pub fn extract_instances(frame: &DepthFrame, spec: &BinningSpec) -> InstanceExtraction {
    struct Acc {
        counts: Vec<u64>,
        sum: f64,
        valid: u64,
    }
    let mut per_id: BTreeMap<u16, Acc> = BTreeMap::new();
    for (&id, &d) in frame.instance_ids.iter().zip(&frame.depth) {
        let acc = per_id.entry(id).or_insert_with(|| Acc {
            counts: vec![0; spec.bin_count],
            sum: 0.0,
            valid: 0,
        });
        let d = f64::from(d);
        if is_valid_depth(d) {
            acc.counts[spec.bin_of(d)] += 1;
            acc.sum += d;
            acc.valid += 1;
        }
    }
    let mut out = InstanceExtraction::default();
    for (id, acc) in per_id {
        if acc.valid == 0 {
            out.dropped += 1;
            continue;
        }
        out.records.push(DepthRecord {
            label: frame.label_of(id).to_owned(),
            pixel_count: acc.valid,
            mean_depth: acc.sum / acc.valid as f64,
            histogram: Some(DepthHistogram::from_counts(&acc.counts).expect("valid > 0")),
        });
    }
    out
}

/// Concatenated instance records of every frame, in manifest order.
pub fn build_inst_dataset(frames: &[impl AsRef<Path>], spec: &BinningSpec) -> Result<InstanceExtraction> {
    if frames.is_empty() {
        return Err(Error::invalid("manifest lists no frames"));
    }
    spec.validate()?;
    let mut out = InstanceExtraction::default();
    for path in frames {
        let frame = DepthFrame::load(path)?;
        let part = extract_instances(&frame, spec);
        out.records.extend(part.records);
        out.dropped += part.dropped;
    }
    Ok(out)
}

/// Frame paths listed one per line; relative paths resolve against the manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| base.join(l))
        .collect())
}

/// How instance means combine into a class mean.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassPooling {
    /// Weight every instance by its valid pixel count (pools raw pixels).
    #[default]
    PixelWeighted,
    /// Every instance counts once.
    Unweighted,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassAggregation {
    pub records: Vec<ClassRecord>,
    /// Vocabulary labels with no instance.
    pub missing: Vec<String>,
    /// Instances whose label is outside the vocabulary.
    pub ignored: usize,
}

/// Pools instance records into one record per vocabulary label, in vocabulary order.
pub fn aggregate_loo(
    records: &[InstanceRecord],
    vocabulary: &[impl AsRef<str>],
    pooling: ClassPooling,
) -> Result<ClassAggregation> {
    if vocabulary.is_empty() {
        return Err(Error::invalid("vocabulary is empty"));
    }
    let mut by_label: HashMap<&str, Vec<&InstanceRecord>> = HashMap::new();
    let mut out = ClassAggregation::default();
    for label in vocabulary {
        by_label.entry(label.as_ref()).or_default();
    }
    for r in records {
        match by_label.get_mut(r.label.as_str()) {
            Some(members) => members.push(r),
            None => out.ignored += 1,
        }
    }
    let mut seen = std::collections::HashSet::new();
    for label in vocabulary {
        let label = label.as_ref();
        if !seen.insert(label) {
            continue;
        }
        let members = &by_label[label];
        if members.is_empty() {
            out.missing.push(label.to_owned());
            continue;
        }
        out.records.push(pool(label, members, pooling)?);
    }
    Ok(out)
}

fn pool(label: &str, members: &[&InstanceRecord], pooling: ClassPooling) -> Result<ClassRecord> {
    let pixel_count: u64 = members.iter().map(|r| r.pixel_count).sum();
    let weight = |r: &InstanceRecord| match pooling {
        ClassPooling::PixelWeighted => r.pixel_count as f64,
        ClassPooling::Unweighted => 1.0,
    };
    let total_weight: f64 = members.iter().map(|r| weight(r)).sum();
    let mean_depth = members.iter().map(|r| weight(r) * r.mean_depth).sum::<f64>() / total_weight;

    let histogram = if members.iter().all(|r| r.histogram.is_some()) {
        let bins = members[0].histogram.as_ref().map_or(0, DepthHistogram::len);
        let mut acc = vec![0.0f64; bins];
        for r in members {
            let h = r.histogram.as_ref().expect("checked above");
            if h.len() != bins {
                return Err(Error::invalid(format!(
                    "instances of `{label}` have histograms with different bin counts"
                )));
            }
            for (a, p) in acc.iter_mut().zip(&h.probs) {
                *a += weight(r) * p;
            }
        }
        let total: f64 = acc.iter().sum();
        Some(DepthHistogram {
            probs: acc.into_iter().map(|a| a / total).collect(),
        })
    } else {
        None
    };
    Ok(ClassRecord {
        label: label.to_owned(),
        pixel_count,
        mean_depth,
        histogram,
    })
}

/// Writes records as JSON lines.
pub fn save_records(records: &[DepthRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::format(path, e.to_string()))?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_records(path: impl AsRef<Path>) -> Result<Vec<DepthRecord>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |m: String| Error::format(path, format!("line {}: {m}", i + 1));
        let r: DepthRecord = serde_json::from_str(&line).map_err(|e| at(e.to_string()))?;
        if r.pixel_count == 0 || !is_valid_depth(r.mean_depth) {
            return Err(at(
                "record needs a positive pixel count and a positive finite mean depth".into(),
            ));
        }
        if let Some(h) = &r.histogram {
            DepthHistogram::from_probs(h.probs.clone()).map_err(|e| at(e.to_string()))?;
        }
        records.push(r);
    }
    Ok(records)
}
