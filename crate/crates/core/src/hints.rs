//! Per-pixel hint planes.
//!
//! Every pixel takes the hint of its instance's label: a predicted mean depth
//! (one channel) or the 50-d penultimate feature vector of a classification
//! model. Hints are computed once per distinct label and broadcast. Pixels
//! with invalid depth still get hints.
//!
//! DHP1 layout (little-endian): magic `DHP1`, u32 H, u32 W, u32 C, then
//! `H*W*C` f32, row-major with channels innermost.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Read;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::depth_data::{BinningSpec, DepthFrame};
use crate::embedding::EmbeddingStore;
use crate::harness::{predict, LookupTable};
use crate::l2d::{MlpParameters, Mode, FEATURE_DIM};
use crate::{Error, Result};

const PLANE_MAGIC: &[u8; 4] = b"DHP1";

#[derive(Debug, Clone, PartialEq)]
pub struct HintPlane {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl HintPlane {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != FEATURE_DIM {
            return Err(Error::invalid(format!(
                "hint planes have 1 or {FEATURE_DIM} channels, not {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::invalid(format!(
                "plane {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("hint values must be finite"));
        }
        if channels == 1 && data.iter().any(|v| *v <= 0.0) {
            return Err(Error::invalid("depth hints must be positive"));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Channel values of the pixel at `(row, col)`.
    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::with_capacity(16 + self.data.len() * 4);
        w.extend_from_slice(PLANE_MAGIC);
        for v in [self.height, self.width, self.channels] {
            w.write_u32::<LittleEndian>(v as u32).unwrap();
        }
        for &v in &self.data {
            w.write_f32::<LittleEndian>(v).unwrap();
        }
        w
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let fail = |m: &str| Error::format(origin, m);
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| fail("bad magic"))?;
        if &magic != PLANE_MAGIC {
            return Err(fail("bad magic"));
        }
        let mut dims = [0usize; 3];
        for d in &mut dims {
            *d = r.read_u32::<LittleEndian>().map_err(|_| fail("truncated header"))? as usize;
        }
        let [height, width, channels] = dims;
        let n = height
            .checked_mul(width)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| fail("shape overflows"))?;
        if r.len() != n * 4 {
            return Err(Error::format(
                origin,
                format!(
                    "shape {height}x{width}x{channels} needs {} payload bytes, found {}",
                    n * 4,
                    r.len()
                ),
            ));
        }
        let mut data = vec![0f32; n];
        r.read_f32_into::<LittleEndian>(&mut data).expect("length checked");
        Self::new(height, width, channels, data).map_err(|e| Error::format(origin, e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Where scalar depth hints come from.
#[derive(Debug, Clone, Copy)]
pub enum ScalarSource<'a> {
    Table(&'a LookupTable),
    /// Log-mean models give `exp(output)`; classification models the
    /// expected bin centre under `binning`.
    Model {
        params: &'a MlpParameters,
        store: &'a EmbeddingStore,
        binning: &'a BinningSpec,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub plane: HintPlane,
    /// Frame labels that resolved to `background`.
    pub fallbacks: Vec<String>,
}

fn distinct_labels(frame: &DepthFrame) -> Vec<&str> {
    let mut used: Vec<u16> = frame.instance_ids().to_vec();
    used.sort_unstable();
    used.dedup();
    let mut labels: Vec<&str> = used.into_iter().map(|id| frame.label_of(id)).collect();
    labels.sort_unstable();
    labels.dedup();
    labels
}

fn broadcast(frame: &DepthFrame, channels: usize, per_label: &HashMap<&str, Vec<f32>>) -> Result<HintPlane> {
    let mut per_id: BTreeMap<u16, &[f32]> = BTreeMap::new();
    for (&id, label) in frame.instance_table() {
        if let Some(v) = per_label.get(label.as_str()) {
            per_id.insert(id, v);
        }
    }
    let mut data = Vec::with_capacity(frame.instance_ids().len() * channels);
    for id in frame.instance_ids() {
        data.extend_from_slice(per_id[id]);
    }
    HintPlane::new(frame.height(), frame.width(), channels, data)
}

/// One-channel plane of predicted mean depths.
pub fn render_scalar(frame: &DepthFrame, source: ScalarSource<'_>) -> Result<Rendered> {
    let mut per_label = HashMap::new();
    let mut fallbacks = Vec::new();
    for label in distinct_labels(frame) {
        let (depth, fallback) = match source {
            ScalarSource::Table(table) => {
                let (entry, fb) = table.resolve(label)?;
                (entry.mean_depth, fb)
            }
            ScalarSource::Model { params, store, binning } => {
                let hit = store.lookup(label)?;
                (predict(params, &hit.vector.to_f64(), binning)?.mean_depth, hit.fallback)
            }
        };
        if fallback {
            fallbacks.push(label.to_owned());
        }
        per_label.insert(label, vec![depth as f32]);
    }
    Ok(Rendered {
        plane: broadcast(frame, 1, &per_label)?,
        fallbacks,
    })
}

/// Fifty-channel plane of post-activation penultimate features.
pub fn render_features(frame: &DepthFrame, params: &MlpParameters, store: &EmbeddingStore) -> Result<Rendered> {
    if params.mode() != Mode::Classification {
        return Err(Error::invalid("feature hints need a classification-mode model"));
    }
    let mut per_label = HashMap::new();
    let mut fallbacks = Vec::new();
    for label in distinct_labels(frame) {
        let hit = store.lookup(label)?;
        if hit.fallback {
            fallbacks.push(label.to_owned());
        }
        let (out, _) = params.forward_classification(&hit.vector.to_f64())?;
        per_label.insert(label, out.features.iter().map(|&v| v as f32).collect());
    }
    Ok(Rendered {
        plane: broadcast(frame, FEATURE_DIM, &per_label)?,
        fallbacks,
    })
}

/// Fifty-channel plane from the `features50` column of a lookup table.
pub fn render_features_from_table(frame: &DepthFrame, table: &LookupTable) -> Result<Rendered> {
    let mut per_label = HashMap::new();
    let mut fallbacks = Vec::new();
    for label in distinct_labels(frame) {
        let (entry, fb) = table.resolve(label)?;
        if fb {
            fallbacks.push(label.to_owned());
        }
        let features = entry
            .features50
            .as_ref()
            .filter(|f| f.len() == FEATURE_DIM)
            .ok_or_else(|| Error::invalid(format!("lookup entry `{}` has no 50-d features", entry.label)))?;
        per_label.insert(label, features.iter().map(|&v| v as f32).collect());
    }
    Ok(Rendered {
        plane: broadcast(frame, FEATURE_DIM, &per_label)?,
        fallbacks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::random_store;
    use crate::harness::{export_lookup, LookupEntry};
    use crate::l2d::L2DConfig;
    use crate::{RngSeed, BACKGROUND};

    fn frame(h: usize, w: usize, ids: Vec<u16>, table: &[(u16, &str)]) -> DepthFrame {
        let n = ids.len();
        DepthFrame::new(
            h,
            w,
            vec![1.0; n],
            ids,
            table.iter().map(|&(i, l)| (i, l.to_owned())).collect(),
        )
        .unwrap()
    }

    fn table(entries: &[(&str, f64)]) -> LookupTable {
        LookupTable::from_entries(
            entries
                .iter()
                .map(|&(l, d)| LookupEntry {
                    label: l.into(),
                    mean_depth: d,
                    features50: None,
                    log_probs: None,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_label_broadcast() {
        let f = frame(2, 3, vec![1; 6], &[(1, "wall")]);
        let out = render_scalar(&f, ScalarSource::Table(&table(&[("wall", 3.2)]))).unwrap();
        assert_eq!(out.plane.channels(), 1);
        assert!(out.plane.data().iter().all(|&v| v == 3.2f32));
    }

    #[test]
    fn two_labels_two_values() {
        let f = frame(2, 2, vec![1, 2, 2, 3], &[(1, "wall"), (2, "bed"), (3, "wall")]);
        let t = table(&[("wall", 3.2), ("bed", 1.5)]);
        let out = render_scalar(&f, ScalarSource::Table(&t)).unwrap();
        assert_eq!(out.plane.data(), &[3.2, 1.5, 1.5, 3.2]);
        assert!(out.fallbacks.is_empty());
    }

    #[test]
    fn unknown_label_falls_back_or_fails() {
        let f = frame(1, 2, vec![1, 2], &[(1, "wall"), (2, "ufo")]);
        let out = render_scalar(&f, ScalarSource::Table(&table(&[("wall", 3.0), (BACKGROUND, 5.0)]))).unwrap();
        assert_eq!(out.plane.data(), &[3.0, 5.0]);
        assert_eq!(out.fallbacks, vec!["ufo".to_owned()]);
        assert!(matches!(
            render_scalar(&f, ScalarSource::Table(&table(&[("wall", 3.0)]))),
            Err(Error::Unresolvable(l)) if l == "ufo"
        ));
    }

    #[test]
    fn model_and_exported_table_agree() {
        let store = random_store(&["wall", "bed", "lamp"], 12, RngSeed(3)).unwrap();
        let binning = BinningSpec::default();
        for cfg in [L2DConfig::log_mean(12), L2DConfig::classification(12)] {
            let params = MlpParameters::init(&cfg, RngSeed(4)).unwrap();
            let vocab: Vec<&str> = store.labels().collect();
            let t = export_lookup(&params, &store, &vocab, &binning).unwrap();
            let f = frame(
                3,
                3,
                vec![0, 1, 2, 2, 1, 0, 3, 3, 0],
                &[(0, "wall"), (1, "bed"), (2, "lamp"), (3, "other")],
            );
            let a = render_scalar(&f, ScalarSource::Table(&t)).unwrap();
            let b = render_scalar(
                &f,
                ScalarSource::Model {
                    params: &params,
                    store: &store,
                    binning: &binning,
                },
            )
            .unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn scalar_plane_is_exp_of_log_output() {
        let store = random_store(&["wall"], 6, RngSeed(1)).unwrap();
        let params = MlpParameters::init(&L2DConfig::log_mean(6), RngSeed(2)).unwrap();
        let f = frame(1, 1, vec![0], &[(0, "wall")]);
        let binning = BinningSpec::default();
        let out = render_scalar(
            &f,
            ScalarSource::Model {
                params: &params,
                store: &store,
                binning: &binning,
            },
        )
        .unwrap();
        let (log_depth, _) = params.forward_logmean(&store.get("wall").unwrap().to_f64()).unwrap();
        assert_eq!(out.plane.data()[0], log_depth.exp() as f32);
    }

    #[test]
    fn features_broadcast_from_forward() {
        let store = random_store(&["wall"], 8, RngSeed(1)).unwrap();
        let params = MlpParameters::init(&L2DConfig::classification(8), RngSeed(2)).unwrap();
        let f = frame(2, 2, vec![5; 4], &[(5, "wall")]);
        let out = render_features(&f, &params, &store).unwrap();
        assert_eq!(out.plane.channels(), 50);
        let (expect, _) = params
            .forward_classification(&store.get("wall").unwrap().to_f64())
            .unwrap();
        let expect: Vec<f32> = expect.features.iter().map(|&v| v as f32).collect();
        for r in 0..2 {
            for c in 0..2 {
                assert_eq!(out.plane.pixel(r, c), expect.as_slice());
            }
        }
        let logmean = MlpParameters::init(&L2DConfig::log_mean(8), RngSeed(2)).unwrap();
        assert!(render_features(&f, &logmean, &store).is_err());
    }

    #[test]
    fn feature_table_matches_model() {
        let store = random_store(&["wall", "bed"], 8, RngSeed(1)).unwrap();
        let params = MlpParameters::init(&L2DConfig::classification(8), RngSeed(2)).unwrap();
        let vocab: Vec<&str> = store.labels().collect();
        let t = export_lookup(&params, &store, &vocab, &BinningSpec::default()).unwrap();
        let f = frame(1, 3, vec![0, 1, 2], &[(0, "wall"), (1, "bed"), (2, "x")]);
        assert_eq!(
            render_features_from_table(&f, &t).unwrap(),
            render_features(&f, &params, &store).unwrap()
        );
    }

    #[test]
    fn row_permutation_commutes() {
        let store = random_store(&["a", "b", "c"], 8, RngSeed(1)).unwrap();
        let params = MlpParameters::init(&L2DConfig::classification(8), RngSeed(2)).unwrap();
        let table = [(0, "a"), (1, "b"), (2, "c")];
        let rows = [vec![0u16, 1, 1], vec![2, 2, 0], vec![1, 0, 2]];
        let perm = [2usize, 0, 1];
        let f = frame(3, 3, rows.concat(), &table);
        let g = frame(3, 3, perm.iter().flat_map(|&i| rows[i].clone()).collect(), &table);
        let a = render_features(&f, &params, &store).unwrap().plane;
        let b = render_features(&g, &params, &store).unwrap().plane;
        for (new_row, &old_row) in perm.iter().enumerate() {
            for c in 0..3 {
                assert_eq!(b.pixel(new_row, c), a.pixel(old_row, c));
            }
        }
    }

    #[test]
    fn plane_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        for c in [1usize, 50] {
            let data: Vec<f32> = (0..16 * c).map(|i| 0.1 + i as f32 * 0.37).collect();
            let p = HintPlane::new(4, 4, c, data).unwrap();
            let path = dir.path().join(format!("p{c}.dhp"));
            p.save(&path).unwrap();
            assert_eq!(HintPlane::load(&path).unwrap(), p);
        }
    }

    #[test]
    fn plane_rejects_bad_files() {
        let p = HintPlane::new(2, 2, 1, vec![1.0; 4]).unwrap();
        let bytes = p.to_bytes();
        assert!(HintPlane::from_bytes(&bytes[..bytes.len() - 1], Path::new("p")).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'Z';
        assert!(HintPlane::from_bytes(&bad, Path::new("p"))
            .unwrap_err()
            .to_string()
            .contains("bad magic"));
        let mut bad = bytes;
        bad[12] = 3; // three channels
        assert!(HintPlane::from_bytes(&bad, Path::new("p")).is_err());
        assert!(HintPlane::new(1, 1, 1, vec![-1.0]).is_err());
    }
}
