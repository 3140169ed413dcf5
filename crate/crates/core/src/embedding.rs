//! Label -> embedding collections.
//!
//! Stores are the only language input to the toolkit. They are built from a
//! DHEMB text file (usually written by an external exporter), drawn at random
//! as a control, or produced by the synthetic generator in [`crate::harness`].
//!
//! DHEMB layout (UTF-8, LF line endings):
//!
//! ```text
//! DHEMB 1 <dim>
//! <label>\t<f32>,<f32>,...
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use crate::rng::{self, RngSeed};
use crate::{Error, Result, BACKGROUND};

const MAGIC: &str = "DHEMB";
const VERSION: u32 = 1;

/// Fixed-dimension embedding with finite components.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f32>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("embedding must have at least one component"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("embedding component {i} is not finite")));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| f64::from(v)).collect()
    }
}

/// Result of [`EmbeddingStore::lookup`].
#[derive(Debug, Clone, Copy)]
pub struct Lookup<'a> {
    pub vector: &'a EmbeddingVector,
    /// Set when the label was missing and the `background` entry was returned.
    pub fallback: bool,
}

/// Ordered label -> vector map where every vector has the same dimension.
///
/// Insertion order is preserved and is the order written to disk.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    dim: usize,
    entries: Vec<(String, EmbeddingVector)>,
    index: HashMap<String, usize>,
}

impl PartialEq for EmbeddingStore {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.entries == other.entries
    }
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("embedding dim must be at least 1"));
        }
        Ok(Self {
            dim,
            entries: Vec::new(),
            index: HashMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(l, _)| l.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &EmbeddingVector)> {
        self.entries.iter().map(|(l, v)| (l.as_str(), v))
    }

    pub fn contains(&self, label: &str) -> bool {
        self.index.contains_key(label)
    }

    pub fn get(&self, label: &str) -> Option<&EmbeddingVector> {
        self.index.get(label).map(|&i| &self.entries[i].1)
    }

    pub fn insert(&mut self, label: impl Into<String>, vector: EmbeddingVector) -> Result<()> {
        let label = label.into();
        validate_label(&label)?;
        if vector.dim() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                actual: vector.dim(),
            });
        }
        if self.index.contains_key(&label) {
            return Err(Error::invalid(format!("duplicate label `{label}`")));
        }
        self.index.insert(label.clone(), self.entries.len());
        self.entries.push((label, vector));
        Ok(())
    }

    /// Exact entry if present, otherwise the `background` entry.
    pub fn lookup(&self, label: &str) -> Result<Lookup<'_>> {
        if let Some(vector) = self.get(label) {
            return Ok(Lookup {
                vector,
                fallback: false,
            });
        }
        self.get(BACKGROUND)
            .map(|vector| Lookup { vector, fallback: true })
            .ok_or_else(|| Error::Unresolvable(label.to_owned()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(BufReader::new(file), path)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{MAGIC} {VERSION} {}\n", self.dim);
        for (label, vector) in &self.entries {
            out.push_str(label);
            out.push('\t');
            for (i, v) in vector.values.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                // `Display` for f32 is the shortest string that parses back to the same bits.
                write!(out, "{v}").expect("writing to a String cannot fail");
            }
            out.push('\n');
        }
        out
    }

    /// Parse DHEMB text. `origin` only labels error messages.
    pub fn read(reader: impl Read, origin: &Path) -> Result<Self> {
        let mut lines = BufReader::new(reader).lines();
        let header = match lines.next() {
            None => return Err(Error::format(origin, "missing header")),
            Some(line) => line.map_err(|e| Error::io(origin, e))?,
        };
        let dim = parse_header(&header).map_err(|m| Error::format(origin, format!("line 1: {m}")))?;
        let mut store = Self::new(dim).map_err(|_| Error::format(origin, "line 1: dim must be at least 1"))?;

        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let line = line.map_err(|e| Error::io(origin, e))?;
            let at = |m: String| Error::format(origin, format!("line {lineno}: {m}"));
            if line.is_empty() {
                return Err(at("empty row".into()));
            }
            let (label, values) = line
                .split_once('\t')
                .ok_or_else(|| at("expected `<label>\\t<values>`".into()))?;
            let values = values
                .split(',')
                .map(|s| s.parse::<f32>().map_err(|_| at(format!("`{s}` is not a number"))))
                .collect::<Result<Vec<f32>>>()?;
            if values.len() != dim {
                return Err(at(format!(
                    "row `{label}` has {} values, header declares dim {dim}",
                    values.len()
                )));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(at(format!("row `{label}` contains a non-finite value")));
            }
            store
                .insert(label, EmbeddingVector { values })
                .map_err(|e| at(e.to_string()))?;
        }
        Ok(store)
    }
}

fn parse_header(header: &str) -> std::result::Result<usize, String> {
    let mut parts = header.split(' ');
    if parts.next() != Some(MAGIC) {
        return Err("missing header".into());
    }
    match parts.next().map(str::parse::<u32>) {
        Some(Ok(VERSION)) => {}
        _ => return Err(format!("unsupported version in header `{header}`")),
    }
    let dim = parts
        .next()
        .and_then(|d| d.parse::<usize>().ok())
        .ok_or_else(|| format!("malformed header `{header}`"))?;
    if parts.next().is_some() {
        return Err(format!("malformed header `{header}`"));
    }
    Ok(dim)
}

fn validate_label(label: &str) -> Result<()> {
    if label.is_empty() || label.contains(['\t', '\n', '\r']) {
        return Err(Error::invalid(format!(
            "label {label:?} must be non-empty and free of tabs and line breaks"
        )));
    }
    Ok(())
}

/// Random control store: every component uniform in `[0, 1)`.
///
/// Vectors are drawn in label order from one seeded stream, so the result is
/// a pure function of `(labels, dim, seed)`. A `background` entry is drawn
/// last when the list does not already contain one.
pub fn random_store(labels: &[impl AsRef<str>], dim: usize, seed: RngSeed) -> Result<EmbeddingStore> {
    if labels.is_empty() {
        return Err(Error::invalid("random store needs at least one label"));
    }
    let mut store = EmbeddingStore::new(dim)?;
    let mut rng = rng::stream(seed, rng::stream::RANDOM_EMBEDDINGS);
    let mut draw = |store: &mut EmbeddingStore, label: &str| {
        let values = (0..dim).map(|_| rng::unit_f32(&mut rng)).collect();
        store.insert(label, EmbeddingVector { values })
    };
    for label in labels {
        draw(&mut store, label.as_ref())?;
    }
    if !store.contains(BACKGROUND) {
        draw(&mut store, BACKGROUND)?;
    }
    Ok(store)
}

/// Componentwise mean of several variants of one label's embedding.
pub fn average_variants(variants: &[EmbeddingVector]) -> Result<EmbeddingVector> {
    let first = variants
        .first()
        .ok_or_else(|| Error::invalid("cannot average an empty list of embeddings"))?;
    let dim = first.dim();
    let mut sum = vec![0.0f64; dim];
    for v in variants {
        if v.dim() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                actual: v.dim(),
            });
        }
        for (s, &x) in sum.iter_mut().zip(&v.values) {
            *s += f64::from(x);
        }
    }
    let n = variants.len() as f64;
    EmbeddingVector::new(sum.into_iter().map(|s| (s / n) as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vector(values: &[f32]) -> EmbeddingVector {
        EmbeddingVector::new(values.to_vec()).unwrap()
    }

    #[test]
    fn random_store_single_label() {
        let store = random_store(&["chair"], 128, RngSeed(7)).unwrap();
        assert_eq!(store.dim(), 128);
        let chair = store.get("chair").unwrap();
        assert_eq!(chair.dim(), 128);
        assert!(chair.values().iter().all(|v| (0.0..1.0).contains(v)));
        assert!(store.contains(BACKGROUND));
        assert_eq!(store.len(), 2);
    }

    #[test]
    fn random_store_is_deterministic() {
        let a = random_store(&["chair", "table"], 768, RngSeed(7)).unwrap();
        let b = random_store(&["chair", "table"], 768, RngSeed(7)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_text(), b.to_text());
    }

    #[test]
    fn random_store_vectors_differ() {
        let store = random_store(&["a", "b"], 4, RngSeed(3)).unwrap();
        assert_ne!(store.get("a"), store.get("b"));
    }

    #[test]
    fn random_store_keeps_existing_background() {
        let store = random_store(&["background", "x"], 3, RngSeed(1)).unwrap();
        assert_eq!(store.labels().collect::<Vec<_>>(), ["background", "x"]);
    }

    #[test]
    fn random_store_rejects_duplicates() {
        let err = random_store(&["a", "b", "a"], 4, RngSeed(3)).unwrap_err();
        assert!(err.to_string().contains("`a`"), "{err}");
    }

    #[test]
    fn average_of_one_is_identity() {
        let v = vector(&[0.25, -3.5, 7.0]);
        assert_eq!(average_variants(std::slice::from_ref(&v)).unwrap(), v);
    }

    #[test]
    fn average_is_componentwise_mean() {
        let avg = average_variants(&[vector(&[0.0, 0.0]), vector(&[2.0, 4.0])]).unwrap();
        assert_eq!(avg.values(), &[1.0, 2.0]);
    }

    #[test]
    fn average_matches_summation_oracle() {
        let mut r = rng::stream(RngSeed(99), 0);
        let variants: Vec<EmbeddingVector> = (0..5)
            .map(|_| vector(&(0..16).map(|_| rng::unit_f32(&mut r) * 4.0 - 2.0).collect::<Vec<_>>()))
            .collect();
        let avg = average_variants(&variants).unwrap();
        for k in 0..16 {
            let mut total = 0.0f64;
            for v in &variants {
                total += v.values()[k] as f64;
            }
            assert!((avg.values()[k] as f64 - total / 5.0).abs() < 1e-7);
        }
    }

    #[test]
    fn average_rejects_mixed_dims() {
        let err = average_variants(&[vector(&[1.0]), vector(&[1.0, 2.0])]).unwrap_err();
        assert!(matches!(err, Error::DimMismatch { expected: 1, actual: 2 }));
        assert!(average_variants(&[]).is_err());
    }

    #[test]
    fn lookup_exact_and_fallback() {
        let store = random_store(&["chair"], 8, RngSeed(1)).unwrap();
        let hit = store.lookup("chair").unwrap();
        assert!(!hit.fallback);
        assert_eq!(hit.vector, store.get("chair").unwrap());

        let miss = store.lookup("unseen-object").unwrap();
        assert!(miss.fallback);
        assert_eq!(miss.vector, store.get(BACKGROUND).unwrap());
    }

    #[test]
    fn lookup_without_background_fails() {
        let mut store = EmbeddingStore::new(2).unwrap();
        store.insert("chair", vector(&[1.0, 2.0])).unwrap();
        assert!(matches!(store.lookup("sofa"), Err(Error::Unresolvable(l)) if l == "sofa"));
    }

    #[test]
    fn text_round_trip() {
        let store = random_store(&["chair", "table lamp"], 5, RngSeed(42)).unwrap();
        let parsed = EmbeddingStore::read(store.to_text().as_bytes(), Path::new("mem")).unwrap();
        assert_eq!(parsed, store);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.dhemb");
        let mut store = EmbeddingStore::new(3).unwrap();
        store
            .insert("a", vector(&[f32::MIN_POSITIVE, -0.1, 3.4028235e38]))
            .unwrap();
        store.insert(BACKGROUND, vector(&[1e-45, 0.0, -0.0])).unwrap();
        store.save(&path).unwrap();
        let loaded = EmbeddingStore::load(&path).unwrap();
        for ((_, a), (_, b)) in loaded.iter().zip(store.iter()) {
            let bits = |v: &EmbeddingVector| v.values().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn short_row_names_the_row() {
        let mut text = String::from("DHEMB 1 128\n");
        text.push_str("ok\t");
        text.push_str(&vec!["0.5"; 128].join(","));
        text.push_str("\nshort\t");
        text.push_str(&vec!["0.5"; 127].join(","));
        text.push('\n');
        let err = EmbeddingStore::read(text.as_bytes(), Path::new("x.dhemb")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3") && msg.contains("short"), "{msg}");
    }

    #[test]
    fn empty_file_is_missing_header() {
        let err = EmbeddingStore::read(&b""[..], Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("missing header"));
    }

    #[test]
    fn malformed_header_and_non_finite_rejected() {
        assert!(EmbeddingStore::read(&b"DHEMB 2 3\n"[..], Path::new("x")).is_err());
        assert!(EmbeddingStore::read(&b"DHEMB 1\n"[..], Path::new("x")).is_err());
        assert!(EmbeddingStore::read(&b"DHEMB 1 0\n"[..], Path::new("x")).is_err());
        let err = EmbeddingStore::read(&b"DHEMB 1 2\na\t1,inf\n"[..], Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("line 2"));
        let err = EmbeddingStore::read(&b"DHEMB 1 2\na\t1,NaN\n"[..], Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("non-finite"));
    }

    #[test]
    fn duplicate_rows_rejected_with_line() {
        let err = EmbeddingStore::read(&b"DHEMB 1 1\na\t1\na\t2\n"[..], Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn round_trip_any_finite_store(
                rows in prop::collection::vec(prop::collection::vec(-1e30f32..1e30f32, 6), 1..8)
            ) {
                let mut store = EmbeddingStore::new(6).unwrap();
                for (i, row) in rows.into_iter().enumerate() {
                    store.insert(format!("label {i}"), EmbeddingVector::new(row).unwrap()).unwrap();
                }
                let parsed = EmbeddingStore::read(store.to_text().as_bytes(), Path::new("mem")).unwrap();
                prop_assert_eq!(parsed, store);
            }

            #[test]
            fn average_is_permutation_invariant_and_idempotent(
                rows in prop::collection::vec(prop::collection::vec((-400i32..400).prop_map(|q| q as f32 / 4.0), 4), 1..6),
                rot in 0usize..6,
            ) {
                let vs: Vec<_> = rows.into_iter().map(|r| EmbeddingVector::new(r).unwrap()).collect();
                let mut rotated = vs.clone();
                let k = rot % rotated.len();
                rotated.rotate_left(k);
                prop_assert_eq!(average_variants(&vs).unwrap(), average_variants(&rotated).unwrap());
                let same = vec![vs[0].clone(); 3];
                prop_assert_eq!(average_variants(&same).unwrap(), vs[0].clone());
            }

            #[test]
            fn lookup_always_returns_store_dim(dim in 1usize..32, label in "[a-z]{1,8}") {
                let store = random_store(&["chair", "lamp"], dim, RngSeed(0)).unwrap();
                prop_assert_eq!(store.lookup(&label).unwrap().vector.dim(), dim);
            }
        }
    }
}
