//! Embedding backends.
//!
//! Two interchangeable sources of unit-normalized pooled embeddings: a
//! trainable desk-scale encoder (hashed bag of tokens, mean pool, l2
//! normalize) and a read-only store of precomputed vectors loaded from
//! JSON Lines. Everything downstream consumes only [`Embedding`] values,
//! so the scoring head and losses never know which backend produced them.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::math::l2_norm;
use crate::rng::substream;

/// Default number of hash buckets for the toy tokenizer.
pub const DEFAULT_BUCKETS: usize = 65_536;

/// Tolerance on the unit-norm invariant of emitted embeddings.
pub const UNIT_NORM_TOL: f64 = 1e-5;

/// Pre-normalization norms below this are considered degenerate.
const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("token sequence is empty")]
    EmptyInput,
    #[error("pre-normalization norm {norm:e} is degenerate")]
    DegenerateNorm { norm: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("{path}:{line}: {msg}")]
    Format { path: String, line: usize, msg: String },
    #[error("duplicate key {key:?}")]
    DuplicateKey { key: String },
    #[error("key {key:?} not found in embedding store")]
    KeyNotFound { key: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A unit-norm pooled representation of one text.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub values: Vec<f64>,
}

impl Embedding {
    /// Normalizes `values` onto the unit sphere.
    pub fn normalized(values: Vec<f64>) -> Result<Self, EncoderError> {
        let norm = l2_norm(&values);
        if !norm.is_finite() || norm < DEGENERATE_NORM {
            return Err(EncoderError::DegenerateNorm { norm });
        }
        Ok(Self { values: values.into_iter().map(|v| v / norm).collect() })
    }

    /// Wraps values that are already unit norm (e.g. read back from a store).
    pub fn from_unit(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.values)
    }

    /// True when the unit-norm invariant holds within [`UNIT_NORM_TOL`].
    pub fn is_unit_norm(&self) -> bool {
        (self.norm() - 1.0).abs() <= UNIT_NORM_TOL && self.values.iter().all(|v| v.is_finite())
    }
}

/// Hashes lowercased whitespace-separated tokens into `[0, buckets)`.
///
/// Total function: empty or all-whitespace text yields an empty sequence.
/// The hash is FNV-1a 64-bit over the token's UTF-8 bytes, reduced mod
/// `buckets`, so equal strings map to equal indices on every platform.
pub fn tokenize(text: &str, buckets: usize) -> Vec<u32> {
    debug_assert!(buckets > 0);
    text.to_lowercase()
        .split_whitespace()
        .map(|tok| (fnv1a64(tok.as_bytes()) % buckets as u64) as u32)
        .collect()
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100_0000_01b3);
    }
    hash
}

/// Learnable token table of the toy encoder.
#[derive(Debug, Clone)]
pub struct ToyEncoderParams {
    /// Row-major `buckets x dim` token embeddings.
    pub table: Vec<f64>,
    pub buckets: usize,
    pub dim: usize,
}

impl ToyEncoderParams {
    /// Seeded uniform(-0.05, 0.05) initialization.
    pub fn init(buckets: usize, dim: usize, master_seed: u64) -> Self {
        let mut rng = substream(master_seed, "init.encoder");
        let table = (0..buckets * dim).map(|_| rng.random_range(-0.05..0.05)).collect();
        Self { table, buckets, dim }
    }

    pub fn row(&self, token: u32) -> &[f64] {
        let start = token as usize * self.dim;
        &self.table[start..start + self.dim]
    }

    /// Mean of the token rows before normalization.
    fn pooled(&self, tokens: &[u32]) -> Result<Vec<f64>, EncoderError> {
        if tokens.is_empty() {
            return Err(EncoderError::EmptyInput);
        }
        let mut mean = vec![0.0; self.dim];
        for &t in tokens {
            for (m, &w) in mean.iter_mut().zip(self.row(t)) {
                *m += w;
            }
        }
        let n = tokens.len() as f64;
        for m in &mut mean {
            *m /= n;
        }
        Ok(mean)
    }
}

/// Mean-pools the token rows and l2-normalizes the result.
pub fn embed_toy(params: &ToyEncoderParams, tokens: &[u32]) -> Result<Embedding, EncoderError> {
    Embedding::normalized(params.pooled(tokens)?)
}

/// Gradients of a loss w.r.t. the table rows used by `tokens`, given the
/// upstream gradient w.r.t. the normalized embedding.
///
/// Chains through the mean pool and the normalization Jacobian
/// `(I - y y^T) / ||x||`; rows appearing multiple times accumulate.
pub fn embed_toy_backward(
    params: &ToyEncoderParams,
    tokens: &[u32],
    upstream: &[f64],
) -> Result<BTreeMap<u32, Vec<f64>>, EncoderError> {
    if upstream.len() != params.dim {
        return Err(EncoderError::DimensionMismatch { expected: params.dim, got: upstream.len() });
    }
    let pooled = params.pooled(tokens)?;
    let norm = l2_norm(&pooled);
    if !norm.is_finite() || norm < DEGENERATE_NORM {
        return Err(EncoderError::DegenerateNorm { norm });
    }
    let unit: Vec<f64> = pooled.iter().map(|x| x / norm).collect();
    let radial = crate::math::dot(upstream, &unit);
    // d/dx of g . (x/||x||) = (g - (g.y) y) / ||x||
    let d_pooled: Vec<f64> =
        upstream.iter().zip(&unit).map(|(g, y)| (g - radial * y) / norm).collect();

    let scale = 1.0 / tokens.len() as f64;
    let mut grads: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for &t in tokens {
        let row = grads.entry(t).or_insert_with(|| vec![0.0; params.dim]);
        for (r, &d) in row.iter_mut().zip(&d_pooled) {
            *r += scale * d;
        }
    }
    Ok(grads)
}

/// One record of the precomputed store file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub key: String,
    pub vector: Vec<f64>,
}

/// Read-only store of precomputed embeddings, keyed by text identifier.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    dim: usize,
    records: Vec<EmbeddingRecord>,
    index: HashMap<String, usize>,
}

impl EmbeddingStore {
    /// Loads a JSON Lines file of `{"key": ..., "vector": [...]}` records.
    ///
    /// All vectors must share one dimension and keys must be unique.
    /// Vectors deviating from unit norm by more than [`UNIT_NORM_TOL`] are
    /// re-normalized with a warning; compliant vectors are kept bit-exact.
    pub fn load(path: &Path) -> Result<Self, EncoderError> {
        let display = path.display().to_string();
        let file = File::open(path).map_err(|source| EncoderError::Io {
            path: display.clone(),
            source,
        })?;
        let reader = BufReader::new(file);

        let mut dim = None;
        let mut records = Vec::new();
        let mut index = HashMap::new();
        for (lineno, line) in reader.lines().enumerate() {
            let lineno = lineno + 1;
            let line = line.map_err(|source| EncoderError::Io {
                path: display.clone(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let mut record: EmbeddingRecord =
                serde_json::from_str(&line).map_err(|e| EncoderError::Format {
                    path: display.clone(),
                    line: lineno,
                    msg: e.to_string(),
                })?;
            if record.vector.is_empty() || record.vector.iter().any(|v| !v.is_finite()) {
                return Err(EncoderError::Format {
                    path: display.clone(),
                    line: lineno,
                    msg: "vector must be nonempty and finite".into(),
                });
            }
            match dim {
                None => dim = Some(record.vector.len()),
                Some(d) if d != record.vector.len() => {
                    return Err(EncoderError::DimensionMismatch {
                        expected: d,
                        got: record.vector.len(),
                    });
                }
                _ => {}
            }
            let norm = l2_norm(&record.vector);
            if norm < DEGENERATE_NORM {
                return Err(EncoderError::Format {
                    path: display.clone(),
                    line: lineno,
                    msg: format!("vector norm {norm:e} cannot be normalized"),
                });
            }
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                log::warn!("{display}:{lineno}: key {:?} has norm {norm}; re-normalizing", record.key);
                for v in &mut record.vector {
                    *v /= norm;
                }
            }
            if index.insert(record.key.clone(), records.len()).is_some() {
                return Err(EncoderError::DuplicateKey { key: record.key });
            }
            records.push(record);
        }
        Ok(Self { dim: dim.unwrap_or(0), records, index })
    }

    pub fn get(&self, key: &str) -> Result<Embedding, EncoderError> {
        self.index
            .get(key)
            .map(|&i| Embedding::from_unit(self.records[i].vector.clone()))
            .ok_or_else(|| EncoderError::KeyNotFound { key: key.to_string() })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Writes records in the store's JSON Lines format.
pub fn write_store<'a>(
    path: &Path,
    records: impl Iterator<Item = (&'a str, &'a [f64])>,
) -> Result<(), EncoderError> {
    let display = path.display().to_string();
    let io_err = |source| EncoderError::Io { path: display.clone(), source };
    let file = File::create(path).map_err(io_err)?;
    let mut out = BufWriter::new(file);
    for (key, vector) in records {
        let record = EmbeddingRecord { key: key.to_string(), vector: vector.to_vec() };
        let line = serde_json::to_string(&record).expect("record serializes");
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// The two embedding sources. Toy encodes raw text; the store looks up
/// precomputed vectors by key.
pub enum EncoderBackend<'a> {
    Toy(&'a ToyEncoderParams),
    Store(&'a EmbeddingStore),
}

impl EncoderBackend<'_> {
    /// Embeds one text role: the toy backend hashes and pools `text`, the
    /// store backend resolves `key`.
    pub fn embed(&self, key: &str, text: &str) -> Result<Embedding, EncoderError> {
        match self {
            EncoderBackend::Toy(params) => {
                embed_toy(params, &tokenize(text, params.buckets))
            }
            EncoderBackend::Store(store) => store.get(key),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            EncoderBackend::Toy(params) => params.dim,
            EncoderBackend::Store(store) => store.dim(),
        }
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self, EncoderBackend::Toy(_))
    }
}

impl fmt::Debug for EncoderBackend<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EncoderBackend::Toy(p) => write!(f, "Toy({}x{})", p.buckets, p.dim),
            EncoderBackend::Store(s) => write!(f, "Store({} records, dim {})", s.len(), s.dim()),
        }
    }
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::fd;
    use proptest::prelude::*;

    // Independent re-implementation of the declared hash, used as the
    // oracle for the frozen token indices below.
    fn fnv1a64_oracle(bytes: &[u8]) -> u64 {
        let mut h: u64 = 14_695_981_039_346_656_037;
        for &b in bytes {
            h ^= u64::from(b);
            h = h.wrapping_mul(1_099_511_628_211);
        }
        h
    }

    #[test]
    fn tokenize_empty_text() {
        assert!(tokenize("", DEFAULT_BUCKETS).is_empty());
        assert!(tokenize("   \t\n", DEFAULT_BUCKETS).is_empty());
    }

    #[test]
    fn tokenize_repeated_token_hashes_identically() {
        let toks = tokenize("a a", DEFAULT_BUCKETS);
        assert_eq!(toks.len(), 2);
        assert_eq!(toks[0], toks[1]);
    }

    #[test]
    fn tokenize_arabic_is_stable() {
        let toks = tokenize("الورثة المال", DEFAULT_BUCKETS);
        // Frozen from the independent FNV-1a oracle (64-bit, mod 65536).
        assert_eq!(toks, vec![29_013, 32_263]);
        for (tok, word) in toks.iter().zip(["الورثة", "المال"]) {
            assert_eq!(
                u64::from(*tok),
                fnv1a64_oracle(word.as_bytes()) % DEFAULT_BUCKETS as u64
            );
        }
    }

    #[test]
    fn tokenize_lowercases() {
        assert_eq!(tokenize("ABC def", 1024), tokenize("abc DEF", 1024));
    }

    fn toy_with_rows(rows: &[&[f64]]) -> ToyEncoderParams {
        let dim = rows[0].len();
        let mut table = vec![0.0; rows.len() * dim];
        for (i, r) in rows.iter().enumerate() {
            table[i * dim..(i + 1) * dim].copy_from_slice(r);
        }
        ToyEncoderParams { table, buckets: rows.len(), dim }
    }

    #[test]
    fn embed_single_row_normalizes() {
        let params = toy_with_rows(&[&[3.0, 4.0]]);
        let e = embed_toy(&params, &[0]).unwrap();
        assert_eq!(e.values, vec![0.6, 0.8]);
    }

    #[test]
    fn embed_mean_then_normalize() {
        let params = toy_with_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let e = embed_toy(&params, &[0, 1]).unwrap();
        let inv_sqrt2 = 1.0 / 2f64.sqrt();
        assert!((e.values[0] - inv_sqrt2).abs() < 1e-15);
        assert!((e.values[1] - inv_sqrt2).abs() < 1e-15);
    }

    #[test]
    fn embed_random_tokens_is_unit_norm() {
        let params = ToyEncoderParams::init(256, 16, 11);
        let e = embed_toy(&params, &[3, 77, 12, 200, 3]).unwrap();
        // Oracle: direct norm computation.
        let norm = e.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= UNIT_NORM_TOL);
    }

    #[test]
    fn embed_empty_and_degenerate_errors() {
        let params = toy_with_rows(&[&[0.0, 0.0]]);
        assert!(matches!(embed_toy(&params, &[]), Err(EncoderError::EmptyInput)));
        assert!(matches!(
            embed_toy(&params, &[0]),
            Err(EncoderError::DegenerateNorm { .. })
        ));
    }

    #[test]
    fn backward_zero_upstream_is_zero() {
        let params = ToyEncoderParams::init(64, 8, 5);
        let grads = embed_toy_backward(&params, &[1, 2, 1], &[0.0; 8]).unwrap();
        assert_eq!(grads.len(), 2);
        assert!(grads.values().flatten().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        // d=2, single token: perturb each touched table entry and compare
        // against the central-difference oracle on g . embed(params).
        let upstream = [0.7, -0.3];
        let loss = |params: &ToyEncoderParams| {
            let e = embed_toy(params, &[0]).unwrap();
            upstream[0] * e.values[0] + upstream[1] * e.values[1]
        };
        let params = toy_with_rows(&[&[0.4, -0.9]]);
        let grads = embed_toy_backward(&params, &[0], &upstream).unwrap();
        for i in 0..2 {
            let numeric = fd::central_diff(
                |v| {
                    let mut p = params.clone();
                    p.table[i] = v;
                    loss(&p)
                },
                params.table[i],
                fd::DEFAULT_STEP,
            );
            assert!(
                fd::relative_error(grads[&0][i], numeric) < 1e-4,
                "entry {i}: analytic {} vs numeric {numeric}",
                grads[&0][i]
            );
        }
    }

    #[test]
    fn backward_multi_token_matches_finite_differences() {
        let params = ToyEncoderParams::init(32, 4, 3);
        let tokens = [5u32, 9, 5, 17];
        let upstream = [0.3, -1.1, 0.25, 0.8];
        let grads = embed_toy_backward(&params, &tokens, &upstream).unwrap();
        let loss = |p: &ToyEncoderParams| {
            let e = embed_toy(p, &tokens).unwrap();
            crate::math::dot(&upstream, &e.values)
        };
        for (&tok, row_grad) in &grads {
            for i in 0..4 {
                let idx = tok as usize * 4 + i;
                let numeric = fd::central_diff(
                    |v| {
                        let mut p = params.clone();
                        p.table[idx] = v;
                        loss(&p)
                    },
                    params.table[idx],
                    fd::DEFAULT_STEP,
                );
                assert!(
                    fd::relative_error(row_grad[i], numeric) < 1e-4,
                    "row {tok} entry {i}: analytic {} vs numeric {numeric}",
                    row_grad[i]
                );
            }
        }
    }

    #[test]
    fn backward_radial_upstream_annihilated() {
        // Upstream parallel to the normalized output lies in the null
        // space of the normalization Jacobian.
        let params = toy_with_rows(&[&[3.0, 4.0]]);
        let e = embed_toy(&params, &[0]).unwrap();
        let grads = embed_toy_backward(&params, &[0], &e.values).unwrap();
        for g in &grads[&0] {
            assert!(g.abs() < 1e-12, "radial gradient leaked: {g}");
        }
    }

    #[test]
    fn store_roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        let vs: Vec<(String, Vec<f64>)> = vec![
            ("q1".into(), vec![0.6, 0.8]),
            ("q1:a".into(), vec![1.0, 0.0]),
            ("q2".into(), vec![-0.28, 0.96]),
        ];
        write_store(&path, vs.iter().map(|(k, v)| (k.as_str(), v.as_slice()))).unwrap();
        let store = EmbeddingStore::load(&path).unwrap();
        assert_eq!(store.len(), 3);
        // Oracle: re-read the file independently and compare bit patterns.
        let raw = std::fs::read_to_string(&path).unwrap();
        for line in raw.lines() {
            let rec: EmbeddingRecord = serde_json::from_str(line).unwrap();
            let got = store.get(&rec.key).unwrap();
            let want_bits: Vec<u64> = rec.vector.iter().map(|v| v.to_bits()).collect();
            let got_bits: Vec<u64> = got.values.iter().map(|v| v.to_bits()).collect();
            assert_eq!(want_bits, got_bits);
        }
    }

    #[test]
    fn store_missing_key() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        write_store(&path, [("k", [0.6, 0.8].as_slice())].into_iter()).unwrap();
        let store = EmbeddingStore::load(&path).unwrap();
        assert!(matches!(store.get("absent"), Err(EncoderError::KeyNotFound { .. })));
    }

    #[test]
    fn store_rejects_duplicates_mixed_dims_and_bad_lines() {
        let dir = tempfile::tempdir().unwrap();

        let dup = dir.path().join("dup.jsonl");
        std::fs::write(&dup, "{\"key\":\"k\",\"vector\":[1.0]}\n{\"key\":\"k\",\"vector\":[1.0]}\n")
            .unwrap();
        assert!(matches!(EmbeddingStore::load(&dup), Err(EncoderError::DuplicateKey { .. })));

        let mixed = dir.path().join("mixed.jsonl");
        std::fs::write(
            &mixed,
            "{\"key\":\"a\",\"vector\":[1.0]}\n{\"key\":\"b\",\"vector\":[0.6,0.8]}\n",
        )
        .unwrap();
        assert!(matches!(
            EmbeddingStore::load(&mixed),
            Err(EncoderError::DimensionMismatch { expected: 1, got: 2 })
        ));

        let bad = dir.path().join("bad.jsonl");
        std::fs::write(&bad, "{\"key\":\"a\",\"vector\":[1.0]}\nnot json\n").unwrap();
        match EmbeddingStore::load(&bad) {
            Err(EncoderError::Format { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn store_renormalizes_deviating_vectors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        std::fs::write(&path, "{\"key\":\"k\",\"vector\":[3.0,4.0]}\n").unwrap();
        let store = EmbeddingStore::load(&path).unwrap();
        let e = store.get("k").unwrap();
        assert!(e.is_unit_norm());
        assert_eq!(e.values, vec![0.6, 0.8]);
    }

    proptest! {
        #[test]
        fn tokenize_deterministic_and_in_range(text in ".{0,80}", buckets in 1usize..100_000) {
            let a = tokenize(&text, buckets);
            let b = tokenize(&text, buckets);
            prop_assert_eq!(&a, &b);
            prop_assert!(a.iter().all(|&t| (t as usize) < buckets));
        }

        #[test]
        fn embed_is_permutation_invariant(perm_seed in 0u64..1000) {
            let params = ToyEncoderParams::init(128, 6, 42);
            let mut tokens = vec![1u32, 50, 7, 7, 99];
            let a = embed_toy(&params, &tokens).unwrap();
            // Deterministic shuffle of the token order.
            use rand::seq::SliceRandom;
            tokens.shuffle(&mut substream(perm_seed, "perm"));
            let b = embed_toy(&params, &tokens).unwrap();
            for (x, y) in a.values.iter().zip(&b.values) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn emitted_embeddings_are_unit_norm(seed in 0u64..500, len in 1usize..12) {
            let params = ToyEncoderParams::init(512, 8, seed);
            let mut rng = substream(seed, "tokens");
            let tokens: Vec<u32> = (0..len).map(|_| rng.random_range(0..512)).collect();
            let e = embed_toy(&params, &tokens).unwrap();
            prop_assert!(e.is_unit_norm());
        }
    }
}
