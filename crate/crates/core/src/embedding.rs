//! Precomputed embedding vectors for documents and queries.
//!
//! Two on-disk formats are supported:
//!
//! * JSONL: one `{"id": ..., "vector": [...]}` object per line.
//! * RAW: the bytes `EMB1`, a little-endian `u32` row count, a little-endian
//!   `u32` dimension, then `rows * dim` little-endian `f32` values. Ids live
//!   in a sidecar text file (`<path>.ids`), one per line, in row order.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use regex::Regex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_jsonl;

pub const RAW_MAGIC: &[u8; 4] = b"EMB1";

/// Tolerance on row norms for a matrix flagged as normalized.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingFormat {
    Jsonl,
    Raw,
}

/// Row-major `f32` matrix with one row per id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
    normalized: bool,
    index: HashMap<String, usize>,
}

impl EmbeddingMatrix {
    /// Builds a matrix from `(id, vector)` rows, checking ids, dimensions and
    /// finiteness.
    pub fn from_rows<I, S, V>(rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, V)>,
        S: Into<String>,
        V: AsRef<[f32]>,
    {
        let mut dim = None;
        let mut ids = Vec::new();
        let mut data = Vec::new();
        let mut index = HashMap::new();
        for (id, v) in rows {
            let id = id.into();
            let v = v.as_ref();
            check_row(&id, v, &mut dim)?;
            if index.insert(id.clone(), ids.len()).is_some() {
                return Err(Error::invalid(format!("duplicate embedding id `{id}`")));
            }
            ids.push(id);
            data.extend_from_slice(v);
        }
        Ok(EmbeddingMatrix {
            dim: dim.unwrap_or(0),
            ids,
            data,
            normalized: false,
            index,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.position(id).map(|i| self.row(i))
    }

    pub fn rows(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids.iter().enumerate().map(move |(i, id)| (id.as_str(), self.row(i)))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn normalize(&self) -> Result<EmbeddingMatrix> {
        let mut data = Vec::with_capacity(self.data.len());
        for (id, row) in self.rows() {
            let norm = l2_norm(row);
            if norm == 0.0 {
                return Err(Error::ZeroNorm { id: id.to_string() });
            }
            data.extend(row.iter().map(|&x| (x as f64 / norm) as f32));
        }
        Ok(EmbeddingMatrix {
            dim: self.dim,
            ids: self.ids.clone(),
            data,
            normalized: true,
            index: self.index.clone(),
        })
    }

    /// Returns the rows for `ids`, in that order.
    pub fn align<S: AsRef<str>>(&self, ids: &[S]) -> Result<EmbeddingMatrix> {
        let mut seen = HashSet::with_capacity(ids.len());
        let mut dups = Vec::new();
        let mut missing = Vec::new();
        for id in ids {
            let id = id.as_ref();
            if !seen.insert(id) {
                dups.push(id.to_string());
            } else if !self.index.contains_key(id) {
                missing.push(id.to_string());
            }
        }
        if !dups.is_empty() {
            return Err(Error::DuplicateRequest(dups));
        }
        if !missing.is_empty() {
            return Err(Error::MissingIds(missing));
        }
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        let mut index = HashMap::with_capacity(ids.len());
        let mut out_ids = Vec::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            let id = id.as_ref();
            data.extend_from_slice(self.get(id).expect("checked above"));
            index.insert(id.to_string(), i);
            out_ids.push(id.to_string());
        }
        Ok(EmbeddingMatrix {
            dim: self.dim,
            ids: out_ids,
            data,
            normalized: self.normalized,
            index,
        })
    }

    /// Checks that the `normalized` flag is truthful.
    pub fn verify_unit_rows(&self) -> Result<()> {
        for (id, row) in self.rows() {
            if (l2_norm(row) - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(Error::invalid(format!("embedding `{id}` is not unit norm")));
            }
        }
        Ok(())
    }
}

fn check_row(id: &str, v: &[f32], dim: &mut Option<usize>) -> Result<()> {
    match *dim {
        None if v.is_empty() => {
            return Err(Error::DimensionMismatch {
                id: id.to_string(),
                expected: 1,
                found: 0,
            })
        }
        None => *dim = Some(v.len()),
        Some(d) if d != v.len() => {
            return Err(Error::DimensionMismatch {
                id: id.to_string(),
                expected: d,
                found: v.len(),
            })
        }
        Some(_) => {}
    }
    if let Some(index) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite { id: id.to_string(), index });
    }
    Ok(())
}

pub(crate) fn l2_norm(row: &[f32]) -> f64 {
    row.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

#[derive(Serialize)]
struct EmbeddingLine {
    id: String,
    vector: Vec<f64>,
}

/// Sidecar id file for a RAW matrix.
pub fn raw_ids_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".ids");
    PathBuf::from(s)
}

pub fn load_embeddings(path: &Path, format: EmbeddingFormat) -> Result<EmbeddingMatrix> {
    let m = match format {
        EmbeddingFormat::Jsonl => load_jsonl(path)?,
        EmbeddingFormat::Raw => load_raw(path, &raw_ids_path(path))?,
    };
    log::info!("loaded {} embeddings (dim {}) from {}", m.len(), m.dim(), path.display());
    Ok(m)
}

fn load_jsonl(path: &Path) -> Result<EmbeddingMatrix> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut parsed = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = match serde_json::from_str(raw) {
            Ok(v) => v,
            // Python's json module writes bare NaN/Infinity; read them as
            // null so the offending id gets reported.
            Err(e) => serde_json::from_str(&NON_FINITE_TOKEN.replace_all(raw, "null"))
                .map_err(|_| Error::parse(path, line, e.to_string()))?,
        };
        let id = value
            .get("id")
            .and_then(|v| match v {
                serde_json::Value::String(s) => Some(s.clone()),
                serde_json::Value::Number(n) => Some(n.to_string()),
                _ => None,
            })
            .ok_or_else(|| Error::parse(path, line, "missing id"))?;
        let arr = value
            .get("vector")
            .and_then(|v| v.as_array())
            .ok_or_else(|| Error::parse(path, line, format!("`{id}`: missing vector")))?;
        let mut v = Vec::with_capacity(arr.len());
        for (index, x) in arr.iter().enumerate() {
            match x.as_f64() {
                Some(f) if (f as f32).is_finite() => v.push(f as f32),
                _ => return Err(Error::NonFinite { id, index }),
            }
        }
        parsed.push((id, v));
    }
    EmbeddingMatrix::from_rows(parsed)
}

static NON_FINITE_TOKEN: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"-?\b(?:NaN|Infinity)\b").expect("valid regex"));

pub fn load_raw(path: &Path, ids_path: &Path) -> Result<EmbeddingMatrix> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..4] != RAW_MAGIC {
        return Err(Error::parse(path, 0, "missing EMB1 header"));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() != rows * dim * 4 {
        return Err(Error::parse(
            path,
            0,
            format!("expected {} bytes of vector data for {rows}x{dim}, found {}", rows * dim * 4, body.len()),
        ));
    }
    let ids_text = std::fs::read_to_string(ids_path).map_err(|e| Error::io(ids_path, e))?;
    let ids: Vec<&str> = ids_text.lines().filter(|l| !l.is_empty()).collect();
    if ids.len() != rows {
        return Err(Error::parse(
            ids_path,
            0,
            format!("{} ids for {rows} rows", ids.len()),
        ));
    }
    let values: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let chunk = dim.max(1);
    EmbeddingMatrix::from_rows(ids.into_iter().zip(values.chunks(chunk)).map(|(id, v)| (id, v.to_vec())))
}

pub fn write_jsonl_embeddings(path: &Path, m: &EmbeddingMatrix) -> Result<()> {
    let lines: Vec<EmbeddingLine> = m
        .rows()
        .map(|(id, v)| EmbeddingLine {
            id: id.to_string(),
            vector: v.iter().map(|&x| x as f64).collect(),
        })
        .collect();
    write_jsonl(path, &lines).map(|_| ())
}

/// Writes `path` and its `.ids` sidecar.
pub fn write_raw(path: &Path, m: &EmbeddingMatrix) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |b: &[u8]| w.write_all(b).map_err(|e| Error::io(path, e));
    put(RAW_MAGIC)?;
    put(&(m.len() as u32).to_le_bytes())?;
    put(&(m.dim() as u32).to_le_bytes())?;
    for x in &m.data {
        put(&x.to_le_bytes())?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let ids_path = raw_ids_path(path);
    let mut ids = m.ids.join("\n");
    ids.push('\n');
    std::fs::write(&ids_path, ids).map_err(|e| Error::io(&ids_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn m(rows: &[(&str, &[f32])]) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(rows.iter().map(|(id, v)| (*id, v.to_vec()))).unwrap()
    }

    fn jsonl(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn loads_jsonl() {
        let f = jsonl(&[r#"{"id":"a","vector":[1,2,3]}"#, r#"{"id":"b","vector":[0.5,0,1]}"#]);
        let m = load_embeddings(f.path(), EmbeddingFormat::Jsonl).unwrap();
        assert_eq!((m.len(), m.dim()), (2, 3));
        assert_eq!(m.get("b").unwrap(), &[0.5, 0.0, 1.0]);
    }

    #[test]
    fn dimension_mismatch_names_id() {
        let f = jsonl(&[r#"{"id":"a","vector":[1,2,3]}"#, r#"{"id":"b","vector":[1,2,3,4]}"#]);
        match load_embeddings(f.path(), EmbeddingFormat::Jsonl) {
            Err(Error::DimensionMismatch { id, expected: 3, found: 4 }) => assert_eq!(id, "b"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn nan_names_id() {
        let f = jsonl(&[r#"{"id":"a","vector":[1,null,3]}"#]);
        match load_embeddings(f.path(), EmbeddingFormat::Jsonl) {
            Err(Error::NonFinite { id, index }) => assert_eq!((id.as_str(), index), ("a", 1)),
            other => panic!("unexpected {other:?}"),
        }
        let err = EmbeddingMatrix::from_rows([("x", vec![0.0, f32::NAN])]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1, .. }));
    }

    #[test]
    fn python_style_nan_names_id() {
        let f = jsonl(&[r#"{"id":"a","vector":[1,2]}"#, r#"{"id":"b","vector":[NaN,2]}"#]);
        match load_embeddings(f.path(), EmbeddingFormat::Jsonl) {
            Err(Error::NonFinite { id, index }) => assert_eq!((id.as_str(), index), ("b", 0)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn raw_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("docs.emb");
        let orig = m(&[("a", &[1.0, -2.0]), ("b", &[0.25, 4.0]), ("c", &[0.0, 1.0])]);
        write_raw(&path, &orig).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"EMB1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 12 + 3 * 2 * 4);
        let back = load_embeddings(&path, EmbeddingFormat::Raw).unwrap();
        assert_eq!(back, orig);
    }

    #[test]
    fn raw_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.emb");
        std::fs::write(&path, b"EMB0\0\0\0\0\0\0\0\0").unwrap();
        std::fs::write(raw_ids_path(&path), "").unwrap();
        assert!(load_embeddings(&path, EmbeddingFormat::Raw).is_err());
    }

    #[test]
    fn normalize_three_four_five() {
        let n = m(&[("a", &[3.0, 4.0])]).normalize().unwrap();
        assert!(n.is_normalized());
        assert!((n.row(0)[0] - 0.6).abs() < 1e-7);
        assert!((n.row(0)[1] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn normalize_keeps_unit_row() {
        let n = m(&[("a", &[1.0, 0.0])]).normalize().unwrap();
        assert_eq!(n.row(0), &[1.0, 0.0]);
    }

    #[test]
    fn normalize_rejects_zero_row() {
        let err = m(&[("a", &[1.0, 0.0]), ("z", &[0.0, 0.0])]).normalize().unwrap_err();
        assert!(matches!(err, Error::ZeroNorm { id } if id == "z"));
    }

    #[test]
    fn align_permutes() {
        let base = m(&[("a", &[1.0]), ("b", &[2.0]), ("c", &[3.0])]);
        let a = base.align(&["c", "a"]).unwrap();
        assert_eq!(a.ids(), ["c", "a"]);
        assert_eq!(a.row(0), &[3.0]);
        assert_eq!(a.row(1), &[1.0]);
    }

    #[test]
    fn align_errors() {
        let base = m(&[("a", &[1.0]), ("b", &[2.0]), ("c", &[3.0])]);
        assert!(matches!(base.align(&["a", "a"]), Err(Error::DuplicateRequest(_))));
        match base.align(&["d", "a", "e"]) {
            Err(Error::MissingIds(ids)) => assert_eq!(ids, ["d", "e"]),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn matrix_strategy() -> impl Strategy<Value = Vec<Vec<f32>>> {
        (1usize..6).prop_flat_map(|dim| {
            prop::collection::vec(
                prop::collection::vec(-100.0f32..100.0, dim).prop_filter("nonzero", |v| l2_norm(v) > 1e-3),
                1..12,
            )
        })
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(rows in matrix_strategy()) {
            let m = EmbeddingMatrix::from_rows(rows.iter().enumerate().map(|(i, v)| (i.to_string(), v.clone()))).unwrap();
            let once = m.normalize().unwrap();
            let twice = once.normalize().unwrap();
            once.verify_unit_rows().unwrap();
            for i in 0..once.len() {
                for (a, b) in once.row(i).iter().zip(twice.row(i)) {
                    prop_assert!((a - b).abs() <= 1e-6);
                }
            }
        }

        #[test]
        fn align_preserves_rows(rows in matrix_strategy(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let m = EmbeddingMatrix::from_rows(rows.iter().enumerate().map(|(i, v)| (format!("id{i}"), v.clone()))).unwrap();
            let mut ids: Vec<String> = m.ids().to_vec();
            ids.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            ids.truncate(ids.len().div_ceil(2));
            let a = m.align(&ids).unwrap();
            for id in &ids {
                prop_assert_eq!(a.get(id).unwrap(), m.get(id).unwrap());
            }
        }
    }
}
