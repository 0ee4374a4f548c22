//! Documents, their embeddings, and embedding providers.
//!
//! A [`CorpusStore`] is the private external database: an ordered list of
//! documents plus a row-aligned [`EmbeddingMatrix`]. All stored embeddings
//! are L2-normalized so cosine similarity reduces to a dot product.

mod file;
mod hash;
mod remote;

pub use file::{load_embeddings, save_embeddings};
pub use hash::{tokenize, HashEmbedder};
pub use remote::RemoteEmbedder;

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the unit-norm check for rows of a normalized matrix.
pub const NORM_TOLERANCE: f64 = 1e-4;

/// One text record in the external database.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Document {
            id: id.into(),
            text: text.into(),
            metadata: BTreeMap::new(),
        }
    }
}

/// Dense row-major f32 embedding matrix.
///
/// `normalized` is set when every row has unit L2 norm (within
/// [`NORM_TOLERANCE`]). A matrix containing zero rows (from zero-token
/// texts) is never marked normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    count: usize,
    data: Vec<f32>,
    normalized: bool,
}

impl EmbeddingMatrix {
    /// Build a matrix from row-major data, validating shape and finiteness.
    /// The `normalized` flag is derived from the data.
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::BadDim { dim });
        }
        if data.len() % dim != 0 {
            return Err(Error::BadDataLength {
                len: data.len(),
                count: data.len() / dim,
                dim,
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteEmbedding);
        }
        let count = data.len() / dim;
        let mut m = EmbeddingMatrix {
            dim,
            count,
            data,
            normalized: false,
        };
        m.normalized = m.all_rows_unit();
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// L2-normalize every row in place; zero rows are left untouched.
    /// The matrix is marked normalized only when no zero rows remain.
    pub fn normalize_rows(&mut self) {
        for i in 0..self.count {
            let row = &mut self.data[i * self.dim..(i + 1) * self.dim];
            let norm = l2_norm(row);
            if norm > 0.0 {
                for v in row.iter_mut() {
                    *v = (f64::from(*v) / norm) as f32;
                }
            }
        }
        self.normalized = self.all_rows_unit();
    }

    fn all_rows_unit(&self) -> bool {
        (0..self.count).all(|i| (l2_norm(self.row(i)) - 1.0).abs() <= NORM_TOLERANCE)
    }
}

pub(crate) fn l2_norm(row: &[f32]) -> f64 {
    row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt()
}

/// Anything that can turn texts into fixed-dimension embeddings.
pub trait EmbeddingProvider {
    fn dim(&self) -> usize;

    /// Embed `texts`, one row per text, in input order.
    fn embed(&self, texts: &[&str]) -> Result<EmbeddingMatrix>;

    fn embed_one(&self, text: &str) -> Result<Vec<f32>> {
        let m = self.embed(&[text])?;
        Ok(m.row(0).to_vec())
    }
}

/// The private external database: documents plus row-aligned embeddings.
///
/// Immutable after construction; concurrent readers are safe.
#[derive(Debug, Clone)]
pub struct CorpusStore {
    documents: Vec<Document>,
    embeddings: EmbeddingMatrix,
    by_id: HashMap<String, usize>,
}

impl CorpusStore {
    pub fn new(documents: Vec<Document>, embeddings: EmbeddingMatrix) -> Result<Self> {
        if documents.len() != embeddings.count() {
            return Err(Error::BadDataLength {
                len: embeddings.count() * embeddings.dim(),
                count: documents.len(),
                dim: embeddings.dim(),
            });
        }
        let mut by_id = HashMap::with_capacity(documents.len());
        for (i, doc) in documents.iter().enumerate() {
            if doc.id.is_empty() {
                return Err(Error::MalformedLine {
                    line: i + 1,
                    reason: "empty document id".into(),
                });
            }
            if by_id.insert(doc.id.clone(), i).is_some() {
                return Err(Error::DuplicateId {
                    line: i + 1,
                    id: doc.id.clone(),
                });
            }
        }
        Ok(CorpusStore {
            documents,
            embeddings,
            by_id,
        })
    }

    /// Embed `documents` with `provider` and build the store.
    pub fn build<P: EmbeddingProvider>(documents: Vec<Document>, provider: &P) -> Result<Self> {
        let texts: Vec<&str> = documents.iter().map(|d| d.text.as_str()).collect();
        let mut embeddings = provider.embed(&texts)?;
        embeddings.normalize_rows();
        CorpusStore::new(documents, embeddings)
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.dim()
    }

    pub fn document(&self, row: usize) -> &Document {
        &self.documents[row]
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn embeddings(&self) -> &EmbeddingMatrix {
        &self.embeddings
    }

    pub fn row_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.row_of(id).map(|i| &self.documents[i])
    }
}

/// Read documents from a JSONL file: one `{"id", "text", "metadata"?}`
/// object per line. Blank lines are rejected as malformed.
pub fn ingest_jsonl(path: impl AsRef<Path>) -> Result<Vec<Document>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut docs = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let doc: Document = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            line: line_no,
            reason: e.to_string(),
        })?;
        if doc.id.is_empty() {
            return Err(Error::MalformedLine {
                line: line_no,
                reason: "empty document id".into(),
            });
        }
        if doc.text.is_empty() {
            return Err(Error::MalformedLine {
                line: line_no,
                reason: "empty document text".into(),
            });
        }
        if seen.insert(doc.id.clone(), line_no).is_some() {
            return Err(Error::DuplicateId {
                line: line_no,
                id: doc.id,
            });
        }
        docs.push(doc);
    }
    Ok(docs)
}

/// Write documents as JSONL, the inverse of [`ingest_jsonl`].
pub fn write_jsonl(docs: &[Document], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for doc in docs {
        let line = serde_json::to_string(doc).expect("document serialization cannot fail");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        use std::io::Write;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn ingest_preserves_order() {
        let f = write_lines(&[
            r#"{"id":"a","text":"alpha"}"#,
            r#"{"id":"b","text":"beta","metadata":{"k":"v"}}"#,
            r#"{"id":"c","text":"gamma"}"#,
        ]);
        let docs = ingest_jsonl(f.path()).unwrap();
        assert_eq!(docs.len(), 3);
        assert_eq!(docs[0].id, "a");
        assert_eq!(docs[1].metadata.get("k").map(String::as_str), Some("v"));
        assert_eq!(docs[2].text, "gamma");
    }

    #[test]
    fn ingest_empty_file() {
        let f = tempfile::NamedTempFile::new().unwrap();
        assert!(ingest_jsonl(f.path()).unwrap().is_empty());
    }

    #[test]
    fn ingest_duplicate_id_names_line() {
        let f = write_lines(&[r#"{"id":"a","text":"x"}"#, r#"{"id":"a","text":"y"}"#]);
        match ingest_jsonl(f.path()) {
            Err(Error::DuplicateId { line, id }) => {
                assert_eq!(line, 2);
                assert_eq!(id, "a");
            }
            other => panic!("expected duplicate id error, got {other:?}"),
        }
        let f = write_lines(&[r#"{"id":"a","text":"x"}"#, "not json"]);
        match ingest_jsonl(f.path()) {
            Err(Error::MalformedLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected malformed line error, got {other:?}"),
        }
    }

    #[test]
    fn write_then_ingest_is_identity() {
        let docs = vec![
            Document::new("a", "alpha beta"),
            Document {
                id: "b".into(),
                text: "gamma".into(),
                metadata: [("k".to_string(), "v".to_string())].into_iter().collect(),
            },
        ];
        let f = tempfile::NamedTempFile::new().unwrap();
        write_jsonl(&docs, f.path()).unwrap();
        assert_eq!(ingest_jsonl(f.path()).unwrap(), docs);
    }

    #[test]
    fn matrix_shape_validation() {
        assert!(matches!(
            EmbeddingMatrix::new(4, vec![0.0; 6]),
            Err(Error::BadDataLength { .. })
        ));
        assert!(matches!(
            EmbeddingMatrix::new(4, vec![f32::NAN; 4]),
            Err(Error::NonFiniteEmbedding)
        ));
        let m = EmbeddingMatrix::new(4, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(m.is_normalized());
        let m = EmbeddingMatrix::new(4, vec![2.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(!m.is_normalized());
    }

    #[test]
    fn normalize_rows_skips_zero_rows() {
        let mut m = EmbeddingMatrix::new(2, vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        m.normalize_rows();
        assert!((f64::from(m.row(0)[0]) - 0.6).abs() < 1e-6);
        assert_eq!(m.row(1), &[0.0, 0.0]);
        // a zero row keeps the matrix un-normalized
        assert!(!m.is_normalized());
    }

    #[test]
    fn store_rejects_duplicate_ids() {
        let docs = vec![Document::new("a", "x"), Document::new("a", "y")];
        let emb = EmbeddingMatrix::new(2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(
            CorpusStore::new(docs, emb),
            Err(Error::DuplicateId { .. })
        ));
    }
}
