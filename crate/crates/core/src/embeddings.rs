//! Pre-trained word vectors and mean-pooled component embeddings.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::dataset::McqRecord;
use crate::error::{Error, Result};
use crate::features::tokenize;
use crate::tensor::Tensor;

/// Embedding widths are padded with zeros up to a multiple of this, so the
/// four-head encoders can split them evenly.
pub const WIDTH_MULTIPLE: usize = 4;

pub fn padded_width(dim: usize) -> usize {
    dim.div_ceil(WIDTH_MULTIPLE) * WIDTH_MULTIPLE
}

/// Word → vector table in the GloVe text layout (`word v1 v2 ... vd`).
#[derive(Clone, Debug)]
pub struct GloveTable {
    vectors: HashMap<String, Vec<f64>>,
    raw_dim: usize,
    dim: usize,
}

impl GloveTable {
    /// Build from `(word, vector)` pairs; words are lowercased and vectors
    /// zero-padded to [`padded_width`].
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Vec<f64>)>) -> Result<Self> {
        let mut vectors = HashMap::new();
        let mut raw_dim = None;
        for (word, v) in pairs {
            let d = *raw_dim.get_or_insert(v.len());
            if v.len() != d || d == 0 {
                return Err(Error::Validation(format!(
                    "vector for `{word}` has {} components, expected {d}",
                    v.len()
                )));
            }
            vectors.insert(word.to_lowercase(), v);
        }
        let raw_dim = raw_dim.ok_or_else(|| Error::EmptyDataset("no word vectors".into()))?;
        let dim = padded_width(raw_dim);
        for v in vectors.values_mut() {
            v.resize(dim, 0.0);
        }
        Ok(Self {
            vectors,
            raw_dim,
            dim,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut pairs = Vec::new();
        let mut dim = None;
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                message,
            };
            let mut fields = line.split_whitespace();
            let Some(word) = fields.next() else { continue };
            let v = fields
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| parse_err(e.to_string()))?;
            let d = *dim.get_or_insert(v.len());
            if v.len() != d || d == 0 {
                return Err(parse_err(format!(
                    "expected {d} components for `{word}`, found {}",
                    v.len()
                )));
            }
            pairs.push((word.to_string(), v));
        }
        if pairs.is_empty() {
            return Err(Error::EmptyDataset(format!(
                "embedding file {} has no vectors",
                path.display()
            )));
        }
        Self::from_pairs(pairs)
    }

    /// Write the unpadded vectors, sorted by word.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let mut words: Vec<_> = self.vectors.keys().collect();
        words.sort();
        for w in words {
            let v = &self.vectors[w][..self.raw_dim];
            let nums: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
            writeln!(out, "{w} {}", nums.join(" ")).map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    /// Width of stored (padded) vectors.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Width in the source file.
    pub fn raw_dim(&self) -> usize {
        self.raw_dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Case-insensitive lookup; `None` for out-of-vocabulary words.
    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.vectors.get(&word.to_lowercase()).map(Vec::as_slice)
    }

    /// Vector for `word`, or zeros with `oov = true`.
    pub fn lookup(&self, word: &str) -> (Vec<f64>, bool) {
        match self.get(word) {
            Some(v) => (v.to_vec(), false),
            None => (vec![0.0; self.dim], true),
        }
    }
}

/// Mean of the in-vocabulary token vectors; zeros when none is found.
pub fn embed_component(text: &str, table: &GloveTable) -> Vec<f64> {
    let mut sum = vec![0.0; table.dim()];
    let mut found = 0usize;
    for w in tokenize::words(text) {
        if let Some(v) = table.get(w) {
            for (s, x) in sum.iter_mut().zip(v) {
                *s += x;
            }
            found += 1;
        }
    }
    if found > 0 {
        sum.iter_mut().for_each(|s| *s /= found as f64);
    }
    sum
}

/// `7 × d` matrix of component embeddings in the order S, A, D1..D4, E.
#[derive(Clone, Debug, PartialEq)]
pub struct ComponentEmbeddings(Tensor);

impl ComponentEmbeddings {
    pub const ROWS: usize = 7;

    pub fn new(t: Tensor) -> Result<Self> {
        match t.shape() {
            [7, _] => Ok(Self(t)),
            other => Err(Error::shape("ComponentEmbeddings", other, &[7, 0])),
        }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }
}

pub fn embed_question(mcq: &McqRecord, table: &GloveTable) -> ComponentEmbeddings {
    let rows: Vec<Vec<f64>> = mcq
        .components()
        .iter()
        .map(|c| embed_component(c, table))
        .collect();
    ComponentEmbeddings(Tensor::from_rows(&rows).expect("rows share the table width"))
}

#[cfg(test)]
mod tests {
    use super::*;


    fn toy() -> GloveTable {
        GloveTable::from_pairs([
            ("cat".to_string(), vec![1.0, 0.0, 2.0]),
            ("dog".to_string(), vec![3.0, 4.0, 0.0]),
        ])
        .unwrap()
    }

    #[test]
    fn load_toy_file() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "the 0.1 0.2 0.3\ncat -1 0 1").unwrap();
        let t = GloveTable::load(f.path()).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.raw_dim(), 3);
        assert_eq!(t.dim(), 4);
        assert_eq!(t.get("CAT").unwrap(), &[-1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn short_line_is_named() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "the 0.1 0.2 0.3\ncat -1 0").unwrap();
        match GloveTable::load(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_an_error() {
        let f = tempfile::NamedTempFile::new().unwrap();
        assert!(GloveTable::load(f.path()).is_err());
    }

    #[test]
    fn oov_is_zero() {
        let (v, oov) = toy().lookup("zebra");
        assert!(oov);
        assert_eq!(v, vec![0.0; 4]);
    }

    #[test]
    fn pooling() {
        let t = toy();
        assert_eq!(embed_component("cat", &t), t.get("cat").unwrap());
        assert_eq!(embed_component("cat dog", &t), vec![2.0, 2.0, 1.0, 0.0]);
        assert_eq!(embed_component("dog cat", &t), embed_component("cat dog", &t));
        assert_eq!(embed_component("", &t), vec![0.0; 4]);
        assert_eq!(embed_component("zebra", &t), vec![0.0; 4]);
    }

    #[test]
    fn question_rows() {
        let t = toy();
        let q = McqRecord {
            id: "q".into(),
            stem: "cat".into(),
            answer: "dog".into(),
            distractors: vec!["cat".into(), "dog cat".into()],
            explanation: "cat".into(),
            ratings: None,
            average_rating: None,
            rating_count: None,
        };
        let e = embed_question(&q, &t);
        assert_eq!(e.tensor().shape(), &[7, 4]);
        assert_eq!(e.row(0), e.row(6));
        assert_eq!(e.row(4), &[0.0; 4]);
        assert_eq!(e.row(5), &[0.0; 4]);
    }

    #[test]
    fn save_load_roundtrip() {
        let t = toy();
        let f = tempfile::NamedTempFile::new().unwrap();
        t.save(f.path()).unwrap();
        let back = GloveTable::load(f.path()).unwrap();
        assert_eq!(back.get("dog"), t.get("dog"));
        assert_eq!(back.raw_dim(), 3);
    }
}
