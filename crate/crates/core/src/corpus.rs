//! Text ingestion: corpora, tf-idf pruned vocabularies and dense design matrices.
//!
//! Tokens are lowercased runs of alphanumeric characters; bigrams join two
//! adjacent tokens with `_` (so "love it" becomes `love_it`).

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::error::{Error, Result};

const MATRIX_MAGIC: &[u8; 4] = b"PLFM";
const MATRIX_VERSION: u32 = 1;

/// Labeled documents in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    documents: Vec<String>,
    targets: Vec<f64>,
}

impl Corpus {
    pub fn new(documents: Vec<String>, targets: Vec<f64>) -> Result<Self> {
        if documents.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if documents.len() != targets.len() {
            return Err(Error::DimensionMismatch {
                expected: documents.len(),
                got: targets.len(),
            });
        }
        if let Some(pos) = targets.iter().position(|t| !t.is_finite()) {
            return Err(Error::MalformedRecord {
                line: pos + 1,
                reason: "non-finite rating".into(),
            });
        }
        Ok(Self { documents, targets })
    }

    pub fn documents(&self) -> &[String] {
        &self.documents
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Tsv,
    Jsonl,
}

impl std::str::FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv" => Ok(CorpusFormat::Tsv),
            "jsonl" => Ok(CorpusFormat::Jsonl),
            other => Err(Error::InvalidArgument(format!("unknown corpus format {other:?}"))),
        }
    }
}

#[derive(Deserialize)]
struct JsonRecord {
    text: String,
    rating: serde_json::Value,
}

/// Reads one document and one numeric rating per line. Blank lines are skipped.
pub fn load_corpus(path: impl AsRef<Path>, format: CorpusFormat) -> Result<Corpus> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);

    let mut documents = Vec::new();
    let mut targets = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let (text, rating) = match format {
            CorpusFormat::Tsv => parse_tsv_line(&line, line_no)?,
            CorpusFormat::Jsonl => parse_jsonl_line(&line, line_no)?,
        };
        documents.push(text);
        targets.push(rating);
    }
    if documents.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Corpus::new(documents, targets)
}

fn parse_tsv_line(line: &str, line_no: usize) -> Result<(String, f64)> {
    let (text, rating) = line.rsplit_once('\t').ok_or_else(|| Error::MalformedRecord {
        line: line_no,
        reason: "expected <document>TAB<rating>".into(),
    })?;
    let rating = parse_rating(rating.trim(), line_no)?;
    Ok((text.to_string(), rating))
}

fn parse_jsonl_line(line: &str, line_no: usize) -> Result<(String, f64)> {
    let record: JsonRecord = serde_json::from_str(line).map_err(|e| Error::MalformedRecord {
        line: line_no,
        reason: e.to_string(),
    })?;
    let rating = match &record.rating {
        serde_json::Value::Number(n) => n.as_f64().ok_or_else(|| Error::MalformedRecord {
            line: line_no,
            reason: format!("rating {n} is not representable"),
        })?,
        other => {
            return Err(Error::MalformedRecord {
                line: line_no,
                reason: format!("non-numeric rating {other}"),
            })
        }
    };
    if !rating.is_finite() {
        return Err(Error::MalformedRecord {
            line: line_no,
            reason: "non-finite rating".into(),
        });
    }
    Ok((record.text, rating))
}

fn parse_rating(raw: &str, line_no: usize) -> Result<f64> {
    match raw.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::MalformedRecord {
            line: line_no,
            reason: format!("non-numeric rating {raw:?}"),
        }),
    }
}

/// Lowercased alphanumeric unigrams, followed by `_`-joined bigrams when `ngram_max == 2`.
pub fn tokenize(text: &str, ngram_max: usize) -> Vec<String> {
    let unigrams: Vec<String> = text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect();
    let mut tokens = unigrams.clone();
    if ngram_max >= 2 {
        tokens.extend(unigrams.windows(2).map(|w| format!("{}_{}", w[0], w[1])));
    }
    tokens
}

fn term_counts(text: &str, ngram_max: usize) -> HashMap<String, usize> {
    let mut counts = HashMap::new();
    for token in tokenize(text, ngram_max) {
        *counts.entry(token).or_insert(0) += 1;
    }
    counts
}

/// Smoothed inverse document frequency, `ln((1 + n) / (1 + df)) + 1`.
pub fn idf(n_documents: usize, doc_frequency: usize) -> f64 {
    ((1.0 + n_documents as f64) / (1.0 + doc_frequency as f64)).ln() + 1.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    terms: Vec<String>,
    doc_frequencies: Vec<usize>,
    tfidf_scores: Vec<f64>,
    n_documents: usize,
    ngram_max: usize,
}

impl Vocabulary {
    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn doc_frequencies(&self) -> &[usize] {
        &self.doc_frequencies
    }

    pub fn tfidf_scores(&self) -> &[f64] {
        &self.tfidf_scores
    }

    pub fn ngram_max(&self) -> usize {
        self.ngram_max
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn idf(&self, term_index: usize) -> f64 {
        idf(self.n_documents, self.doc_frequencies[term_index])
    }
}

/// Keeps terms seen in at least `min_doc_count` documents, ranks them by their
/// largest per-document tf-idf and retains the top `feature_budget`.
/// Ties in score are broken lexicographically.
pub fn build_vocabulary(
    corpus: &Corpus,
    ngram_max: usize,
    min_doc_count: usize,
    feature_budget: usize,
) -> Result<Vocabulary> {
    if feature_budget == 0 {
        return Err(Error::InvalidArgument("feature_budget must be at least 1".into()));
    }
    if !(1..=2).contains(&ngram_max) {
        return Err(Error::InvalidArgument(format!(
            "ngram_max must be 1 or 2, got {ngram_max}"
        )));
    }

    let n_documents = corpus.len();
    let per_doc: Vec<HashMap<String, usize>> = corpus.documents().iter().map(|d| term_counts(d, ngram_max)).collect();

    // BTreeMap keeps the iteration order independent of hashing.
    let mut doc_freq: BTreeMap<&str, usize> = BTreeMap::new();
    let mut max_count: BTreeMap<&str, usize> = BTreeMap::new();
    for counts in &per_doc {
        for (term, &count) in counts {
            *doc_freq.entry(term.as_str()).or_insert(0) += 1;
            let best = max_count.entry(term.as_str()).or_insert(0);
            *best = (*best).max(count);
        }
    }

    let mut ranked: Vec<(&str, usize, f64)> = doc_freq
        .iter()
        .filter(|(_, &df)| df >= min_doc_count)
        .map(|(&term, &df)| (term, df, max_count[term] as f64 * idf(n_documents, df)))
        .collect();

    if ranked.len() < feature_budget {
        return Err(Error::VocabularyTooSmall {
            achievable: ranked.len(),
            requested: feature_budget,
        });
    }

    ranked.sort_by(|a, b| b.2.total_cmp(&a.2).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(feature_budget);

    Ok(Vocabulary {
        terms: ranked.iter().map(|r| r.0.to_string()).collect(),
        doc_frequencies: ranked.iter().map(|r| r.1).collect(),
        tfidf_scores: ranked.iter().map(|r| r.2).collect(),
        n_documents,
        ngram_max,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightScheme {
    Counts,
    TfIdf,
}

impl std::str::FromStr for WeightScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "counts" => Ok(WeightScheme::Counts),
            "tfidf" => Ok(WeightScheme::TfIdf),
            other => Err(Error::InvalidArgument(format!("unknown weight scheme {other:?}"))),
        }
    }
}

pub fn vectorize(corpus: &Corpus, vocab: &Vocabulary, scheme: WeightScheme) -> Result<FeatureMatrix> {
    let index: HashMap<&str, usize> = vocab.terms().iter().enumerate().map(|(j, t)| (t.as_str(), j)).collect();
    let weights: Vec<f64> = (0..vocab.len())
        .map(|j| match scheme {
            WeightScheme::Counts => 1.0,
            WeightScheme::TfIdf => vocab.idf(j),
        })
        .collect();

    let mut x = DMatrix::zeros(corpus.len(), vocab.len());
    for (s, doc) in corpus.documents().iter().enumerate() {
        for token in tokenize(doc, vocab.ngram_max()) {
            if let Some(&j) = index.get(token.as_str()) {
                x[(s, j)] += 1.0;
            }
        }
        for (j, w) in weights.iter().enumerate() {
            x[(s, j)] *= w;
        }
    }
    FeatureMatrix::new(x, DVector::from_column_slice(corpus.targets()), vocab.terms().to_vec())
}

/// Design matrix (rows are samples) with its regression targets.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    x: DMatrix<f64>,
    y: DVector<f64>,
    feature_names: Vec<String>,
}

impl FeatureMatrix {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>, feature_names: Vec<String>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: x.nrows(),
                got: y.len(),
            });
        }
        if x.ncols() != feature_names.len() {
            return Err(Error::DimensionMismatch {
                expected: x.ncols(),
                got: feature_names.len(),
            });
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature matrix entry".into()));
        }
        if feature_names.iter().any(|n| n.contains('\n')) {
            return Err(Error::InvalidArgument("feature names may not contain newlines".into()));
        }
        Ok(Self { x, y, feature_names })
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn n_samples(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.x.ncols()
    }

    /// Copies the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> FeatureMatrix {
        let x = self.x.select_rows(rows);
        let y = DVector::from_iterator(rows.len(), rows.iter().map(|&r| self.y[r]));
        FeatureMatrix {
            x,
            y,
            feature_names: self.feature_names.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (n, d) = self.x.shape();
        let mut out = Vec::with_capacity(24 + 8 * (n * d + n));
        out.extend_from_slice(MATRIX_MAGIC);
        out.extend_from_slice(&MATRIX_VERSION.to_le_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        out.extend_from_slice(&(d as u64).to_le_bytes());
        for r in 0..n {
            for c in 0..d {
                out.extend_from_slice(&self.x[(r, c)].to_le_bytes());
            }
        }
        for v in self.y.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(self.feature_names.join("\n").as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut reader = ByteReader::new(bytes);
        if reader.take(4)? != MATRIX_MAGIC {
            return Err(Error::Format("missing PLFM magic".into()));
        }
        let version = reader.u32()?;
        if version != MATRIX_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let n = reader.u64()? as usize;
        let d = reader.u64()? as usize;
        let cells = n
            .checked_mul(d)
            .ok_or_else(|| Error::Format("matrix size overflows".into()))?;
        let row_major = reader.f64s(cells)?;
        let x = DMatrix::from_row_slice(n, d, &row_major);
        let y = DVector::from_vec(reader.f64s(n)?);
        let names = std::str::from_utf8(reader.rest())
            .map_err(|e| Error::Format(format!("feature names are not utf-8: {e}")))?;
        let feature_names: Vec<String> = if d == 0 {
            Vec::new()
        } else {
            names.split('\n').map(str::to_string).collect()
        };
        FeatureMatrix::new(x, y, feature_names)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Little-endian cursor shared by the binary containers.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated container".into()))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            count
                .checked_mul(8)
                .ok_or_else(|| Error::Format("length overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn rest(&mut self) -> &'a [u8] {
        let slice = &self.bytes[self.pos..];
        self.pos = self.bytes.len();
        slice
    }

    pub(crate) fn finished(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Random disjoint row partition with exactly `n_train` training rows.
/// Both halves keep the original row order.
pub fn split(matrix: &FeatureMatrix, n_train: usize, seed: u64) -> Result<(FeatureMatrix, FeatureMatrix)> {
    let n = matrix.n_samples();
    if n_train == 0 || n_train >= n {
        return Err(Error::InvalidArgument(format!(
            "n_train must lie in (0, {n}), got {n_train}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut train: Vec<usize> = order[..n_train].to_vec();
    let mut test: Vec<usize> = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((matrix.select_rows(&train), matrix.select_rows(&test)))
}

/// One column of the design matrix: the representation of a feature in sample space.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: DVector<f64>,
    pub name: String,
    pub index: usize,
}

pub fn feature_columns(matrix: &FeatureMatrix) -> Vec<FeatureVector> {
    (0..matrix.n_features())
        .map(|j| FeatureVector {
            values: matrix.x().column(j).into_owned(),
            name: matrix.feature_names()[j].clone(),
            index: j,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(docs: &[&str]) -> Corpus {
        Corpus::new(
            docs.iter().map(|d| d.to_string()).collect(),
            (0..docs.len()).map(|i| i as f64).collect(),
        )
        .unwrap()
    }

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_tsv_in_file_order() {
        let f = write_tmp("great blender\t5\nbroke fast\t1\nworks ok\t4\n");
        let c = load_corpus(f.path(), CorpusFormat::Tsv).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.targets(), &[5.0, 1.0, 4.0]);
        assert_eq!(c.documents()[1], "broke fast");
    }

    #[test]
    fn loads_jsonl() {
        let f = write_tmp("{\"text\":\"a b\",\"rating\":2}\n{\"text\":\"c\",\"rating\":3.5}\n");
        let c = load_corpus(f.path(), CorpusFormat::Jsonl).unwrap();
        assert_eq!(c.targets(), &[2.0, 3.5]);
    }

    #[test]
    fn empty_file_is_an_error() {
        let f = write_tmp("");
        let err = load_corpus(f.path(), CorpusFormat::Tsv).unwrap_err();
        assert_eq!(err.to_string(), "empty corpus");
    }

    #[test]
    fn non_numeric_rating_names_the_line() {
        let f = write_tmp("fine\t3\nlovely\tfive\n");
        match load_corpus(f.path(), CorpusFormat::Tsv).unwrap_err() {
            Error::MalformedRecord { line, reason } => {
                assert_eq!(line, 2);
                assert!(reason.contains("five"));
            }
            other => panic!("unexpected {other:?}"),
        }
        let f = write_tmp("{\"text\":\"x\",\"rating\":\"five\"}\n");
        assert!(matches!(
            load_corpus(f.path(), CorpusFormat::Jsonl),
            Err(Error::MalformedRecord { line: 1, .. })
        ));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_corpus("/definitely/not/here.tsv", CorpusFormat::Tsv),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn tokenizer_lowercases_and_joins_bigrams() {
        assert_eq!(
            tokenize("Love it, PERFECTLY!", 2),
            vec!["love", "it", "perfectly", "love_it", "it_perfectly"]
        );
        assert_eq!(tokenize("a-b", 1), vec!["a", "b"]);
    }

    #[test]
    fn rare_tokens_are_pruned() {
        let c = corpus(&["good zebra", "good", "good day", "good day"]);
        let v = build_vocabulary(&c, 1, 2, 2).unwrap();
        assert!(!v.terms().contains(&"zebra".to_string()));
        assert_eq!(v.len(), 2);
    }

    #[test]
    fn ties_break_lexicographically() {
        // "bb" and "aa" have identical statistics; only one fits in the budget.
        let c = corpus(&["aa bb cc cc cc", "aa bb cc"]);
        let v = build_vocabulary(&c, 1, 1, 2).unwrap();
        assert_eq!(v.terms(), &["cc".to_string(), "aa".to_string()]);
    }

    #[test]
    fn too_small_vocabulary_reports_achievable_count() {
        let c = corpus(&["a b", "a c"]);
        match build_vocabulary(&c, 1, 2, 3).unwrap_err() {
            Error::VocabularyTooSmall { achievable, requested } => {
                assert_eq!((achievable, requested), (1, 3));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn counts_vectorization() {
        let c = corpus(&["good good bad", "nothing here", "bad"]);
        let v = build_vocabulary(&c, 1, 1, 4).unwrap();
        let m = vectorize(&c, &v, WeightScheme::Counts).unwrap();
        let good = v.terms().iter().position(|t| t == "good").unwrap();
        let bad = v.terms().iter().position(|t| t == "bad").unwrap();
        assert_eq!(m.x()[(0, good)], 2.0);
        assert_eq!(m.x()[(0, bad)], 1.0);

        let c2 = corpus(&["zzz"]);
        let row = vectorize(&c2, &v, WeightScheme::Counts).unwrap();
        assert!(row.x().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn tfidf_vectorization_matches_hand_values() {
        // Two documents, vocabulary {a, b}:
        //   a: df = 2 -> idf = ln(3/3) + 1 = 1
        //   b: df = 1 -> idf = ln(3/2) + 1
        let c = corpus(&["a a b", "a"]);
        let v = build_vocabulary(&c, 1, 1, 2).unwrap();
        let m = vectorize(&c, &v, WeightScheme::TfIdf).unwrap();
        let a = v.terms().iter().position(|t| t == "a").unwrap();
        let b = v.terms().iter().position(|t| t == "b").unwrap();
        let idf_b = (3.0f64 / 2.0).ln() + 1.0;
        assert!((m.x()[(0, a)] - 2.0).abs() < 1e-15);
        assert!((m.x()[(0, b)] - idf_b).abs() < 1e-15);
        assert!((m.x()[(1, a)] - 1.0).abs() < 1e-15);
        assert_eq!(m.x()[(1, b)], 0.0);
        assert_eq!(m.y().as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn split_partitions_rows() {
        let x = DMatrix::from_fn(10, 2, |r, c| (r * 2 + c) as f64);
        let y = DVector::from_fn(10, |r, _| r as f64);
        let m = FeatureMatrix::new(x, y, vec!["a".into(), "b".into()]).unwrap();
        let (train, test) = split(&m, 3, 7).unwrap();
        assert_eq!(train.n_samples(), 3);
        assert_eq!(test.n_samples(), 7);
        let mut all: Vec<f64> = train.y().iter().chain(test.y().iter()).copied().collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, (0..10).map(|v| v as f64).collect::<Vec<_>>());
        assert_eq!(split(&m, 3, 7).unwrap().0, train);
        assert!(split(&m, 10, 7).is_err());
        assert!(split(&m, 0, 7).is_err());
    }

    #[test]
    fn identity_columns() {
        let m = FeatureMatrix::new(DMatrix::identity(2, 2), DVector::zeros(2), vec!["p".into(), "q".into()]).unwrap();
        let cols = feature_columns(&m);
        assert_eq!(cols[0].values.as_slice(), &[1.0, 0.0]);
        assert_eq!(cols[1].values.as_slice(), &[0.0, 1.0]);
        assert_eq!(cols[1].index, 1);
    }

    #[test]
    fn binary_container_layout() {
        let m = FeatureMatrix::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]),
            DVector::from_vec(vec![5.0, 6.0]),
            vec!["love_it".into(), "bad".into()],
        )
        .unwrap();
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], b"PLFM");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 2);
        // row-major: second value is x[0][1]
        assert_eq!(f64::from_le_bytes(bytes[32..40].try_into().unwrap()), 2.0);
        assert_eq!(f64::from_le_bytes(bytes[56..64].try_into().unwrap()), 5.0);
        assert_eq!(&bytes[72..], b"love_it\nbad");
        assert_eq!(FeatureMatrix::from_bytes(&bytes).unwrap(), m);
        assert!(FeatureMatrix::from_bytes(&bytes[..30]).is_err());
    }

    #[test]
    fn rejects_non_finite_entries() {
        let x = DMatrix::from_element(1, 1, f64::NAN);
        assert!(FeatureMatrix::new(x, DVector::zeros(1), vec!["a".into()]).is_err());
    }
}
