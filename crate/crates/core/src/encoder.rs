//! Input vectors `x_i = [token_vec(w_i); pos_vec(r_i)]`.
//!
//! Token vectors come either from a trainable table or from a frozen sidecar
//! of precomputed contextual vectors. Position vectors embed the offset of
//! each token relative to the target span.

use std::collections::HashMap;
use std::fmt::Write as _;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Sentence, Span};
use crate::error::{parse_err, Error, Result};
use crate::params::{Binder, ParamId, ParamStore};
use crate::tape::{Tape, Var};

pub const UNK: &str = "<unk>";

/// Word to row mapping; row 0 is the UNK row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Vocab { words, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

impl Vocab {
    /// Collects every token in order of first appearance.
    pub fn build<'s>(sentences: impl IntoIterator<Item = &'s Sentence>) -> Self {
        let mut words = vec![UNK.to_string()];
        let mut index = HashMap::from([(UNK.to_string(), 0)]);
        for s in sentences {
            for tok in &s.tokens {
                if !index.contains_key(tok) {
                    index.insert(tok.clone(), words.len());
                    words.push(tok.clone());
                }
            }
        }
        Vocab { words, index }
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Offset of each token from the target span: negative before it, zero
/// inside, positive after.
pub fn relative_positions(n: usize, target: Span) -> Vec<i64> {
    (0..n)
        .map(|i| {
            if i < target.start {
                i as i64 - target.start as i64
            } else if i > target.end {
                (i - target.end) as i64
            } else {
                0
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct PositionTable {
    pub id: ParamId,
    pub max_offset: usize,
}

impl PositionTable {
    pub fn row(&self, offset: i64) -> usize {
        let r = self.max_offset as i64;
        (offset.clamp(-r, r) + r) as usize
    }
}

#[derive(Clone, Debug)]
pub enum TokenSource {
    Table { vocab: Vocab, id: ParamId },
    /// Frozen per-token vectors supplied with every example.
    Sidecar { dim: usize },
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub tokens: TokenSource,
    pub positions: PositionTable,
    pub tok_dim: usize,
    pub pos_dim: usize,
}

/// Initialization range for both embedding tables.
const EMBED_INIT: f64 = 0.1;

impl Encoder {
    /// A table-backed encoder when `vocab` is given, otherwise a sidecar
    /// encoder expecting `tok_dim`-wide vectors.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        vocab: Option<Vocab>,
        tok_dim: usize,
        pos_dim: usize,
        max_offset: usize,
    ) -> Self {
        let tokens = match vocab {
            Some(vocab) => {
                let id = store.add_uniform("embed.tokens", vocab.len(), tok_dim, EMBED_INIT, rng);
                TokenSource::Table { vocab, id }
            }
            None => TokenSource::Sidecar { dim: tok_dim },
        };
        let id = store.add_uniform("embed.positions", 2 * max_offset + 1, pos_dim, EMBED_INIT, rng);
        Encoder { tokens, positions: PositionTable { id, max_offset }, tok_dim, pos_dim }
    }

    pub fn out_dim(&self) -> usize {
        self.tok_dim + self.pos_dim
    }

    pub fn vocab(&self) -> Option<&Vocab> {
        match &self.tokens {
            TokenSource::Table { vocab, .. } => Some(vocab),
            TokenSource::Sidecar { .. } => None,
        }
    }

    /// `N × (tok_dim + pos_dim)` input sequence.
    pub fn encode<'a>(
        &self,
        tape: &mut Tape<'a>,
        binder: &mut Binder<'a>,
        sentence: &Sentence,
        vectors: Option<&Array2<f64>>,
    ) -> Result<Var> {
        let n = sentence.len();
        let tok = match (&self.tokens, vectors) {
            (TokenSource::Table { vocab, id }, None) => {
                let rows: Vec<usize> = sentence.tokens.iter().map(|t| vocab.id(t)).collect();
                let table = binder.var(tape, *id);
                tape.gather_rows(table, &rows)
            }
            (TokenSource::Table { .. }, Some(_)) => {
                return Err(Error::Shape("model uses an embedding table, not sidecar vectors".into()))
            }
            (TokenSource::Sidecar { dim }, Some(v)) => {
                if v.dim() != (n, *dim) {
                    return Err(Error::Shape(format!(
                        "sidecar vectors are {}x{}, sentence needs {n}x{dim}",
                        v.nrows(),
                        v.ncols()
                    )));
                }
                tape.constant(v.clone())
            }
            (TokenSource::Sidecar { .. }, None) => {
                return Err(Error::Shape("model expects sidecar vectors for every example".into()))
            }
        };
        let rows: Vec<usize> = relative_positions(n, sentence.target)
            .into_iter()
            .map(|r| self.positions.row(r))
            .collect();
        let table = binder.var(tape, self.positions.id);
        let pos = tape.gather_rows(table, &rows);
        Ok(tape.concat_cols(&[tok, pos]))
    }

    /// Evaluates [`Encoder::encode`] outside of any training graph.
    pub fn encode_values(
        &self,
        store: &ParamStore,
        sentence: &Sentence,
        vectors: Option<&Array2<f64>>,
    ) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(store);
        let x = self.encode(&mut tape, &mut binder, sentence, vectors)?;
        Ok(tape.value(x).clone())
    }
}

/// Precomputed per-token vectors, one matrix per corpus example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sidecar {
    pub dim: usize,
    pub vectors: Vec<Array2<f64>>,
}

fn header_usize(s: Option<&str>, what: &str, line: usize) -> Result<usize> {
    s.and_then(|v| v.parse().ok())
        .ok_or_else(|| parse_err(line, format!("missing or bad {what}")))
}

/// Reads the `N_EXAMPLES D_TOK` / `EXAMPLE i N` / vector-lines format.
pub fn parse_sidecar(text: &str) -> Result<Sidecar> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    let (lineno, header) = lines.next().ok_or_else(|| parse_err(1, "empty sidecar"))?;
    let mut parts = header.split_whitespace();
    let count = header_usize(parts.next(), "example count", lineno)?;
    let dim = header_usize(parts.next(), "vector dimension", lineno)?;
    let mut vectors = Vec::with_capacity(count);
    for expected in 0..count {
        let (lineno, line) = lines
            .next()
            .ok_or_else(|| parse_err(lineno, format!("missing EXAMPLE {expected}")))?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some("EXAMPLE") {
            return Err(parse_err(lineno, "expected EXAMPLE line"));
        }
        let idx = header_usize(parts.next(), "example index", lineno)?;
        if idx != expected {
            return Err(parse_err(lineno, format!("expected EXAMPLE {expected}, found {idx}")));
        }
        let n = header_usize(parts.next(), "token count", lineno)?;
        let mut m = Array2::zeros((n, dim));
        for i in 0..n {
            let (lineno, line) = lines
                .next()
                .ok_or_else(|| parse_err(lineno, "truncated vector block"))?;
            let values: Vec<f64> = line
                .split_whitespace()
                .map(|v| v.parse().map_err(|_| parse_err(lineno, format!("bad float {v:?}"))))
                .collect::<Result<_>>()?;
            if values.len() != dim {
                return Err(parse_err(lineno, format!("expected {dim} values, found {}", values.len())));
            }
            m.row_mut(i).assign(&ndarray::Array1::from(values));
        }
        vectors.push(m);
    }
    if let Some((lineno, _)) = lines.next() {
        return Err(parse_err(lineno, "trailing content after last example"));
    }
    Ok(Sidecar { dim, vectors })
}

pub fn write_sidecar(sidecar: &Sidecar) -> String {
    let mut out = format!("{} {}\n", sidecar.vectors.len(), sidecar.dim);
    for (i, m) in sidecar.vectors.iter().enumerate() {
        writeln!(out, "EXAMPLE {i} {}", m.nrows()).unwrap();
        for row in m.rows() {
            let vals: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            writeln!(out, "{}", vals.join(" ")).unwrap();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::parse_corpus;
    use rand::SeedableRng;

    #[test]
    fn relative_position_examples() {
        assert_eq!(relative_positions(3, Span::single(1)), vec![-1, 0, 1]);
        assert_eq!(relative_positions(5, Span::new(1, 2)), vec![-1, 0, 0, 1, 2]);
        assert_eq!(relative_positions(1, Span::single(0)), vec![0]);
    }

    #[test]
    fn offsets_clamp() {
        let p = PositionTable { id: ParamStore::new().add("p", Array2::zeros((1, 1))), max_offset: 2 };
        assert_eq!(p.row(-7), 0);
        assert_eq!(p.row(0), 2);
        assert_eq!(p.row(9), 4);
    }

    #[test]
    fn encode_shapes_and_unk() {
        let data = parse_corpus("good food here\t-1 0 0\t1:1\t0:0\n").unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = Encoder::new(&mut store, &mut rng, Some(Vocab::build(&data)), 4, 2, 100);
        let x = enc.encode_values(&store, &data[0], None).unwrap();
        assert_eq!(x.dim(), (3, 6));

        let unseen = parse_corpus("bad food\t-1 0\t1:1\t\n").unwrap();
        let x = enc.encode_values(&store, &unseen[0], None).unwrap();
        let table = store.get(store.find("embed.tokens").unwrap());
        assert_eq!(x.row(0).slice(ndarray::s![..4]), table.row(0));
        assert_eq!(enc.encode_values(&store, &unseen[0], None).unwrap(), x);
    }

    #[test]
    fn sidecar_vectors_replace_table() {
        let data = parse_corpus("good food\t-1 0\t1:1\t0:0\n").unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = Encoder::new(&mut store, &mut rng, None, 3, 2, 100);
        let v = Array2::from_shape_fn((2, 3), |(i, j)| (i * 3 + j) as f64);
        let x = enc.encode_values(&store, &data[0], Some(&v)).unwrap();
        assert_eq!(x.slice(ndarray::s![.., ..3]), v);
        let short = Array2::zeros((1, 3));
        assert!(matches!(enc.encode_values(&store, &data[0], Some(&short)), Err(Error::Shape(_))));
        assert!(enc.encode_values(&store, &data[0], None).is_err());
    }

    #[test]
    fn sidecar_format() {
        let text = "2 2\nEXAMPLE 0 1\n0.5 -1\nEXAMPLE 1 2\n1 2\n3 4e-1\n";
        let s = parse_sidecar(text).unwrap();
        assert_eq!(s.dim, 2);
        assert_eq!(s.vectors[1], ndarray::array![[1.0, 2.0], [3.0, 0.4]]);
        assert_eq!(parse_sidecar(&write_sidecar(&s)).unwrap(), s);
        assert!(parse_sidecar("1 2\nEXAMPLE 0 2\n1 2\n").is_err());
        assert!(parse_sidecar("1 2\nEXAMPLE 0 1\n1 2 3\n").is_err());
        assert!(parse_sidecar("1 2\nEXAMPLE 3 1\n1 2\n").is_err());
    }
}
