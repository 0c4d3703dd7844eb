//! Annotated examples, the tab-separated corpus format, BIO labels, data
//! splitting and a synthetic corpus generator.
//!
//! A corpus line holds one (sentence, target) example:
//!
//! ```text
//! tokens<TAB>heads<TAB>target<TAB>opinions
//! good food<TAB>-1 0<TAB>1:1<TAB>0:0
//! ```
//!
//! Tokens and heads are space separated, heads are 0-based with `-1` for the
//! root, spans are inclusive `start:end` pairs and opinions are comma
//! separated (possibly empty).

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{parse_err, Error, Result};
use crate::syntax::DepTree;

/// Inclusive token range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn single(i: usize) -> Self {
        Span { start: i, end: i }
    }

    pub fn contains(&self, i: usize) -> bool {
        self.start <= i && i <= self.end
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start <= other.end && other.start <= self.end
    }

    pub fn indices(&self) -> std::ops::RangeInclusive<usize> {
        self.start..=self.end
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn check(&self, n: usize) -> Result<()> {
        if self.start > self.end || self.end >= n {
            return Err(Error::SpanRange(self.start, self.end, n));
        }
        Ok(())
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.start, self.end)
    }
}

impl std::str::FromStr for Span {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let (a, b) = s
            .split_once(':')
            .ok_or_else(|| format!("span {s:?} is not of the form start:end"))?;
        let start = a.trim().parse().map_err(|_| format!("bad span start in {s:?}"))?;
        let end = b.trim().parse().map_err(|_| format!("bad span end in {s:?}"))?;
        if start > end {
            return Err(format!("span {s:?} ends before it starts"));
        }
        Ok(Span { start, end })
    }
}

/// Pairwise-disjoint spans kept sorted by start.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpanSet(Vec<Span>);

impl SpanSet {
    pub fn new(mut spans: Vec<Span>) -> Result<Self> {
        spans.sort();
        for pair in spans.windows(2) {
            if pair[0].overlaps(&pair[1]) {
                return Err(Error::Config(format!("span overlap: {} and {}", pair[0], pair[1])));
            }
        }
        Ok(SpanSet(spans))
    }

    pub fn empty() -> Self {
        SpanSet(Vec::new())
    }

    pub fn spans(&self) -> &[Span] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, span: &Span) -> bool {
        self.0.binary_search(span).is_ok()
    }

    /// Every token index covered by some span, ascending.
    pub fn indices(&self) -> Vec<usize> {
        self.0.iter().flat_map(|s| s.indices()).collect()
    }
}

impl<'a> IntoIterator for &'a SpanSet {
    type Item = &'a Span;
    type IntoIter = std::slice::Iter<'a, Span>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Bio {
    B,
    I,
    O,
}

impl Bio {
    pub const ALL: [Bio; 3] = [Bio::B, Bio::I, Bio::O];

    /// Column of this label in the prediction head's output.
    pub fn index(self) -> usize {
        match self {
            Bio::B => 0,
            Bio::I => 1,
            Bio::O => 2,
        }
    }

    pub fn from_index(i: usize) -> Bio {
        Bio::ALL[i]
    }
}

pub fn encode_bio(spans: &SpanSet, n: usize) -> Result<Vec<Bio>> {
    let mut labels = vec![Bio::O; n];
    for span in spans {
        span.check(n)?;
        labels[span.start] = Bio::B;
        for label in &mut labels[span.start + 1..=span.end] {
            *label = Bio::I;
        }
    }
    Ok(labels)
}

/// Tolerant decoding: an `I` that does not continue a span opens a new one.
pub fn decode_bio(labels: &[Bio]) -> SpanSet {
    let mut spans = Vec::new();
    let mut open: Option<usize> = None;
    for (i, label) in labels.iter().enumerate() {
        match label {
            Bio::B => {
                if let Some(start) = open.take() {
                    spans.push(Span::new(start, i - 1));
                }
                open = Some(i);
            }
            Bio::I => {
                if open.is_none() {
                    open = Some(i);
                }
            }
            Bio::O => {
                if let Some(start) = open.take() {
                    spans.push(Span::new(start, i - 1));
                }
            }
        }
    }
    if let Some(start) = open {
        spans.push(Span::new(start, labels.len() - 1));
    }
    SpanSet(spans)
}

/// One (sentence, target) example with its gold opinion spans.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sentence {
    pub tokens: Vec<String>,
    /// Head index per token; `None` marks the root.
    pub heads: Vec<Option<usize>>,
    pub target: Span,
    pub opinions: SpanSet,
}

impl Sentence {
    pub fn new(
        tokens: Vec<String>,
        heads: Vec<Option<usize>>,
        target: Span,
        opinions: Vec<Span>,
    ) -> Result<Self> {
        let n = tokens.len();
        if n == 0 {
            return Err(Error::Config("empty sentence".into()));
        }
        if heads.len() != n {
            return Err(Error::Config(format!("{} tokens but {} heads", n, heads.len())));
        }
        if let Some(tok) = tokens.iter().find(|t| t.is_empty() || t.contains(char::is_whitespace)) {
            return Err(Error::Config(format!("token {tok:?} is empty or contains whitespace")));
        }
        DepTree::new(&heads)?;
        target.check(n)?;
        for span in &opinions {
            span.check(n)?;
            if span.overlaps(&target) {
                return Err(Error::Config(format!("span overlap: opinion {span} and target {target}")));
            }
        }
        let opinions = SpanSet::new(opinions)?;
        Ok(Sentence { tokens, heads, target, opinions })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tree(&self) -> DepTree {
        DepTree::new(&self.heads).expect("validated at construction")
    }

    pub fn gold_labels(&self) -> Vec<Bio> {
        encode_bio(&self.opinions, self.len()).expect("validated at construction")
    }

    pub fn opinion_indices(&self) -> Vec<usize> {
        self.opinions.indices()
    }

    /// Tokens that are neither target nor opinion.
    pub fn other_indices(&self) -> Vec<usize> {
        let mut marked = vec![false; self.len()];
        for i in self.target.indices().chain(self.opinions.indices()) {
            marked[i] = true;
        }
        (0..self.len()).filter(|&i| !marked[i]).collect()
    }

    /// Serializes to one corpus line (no trailing newline).
    pub fn to_line(&self) -> String {
        let heads: Vec<String> = self
            .heads
            .iter()
            .map(|h| h.map_or_else(|| "-1".to_string(), |h| h.to_string()))
            .collect();
        let opinions: Vec<String> = self.opinions.spans().iter().map(Span::to_string).collect();
        format!(
            "{}\t{}\t{}\t{}",
            self.tokens.join(" "),
            heads.join(" "),
            self.target,
            opinions.join(",")
        )
    }
}

fn parse_spans(field: &str) -> std::result::Result<Vec<Span>, String> {
    if field.trim().is_empty() {
        return Ok(Vec::new());
    }
    field.split(',').map(|s| s.trim().parse()).collect()
}

fn parse_head(s: &str) -> std::result::Result<Option<usize>, String> {
    match s.parse::<i64>() {
        Ok(-1) => Ok(None),
        Ok(h) if h >= 0 => Ok(Some(h as usize)),
        _ => Err(format!("bad head {s:?}")),
    }
}

fn parse_line(line: &str, lineno: usize) -> Result<Sentence> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 4 {
        return Err(parse_err(lineno, format!("expected 4 tab-separated fields, found {}", fields.len())));
    }
    let tokens: Vec<String> = fields[0].split(' ').map(str::to_string).collect();
    let heads = fields[1]
        .split(' ')
        .map(parse_head)
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| parse_err(lineno, e))?;
    let target: Span = fields[2].trim().parse().map_err(|e| parse_err(lineno, e))?;
    let opinions = parse_spans(fields[3]).map_err(|e| parse_err(lineno, e))?;
    Sentence::new(tokens, heads, target, opinions).map_err(|e| parse_err(lineno, e.to_string()))
}

/// Parses a corpus document; blank lines are ignored, any malformed record
/// fails the whole parse with its 1-based line number.
pub fn parse_corpus(text: &str) -> Result<Vec<Sentence>> {
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(i, line)| parse_line(line.trim_end_matches('\r'), i + 1))
        .collect()
}

pub fn write_corpus(sentences: &[Sentence]) -> String {
    let mut out = String::new();
    for s in sentences {
        out.push_str(&s.to_line());
        out.push('\n');
    }
    out
}

/// Reads CoNLL-U trees (ID, FORM and HEAD columns) together with an
/// annotation file whose lines are `sentence_index<TAB>target<TAB>opinions`.
/// A tree may be annotated several times, once per target.
pub fn parse_conllu(conllu: &str, annotations: &str) -> Result<Vec<Sentence>> {
    let mut trees: Vec<(Vec<String>, Vec<Option<usize>>)> = Vec::new();
    let mut tokens = Vec::new();
    let mut heads = Vec::new();
    let mut flush = |tokens: &mut Vec<String>, heads: &mut Vec<Option<usize>>| {
        if !tokens.is_empty() {
            trees.push((std::mem::take(tokens), std::mem::take(heads)));
        }
    };
    for (i, line) in conllu.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            flush(&mut tokens, &mut heads);
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 10 {
            return Err(parse_err(lineno, format!("expected 10 CoNLL-U columns, found {}", cols.len())));
        }
        // multiword ranges and empty nodes carry no tree position
        if cols[0].contains('-') || cols[0].contains('.') {
            continue;
        }
        let id: usize = cols[0].parse().map_err(|_| parse_err(lineno, "bad ID"))?;
        if id != tokens.len() + 1 {
            return Err(parse_err(lineno, format!("expected ID {}, found {id}", tokens.len() + 1)));
        }
        let head: usize = cols[6].parse().map_err(|_| parse_err(lineno, "bad HEAD"))?;
        tokens.push(cols[1].replace(char::is_whitespace, "_"));
        heads.push(if head == 0 { None } else { Some(head - 1) });
    }
    flush(&mut tokens, &mut heads);

    let mut out = Vec::new();
    for (i, line) in annotations.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end_matches('\r').split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(lineno, "annotation needs sentence index, target and opinions"));
        }
        let idx: usize = fields[0].trim().parse().map_err(|_| parse_err(lineno, "bad sentence index"))?;
        let (tokens, heads) = trees
            .get(idx)
            .ok_or_else(|| parse_err(lineno, format!("sentence {idx} not in treebank")))?;
        let target: Span = fields[1].trim().parse().map_err(|e| parse_err(lineno, e))?;
        let opinions = parse_spans(fields[2]).map_err(|e| parse_err(lineno, e))?;
        let sentence = Sentence::new(tokens.clone(), heads.clone(), target, opinions)
            .map_err(|e| parse_err(lineno, e.to_string()))?;
        out.push(sentence);
    }
    Ok(out)
}

/// Deterministic partition into (train, dev); the dev part has
/// `round(ratio * len)` items drawn by a seeded shuffle. Both parts keep the
/// input order.
pub fn split_train_dev<T: Clone>(data: &[T], ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("dev ratio {ratio} not in (0, 1)")));
    }
    let dev_size = (ratio * data.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut in_dev = vec![false; data.len()];
    for &i in &order[..dev_size] {
        in_dev[i] = true;
    }
    let (mut train, mut dev) = (Vec::new(), Vec::new());
    for (item, dev_member) in data.iter().zip(in_dev) {
        if dev_member {
            dev.push(item.clone());
        } else {
            train.push(item.clone());
        }
    }
    Ok((train, dev))
}

/// Knobs for [`gen_synthetic_with`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    /// Probability that a marker token becomes a gold opinion next to the
    /// target rather than a distractor.
    pub opinion_prob: f64,
    pub max_markers: usize,
    pub marker_vocab: usize,
    pub filler_vocab: usize,
    pub target_vocab: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            opinion_prob: 0.7,
            max_markers: 3,
            marker_vocab: 10,
            filler_vocab: 60,
            target_vocab: 20,
        }
    }
}

pub fn gen_synthetic(n_sentences: usize, lengths: (usize, usize), seed: u64) -> Result<Vec<Sentence>> {
    gen_synthetic_with(&SyntheticConfig::default(), n_sentences, lengths, seed)
}

/// Random trees with marker tokens (`OPN_k`). A marker becomes a gold opinion
/// as a leaf child of the target, linearly adjacent to it; otherwise it is a
/// distractor hung at tree distance at least 3 and linear offset at least 3.
pub fn gen_synthetic_with(
    cfg: &SyntheticConfig,
    n_sentences: usize,
    (min_len, max_len): (usize, usize),
    seed: u64,
) -> Result<Vec<Sentence>> {
    if min_len < 3 || min_len > max_len {
        return Err(Error::Config(format!(
            "infeasible length range ({min_len}, {max_len}): need 3 <= min <= max"
        )));
    }
    if !(0.0..=1.0).contains(&cfg.opinion_prob) {
        return Err(Error::Config("opinion_prob must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_sentences);
    for _ in 0..n_sentences {
        out.push(gen_one(cfg, &mut rng, min_len, max_len));
    }
    Ok(out)
}

fn gen_one(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng, min_len: usize, max_len: usize) -> Sentence {
    let n = rng.gen_range(min_len..=max_len);
    let t = rng.gen_range(0..n);

    let mut adjacent: Vec<usize> = [t.checked_sub(1), Some(t + 1).filter(|&i| i < n)]
        .into_iter()
        .flatten()
        .collect();
    let mut far: Vec<usize> = (0..n).filter(|&i| i.abs_diff(t) >= 3).collect();
    let mut opinions = Vec::new();
    let mut distractors = Vec::new();
    for _ in 0..rng.gen_range(1..=cfg.max_markers) {
        if rng.gen_bool(cfg.opinion_prob) && !adjacent.is_empty() {
            opinions.push(adjacent.swap_remove(rng.gen_range(0..adjacent.len())));
        } else if !far.is_empty() {
            distractors.push(far.swap_remove(rng.gen_range(0..far.len())));
        }
    }

    // random recursive tree over target and fillers
    let mut core: Vec<usize> = (0..n)
        .filter(|i| !opinions.contains(i) && !distractors.contains(i))
        .collect();
    core.shuffle(rng);
    let mut heads: Vec<Option<usize>> = vec![None; n];
    for k in 1..core.len() {
        heads[core[k]] = Some(core[rng.gen_range(0..k)]);
    }
    for &o in &opinions {
        heads[o] = Some(t);
    }
    let core_tree = DepTree::new(&heads_restricted(&heads, &core)).expect("core is a tree");
    let core_dist = core_tree.distances_from(t);
    let anchors: Vec<usize> = core.iter().copied().filter(|&i| core_dist[i] >= 2).collect();

    let mut tokens: Vec<String> = (0..n)
        .map(|_| format!("w{}", rng.gen_range(0..cfg.filler_vocab)))
        .collect();
    tokens[t] = format!("ASP_{}", rng.gen_range(0..cfg.target_vocab));
    for &o in &opinions {
        tokens[o] = format!("OPN_{}", rng.gen_range(0..cfg.marker_vocab));
    }
    for &d in &distractors {
        if anchors.is_empty() {
            // no node far enough from the target: keep it as a filler
            heads[d] = Some(core[rng.gen_range(0..core.len())]);
        } else {
            heads[d] = Some(anchors[rng.gen_range(0..anchors.len())]);
            tokens[d] = format!("OPN_{}", rng.gen_range(0..cfg.marker_vocab));
        }
    }
    let spans = opinions.iter().map(|&o| Span::single(o)).collect();
    Sentence::new(tokens, heads, Span::single(t), spans).expect("generator produces valid sentences")
}

/// Heads for the full index range where nodes outside `keep` hang off the
/// root of the kept subtree; used only to measure distances inside it.
fn heads_restricted(heads: &[Option<usize>], keep: &[usize]) -> Vec<Option<usize>> {
    let root = keep[0];
    (0..heads.len())
        .map(|i| if keep.contains(&i) { heads[i] } else { Some(root) })
        .collect()
}
