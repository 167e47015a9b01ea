//! Vocabularies, fixed-length segmentation, splits, batching and synthetic
//! grammars with known entropy rates.

use std::collections::hash_map::DefaultHasher;
use std::collections::{HashMap, HashSet};
use std::hash::{Hash, Hasher};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Vocabulary index reserved for the beginning-of-sequence marker.
pub const BOS: usize = 0;
pub const BOS_TEXT: &str = "<bos>";
pub const UNK_TEXT: &str = "<unk>";

/// A fixed-length run of vocabulary indices.
pub type TokenSequence = Vec<usize>;

/// Output slot of a policy or value head that scores `token`.
pub fn action_of(token: usize) -> usize {
    debug_assert!(token != BOS, "BOS is not an action");
    token - 1
}

/// Vocabulary index emitted by output slot `action`.
pub fn token_of(action: usize) -> usize {
    action + 1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Char,
    Word,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    granularity: Granularity,
    tokens: Vec<String>,
    #[serde(skip)]
    lookup: HashMap<String, usize>,
    unk: Option<usize>,
}

fn split_tokens(text: &str, granularity: Granularity) -> Vec<String> {
    match granularity {
        Granularity::Char => text.chars().map(String::from).collect(),
        Granularity::Word => text.split_whitespace().map(String::from).collect(),
    }
}

impl Vocabulary {
    /// Indices in first-occurrence order after BOS at 0.
    pub fn build(text: &str, granularity: Granularity) -> Result<Self> {
        let pieces = split_tokens(text, granularity);
        if pieces.is_empty() {
            return Err(Error::Empty("cannot build a vocabulary from empty text"));
        }
        let mut vocab = Self {
            granularity,
            tokens: vec![BOS_TEXT.to_string()],
            lookup: HashMap::from([(BOS_TEXT.to_string(), BOS)]),
            unk: None,
        };
        for p in pieces {
            vocab.intern(p);
        }
        Ok(vocab)
    }

    /// Vocabulary over an explicit symbol list.
    pub fn from_symbols<S: AsRef<str>>(symbols: &[S], granularity: Granularity) -> Result<Self> {
        if symbols.is_empty() {
            return Err(Error::Empty("symbol list"));
        }
        let mut vocab = Self {
            granularity,
            tokens: vec![BOS_TEXT.to_string()],
            lookup: HashMap::from([(BOS_TEXT.to_string(), BOS)]),
            unk: None,
        };
        for s in symbols {
            let before = vocab.len();
            vocab.intern(s.as_ref().to_string());
            if vocab.len() == before {
                return Err(Error::Config(format!("duplicate symbol `{}`", s.as_ref())));
            }
        }
        Ok(vocab)
    }

    fn intern(&mut self, token: String) -> usize {
        if let Some(&i) = self.lookup.get(&token) {
            return i;
        }
        let i = self.tokens.len();
        self.lookup.insert(token.clone(), i);
        self.tokens.push(token);
        i
    }

    /// Appends the out-of-vocabulary token if not already present.
    pub fn add_unk(&mut self) -> usize {
        if let Some(u) = self.unk {
            return u;
        }
        let u = self.intern(UNK_TEXT.to_string());
        self.unk = Some(u);
        u
    }

    fn rebuild_lookup(&mut self) {
        self.lookup = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }

    /// Number of entries including BOS.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 1
    }

    /// Number of generable tokens (everything but BOS).
    pub fn num_actions(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn unk(&self) -> Option<usize> {
        self.unk
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn index(&self, token: &str) -> Option<usize> {
        self.lookup.get(token).copied()
    }

    /// Token indices for `text`; unknown tokens map to UNK when present.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        split_tokens(text, self.granularity)
            .into_iter()
            .map(|t| {
                self.lookup
                    .get(&t)
                    .copied()
                    .filter(|&i| i != BOS)
                    .or(self.unk)
                    .ok_or_else(|| Error::Config(format!("token `{t}` is not in the vocabulary")))
            })
            .collect()
    }

    /// Concatenated characters or space-joined words; BOS is skipped.
    pub fn decode(&self, tokens: &[usize]) -> String {
        let parts = tokens
            .iter()
            .filter(|&&t| t != BOS)
            .map(|&t| self.tokens.get(t).map_or("?", String::as_str));
        match self.granularity {
            Granularity::Char => parts.collect(),
            Granularity::Word => parts.collect::<Vec<_>>().join(" "),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let mut v: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if v.tokens.first().map(String::as_str) != Some(BOS_TEXT) {
            return Err(Error::Config("vocabulary must start with BOS".into()));
        }
        v.rebuild_lookup();
        Ok(v)
    }
}

/// Splits `tokens` into consecutive non-overlapping runs of length `len`,
/// dropping a short remainder.
pub fn segment(tokens: &[usize], len: usize) -> Result<Vec<TokenSequence>> {
    if len < 2 {
        return Err(Error::Config(format!("segment length must be at least 2, got {len}")));
    }
    Ok(tokens.chunks_exact(len).map(<[usize]>::to_vec).collect())
}

/// Train/valid/test sequences of one common length.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSplits {
    pub seq_len: usize,
    pub train: Vec<TokenSequence>,
    pub valid: Vec<TokenSequence>,
    pub test: Vec<TokenSequence>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl CorpusSplits {
    pub fn get(&self, split: Split) -> &[TokenSequence] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    /// Cuts one text into train/valid/test by token fractions, then segments each part.
    ///
    /// Word vocabularies come from the training part only and gain an UNK
    /// entry; character vocabularies cover the whole text.
    pub fn from_text(
        text: &str,
        granularity: Granularity,
        seq_len: usize,
        fractions: (f64, f64),
    ) -> Result<(Vocabulary, Self)> {
        let (f_train, f_valid) = fractions;
        if !(f_train > 0.0 && f_valid >= 0.0 && f_train + f_valid <= 1.0) {
            return Err(Error::Config(format!("invalid split fractions {fractions:?}")));
        }
        let pieces = split_tokens(text, granularity);
        let n = pieces.len();
        let n_train = (n as f64 * f_train).floor() as usize;
        let n_valid = (n as f64 * f_valid).floor() as usize;
        let sep = match granularity {
            Granularity::Char => "",
            Granularity::Word => " ",
        };
        let train_text = pieces[..n_train].join(sep);
        let valid_text = pieces[n_train..n_train + n_valid].join(sep);
        let test_text = pieces[n_train + n_valid..].join(sep);
        let mut vocab = match granularity {
            Granularity::Char => Vocabulary::build(text, granularity)?,
            Granularity::Word => Vocabulary::build(&train_text, granularity)?,
        };
        if granularity == Granularity::Word {
            vocab.add_unk();
        }
        let splits = Self {
            seq_len,
            train: segment(&vocab.encode(&train_text)?, seq_len)?,
            valid: segment(&vocab.encode(&valid_text)?, seq_len)?,
            test: segment(&vocab.encode(&test_text)?, seq_len)?,
        };
        Ok((vocab, splits))
    }

    /// Pre-split texts; the vocabulary comes from `train` (plus UNK for words).
    pub fn from_three_texts(
        train: &str,
        valid: &str,
        test: &str,
        granularity: Granularity,
        seq_len: usize,
    ) -> Result<(Vocabulary, Self)> {
        let mut vocab = Vocabulary::build(train, granularity)?;
        if granularity == Granularity::Word {
            vocab.add_unk();
        }
        let splits = Self {
            seq_len,
            train: segment(&vocab.encode(train)?, seq_len)?,
            valid: segment(&vocab.encode(valid)?, seq_len)?,
            test: segment(&vocab.encode(test)?, seq_len)?,
        };
        Ok((vocab, splits))
    }

    /// Independent draws from a grammar, mapped to vocabulary indices.
    pub fn from_grammar(
        grammar: &SyntheticGrammar,
        seq_len: usize,
        counts: (usize, usize, usize),
        seed: u64,
    ) -> Result<(Vocabulary, Self)> {
        let vocab = Vocabulary::from_symbols(&grammar.symbols, Granularity::Char)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<TokenSequence> {
            (0..n)
                .map(|_| grammar.sample(seq_len, &mut rng).into_iter().map(token_of).collect())
                .collect()
        };
        let train = draw(counts.0);
        let valid = draw(counts.1);
        let test = draw(counts.2);
        Ok((
            vocab,
            Self {
                seq_len,
                train,
                valid,
                test,
            },
        ))
    }

    /// Number of sequences whose content occurs in more than one split.
    pub fn cross_split_duplicates(&self) -> usize {
        let hash = |s: &TokenSequence| {
            let mut h = DefaultHasher::new();
            s.hash(&mut h);
            h.finish()
        };
        let sets: Vec<HashSet<u64>> = [&self.train, &self.valid, &self.test]
            .iter()
            .map(|split| split.iter().map(hash).collect())
            .collect();
        let mut dup = 0;
        for i in 0..3 {
            for j in i + 1..3 {
                dup += sets[i].intersection(&sets[j]).count();
            }
        }
        dup
    }

    /// One sequence per line as space-separated indices.
    pub fn write_ids(path: &Path, seqs: &[TokenSequence]) -> Result<()> {
        let mut out = String::new();
        for s in seqs {
            let line: Vec<String> = s.iter().map(usize::to_string).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn read_ids(path: &Path) -> Result<Vec<TokenSequence>> {
        let text = std::fs::read_to_string(path)?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split_whitespace()
                    .map(|t| {
                        t.parse::<usize>()
                            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
                    })
                    .collect()
            })
            .collect()
    }
}

/// Seeded mini-batch order over `n` items: each epoch is a fresh permutation.
#[derive(Debug)]
pub struct Batcher {
    n: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    epoch: usize,
}

impl Batcher {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if n == 0 {
            return Err(Error::Empty("cannot batch an empty split"));
        }
        Ok(Self {
            n,
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: Vec::new(),
            pos: n,
            epoch: 0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Indices of the next batch; the final batch of an epoch may be short.
    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos >= self.n {
            self.order = (0..self.n).collect();
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
            self.epoch += 1;
        }
        let end = (self.pos + self.batch_size).min(self.n);
        let batch = self.order[self.pos..end].to_vec();
        self.pos = end;
        batch
    }

    /// All batches of one fresh epoch.
    pub fn next_epoch(&mut self) -> Vec<Vec<usize>> {
        self.pos = self.n;
        let mut out = vec![self.next_batch()];
        while self.pos < self.n {
            out.push(self.next_batch());
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GrammarKind {
    MarkovChain,
    Parity,
    RepeatFree,
}

/// A finite-state source over `symbols`, started from its stationary distribution.
///
/// Hidden states emit deterministically, and the successor state is a
/// function of the current state and the emitted symbol, so the entropy rate
/// of the symbol stream equals that of the state chain.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticGrammar {
    pub kind: GrammarKind,
    pub symbols: Vec<String>,
    transitions: Vec<Vec<f64>>,
    emit: Vec<usize>,
    stationary: Vec<f64>,
    entropy: f64,
}

fn row_entropy(row: &[f64]) -> f64 {
    -row.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

impl SyntheticGrammar {
    fn from_chain(
        kind: GrammarKind,
        symbols: Vec<String>,
        transitions: Vec<Vec<f64>>,
        emit: Vec<usize>,
    ) -> Result<Self> {
        let n = transitions.len();
        if n == 0 || emit.len() != n {
            return Err(Error::Grammar("empty transition table".into()));
        }
        for (i, row) in transitions.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Grammar(format!(
                    "row {i} has {} entries, expected {n}",
                    row.len()
                )));
            }
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return Err(Error::Grammar(format!("row {i} is not a probability distribution")));
            }
        }
        if emit.iter().any(|&e| e >= symbols.len()) {
            return Err(Error::Grammar("emission outside the alphabet".into()));
        }
        let stationary = stationary_distribution(&transitions);
        let entropy = stationary
            .iter()
            .zip(&transitions)
            .map(|(p, row)| p * row_entropy(row))
            .sum();
        Ok(Self {
            kind,
            symbols,
            transitions,
            emit,
            stationary,
            entropy,
        })
    }

    /// First-order chain whose states are the symbols themselves.
    pub fn markov(symbols: Vec<String>, transitions: Vec<Vec<f64>>) -> Result<Self> {
        if symbols.len() != transitions.len() {
            return Err(Error::Grammar("one transition row per symbol is required".into()));
        }
        let emit = (0..symbols.len()).collect();
        Self::from_chain(GrammarKind::MarkovChain, symbols, transitions, emit)
    }

    /// I.i.d. uniform symbols.
    pub fn uniform(symbols: Vec<String>) -> Result<Self> {
        let v = symbols.len();
        Self::markov(symbols, vec![vec![1.0 / v as f64; v]; v])
    }

    /// Binary source where each bit is the XOR of the two before it, flipped with probability `noise`.
    pub fn parity(symbols: [String; 2], noise: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&noise) {
            return Err(Error::Grammar(format!("noise {noise} outside [0, 1]")));
        }
        // state = 2 * previous + current; emits `current`.
        let mut transitions = vec![vec![0.0; 4]; 4];
        for (s, row) in transitions.iter_mut().enumerate() {
            let (prev, cur) = (s / 2, s % 2);
            let parity = prev ^ cur;
            row[2 * cur + parity] = 1.0 - noise;
            row[2 * cur + (1 - parity)] += noise;
        }
        Self::from_chain(GrammarKind::Parity, symbols.to_vec(), transitions, vec![0, 1, 0, 1])
    }

    /// Uniform over symbols other than the previous one.
    pub fn repeat_free(symbols: Vec<String>) -> Result<Self> {
        let v = symbols.len();
        if v < 2 {
            return Err(Error::Grammar("repeat-free grammar needs at least two symbols".into()));
        }
        let transitions = (0..v)
            .map(|i| {
                (0..v)
                    .map(|j| if i == j { 0.0 } else { 1.0 / (v - 1) as f64 })
                    .collect()
            })
            .collect();
        let g = Self::markov(symbols, transitions)?;
        Ok(Self {
            kind: GrammarKind::RepeatFree,
            ..g
        })
    }

    /// Entropy rate in nats per symbol.
    pub fn entropy_rate(&self) -> f64 {
        self.entropy
    }

    pub fn num_symbols(&self) -> usize {
        self.symbols.len()
    }

    pub fn num_states(&self) -> usize {
        self.transitions.len()
    }

    pub fn transitions(&self) -> &[Vec<f64>] {
        &self.transitions
    }

    pub fn stationary(&self) -> &[f64] {
        &self.stationary
    }

    pub fn emission(&self, state: usize) -> usize {
        self.emit[state]
    }

    /// `len` symbol indices (0-based within the alphabet).
    pub fn sample<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(len);
        if len == 0 {
            return out;
        }
        let mut state = WeightedIndex::new(&self.stationary)
            .expect("stationary distribution")
            .sample(rng);
        out.push(self.emit[state]);
        let rows: Vec<WeightedIndex<f64>> = self
            .transitions
            .iter()
            .map(|r| WeightedIndex::new(r).expect("validated row"))
            .collect();
        for _ in 1..len {
            state = rows[state].sample(rng);
            out.push(self.emit[state]);
        }
        out
    }

    pub fn from_spec(spec: &GrammarSpec) -> Result<Self> {
        let symbols: Vec<String> = spec.symbols.chars().map(String::from).collect();
        let g = match spec.kind {
            GrammarKind::MarkovChain => {
                let rows = spec
                    .transitions
                    .clone()
                    .ok_or_else(|| Error::Grammar("markov-chain grammar needs `transitions`".into()))?;
                Self::markov(symbols, rows)?
            }
            GrammarKind::Parity => {
                let [a, b]: [String; 2] = symbols
                    .try_into()
                    .map_err(|_| Error::Grammar("parity grammar needs exactly two symbols".into()))?;
                Self::parity([a, b], spec.noise.unwrap_or(0.1))?
            }
            GrammarKind::RepeatFree => Self::repeat_free(symbols)?,
        };
        Ok(g)
    }
}

/// Stationary distribution of a row-stochastic matrix.
///
/// Power iteration on the lazy chain `(P + I) / 2`, which shares stationary
/// distributions with `P` but is aperiodic; starts from uniform.
pub fn stationary_distribution(transitions: &[Vec<f64>]) -> Vec<f64> {
    let n = transitions.len();
    let mut pi = vec![1.0 / n as f64; n];
    for _ in 0..1_000_000 {
        let mut next = vec![0.0; n];
        for (i, row) in transitions.iter().enumerate() {
            for (j, p) in row.iter().enumerate() {
                next[j] += pi[i] * 0.5 * p;
            }
            next[i] += 0.5 * pi[i];
        }
        let z: f64 = next.iter().sum();
        next.iter_mut().for_each(|v| *v /= z);
        let diff: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        pi = next;
        if diff < 1e-16 {
            break;
        }
    }
    pi
}

/// Structured grammar description read from a TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrammarSpec {
    pub kind: GrammarKind,
    /// One character per symbol.
    pub symbols: String,
    pub transitions: Option<Vec<Vec<f64>>>,
    pub noise: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_train_count")]
    pub train: usize,
    #[serde(default = "default_eval_count")]
    pub valid: usize,
    #[serde(default = "default_eval_count")]
    pub test: usize,
}

fn default_train_count() -> usize {
    2000
}

fn default_eval_count() -> usize {
    500
}

impl GrammarSpec {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Grammar(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn syms(s: &str) -> Vec<String> {
        s.chars().map(String::from).collect()
    }

    #[test]
    fn char_and_word_vocab_examples() {
        let v = Vocabulary::build("aba", Granularity::Char).unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!((v.index("a"), v.index("b")), (Some(1), Some(2)));
        assert_eq!(v.token(BOS), Some(BOS_TEXT));
        let w = Vocabulary::build("a b a", Granularity::Word).unwrap();
        assert_eq!(w.len(), 3);
        assert_eq!(w.token(1), Some("a"));
        assert_eq!(Vocabulary::build("a b a", Granularity::Word).unwrap(), w);
    }

    #[test]
    fn empty_text_is_error() {
        assert!(Vocabulary::build("", Granularity::Char).is_err());
        assert!(Vocabulary::build("  \n", Granularity::Word).is_err());
    }

    #[test]
    fn word_oov_maps_to_unk() {
        let (vocab, splits) = CorpusSplits::from_three_texts("a b a b", "a c", "c c", Granularity::Word, 2).unwrap();
        let unk = vocab.unk().unwrap();
        assert_eq!(splits.valid, vec![vec![1, unk]]);
        assert_eq!(splits.test, vec![vec![unk, unk]]);
    }

    #[test]
    fn segment_examples() {
        let toks: Vec<usize> = (1..=7).collect();
        let s = segment(&toks, 3).unwrap();
        assert_eq!(s, vec![vec![1, 2, 3], vec![4, 5, 6]]);
        assert_eq!(segment(&toks[..6], 3).unwrap().len(), 2);
        assert!(segment(&toks[..2], 3).unwrap().is_empty());
        assert!(segment(&toks, 1).is_err());
    }

    #[test]
    fn fraction_splits_are_ordered() {
        let text: String = "abcdefghij".repeat(10);
        let (vocab, splits) = CorpusSplits::from_text(&text, Granularity::Char, 5, (0.9, 0.05)).unwrap();
        assert_eq!(vocab.len(), 11);
        assert_eq!(splits.train.len(), 18);
        assert_eq!(splits.valid.len(), 1);
        assert_eq!(splits.test.len(), 1);
        let joined: String = splits.train.iter().map(|s| vocab.decode(s)).collect();
        assert_eq!(joined, text[..90]);
    }

    #[test]
    fn batcher_examples() {
        let mut b = Batcher::new(10, 3, 7).unwrap();
        let sizes: Vec<usize> = b.next_epoch().iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);

        let order = |seed| Batcher::new(10, 3, seed).unwrap().next_epoch().concat();
        assert_eq!(order(1), order(1));
        let (a, c) = (order(1), order(2));
        assert_ne!(a, c);
        let (mut sa, mut sc) = (a.clone(), c.clone());
        sa.sort();
        sc.sort();
        assert_eq!(sa, (0..10).collect::<Vec<_>>());
        assert_eq!(sa, sc);
        assert!(Batcher::new(10, 0, 0).is_err());
    }

    #[test]
    fn identity_chain_is_constant() {
        let g = SyntheticGrammar::markov(syms("ab"), vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(g.entropy_rate(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let s = g.sample(12, &mut rng);
            assert!(s.iter().all(|&x| x == s[0]));
        }
    }

    #[test]
    fn uniform_entropy_and_frequencies() {
        let g = SyntheticGrammar::uniform(syms("abcd")).unwrap();
        assert!((g.entropy_rate() - 4f64.ln()).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 4];
        let draws = 40_000;
        for _ in 0..draws / 20 {
            for s in g.sample(20, &mut rng) {
                counts[s] += 1;
            }
        }
        // χ² with 3 dof; 16.27 is the 0.1% critical value.
        let e = draws as f64 / 4.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        assert!(chi2 < 16.27, "chi2 {chi2} counts {counts:?}");
    }

    #[test]
    fn closed_form_entropies() {
        let g = SyntheticGrammar::markov(syms("ab"), vec![vec![0.85, 0.15], vec![0.3, 0.7]]).unwrap();
        let h = |p: f64| -(p * p.ln() + (1.0 - p) * (1.0 - p).ln());
        let want = (2.0 / 3.0) * h(0.85) + (1.0 / 3.0) * h(0.7);
        assert!((g.entropy_rate() - want).abs() < 1e-12);
        let p = SyntheticGrammar::parity(["0".into(), "1".into()], 0.1).unwrap();
        assert!((p.entropy_rate() - h(0.1)).abs() < 1e-12);
        let r = SyntheticGrammar::repeat_free(syms("abcd")).unwrap();
        assert!((r.entropy_rate() - 3f64.ln()).abs() < 1e-12);
    }

    /// Block entropy of the first `n` symbols by enumerating every string.
    fn block_entropy(g: &SyntheticGrammar, n: usize) -> f64 {
        let mut probs: HashMap<Vec<usize>, f64> = HashMap::new();
        fn walk(
            g: &SyntheticGrammar,
            state: usize,
            p: f64,
            seq: &mut Vec<usize>,
            n: usize,
            out: &mut HashMap<Vec<usize>, f64>,
        ) {
            if p == 0.0 {
                return;
            }
            seq.push(g.emission(state));
            if seq.len() == n {
                *out.entry(seq.clone()).or_default() += p;
            } else {
                for (next, q) in g.transitions()[state].iter().enumerate() {
                    walk(g, next, p * q, seq, n, out);
                }
            }
            seq.pop();
        }
        for (s, &p) in g.stationary().iter().enumerate() {
            walk(g, s, p, &mut Vec::new(), n, &mut probs);
        }
        -probs.values().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
    }

    #[test]
    fn entropy_rate_matches_block_entropy_differences() {
        let grammars = vec![
            SyntheticGrammar::markov(syms("ab"), vec![vec![0.85, 0.15], vec![0.3, 0.7]]).unwrap(),
            SyntheticGrammar::markov(
                syms("abc"),
                vec![vec![0.2, 0.5, 0.3], vec![0.6, 0.1, 0.3], vec![0.25, 0.25, 0.5]],
            )
            .unwrap(),
            SyntheticGrammar::parity(["x".into(), "y".into()], 0.2).unwrap(),
            SyntheticGrammar::repeat_free(syms("abc")).unwrap(),
            SyntheticGrammar::uniform(syms("ab")).unwrap(),
        ];
        for g in grammars {
            let d = block_entropy(&g, 7) - block_entropy(&g, 6);
            assert!(
                (d - g.entropy_rate()).abs() < 1e-10,
                "{:?}: {d} vs {}",
                g.kind,
                g.entropy_rate()
            );
        }
    }

    #[test]
    fn invalid_rows_rejected() {
        assert!(SyntheticGrammar::markov(syms("ab"), vec![vec![0.5, 0.6], vec![0.5, 0.5]]).is_err());
        assert!(SyntheticGrammar::markov(syms("ab"), vec![vec![1.0]]).is_err());
    }

    #[test]
    fn grammar_spec_parses_and_rejects_unknown_keys() {
        let spec = GrammarSpec::parse(
            "kind = \"markov-chain\"\nsymbols = \"ab\"\ntransitions = [[0.9, 0.1], [0.2, 0.8]]\nseed = 3\n",
        )
        .unwrap();
        let g = SyntheticGrammar::from_spec(&spec).unwrap();
        assert_eq!(g.kind, GrammarKind::MarkovChain);
        assert_eq!(spec.train, 2000);
        assert!(GrammarSpec::parse("kind = \"parity\"\nsymbols = \"01\"\nbogus = 1\n").is_err());
        let p = SyntheticGrammar::from_spec(
            &GrammarSpec::parse("kind = \"parity\"\nsymbols = \"01\"\nnoise = 0.25\n").unwrap(),
        )
        .unwrap();
        assert_eq!(p.num_states(), 4);
    }

    #[test]
    fn grammar_sampling_is_seeded() {
        let g = SyntheticGrammar::parity(["a".into(), "b".into()], 0.3).unwrap();
        let a = g.sample(30, &mut ChaCha8Rng::seed_from_u64(5));
        let b = g.sample(30, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }

    #[test]
    fn vocab_toml_round_trip() {
        let mut v = Vocabulary::build("the cat sat", Granularity::Word).unwrap();
        v.add_unk();
        let back = Vocabulary::from_toml(&v.to_toml().unwrap()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.index("sat"), Some(3));
    }

    proptest! {
        #[test]
        fn char_round_trip(text in "[a-z \\n]{1,60}") {
            let v = Vocabulary::build(&text, Granularity::Char).unwrap();
            prop_assert_eq!(v.decode(&v.encode(&text).unwrap()), text);
        }

        #[test]
        fn word_round_trip_normalizes_whitespace(words in proptest::collection::vec("[a-z]{1,5}", 1..20), gaps in proptest::collection::vec("[ \\t\\n]{1,3}", 20)) {
            let mut text = String::new();
            for (w, g) in words.iter().zip(&gaps) {
                text.push_str(w);
                text.push_str(g);
            }
            let v = Vocabulary::build(&text, Granularity::Word).unwrap();
            prop_assert_eq!(v.decode(&v.encode(&text).unwrap()), words.join(" "));
        }

        #[test]
        fn segments_reproduce_prefix_of_stream(tokens in proptest::collection::vec(1usize..9, 0..80), len in 2usize..9) {
            let segs = segment(&tokens, len).unwrap();
            prop_assert_eq!(segs.len(), tokens.len() / len);
            prop_assert!(segs.iter().all(|s| s.len() == len));
            let flat = segs.concat();
            prop_assert_eq!(&flat[..], &tokens[..flat.len()]);
        }

        #[test]
        fn text_splits_do_not_share_positions(seed in 0u64..1000) {
            // Random letters make equal 8-grams vanishingly unlikely, so any
            // duplicate would mean a segment was emitted twice.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let text: String = (0..800).map(|_| char::from(b'a' + rand::Rng::gen_range(&mut rng, 0..26u8))).collect();
            let (_, splits) = CorpusSplits::from_text(&text, Granularity::Char, 8, (0.8, 0.1)).unwrap();
            prop_assert_eq!(splits.train.len() + splits.valid.len() + splits.test.len(), 100);
            prop_assert_eq!(splits.cross_split_duplicates(), 0);
        }
    }
}
