//! Deterministic generators for the synthetic induction batch, the
//! key-retrieval probe corpus (train + in/ood eval), the background filler
//! stream, and the natural-induction position filter.
//!
//! All generation is a pure function of `(spec, seed)`. Token vocabularies
//! are partitioned into pairwise-disjoint marker / codeword / filler sets;
//! the probe task renders its announcement and question as marker tokens
//! (`KEY_MARK key`, `QUERY_A QUERY_B -> key`).

use std::collections::{BTreeMap, VecDeque};
use std::io::Read;
use std::ops::Range;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::TokenStream;
use crate::rng::{rng, stream};

pub const KEY_MARK: u32 = 0;
pub const QUERY_A: u32 = 1;
pub const QUERY_B: u32 = 2;
pub const N_MARKERS: u32 = 3;

/// Pairwise-disjoint token ranges for markers, codewords, and filler.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabPartition {
    pub markers: Range<u32>,
    pub codewords: Range<u32>,
    pub filler: Range<u32>,
}

impl VocabPartition {
    /// Standard probe partition: markers first, then `codeword_vocab`
    /// codewords, filler takes the rest of the vocabulary.
    pub fn probe(vocab_size: usize, codeword_vocab: usize) -> Result<Self> {
        let p = VocabPartition {
            markers: 0..N_MARKERS,
            codewords: N_MARKERS..N_MARKERS + codeword_vocab as u32,
            filler: N_MARKERS + codeword_vocab as u32..vocab_size as u32,
        };
        p.validate(vocab_size)?;
        Ok(p)
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        let ranges = [
            ("markers", &self.markers),
            ("codewords", &self.codewords),
            ("filler", &self.filler),
        ];
        for (name, r) in &ranges {
            if r.is_empty() {
                return Err(Error::invalid(format!("empty {name} partition")));
            }
            if r.end > vocab_size as u32 {
                return Err(Error::invalid(format!(
                    "{name} partition {}..{} exceeds vocab {vocab_size}",
                    r.start, r.end
                )));
            }
        }
        for i in 0..ranges.len() {
            for j in i + 1..ranges.len() {
                let (an, a) = ranges[i];
                let (bn, b) = ranges[j];
                if a.start < b.end && b.start < a.end {
                    return Err(Error::invalid(format!(
                        "{an} and {bn} partitions overlap"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Token sequences plus per-example query position, pattern-class target
/// positions, and target token.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalBatch {
    pub tokens: Array2<u32>,
    pub query_positions: Vec<usize>,
    pub target_tokens: Vec<u32>,
    /// Per-example map from pattern-class role ("induction_target",
    /// "key_position", "first_A", "second_A") to position list. Positions
    /// never exceed the query position; `second_A` may coincide with it.
    pub special_positions: Vec<BTreeMap<String, Vec<usize>>>,
}

#[derive(Serialize, Deserialize)]
struct EvalBatchHeader {
    headscope_evalbatch: u32,
    n: usize,
    t: usize,
    query_positions: Vec<usize>,
    target_tokens: Vec<u32>,
    special_positions: Vec<BTreeMap<String, Vec<usize>>>,
}

impl EvalBatch {
    pub fn n_examples(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn seq_len(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        let (n, t) = self.tokens.dim();
        if self.query_positions.len() != n
            || self.target_tokens.len() != n
            || self.special_positions.len() != n
        {
            return Err(Error::Invariant("eval batch column lengths disagree".into()));
        }
        for e in 0..n {
            let q = self.query_positions[e];
            if q >= t {
                return Err(Error::Invariant(format!("example {e}: query {q} >= {t}")));
            }
            if self.target_tokens[e] as usize >= vocab_size {
                return Err(Error::Invariant(format!("example {e}: target out of vocab")));
            }
            for (role, ps) in &self.special_positions[e] {
                for &p in ps {
                    if p > q {
                        return Err(Error::Invariant(format!(
                            "example {e}: special {role} position {p} beyond query {q}"
                        )));
                    }
                }
            }
        }
        if let Some(&bad) = self.tokens.iter().find(|&&v| v as usize >= vocab_size) {
            return Err(Error::Invariant(format!("token {bad} out of vocab")));
        }
        Ok(())
    }

    /// Canonical serialization: one JSON header line, then row-major
    /// little-endian u32 tokens.
    pub fn to_bytes(&self) -> Vec<u8> {
        let (n, t) = self.tokens.dim();
        let header = EvalBatchHeader {
            headscope_evalbatch: 1,
            n,
            t,
            query_positions: self.query_positions.clone(),
            target_tokens: self.target_tokens.clone(),
            special_positions: self.special_positions.clone(),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        out.reserve(n * t * 4);
        for &tok in self.tokens.iter() {
            out.extend_from_slice(&tok.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("eval batch: missing header line".into()))?;
        let header: EvalBatchHeader = serde_json::from_slice(&bytes[..nl])?;
        if header.headscope_evalbatch != 1 {
            return Err(Error::Format("eval batch: unsupported version".into()));
        }
        let payload = &bytes[nl + 1..];
        let need = header.n * header.t * 4;
        if payload.len() != need {
            return Err(Error::Format(format!(
                "eval batch: payload {} bytes, expected {need}",
                payload.len()
            )));
        }
        let mut tokens = Vec::with_capacity(header.n * header.t);
        for chunk in payload.chunks_exact(4) {
            tokens.push(u32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        Ok(EvalBatch {
            tokens: Array2::from_shape_vec((header.n, header.t), tokens)
                .map_err(|e| Error::Format(format!("eval batch shape: {e}")))?,
            query_positions: header.query_positions,
            target_tokens: header.target_tokens,
            special_positions: header.special_positions,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the canonical serialization; identifies batches in caches
    /// and provenance records.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    /// Restrict to the first `n` examples.
    pub fn truncate(&self, n: usize) -> EvalBatch {
        let n = n.min(self.n_examples());
        EvalBatch {
            tokens: self.tokens.slice(ndarray::s![..n, ..]).to_owned(),
            query_positions: self.query_positions[..n].to_vec(),
            target_tokens: self.target_tokens[..n].to_vec(),
            special_positions: self.special_positions[..n].to_vec(),
        }
    }
}

/// Synthetic induction batch: `[filler] A B [filler] A` with the query at
/// the trailing A and target B. Filler positions re-roll any accidental
/// collision with A, keeping the earlier occurrence unique.
pub fn gen_induction_batch(
    n: usize,
    seq_len: usize,
    vocab_lo: u32,
    vocab_hi: u32,
    seed: u64,
) -> Result<EvalBatch> {
    if n == 0 {
        return Err(Error::invalid("n must be >= 1"));
    }
    if seq_len < 8 {
        return Err(Error::invalid("seq_len must be >= 8"));
    }
    if vocab_hi <= vocab_lo || vocab_hi - vocab_lo < 2 {
        return Err(Error::invalid(
            "vocab range too small to draw distinct A, B",
        ));
    }
    let mut r = rng(seed, stream::DATA);
    let mut tokens = Array2::<u32>::zeros((n, seq_len));
    let mut query_positions = Vec::with_capacity(n);
    let mut target_tokens = Vec::with_capacity(n);
    let mut special_positions = Vec::with_capacity(n);
    for e in 0..n {
        let a = r.gen_range(vocab_lo..vocab_hi);
        let b = loop {
            let b = r.gen_range(vocab_lo..vocab_hi);
            if b != a {
                break b;
            }
        };
        let first_a = r.gen_range(1..=seq_len - 3);
        for p in 0..seq_len {
            let v = if p == first_a || p == seq_len - 1 {
                a
            } else if p == first_a + 1 {
                b
            } else {
                loop {
                    let f = r.gen_range(vocab_lo..vocab_hi);
                    if f != a {
                        break f;
                    }
                }
            };
            tokens[[e, p]] = v;
        }
        query_positions.push(seq_len - 1);
        target_tokens.push(b);
        let mut special = BTreeMap::new();
        special.insert("first_A".to_string(), vec![first_a]);
        special.insert("induction_target".to_string(), vec![first_a + 1]);
        special.insert("second_A".to_string(), vec![seq_len - 1]);
        special_positions.push(special);
    }
    Ok(EvalBatch {
        tokens,
        query_positions,
        target_tokens,
        special_positions,
    })
}

/// Positions `p` such that `tokens[p+1]` already occurred in `tokens[0..=p]`.
pub fn natural_induction_positions(tokens: &[u32]) -> Vec<usize> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for p in 0..tokens.len().saturating_sub(1) {
        seen.insert(tokens[p]);
        if seen.contains(&tokens[p + 1]) {
            out.push(p);
        }
    }
    out
}

const SUCCESSORS: usize = 6;
const SUCCESSOR_WEIGHTS: [f32; SUCCESSORS] = [0.35, 0.25, 0.15, 0.11, 0.08, 0.06];

/// Deterministic pseudo-text: a fixed-order Markov chain over a token range,
/// so the LM loss on filler is non-trivial.
pub struct MarkovFiller {
    lo: u32,
    hi: u32,
    table: Vec<[u32; SUCCESSORS]>,
    cumulative: [f32; SUCCESSORS],
    state: u32,
    walk: ChaCha12Rng,
}

impl MarkovFiller {
    pub fn new(seed: u64, lo: u32, hi: u32) -> Result<Self> {
        if hi <= lo {
            return Err(Error::invalid("empty filler range"));
        }
        let m = (hi - lo) as usize;
        let mut build = rng(seed, stream::FILLER_CHAIN);
        let mut table = Vec::with_capacity(m);
        for _ in 0..m {
            let mut succ = [0u32; SUCCESSORS];
            for s in succ.iter_mut() {
                *s = build.gen_range(lo..hi);
            }
            table.push(succ);
        }
        let mut cumulative = [0.0f32; SUCCESSORS];
        let mut acc = 0.0;
        for (c, w) in cumulative.iter_mut().zip(SUCCESSOR_WEIGHTS) {
            acc += w;
            *c = acc;
        }
        let state = build.gen_range(lo..hi);
        Ok(MarkovFiller {
            lo,
            hi,
            table,
            cumulative,
            state,
            walk: rng(seed, stream::DATA),
        })
    }

    pub fn next_token(&mut self) -> u32 {
        let emitted = self.state;
        let u: f32 = self.walk.gen();
        let succ = &self.table[(self.state - self.lo) as usize];
        let mut next = succ[SUCCESSORS - 1];
        for (i, &c) in self.cumulative.iter().enumerate() {
            if u < c {
                next = succ[i];
                break;
            }
        }
        self.state = next;
        emitted
    }

    pub fn range(&self) -> Range<u32> {
        self.lo..self.hi
    }
}

impl TokenStream for MarkovFiller {
    fn fill(&mut self, buf: &mut [u32]) {
        for v in buf.iter_mut() {
            *v = self.next_token();
        }
    }
}

/// Background filler stream over `lo..hi`.
pub fn filler_stream(seed: u64, lo: u32, hi: u32) -> Result<MarkovFiller> {
    MarkovFiller::new(seed, lo, hi)
}

/// Training stream for the induction experiments: Markov filler blocks
/// interleaved with repeated random subsequences (`r ++ r`), whose second
/// copy is unpredictable without an induction mechanism.
pub struct InductionMixStream {
    filler: MarkovFiller,
    draw: ChaCha12Rng,
    lo: u32,
    hi: u32,
    repeat_len: (usize, usize),
    filler_block: (usize, usize),
    queue: VecDeque<u32>,
}

impl InductionMixStream {
    pub fn new(seed: u64, lo: u32, hi: u32) -> Result<Self> {
        Ok(InductionMixStream {
            filler: MarkovFiller::new(seed, lo, hi)?,
            draw: rng(seed, stream::EXAMPLES),
            lo,
            hi,
            repeat_len: (4, 24),
            filler_block: (8, 32),
            queue: VecDeque::new(),
        })
    }

    fn refill(&mut self) {
        if self.draw.gen_bool(0.5) {
            let len = self.draw.gen_range(self.filler_block.0..=self.filler_block.1);
            for _ in 0..len {
                let t = self.filler.next_token();
                self.queue.push_back(t);
            }
        } else {
            let len = self.draw.gen_range(self.repeat_len.0..=self.repeat_len.1);
            let seg: Vec<u32> = (0..len).map(|_| self.draw.gen_range(self.lo..self.hi)).collect();
            self.queue.extend(seg.iter());
            self.queue.extend(seg.iter());
        }
    }
}

impl TokenStream for InductionMixStream {
    fn fill(&mut self, buf: &mut [u32]) {
        for v in buf.iter_mut() {
            while self.queue.is_empty() {
                self.refill();
            }
            *v = self.queue.pop_front().expect("non-empty queue");
        }
    }
}

/// Key-retrieval probe parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub probe_rate: f64,
    pub codeword_vocab: usize,
    pub gap_range_in: (usize, usize),
    pub gap_range_ood: (usize, usize),
    pub distractors_ood: bool,
    pub vocab_size: usize,
    pub eval_seq_len: usize,
    pub eval_seed: u64,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        ProbeSpec {
            probe_rate: 0.10,
            codeword_vocab: 512,
            gap_range_in: (5, 30),
            gap_range_ood: (40, 100),
            distractors_ood: true,
            vocab_size: 2048,
            eval_seq_len: 160,
            eval_seed: 42,
        }
    }
}

impl ProbeSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.probe_rate > 0.0 && self.probe_rate < 1.0) {
            return Err(Error::invalid("probe_rate must be in (0, 1)"));
        }
        for (name, (lo, hi)) in [("gap_range_in", self.gap_range_in), ("gap_range_ood", self.gap_range_ood)] {
            if lo < 3 || hi < lo {
                return Err(Error::invalid(format!("{name} must satisfy 3 <= lo <= hi")));
            }
            if hi + 2 >= self.eval_seq_len {
                return Err(Error::invalid(format!(
                    "{name} max {hi} too large for eval_seq_len {}",
                    self.eval_seq_len
                )));
            }
        }
        self.partition()?;
        Ok(())
    }

    pub fn partition(&self) -> Result<VocabPartition> {
        VocabPartition::probe(self.vocab_size, self.codeword_vocab)
    }
}

/// Training stream interleaving filler spans and probe examples at
/// `probe_rate`, with example counters for calibration tests.
pub struct ProbeTrainStream {
    spec: ProbeSpec,
    part: VocabPartition,
    filler: MarkovFiller,
    draw: ChaCha12Rng,
    queue: VecDeque<u32>,
    pub probe_examples: u64,
    pub filler_examples: u64,
}

impl ProbeTrainStream {
    /// Append one example (probe or filler span) to the queue; returns
    /// whether it was a probe example.
    pub fn push_example(&mut self) -> bool {
        if self.draw.gen_bool(self.spec.probe_rate) {
            let gap = self
                .draw
                .gen_range(self.spec.gap_range_in.0..=self.spec.gap_range_in.1);
            let key = self.draw.gen_range(self.part.codewords.clone());
            self.queue.push_back(KEY_MARK);
            self.queue.push_back(key);
            for _ in 0..gap.saturating_sub(2) {
                let t = self.filler.next_token();
                self.queue.push_back(t);
            }
            self.queue.push_back(QUERY_A);
            self.queue.push_back(QUERY_B);
            self.queue.push_back(key);
            self.probe_examples += 1;
            true
        } else {
            let len = self.draw.gen_range(16..=48);
            for _ in 0..len {
                let t = self.filler.next_token();
                self.queue.push_back(t);
            }
            self.filler_examples += 1;
            false
        }
    }
}

impl TokenStream for ProbeTrainStream {
    fn fill(&mut self, buf: &mut [u32]) {
        for v in buf.iter_mut() {
            while self.queue.is_empty() {
                self.push_example();
            }
            *v = self.queue.pop_front().expect("non-empty queue");
        }
    }
}

/// Probe corpus: deterministic train stream plus frozen in-distribution and
/// out-of-distribution eval batches.
pub fn gen_probe_corpus(
    spec: &ProbeSpec,
    filler_seed: u64,
    n_eval: usize,
) -> Result<(ProbeTrainStream, EvalBatch, EvalBatch)> {
    spec.validate()?;
    let part = spec.partition()?;
    let train = ProbeTrainStream {
        spec: spec.clone(),
        part: part.clone(),
        filler: MarkovFiller::new(filler_seed, part.filler.start, part.filler.end)?,
        draw: rng(filler_seed, stream::EXAMPLES),
        queue: VecDeque::new(),
        probe_examples: 0,
        filler_examples: 0,
    };
    let eval_in = gen_probe_eval(spec, &part, spec.gap_range_in, false, spec.eval_seed, n_eval)?;
    let eval_ood = gen_probe_eval(
        spec,
        &part,
        spec.gap_range_ood,
        spec.distractors_ood,
        spec.eval_seed.wrapping_add(1),
        n_eval,
    )?;
    Ok((train, eval_in, eval_ood))
}

fn gen_probe_eval(
    spec: &ProbeSpec,
    part: &VocabPartition,
    gap_range: (usize, usize),
    distractors: bool,
    seed: u64,
    n_eval: usize,
) -> Result<EvalBatch> {
    if n_eval == 0 {
        return Err(Error::invalid("n_eval must be >= 1"));
    }
    let t = spec.eval_seq_len;
    let mut r = rng(seed, stream::DATA);
    let mut filler = MarkovFiller::new(seed.wrapping_add(7), part.filler.start, part.filler.end)?;
    let mut tokens = Array2::<u32>::zeros((n_eval, t));
    let mut query_positions = Vec::with_capacity(n_eval);
    let mut target_tokens = Vec::with_capacity(n_eval);
    let mut special_positions = Vec::with_capacity(n_eval);
    for e in 0..n_eval {
        for p in 0..t {
            tokens[[e, p]] = filler.next_token();
        }
        let gap = r.gen_range(gap_range.0..=gap_range.1);
        let mark = r.gen_range(0..t - gap - 1);
        let key_pos = mark + 1;
        let q = key_pos + gap;
        let key = r.gen_range(part.codewords.clone());
        tokens[[e, mark]] = KEY_MARK;
        tokens[[e, key_pos]] = key;
        tokens[[e, q - 1]] = QUERY_A;
        tokens[[e, q]] = QUERY_B;
        if distractors && q - 2 > key_pos + 1 {
            let u = r.gen_range(key_pos + 1..q - 2);
            if u != key_pos && u != mark {
                let distractor = loop {
                    let d = r.gen_range(part.codewords.clone());
                    if d != key {
                        break d;
                    }
                };
                tokens[[e, u]] = distractor;
            }
        }
        query_positions.push(q);
        target_tokens.push(key);
        let mut special = BTreeMap::new();
        special.insert("key_position".to_string(), vec![key_pos]);
        special_positions.push(special);
    }
    let batch = EvalBatch {
        tokens,
        query_positions,
        target_tokens,
        special_positions,
    };
    batch.validate(spec.vocab_size)?;
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn induction_batch_deterministic_and_seed_sensitive() {
        let a = gen_induction_batch(64, 32, 2, 512, 42).unwrap();
        let b = gen_induction_batch(64, 32, 2, 512, 42).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c = gen_induction_batch(64, 32, 2, 512, 43).unwrap();
        assert_ne!(a.tokens, c.tokens);
    }

    #[test]
    fn induction_batch_structure() {
        let batch = gen_induction_batch(200, 48, 2, 512, 7).unwrap();
        batch.validate(512).unwrap();
        for e in 0..batch.n_examples() {
            let q = batch.query_positions[e];
            let special = &batch.special_positions[e];
            let first_a = special["first_A"][0];
            let tgt_pos = special["induction_target"][0];
            assert_eq!(tgt_pos, first_a + 1);
            assert_eq!(batch.tokens[[e, tgt_pos]], batch.target_tokens[e]);
            assert_eq!(batch.tokens[[e, q]], batch.tokens[[e, first_a]]);
            assert_ne!(batch.tokens[[e, first_a]], batch.target_tokens[e], "A == B");
            let a = batch.tokens[[e, first_a]];
            // the earlier occurrence of A is unique
            let occurrences = (0..q).filter(|&p| batch.tokens[[e, p]] == a).count();
            assert_eq!(occurrences, 1, "example {e}: A occurs {occurrences} times before query");
        }
    }

    #[test]
    fn induction_batch_vocab_too_small() {
        assert!(gen_induction_batch(4, 16, 5, 6, 0).is_err());
        assert!(gen_induction_batch(4, 4, 0, 512, 0).is_err());
    }

    #[test]
    fn natural_positions_hand_oracles() {
        assert_eq!(natural_induction_positions(&[1, 2, 3, 4]), Vec::<usize>::new());
        assert_eq!(natural_induction_positions(&[1, 2, 1, 2]), vec![1, 2]);
        assert_eq!(natural_induction_positions(&[9, 9, 9]), vec![0, 1]);
        assert_eq!(natural_induction_positions(&[]), Vec::<usize>::new());
    }

    #[test]
    fn filler_stream_contract() {
        let mut a = filler_stream(11, 100, 300).unwrap();
        let mut b = filler_stream(11, 100, 300).unwrap();
        let mut buf_a = vec![0u32; 10_000];
        let mut buf_b = vec![0u32; 10_000];
        a.fill(&mut buf_a);
        b.fill(&mut buf_b);
        assert_eq!(buf_a, buf_b);
        assert!(buf_a.iter().all(|&t| (100..300).contains(&t)));

        // unigram entropy of a 100k sample is positive
        let mut big = vec![0u32; 100_000];
        a.fill(&mut big);
        let mut counts = std::collections::HashMap::new();
        for &t in &big {
            *counts.entry(t).or_insert(0u64) += 1;
        }
        let n = big.len() as f64;
        let entropy: f64 = counts
            .values()
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum();
        assert!(entropy > 0.0, "degenerate filler stream");
    }

    #[test]
    fn probe_rate_binomial_bounds() {
        let spec = ProbeSpec::default();
        let (mut train, _, _) = gen_probe_corpus(&spec, 5, 4).unwrap();
        let mut probes = 0u64;
        for _ in 0..10_000 {
            if train.push_example() {
                probes += 1;
            }
        }
        assert!(
            (800..=1200).contains(&probes),
            "probe count {probes} outside binomial bounds"
        );
    }

    #[test]
    fn probe_eval_structure() {
        let spec = ProbeSpec::default();
        let (_, eval_in, eval_ood) = gen_probe_corpus(&spec, 5, 128).unwrap();
        for (batch, range) in [(&eval_in, spec.gap_range_in), (&eval_ood, spec.gap_range_ood)] {
            batch.validate(spec.vocab_size).unwrap();
            for e in 0..batch.n_examples() {
                let q = batch.query_positions[e];
                let key = batch.special_positions[e]["key_position"][0];
                assert!(key < q);
                let gap = q - key;
                assert!((range.0..=range.1).contains(&gap), "gap {gap} outside {range:?}");
                assert_eq!(batch.tokens[[e, key]], batch.target_tokens[e]);
                assert_eq!(batch.tokens[[e, key - 1]], KEY_MARK);
                assert_eq!(batch.tokens[[e, q - 1]], QUERY_A);
                assert_eq!(batch.tokens[[e, q]], QUERY_B);
            }
        }
        // default config keeps ood gaps strictly beyond in-distribution gaps
        assert!(spec.gap_range_ood.0 > spec.gap_range_in.1);
        // ood batches carry a distractor codeword distinct from the key
        let part = spec.partition().unwrap();
        let mut distractor_seen = false;
        for e in 0..eval_ood.n_examples() {
            let q = eval_ood.query_positions[e];
            let key_pos = eval_ood.special_positions[e]["key_position"][0];
            let key = eval_ood.target_tokens[e];
            for p in key_pos + 1..q - 1 {
                let tok = eval_ood.tokens[[e, p]];
                if part.codewords.contains(&tok) {
                    assert_ne!(tok, key, "distractor equals key");
                    distractor_seen = true;
                }
            }
        }
        assert!(distractor_seen, "no distractors in ood batch");
    }

    #[test]
    fn probe_corpus_deterministic() {
        let spec = ProbeSpec::default();
        let (mut t1, in1, ood1) = gen_probe_corpus(&spec, 9, 32).unwrap();
        let (mut t2, in2, ood2) = gen_probe_corpus(&spec, 9, 32).unwrap();
        assert_eq!(in1.to_bytes(), in2.to_bytes());
        assert_eq!(ood1.to_bytes(), ood2.to_bytes());
        let mut a = vec![0u32; 4096];
        let mut b = vec![0u32; 4096];
        t1.fill(&mut a);
        t2.fill(&mut b);
        assert_eq!(a, b);
    }

    #[test]
    fn partition_overlap_rejected() {
        let bad = VocabPartition {
            markers: 0..3,
            codewords: 2..10,
            filler: 10..100,
        };
        assert!(bad.validate(100).is_err());
        // codeword vocabulary larger than the model vocab leaves no filler
        assert!(VocabPartition::probe(512, 512).is_err());
        assert!(VocabPartition::probe(2048, 512).is_ok());
    }

    #[test]
    fn eval_batch_roundtrip() {
        let batch = gen_induction_batch(16, 24, 2, 128, 3).unwrap();
        let bytes = batch.to_bytes();
        let back = EvalBatch::from_bytes(&bytes).unwrap();
        assert_eq!(batch, back);
        assert_eq!(batch.content_hash(), back.content_hash());
    }

    #[test]
    fn induction_mix_stream_has_repeats() {
        let mut s = InductionMixStream::new(3, 2, 512).unwrap();
        let mut buf = vec![0u32; 20_000];
        s.fill(&mut buf);
        assert!(buf.iter().all(|&t| (2..512).contains(&t)));
        // repeated subsequences make natural-induction positions common
        let hits = natural_induction_positions(&buf).len();
        assert!(hits > buf.len() / 10, "only {hits} induction positions");
    }
}
