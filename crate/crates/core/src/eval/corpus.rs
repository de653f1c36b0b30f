//! Deterministic synthetic corpora.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Successors per context in the character chain.
pub const MARKOV_FANOUT: usize = 4;
const MARKOV_CONCENTRATION: f64 = 0.5;

const CHAIN_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    MarkovChars,
    CopyMemory,
    ModularArithmetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub train_tokens: usize,
    pub eval_tokens: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let min_vocab = match self.kind {
            TaskKind::MarkovChars => MARKOV_FANOUT,
            TaskKind::CopyMemory => 3,
            TaskKind::ModularArithmetic => 5,
        };
        if self.vocab_size < min_vocab {
            return Err(Error::InvalidConfig(format!(
                "vocab_size {} too small for {:?} (need >= {min_vocab})",
                self.vocab_size, self.kind
            )));
        }
        if self.vocab_size > u32::MAX as usize {
            return Err(Error::InvalidConfig("vocab_size exceeds u32".into()));
        }
        let min_len = if self.kind == TaskKind::MarkovChars { 1 } else { 4 };
        if self.seq_len < min_len {
            return Err(Error::InvalidConfig(format!("seq_len must be >= {min_len}")));
        }
        if self.train_tokens == 0 || self.eval_tokens == 0 {
            return Err(Error::InvalidConfig("train_tokens and eval_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

/// Order-2 chain where each context has a few weighted successors.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkovChain {
    vocab: usize,
    /// `(token, probability)` lists indexed by `prev2 * vocab + prev1`.
    table: Vec<Vec<(u32, f64)>>,
}

impl MarkovChain {
    pub fn new(vocab: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(CHAIN_STREAM);
        let dir = Dirichlet::new([MARKOV_CONCENTRATION; MARKOV_FANOUT]).expect("valid concentration");
        let table = (0..vocab * vocab)
            .map(|_| {
                let mut succ: Vec<usize> = sample(&mut rng, vocab, MARKOV_FANOUT).into_vec();
                succ.sort_unstable();
                let w: [f64; MARKOV_FANOUT] = dir.sample(&mut rng);
                succ.into_iter().zip(w).map(|(t, p)| (t as u32, p)).collect()
            })
            .collect();
        Self { vocab, table }
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn successors(&self, prev2: u32, prev1: u32) -> &[(u32, f64)] {
        &self.table[prev2 as usize * self.vocab + prev1 as usize]
    }

    /// Dense row of `P(next | prev2, prev1)`.
    pub fn transition_row(&self, prev2: u32, prev1: u32) -> Vec<f64> {
        let mut row = vec![0.0; self.vocab];
        for &(t, p) in self.successors(prev2, prev1) {
            row[t as usize] += p;
        }
        row
    }

    fn next(&self, rng: &mut ChaCha8Rng, prev2: u32, prev1: u32) -> u32 {
        let succ = self.successors(prev2, prev1);
        let mut u: f64 = rng.random();
        for &(t, p) in succ {
            if u < p {
                return t;
            }
            u -= p;
        }
        succ[succ.len() - 1].0
    }

    /// A stream of `n` tokens from a uniform random start.
    pub fn generate(&self, rng: &mut ChaCha8Rng, n: usize) -> Vec<u32> {
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let t = if i < 2 {
                rng.random_range(0..self.vocab as u32)
            } else {
                self.next(rng, out[i - 2], out[i - 1])
            };
            out.push(t);
        }
        out
    }

    /// Mean conditional entropy under the empirical context frequencies of
    /// `stream`; the best achievable cross-entropy in nats.
    pub fn entropy_rate(&self, stream: &[u32]) -> f64 {
        let mut total = 0.0;
        let mut n = 0usize;
        for w in stream.windows(3) {
            total -= self.successors(w[0], w[1]).iter().map(|(_, p)| if *p > 0.0 { p * p.ln() } else { 0.0 }).sum::<f64>();
            n += 1;
        }
        total / n.max(1) as f64
    }
}

/// Train and eval splits, each a list of `seq_len + 1` token windows
/// (inputs are the first `seq_len`, targets the last `seq_len`).
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub spec: TaskSpec,
    pub train: Vec<Vec<u32>>,
    pub eval: Vec<Vec<u32>>,
}

impl Corpus {
    pub fn seq_len(&self) -> usize {
        self.spec.seq_len
    }

    pub fn train_tokens(&self) -> usize {
        self.train.len() * self.spec.seq_len
    }

    pub fn eval_tokens(&self) -> usize {
        self.eval.len() * self.spec.seq_len
    }

    /// Target positions scored by task accuracy; `None` means every
    /// position counts.
    pub fn answer_mask(&self, seq: &[u32]) -> Option<Vec<bool>> {
        answer_mask(&self.spec, seq)
    }
}

fn split_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn gen_synthetic_corpus(spec: &TaskSpec) -> Result<Corpus> {
    spec.validate()?;
    let l = spec.seq_len;
    let n_train = spec.train_tokens.div_ceil(l);
    let n_eval = spec.eval_tokens.div_ceil(l);
    let mut train_rng = split_rng(spec.seed, TRAIN_STREAM);
    let mut eval_rng = split_rng(spec.seed, EVAL_STREAM);
    let (train, eval) = match spec.kind {
        TaskKind::MarkovChars => {
            let chain = MarkovChain::new(spec.vocab_size, spec.seed);
            let chop = |stream: Vec<u32>, n: usize| (0..n).map(|i| stream[i * l..i * l + l + 1].to_vec()).collect::<Vec<_>>();
            let tr = chain.generate(&mut train_rng, n_train * l + 1);
            let ev = chain.generate(&mut eval_rng, n_eval * l + 1);
            (chop(tr, n_train), chop(ev, n_eval))
        }
        TaskKind::CopyMemory => (
            (0..n_train).map(|_| copy_sequence(&mut train_rng, spec)).collect(),
            (0..n_eval).map(|_| copy_sequence(&mut eval_rng, spec)).collect(),
        ),
        TaskKind::ModularArithmetic => (
            (0..n_train).map(|_| modular_sequence(&mut train_rng, spec)).collect(),
            (0..n_eval).map(|_| modular_sequence(&mut eval_rng, spec)).collect(),
        ),
    };
    Ok(Corpus { spec: spec.clone(), train, eval })
}

/// Copy task layout: `m` random symbols, a delimiter, then the same symbols
/// again. Token 0 is the delimiter, 1 the filler.
pub const COPY_DELIM: u32 = 0;
pub const COPY_FILL: u32 = 1;

fn copy_span(spec: &TaskSpec) -> usize {
    spec.seq_len / 2
}

fn copy_sequence(rng: &mut ChaCha8Rng, spec: &TaskSpec) -> Vec<u32> {
    let m = copy_span(spec);
    let sym: Vec<u32> = (0..m).map(|_| rng.random_range(2..spec.vocab_size as u32)).collect();
    let mut seq = sym.clone();
    seq.push(COPY_DELIM);
    seq.extend(&sym);
    seq.resize(spec.seq_len + 1, COPY_FILL);
    seq
}

/// Problems `a + b = c ;` with values in `0..p`, `p = vocab - 3`.
fn modular_sequence(rng: &mut ChaCha8Rng, spec: &TaskSpec) -> Vec<u32> {
    let p = (spec.vocab_size - 3) as u32;
    let mut seq = Vec::with_capacity(spec.seq_len + 5);
    while seq.len() < spec.seq_len + 1 {
        let a = rng.random_range(0..p);
        let b = rng.random_range(0..p);
        seq.extend([a, p, b, p + 1, (a + b) % p, p + 2]);
    }
    seq.truncate(spec.seq_len + 1);
    seq
}

/// Mask over the `seq_len` target positions marking task answers.
pub fn answer_mask(spec: &TaskSpec, seq: &[u32]) -> Option<Vec<bool>> {
    let l = spec.seq_len;
    match spec.kind {
        TaskKind::MarkovChars => None,
        TaskKind::CopyMemory => {
            let m = copy_span(spec);
            Some((0..l).map(|t| t + 1 > m && t < 2 * m).collect())
        }
        TaskKind::ModularArithmetic => {
            let eq = (spec.vocab_size - 2) as u32;
            Some((0..l).map(|t| seq[t] == eq).collect())
        }
    }
}
