//! Deterministic synthetic corpus standing in for a speech encoder and an LLM
//! embedding layer.
//!
//! Everything is drawn from one SplitMix64 stream in a fixed order, so a
//! `(seed, config)` pair reproduces the same corpus bit for bit on any
//! platform: the embedding table, then the mixing matrix, then the training
//! utterances, then the evaluation utterances.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::transform::AdapterParams;

/// SplitMix64 generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub const fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn state(&self) -> u64 {
        self.state
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` from the high 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[-1, 1)` from the high 53 bits.
    pub fn next_signed_unit(&mut self) -> f64 {
        2.0 * self.next_f64() - 1.0
    }

    /// `next_u64() % n`; `n` must be positive.
    pub fn next_below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "next_below(0)");
        self.next_u64() % n
    }

    /// Uniform integer in the inclusive range `[lo, hi]`.
    pub fn next_in_range(&mut self, lo: usize, hi: usize) -> usize {
        lo + self.next_below((hi - lo + 1) as u64) as usize
    }

    /// Standard normal by Box-Muller, consuming two draws and keeping the cosine branch.
    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// Unit-norm token embeddings; the last row is the pad token.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub vocab_size: usize,
    pub dim: usize,
    pub rows: Matrix,
    pub pad_id: usize,
}

impl EmbeddingTable {
    pub fn generate(rng: &mut SplitMix64, vocab_size: usize, dim: usize) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::Config(format!("vocab_size must be at least 2, got {vocab_size}")));
        }
        if dim < 2 {
            return Err(Error::Config(format!("embedding dim must be at least 2, got {dim}")));
        }
        let mut data = Vec::with_capacity(vocab_size * dim);
        for _ in 0..vocab_size {
            let row = loop {
                let row: Vec<f64> = (0..dim).map(|_| rng.next_signed_unit()).collect();
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    break row.into_iter().map(|v| v / norm).collect::<Vec<_>>();
                }
            };
            data.extend(row);
        }
        Ok(Self {
            vocab_size,
            dim,
            rows: Matrix::from_vec_unchecked(vocab_size, dim, data),
            pad_id: vocab_size - 1,
        })
    }

    pub fn embedding(&self, id: usize) -> &[f64] {
        self.rows.row(id)
    }

    pub fn pad(&self) -> &[f64] {
        self.rows.row(self.pad_id)
    }

    pub fn lookup(&self, ids: &[usize]) -> Matrix {
        self.rows.select_rows(ids)
    }

    /// Token whose embedding has the highest cosine similarity to `v`.
    pub fn nearest(&self, v: &[f64]) -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for (id, row) in self.rows.row_iter().enumerate() {
            let s = crate::autodiff::cosine(row, v).unwrap_or(f64::NEG_INFINITY);
            if s > best.1 {
                best = (id, s);
            }
        }
        best.0
    }
}

pub fn make_embedding_table(seed: u64, vocab_size: usize, dim: usize) -> Result<EmbeddingTable> {
    EmbeddingTable::generate(&mut SplitMix64::new(seed), vocab_size, dim)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub seed: u64,
    pub vocab_size: usize,
    pub d_l: usize,
    pub d_s: usize,
    pub utterance_count: usize,
    /// Held-out utterances drawn after the training ones.
    pub eval_count: usize,
    /// Inclusive token-count range per utterance.
    pub token_len_range: (usize, usize),
    /// Inclusive frames-per-token range; pad runs use the same range.
    pub repeat_range: (usize, usize),
    pub pad_insert_prob: f64,
    pub noise_sigma: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 20_250_601,
            vocab_size: 30,
            d_l: 16,
            d_s: 24,
            utterance_count: 200,
            eval_count: 50,
            token_len_range: (3, 6),
            repeat_range: (2, 4),
            pad_insert_prob: 0.3,
            noise_sigma: 0.05,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size < 2 {
            return bad(format!("vocab_size must be at least 2, got {}", self.vocab_size));
        }
        if self.d_l < 2 || self.d_s < 1 {
            return bad(format!("invalid dims d_l = {}, d_s = {}", self.d_l, self.d_s));
        }
        for (name, (lo, hi)) in [("token_len_range", self.token_len_range), ("repeat_range", self.repeat_range)] {
            if lo == 0 || lo > hi {
                return bad(format!("{name} must be a nonempty range of positive counts, got [{lo}, {hi}]"));
            }
        }
        if !(0.0..=1.0).contains(&self.pad_insert_prob) {
            return bad(format!("pad_insert_prob must lie in [0, 1], got {}", self.pad_insert_prob));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be nonnegative, got {}", self.noise_sigma));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceSample {
    pub tokens: Vec<usize>,
    pub raw_speech: Matrix,
    /// Ground-truth token (or pad id) per raw frame.
    pub frame_to_token: Vec<usize>,
}

/// Draws the `d_l x d_s` mixing matrix with entries uniform in `[-1, 1)`.
pub fn sample_mixing(rng: &mut SplitMix64, d_l: usize, d_s: usize) -> Matrix {
    Matrix::from_fn(d_l, d_s, |_, _| rng.next_signed_unit())
}

pub fn synthesize_utterance(
    table: &EmbeddingTable,
    mixing: &Matrix,
    cfg: &CorpusConfig,
    rng: &mut SplitMix64,
) -> Result<UtteranceSample> {
    cfg.validate()?;
    if mixing.rows() != table.dim {
        return Err(Error::Dimension {
            op: "synthesize_utterance",
            lhs: (table.vocab_size, table.dim),
            rhs: mixing.shape(),
        });
    }
    let d_s = mixing.cols();
    let n_t = rng.next_in_range(cfg.token_len_range.0, cfg.token_len_range.1);
    let tokens: Vec<usize> = (0..n_t)
        .map(|_| rng.next_below((table.vocab_size - 1) as u64) as usize)
        .collect();

    let clean: Vec<Vec<f64>> = (0..table.vocab_size)
        .map(|id| {
            let e = table.embedding(id);
            (0..d_s)
                .map(|j| e.iter().enumerate().map(|(i, v)| v * mixing.get(i, j)).sum())
                .collect()
        })
        .collect();

    let mut frames = Vec::new();
    let mut frame_to_token = Vec::new();
    let mut emit = |id: usize, count: usize, rng: &mut SplitMix64| {
        for _ in 0..count {
            for &x in &clean[id] {
                frames.push(x + cfg.noise_sigma * rng.next_gaussian());
            }
            frame_to_token.push(id);
        }
    };
    let (lo, hi) = cfg.repeat_range;
    for (idx, &tok) in tokens.iter().enumerate() {
        if idx > 0 && rng.next_f64() < cfg.pad_insert_prob {
            let run = rng.next_in_range(lo, hi);
            emit(table.pad_id, run, rng);
        }
        let r = rng.next_in_range(lo, hi);
        emit(tok, r, rng);
    }
    let n_s = frame_to_token.len();
    Ok(UtteranceSample {
        tokens,
        raw_speech: Matrix::new(n_s, d_s, frames)?,
        frame_to_token,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub table: EmbeddingTable,
    pub mixing: Matrix,
    pub train: Vec<UtteranceSample>,
    pub eval: Vec<UtteranceSample>,
}

impl Corpus {
    pub fn generate(cfg: &CorpusConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SplitMix64::new(cfg.seed);
        let table = EmbeddingTable::generate(&mut rng, cfg.vocab_size, cfg.d_l)?;
        let mixing = sample_mixing(&mut rng, cfg.d_l, cfg.d_s);
        let train = (0..cfg.utterance_count)
            .map(|_| synthesize_utterance(&table, &mixing, cfg, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let eval = (0..cfg.eval_count)
            .map(|_| synthesize_utterance(&table, &mixing, cfg, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: cfg.clone(),
            table,
            mixing,
            train,
            eval,
        })
    }

    /// Right inverse `R` of the mixing matrix, `mixing * R = I`.
    pub fn inverse_mixing(&self) -> Result<Matrix> {
        let mt = self.mixing.transpose();
        let gram = self.mixing.matmul(&mt)?;
        mt.matmul(&gram.inverse()?)
    }

    /// Nearest-token decoding of raw frames through the inverse mixing.
    pub fn decode_raw(&self, raw: &Matrix) -> Result<Vec<usize>> {
        let e = raw.matmul(&self.inverse_mixing()?)?;
        Ok(e.row_iter().map(|r| self.table.nearest(r)).collect())
    }

    /// Adapter that maps each stack of `k` frames to the embedding of its first frame
    /// exactly in the absence of noise, using `relu(x) - relu(-x) = x`.
    pub fn oracle_adapter(&self, k: usize) -> Result<AdapterParams> {
        let r = self.inverse_mixing()?;
        let (d_s, d_l) = r.shape();
        let mut p = AdapterParams::zeros(k * d_s, 2 * d_l, d_l);
        for i in 0..d_s {
            for j in 0..d_l {
                p.w1.set(i, j, r.get(i, j));
                p.w1.set(i, d_l + j, -r.get(i, j));
            }
        }
        for j in 0..d_l {
            p.w2.set(j, j, 1.0);
            p.w2.set(d_l + j, j, -1.0);
        }
        Ok(p)
    }
}
