//! Regular LDPC code: random socket-matching construction, GF(2) elimination
//! for encoding and sum-product belief propagation for decoding.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// LLR magnitude used for saturated inputs and messages.
pub const LLR_CLIP: f64 = 20.0;

/// Binary vector, one byte per bit.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Bitstream {
    bits: Vec<u8>,
}

impl Bitstream {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.iter().any(|b| *b > 1) {
            return Err(Error::Shape("bitstream entries must be 0 or 1".into()));
        }
        Ok(Self { bits })
    }

    pub fn zeros(len: usize) -> Self {
        Self { bits: vec![0; len] }
    }

    /// MSB-first expansion of `bytes`.
    pub fn from_bytes(bytes: &[u8]) -> Self {
        let bits = bytes
            .iter()
            .flat_map(|b| (0..8).rev().map(move |i| (b >> i) & 1))
            .collect();
        Self { bits }
    }

    /// Packs MSB-first; a trailing partial byte is zero padded.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.bits
            .chunks(8)
            .map(|c| c.iter().enumerate().fold(0u8, |acc, (i, b)| acc | (b << (7 - i))))
            .collect()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn into_bits(self) -> Vec<u8> {
        self.bits
    }
}

/// Parity-check code with `H` of size `(n − k) × n`. Only the first `k` free
/// columns of the echelon form carry message bits; when `H` is rank
/// deficient the remaining free columns are fixed to zero.
#[derive(Debug, Clone)]
pub struct LdpcCode {
    n: usize,
    k: usize,
    /// Column indices of each check.
    checks: Vec<Vec<usize>>,
    /// Check indices of each variable.
    vars: Vec<Vec<usize>>,
    /// Reduced row-echelon rows as bitsets, with their pivot columns.
    echelon: Vec<Vec<u64>>,
    pivots: Vec<usize>,
    message_cols: Vec<usize>,
}

fn bit(row: &[u64], j: usize) -> bool {
    row[j / 64] >> (j % 64) & 1 == 1
}

impl LdpcCode {
    /// Random `(column_weight, row_weight)`-regular code without repeated edges.
    pub fn regular(n: usize, k: usize, column_weight: usize, seed: u64) -> Result<Self> {
        if k == 0 || k >= n || column_weight == 0 {
            return Err(Error::Config(format!("invalid LDPC size n={n}, k={k}")));
        }
        let m = n - k;
        let edges = n * column_weight;
        if edges % m != 0 {
            return Err(Error::Config(format!(
                "{n} columns of weight {column_weight} cannot be spread evenly over {m} checks"
            )));
        }
        let row_weight = edges / m;
        if row_weight > n || column_weight > m {
            return Err(Error::Config("LDPC weights exceed the matrix size".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let var_socket: Vec<usize> = (0..edges).map(|e| e / column_weight).collect();
        let mut check_socket: Vec<usize> = (0..edges).map(|e| e / row_weight).collect();
        check_socket.shuffle(&mut rng);
        // Swap away repeated (variable, check) pairs.
        let mut tries = 0usize;
        loop {
            let mut seen = std::collections::HashSet::with_capacity(edges);
            let dup: Vec<usize> = (0..edges)
                .filter(|&e| !seen.insert((var_socket[e], check_socket[e])))
                .collect();
            if dup.is_empty() {
                break;
            }
            tries += 1;
            if tries > 10_000 {
                return Err(Error::Config("could not build a simple LDPC graph".into()));
            }
            for e in dup {
                let other = rng.random_range(0..edges);
                check_socket.swap(e, other);
            }
        }
        let mut checks = vec![Vec::with_capacity(row_weight); m];
        for e in 0..edges {
            checks[check_socket[e]].push(var_socket[e]);
        }
        for c in &mut checks {
            c.sort_unstable();
        }
        Self::from_checks(n, k, checks)
    }

    /// Builds from explicit check rows; `k` may not exceed `n − rank(H)`.
    pub fn from_checks(n: usize, k: usize, checks: Vec<Vec<usize>>) -> Result<Self> {
        if checks.iter().flatten().any(|&j| j >= n) {
            return Err(Error::Config("check references a column beyond n".into()));
        }
        let mut vars = vec![Vec::new(); n];
        for (i, row) in checks.iter().enumerate() {
            for &j in row {
                vars[j].push(i);
            }
        }
        let words = n.div_ceil(64);
        let mut rows: Vec<Vec<u64>> = checks
            .iter()
            .map(|c| {
                let mut r = vec![0u64; words];
                for &j in c {
                    r[j / 64] ^= 1 << (j % 64);
                }
                r
            })
            .collect();
        let mut pivots = Vec::new();
        let mut rank = 0;
        for col in 0..n {
            let Some(p) = (rank..rows.len()).find(|&r| bit(&rows[r], col)) else {
                continue;
            };
            rows.swap(rank, p);
            let pivot_row = rows[rank].clone();
            for (r, row) in rows.iter_mut().enumerate() {
                if r != rank && bit(row, col) {
                    for (a, b) in row.iter_mut().zip(&pivot_row) {
                        *a ^= b;
                    }
                }
            }
            pivots.push(col);
            rank += 1;
        }
        rows.truncate(rank);
        let free: Vec<usize> = (0..n).filter(|c| !pivots.contains(c)).collect();
        if k > free.len() {
            return Err(Error::Config(format!(
                "parity-check rank {rank} leaves only {} information bits, need {k}",
                free.len()
            )));
        }
        Ok(Self {
            n,
            k,
            checks,
            vars,
            echelon: rows,
            pivots,
            message_cols: free[..k].to_vec(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn rate(&self) -> f64 {
        self.k as f64 / self.n as f64
    }

    pub fn rank(&self) -> usize {
        self.pivots.len()
    }

    /// Column indices of every parity check.
    pub fn checks(&self) -> &[Vec<usize>] {
        &self.checks
    }

    /// Dense `(n − k) × n` parity-check matrix.
    pub fn parity_check_matrix(&self) -> Vec<Vec<u8>> {
        self.checks
            .iter()
            .map(|c| {
                let mut row = vec![0u8; self.n];
                for &j in c {
                    row[j] = 1;
                }
                row
            })
            .collect()
    }

    /// `H · c mod 2`.
    pub fn syndrome(&self, word: &[u8]) -> Vec<u8> {
        self.checks
            .iter()
            .map(|c| c.iter().fold(0u8, |acc, &j| acc ^ word[j]))
            .collect()
    }

    pub fn is_codeword(&self, word: &[u8]) -> bool {
        word.len() == self.n && self.syndrome(word).iter().all(|s| *s == 0)
    }

    pub fn encode(&self, msg: &Bitstream) -> Result<Bitstream> {
        if msg.len() != self.k {
            return Err(Error::DimensionMismatch(format!(
                "message has {} bits, code expects {}",
                msg.len(),
                self.k
            )));
        }
        let mut word = vec![0u8; self.n];
        for (&col, &b) in self.message_cols.iter().zip(msg.bits()) {
            word[col] = b;
        }
        // Each echelon row has a single pivot; every other set entry is free.
        for (row, &p) in self.echelon.iter().zip(&self.pivots) {
            let mut acc = 0u8;
            for &col in &self.message_cols {
                if bit(row, col) {
                    acc ^= word[col];
                }
            }
            word[p] = acc;
        }
        Bitstream::new(word)
    }

    pub fn extract_message(&self, word: &[u8]) -> Bitstream {
        Bitstream {
            bits: self.message_cols.iter().map(|&c| word[c]).collect(),
        }
    }

    /// Sum-product decoding. LLRs are `log P(0)/P(1)`. Returns the message
    /// bits of the last hard decision and whether it satisfied every check.
    pub fn decode(&self, llr: &[f64], max_iters: usize) -> Result<(Bitstream, bool)> {
        if llr.len() != self.n {
            return Err(Error::DimensionMismatch(format!(
                "{} LLRs for a length-{} code",
                llr.len(),
                self.n
            )));
        }
        let prior: Vec<f64> = llr
            .iter()
            .map(|l| if l.is_nan() { 0.0 } else { l.clamp(-LLR_CLIP, LLR_CLIP) })
            .collect();
        let hard = |post: &[f64]| post.iter().map(|l| u8::from(*l < 0.0)).collect::<Vec<u8>>();
        let mut word = hard(&prior);
        if self.is_codeword(&word) {
            return Ok((self.extract_message(&word), true));
        }
        // Edge messages stored per check, aligned with `checks[i]`.
        let mut c2v: Vec<Vec<f64>> = self.checks.iter().map(|c| vec![0.0; c.len()]).collect();
        let mut v2c: Vec<Vec<f64>> = self.checks.iter().map(|c| c.iter().map(|&j| prior[j]).collect()).collect();
        let mut post = prior.clone();
        for _ in 0..max_iters {
            for (i, row) in self.checks.iter().enumerate() {
                let t: Vec<f64> = v2c[i].iter().map(|m| (m / 2.0).tanh()).collect();
                for e in 0..row.len() {
                    let prod: f64 = t.iter().enumerate().filter(|(f, _)| *f != e).map(|(_, x)| x).product();
                    let prod = prod.clamp(-0.999_999_999_9, 0.999_999_999_9);
                    c2v[i][e] = (2.0 * prod.atanh()).clamp(-LLR_CLIP, LLR_CLIP);
                }
            }
            post.copy_from_slice(&prior);
            for (i, row) in self.checks.iter().enumerate() {
                for (e, &j) in row.iter().enumerate() {
                    post[j] += c2v[i][e];
                }
            }
            for (i, row) in self.checks.iter().enumerate() {
                for (e, &j) in row.iter().enumerate() {
                    v2c[i][e] = (post[j] - c2v[i][e]).clamp(-LLR_CLIP, LLR_CLIP);
                }
            }
            word = hard(&post);
            if self.is_codeword(&word) {
                return Ok((self.extract_message(&word), true));
            }
        }
        Ok((self.extract_message(&word), false))
    }

    /// Degree of every variable node.
    pub fn column_weights(&self) -> Vec<usize> {
        self.vars.iter().map(Vec::len).collect()
    }
}
