//! LSH-driven sparsity patterns and masked attention.
//!
//! Each hashing round draws `log2(buckets)` random unit directions; a vector's
//! bucket is the bit pattern of the signs of its projections. Query/key pairs
//! are kept by how many rounds they collide in.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numerics::{self as nx, KeepMask, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LshConfig {
    pub rounds: usize,
    pub buckets_per_round: usize,
    pub target_sparsity: f64,
}

impl Default for LshConfig {
    fn default() -> Self {
        Self { rounds: 32, buckets_per_round: 4, target_sparsity: 0.90 }
    }
}

impl LshConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("lsh rounds must be at least 1".into()));
        }
        if self.buckets_per_round < 2 || !self.buckets_per_round.is_power_of_two() {
            return Err(Error::Config(format!(
                "buckets_per_round {} must be a power of two ≥ 2",
                self.buckets_per_round
            )));
        }
        if !(0.0..1.0).contains(&self.target_sparsity) {
            return Err(Error::Config(format!("target_sparsity {} must lie in [0, 1)", self.target_sparsity)));
        }
        Ok(())
    }

    fn planes(&self) -> usize {
        self.buckets_per_round.trailing_zeros() as usize
    }
}

/// Row-major `[n_queries, n_keys]` collision counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchCounts {
    pub n_queries: usize,
    pub n_keys: usize,
    pub counts: Vec<u32>,
}

impl MatchCounts {
    pub fn new(n_queries: usize, n_keys: usize, counts: Vec<u32>) -> Result<Self> {
        if counts.len() != n_queries * n_keys {
            return dim_err(format!("{n_queries}x{n_keys} counts need {} values", n_queries * n_keys));
        }
        Ok(Self { n_queries, n_keys, counts })
    }

    pub fn get(&self, q: usize, k: usize) -> u32 {
        self.counts[q * self.n_keys + k]
    }
}

/// Random unit directions for every round, `[rounds][planes][dim]`.
pub fn hash_directions(dim: usize, cfg: &LshConfig, seed: u64) -> Vec<Vec<Vec<f32>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cfg.rounds)
        .map(|_| {
            (0..cfg.planes())
                .map(|_| {
                    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                    v.iter().map(|x| (x / norm) as f32).collect()
                })
                .collect()
        })
        .collect()
}

/// Bucket index of `v` under one round's directions: bit `p` (most
/// significant first) is set when the projection on direction `p` is positive.
pub fn bucket_of(v: &[f32], directions: &[Vec<f32>]) -> usize {
    directions.iter().fold(0, |acc, r| {
        let dot: f32 = r.iter().zip(v).map(|(a, b)| a * b).sum();
        (acc << 1) | usize::from(dot > 0.0)
    })
}

fn rows(x: &Tensor, what: &str) -> Result<(usize, usize)> {
    match *x.shape() {
        [n, d] if d > 0 => Ok((n, d)),
        _ => dim_err(format!("{what} must be [n, d] with d ≥ 1, got {:?}", x.shape())),
    }
}

/// Number of rounds in which each query and key share a bucket.
pub fn lsh_match_counts(queries: &Tensor, keys: &Tensor, cfg: &LshConfig, seed: u64) -> Result<MatchCounts> {
    cfg.validate()?;
    let (nq, d) = rows(queries, "queries")?;
    let (nk, dk) = rows(keys, "keys")?;
    if d != dk {
        return dim_err(format!("query dim {d} differs from key dim {dk}"));
    }
    let dirs = hash_directions(d, cfg, seed);
    let hash_all = |x: &Tensor, n: usize| -> Vec<Vec<u8>> {
        dirs.par_iter()
            .map(|round| (0..n).map(|i| bucket_of(&x.data()[i * d..(i + 1) * d], round) as u8).collect())
            .collect()
    };
    let qb = hash_all(queries, nq);
    let kb = hash_all(keys, nk);
    let mut counts = vec![0u32; nq * nk];
    counts.par_chunks_mut(nk).enumerate().for_each(|(q, row)| {
        for (qr, kr) in qb.iter().zip(&kb) {
            let bq = qr[q];
            for (c, &bk) in row.iter_mut().zip(kr) {
                *c += u32::from(bq == bk);
            }
        }
    });
    MatchCounts::new(nq, nk, counts)
}

/// Per-(query, key) keep-mask for attention logits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsityPattern {
    mask: KeepMask,
}

impl SparsityPattern {
    /// Rejects masks with an empty row.
    pub fn from_mask(mask: KeepMask) -> Result<Self> {
        if let Some(row) = (0..mask.rows()).find(|&r| !mask.row(r).iter().any(|&k| k)) {
            return Err(Error::DegenerateRow { row });
        }
        Ok(Self { mask })
    }

    pub fn full(n_queries: usize, n_keys: usize) -> Self {
        Self { mask: KeepMask::full(n_queries, n_keys) }
    }

    pub fn diagonal(n: usize) -> Self {
        let mut mask = KeepMask::new(n, n, vec![false; n * n]).expect("square mask");
        for i in 0..n {
            mask.set(i, i, true);
        }
        Self { mask }
    }

    pub fn n_queries(&self) -> usize {
        self.mask.rows()
    }

    pub fn n_keys(&self) -> usize {
        self.mask.cols()
    }

    pub fn kept(&self) -> usize {
        self.mask.count_kept()
    }

    pub fn is_kept(&self, q: usize, k: usize) -> bool {
        self.mask.get(q, k)
    }

    /// Fraction of logits removed.
    pub fn sparsity(&self) -> f64 {
        1.0 - self.kept() as f64 / (self.n_queries() * self.n_keys()) as f64
    }

    pub fn mask(&self) -> &KeepMask {
        &self.mask
    }
}

/// Number of entries a pattern may keep at `target` sparsity.
pub fn keep_budget(n: usize, target: f64) -> usize {
    (((1.0 - target) * n as f64) + 1e-9).floor() as usize
}

/// Smallest count threshold whose keep-set fits the budget, and the
/// exact-budget pattern.
///
/// Entries are ranked by the diagonal first (square inputs only), then by
/// count descending, then by query and key index ascending; the top
/// `keep_budget` entries are kept. A query left without keys takes its
/// highest-count key, displacing the lowest-ranked entry of a row that keeps
/// more than one.
pub fn select_threshold(counts: &MatchCounts, target_sparsity: f64) -> (u32, SparsityPattern) {
    let (nq, nk) = (counts.n_queries, counts.n_keys);
    let n = nq * nk;
    let budget = keep_budget(n, target_sparsity);

    let max_count = counts.counts.iter().copied().max().unwrap_or(0);
    let mut at_least = vec![0usize; max_count as usize + 2];
    for &c in &counts.counts {
        at_least[c as usize] += 1;
    }
    for c in (0..=max_count as usize).rev() {
        at_least[c] += at_least[c + 1];
    }
    let k_min = (0..=max_count + 1).find(|&k| at_least[k as usize] <= budget).unwrap_or(max_count + 1);

    let square = nq == nk;
    let mut by_count: Vec<Vec<usize>> = vec![Vec::new(); max_count as usize + 1];
    for (i, &c) in counts.counts.iter().enumerate() {
        if !(square && i / nk == i % nk) {
            by_count[c as usize].push(i);
        }
    }
    let mut order: Vec<usize> = if square { (0..nq).map(|q| q * nk + q).collect() } else { Vec::new() };
    for bucket in by_count.iter().rev() {
        order.extend_from_slice(bucket);
    }

    let mut keep = vec![false; n];
    let mut per_row = vec![0usize; nq];
    let mut kept_order: Vec<usize> = order.iter().take(budget).copied().collect();
    for &i in &kept_order {
        keep[i] = true;
        per_row[i / nk] += 1;
    }

    for q in 0..nq {
        if per_row[q] > 0 {
            continue;
        }
        let row = &counts.counts[q * nk..(q + 1) * nk];
        let best = (0..nk).max_by_key(|&k| (row[k], std::cmp::Reverse(k))).expect("non-empty row");
        if let Some(pos) = kept_order.iter().rposition(|&i| per_row[i / nk] > 1) {
            let victim = kept_order.remove(pos);
            keep[victim] = false;
            per_row[victim / nk] -= 1;
        }
        keep[q * nk + best] = true;
        per_row[q] += 1;
    }

    let mask = KeepMask::new(nq, nk, keep).expect("sized mask");
    (k_min, SparsityPattern { mask })
}

/// LSH pattern for one query/key set.
pub fn lsh_pattern(queries: &Tensor, keys: &Tensor, cfg: &LshConfig, seed: u64) -> Result<SparsityPattern> {
    let counts = lsh_match_counts(queries, keys, cfg, seed)?;
    Ok(select_threshold(&counts, cfg.target_sparsity).1)
}

/// `softmax(scale · q kᵀ)` restricted to the pattern, times `v`. Inputs are
/// `[n, d]` or batched `[b, n, d]`; the pattern applies to every batch entry.
pub fn sparse_attention(q: &Tensor, k: &Tensor, v: &Tensor, pattern: &SparsityPattern, scale: f32) -> Result<Tensor> {
    let nd = q.ndim();
    let (nq, nk) = (q.shape()[nd.saturating_sub(2)], k.shape()[k.ndim().saturating_sub(2)]);
    if pattern.n_queries() != nq || pattern.n_keys() != nk {
        return dim_err(format!(
            "pattern {}x{} does not match {nq} queries and {nk} keys",
            pattern.n_queries(),
            pattern.n_keys()
        ));
    }
    attend(q, k, v, Some(pattern.mask()), scale)
}

/// Scaled dot-product attention with an optional keep-mask.
pub fn attend(q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&KeepMask>, scale: f32) -> Result<Tensor> {
    let weights = attention_weights(q, k, mask, scale)?;
    nx::bmm(&weights, v, false, false)
}

pub fn attention_weights(q: &Tensor, k: &Tensor, mask: Option<&KeepMask>, scale: f32) -> Result<Tensor> {
    let logits = nx::scale(&nx::bmm(q, k, false, true)?, scale)?;
    nx::softmax(&logits, logits.ndim() - 1, mask)
}
