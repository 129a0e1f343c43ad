//! Per-class SMOTE generators for pseudo-replay.
//!
//! A generator is just the fitted class's sample store: synthesis draws a
//! parent round-robin, picks one of its k nearest neighbors uniformly, and
//! interpolates `x + λ·(x_nbr − x)` with `λ ~ U[0,1]`. A singleton store
//! falls back to jitter mode (Gaussian noise, σ = 0.01) so degenerate input
//! cannot abort a run.

use crate::signal::{Beat, BEAT_LEN};
use crate::{derive_seed, Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

const JITTER_SIGMA: f64 = 0.01;

/// A fitted per-class generator over vectors of one consistent dimension.
#[derive(Debug, Clone)]
pub struct SmoteGenerator {
    class_symbol: char,
    store: Vec<Vec<f64>>,
    k: usize,
    seed: u64,
    /// Precomputed k-nearest-neighbor indices per stored sample.
    neighbors: Vec<Vec<usize>>,
    jitter_mode: bool,
}

impl SmoteGenerator {
    /// Fit on raw vectors. `k` is capped at `store_len − 1`; a single-sample
    /// store switches to jitter mode.
    pub fn fit_vectors(class_symbol: char, samples: Vec<Vec<f64>>, k: usize, seed: u64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Invalid(format!("class {class_symbol:?} has no samples to fit")));
        }
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        let dim = samples[0].len();
        if samples.iter().any(|s| s.len() != dim) {
            return Err(Error::Invalid("inconsistent sample dimensions".into()));
        }
        let jitter_mode = samples.len() < 2;
        let eff_k = k.min(samples.len().saturating_sub(1));
        let neighbors = if jitter_mode {
            vec![Vec::new(); samples.len()]
        } else {
            (0..samples.len())
                .map(|i| knn_excluding(&samples[i], &samples, eff_k, Some(i)))
                .collect()
        };
        Ok(Self {
            class_symbol,
            store: samples,
            k: eff_k.max(1),
            seed,
            neighbors,
            jitter_mode,
        })
    }

    /// Fit on beats (their standardized value vectors become the store).
    pub fn fit(class_symbol: char, beats: &[Beat], k: usize, seed: u64) -> Result<Self> {
        let samples = beats.iter().map(|b| b.values.clone()).collect();
        Self::fit_vectors(class_symbol, samples, k, seed)
    }

    pub fn class_symbol(&self) -> char {
        self.class_symbol
    }

    pub fn store(&self) -> &[Vec<f64>] {
        &self.store
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn jitter_mode(&self) -> bool {
        self.jitter_mode
    }

    /// Synthesize exactly `count` vectors. Reproducible for a given
    /// `(store, k, seed, count, stream)`; `stream` lets callers draw
    /// independent batches from one generator.
    pub fn synthesize_vectors(&self, count: usize, stream: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(
            self.seed,
            &format!("smote.{}.{stream}", self.class_symbol),
        ));
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let parent_idx = i % self.store.len();
            let parent = &self.store[parent_idx];
            if self.jitter_mode {
                out.push(parent.iter().map(|v| v + JITTER_SIGMA * gauss(&mut rng)).collect());
                continue;
            }
            let nbrs = &self.neighbors[parent_idx];
            let nbr = &self.store[nbrs[rng.gen_range(0..nbrs.len())]];
            let lambda: f64 = rng.gen_range(0.0..=1.0);
            out.push(
                parent
                    .iter()
                    .zip(nbr)
                    .map(|(x, n)| x + lambda * (n - x))
                    .collect(),
            );
        }
        out
    }

    /// Synthesize pseudo beats carrying this generator's class symbol and
    /// the synthetic provenance flag. The store must hold beat-length
    /// vectors.
    pub fn synthesize(&self, count: usize, stream: u64) -> Result<Vec<Beat>> {
        if !self.store.is_empty() && self.store[0].len() != BEAT_LEN {
            return Err(Error::Invalid(format!(
                "store dimension {} is not beat-length {BEAT_LEN}",
                self.store[0].len()
            )));
        }
        self.synthesize_vectors(count, stream)
            .into_iter()
            .map(|values| {
                let mut b = Beat::new(values, self.class_symbol, 0)?;
                b.standardized = true;
                b.synthetic = true;
                Ok(b)
            })
            .collect()
    }
}

fn gauss(rng: &mut ChaCha20Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Euclidean k-nearest-neighbor indices into `store`, ties broken by
/// ascending index. Entries identical to the query are excluded (a store
/// member never matches itself).
pub fn knn(query: &[f64], store: &[Vec<f64>], k: usize) -> Vec<usize> {
    knn_excluding(query, store, k, None)
}

fn knn_excluding(query: &[f64], store: &[Vec<f64>], k: usize, exclude: Option<usize>) -> Vec<usize> {
    let mut dists: Vec<(f64, usize)> = store
        .iter()
        .enumerate()
        .filter(|(i, s)| match exclude {
            Some(e) => *i != e,
            None => s.as_slice() != query,
        })
        .map(|(i, s)| {
            let d: f64 = s.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum();
            (d, i)
        })
        .collect();
    dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    dists.into_iter().take(k).map(|(_, i)| i).collect()
}

/// Ordered per-class generators, index = class introduction order.
#[derive(Debug, Clone, Default)]
pub struct GeneratorBank {
    generators: Vec<SmoteGenerator>,
}

impl GeneratorBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, generator: SmoteGenerator) -> Result<()> {
        if self.generators.iter().any(|g| g.class_symbol == generator.class_symbol) {
            return Err(Error::Invalid(format!(
                "bank already holds a generator for class {:?}",
                generator.class_symbol
            )));
        }
        self.generators.push(generator);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.generators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.generators.is_empty()
    }

    pub fn generators(&self) -> &[SmoteGenerator] {
        &self.generators
    }

    /// Synthesize a labeled pseudo dataset: `counts_per_class[i]` beats from
    /// generator `i`, concatenated in bank order.
    pub fn synthesize_bank(&self, counts_per_class: &[usize], stream: u64) -> Result<Vec<Beat>> {
        if counts_per_class.len() != self.generators.len() {
            return Err(Error::Invalid(format!(
                "expected {} counts, got {}",
                self.generators.len(),
                counts_per_class.len()
            )));
        }
        let mut out = Vec::with_capacity(counts_per_class.iter().sum());
        for (g, &count) in self.generators.iter().zip(counts_per_class) {
            out.extend(g.synthesize(count, stream)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn vec_store(points: &[&[f64]]) -> Vec<Vec<f64>> {
        points.iter().map(|p| p.to_vec()).collect()
    }

    #[test]
    fn fit_stores_everything() {
        let g = SmoteGenerator::fit_vectors('N', vec![vec![0.0], vec![1.0], vec![2.0]], 5, 1).unwrap();
        assert_eq!(g.store().len(), 3);
        assert_eq!(g.k(), 2, "k capped at store size − 1");
        assert!(!g.jitter_mode());
    }

    #[test]
    fn singleton_store_enables_jitter_mode() {
        let g = SmoteGenerator::fit_vectors('N', vec![vec![5.0, 5.0]], 3, 1).unwrap();
        assert!(g.jitter_mode());
        let out = g.synthesize_vectors(4, 0);
        assert_eq!(out.len(), 4);
        for s in &out {
            for v in s {
                assert!((v - 5.0).abs() < 0.1, "jitter should stay near the sample");
            }
        }
    }

    #[test]
    fn knn_line_example() {
        let store = vec_store(&[&[0.0], &[1.0], &[10.0]]);
        assert_eq!(knn(&[0.0], &store, 1), vec![1]);
        assert_eq!(knn(&[0.0], &store, 2), vec![1, 2], "k = |store|−1 gives all non-self");
    }

    #[test]
    fn knn_matches_brute_force_with_ties() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let store: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..8).map(|_| f64::from(rng.gen_range(0..4))).collect())
            .collect();
        let query: Vec<f64> = (0..8).map(|_| f64::from(rng.gen_range(0..4))).collect();
        let got = knn(&query, &store, 5);

        // straight-line oracle: exhaustive sort by (distance, index)
        let mut all: Vec<(f64, usize)> = store
            .iter()
            .enumerate()
            .filter(|(_, s)| s.as_slice() != query.as_slice())
            .map(|(i, s)| (s.iter().zip(&query).map(|(a, b)| (a - b) * (a - b)).sum(), i))
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let expect: Vec<usize> = all.into_iter().take(5).map(|(_, i)| i).collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn one_dim_segment_containment() {
        let g = SmoteGenerator::fit_vectors('N', vec![vec![0.0], vec![1.0]], 1, 3).unwrap();
        for s in g.synthesize_vectors(100, 0) {
            assert!((0.0..=1.0).contains(&s[0]), "value {} escaped the segment", s[0]);
        }
    }

    #[test]
    fn synthesized_points_lie_on_parent_segments() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let store: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let g = SmoteGenerator::fit_vectors('X', store.clone(), 3, 11).unwrap();
        for s in g.synthesize_vectors(1000, 0) {
            // geometric residual oracle: the point must sit on a segment
            // between some parent pair at projection coefficient in [0,1]
            let on_some_segment = store.iter().enumerate().any(|(i, a)| {
                store.iter().enumerate().any(|(j, b)| {
                    if i == j {
                        return false;
                    }
                    let seg: Vec<f64> = b.iter().zip(a).map(|(x, y)| x - y).collect();
                    let seg_norm2: f64 = seg.iter().map(|v| v * v).sum();
                    if seg_norm2 < 1e-20 {
                        return false;
                    }
                    let rel: Vec<f64> = s.iter().zip(a).map(|(x, y)| x - y).collect();
                    let t: f64 = rel.iter().zip(&seg).map(|(r, d)| r * d).sum::<f64>() / seg_norm2;
                    if !(-1e-9..=1.0 + 1e-9).contains(&t) {
                        return false;
                    }
                    let resid: f64 = rel
                        .iter()
                        .zip(&seg)
                        .map(|(r, d)| r - t * d)
                        .map(|v| v * v)
                        .sum::<f64>()
                        .sqrt();
                    resid < 1e-9
                })
            });
            assert!(on_some_segment, "point {s:?} not on any parent segment");
        }
    }

    #[test]
    fn counts_are_exact_and_seeded() {
        let g = SmoteGenerator::fit_vectors('N', vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 0.0]], 2, 5).unwrap();
        assert!(g.synthesize_vectors(0, 0).is_empty());
        assert_eq!(g.synthesize_vectors(17, 0).len(), 17);
        assert_eq!(g.synthesize_vectors(17, 0), g.synthesize_vectors(17, 0));
        assert_ne!(g.synthesize_vectors(17, 0), g.synthesize_vectors(17, 1));
    }

    #[test]
    fn bank_counts_and_labels() {
        use crate::synth::synthetic_beats;
        let mut bank = GeneratorBank::new();
        bank.push(SmoteGenerator::fit('N', &synthetic_beats(0, 'N', 10, 0.05, 1), 3, 1).unwrap())
            .unwrap();
        bank.push(SmoteGenerator::fit('V', &synthetic_beats(2, 'V', 10, 0.05, 2), 3, 2).unwrap())
            .unwrap();
        let out = bank.synthesize_bank(&[3, 5], 0).unwrap();
        assert_eq!(out.len(), 8);
        assert_eq!(out.iter().filter(|b| b.label == 'N').count(), 3);
        assert_eq!(out.iter().filter(|b| b.label == 'V').count(), 5);
        assert!(out.iter().all(|b| b.synthetic));
        // duplicate class symbol is rejected
        let dup = SmoteGenerator::fit('N', &synthetic_beats(0, 'N', 5, 0.05, 3), 3, 3).unwrap();
        assert!(bank.push(dup).is_err());
        // empty bank synthesizes nothing
        let empty = GeneratorBank::new();
        assert!(empty.synthesize_bank(&[], 0).unwrap().is_empty());
    }

    proptest! {
        #[test]
        fn convex_hull_preservation(seed in 0u64..500) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let store: Vec<Vec<f64>> = (0..6)
                .map(|_| (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .collect();
            let mins: Vec<f64> = (0..3)
                .map(|d| store.iter().map(|s| s[d]).fold(f64::INFINITY, f64::min))
                .collect();
            let maxs: Vec<f64> = (0..3)
                .map(|d| store.iter().map(|s| s[d]).fold(f64::NEG_INFINITY, f64::max))
                .collect();
            let g = SmoteGenerator::fit_vectors('P', store, 3, seed).unwrap();
            for s in g.synthesize_vectors(50, 0) {
                for d in 0..3 {
                    prop_assert!(s[d] >= mins[d] - 1e-12 && s[d] <= maxs[d] + 1e-12);
                }
            }
        }
    }
}
