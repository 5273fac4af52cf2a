//! Long-term CLS memory and the global-representation head.
//!
//! Per episode the support CLS tokens are averaged per class into `C'`.
//! A class seen for the first time stores `C'`; afterwards the stored vector
//! becomes `½(stored + C')`. The regulated prototypes `C_opt` are the updated
//! stored vectors, and queries are scored against them by cosine similarity
//! (or a negated distance) followed by a softmax.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::classifier::ClassPrediction;
use crate::error::{Error, Result};
use crate::numerics::{cosine, DistanceKind, Graph, Real, Tensor, Var};

/// Dataset-wide class label; the memory key.
pub type ClassLabel = u32;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClsMetric {
    #[default]
    Cosine,
    Euclid,
    Manhattan,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LongTermMemory<T = f32> {
    entries: BTreeMap<ClassLabel, Tensor<T>>,
    update_counts: BTreeMap<ClassLabel, u64>,
}

/// `C_opt` rows in episode class order.
#[derive(Clone, Debug, PartialEq)]
pub struct RegulatedPrototypes<T = f32> {
    /// `[N, D]`.
    pub c_opt: Tensor<T>,
    /// `true` where the class had no stored entry before this episode.
    pub fresh: Vec<bool>,
}

impl<T: Real> LongTermMemory<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
            update_counts: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Stored `[1, D]` vector for `label`.
    pub fn get(&self, label: ClassLabel) -> Option<&Tensor<T>> {
        self.entries.get(&label)
    }

    /// How many episodes have written `label`.
    pub fn update_count(&self, label: ClassLabel) -> u64 {
        self.update_counts.get(&label).copied().unwrap_or(0)
    }

    /// `(label, vector, update count)` in ascending label order.
    pub fn iter(&self) -> impl Iterator<Item = (ClassLabel, &Tensor<T>, u64)> {
        self.entries
            .iter()
            .map(|(&l, t)| (l, t, self.update_counts[&l]))
    }

    /// Restores an entry, e.g. from a checkpoint.
    pub fn insert(&mut self, label: ClassLabel, vector: Tensor<T>, update_count: u64) -> Result<()> {
        if vector.rows() != 1 || !vector.is_finite() {
            return Err(Error::contract(format!(
                "memory entry {label} must be a finite row vector"
            )));
        }
        if let Some((_, first)) = self.entries.iter().next() {
            if first.cols() != vector.cols() {
                return Err(Error::contract(format!(
                    "memory entry {label} has width {}, expected {}",
                    vector.cols(),
                    first.cols()
                )));
            }
        }
        let width = vector.numel();
        let vector = vector.reshape(vec![1, width])?;
        self.entries.insert(label, vector);
        self.update_counts.insert(label, update_count);
        Ok(())
    }

    pub fn checksum(&self) -> u64 {
        self.iter().fold(0u64, |h, (l, t, c)| {
            crate::rng::mix64(h ^ t.checksum() ^ crate::rng::mix64(((l as u64) << 32) ^ c))
        })
    }

    pub fn cast<U: Real>(&self) -> LongTermMemory<U> {
        LongTermMemory {
            entries: self.entries.iter().map(|(&l, t)| (l, t.cast())).collect(),
            update_counts: self.update_counts.clone(),
        }
    }

    fn check_episode(&self, labels: &[ClassLabel], c_prime: &Tensor<T>) -> Result<()> {
        if c_prime.rows() != labels.len() {
            return Err(Error::contract(format!(
                "{} labels for {} class means",
                labels.len(),
                c_prime.rows()
            )));
        }
        let mut seen = labels.to_vec();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::contract("episode labels must be distinct"));
        }
        for &l in labels {
            if let Some(stored) = self.entries.get(&l) {
                if stored.cols() != c_prime.cols() {
                    return Err(Error::contract(format!(
                        "memory entry {l} has width {}, class mean has {}",
                        stored.cols(),
                        c_prime.cols()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Applies the running-average update for every class of an episode and
    /// returns the updated memory with the regulated prototypes.
    pub fn regulate(
        &self,
        labels: &[ClassLabel],
        c_prime: &Tensor<T>,
    ) -> Result<(Self, RegulatedPrototypes<T>)> {
        self.check_episode(labels, c_prime)?;
        let half = T::of(0.5);
        let mut next = self.clone();
        let mut rows = Vec::with_capacity(c_prime.numel());
        let mut fresh = Vec::with_capacity(labels.len());
        for (n, &l) in labels.iter().enumerate() {
            let c = c_prime.row(n);
            let updated: Vec<T> = match self.entries.get(&l) {
                None => c.to_vec(),
                Some(m) => m.data().iter().zip(c).map(|(&a, &b)| half * (a + b)).collect(),
            };
            fresh.push(!self.entries.contains_key(&l));
            rows.extend_from_slice(&updated);
            next.entries.insert(l, Tensor::row_vector(updated));
            *next.update_counts.entry(l).or_insert(0) += 1;
        }
        let c_opt = Tensor::matrix(labels.len(), c_prime.cols(), rows)?;
        Ok((next, RegulatedPrototypes { c_opt, fresh }))
    }

    /// Graph form of [`LongTermMemory::regulate`]'s prototypes: rows of
    /// `c_prime` for new classes, `½·c' + ½·stored` otherwise. Stored vectors
    /// enter as constants, so gradient reaches only this episode's `C'`.
    pub fn graph_prototypes(
        &self,
        g: &mut Graph<T>,
        labels: &[ClassLabel],
        c_prime: Var,
    ) -> Result<Var> {
        self.check_episode(labels, g.value(c_prime))?;
        let d = g.value(c_prime).cols();
        let half = T::of(0.5);
        let mut rows = Vec::with_capacity(labels.len());
        for (n, &l) in labels.iter().enumerate() {
            let row = g.slice(c_prime, n, 1, 0, d)?;
            rows.push(match self.entries.get(&l) {
                None => row,
                Some(m) => {
                    let scaled = g.scale(row, half);
                    let stored = g.constant(m.map(|v| half * v));
                    g.add(scaled, stored)?
                }
            });
        }
        g.concat_rows(&rows)
    }
}

/// Mean over shots: `[N, K, D] -> [N, D]`.
pub fn class_mean_cls<T: Real>(support_cls: &Tensor<T>) -> Result<Tensor<T>> {
    let &[n, k, d] = support_cls.shape() else {
        return Err(Error::contract(format!(
            "support CLS must be [N, K, D], got {:?}",
            support_cls.shape()
        )));
    };
    if k == 0 {
        return Err(Error::contract("class mean over zero shots"));
    }
    let src = support_cls.data();
    let inv = T::one() / T::of(k as f64);
    let mut out = vec![T::zero(); n * d];
    for c in 0..n {
        let dst = &mut out[c * d..(c + 1) * d];
        for s in 0..k {
            let row = &src[(c * k + s) * d..(c * k + s + 1) * d];
            for (o, &v) in dst.iter_mut().zip(row) {
                *o = *o + v;
            }
        }
        for o in dst {
            *o = *o * inv;
        }
    }
    Tensor::matrix(n, d, out)
}

/// Softmax over per-class scores of one query CLS vector against `C_opt`.
pub fn cls_prediction<T: Real>(
    c_opt: &Tensor<T>,
    query_cls: &[T],
    metric: ClsMetric,
) -> Result<ClassPrediction<T>> {
    if c_opt.cols() != query_cls.len() {
        return Err(Error::contract(format!(
            "prototype width {} vs query width {}",
            c_opt.cols(),
            query_cls.len()
        )));
    }
    let scores = (0..c_opt.rows())
        .map(|n| {
            let row = c_opt.row(n);
            match metric {
                ClsMetric::Cosine => cosine(row, query_cls),
                ClsMetric::Euclid => Ok(-row
                    .iter()
                    .zip(query_cls)
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .fold(T::zero(), |s, v| s + v)
                    .sqrt()),
                ClsMetric::Manhattan => Ok(-row
                    .iter()
                    .zip(query_cls)
                    .map(|(&a, &b)| (a - b).abs())
                    .fold(T::zero(), |s, v| s + v)),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    ClassPrediction::from_logits(scores)
}

/// Graph form of [`cls_prediction`] for a batch: `[Q, N]` scores before the
/// softmax.
pub fn graph_cls_scores<T: Real>(
    g: &mut Graph<T>,
    c_opt: Var,
    query_cls: Var,
    metric: ClsMetric,
) -> Result<Var> {
    match metric {
        ClsMetric::Cosine => {
            let c = g.normalize_rows(c_opt);
            let q = g.normalize_rows(query_cls);
            g.matmul_bt(q, c)
        }
        ClsMetric::Euclid => g.neg_distance(c_opt, query_cls, DistanceKind::Euclid),
        ClsMetric::Manhattan => g.neg_distance(c_opt, query_cls, DistanceKind::Manhattan),
    }
}
