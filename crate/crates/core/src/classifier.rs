//! Dense patch-similarity classification.
//!
//! Every support patch is compared with every query patch by cosine
//! similarity. For each class the similarities of all its support images are
//! temperature-scaled and pooled with one LogSumExp, and a softmax over the
//! pooled class logits gives the prediction. Support images that are the
//! query itself (same image id) are masked out of the pool.
//!
//! Two routes compute the same thing: the plain functions
//! ([`similarity_matrix`], [`apply_mask`], [`class_logits`]) work on explicit
//! [`SimilarityBlock`]s; [`graph_class_logits`] is the fused graph kernel the
//! training loop differentiates through.

use crate::encoder::EncodedImage;
use crate::error::{Error, Result};
use crate::numerics::{cosine, logsumexp, softmax, Graph, Real, Tensor, Var};

/// Similarities between one support image's patches (rows) and one query
/// image's patches (columns).
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityBlock<T = f32> {
    pub support_class: usize,
    pub shot: usize,
    pub support_id: u64,
    pub query_id: u64,
    /// `[M, M]` cosine similarities; ignored when `masked`.
    pub values: Tensor<T>,
    pub masked: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassPrediction<T = f32> {
    pub probabilities: Vec<T>,
    /// Pooled per-class logits; `-inf` for a class whose entries are all masked.
    pub logits: Vec<T>,
}

impl<T: Real> ClassPrediction<T> {
    /// Index of the most probable class, lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probabilities.iter().enumerate() {
            if p > self.probabilities[best] {
                best = i;
            }
        }
        best
    }

    pub fn from_logits(logits: Vec<T>) -> Result<Self> {
        if logits.iter().all(|&l| l == T::neg_infinity()) {
            return Err(Error::contract("every class is fully masked"));
        }
        let probabilities = softmax(&logits, T::one())?;
        Ok(Self {
            probabilities,
            logits,
        })
    }
}

/// One similarity block per support image. `support[n]` lists the images of
/// class `n`; classes may hold different numbers of shots.
pub fn similarity_matrix<T: Real>(
    support: &[Vec<EncodedImage<T>>],
    query: &EncodedImage<T>,
) -> Result<Vec<SimilarityBlock<T>>> {
    let (m, d) = (query.patches.rows(), query.patches.cols());
    let mut blocks = Vec::new();
    for (n, shots) in support.iter().enumerate() {
        for (k, s) in shots.iter().enumerate() {
            if s.patches.rows() != m || s.patches.cols() != d {
                return Err(Error::contract(format!(
                    "support patches {:?} vs query patches {:?}",
                    s.patches.shape(),
                    query.patches.shape()
                )));
            }
            let mut values = Vec::with_capacity(m * m);
            for i in 0..m {
                for j in 0..m {
                    values.push(cosine(s.patches.row(i), query.patches.row(j))?);
                }
            }
            blocks.push(SimilarityBlock {
                support_class: n,
                shot: k,
                support_id: s.image_id,
                query_id: query.image_id,
                values: Tensor::matrix(m, m, values)?,
                masked: false,
            });
        }
    }
    Ok(blocks)
}

/// Flags every block whose support image is the query image itself.
pub fn apply_mask<T: Real>(
    mut blocks: Vec<SimilarityBlock<T>>,
    query_id: u64,
) -> Vec<SimilarityBlock<T>> {
    for b in &mut blocks {
        if b.support_id == query_id {
            b.masked = true;
        }
    }
    blocks
}

/// `logit_n = log Σ_k Σ_i Σ_j exp(s_nk^ij / τ)` over unmasked entries, then a
/// softmax over classes. The class count is one more than the largest
/// support class present.
pub fn class_logits<T: Real>(blocks: &[SimilarityBlock<T>], tau: T) -> Result<ClassPrediction<T>> {
    if !(tau > T::zero()) {
        return Err(Error::contract(format!("temperature must be positive, got {tau}")));
    }
    let n_classes = blocks
        .iter()
        .map(|b| b.support_class + 1)
        .max()
        .ok_or_else(|| Error::contract("class_logits without similarity blocks"))?;
    let mut per_class: Vec<Vec<T>> = vec![Vec::new(); n_classes];
    for b in blocks {
        let pool = &mut per_class[b.support_class];
        if b.masked {
            pool.extend(std::iter::repeat(T::neg_infinity()).take(b.values.numel()));
        } else {
            pool.extend(b.values.data().iter().map(|&s| s / tau));
        }
    }
    let logits = per_class
        .iter()
        .map(|pool| {
            if pool.is_empty() {
                Ok(T::neg_infinity())
            } else {
                logsumexp(pool)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    ClassPrediction::from_logits(logits)
}

/// Support/query bookkeeping for [`graph_class_logits`].
#[derive(Clone, Debug)]
pub struct PatchLayout<'a> {
    /// Episode class of each support image, in row order.
    pub support_classes: &'a [usize],
    pub support_ids: &'a [u64],
    pub query_ids: &'a [u64],
    pub patches_per_image: usize,
    pub n_classes: usize,
}

/// Fused graph kernel: `[Q, N]` pooled class logits.
///
/// `support_patches` is `[S·M, D]` and `query_patches` `[Q·M, D]`, image-major.
/// `inv_tau` is the `[1, 1]` node `1/τ`.
pub fn graph_class_logits<T: Real>(
    g: &mut Graph<T>,
    support_patches: Var,
    query_patches: Var,
    inv_tau: Var,
    layout: &PatchLayout<'_>,
) -> Result<Var> {
    let m = layout.patches_per_image;
    let (s, q) = (layout.support_ids.len(), layout.query_ids.len());
    if layout.support_classes.len() != s {
        return Err(Error::contract("one class per support image required"));
    }
    if g.value(support_patches).rows() != s * m || g.value(query_patches).rows() != q * m {
        return Err(Error::contract("patch rows do not match the layout"));
    }
    if let Some(&c) = layout.support_classes.iter().find(|&&c| c >= layout.n_classes) {
        return Err(Error::contract(format!("support class {c} out of range")));
    }
    for (qi, &qid) in layout.query_ids.iter().enumerate() {
        let live = layout.support_ids.iter().any(|&sid| sid != qid);
        if !live {
            return Err(Error::contract(format!(
                "query {qi}: every class is fully masked"
            )));
        }
    }
    let zs = g.normalize_rows(support_patches);
    let zq = g.normalize_rows(query_patches);
    let sim = g.matmul_bt(zs, zq)?;
    let cols = q * m;
    let mut groups = Vec::with_capacity(s * m * cols);
    for si in 0..s {
        let class = layout.support_classes[si];
        let sid = layout.support_ids[si];
        for _ in 0..m {
            for c in 0..cols {
                let qi = c / m;
                groups.push(if layout.query_ids[qi] == sid {
                    None
                } else {
                    Some(qi * layout.n_classes + class)
                });
            }
        }
    }
    g.grouped_lse(sim, inv_tau, groups, (q, layout.n_classes))
}

/// Predictions for already-encoded images through the graph kernel.
///
/// `support` pairs each image with its episode class.
pub fn predict_encoded<T: Real>(
    support: &[(usize, &EncodedImage<T>)],
    queries: &[&EncodedImage<T>],
    n_classes: usize,
    tau: T,
) -> Result<Vec<ClassPrediction<T>>> {
    let first = support
        .first()
        .ok_or_else(|| Error::contract("empty support set"))?;
    let (m, d) = (first.1.patches.rows(), first.1.patches.cols());
    let stack = |imgs: &mut dyn Iterator<Item = &EncodedImage<T>>| -> Result<Tensor<T>> {
        let mut data = Vec::new();
        let mut rows = 0;
        for img in imgs {
            if img.patches.rows() != m || img.patches.cols() != d {
                return Err(Error::contract("encoded images with unequal patch shapes"));
            }
            data.extend_from_slice(img.patches.data());
            rows += m;
        }
        Tensor::matrix(rows, d, data)
    };
    let mut g = Graph::new();
    let sp = g.constant(stack(&mut support.iter().map(|(_, e)| *e))?);
    let qp = g.constant(stack(&mut queries.iter().copied())?);
    let inv_tau = g.constant(Tensor::scalar(T::one() / tau));
    let classes: Vec<usize> = support.iter().map(|(c, _)| *c).collect();
    let sids: Vec<u64> = support.iter().map(|(_, e)| e.image_id).collect();
    let qids: Vec<u64> = queries.iter().map(|e| e.image_id).collect();
    let layout = PatchLayout {
        support_classes: &classes,
        support_ids: &sids,
        query_ids: &qids,
        patches_per_image: m,
        n_classes,
    };
    let logits = graph_class_logits(&mut g, sp, qp, inv_tau, &layout)?;
    let lv = g.value(logits);
    (0..queries.len())
        .map(|qi| ClassPrediction::from_logits(lv.row(qi).to_vec()))
        .collect()
}
