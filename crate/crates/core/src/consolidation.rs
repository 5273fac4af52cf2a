//! Hippocampus/Neocortex dual network: losses, the SGD step on the fast
//! network and the EMA transfer into the slow one.

use serde::{Deserialize, Serialize};

use crate::classifier::{graph_class_logits, predict_encoded, ClassPrediction, PatchLayout};
use crate::encoder::{self, EncoderConfig, ModelState, ModelVars, Params};
use crate::episodic::Episode;
use crate::error::{Error, Result};
use crate::memory::{graph_cls_scores, ClassLabel, ClsMetric, LongTermMemory};
use crate::numerics::{Graph, Real, Tensor, Var, PROB_FLOOR};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConsistencyKind {
    #[default]
    Mse,
    Kl,
}

/// Which loss terms and pathways are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Objective {
    pub consistency: ConsistencyKind,
    pub metric: ClsMetric,
    pub dual_net: bool,
    pub cls_head: bool,
    pub memory_regulation: bool,
}

impl Default for Objective {
    fn default() -> Self {
        Self {
            consistency: ConsistencyKind::Mse,
            metric: ClsMetric::Cosine,
            dual_net: true,
            cls_head: true,
            memory_regulation: true,
        }
    }
}

/// Both networks plus the scalars updated alongside them.
#[derive(Clone, Debug, PartialEq)]
pub struct DualState<T = f32> {
    pub encoder: EncoderConfig,
    pub theta_h: ModelState<T>,
    pub theta_n: ModelState<T>,
    pub alpha: T,
    pub lr: T,
    pub lambda_raw: T,
    pub step_count: u64,
}

/// Gradient of the total loss with respect to everything the step updates.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient<T = f32> {
    pub model: ModelState<T>,
    pub lambda_raw: T,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBundle<T = f32> {
    pub l_ce: T,
    pub l_cons: T,
    pub l_cls: T,
    pub total: T,
    pub lambda_effective: T,
}

fn zip_params<T: Real>(
    config: &EncoderConfig,
    a: &ModelState<T>,
    b: &ModelState<T>,
    f: impl Fn(T, T) -> T,
) -> Result<ModelState<T>> {
    let slots = a
        .slots()
        .into_iter()
        .zip(b.slots())
        .map(|(x, y)| {
            let data = x.data().iter().zip(y.data()).map(|(&u, &v)| f(u, v)).collect();
            Tensor::new(x.shape().to_vec(), data)
        })
        .collect::<Result<Vec<_>>>()?;
    Params::from_slots(config, slots)
}

impl<T: Real> DualState<T> {
    /// Fresh state with `θ_N = θ_H`.
    pub fn new(config: &EncoderConfig, tau_init: f64, lambda_init: f64, alpha: f64, lr: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::config(format!("alpha must be in [0, 1], got {alpha}")));
        }
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::config(format!("learning rate must be finite and ≥ 0, got {lr}")));
        }
        if !lambda_init.is_finite() {
            return Err(Error::config("lambda must be finite"));
        }
        let theta_h = ModelState::init(config, tau_init)?;
        Ok(Self {
            encoder: config.clone(),
            theta_n: theta_h.clone(),
            theta_h,
            alpha: T::of(alpha),
            lr: T::of(lr),
            lambda_raw: T::of(lambda_init),
            step_count: 0,
        })
    }

    pub fn lambda_effective(&self) -> T {
        self.lambda_raw.max(T::zero())
    }

    pub fn check(&self) -> Result<()> {
        self.theta_h.check_layout(&self.encoder)?;
        self.theta_n.check_layout(&self.encoder)
    }

    /// `θ_H ← θ_H − η·∇`, including `λ_raw` and `τ_raw`. A non-finite
    /// gradient is rejected and nothing changes.
    pub fn hippocampus_step(&self, gradient: &Gradient<T>) -> Result<Self> {
        gradient
            .model
            .check_layout(&self.encoder)
            .map_err(|e| Error::contract(format!("gradient layout: {e}")))?;
        if !gradient.model.is_finite() {
            return Err(Error::non_finite("gradient"));
        }
        if !gradient.lambda_raw.is_finite() {
            return Err(Error::non_finite("lambda gradient"));
        }
        let lr = self.lr;
        let theta_h = zip_params(&self.encoder, &self.theta_h, &gradient.model, |p, g| p - lr * g)?;
        Ok(Self {
            theta_h,
            lambda_raw: self.lambda_raw - lr * gradient.lambda_raw,
            step_count: self.step_count + 1,
            ..self.clone()
        })
    }

    /// `θ_N ← α·θ_N + (1 − α)·θ_H`, elementwise over every parameter.
    /// Computed as `θ_N + (1 − α)(θ_H − θ_N)` so equal networks stay equal.
    pub fn neocortex_update(&self) -> Self {
        let b = T::one() - self.alpha;
        let theta_n = zip_params(&self.encoder, &self.theta_n, &self.theta_h, |n, h| n + b * (h - n))
            .expect("networks share a layout");
        Self {
            theta_n,
            ..self.clone()
        }
    }

    /// Neocortex-only predictions for every query of `episode`.
    pub fn infer(&self, episode: &Episode) -> Result<Vec<ClassPrediction<T>>> {
        predict_episode(&self.theta_n, &self.encoder, episode)
    }
}

/// Runs the patch classifier with one network over an episode.
pub fn predict_episode<T: Real>(
    model: &ModelState<T>,
    config: &EncoderConfig,
    episode: &Episode,
) -> Result<Vec<ClassPrediction<T>>> {
    let images: Vec<(Tensor<T>, u64)> = episode
        .support
        .iter()
        .chain(&episode.query)
        .map(|e| (e.image.cast(), e.image_id))
        .collect();
    let refs: Vec<(&Tensor<T>, u64)> = images.iter().map(|(t, id)| (t, *id)).collect();
    let encoded = encoder::encode_many(&refs, model, config)?;
    let (sup, qry) = encoded.split_at(episode.support.len());
    let support: Vec<(usize, &encoder::EncodedImage<T>)> =
        episode.support.iter().map(|s| s.class).zip(sup).collect();
    let queries: Vec<&encoder::EncodedImage<T>> = qry.iter().collect();
    predict_encoded(&support, &queries, episode.n_way(), model.tau())
}

/// Consistency between fast (`y_h`) and slow (`y_n`) predictions. `y_n`
/// acts as a constant: MSE is the mean squared gap per class, KL is
/// `KL(y_n ‖ y_h)` with the probability floor; both are averaged over queries.
pub fn consistency_loss<T: Real>(
    y_h: &[ClassPrediction<T>],
    y_n: &[ClassPrediction<T>],
    kind: ConsistencyKind,
) -> Result<T> {
    if y_h.len() != y_n.len() || y_h.is_empty() {
        return Err(Error::contract(format!(
            "consistency over {} and {} predictions",
            y_h.len(),
            y_n.len()
        )));
    }
    let floor = T::of(PROB_FLOOR);
    let mut total = T::zero();
    for (h, n) in y_h.iter().zip(y_n) {
        let (ph, pn) = (&h.probabilities, &n.probabilities);
        if ph.len() != pn.len() || ph.is_empty() {
            return Err(Error::contract("predictions over different class counts"));
        }
        let term = match kind {
            ConsistencyKind::Mse => {
                ph.iter().zip(pn).map(|(&a, &b)| (a - b) * (a - b)).fold(T::zero(), |s, v| s + v)
                    / T::of(ph.len() as f64)
            }
            ConsistencyKind::Kl => ph
                .iter()
                .zip(pn)
                .filter(|(_, &b)| b > T::zero())
                .map(|(&a, &b)| b * (b.max(floor).ln() - a.max(floor).ln()))
                .fold(T::zero(), |s, v| s + v),
        };
        total = total + term;
    }
    Ok(total / T::of(y_h.len() as f64))
}

/// `L_CE + L_Cons + λ·L_CLS` with `λ = max(λ_raw, 0)`.
pub fn total_loss<T: Real>(l_ce: T, l_cons: T, l_cls: T, lambda_raw: T) -> Result<LossBundle<T>> {
    for (name, v) in [("l_ce", l_ce), ("l_cons", l_cons), ("l_cls", l_cls), ("lambda", lambda_raw)] {
        if !v.is_finite() {
            return Err(Error::non_finite(name));
        }
    }
    let lambda_effective = lambda_raw.max(T::zero());
    Ok(LossBundle {
        l_ce,
        l_cons,
        l_cls,
        total: l_ce + l_cons + lambda_effective * l_cls,
        lambda_effective,
    })
}

/// One episode in graph-ready form.
#[derive(Clone, Debug)]
pub struct EpisodeTensors<T> {
    /// `[M, p²C]` per support image, class-major.
    pub support_patches: Vec<Tensor<T>>,
    pub query_patches: Vec<Tensor<T>>,
    pub support_classes: Vec<usize>,
    pub support_ids: Vec<u64>,
    pub query_ids: Vec<u64>,
    /// Episode class of each query.
    pub targets: Vec<usize>,
    /// Dataset label of each episode class.
    pub labels: Vec<ClassLabel>,
}

impl<T: Real> EpisodeTensors<T> {
    pub fn from_episode(episode: &Episode, config: &EncoderConfig) -> Result<Self> {
        let prep = |e: &crate::episodic::EpisodeImage| encoder::prepare(&e.image.cast::<T>(), config);
        Ok(Self {
            support_patches: episode.support.iter().map(prep).collect::<Result<_>>()?,
            query_patches: episode.query.iter().map(prep).collect::<Result<_>>()?,
            support_classes: episode.support.iter().map(|e| e.class).collect(),
            support_ids: episode.support.iter().map(|e| e.image_id).collect(),
            query_ids: episode.query.iter().map(|e| e.image_id).collect(),
            targets: episode.query.iter().map(|e| e.class).collect(),
            labels: episode.labels.clone(),
        })
    }

    pub fn n_classes(&self) -> usize {
        self.labels.len()
    }
}

/// Nodes of the episode objective.
#[derive(Clone, Copy, Debug)]
pub struct EpisodeGraph {
    pub total: Var,
    pub l_ce: Var,
    pub l_cons: Option<Var>,
    pub l_cls: Option<Var>,
    pub lambda_effective: Var,
    /// `[Q, N]` Hippocampus probabilities.
    pub probabilities: Var,
    /// `[N, D]` class-mean support CLS, present with the CLS head.
    pub c_prime: Option<Var>,
}

/// Builds the full training objective for the fast network on `g`.
///
/// `y_n` holds the `[Q, N]` slow-network probabilities and is required
/// exactly when `objective.dual_net` is set. `memory` is read, never
/// written; with memory regulation off the prototypes are the fresh `C'`.
#[allow(clippy::too_many_arguments)]
pub fn episode_objective<T: Real>(
    g: &mut Graph<T>,
    vars: &ModelVars,
    lambda_raw: Var,
    config: &EncoderConfig,
    episode: &EpisodeTensors<T>,
    y_n: Option<&Tensor<T>>,
    memory: &LongTermMemory<T>,
    objective: &Objective,
) -> Result<EpisodeGraph> {
    let (s, q, n) = (episode.support_patches.len(), episode.query_patches.len(), episode.n_classes());
    if q == 0 || s == 0 {
        return Err(Error::contract("training episodes need support and query images"));
    }
    if episode.targets.len() != q || episode.support_classes.len() != s {
        return Err(Error::contract("episode bookkeeping does not match its images"));
    }
    let mut images = episode.support_patches.clone();
    images.extend(episode.query_patches.iter().cloned());
    let batch = encoder::forward(g, vars, config, &images)?;
    let support_idx: Vec<usize> = (0..s).collect();
    let query_idx: Vec<usize> = (s..s + q).collect();
    let sp = g.gather_rows(batch.tokens, batch.patch_rows(&support_idx))?;
    let qp = g.gather_rows(batch.tokens, batch.patch_rows(&query_idx))?;
    let tau = g.softplus(vars.tau_raw);
    let inv_tau = g.recip(tau);
    let layout = PatchLayout {
        support_classes: &episode.support_classes,
        support_ids: &episode.support_ids,
        query_ids: &episode.query_ids,
        patches_per_image: batch.patches,
        n_classes: n,
    };
    let logits = graph_class_logits(g, sp, qp, inv_tau, &layout)?;
    let probabilities = g.softmax_rows(logits)?;
    let l_ce = g.cross_entropy_rows(probabilities, episode.targets.clone())?;
    let mut terms = vec![l_ce];

    let l_cons = match (objective.dual_net, y_n) {
        (true, Some(y)) => {
            if (y.rows(), y.cols()) != (q, n) {
                return Err(Error::contract(format!(
                    "slow-network predictions {:?} for a [{q}, {n}] episode",
                    y.shape()
                )));
            }
            let term = match objective.consistency {
                ConsistencyKind::Mse => g.mse_const(probabilities, y.clone())?,
                ConsistencyKind::Kl => g.kl_const(probabilities, y.clone())?,
            };
            terms.push(term);
            Some(term)
        }
        (false, None) => None,
        (true, None) => return Err(Error::contract("dual objective without slow predictions")),
        (false, Some(_)) => return Err(Error::contract("slow predictions given to a single network")),
    };

    let lambda_effective = g.relu(lambda_raw);
    let (mut l_cls, mut c_prime) = (None, None);
    if objective.cls_head {
        let mut means = Vec::with_capacity(n);
        for class in 0..n {
            let shots: Vec<usize> = (0..s).filter(|&i| episode.support_classes[i] == class).collect();
            if shots.is_empty() {
                return Err(Error::contract(format!("episode class {class} has no support image")));
            }
            let rows = g.gather_rows(batch.tokens, batch.cls_rows(&shots))?;
            means.push(g.mean_rows(rows)?);
        }
        let cp = g.concat_rows(&means)?;
        let c_opt = if objective.memory_regulation {
            memory.graph_prototypes(g, &episode.labels, cp)?
        } else {
            cp
        };
        let q_cls = g.gather_rows(batch.tokens, batch.cls_rows(&query_idx))?;
        let scores = graph_cls_scores(g, c_opt, q_cls, objective.metric)?;
        let p_c = g.softmax_rows(scores)?;
        let term = g.cross_entropy_rows(p_c, episode.targets.clone())?;
        terms.push(g.mul_scalar(term, lambda_effective)?);
        l_cls = Some(term);
        c_prime = Some(cp);
    }
    let total = g.sum(&terms)?;
    Ok(EpisodeGraph {
        total,
        l_ce,
        l_cons,
        l_cls,
        lambda_effective,
        probabilities,
        c_prime,
    })
}

/// Everything one training step produces before it is applied.
#[derive(Clone, Debug)]
pub struct StepOutcome<T = f32> {
    pub losses: LossBundle<T>,
    pub gradient: Gradient<T>,
    /// Memory after this episode's running-average update.
    pub memory: LongTermMemory<T>,
    pub acc_h: f64,
    pub acc_n: f64,
}

fn accuracy<T: Real>(p: &Tensor<T>, targets: &[usize]) -> f64 {
    let hits = targets
        .iter()
        .enumerate()
        .filter(|&(i, &t)| {
            let row = p.row(i);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == t
        })
        .count();
    hits as f64 / targets.len() as f64
}

/// Forward of both networks, losses and gradients for one episode.
pub fn compute_step<T: Real>(
    state: &DualState<T>,
    memory: &LongTermMemory<T>,
    episode: &Episode,
    objective: &Objective,
) -> Result<StepOutcome<T>> {
    let config = &state.encoder;
    let tensors = EpisodeTensors::<T>::from_episode(episode, config)?;
    let (q, n) = (tensors.query_ids.len(), tensors.n_classes());
    let y_n = if objective.dual_net {
        let preds = predict_episode(&state.theta_n, config, episode)?;
        let data = preds.into_iter().flat_map(|p| p.probabilities).collect();
        Some(Tensor::matrix(q, n, data)?)
    } else {
        None
    };

    let mut g = Graph::new();
    let vars = state.theta_h.to_graph(config, &mut g);
    let lambda = g.param(Tensor::scalar(state.lambda_raw));
    let nodes = episode_objective(&mut g, &vars, lambda, config, &tensors, y_n.as_ref(), memory, objective)?;
    let value = |v: Option<Var>| v.map_or(T::zero(), |v| g.scalar(v));
    let losses = total_loss(g.scalar(nodes.l_ce), value(nodes.l_cons), value(nodes.l_cls), state.lambda_raw)?;
    if !g.scalar(nodes.total).is_finite() {
        return Err(Error::non_finite("total loss"));
    }
    let acc_h = accuracy(g.value(nodes.probabilities), &tensors.targets);
    let acc_n = match &y_n {
        Some(y) => accuracy(y, &tensors.targets),
        None => acc_h,
    };
    let memory = match (objective.memory_regulation, nodes.c_prime) {
        (true, Some(cp)) => memory.regulate(&tensors.labels, g.value(cp))?.0,
        _ => memory.clone(),
    };

    let mut grads = g.backward(nodes.total)?;
    let slots = vars
        .slots()
        .into_iter()
        .zip(state.theta_h.slots())
        .map(|(&v, p)| grads.take(v).reshape(p.shape().to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let gradient = Gradient {
        model: Params::from_slots(config, slots)?,
        lambda_raw: grads.take(lambda).item(),
    };
    Ok(StepOutcome {
        losses,
        gradient,
        memory,
        acc_h,
        acc_n,
    })
}
