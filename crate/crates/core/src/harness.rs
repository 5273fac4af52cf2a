//! Training loop, evaluation, CLS-token export and checkpoints.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::predict_encoded;
use crate::consolidation::{compute_step, ConsistencyKind, DualState, Objective};
use crate::encoder::{encode_many, EncodedImage, EncoderConfig, ModelState};
use crate::episodic::{sample_episode, Dataset};
use crate::error::{Error, Result};
use crate::memory::{class_mean_cls, ClassLabel, ClsMetric, LongTermMemory};
use crate::numerics::{io, Tensor};
use crate::rng;

fn default_lr() -> f64 {
    0.0002
}
fn default_alpha() -> f64 {
    0.99
}
fn default_lambda() -> f64 {
    0.2
}
fn default_tau() -> f64 {
    1.0
}
fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
    pub steps: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_lambda")]
    pub lambda_init: f64,
    #[serde(default = "default_tau")]
    pub tau_init: f64,
    #[serde(default)]
    pub consistency: ConsistencyKind,
    #[serde(default)]
    pub cls_metric: ClsMetric,
    #[serde(default = "yes")]
    pub dual_net: bool,
    #[serde(default = "yes")]
    pub cls_head: bool,
    #[serde(default = "yes")]
    pub memory_regulation: bool,
    /// Root seed of the episode streams. Weight init uses `encoder.seed`.
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.n_way < 2 || self.k_shot == 0 || self.q_query == 0 {
            return Err(Error::config(format!(
                "training needs N ≥ 2, K ≥ 1, Q ≥ 1; got N={} K={} Q={}",
                self.n_way, self.k_shot, self.q_query
            )));
        }
        if self.memory_regulation && !self.cls_head {
            return Err(Error::config("memory_regulation requires cls_head"));
        }
        if !(self.tau_init > 0.0) || !self.tau_init.is_finite() {
            return Err(Error::config(format!("tau_init must be positive, got {}", self.tau_init)));
        }
        Ok(())
    }

    pub fn objective(&self) -> Objective {
        Objective {
            consistency: self.consistency,
            metric: self.cls_metric,
            dual_net: self.dual_net,
            cls_head: self.cls_head,
            memory_regulation: self.memory_regulation,
        }
    }

    pub fn initial_state(&self) -> Result<DualState> {
        DualState::new(&self.encoder, self.tau_init, self.lambda_init, self.alpha, self.lr)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeMetrics {
    pub step: usize,
    pub l_ce: f32,
    pub l_cons: f32,
    pub l_cls: f32,
    pub total: f32,
    pub acc_h: f64,
    pub acc_n: f64,
    pub lambda_effective: f32,
    pub tau: f32,
    pub wall_ms: f64,
}

pub const METRICS_HEADER: &str = "step,l_ce,l_cons,l_cls,total,acc_h,acc_n,lambda_effective,tau";

impl EpisodeMetrics {
    /// CSV row without the wall clock, so runs compare byte for byte.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.l_ce,
            self.l_cons,
            self.l_cls,
            self.total,
            self.acc_h,
            self.acc_n,
            self.lambda_effective,
            self.tau
        )
    }
}

struct MetricsLog {
    metrics: (PathBuf, BufWriter<File>),
    timing: (PathBuf, BufWriter<File>),
}

impl MetricsLog {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str, header: &str| -> Result<(PathBuf, BufWriter<File>)> {
            let path = dir.join(name);
            let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
            writeln!(w, "{header}").map_err(|e| Error::io(&path, e))?;
            Ok((path, w))
        };
        Ok(Self {
            metrics: open("metrics.csv", METRICS_HEADER)?,
            timing: open("timing.csv", "step,wall_ms")?,
        })
    }

    fn append(&mut self, m: &EpisodeMetrics) -> Result<()> {
        let (p, w) = &mut self.metrics;
        writeln!(w, "{}", m.csv_row()).and_then(|_| w.flush()).map_err(|e| Error::io(&*p, e))?;
        let (p, w) = &mut self.timing;
        writeln!(w, "{},{:.3}", m.step, m.wall_ms).and_then(|_| w.flush()).map_err(|e| Error::io(&*p, e))
    }
}

pub struct TrainRun {
    pub state: DualState,
    pub memory: LongTermMemory,
    pub metrics: Vec<EpisodeMetrics>,
}

/// Episodic training on the classes of `data`.
///
/// With an output directory, `metrics.csv` and `timing.csv` are written and
/// flushed every step and the final state lands in `checkpoint/`. A
/// non-finite loss or update stops the run after checkpointing the last good
/// state.
pub fn train(config: &TrainConfig, data: &Dataset, out: Option<&Path>) -> Result<TrainRun> {
    config.validate()?;
    if data.image_shape != config.encoder.image_shape() {
        return Err(Error::config(format!(
            "dataset images {:?} do not match encoder {:?}",
            data.image_shape,
            config.encoder.image_shape()
        )));
    }
    let objective = config.objective();
    let mut log = out.map(MetricsLog::create).transpose()?;
    let mut state = config.initial_state()?;
    let mut memory = LongTermMemory::new();
    let mut metrics = Vec::with_capacity(config.steps);
    let report_every = (config.steps / 10).max(1);

    for step in 0..config.steps {
        let started = Instant::now();
        let mut r = rng::seeded(rng::stream_seed(config.seed, step as u64));
        let episode = sample_episode(data, config.n_way, config.k_shot, config.q_query, &mut r)?;
        let outcome = compute_step(&state, &memory, &episode, &objective).and_then(|o| {
            let mut next = state.hippocampus_step(&o.gradient)?;
            if !next.theta_h.is_finite() || !next.lambda_raw.is_finite() {
                return Err(Error::non_finite("parameters after step"));
            }
            next = if config.dual_net {
                next.neocortex_update()
            } else {
                DualState {
                    theta_n: next.theta_h.clone(),
                    ..next
                }
            };
            Ok((o, next))
        });
        let (o, next) = match outcome {
            Ok(v) => v,
            Err(e @ Error::NonFinite { .. }) => {
                log::error!("step {step}: {e}; checkpointing the last good state");
                if let Some(dir) = out {
                    save_checkpoint(&dir.join("checkpoint"), config, &state, &memory)?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        state = next;
        memory = o.memory;
        let m = EpisodeMetrics {
            step,
            l_ce: o.losses.l_ce,
            l_cons: o.losses.l_cons,
            l_cls: o.losses.l_cls,
            total: o.losses.total,
            acc_h: o.acc_h,
            acc_n: o.acc_n,
            lambda_effective: state.lambda_effective(),
            tau: state.theta_h.tau(),
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        if let Some(l) = log.as_mut() {
            l.append(&m)?;
        }
        if (step + 1) % report_every == 0 {
            log::info!(
                "step {}/{}: loss {:.4} acc_h {:.3} acc_n {:.3}",
                step + 1,
                config.steps,
                m.total,
                m.acc_h,
                m.acc_n
            );
        }
        metrics.push(m);
    }
    if let Some(dir) = out {
        save_checkpoint(&dir.join("checkpoint"), config, &state, &memory)?;
    }
    Ok(TrainRun {
        state,
        memory,
        metrics,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub mean: f64,
    /// `1.96·σ/√E` with the population standard deviation.
    pub ci95: f64,
    pub accuracies: Vec<f64>,
}

impl EvalReport {
    pub fn from_accuracies(accuracies: Vec<f64>) -> Result<Self> {
        if accuracies.is_empty() {
            return Err(Error::config("evaluation needs at least one episode"));
        }
        let e = accuracies.len() as f64;
        let mean = accuracies.iter().sum::<f64>() / e;
        let var = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / e;
        Ok(Self {
            episodes: accuracies.len(),
            mean,
            ci95: 1.96 * var.sqrt() / e.sqrt(),
            accuracies,
        })
    }
}

const ENCODE_CHUNK: usize = 64;

/// Encodes every image of `data` with `model`, keyed by image id.
fn encode_split(
    model: &ModelState,
    config: &EncoderConfig,
    data: &Dataset,
) -> Result<HashMap<u64, EncodedImage>> {
    let items: Vec<(&Tensor<f32>, u64)> = data
        .positions()
        .into_iter()
        .map(|(c, i)| (&data.classes[c].images[i], data.image_id(c, i)))
        .collect();
    let chunks = items
        .par_chunks(ENCODE_CHUNK)
        .map(|chunk| encode_many(chunk, model, config))
        .collect::<Result<Vec<_>>>()?;
    Ok(chunks
        .into_iter()
        .flatten()
        .map(|e| (e.image_id, e))
        .collect())
}

/// Neocortex-only evaluation over `episodes` seeded episodes.
pub fn evaluate(
    state: &DualState,
    data: &Dataset,
    n_way: usize,
    k_shot: usize,
    q_query: usize,
    episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    if q_query == 0 {
        return Err(Error::config("evaluation needs Q ≥ 1"));
    }
    let cache = encode_split(&state.theta_n, &state.encoder, data)?;
    let tau = state.theta_n.tau();
    let accuracies = (0..episodes)
        .into_par_iter()
        .map(|e| {
            let mut r = rng::seeded(rng::stream_seed(seed, e as u64));
            let ep = sample_episode(data, n_way, k_shot, q_query, &mut r)?;
            let support: Vec<(usize, &EncodedImage)> =
                ep.support.iter().map(|s| (s.class, &cache[&s.image_id])).collect();
            let queries: Vec<&EncodedImage> = ep.query.iter().map(|q| &cache[&q.image_id]).collect();
            let preds = predict_encoded(&support, &queries, n_way, tau)?;
            let hits = preds.iter().zip(&ep.query).filter(|(p, q)| p.argmax() == q.class).count();
            Ok(hits as f64 / ep.query.len() as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_accuracies(accuracies)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClsKind {
    Raw,
    Regulated,
}

impl ClsKind {
    pub fn name(self) -> &'static str {
        match self {
            ClsKind::Raw => "raw",
            ClsKind::Regulated => "regulated",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClsRow {
    pub episode: usize,
    pub label: ClassLabel,
    pub kind: ClsKind,
    pub values: Vec<f32>,
}

/// Class-mean support CLS tokens of the Neocortex before and after memory
/// regulation. The memory evolves across episodes; no parameter changes.
/// Writes a CSV to `out` when given.
#[allow(clippy::too_many_arguments)]
pub fn dump_cls(
    state: &DualState,
    memory: &LongTermMemory,
    data: &Dataset,
    n_way: usize,
    k_shot: usize,
    episodes: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<Vec<ClsRow>> {
    let cache = encode_split(&state.theta_n, &state.encoder, data)?;
    let d = state.encoder.embed_dim;
    let mut memory = memory.clone();
    let mut rows = Vec::with_capacity(episodes * 2 * n_way);
    for e in 0..episodes {
        let mut r = rng::seeded(rng::stream_seed(seed, e as u64));
        let ep = sample_episode(data, n_way, k_shot, 0, &mut r)?;
        let mut cls = Vec::with_capacity(n_way * k_shot * d);
        for n in 0..n_way {
            for s in ep.shots(n) {
                cls.extend_from_slice(cache[&s.image_id].cls.data());
            }
        }
        let c_prime = class_mean_cls(&Tensor::new(vec![n_way, k_shot, d], cls)?)?;
        let (next, reg) = memory.regulate(&ep.labels, &c_prime)?;
        memory = next;
        for (kind, t) in [(ClsKind::Raw, &c_prime), (ClsKind::Regulated, &reg.c_opt)] {
            for (n, &label) in ep.labels.iter().enumerate() {
                rows.push(ClsRow {
                    episode: e,
                    label,
                    kind,
                    values: t.row(n).to_vec(),
                });
            }
        }
    }
    if let Some(path) = out {
        write_cls_csv(path, d, &rows)?;
    }
    Ok(rows)
}

fn write_cls_csv(path: &Path, d: usize, rows: &[ClsRow]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = String::from("episode,class,kind");
    for j in 0..d {
        header.push_str(&format!(",d{j}"));
    }
    let mut write = || -> std::io::Result<()> {
        writeln!(w, "{header}")?;
        for r in rows {
            write!(w, "{},{},{}", r.episode, r.label, r.kind.name())?;
            for v in &r.values {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        w.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

const CHECKPOINT_FORMAT: &str = "scamnet-checkpoint";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MemoryEntry {
    label: ClassLabel,
    update_count: u64,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    format: String,
    version: u32,
    train: TrainConfig,
    alpha: f64,
    lr: f64,
    lambda_raw: f64,
    tau_hippocampus: f64,
    tau_neocortex: f64,
    step_count: u64,
    memory: Vec<MemoryEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub state: DualState,
    pub memory: LongTermMemory,
}

fn write_model(dir: &Path, model: &ModelState) -> Result<()> {
    for (name, t) in model.named() {
        io::write_tensor(&dir.join(format!("{name}.bin")), t)?;
    }
    Ok(())
}

fn read_model(dir: &Path, config: &EncoderConfig) -> Result<ModelState> {
    let template = ModelState::<f32>::init(config, 1.0)?;
    let slots = template
        .named()
        .into_iter()
        .map(|(name, expected)| {
            let path = dir.join(format!("{name}.bin"));
            let t = io::read_tensor(&path)?;
            if t.shape() != expected.shape() {
                return Err(Error::data(
                    &path,
                    format!("shape {:?}, expected {:?}", t.shape(), expected.shape()),
                ));
            }
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    ModelState::from_slots(config, slots)
}

/// Writes both networks, the scalars and the memory under `dir`.
pub fn save_checkpoint(
    dir: &Path,
    config: &TrainConfig,
    state: &DualState,
    memory: &LongTermMemory,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_model(&dir.join("theta_h"), &state.theta_h)?;
    write_model(&dir.join("theta_n"), &state.theta_n)?;
    let mut entries = Vec::with_capacity(memory.len());
    for (label, vector, count) in memory.iter() {
        let file = format!("memory/{label:05}.bin");
        io::write_tensor(&dir.join(&file), vector)?;
        entries.push(MemoryEntry {
            label,
            update_count: count,
            file,
        });
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        version: 1,
        train: TrainConfig {
            encoder: state.encoder.clone(),
            ..config.clone()
        },
        alpha: state.alpha as f64,
        lr: state.lr as f64,
        lambda_raw: state.lambda_raw as f64,
        tau_hippocampus: state.theta_h.tau() as f64,
        tau_neocortex: state.theta_n.tau() as f64,
        step_count: state.step_count,
        memory: entries,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::data(&path, e.to_string()))?;
    if m.format != CHECKPOINT_FORMAT || m.version != 1 {
        return Err(Error::data(&path, format!("unsupported format {} v{}", m.format, m.version)));
    }
    m.train.encoder.validate().map_err(|e| Error::data(&path, e.to_string()))?;
    let enc = m.train.encoder.clone();
    let state = DualState {
        theta_h: read_model(&dir.join("theta_h"), &enc)?,
        theta_n: read_model(&dir.join("theta_n"), &enc)?,
        encoder: enc,
        alpha: m.alpha as f32,
        lr: m.lr as f32,
        lambda_raw: m.lambda_raw as f32,
        step_count: m.step_count,
    };
    let mut memory = LongTermMemory::new();
    for e in m.memory {
        let file = dir.join(&e.file);
        let v = io::read_tensor(&file)?;
        memory
            .insert(e.label, v, e.update_count)
            .map_err(|err| Error::data(&file, err.to_string()))?;
    }
    Ok(Checkpoint {
        config: m.train,
        state,
        memory,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodic::{synth_generate, ClassCounts, DataSplits, Split, SynthConfig};

    fn data() -> DataSplits {
        synth_generate(&SynthConfig {
            n_classes: ClassCounts { train: 4, val: 0, test: 3 },
            images_per_class: 6,
            image_height: 4,
            image_width: 4,
            channels: 2,
            patch_size: 2,
            sigma_within: 0.3,
            clutter_ratio: 0.25,
            seed: 1,
        })
        .unwrap()
    }

    fn config(steps: usize) -> TrainConfig {
        serde_json::from_value(serde_json::json!({
            "encoder": {
                "image_height": 4, "image_width": 4, "channels": 2, "patch_size": 2,
                "embed_dim": 8, "depth": 1, "heads": 2, "seed": 2
            },
            "n_way": 2, "k_shot": 1, "q_query": 2, "steps": steps, "seed": 3, "lr": 0.05
        }))
        .unwrap()
    }

    #[test]
    fn defaults_follow_the_documented_values() {
        let c: TrainConfig = serde_json::from_value(serde_json::json!({
            "encoder": serde_json::to_value(EncoderConfig::default()).unwrap(),
            "n_way": 5, "k_shot": 1, "q_query": 15, "steps": 10, "seed": 0
        }))
        .unwrap();
        assert_eq!((c.lr, c.alpha, c.lambda_init, c.tau_init), (0.0002, 0.99, 0.2, 1.0));
        assert_eq!((c.consistency, c.cls_metric), (ConsistencyKind::Mse, ClsMetric::Cosine));
        assert!(c.dual_net && c.cls_head && c.memory_regulation);
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_flags() {
        let mut v = serde_json::to_value(config(1)).unwrap();
        v["momentum"] = serde_json::json!(0.9);
        assert!(serde_json::from_value::<TrainConfig>(v).is_err());
        let mut c = config(1);
        c.cls_head = false;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.memory_regulation = false;
        c.validate().unwrap();
    }

    #[test]
    fn zero_learning_rate_freezes_both_networks() {
        let d = data();
        let mut c = config(5);
        c.lr = 0.0;
        let run = train(&c, d.split(Split::Train).unwrap(), None).unwrap();
        let init = c.initial_state().unwrap();
        assert_eq!(run.state.theta_h.checksum(), init.theta_h.checksum());
        assert_eq!(run.state.theta_n.checksum(), init.theta_n.checksum());
    }

    #[test]
    fn memory_covers_every_visited_class() {
        let d = data();
        let mut c = config(12);
        c.n_way = 4;
        let run = train(&c, d.split(Split::Train).unwrap(), None).unwrap();
        assert_eq!(run.memory.len(), 4);
        assert_eq!(run.metrics.len(), 12);
        assert!(run.metrics.iter().all(|m| (0.0..=1.0).contains(&m.acc_h) && (0.0..=1.0).contains(&m.acc_n)));
    }

    #[test]
    fn disabling_the_cls_head_freezes_lambda() {
        let d = data();
        let mut c = config(6);
        c.cls_head = false;
        c.memory_regulation = false;
        let run = train(&c, d.split(Split::Train).unwrap(), None).unwrap();
        assert!(run.metrics.iter().all(|m| m.l_cls == 0.0 && m.lambda_effective == 0.2f32));
        assert!(run.memory.is_empty());
    }

    #[test]
    fn single_network_evaluates_the_trained_weights() {
        let d = data();
        let mut c = config(4);
        c.dual_net = false;
        let run = train(&c, d.split(Split::Train).unwrap(), None).unwrap();
        assert_eq!(run.state.theta_n, run.state.theta_h);
        assert!(run.metrics.iter().all(|m| m.l_cons == 0.0 && m.acc_h == m.acc_n));
    }

    #[test]
    fn report_formula() {
        let r = EvalReport::from_accuracies(vec![0.8, 0.6]).unwrap();
        assert!((r.mean - 0.7).abs() < 1e-12);
        assert!((r.ci95 - 1.96 * 0.1 / 2f64.sqrt()).abs() < 1e-12);
        assert!((r.ci95 - 0.1386).abs() < 1e-4);
        let perfect = EvalReport::from_accuracies(vec![1.0; 7]).unwrap();
        assert_eq!((perfect.mean, perfect.ci95), (1.0, 0.0));
        assert!(EvalReport::from_accuracies(vec![]).is_err());
    }

    #[test]
    fn evaluation_matches_direct_inference() {
        let d = data();
        let run = train(&config(3), d.split(Split::Train).unwrap(), None).unwrap();
        let test = d.split(Split::Test).unwrap();
        let report = evaluate(&run.state, test, 3, 1, 2, 6, 11).unwrap();
        for (e, &acc) in report.accuracies.iter().enumerate() {
            let mut r = rng::seeded(rng::stream_seed(11, e as u64));
            let ep = sample_episode(test, 3, 1, 2, &mut r).unwrap();
            let preds = run.state.infer(&ep).unwrap();
            let want = preds.iter().zip(&ep.query).filter(|(p, q)| p.argmax() == q.class).count() as f64 / 6.0;
            assert_eq!(acc, want);
        }
        assert_eq!(report, evaluate(&run.state, test, 3, 1, 2, 6, 11).unwrap());
    }

    #[test]
    fn dump_rows_and_first_visits() {
        let d = data();
        let run = train(&config(2), d.split(Split::Train).unwrap(), None).unwrap();
        let test = d.split(Split::Test).unwrap();
        let rows = dump_cls(&run.state, &run.memory, test, 3, 1, 4, 5, None).unwrap();
        assert_eq!(rows.len(), 4 * 2 * 3);
        for (raw, reg) in rows[..3].iter().zip(&rows[3..6]) {
            assert_eq!((raw.kind, reg.kind), (ClsKind::Raw, ClsKind::Regulated));
            assert_eq!(raw.values, reg.values);
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let d = data();
        let dir = tempfile::tempdir().unwrap();
        let c = config(3);
        let run = train(&c, d.split(Split::Train).unwrap(), Some(dir.path())).unwrap();
        let back = load_checkpoint(&dir.path().join("checkpoint")).unwrap();
        assert_eq!(back.state, run.state);
        assert_eq!(back.memory, run.memory);
        assert_eq!(back.config, c);
        let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(metrics.lines().count(), 4);
    }
}
