//! End-to-end acceptance checks. Each test writes one PASS/FAIL line to
//! stdout (uncaptured) and then asserts.

mod common;

use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use common::{central_difference, fnv1a, relative_error};
use scamnet_core::classifier::{apply_mask, class_logits, predict_encoded, similarity_matrix};
use scamnet_core::consolidation::{
    consistency_loss, episode_objective, predict_episode, ConsistencyKind, DualState,
    EpisodeTensors, Objective,
};
use scamnet_core::encoder::{encode_many, EncodedImage, EncoderConfig, ModelState, ModelVars};
use scamnet_core::episodic::{
    load_dataset, sample_episode, save_dataset, synth_generate, ClassCounts, DataSplits, Split,
    SynthConfig,
};
use scamnet_core::harness::{
    dump_cls, evaluate, load_checkpoint, save_checkpoint, train, ClsKind, EvalReport, TrainConfig,
};
use scamnet_core::memory::{cls_prediction, ClsMetric, LongTermMemory};
use scamnet_core::numerics::{grad, Graph, Tensor, Var};
use scamnet_core::rng::{self, SplitMix64};
use scamnet_core::Result;

fn report(criterion: u32, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "criterion {criterion} ({name}): {} | {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
}

fn normal_tensor(r: &mut SplitMix64, shape: &[usize], std: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| std * rng::normal(r)).collect()).unwrap()
}

fn jitter(model: &ModelState<f64>, config: &EncoderConfig, r: &mut SplitMix64, std: f64) -> ModelState<f64> {
    model.map(config, |t| {
        let noise = normal_tensor(r, t.shape(), std);
        let data = t.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
        Tensor::new(t.shape().to_vec(), data).unwrap()
    })
}

fn toy_data(channels: usize, seed: u64) -> DataSplits {
    synth_generate(&SynthConfig {
        n_classes: ClassCounts { train: 5, val: 0, test: 0 },
        images_per_class: 6,
        image_height: 4,
        image_width: 4,
        channels,
        patch_size: 2,
        sigma_within: 0.5,
        clutter_ratio: 0.25,
        seed,
    })
    .unwrap()
}

fn toy_encoder(channels: usize, depth: usize, seed: u64) -> EncoderConfig {
    EncoderConfig {
        image_height: 4,
        image_width: 4,
        channels,
        patch_size: 2,
        embed_dim: 8,
        depth,
        heads: 2,
        seed,
    }
}

/// Relative-error denominator floor for near-zero gradient entries.
const GRAD_FLOOR: f64 = 1e-6;

#[test]
fn criterion_1_gradient_correctness() {
    let start = Instant::now();
    let mut worst = (0.0f64, 0.0, 0.0);
    let mut checked = 0;
    for case in 0..6u64 {
        let mut r = rng::seeded(rng::stream_seed(1, case));
        let n_way = 2 + (case % 2) as usize;
        let k_shot = 1 + (case / 2 % 2) as usize;
        let depth = (case % 3) as usize;
        let channels = 1 + (case / 3) as usize;
        let config = toy_encoder(channels, depth, case);
        let data = toy_data(channels, 10 + case);
        let ep = sample_episode(data.split(Split::Train).unwrap(), n_way, k_shot, 2, &mut r).unwrap();
        let tensors = EpisodeTensors::<f64>::from_episode(&ep, &config).unwrap();

        let theta_h = jitter(&ModelState::init(&config, 1.0).unwrap(), &config, &mut r, 0.3);
        let theta_n = jitter(&theta_h, &config, &mut r, 0.1);
        let y_n_preds = predict_episode(&theta_n, &config, &ep).unwrap();
        let q = y_n_preds.len();
        let y_n = Tensor::matrix(q, n_way, y_n_preds.into_iter().flat_map(|p| p.probabilities).collect()).unwrap();
        let mut memory = LongTermMemory::new();
        memory.insert(ep.labels[0], normal_tensor(&mut r, &[1, 8], 1.0), 1).unwrap();
        let objective = Objective {
            consistency: if case % 2 == 0 { ConsistencyKind::Mse } else { ConsistencyKind::Kl },
            metric: if case % 3 == 2 { ClsMetric::Euclid } else { ClsMetric::Cosine },
            ..Objective::default()
        };

        let mut params: Vec<Tensor<f64>> = theta_h.slots().into_iter().cloned().collect();
        let n_slots = params.len();
        params.push(Tensor::scalar(0.2 + 0.1 * case as f64));
        let loss = |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
            let vars = ModelVars::from_slots(&config, v[..n_slots].to_vec())?;
            let nodes = episode_objective(g, &vars, v[n_slots], &config, &tensors, Some(&y_n), &memory, &objective)?;
            Ok(nodes.total)
        };
        let (_, grads) = grad(&params, |g, v| loss(g, v)).unwrap();

        let total: usize = params.iter().map(|p| p.numel()).sum();
        let mut coords = vec![(n_slots, 0), (n_slots - 1, 0)];
        while coords.len() < 64 {
            let mut flat = r.below(total);
            let mut t = 0;
            while flat >= params[t].numel() {
                flat -= params[t].numel();
                t += 1;
            }
            coords.push((t, flat));
        }
        for c in coords {
            let numeric = central_difference(&params, c, 1e-4, &loss);
            let analytic = grads[c.0].data()[c.1];
            let rel = relative_error(analytic, numeric, GRAD_FLOOR);
            if rel > worst.0 {
                worst = (rel, analytic, numeric);
            }
            checked += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst.0 < 1e-4 && secs < 60.0;
    report(
        1,
        "gradient correctness",
        pass,
        &format!(
            "{checked} coordinates over 6 configs, max rel err {:.2e} (analytic {:.3e}, numeric {:.3e}), {secs:.1}s",
            worst.0, worst.1, worst.2
        ),
    );
    assert!(pass);
}

trait Below {
    fn below(&mut self, n: usize) -> usize;
}

impl Below for SplitMix64 {
    fn below(&mut self, n: usize) -> usize {
        use rand::Rng;
        self.gen_range(0..n)
    }
}

fn random_encoded(r: &mut SplitMix64, m: usize, d: usize, id: u64) -> EncodedImage<f64> {
    EncodedImage {
        cls: normal_tensor(r, &[1, d], 1.0),
        patches: normal_tensor(r, &[m, d], 1.0),
        image_id: id,
    }
}

fn direct_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn direct_softmax(v: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = v.iter().map(|x| x.exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

#[test]
fn criterion_2_closed_form_oracles() {
    let start = Instant::now();
    let mut r = rng::seeded(2);
    let mut worst_logit = 0.0f64;
    for _ in 0..100 {
        let n = r.below(3) + 2;
        let m = r.below(5) + 1;
        let d = r.below(5) + 2;
        let tau = 0.1 + 1.9 * (r.below(1000) as f64 / 1000.0);
        let mut id = 0;
        let support: Vec<Vec<EncodedImage<f64>>> = (0..n)
            .map(|_| {
                (0..r.below(3) + 1)
                    .map(|_| {
                        id += 1;
                        random_encoded(&mut r, m, d, id)
                    })
                    .collect()
            })
            .collect();
        // Half the queries coincide with a support image of class 0.
        let mut query = random_encoded(&mut r, m, d, 1000);
        if r.below(2) == 0 && support[0].len() > 1 {
            query = support[0][0].clone();
        }
        let blocks = apply_mask(similarity_matrix(&support, &query).unwrap(), query.image_id);
        let plain = class_logits(&blocks, tau).unwrap();
        let flat: Vec<(usize, &EncodedImage<f64>)> =
            support.iter().enumerate().flat_map(|(c, s)| s.iter().map(move |e| (c, e))).collect();
        let fused = predict_encoded(&flat, &[&query], n, tau).unwrap().remove(0);
        for c in 0..n {
            let mut total = 0.0;
            for s in &support[c] {
                if s.image_id == query.image_id {
                    continue;
                }
                for i in 0..m {
                    for j in 0..m {
                        total += (direct_cosine(s.patches.row(i), query.patches.row(j)) / tau).exp();
                    }
                }
            }
            let want = total.ln();
            worst_logit = worst_logit
                .max((plain.logits[c] - want).abs())
                .max((fused.logits[c] - want).abs());
        }
    }

    let mut worst_other = 0.0f64;
    // Consistency: mean over queries of the mean squared probability gap.
    let preds = |r: &mut SplitMix64| -> Vec<scamnet_core::classifier::ClassPrediction<f64>> {
        (0..8)
            .map(|_| {
                let l: Vec<f64> = (0..5).map(|_| rng::normal(r)).collect();
                scamnet_core::classifier::ClassPrediction::from_logits(l).unwrap()
            })
            .collect()
    };
    let (h, nn) = (preds(&mut r), preds(&mut r));
    let mut want = 0.0;
    for (a, b) in h.iter().zip(&nn) {
        want += a.probabilities.iter().zip(&b.probabilities).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 5.0;
    }
    want /= 8.0;
    worst_other = worst_other.max((consistency_loss(&h, &nn, ConsistencyKind::Mse).unwrap() - want).abs());

    // Memory: three visits weight the class means 1/4, 1/4, 1/2.
    let c: Vec<Tensor<f64>> = (0..3).map(|_| normal_tensor(&mut r, &[1, 6], 1.0)).collect();
    let mut mem = LongTermMemory::new();
    let mut outs = Vec::new();
    for ci in &c {
        let (next, reg) = mem.regulate(&[7], ci).unwrap();
        mem = next;
        outs.push(reg.c_opt);
    }
    for j in 0..6 {
        let (a, b, cc) = (c[0].data()[j], c[1].data()[j], c[2].data()[j]);
        worst_other = worst_other
            .max((outs[0].data()[j] - a).abs())
            .max((outs[1].data()[j] - (0.5 * a + 0.5 * b)).abs())
            .max((outs[2].data()[j] - (0.25 * a + 0.25 * b + 0.5 * cc)).abs())
            .max((mem.get(7).unwrap().data()[j] - (0.25 * a + 0.25 * b + 0.5 * cc)).abs());
    }

    // Global-representation head: softmax over metric scores.
    let protos = normal_tensor(&mut r, &[4, 6], 1.0);
    let qv = normal_tensor(&mut r, &[1, 6], 1.0);
    for metric in [ClsMetric::Cosine, ClsMetric::Euclid, ClsMetric::Manhattan] {
        let got = cls_prediction(&protos, qv.data(), metric).unwrap();
        let scores: Vec<f64> = (0..4)
            .map(|n| {
                let (p, q) = (protos.row(n), qv.data());
                match metric {
                    ClsMetric::Cosine => direct_cosine(p, q),
                    ClsMetric::Euclid => -p.iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt(),
                    ClsMetric::Manhattan => -p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>(),
                }
            })
            .collect();
        for (x, y) in got.probabilities.iter().zip(direct_softmax(&scores)) {
            worst_other = worst_other.max((x - y).abs());
        }
    }

    let secs = start.elapsed().as_secs_f64();
    let pass = worst_logit < 1e-5 && worst_other < 1e-6 && secs < 60.0;
    report(
        2,
        "closed-form oracles",
        pass,
        &format!("logits max err {worst_logit:.2e} (100 instances), loss/memory/head max err {worst_other:.2e}, {secs:.1}s"),
    );
    assert!(pass);
}

#[test]
fn criterion_3_ema_law() {
    let config = toy_encoder(2, 1, 3);
    let mut s = DualState::<f32>::new(&config, 1.0, 0.2, 0.99, 2e-4).unwrap();
    s.theta_n = s.theta_n.zeros_like(&config);
    let frozen = s.theta_h.checksum();
    let r0 = s.theta_n.max_abs_diff(&s.theta_h) as f64;
    let (mut prev, mut worst_step, mut worst_closed) = (r0, 0.0f64, 0.0f64);
    for t in 1..=200 {
        s = s.neocortex_update();
        let rt = s.theta_n.max_abs_diff(&s.theta_h) as f64;
        worst_step = worst_step.max((rt - 0.99 * prev).abs());
        worst_closed = worst_closed.max((rt - 0.99f64.powi(t) * r0).abs());
        prev = rt;
    }
    let pass = worst_step < 1e-5 && worst_closed < 1e-5 && s.theta_h.checksum() == frozen;
    report(
        3,
        "EMA law",
        pass,
        &format!("r0 {r0:.4}, per-step err {worst_step:.2e}, closed-form err {worst_closed:.2e} over 200 steps"),
    );
    assert!(pass);
}

#[test]
fn criterion_4_masking_equivalence() {
    let mut worst = 0.0f64;
    for e in 0..50u64 {
        let mut r = rng::seeded(rng::stream_seed(4, e));
        let config = toy_encoder(2, (e % 3) as usize, e);
        let model = jitter(&ModelState::init(&config, 1.0).unwrap(), &config, &mut r, 0.3);
        let data = toy_data(2, 40 + e);
        let ep = sample_episode(data.split(Split::Train).unwrap(), 3, 2, 1, &mut r).unwrap();
        let images: Vec<(Tensor<f64>, u64)> =
            ep.support.iter().chain(&ep.query).map(|i| (i.image.cast(), i.image_id)).collect();
        let refs: Vec<(&Tensor<f64>, u64)> = images.iter().map(|(t, id)| (t, *id)).collect();
        let enc = encode_many(&refs, &model, &config).unwrap();
        let (sup, qry) = enc.split_at(ep.support.len());
        let query = &qry[r.below(qry.len())];
        let base: Vec<(usize, &EncodedImage<f64>)> = ep.support.iter().map(|s| s.class).zip(sup).collect();
        let mut injected = base.clone();
        injected.insert(r.below(base.len() + 1), (r.below(3), query));
        let a = predict_encoded(&base, &[query], 3, 0.7).unwrap().remove(0);
        let b = predict_encoded(&injected, &[query], 3, 0.7).unwrap().remove(0);
        for (x, y) in a.probabilities.iter().zip(&b.probabilities).chain(a.logits.iter().zip(&b.logits)) {
            worst = worst.max((x - y).abs());
        }
    }
    let pass = worst < 1e-6;
    report(4, "masking equivalence", pass, &format!("50 episodes, max deviation {worst:.2e}"));
    assert!(pass);
}

// Ablation study settings.
const ABLATION_SEEDS: u64 = 5;
const ABLATION_STEPS: usize = 2000;
const ABLATION_EVAL_EPISODES: usize = 500;

fn ablation_data(seed: u64) -> DataSplits {
    synth_generate(&SynthConfig {
        n_classes: ClassCounts { train: 20, val: 0, test: 5 },
        images_per_class: 30,
        image_height: 32,
        image_width: 32,
        channels: 3,
        patch_size: 8,
        sigma_within: 0.5,
        clutter_ratio: 0.3,
        seed: rng::stream_seed(500, seed),
    })
    .unwrap()
}

fn ablation_config(seed: u64, dual_net: bool, cls_head: bool, memory_regulation: bool) -> TrainConfig {
    TrainConfig {
        encoder: EncoderConfig {
            image_height: 32,
            image_width: 32,
            channels: 3,
            patch_size: 8,
            embed_dim: 32,
            depth: 1,
            heads: 2,
            seed: rng::stream_seed(501, seed),
        },
        n_way: 5,
        k_shot: 1,
        q_query: 3,
        steps: ABLATION_STEPS,
        lr: 0.0002,
        alpha: 0.99,
        lambda_init: 0.2,
        tau_init: 1.0,
        consistency: ConsistencyKind::Mse,
        cls_metric: ClsMetric::Cosine,
        dual_net,
        cls_head,
        memory_regulation,
        seed: rng::stream_seed(502, seed),
        output_dir: None,
    }
}

struct TrainedFull {
    data: DataSplits,
    state: DualState,
    memory: LongTermMemory,
}

/// The full model on seed 0, shared by the criteria that need a trained model.
fn trained_full() -> &'static TrainedFull {
    static CELL: OnceLock<TrainedFull> = OnceLock::new();
    CELL.get_or_init(|| {
        let data = ablation_data(0);
        let run = train(&ablation_config(0, true, true, true), data.split(Split::Train).unwrap(), None).unwrap();
        TrainedFull {
            data,
            state: run.state,
            memory: run.memory,
        }
    })
}

#[test]
fn criterion_5_ablation_ordering() {
    let start = Instant::now();
    let variants = [
        ("full", true, true, true),
        ("no-MR", true, true, false),
        ("no-CLS", true, false, false),
        ("single", false, true, true),
    ];
    let mut summary = Vec::new();
    for (name, dual, cls, mr) in variants {
        let mut accs = Vec::new();
        for seed in 0..ABLATION_SEEDS {
            let data = ablation_data(seed);
            let state = if (dual, cls, mr, seed) == (true, true, true, 0) {
                trained_full().state.clone()
            } else {
                let cfg = ablation_config(seed, dual, cls, mr);
                train(&cfg, data.split(Split::Train).unwrap(), None).unwrap().state
            };
            let test = data.split(Split::Test).unwrap();
            let r = evaluate(&state, test, 5, 1, 15, ABLATION_EVAL_EPISODES, rng::stream_seed(503, seed)).unwrap();
            accs.push(r.mean);
        }
        let across = EvalReport::from_accuracies(accs).unwrap();
        summary.push((name, across));
    }
    let secs = start.elapsed().as_secs_f64();
    let (full, no_mr, no_cls, single) = (&summary[0].1, &summary[1].1, &summary[2].1, &summary[3].1);
    let ordering = full.mean >= no_mr.mean && no_mr.mean >= no_cls.mean;
    let separated = full.mean - full.ci95 > single.mean + single.ci95;
    let pass = ordering && separated && secs < 1800.0;
    let detail = summary
        .iter()
        .map(|(n, r)| format!("{n} {:.4}±{:.4}", r.mean, r.ci95))
        .collect::<Vec<_>>()
        .join(", ");
    report(
        5,
        "ablation ordering",
        pass,
        &format!("{detail}; ordering {ordering}, dual>single separated {separated}, {secs:.0}s"),
    );
    assert!(pass);
}

fn total_variance(rows: &[&Vec<f32>]) -> f64 {
    let n = rows.len() as f64;
    let d = rows[0].len();
    (0..d)
        .map(|j| {
            let mean = rows.iter().map(|r| r[j] as f64).sum::<f64>() / n;
            rows.iter().map(|r| (r[j] as f64 - mean).powi(2)).sum::<f64>() / n
        })
        .sum()
}

#[test]
fn criterion_6_regulated_tokens_concentrate() {
    let t = trained_full();
    let test = t.data.split(Split::Test).unwrap();
    let rows = dump_cls(&t.state, &t.memory, test, 5, 1, 20, 6, None).unwrap();
    let mut lower = 0;
    let labels = test.labels();
    let mut visits = usize::MAX;
    for &l in &labels {
        let pick = |kind| rows.iter().filter(|r| r.label == l && r.kind == kind).map(|r| &r.values).collect::<Vec<_>>();
        let (raw, reg) = (pick(ClsKind::Raw), pick(ClsKind::Regulated));
        visits = visits.min(raw.len());
        if total_variance(&reg) < total_variance(&raw) {
            lower += 1;
        }
    }
    let frac = lower as f64 / labels.len() as f64;
    let pass = visits >= 20 && frac >= 0.8;
    report(
        6,
        "regulated CLS variance",
        pass,
        &format!("{lower}/{} classes with lower regulated variance, ≥{visits} episodes per class", labels.len()),
    );
    assert!(pass);
}

#[test]
fn criterion_7_protocol_fidelity() {
    let hand = EvalReport::from_accuracies(vec![0.8, 0.6]).unwrap();
    let hand_ok = (hand.mean - 0.7).abs() < 1e-12 && (hand.ci95 - 0.1386).abs() < 5e-5;
    let t = trained_full();
    let test = t.data.split(Split::Test).unwrap();
    let a = evaluate(&t.state, test, 5, 1, 15, 2500, 7).unwrap();
    let b = evaluate(&t.state, test, 5, 1, 15, 2500, 7).unwrap();
    let bits = |r: &EvalReport| {
        let mut v = vec![r.mean.to_bits(), r.ci95.to_bits()];
        v.extend(r.accuracies.iter().map(|x| x.to_bits()));
        v
    };
    let reproducible = bits(&a) == bits(&b);
    let dims = a.episodes == 2500
        && a.accuracies.len() == 2500
        && a.accuracies.iter().all(|x| ((x * 75.0).round() - x * 75.0).abs() < 1e-9);
    let recomputed = EvalReport::from_accuracies(a.accuracies.clone()).unwrap();
    let formula = recomputed.ci95 == a.ci95;
    let pass = hand_ok && reproducible && dims && formula;
    report(
        7,
        "protocol fidelity",
        pass,
        &format!(
            "two-episode example {:.4}±{:.4}; 5-way 1-shot 15-query 2500 episodes {:.4}±{:.4}; bit-reproducible {reproducible}",
            hand.mean, hand.ci95, a.mean, a.ci95
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_8_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let data = ablation_data(8);
    save_dataset(&data, &dir.path().join("data")).unwrap();
    let dataset_ok = load_dataset(&dir.path().join("data")).unwrap() == data;

    let mut cfg = ablation_config(8, true, true, true);
    cfg.steps = 40;
    cfg.lr = 0.01;
    let train_split = data.split(Split::Train).unwrap();
    let run_a = train(&cfg, train_split, Some(&dir.path().join("a"))).unwrap();
    let run_b = train(&cfg, train_split, Some(&dir.path().join("b"))).unwrap();
    let digest = |run: &str| fnv1a(&std::fs::read(dir.path().join(run).join("metrics.csv")).unwrap());
    let metrics_ok = digest("a") == digest("b");

    let ck_dir = dir.path().join("resaved");
    save_checkpoint(&ck_dir, &cfg, &run_a.state, &run_a.memory).unwrap();
    let back = load_checkpoint(&ck_dir).unwrap();
    let test = data.split(Split::Test).unwrap();
    let checkpoint_ok = back.state == run_a.state
        && back.memory == run_a.memory
        && back.state.theta_n.checksum() == run_b.state.theta_n.checksum()
        && evaluate(&back.state, test, 5, 1, 15, 100, 8).unwrap()
            == evaluate(&run_a.state, test, 5, 1, 15, 100, 8).unwrap();
    let pass = dataset_ok && metrics_ok && checkpoint_ok;
    report(
        8,
        "round trips",
        pass,
        &format!(
            "dataset {dataset_ok}, checkpoint {checkpoint_ok}, metrics digest {:016x} reproduced {metrics_ok}",
            digest("a")
        ),
    );
    assert!(pass);
}
