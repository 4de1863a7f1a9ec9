//! End-to-end acceptance suite. Prints one line per criterion.
//!
//! `ACCEPTANCE_ONLY=3,4` runs a subset; `ACCEPTANCE_SEEDS=N` changes the
//! number of seeds in the relational checks (default 5).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use anyhow::{ensure, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qeforge::corpus::{build_vocab, encode, NoiseDistribution, QESample};
use qeforge::ensemble::stacking::DEFAULT_RIDGE_ALPHAS;
use qeforge::ensemble::{
    default_grid, gbt_fit, gbt_fit_from, gbt_predict, ridge_fit, ridge_predict, stack_fit, GbtConfig, MetaModel,
    MetaSetting, Node, RegressorKind,
};
use qeforge::estimator::{estimate_backward, estimate_score, estimate_trace, Activation, EstimatorParams};
use qeforge::eval::pearson;
use qeforge::nn::ops::{sigmoid_backward, sigmoid_vec};
use qeforge::nn::{affine, affine_backward, check_gradients, check_model, softmax, softmax_backward};
use qeforge::nn::{LstmStack, Parameterized, Tensor2};
use qeforge::predictor::attention::attend_backward;
use qeforge::predictor::checkpoint::{from_bytes, read_manifest, to_bytes};
use qeforge::predictor::{
    attend, ce_loss, encode_pairs, evaluate_predictor, extract_qefv, load_checkpoint, nce_loss, neg_loss, pair_loss,
    save_checkpoint, scaled_dot_attention, train_predictor, Architecture, Mask, Objective, Predictor,
    PredictorHyper, PredictorParams, PredictorTrainConfig,
};
use qeforge::synthetic::{copy_corpus, Benchmark, BenchmarkConfig, PairSizes};
use qeforge::Error;
use qeforge_cli::data::{Dataset, PairSplits};
use qeforge_cli::experiment::{evaluate, fit_estimator, fit_predictor, Init, DEV_PREDICTIONS};
use qeforge_cli::{ExperimentConfig, Session};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome {
        passed,
        detail: detail.into(),
    })
}

/// Shared state across criteria: a scratch directory and the seed count.
struct Ctx {
    root: tempfile::TempDir,
    seeds: u64,
}

impl Ctx {
    fn dir(&self, name: &str) -> PathBuf {
        self.root.path().join(name)
    }
}

type Criterion = fn(&Ctx) -> Result<Outcome>;

const CRITERIA: [(u32, &str, Criterion); 14] = [
    (1, "gradient suite", gradient_suite),
    (2, "hand-computed loss oracles", loss_oracles),
    (3, "memorization", memorization),
    (4, "estimator signal", estimator_signal),
    (5, "QEFV contract", qefv_contract),
    (6, "transfer vs random init", transfer_check),
    (7, "data-size check", data_size_check),
    (8, "ridge oracle", ridge_oracle),
    (9, "boosted-tree oracles", gbt_oracles),
    (10, "stacking dominance", stacking_dominance),
    (11, "ensemble vs best member", ensemble_check),
    (12, "pearson oracle", pearson_oracle),
    (13, "determinism", determinism),
    (14, "checkpoint round-trip", checkpoint_round_trip),
];

fn main() {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let seeds = std::env::var("ACCEPTANCE_SEEDS")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(5);
    let ctx = Ctx {
        root: tempfile::tempdir().unwrap(),
        seeds,
    };
    let total = Instant::now();
    let mut failed = Vec::new();
    for (id, name, run) in CRITERIA {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let result = run(&ctx);
        let secs = start.elapsed().as_secs_f64();
        let (passed, detail) = match result {
            Ok(o) => (o.passed, o.detail),
            Err(e) => (false, format!("error: {e:#}")),
        };
        println!(
            "criterion {id:>2} {:<4} {name} ({secs:.1}s): {detail}",
            if passed { "PASS" } else { "FAIL" }
        );
        if !passed {
            failed.push(id);
        }
    }
    println!("acceptance finished in {:.1}s", total.elapsed().as_secs_f64());
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- 1

fn weighted_sum(t: &Tensor2, w: &Tensor2) -> f64 {
    t.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

fn small_predictor(arch: Architecture, rng: &mut ChaCha8Rng) -> Result<PredictorParams> {
    let hyper = PredictorHyper {
        architecture: arch,
        layers: 2,
        hidden: 4,
        emb_dim: if arch == Architecture::Rnn { 3 } else { 4 },
        heads: 2,
        ff_dim: 6,
        dropout: 0.5,
    };
    let fp = |s: &str| qeforge::corpus::VocabFingerprint(s.into());
    let mut p = PredictorParams::with_sizes(hyper, 7, 9, fp("src"), fp("tgt"), rng)?;
    p.scale_params(4.0);
    Ok(p)
}

fn gradient_suite(_: &Ctx) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: Vec<(String, f64)> = Vec::new();

    // affine
    let x = Tensor2::uniform(3, 4, 1.0, &mut rng);
    let w = Tensor2::uniform(4, 2, 1.0, &mut rng);
    let b = Tensor2::uniform(1, 2, 1.0, &mut rng);
    let probe = Tensor2::uniform(3, 2, 1.0, &mut rng);
    let g = affine_backward(&x, &w, &probe)?;
    let r = check_gradients(
        &mut [x, w, b],
        &[g.dx, g.dw, Tensor2::row_vector(&g.db)],
        |p| weighted_sum(&affine(&p[0], &p[1], p[2].data()).unwrap(), &probe),
    );
    worst.push(("affine".into(), r.max_rel_error));

    // softmax
    let z = Tensor2::uniform(1, 5, 2.0, &mut rng);
    let probe = Tensor2::uniform(1, 5, 1.0, &mut rng);
    let dz = softmax_backward(&softmax(z.data()), probe.data());
    let r = check_gradients(&mut [z], &[Tensor2::row_vector(&dz)], |p| {
        softmax(p[0].data()).iter().zip(probe.data()).map(|(a, b)| a * b).sum()
    });
    worst.push(("softmax".into(), r.max_rel_error));

    // sigmoid
    let z = Tensor2::uniform(1, 6, 3.0, &mut rng);
    let probe = Tensor2::uniform(1, 6, 1.0, &mut rng);
    let dz: Vec<f64> = sigmoid_vec(z.data())
        .iter()
        .zip(probe.data())
        .map(|(&y, &d)| sigmoid_backward(y, d))
        .collect();
    let r = check_gradients(&mut [z], &[Tensor2::row_vector(&dz)], |p| {
        sigmoid_vec(p[0].data()).iter().zip(probe.data()).map(|(a, b)| a * b).sum()
    });
    worst.push(("sigmoid".into(), r.max_rel_error));

    // LSTM with BPTT over three steps and two layers
    let mut stack = LstmStack::uniform(3, 4, 2, 0.5, &mut rng);
    let xs = Tensor2::uniform(3, 3, 1.0, &mut rng);
    let probe = Tensor2::uniform(3, 4, 1.0, &mut rng);
    let (_, cache) = stack.run(&xs)?;
    let mut grads = stack.zeros_like();
    stack.backward(&cache, &probe, &mut grads);
    let r = check_model(&mut stack, &grads, |m| weighted_sum(&m.run(&xs).unwrap().0, &probe));
    worst.push(("lstm".into(), r.max_rel_error));

    // attention, unmasked and causal
    for mask in [Mask::None, Mask::Causal] {
        let q = Tensor2::uniform(3, 4, 1.0, &mut rng);
        let k = Tensor2::uniform(3, 4, 1.0, &mut rng);
        let v = Tensor2::uniform(3, 2, 1.0, &mut rng);
        let probe = Tensor2::uniform(3, 2, 1.0, &mut rng);
        let a = attend(&q, &k, &v, mask)?;
        let g = attend_backward(&q, &k, &v, &a.weights, &probe)?;
        let r = check_gradients(&mut [q, k, v], &[g.dq, g.dk, g.dv], |p| {
            weighted_sum(&attend(&p[0], &p[1], &p[2], mask).unwrap().output, &probe)
        });
        worst.push((format!("attention {mask:?}"), r.max_rel_error));
    }

    // full predictor under each objective, both architectures
    const SRC: [usize; 5] = [2, 4, 5, 6, 3];
    const TGT: [usize; 5] = [2, 4, 7, 8, 3];
    let noise = NoiseDistribution::from_counts(vec![0.0, 0.0, 0.0, 0.0, 2.0, 1.0, 1.0, 3.0, 1.0])?;
    let negatives = vec![vec![5, 8], vec![4, 6], vec![6, 6]];
    for arch in [Architecture::Rnn, Architecture::Transformer] {
        let mut params = small_predictor(arch, &mut rng)?;
        for (label, objective) in [
            ("ce", Objective::CrossEntropy),
            (
                "nce",
                Objective::Nce {
                    noise: &noise,
                    negatives: &negatives,
                },
            ),
            ("neg", Objective::Neg { negatives: &negatives }),
        ] {
            let mut grads = params.zeros_like();
            pair_loss(&params, &SRC, &TGT, objective, None, Some(&mut grads))?;
            let r = check_model(&mut params, &grads, |p| {
                pair_loss(p, &SRC, &TGT, objective, None, None).unwrap().loss
            });
            worst.push((format!("predictor {arch:?} {label}"), r.max_rel_error));
        }
    }

    // estimator on QEFVs from a frozen predictor
    let src_vocab = build_vocab([["a", "b", "c", "d"]], 1, 100)?;
    let tgt_vocab = build_vocab([["p", "q", "r", "s"]], 1, 100)?;
    let mut hyper = PredictorHyper::rnn().with_hidden(3);
    hyper.emb_dim = 3;
    let mut pp = PredictorParams::new(hyper, &src_vocab, &tgt_vocab, &mut rng)?;
    pp.scale_params(5.0);
    let predictor = Predictor::new(pp, src_vocab, tgt_vocab)?;
    let samples = [
        (vec!["a", "b", "c"], vec!["p", "q"], 0.3),
        (vec!["d", "a"], vec!["r", "s", "p"], -0.5),
        (vec!["c"], vec!["q", "q", "s", "r"], 1.2),
    ];
    let data = samples
        .iter()
        .map(|(s, t, y)| {
            let sample = QESample::new(
                s.iter().map(|w| w.to_string()).collect(),
                t.iter().map(|w| w.to_string()).collect(),
                *y,
                "en-de",
            )?;
            Ok((predictor.qefv(&sample)?, *y))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut est = EstimatorParams::new(predictor.feature_dim(), 3, Activation::Identity, &mut rng);
    est.scale_params(5.0);
    let mut grads = est.zeros_like();
    for (q, y) in &data {
        let tr = estimate_trace(&est, q)?;
        estimate_backward(&est, &tr, 2.0 * (tr.score - y), &mut grads);
    }
    let r = check_model(&mut est, &grads, |e| {
        data.iter()
            .map(|(q, y)| (estimate_score(e, q).unwrap() - y).powi(2))
            .sum()
    });
    worst.push(("estimator".into(), r.max_rel_error));

    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let bad: Vec<&(String, f64)> = worst.iter().filter(|w| !(w.1 < 1e-4)).collect();
    outcome(
        bad.is_empty(),
        format!("{} checks, max relative error {max:.2e}; failing {bad:?}", worst.len()),
    )
}

// ---------------------------------------------------------------- 2

fn loss_oracles(_: &Ctx) -> Result<Outcome> {
    let ce = ce_loss(&[0.25; 4], 2)?.loss;
    let zero_w = Tensor2::zeros(2, 6);
    let state = [0.3, -0.7];
    let noise = NoiseDistribution::from_counts(vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0])?;
    let nce = nce_loss(&state, &zero_w, 4, &[5], &noise)?.loss;
    let neg = neg_loss(&state, &zero_w, 4, &[5])?.loss;
    let q = Tensor2::from_rows(&[vec![1.0, 0.0]])?;
    let kv = Tensor2::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]])?;
    let att = attend(&q, &kv, &kv, Mask::None)?;
    let out = scaled_dot_attention(&q, &kv, &kv)?;
    let expected_nce = -((2.0f64 / 3.0).ln() + (1.0f64 / 3.0).ln());
    let checks = [
        ("ce", (ce - 4f64.ln()).abs() < 1e-12),
        ("nce", (nce - 1.5041).abs() < 1e-3 && (nce - expected_nce).abs() < 1e-12),
        ("neg", (neg - 2.0 * 2f64.ln()).abs() < 1e-6),
        (
            "attention",
            (att.weights.get(0, 0) - 0.6698).abs() < 1e-4
                && (att.weights.get(0, 1) - 0.3302).abs() < 1e-4
                && (out.get(0, 0) - 0.6698).abs() < 1e-4
                && (out.get(0, 1) - 0.3302).abs() < 1e-4,
        ),
    ];
    let failing: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    outcome(
        failing.is_empty(),
        format!(
            "ce {ce:.6}, nce {nce:.6}, neg {neg:.6}, attention [{:.4}, {:.4}]; failing {failing:?}",
            att.weights.get(0, 0),
            att.weights.get(0, 1)
        ),
    )
}

// ---------------------------------------------------------------- 3

fn memorization(_: &Ctx) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let corpus = copy_corpus(50, 20, 4, 8, &mut rng);
    let pairs = || corpus.iter().map(|p| (&p.source_tokens, &p.target_tokens));
    let sv = build_vocab(pairs().map(|p| p.0), 1, 100)?;
    let tv = build_vocab(pairs().map(|p| p.1), 1, 100)?;
    let enc = encode_pairs(pairs(), &sv, &tv);
    let mut hyper = PredictorHyper::rnn().with_hidden(32);
    hyper.emb_dim = 32;
    hyper.dropout = 0.0;
    let init = PredictorParams::new(hyper, &sv, &tv, &mut rng)?;
    let cfg = PredictorTrainConfig {
        epochs: 200,
        batch_size: 10,
        ..Default::default()
    };
    let (params, log) = train_predictor(init, &cfg, None, &enc, &enc, &mut rng)?;
    let acc = evaluate_predictor(&params, &enc)?.accuracy;
    let first = log.iter().find(|l| l.valid_accuracy > 0.99).map(|l| l.epoch);
    outcome(
        acc > 0.99,
        format!("masked-token accuracy {acc:.4}; first epoch above 99%: {first:?}"),
    )
}

// ---------------------------------------------------------------- 4

fn estimator_signal(_: &Ctx) -> Result<Outcome> {
    let bench = Benchmark::generate(
        &BenchmarkConfig {
            pairs: vec![PairSizes::new("et-en", 700, 100, 0, 500, 0)],
            ..Default::default()
        },
        0,
    )?;
    let pair = bench.pair("et-en")?;
    let mut data = Dataset::default();
    data.qe.insert(
        "et-en".into(),
        PairSplits {
            train: pair.train.clone(),
            valid: pair.valid.clone(),
            test: Vec::new(),
        },
    );
    data.augment.insert("et-en".into(), pair.parallel.clone());
    let mut cfg = ExperimentConfig::desk_scale();
    cfg.predictor.training.epochs = 40;
    cfg.estimator.epochs = 50;
    let vocabs = data.vocabs(&cfg)?;
    let dir = tempfile::tempdir()?;
    let (predictor, _) = fit_predictor(&cfg, &Init::Random, pair.parallel.len(), &data, &vocabs, dir.path(), "c4")?;
    let (est, _) = fit_estimator(&cfg, &predictor, &data, dir.path(), "c4")?;
    let preds = qeforge::estimator::predict_batch(&predictor, &est, &pair.valid)?;
    let r = evaluate(&preds, &pair.valid)?.get("et-en").context("et-en score")?.r;
    outcome(r > 0.9, format!("validation pearson {r:.4} after 50 estimator epochs"))
}

// ---------------------------------------------------------------- 5

fn qefv_contract(_: &Ctx) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let sv = build_vocab([["das", "haus", "ist", "klein"]], 1, 100)?;
    let tv = build_vocab([["the", "house", "is", "small"]], 1, 100)?;
    let x = encode(&["das", "haus", "ist", "klein"], &sv);
    let y = encode(&["the", "house", "is", "small", "house"], &tv);

    let mut small = PredictorParams::new(PredictorHyper::rnn().with_hidden(6), &sv, &tv, &mut rng)?;
    let house = tv.id("house");
    for r in 0..small.output.rows() {
        small.output.set(r, house, 1.0);
    }
    let q = extract_qefv(&small, &x, &y)?;
    let hidden = small.forward(&x.ids, &y.ids, None)?.hidden;
    let identity = [2usize, 5]
        .iter()
        .all(|&j| q.vectors.row(j - 1) == hidden.row(j - 1));

    let full = PredictorParams::new(PredictorHyper::rnn(), &sv, &tv, &mut rng)?;
    let q = extract_qefv(&full, &x, &y)?;
    let shape = (q.len(), q.dim());
    outcome(
        identity && shape == (5, 800),
        format!("identity column exact: {identity}; shape under defaults {shape:?}"),
    )
}

// ---------------------------------------------------------------- 6

/// Fraction-of-seeds check: `better(seed)` returns (candidate, reference).
fn paired_seeds(ctx: &Ctx, mut run: impl FnMut(u64) -> Result<(f64, f64)>) -> Result<(usize, Vec<String>)> {
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..ctx.seeds {
        let (cand, reference) = run(seed)?;
        if cand >= reference {
            wins += 1;
        }
        lines.push(format!("seed {seed}: {cand:.4} vs {reference:.4}"));
    }
    Ok((wins, lines))
}

fn needed(seeds: u64) -> usize {
    // 4 of 5, scaled for other seed counts.
    ((seeds * 4).div_ceil(5)) as usize
}

fn transfer_check(ctx: &Ctx) -> Result<Outcome> {
    let (wins, lines) = paired_seeds(ctx, |seed| {
        let bench = Benchmark::generate(
            &BenchmarkConfig {
                pairs: vec![
                    PairSizes::new("ro-de", 0, 0, 20, 500, 0),
                    PairSizes::new("en-de", 100, 100, 0, 0, 0),
                ],
                ..Default::default()
            },
            seed,
        )?;
        let b = bench.pair("en-de")?;
        let mut data = Dataset::default();
        data.qe.insert(
            "en-de".into(),
            PairSplits {
                train: b.train.clone(),
                valid: b.valid.clone(),
                test: Vec::new(),
            },
        );
        data.pretrain.insert("ro-de".into(), bench.pair("ro-de")?.parallel.clone());
        let mut cfg = ExperimentConfig::desk_scale();
        cfg.seed = seed;
        let vocabs = data.vocabs(&cfg)?;
        let score = |init: Init| -> Result<f64> {
            let dir = tempfile::tempdir()?;
            let (predictor, _) = fit_predictor(&cfg, &init, 0, &data, &vocabs, dir.path(), "c6")?;
            let (est, _) = fit_estimator(&cfg, &predictor, &data, dir.path(), "c6")?;
            let preds = qeforge::estimator::predict_batch(&predictor, &est, &b.valid)?;
            Ok(evaluate(&preds, &b.valid)?.get("en-de").context("en-de score")?.r)
        };
        Ok((score(Init::Pretrain("ro-de".into()))?, score(Init::Random)?))
    })?;
    outcome(
        wins >= needed(ctx.seeds),
        format!("transferred ≥ random in {wins}/{} seeds [{}]", ctx.seeds, lines.join("; ")),
    )
}

// ---------------------------------------------------------------- 7

/// A smaller version of the default benchmark so the relational checks fit
/// the time budget: 200 QE training sentences per high-resource pair and
/// 300 parallel sentences per pair.
fn reduced_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk_scale();
    cfg.seed = seed;
    let mut pairs: Vec<PairSizes> = ["et-en", "ne-en", "ro-en"]
        .iter()
        .map(|p| PairSizes::new(p, 200, 100, 0, 300, 0))
        .collect();
    pairs.extend(["en-de", "en-zh"].iter().map(|p| PairSizes::new(p, 100, 100, 0, 300, 100)));
    cfg.data.synthetic.pairs = pairs;
    cfg
}

fn session(ctx: &Ctx, seed: u64) -> Result<Session> {
    Session::new(reduced_config(seed), &ctx.dir(&format!("reduced-{seed}")))
}

fn zh_de(report: &qeforge::eval::EvalReport) -> Result<f64> {
    Ok(report.get("zh+de").context("zh+de score")?.r)
}

fn data_size_check(ctx: &Ctx) -> Result<Outcome> {
    let (wins, lines) = paired_seeds(ctx, |seed| {
        let s = session(ctx, seed)?;
        let base = s.run_or_reuse("baseline")?;
        let d2 = s.run_or_reuse("D2")?;
        Ok((zh_de(&d2.report)?, zh_de(&base.report)?))
    })?;
    outcome(
        wins >= needed(ctx.seeds),
        format!("zh+de pearson D2 ≥ baseline in {wins}/{} seeds [{}]", ctx.seeds, lines.join("; ")),
    )
}

// ---------------------------------------------------------------- 8

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect()
}

/// Normal-equation solve with nalgebra's LU on centered data.
fn dense_ridge(x: &[Vec<f64>], y: &[f64], alpha: f64) -> Option<(Vec<f64>, Vec<f64>, f64)> {
    let (n, m) = (x.len(), x[0].len());
    let means: Vec<f64> = (0..m).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let xc = nalgebra::DMatrix::from_fn(n, m, |i, j| x[i][j] - means[j]);
    let yc = nalgebra::DVector::from_fn(n, |i, _| y[i] - y_mean);
    let a = xc.transpose() * &xc + nalgebra::DMatrix::identity(m, m) * alpha;
    let w = a.lu().solve(&(xc.transpose() * yc))?;
    Some((w.iter().copied().collect(), means, y_mean))
}

fn ridge_oracle(_: &Ctx) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut max_diff: f64 = 0.0;
    for trial in 0..50 {
        let x = random_matrix(&mut rng, 20, 5);
        let y: Vec<f64> = (0..20).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let alpha = [0.0, 0.5, 1.0, 10.0, 0.01][trial % 5];
        let model = ridge_fit(&x, &y, alpha)?;
        let (w, _, y_mean) = dense_ridge(&x, &y, alpha).context("singular oracle system")?;
        let ours = ridge_predict(&model, &x)?;
        let oracle: Vec<f64> = x
            .iter()
            .map(|r| {
                let means: Vec<f64> = (0..5).map(|j| x.iter().map(|q| q[j]).sum::<f64>() / 20.0).collect();
                r.iter().zip(&means).zip(&w).map(|((v, m), wj)| (v - m) * wj).sum::<f64>() + y_mean
            })
            .collect();
        for (a, b) in model.weights.iter().zip(&w).chain(ours.iter().zip(&oracle)) {
            max_diff = max_diff.max((a - b).abs());
        }
        max_diff = max_diff.max((model.intercept - y_mean).abs());
    }
    let in_grid = DEFAULT_RIDGE_ALPHAS.contains(&0.5)
        && default_grid(RegressorKind::Ridge).contains(&MetaSetting::Ridge { alpha: 0.5 });
    outcome(
        max_diff <= 1e-8 && in_grid,
        format!("max deviation from dense solve {max_diff:.2e} over 50 problems; alpha 0.5 in default grid: {in_grid}"),
    )
}

// ---------------------------------------------------------------- 9

fn leaf_weights(node: &Node, out: &mut Vec<f64>) {
    match node {
        Node::Leaf { weight } => out.push(*weight),
        Node::Split { left, right, .. } => {
            leaf_weights(left, out);
            leaf_weights(right, out);
        }
    }
}

fn gbt_oracles(_: &Ctx) -> Result<Outcome> {
    let x: Vec<Vec<f64>> = [0.0, 0.0, 1.0, 1.0].iter().map(|&v| vec![v]).collect();
    let y = [1.0, 1.0, 3.0, 3.0];
    let one = |depth| GbtConfig {
        rounds: 1,
        eta: 1.0,
        lambda: 1.0,
        gamma: 0.0,
        max_depth: depth,
    };
    let mut single = Vec::new();
    leaf_weights(&gbt_fit_from(&x, &y, &one(0), 0.0)?.trees[0].root, &mut single);
    let mut split = Vec::new();
    leaf_weights(&gbt_fit_from(&x, &y, &one(1), 0.0)?.trees[0].root, &mut split);
    let leaves_ok = single.len() == 1
        && (single[0] - 1.6).abs() <= 1e-12
        && split.len() == 2
        && (split[0] - 2.0 / 3.0).abs() <= 1e-12
        && (split[1] - 2.0).abs() <= 1e-12;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random_matrix(&mut rng, 50, 4);
    let y: Vec<f64> = x
        .iter()
        .map(|r| r[0].sin() + r[1] * r[2] + rng.gen_range(-0.3..0.3))
        .collect();
    let cfg = GbtConfig {
        rounds: 100,
        eta: 0.1,
        gamma: 0.0,
        ..Default::default()
    };
    let model = gbt_fit(&x, &y, &cfg)?;
    let mut mses = Vec::with_capacity(101);
    for t in 0..=model.trees.len() {
        let mut partial = model.clone();
        partial.trees.truncate(t);
        let pred = gbt_predict(&partial, &x)?;
        mses.push(pred.iter().zip(&y).map(|(p, g)| (p - g).powi(2)).sum::<f64>() / y.len() as f64);
    }
    let monotone = model.trees.len() == 100 && mses.windows(2).all(|w| w[1] <= w[0]);
    outcome(
        leaves_ok && monotone,
        format!(
            "leaves {single:?} and {split:?}; MSE {:.4} → {:.4} non-increasing over {} rounds: {monotone}",
            mses[0],
            mses[mses.len() - 1],
            model.trees.len()
        ),
    )
}

// ---------------------------------------------------------------- 10

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / a.len() as f64
}

/// Training MSE of the best affine map `a·f + b` from one feature.
fn affine_calibrated_mse(f: &[f64], y: &[f64]) -> f64 {
    let n = f.len() as f64;
    let (mf, my) = (f.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = f.iter().zip(y).map(|(a, b)| (a - mf) * (b - my)).sum();
    let sxx: f64 = f.iter().map(|a| (a - mf).powi(2)).sum();
    let slope = sxy / sxx;
    let fitted: Vec<f64> = f.iter().map(|a| my + slope * (a - mf)).collect();
    mse(&fitted, y)
}

/// Rows of `[m1..mM, src_len, tgt_len, ratio]` with noisy sub-model scores.
fn stacking_rows(rng: &mut ChaCha8Rng, n: usize, models: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let gold: f64 = rng.gen_range(-2.0..2.0);
        let mut row: Vec<f64> = (0..models)
            .map(|m| gold * (0.5 + 0.2 * m as f64) + rng.gen_range(-1.0..1.0))
            .collect();
        let (s, t) = (rng.gen_range(4..12) as f64, rng.gen_range(4..12) as f64);
        row.extend([s, t, t / s]);
        x.push(row);
        y.push(gold);
    }
    (x, y)
}

fn stacking_dominance(_: &Ctx) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut dominated = true;
    let mut margin = f64::INFINITY;
    for _ in 0..20 {
        let (x, y) = stacking_rows(&mut rng, 60, 4);
        let stacked = mse(&ridge_predict(&ridge_fit(&x, &y, 0.0)?, &x)?, &y);
        for m in 0..4 {
            let col: Vec<f64> = x.iter().map(|r| r[m]).collect();
            let single = affine_calibrated_mse(&col, &y);
            dominated &= stacked <= single + 1e-12;
            margin = margin.min(single - stacked);
        }
    }

    // Planted combination: target = 0.7·m1 + 0.3·m2.
    let (mut x, _) = stacking_rows(&mut rng, 200, 3);
    let y: Vec<f64> = x
        .iter_mut()
        .map(|r| 0.7 * r[0] + 0.3 * r[1] + rng.gen_range(-0.05..0.05))
        .collect();
    let (model, cv) = stack_fit(&x, &y, &default_grid(RegressorKind::Ridge), 5, &mut rng)?;
    let weights = match &model {
        MetaModel::Ridge(r) => r.weights.clone(),
        MetaModel::Gbt(_) => anyhow::bail!("ridge grid produced a boosted model"),
    };
    let recovered = (weights[0] - 0.7).abs() <= 0.05 && (weights[1] - 0.3).abs() <= 0.05;
    outcome(
        dominated && recovered,
        format!(
            "stacked MSE ≤ every calibrated single model: {dominated} (min margin {margin:.3e}); \
             planted weights recovered as [{:.4}, {:.4}] with {:?}",
            weights[0],
            weights[1],
            cv.best_setting().setting
        ),
    )
}

// ---------------------------------------------------------------- 11

fn ensemble_check(ctx: &Ctx) -> Result<Outcome> {
    let (wins, lines) = paired_seeds(ctx, |seed| {
        let s = session(ctx, seed)?;
        let ens = s.run_or_reuse("ensemble-gbt")?;
        let mut best = f64::NEG_INFINITY;
        for m in ["baseline", "pretrain-de", "pretrain-zh", "pretrain-ro"] {
            best = best.max(zh_de(&s.run_or_reuse(m)?.report)?);
        }
        Ok((zh_de(&ens.report)? + 0.02, best))
    })?;
    outcome(
        wins >= needed(ctx.seeds),
        format!(
            "out-of-fold ensemble + 0.02 ≥ best member on zh+de in {wins}/{} seeds [{}]",
            ctx.seeds,
            lines.join("; ")
        ),
    )
}

// ---------------------------------------------------------------- 12

fn pearson_oracle(_: &Ctx) -> Result<Outcome> {
    let examples = [
        (pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0])?, 1.0),
        (pearson(&[1.0, 2.0, 3.0], &[6.0, 4.0, 2.0])?, -1.0),
        (pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0])?, 0.8),
    ];
    let exact = examples.iter().all(|(r, want)| (r - want).abs() <= 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.gen_range(3..60);
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let g: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let a = rng.gen_range(0.1..10.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let b = rng.gen_range(-100.0..100.0);
        let moved: Vec<f64> = p.iter().map(|v| a * v + b).collect();
        let r = pearson(&p, &g)?;
        let r2 = pearson(&moved, &g)?;
        worst = worst.max((r2 - r * a.signum()).abs());
    }
    outcome(
        exact && worst < 1e-9,
        format!(
            "examples {:?}; max affine deviation {worst:.2e} over 1000 vectors",
            examples.map(|e| e.0)
        ),
    )
}

// ---------------------------------------------------------------- 13

fn run_baseline(out: &Path) -> Result<Vec<u8>> {
    let status = Command::new(env!("CARGO_BIN_EXE_qeforge"))
        .args(["experiment", "--preset", "baseline", "--seed", "7", "--out-dir"])
        .arg(out)
        .output()?;
    ensure!(
        status.status.success(),
        "qeforge failed: {}",
        String::from_utf8_lossy(&status.stderr)
    );
    Ok(std::fs::read(out.join("baseline").join(DEV_PREDICTIONS))?)
}

fn determinism(ctx: &Ctx) -> Result<Outcome> {
    let a = run_baseline(&ctx.dir("determinism-a"))?;
    let b = run_baseline(&ctx.dir("determinism-b"))?;
    let mut extra = BTreeMap::new();
    for name in ["test.predictions.tsv", "predictor.ckpt", "estimator.json"] {
        let fa = std::fs::read(ctx.dir("determinism-a").join("baseline").join(name))?;
        let fb = std::fs::read(ctx.dir("determinism-b").join("baseline").join(name))?;
        extra.insert(name, fa == fb);
    }
    let same = a == b && !a.is_empty() && extra.values().all(|v| *v);
    outcome(
        same,
        format!("dev predictions identical: {} ({} bytes); other artifacts {extra:?}", a == b, a.len()),
    )
}

// ---------------------------------------------------------------- 14

fn checkpoint_round_trip(_: &Ctx) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut checks = Vec::new();
    let dir = tempfile::tempdir()?;
    for arch in [Architecture::Rnn, Architecture::Transformer] {
        let params = small_predictor(arch, &mut rng)?;
        let path = dir.path().join(format!("{arch:?}.ckpt"));
        save_checkpoint(&params, &path)?;
        let loaded = load_checkpoint(&path)?.params;
        let mut max_diff: f64 = 0.0;
        for ((_, a), (_, b)) in params.params().iter().zip(loaded.params()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                max_diff = max_diff.max(((*x as f32) - (*y as f32)).abs() as f64);
            }
        }
        let stable = to_bytes(&loaded)? == std::fs::read(&path)?;
        let lazy = read_manifest(&path)?.tensors.len() == params.params().len();
        checks.push((format!("{arch:?} round trip"), max_diff == 0.0 && stable && lazy));

        let bytes = std::fs::read(&path)?;
        let mut bad_version = bytes.clone();
        bad_version[0] = 99;
        checks.push((
            format!("{arch:?} version"),
            matches!(from_bytes(&bad_version), Err(Error::UnknownFormatVersion(99))),
        ));
        let mut bad_manifest = bytes.clone();
        bad_manifest[9] = b'#';
        checks.push((
            format!("{arch:?} manifest"),
            matches!(from_bytes(&bad_manifest), Err(Error::CorruptManifest(_))),
        ));
        let truncated = &bytes[..bytes.len() - 4];
        std::fs::write(&path, truncated)?;
        checks.push((
            format!("{arch:?} truncated"),
            matches!(load_checkpoint(&path), Err(Error::PayloadSize { .. })),
        ));
    }
    let failing: Vec<&String> = checks.iter().filter(|c| !c.1).map(|c| &c.0).collect();
    outcome(
        failing.is_empty(),
        format!("{} checks; failing {failing:?}", checks.len()),
    )
}
