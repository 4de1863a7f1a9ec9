//! Training pipelines and the preset grid.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use qeforge::corpus::{noise_distribution, ParallelPair, QESample, Vocab};
use qeforge::ensemble::{
    assemble_features, rows_to_xy, save_meta_model, stack_fit, write_feature_csv, RegressorKind,
};
use qeforge::estimator::{
    predict_batch, read_predictions, save_estimator, train_estimator, write_predictions, EstimatorParams, ScoredPrediction,
};
use qeforge::eval::{default_grouping, report, EvalItem, EvalReport};
use qeforge::predictor::{
    encode_pairs, load_checkpoint, load_pretrained_excluding_embeddings, save_checkpoint, train_predictor, Architecture,
    LossKind, Predictor, PredictorHyper, PredictorParams, PredictorTrainConfig,
};
use qeforge::synthetic::{split_pair, AUGMENTATION_TIERS};

use crate::config::ExperimentConfig;
use crate::data::Dataset;
use crate::results;

pub const PRESETS: [&str; 16] = [
    "baseline",
    "transformer",
    "nce",
    "neg",
    "pretrain-et",
    "pretrain-ne",
    "pretrain-ro",
    "pretrain-de",
    "pretrain-zh",
    "D1",
    "D2",
    "D3",
    "D5",
    "ensemble-ridge",
    "ensemble-gbt",
    "ensemble-all",
];

pub const RESULTS_FILE: &str = "results.tsv";
pub const DEV_PREDICTIONS: &str = "dev.predictions.tsv";

#[derive(Debug, Clone, PartialEq)]
pub enum Recipe {
    /// One predictor-estimator, optionally pretrained on the parallel corpus
    /// of the pair involving `pretrain` and fine-tuned with `augmentation`
    /// extra parallel sentences.
    Single {
        pretrain: Option<&'static str>,
        augmentation: usize,
    },
    /// A meta-regressor stacked on the development predictions of other
    /// presets.
    Ensemble {
        regressor: RegressorKind,
        members: &'static [&'static str],
    },
}

pub fn recipe(tag: &str) -> Result<Recipe> {
    let single = |pretrain, augmentation| Recipe::Single { pretrain, augmentation };
    Ok(match tag {
        "baseline" | "transformer" | "nce" | "neg" => single(None, 0),
        "pretrain-et" => single(Some("et"), 0),
        "pretrain-ne" => single(Some("ne"), 0),
        "pretrain-ro" => single(Some("ro"), 0),
        "pretrain-de" => single(Some("de"), 0),
        "pretrain-zh" => single(Some("zh"), 0),
        "D1" => single(None, AUGMENTATION_TIERS[0]),
        "D2" => single(None, AUGMENTATION_TIERS[1]),
        "D3" => single(None, AUGMENTATION_TIERS[2]),
        "D5" => single(None, AUGMENTATION_TIERS[3]),
        "ensemble-ridge" => Recipe::Ensemble {
            regressor: RegressorKind::Ridge,
            members: &["baseline", "pretrain-de", "pretrain-zh", "pretrain-ro", "pretrain-et", "pretrain-ne"],
        },
        "ensemble-gbt" => Recipe::Ensemble {
            regressor: RegressorKind::Gbt,
            members: &["baseline", "pretrain-de", "pretrain-zh", "pretrain-ro"],
        },
        "ensemble-all" => Recipe::Ensemble {
            regressor: RegressorKind::Gbt,
            members: &[
                "baseline",
                "D1",
                "D2",
                "D3",
                "D5",
                "pretrain-de",
                "pretrain-zh",
                "pretrain-ro",
                "pretrain-et",
                "pretrain-ne",
            ],
        },
        other => bail!("unknown preset {other:?}; valid presets: {}", PRESETS.join(", ")),
    })
}

/// The configuration a preset actually runs with.
pub fn preset_config(tag: &str, base: &ExperimentConfig) -> Result<ExperimentConfig> {
    recipe(tag)?;
    let mut c = base.clone();
    c.preset = Some(tag.to_string());
    match tag {
        "transformer" => {
            let m = c.predictor.model;
            c.predictor.model = PredictorHyper {
                architecture: Architecture::Transformer,
                layers: m.layers,
                hidden: m.hidden,
                emb_dim: m.hidden,
                heads: m.heads,
                ff_dim: 4 * m.hidden,
                dropout: PredictorHyper::transformer().dropout,
            };
        }
        "nce" => c.predictor.training.loss = LossKind::Nce,
        "neg" => c.predictor.training.loss = LossKind::Neg,
        _ => {}
    }
    c.validate()?;
    Ok(c)
}

/// Recorded next to every set of artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub preset: Option<String>,
    pub seed: u64,
    pub config_hash: String,
    pub artifacts: Vec<String>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Writes `config.json` and then `manifest.json`; the manifest appears only
/// once every artifact exists.
pub fn finish(dir: &Path, command: &str, cfg: &ExperimentConfig, mut artifacts: Vec<String>) -> Result<Manifest> {
    write_json(&dir.join("config.json"), cfg)?;
    artifacts.push("config.json".into());
    for a in &artifacts {
        ensure!(dir.join(a).is_file(), "artifact {a} was not written");
    }
    let manifest = Manifest {
        command: command.to_string(),
        preset: cfg.preset.clone(),
        seed: cfg.seed,
        config_hash: cfg.hash(),
        artifacts,
    };
    let tmp = dir.join("manifest.json.tmp");
    write_json(&tmp, &manifest)?;
    fs::rename(&tmp, dir.join("manifest.json"))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

fn progress(tag: &str, msg: impl AsRef<str>) {
    eprintln!("[{tag}] {}", msg.as_ref());
}

/// Finds the pretraining corpus whose pair involves `lang` on its
/// non-English side.
pub fn pretrain_pair<'a>(data: &'a Dataset, lang: &str) -> Result<&'a str> {
    let hits: Vec<&str> = data
        .pretrain
        .keys()
        .map(String::as_str)
        .filter(|p| matches!(split_pair(p), Ok((s, t)) if (s == lang && t != lang) || (t == lang && s != lang)))
        .collect();
    match hits.as_slice() {
        [one] => Ok(one),
        [] => bail!("no pretraining corpus involves language {lang:?}"),
        many => bail!("language {lang:?} matches several pretraining corpora: {many:?}"),
    }
}

fn pairs_of(corpus: &[ParallelPair]) -> impl Iterator<Item = (&Vec<String>, &Vec<String>)> {
    corpus.iter().map(|p| (&p.source_tokens, &p.target_tokens))
}

fn qe_pairs(samples: &[QESample]) -> impl Iterator<Item = (&Vec<String>, &Vec<String>)> {
    samples.iter().map(|s| (&s.source_tokens, &s.target_tokens))
}

/// Where a predictor's non-embedding weights come from before fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    Random,
    /// Train a fresh predictor on this pair's parallel corpus first.
    Pretrain(String),
    Checkpoint(PathBuf),
}

/// Initializes, optionally transfers, and fine-tunes a predictor on the QE
/// training pairs plus `augmentation` parallel sentences. Writes the
/// checkpoint, vocabularies and training log into `dir`.
pub fn fit_predictor(
    cfg: &ExperimentConfig,
    init: &Init,
    augmentation: usize,
    data: &Dataset,
    vocabs: &(Vocab, Vocab),
    dir: &Path,
    tag: &str,
) -> Result<(Predictor, Vec<String>)> {
    let (sv, tv) = vocabs;
    let hyper = cfg.predictor.model;
    let training = cfg.predictor.training;
    let noise = match training.loss {
        LossKind::Ce => None,
        _ => Some(noise_distribution(tv)?),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = PredictorParams::new(hyper, sv, tv, &mut rng)?;
    let mut artifacts = Vec::new();
    let transfer_from = match init {
        Init::Random => None,
        Init::Checkpoint(p) => Some(p.clone()),
        Init::Pretrain(pair) => {
            let corpus = data.pretrain_corpus(pair)?;
            let mut pre_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            pre_rng.set_stream(1);
            let start = PredictorParams::new(hyper, sv, tv, &mut pre_rng)?;
            let pre_cfg = PredictorTrainConfig {
                epochs: cfg.predictor.pretrain_epochs,
                ..training
            };
            progress(tag, format!("pretraining on {pair} ({} sentences)", corpus.len()));
            let enc = encode_pairs(pairs_of(corpus), sv, tv);
            let (pre, log) = train_predictor(start, &pre_cfg, noise.as_ref(), &enc, &[], &mut pre_rng)?;
            write_json(&dir.join("pretrain_log.json"), &log)?;
            let path = dir.join("pretrained.ckpt");
            save_checkpoint(&pre, &path)?;
            artifacts.extend(["pretrain_log.json".into(), "pretrained.ckpt".into()]);
            Some(path)
        }
    };
    if let Some(path) = transfer_from {
        params = load_pretrained_excluding_embeddings(&path, params)?;
    }
    let train = data.train();
    let valid = data.valid();
    let extra = data.augmentation(augmentation)?;
    let mut enc = encode_pairs(qe_pairs(&train), sv, tv);
    enc.extend(encode_pairs(pairs_of(&extra), sv, tv));
    let venc = encode_pairs(qe_pairs(&valid), sv, tv);
    progress(
        tag,
        format!("training predictor on {} pairs ({} parallel)", enc.len(), extra.len()),
    );
    let (params, log) = train_predictor(params, &training, noise.as_ref(), &enc, &venc, &mut rng)?;
    if let Some(last) = log.last() {
        progress(tag, format!("predictor valid accuracy {:.3}", last.valid_accuracy));
    }
    save_checkpoint(&params, dir.join("predictor.ckpt"))?;
    sv.save(dir.join("source.vocab"))?;
    tv.save(dir.join("target.vocab"))?;
    write_json(&dir.join("predictor_log.json"), &log)?;
    artifacts.extend(["predictor.ckpt", "source.vocab", "target.vocab", "predictor_log.json"].map(String::from));
    Ok((Predictor::new(params, sv.clone(), tv.clone())?, artifacts))
}

/// Loads `predictor.ckpt`, `source.vocab` and `target.vocab` from `dir`.
pub fn load_predictor(dir: &Path) -> Result<Predictor> {
    let ckpt = load_checkpoint(dir.join("predictor.ckpt"))?;
    let sv = Vocab::load(dir.join("source.vocab"))?;
    let tv = Vocab::load(dir.join("target.vocab"))?;
    Ok(Predictor::new(ckpt.params, sv, tv)?)
}

pub fn fit_estimator(
    cfg: &ExperimentConfig,
    predictor: &Predictor,
    data: &Dataset,
    dir: &Path,
    tag: &str,
) -> Result<(EstimatorParams, Vec<String>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(3);
    let (train, valid) = (data.train(), data.valid());
    progress(tag, format!("training estimator on {} sentences", train.len()));
    let (est, log) = train_estimator(&cfg.estimator, predictor, &train, &valid, &mut rng)?;
    save_estimator(&est, dir.join("estimator.json"))?;
    write_json(&dir.join("estimator_log.json"), &log)?;
    Ok((est, vec!["estimator.json".into(), "estimator_log.json".into()]))
}

/// Scores predictions against gold samples that are in the same order.
pub fn evaluate(preds: &[ScoredPrediction], gold: &[QESample]) -> Result<EvalReport> {
    ensure!(
        preds.len() == gold.len(),
        "{} predictions for {} gold scores",
        preds.len(),
        gold.len()
    );
    let mut items = Vec::with_capacity(preds.len());
    for (i, (p, g)) in preds.iter().zip(gold).enumerate() {
        ensure!(
            p.language_pair == g.language_pair,
            "row {i}: prediction for {} but gold is {}",
            p.language_pair,
            g.language_pair
        );
        items.push(EvalItem {
            language_pair: g.language_pair.clone(),
            pred: p.score,
            gold: g.score,
        });
    }
    Ok(report(&items, &default_grouping()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PresetRun {
    pub preset: String,
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub report: EvalReport,
    /// Development predictions, aligned with the dataset's validation
    /// samples (for ensembles, with the ensembled pairs' samples).
    pub dev: Vec<ScoredPrediction>,
}

/// Everything shared by the presets of one invocation.
pub struct Session {
    pub base: ExperimentConfig,
    pub data: Dataset,
    pub vocabs: (Vocab, Vocab),
    pub out_dir: PathBuf,
}

impl Session {
    pub fn new(base: ExperimentConfig, out_dir: &Path) -> Result<Self> {
        base.validate()?;
        let data = Dataset::load(&base)?;
        let vocabs = data.vocabs(&base)?;
        fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
        Ok(Session {
            base,
            data,
            vocabs,
            out_dir: out_dir.to_path_buf(),
        })
    }

    /// Runs a preset into `out_dir/<tag>` and records it in the results
    /// table. Ensemble members are reused when their manifest matches.
    pub fn run(&self, tag: &str) -> Result<PresetRun> {
        let cfg = preset_config(tag, &self.base)?;
        let dir = self.out_dir.join(tag);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let _ = fs::remove_file(dir.join("manifest.json"));
        let (report, dev, artifacts) = match recipe(tag)? {
            Recipe::Single { pretrain, augmentation } => self.run_single(&cfg, pretrain, augmentation, &dir, tag)?,
            Recipe::Ensemble { regressor, members } => self.run_ensemble(&cfg, regressor, members, &dir, tag)?,
        };
        write_json(&dir.join("report.json"), &report)?;
        let mut artifacts = artifacts;
        artifacts.push("report.json".into());
        let manifest = finish(&dir, &format!("experiment --preset {tag}"), &cfg, artifacts)?;
        results::record(&self.out_dir.join(RESULTS_FILE), tag, &manifest.config_hash, cfg.seed, &report)?;
        progress(tag, "done");
        Ok(PresetRun {
            preset: tag.to_string(),
            dir,
            manifest,
            report,
            dev,
        })
    }

    /// Returns a finished run from disk when its manifest matches the
    /// preset's configuration, otherwise runs it.
    pub fn run_or_reuse(&self, tag: &str) -> Result<PresetRun> {
        let cfg = preset_config(tag, &self.base)?;
        let dir = self.out_dir.join(tag);
        if let Ok(manifest) = read_manifest(&dir) {
            if manifest.config_hash == cfg.hash() {
                let dev = read_predictions(dir.join(DEV_PREDICTIONS))?;
                let text = fs::read_to_string(dir.join("report.json"))?;
                progress(tag, "reusing finished run");
                return Ok(PresetRun {
                    preset: tag.to_string(),
                    report: serde_json::from_str(&text)?,
                    dir,
                    manifest,
                    dev,
                });
            }
        }
        self.run(tag)
    }

    fn run_single(
        &self,
        cfg: &ExperimentConfig,
        pretrain: Option<&str>,
        augmentation: usize,
        dir: &Path,
        tag: &str,
    ) -> Result<(EvalReport, Vec<ScoredPrediction>, Vec<String>)> {
        let init = match pretrain {
            Some(lang) => Init::Pretrain(pretrain_pair(&self.data, lang)?.to_string()),
            None => Init::Random,
        };
        let (predictor, mut artifacts) = fit_predictor(cfg, &init, augmentation, &self.data, &self.vocabs, dir, tag)?;
        let (est, more) = fit_estimator(cfg, &predictor, &self.data, dir, tag)?;
        artifacts.extend(more);
        let valid = self.data.valid();
        let dev = predict_batch(&predictor, &est, &valid)?;
        write_predictions(dir.join(DEV_PREDICTIONS), &dev)?;
        artifacts.push(DEV_PREDICTIONS.into());
        let test = self.data.test();
        if !test.is_empty() {
            write_predictions(dir.join("test.predictions.tsv"), &predict_batch(&predictor, &est, &test)?)?;
            artifacts.push("test.predictions.tsv".into());
        }
        Ok((evaluate(&dev, &valid)?, dev, artifacts))
    }

    fn run_ensemble(
        &self,
        cfg: &ExperimentConfig,
        regressor: RegressorKind,
        members: &[&str],
        dir: &Path,
        tag: &str,
    ) -> Result<(EvalReport, Vec<ScoredPrediction>, Vec<String>)> {
        let valid = self.data.valid();
        let keep: Vec<usize> = (0..valid.len())
            .filter(|&i| cfg.ensemble.pairs.contains(&valid[i].language_pair))
            .collect();
        ensure!(!keep.is_empty(), "no development rows for pairs {:?}", cfg.ensemble.pairs);
        let samples: Vec<QESample> = keep.iter().map(|&i| valid[i].clone()).collect();
        let mut member_preds = Vec::with_capacity(members.len());
        for m in members {
            let run = self.run_or_reuse(m)?;
            ensure!(
                run.dev.len() == valid.len(),
                "member {m} has {} development predictions, expected {}",
                run.dev.len(),
                valid.len()
            );
            member_preds.push(
                keep.iter()
                    .enumerate()
                    .map(|(j, &i)| ScoredPrediction {
                        index: j,
                        language_pair: run.dev[i].language_pair.clone(),
                        score: run.dev[i].score,
                    })
                    .collect::<Vec<_>>(),
            );
        }
        let rows = assemble_features(&member_preds, &samples)?;
        write_feature_csv(dir.join("features.csv"), &rows)?;
        let (x, y) = rows_to_xy(&rows)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(2);
        progress(tag, format!("stacking {} members with {regressor:?}", members.len()));
        let (model, cv) = stack_fit(&x, &y, &cfg.ensemble.grid(regressor), cfg.ensemble.folds, &mut rng)?;
        save_meta_model(&model, dir.join("meta.json"))?;
        write_json(&dir.join("cv.json"), &cv)?;
        let fitted = model.predict(&x)?;
        let to_preds = |scores: &[f64]| -> Vec<ScoredPrediction> {
            scores
                .iter()
                .zip(&samples)
                .enumerate()
                .map(|(index, (&score, s))| ScoredPrediction {
                    index,
                    language_pair: s.language_pair.clone(),
                    score,
                })
                .collect()
        };
        // Out-of-fold predictions are what the report scores; the refit
        // model's in-sample predictions are kept for reference.
        let dev = to_preds(&cv.oof_predictions);
        write_predictions(dir.join(DEV_PREDICTIONS), &dev)?;
        write_predictions(dir.join("fitted.predictions.tsv"), &to_preds(&fitted))?;
        let artifacts = ["features.csv", "meta.json", "cv.json", DEV_PREDICTIONS, "fitted.predictions.tsv"]
            .map(String::from)
            .to_vec();
        Ok((evaluate(&dev, &samples)?, dev, artifacts))
    }
}
