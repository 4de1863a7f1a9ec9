use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use qeforge::corpus::{load_qe_dataset, QESample};
use qeforge::ensemble::{
    assemble_features, load_meta_model, rows_to_xy, save_meta_model, stack_fit, write_feature_csv, RegressorKind,
};
use qeforge::estimator::{load_estimator, predict_batch, read_predictions, write_predictions, ScoredPrediction};
use qeforge::eval::{default_grouping, pearson, report, EvalItem, EvalReport};

use crate::config::ExperimentConfig;
use crate::data::Dataset;
use crate::experiment::{evaluate, finish, fit_estimator, fit_predictor, load_predictor, write_json, Init, Session};

#[derive(Debug, Parser)]
#[command(name = "qeforge", version, about = "Sentence-level translation quality estimation")]
pub struct Cli {
    /// Overrides the seed from the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON experiment config; without one the desk-scale defaults apply.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "qeforge-out")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a predictor on the configured QE training pairs.
    TrainPredictor {
        /// Pretrain on the parallel corpus of the pair involving this
        /// language, then transfer everything except the embeddings.
        #[arg(long, conflicts_with = "init")]
        pretrain: Option<String>,
        /// Transfer non-embedding weights from this checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Extra parallel sentences drawn from the augmentation corpora.
        #[arg(long, default_value_t = 0)]
        augment: usize,
    },
    /// Train an estimator on QEFVs from a trained predictor.
    TrainEstimator {
        /// Directory holding predictor.ckpt and the vocabularies; defaults
        /// to the output directory.
        #[arg(long)]
        predictor: Option<PathBuf>,
    },
    /// Score QE files with a trained predictor and estimator.
    Predict {
        #[arg(long)]
        predictor: PathBuf,
        #[arg(long)]
        estimator: PathBuf,
        /// `PAIR=PATH`; repeat for several files.
        #[arg(long, required = true, value_parser = parse_pair_path)]
        input: Vec<(String, PathBuf)>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Fit a stacked meta-regressor on sub-model predictions.
    EnsembleFit {
        /// One prediction file per sub-model.
        #[arg(long, required = true)]
        pred: Vec<PathBuf>,
        /// `PAIR=PATH` QE files, concatenated in the order given.
        #[arg(long, required = true, value_parser = parse_pair_path)]
        gold: Vec<(String, PathBuf)>,
        #[arg(long)]
        regressor: Option<RegressorKind>,
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Apply a fitted meta-regressor.
    EnsemblePredict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, required = true)]
        pred: Vec<PathBuf>,
        /// `PAIR=PATH` QE files the predictions refer to.
        #[arg(long, required = true, value_parser = parse_pair_path)]
        input: Vec<(String, PathBuf)>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Pearson correlation per language pair and pooled group.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        /// Gold scores in prediction-file format.
        #[arg(long, required_unless_present = "gold_qe", conflicts_with = "gold_qe")]
        gold: Option<PathBuf>,
        /// Gold scores from `PAIR=PATH` QE files.
        #[arg(long, value_parser = parse_pair_path)]
        gold_qe: Vec<(String, PathBuf)>,
    },
    /// Run a named preset end to end.
    Experiment {
        #[arg(long)]
        preset: String,
    },
}

fn parse_pair_path(s: &str) -> std::result::Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((pair, path)) if !pair.is_empty() && !path.is_empty() => Ok((pair.to_string(), PathBuf::from(path))),
        _ => Err(format!("expected PAIR=PATH, got {s:?}")),
    }
}

fn load_qe_files(files: &[(String, PathBuf)]) -> Result<Vec<QESample>> {
    let mut out = Vec::new();
    for (pair, path) in files {
        out.extend(load_qe_dataset(path, pair)?);
    }
    Ok(out)
}

impl Cli {
    pub fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::desk_scale(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn create(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Runs one command; returns text for standard output.
pub fn run(cli: &Cli) -> Result<String> {
    let cfg = cli.config()?;
    let out = &cli.out_dir;
    match &cli.command {
        Command::TrainPredictor {
            pretrain,
            init,
            augment,
        } => {
            create(out)?;
            let data = Dataset::load(&cfg)?;
            let vocabs = data.vocabs(&cfg)?;
            let init = match (pretrain, init) {
                (Some(lang), _) => Init::Pretrain(crate::experiment::pretrain_pair(&data, lang)?.to_string()),
                (None, Some(p)) => Init::Checkpoint(p.clone()),
                (None, None) => Init::Random,
            };
            let (_, artifacts) = fit_predictor(&cfg, &init, *augment, &data, &vocabs, out, "train-predictor")?;
            finish(out, "train-predictor", &cfg, artifacts)?;
            Ok(format!("predictor written to {}\n", out.display()))
        }
        Command::TrainEstimator { predictor } => {
            create(out)?;
            let predictor = load_predictor(predictor.as_deref().unwrap_or(out))?;
            let data = Dataset::load(&cfg)?;
            let (_, artifacts) = fit_estimator(&cfg, &predictor, &data, out, "train-estimator")?;
            finish(out, "train-estimator", &cfg, artifacts)?;
            Ok(format!("estimator written to {}\n", out.join("estimator.json").display()))
        }
        Command::Predict {
            predictor,
            estimator,
            input,
            output,
        } => {
            let predictor = load_predictor(predictor)?;
            let est = load_estimator(estimator)?;
            let samples = load_qe_files(input)?;
            let preds = predict_batch(&predictor, &est, &samples)?;
            write_predictions(output, &preds)?;
            Ok(format!("{} predictions written to {}\n", preds.len(), output.display()))
        }
        Command::EnsembleFit {
            pred,
            gold,
            regressor,
            folds,
        } => {
            create(out)?;
            let samples = load_qe_files(gold)?;
            let preds = pred
                .iter()
                .map(|p| Ok(read_predictions(p)?))
                .collect::<Result<Vec<_>>>()?;
            let rows = assemble_features(&preds, &samples)?;
            write_feature_csv(out.join("features.csv"), &rows)?;
            let (x, y) = rows_to_xy(&rows)?;
            let kind = regressor.unwrap_or(cfg.ensemble.regressor);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(2);
            let (model, cv) = stack_fit(
                &x,
                &y,
                &cfg.ensemble.grid(kind),
                folds.unwrap_or(cfg.ensemble.folds),
                &mut rng,
            )?;
            save_meta_model(&model, out.join("meta.json"))?;
            write_json(&out.join("cv.json"), &cv)?;
            let oof: Vec<ScoredPrediction> = cv
                .oof_predictions
                .iter()
                .zip(&samples)
                .enumerate()
                .map(|(index, (&score, s))| ScoredPrediction {
                    index,
                    language_pair: s.language_pair.clone(),
                    score,
                })
                .collect();
            write_predictions(out.join("oof.predictions.tsv"), &oof)?;
            let rep = evaluate(&oof, &samples)?;
            write_json(&out.join("report.json"), &rep)?;
            let artifacts = ["features.csv", "meta.json", "cv.json", "oof.predictions.tsv", "report.json"]
                .map(String::from)
                .to_vec();
            finish(out, "ensemble-fit", &cfg, artifacts)?;
            let best = cv.best_setting();
            Ok(format!(
                "best setting {:?} (mean out-of-fold r = {:.4})\nout-of-fold scores:\n{}",
                best.setting,
                best.mean_pearson,
                rep.to_table()
            ))
        }
        Command::EnsemblePredict {
            model,
            pred,
            input,
            output,
        } => {
            let model = load_meta_model(model)?;
            let samples = load_qe_files(input)?;
            let preds = pred
                .iter()
                .map(|p| Ok(read_predictions(p)?))
                .collect::<Result<Vec<_>>>()?;
            let rows = assemble_features(&preds, &samples)?;
            let x: Vec<Vec<f64>> = rows.into_iter().map(|r| r.features).collect();
            let scores = model.predict(&x)?;
            let out_preds: Vec<ScoredPrediction> = scores
                .into_iter()
                .zip(&samples)
                .enumerate()
                .map(|(index, (score, s))| ScoredPrediction {
                    index,
                    language_pair: s.language_pair.clone(),
                    score,
                })
                .collect();
            write_predictions(output, &out_preds)?;
            Ok(format!("{} predictions written to {}\n", out_preds.len(), output.display()))
        }
        Command::Evaluate { pred, gold, gold_qe } => {
            let preds = read_predictions(pred)?;
            let items = match gold {
                Some(g) => align(&preds, &read_predictions(g)?)?,
                None => {
                    let samples = load_qe_files(gold_qe)?;
                    let golds: Vec<ScoredPrediction> = samples
                        .iter()
                        .enumerate()
                        .map(|(index, s)| ScoredPrediction {
                            index,
                            language_pair: s.language_pair.clone(),
                            score: s.score,
                        })
                        .collect();
                    align(&preds, &golds)?
                }
            };
            Ok(evaluation_text(&items)?)
        }
        Command::Experiment { preset } => {
            let session = Session::new(cfg, out)?;
            let run = session.run(preset)?;
            Ok(format!(
                "{preset}: artifacts in {}\n{}",
                run.dir.display(),
                run.report.to_table()
            ))
        }
    }
}

fn align(preds: &[ScoredPrediction], gold: &[ScoredPrediction]) -> Result<Vec<EvalItem>> {
    ensure!(
        preds.len() == gold.len(),
        "{} predictions for {} gold scores",
        preds.len(),
        gold.len()
    );
    preds
        .iter()
        .zip(gold)
        .map(|(p, g)| {
            if (p.index, &p.language_pair) != (g.index, &g.language_pair) {
                bail!(
                    "prediction ({}, {}) does not line up with gold ({}, {})",
                    p.index,
                    p.language_pair,
                    g.index,
                    g.language_pair
                );
            }
            Ok(EvalItem {
                language_pair: p.language_pair.clone(),
                pred: p.score,
                gold: g.score,
            })
        })
        .collect()
}

fn evaluation_text(items: &[EvalItem]) -> Result<String> {
    let rep: EvalReport = report(items, &default_grouping());
    let pred: Vec<f64> = items.iter().map(|i| i.pred).collect();
    let gold: Vec<f64> = items.iter().map(|i| i.gold).collect();
    let mut out = String::new();
    for col in rep.columns() {
        let s = rep.get(&col).expect("listed column");
        out.push_str(&format!("{col}\tr={:.4}\tn={}\n", s.r, s.n));
    }
    out.push_str(&format!("all\tr={:.4}\tn={}\n", pearson(&pred, &gold)?, items.len()));
    for w in &rep.warnings {
        out.push_str(&format!("warning: {w}\n"));
    }
    Ok(out)
}
