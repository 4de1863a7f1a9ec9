use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};

use qeforge::corpus::{build_vocab, load_parallel, load_qe_dataset, write_parallel, write_qe_dataset, ParallelPair, QESample, Vocab};
use qeforge::synthetic::Benchmark;

use crate::config::ExperimentConfig;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairSplits {
    pub train: Vec<QESample>,
    pub valid: Vec<QESample>,
    pub test: Vec<QESample>,
}

/// All corpora of one experiment, keyed by language pair.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub qe: BTreeMap<String, PairSplits>,
    pub pretrain: BTreeMap<String, Vec<ParallelPair>>,
    pub augment: BTreeMap<String, Vec<ParallelPair>>,
}

impl Dataset {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let Some(files) = &cfg.data.files else {
            let bench = Benchmark::generate(&cfg.data.synthetic, cfg.seed)?;
            let mut out = Dataset::default();
            for (name, p) in bench.pairs {
                out.qe.insert(
                    name.clone(),
                    PairSplits {
                        train: p.train,
                        valid: p.valid,
                        test: p.test,
                    },
                );
                if !p.parallel.is_empty() {
                    out.pretrain.insert(name.clone(), p.parallel);
                }
                if !p.augmentation.is_empty() {
                    out.augment.insert(name, p.augmentation);
                }
            }
            return Ok(out);
        };
        let mut out = Dataset::default();
        for (pair, paths) in &files.qe {
            let test = match &paths.test {
                Some(p) => load_qe_dataset(p, pair)?,
                None => Vec::new(),
            };
            out.qe.insert(
                pair.clone(),
                PairSplits {
                    train: load_qe_dataset(&paths.train, pair)?,
                    valid: load_qe_dataset(&paths.valid, pair)?,
                    test,
                },
            );
        }
        for (pair, path) in &files.pretrain {
            out.pretrain.insert(pair.clone(), load_parallel(path)?);
        }
        for (pair, path) in &files.augment {
            out.augment.insert(pair.clone(), load_parallel(path)?);
        }
        Ok(out)
    }

    /// Writes the corpora in the same layout as the synthetic generator.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let qe = dir.join("qe");
        let par = dir.join("parallel");
        std::fs::create_dir_all(&qe).with_context(|| format!("creating {}", qe.display()))?;
        std::fs::create_dir_all(&par).with_context(|| format!("creating {}", par.display()))?;
        for (name, s) in &self.qe {
            for (split, samples) in [("train", &s.train), ("valid", &s.valid), ("test", &s.test)] {
                if !samples.is_empty() {
                    write_qe_dataset(qe.join(format!("{name}.{split}.tsv")), samples)?;
                }
            }
        }
        for (kind, corpora) in [("pretrain", &self.pretrain), ("augment", &self.augment)] {
            for (name, pairs) in corpora {
                write_parallel(par.join(format!("{name}.{kind}.tsv")), pairs)?;
            }
        }
        Ok(())
    }

    pub fn train(&self) -> Vec<QESample> {
        self.qe.values().flat_map(|s| s.train.iter().cloned()).collect()
    }

    pub fn valid(&self) -> Vec<QESample> {
        self.qe.values().flat_map(|s| s.valid.iter().cloned()).collect()
    }

    pub fn test(&self) -> Vec<QESample> {
        self.qe.values().flat_map(|s| s.test.iter().cloned()).collect()
    }

    /// Validation samples restricted to `pairs`, in dataset order.
    pub fn valid_of(&self, pairs: &[String]) -> Result<Vec<QESample>> {
        let mut out = Vec::new();
        for (name, s) in &self.qe {
            if pairs.contains(name) {
                out.extend(s.valid.iter().cloned());
            }
        }
        for p in pairs {
            ensure!(self.qe.contains_key(p), "no QE data for pair {p}");
        }
        Ok(out)
    }

    pub fn pretrain_corpus(&self, pair: &str) -> Result<&[ParallelPair]> {
        match self.pretrain.get(pair) {
            Some(c) if !c.is_empty() => Ok(c),
            _ => bail!("no pretraining corpus for pair {pair}"),
        }
    }

    /// The first `total / n` sentences of each of the `n` augmentation
    /// corpora.
    pub fn augmentation(&self, total: usize) -> Result<Vec<ParallelPair>> {
        if total == 0 {
            return Ok(Vec::new());
        }
        ensure!(!self.augment.is_empty(), "augmentation requested but no augmentation corpora are configured");
        let per = total / self.augment.len();
        let mut out = Vec::with_capacity(total);
        for (name, corpus) in &self.augment {
            ensure!(
                corpus.len() >= per,
                "augmentation corpus {name} has {} sentences, {per} needed",
                corpus.len()
            );
            out.extend_from_slice(&corpus[..per]);
        }
        Ok(out)
    }

    /// Source and target vocabularies over every training-side corpus. Each
    /// sub-model of an experiment shares them, so transferred output layers
    /// line up.
    pub fn vocabs(&self, cfg: &ExperimentConfig) -> Result<(Vocab, Vocab)> {
        let parallel = self.pretrain.values().chain(self.augment.values()).flatten();
        let qe = self.qe.values().flat_map(|s| &s.train);
        let src = qe
            .clone()
            .map(|s| &s.source_tokens)
            .chain(parallel.clone().map(|p| &p.source_tokens));
        let tgt = qe.map(|s| &s.target_tokens).chain(parallel.map(|p| &p.target_tokens));
        let (min, max) = (cfg.data.vocab_min_freq, cfg.data.vocab_max_size);
        Ok((build_vocab(src, min, max)?, build_vocab(tgt, min, max)?))
    }
}
