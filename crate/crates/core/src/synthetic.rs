//! Deterministic toy translation benchmark.
//!
//! Sentences are walks over a shared set of concepts. Every language renders
//! concept `c` as its own word (a substitution cipher), and translation is
//! word-by-word. Machine-translation outputs are produced by corrupting each
//! target word with a per-sentence rate; the gold score of an output is its
//! fraction of uncorrupted words, z-standardized per language pair.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{write_parallel, write_qe_dataset, ParallelPair, QESample};
use crate::error::{Error, Result};

/// Sizes of one language pair's QE splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSizes {
    pub pair: String,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    /// Clean parallel sentences available for predictor pretraining.
    pub parallel: usize,
    /// Extra parallel sentences reserved for data-augmentation runs.
    pub augmentation: usize,
}

impl PairSizes {
    pub fn new(pair: &str, train: usize, valid: usize, test: usize, parallel: usize, augmentation: usize) -> Self {
        PairSizes {
            pair: pair.into(),
            train,
            valid,
            test,
            parallel,
            augmentation,
        }
    }

    pub fn languages(&self) -> Result<(&str, &str)> {
        split_pair(&self.pair)
    }
}

pub fn split_pair(pair: &str) -> Result<(&str, &str)> {
    match pair.split_once('-') {
        Some((s, t)) if !s.is_empty() && !t.is_empty() && s != t => Ok((s, t)),
        _ => Err(Error::InvalidArgument(format!("language pair {pair:?} is not of the form src-tgt"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub concepts: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability mass a concept puts on its few preferred successors.
    pub coherence: f64,
    /// Per-sentence corruption rates are drawn from `[0, max_corruption]`.
    pub max_corruption: f64,
    pub pairs: Vec<PairSizes>,
}

/// Three high-resource pairs into English and two low-resource pairs out of it.
pub const HIGH_RESOURCE: [&str; 3] = ["et-en", "ne-en", "ro-en"];
pub const LOW_RESOURCE: [&str; 2] = ["en-de", "en-zh"];

/// Total augmentation sizes for the four data-size tiers, split evenly over
/// the low-resource pairs.
pub const AUGMENTATION_TIERS: [usize; 4] = [100, 200, 300, 500];

impl Default for BenchmarkConfig {
    fn default() -> Self {
        let mut pairs: Vec<PairSizes> = HIGH_RESOURCE
            .iter()
            .map(|p| PairSizes::new(p, 700, 100, 100, 500, 0))
            .collect();
        let per_pair = AUGMENTATION_TIERS[AUGMENTATION_TIERS.len() - 1] / LOW_RESOURCE.len();
        pairs.extend(LOW_RESOURCE.iter().map(|p| PairSizes::new(p, 100, 100, 100, 500, per_pair)));
        BenchmarkConfig {
            concepts: 24,
            min_len: 4,
            max_len: 8,
            coherence: 0.8,
            max_corruption: 0.6,
            pairs,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.concepts < 2 {
            return Err(Error::InvalidArgument("need at least 2 concepts".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::InvalidArgument(format!(
                "sentence lengths [{}, {}] are invalid",
                self.min_len, self.max_len
            )));
        }
        if !(0.0..=1.0).contains(&self.coherence) || !(0.0..=1.0).contains(&self.max_corruption) {
            return Err(Error::InvalidArgument("coherence and max_corruption must lie in [0, 1]".into()));
        }
        for p in &self.pairs {
            p.languages()?;
            if p.train + p.valid + p.test < 2 {
                return Err(Error::InvalidArgument(format!("{}: too few QE sentences to standardize", p.pair)));
            }
        }
        Ok(())
    }
}

/// Concept chain plus one lexicon per language.
#[derive(Debug, Clone)]
pub struct World {
    concepts: usize,
    min_len: usize,
    max_len: usize,
    /// Row-wise cumulative transition probabilities.
    transitions: Vec<Vec<f64>>,
    lexicons: BTreeMap<String, Vec<String>>,
}

impl World {
    pub fn new<R: Rng + ?Sized>(cfg: &BenchmarkConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.concepts;
        let preferred = 3.min(n);
        let mut transitions = Vec::with_capacity(n);
        for _ in 0..n {
            let mut row = vec![(1.0 - cfg.coherence) / n as f64; n];
            for s in rand::seq::index::sample(rng, n, preferred).iter() {
                row[s] += cfg.coherence / preferred as f64;
            }
            let mut acc = 0.0;
            for v in row.iter_mut() {
                acc += *v;
                *v = acc;
            }
            transitions.push(row);
        }
        let mut languages: Vec<&str> = Vec::new();
        for p in &cfg.pairs {
            let (s, t) = p.languages()?;
            for l in [s, t] {
                if !languages.contains(&l) {
                    languages.push(l);
                }
            }
        }
        languages.sort_unstable();
        let mut lexicons = BTreeMap::new();
        for lang in languages {
            let mut ids: Vec<usize> = (0..n).collect();
            ids.shuffle(rng);
            lexicons.insert(lang.to_string(), ids.into_iter().map(|i| format!("{lang}{i:02}")).collect());
        }
        Ok(World {
            concepts: n,
            min_len: cfg.min_len,
            max_len: cfg.max_len,
            transitions,
            lexicons,
        })
    }

    pub fn concepts(&self) -> usize {
        self.concepts
    }

    pub fn languages(&self) -> impl Iterator<Item = &str> {
        self.lexicons.keys().map(String::as_str)
    }

    pub fn lexicon(&self, lang: &str) -> Result<&[String]> {
        self.lexicons
            .get(lang)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown language {lang:?}")))
    }

    pub fn sentence<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let len = rng.gen_range(self.min_len..=self.max_len);
        let mut c = rng.gen_range(0..self.concepts);
        let mut out = vec![c];
        while out.len() < len {
            let u: f64 = rng.gen();
            let row = &self.transitions[c];
            c = row.partition_point(|&p| p <= u).min(self.concepts - 1);
            out.push(c);
        }
        out
    }

    pub fn render(&self, lang: &str, concepts: &[usize]) -> Result<Vec<String>> {
        let lex = self.lexicon(lang)?;
        Ok(concepts.iter().map(|&c| lex[c].clone()).collect())
    }

    pub fn parallel<R: Rng + ?Sized>(&self, src: &str, tgt: &str, n: usize, rng: &mut R) -> Result<Vec<ParallelPair>> {
        (0..n)
            .map(|_| {
                let s = self.sentence(rng);
                Ok(ParallelPair {
                    source_tokens: self.render(src, &s)?,
                    target_tokens: self.render(tgt, &s)?,
                })
            })
            .collect()
    }

    /// A source sentence and a corrupted translation, with the fraction of
    /// target words left intact.
    pub fn corrupted_translation<R: Rng + ?Sized>(
        &self,
        src: &str,
        tgt: &str,
        max_corruption: f64,
        rng: &mut R,
    ) -> Result<(Vec<String>, Vec<String>, f64)> {
        let s = self.sentence(rng);
        let rate = rng.gen::<f64>() * max_corruption;
        let mut out = s.clone();
        let mut intact = 0;
        for c in out.iter_mut() {
            if rng.gen::<f64>() < rate {
                let other = rng.gen_range(0..self.concepts - 1);
                *c = if other >= *c { other + 1 } else { other };
            } else {
                intact += 1;
            }
        }
        Ok((self.render(src, &s)?, self.render(tgt, &out)?, intact as f64 / s.len() as f64))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairData {
    pub train: Vec<QESample>,
    pub valid: Vec<QESample>,
    pub test: Vec<QESample>,
    pub parallel: Vec<ParallelPair>,
    pub augmentation: Vec<ParallelPair>,
    /// Mean and standard deviation used to standardize the intact fraction.
    pub standardization: (f64, f64),
}

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub world: World,
    pub pairs: BTreeMap<String, PairData>,
}

/// z-standardizes in place and returns the mean and standard deviation used.
pub fn z_standardize(values: &mut [f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::EmptyInput("need at least 2 values to standardize".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sd == 0.0 {
        return Err(Error::ConstantSequence("scores"));
    }
    for v in values.iter_mut() {
        *v = (*v - mean) / sd;
    }
    Ok((mean, sd))
}

impl Benchmark {
    /// Pairs are generated in configuration order from a single stream
    /// seeded by `seed`.
    pub fn generate(cfg: &BenchmarkConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let world = World::new(cfg, &mut rng)?;
        let mut pairs = BTreeMap::new();
        for p in &cfg.pairs {
            let (src, tgt) = p.languages()?;
            let total = p.train + p.valid + p.test;
            let mut raw = Vec::with_capacity(total);
            for _ in 0..total {
                raw.push(world.corrupted_translation(src, tgt, cfg.max_corruption, &mut rng)?);
            }
            let mut scores: Vec<f64> = raw.iter().map(|r| r.2).collect();
            let standardization = z_standardize(&mut scores)?;
            let mut samples = raw
                .into_iter()
                .zip(scores)
                .map(|((s, t, _), z)| QESample::new(s, t, z, p.pair.clone()))
                .collect::<Result<Vec<_>>>()?;
            let test = samples.split_off(p.train + p.valid);
            let valid = samples.split_off(p.train);
            let parallel = world.parallel(src, tgt, p.parallel, &mut rng)?;
            let augmentation = world.parallel(src, tgt, p.augmentation, &mut rng)?;
            if pairs
                .insert(
                    p.pair.clone(),
                    PairData {
                        train: samples,
                        valid,
                        test,
                        parallel,
                        augmentation,
                        standardization,
                    },
                )
                .is_some()
            {
                return Err(Error::InvalidArgument(format!("pair {} listed twice", p.pair)));
            }
        }
        Ok(Benchmark { world, pairs })
    }

    pub fn pair(&self, pair: &str) -> Result<&PairData> {
        self.pairs
            .get(pair)
            .ok_or_else(|| Error::InvalidArgument(format!("benchmark has no pair {pair:?}")))
    }

    /// Every word of the given languages, one lexicon per sentence; useful for
    /// building vocabularies that cover each language completely.
    pub fn lexicon_sentences<'a>(&'a self, langs: &'a [&'a str]) -> Result<Vec<&'a [String]>> {
        langs.iter().map(|l| self.world.lexicon(l)).collect()
    }

    /// Writes `qe/{pair}.{split}.tsv` and `parallel/{pair}.{kind}.tsv` under
    /// `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let qe = dir.join("qe");
        let par = dir.join("parallel");
        for d in [&qe, &par] {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        for (name, data) in &self.pairs {
            for (split, samples) in [("train", &data.train), ("valid", &data.valid), ("test", &data.test)] {
                write_qe_dataset(qe.join(format!("{name}.{split}.tsv")), samples)?;
            }
            write_parallel(par.join(format!("{name}.pretrain.tsv")), &data.parallel)?;
            write_parallel(par.join(format!("{name}.augment.tsv")), &data.augmentation)?;
        }
        Ok(())
    }
}

/// Parallel corpus whose target is a copy of the source, drawn uniformly
/// from `words` distinct tokens.
pub fn copy_corpus<R: Rng + ?Sized>(n: usize, words: usize, min_len: usize, max_len: usize, rng: &mut R) -> Vec<ParallelPair> {
    (0..n)
        .map(|_| {
            let len = rng.gen_range(min_len..=max_len);
            let s: Vec<String> = (0..len).map(|_| format!("w{}", rng.gen_range(0..words))).collect();
            ParallelPair {
                source_tokens: s.clone(),
                target_tokens: s,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BenchmarkConfig {
        BenchmarkConfig {
            pairs: vec![PairSizes::new("et-en", 30, 10, 5, 8, 0), PairSizes::new("en-de", 10, 10, 0, 4, 6)],
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = Benchmark::generate(&small(), 3).unwrap();
        let b = Benchmark::generate(&small(), 3).unwrap();
        assert_eq!(a.pairs, b.pairs);
        let c = Benchmark::generate(&small(), 4).unwrap();
        assert_ne!(a.pairs, c.pairs);
    }

    #[test]
    fn split_sizes_and_standardization() {
        let b = Benchmark::generate(&small(), 0).unwrap();
        let et = b.pair("et-en").unwrap();
        assert_eq!((et.train.len(), et.valid.len(), et.test.len(), et.parallel.len()), (30, 10, 5, 8));
        let de = b.pair("en-de").unwrap();
        assert_eq!(de.augmentation.len(), 6);
        let all: Vec<f64> = et.train.iter().chain(&et.valid).chain(&et.test).map(|s| s.score).collect();
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / all.len() as f64;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gold_score_tracks_intact_words() {
        let cfg = small();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let world = World::new(&cfg, &mut rng).unwrap();
        let en = world.lexicon("en").unwrap().to_vec();
        let et = world.lexicon("et").unwrap().to_vec();
        for _ in 0..50 {
            let (s, t, frac) = world.corrupted_translation("et", "en", 0.6, &mut rng).unwrap();
            let intact = s
                .iter()
                .zip(&t)
                .filter(|(a, b)| et.iter().position(|w| w == *a) == en.iter().position(|w| w == *b))
                .count();
            assert_eq!(intact as f64 / s.len() as f64, frac);
        }
    }

    #[test]
    fn lexicons_are_disjoint_ciphers() {
        let b = Benchmark::generate(&small(), 1).unwrap();
        let langs: Vec<&str> = b.world.languages().collect();
        assert_eq!(langs, ["de", "en", "et"]);
        let en = b.world.lexicon("en").unwrap();
        let de = b.world.lexicon("de").unwrap();
        assert_eq!(en.len(), 24);
        assert!(en.iter().all(|w| !de.contains(w)));
        let p = &b.pair("en-de").unwrap().parallel[0];
        assert_eq!(p.source_tokens.len(), p.target_tokens.len());
    }

    #[test]
    fn write_creates_split_files() {
        let dir = tempfile::tempdir().unwrap();
        Benchmark::generate(&small(), 0).unwrap().write(dir.path()).unwrap();
        let loaded = crate::corpus::load_qe_dataset(dir.path().join("qe/et-en.valid.tsv"), "et-en").unwrap();
        assert_eq!(loaded.len(), 10);
        assert!(dir.path().join("parallel/en-de.augment.tsv").exists());
    }

    #[test]
    fn bad_configs() {
        let mut c = small();
        c.pairs.push(PairSizes::new("en", 5, 5, 0, 0, 0));
        assert!(Benchmark::generate(&c, 0).is_err());
        let mut c = small();
        c.min_len = 9;
        assert!(Benchmark::generate(&c, 0).is_err());
    }

    #[test]
    fn copy_corpus_copies() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for p in copy_corpus(5, 6, 3, 5, &mut rng) {
            assert_eq!(p.source_tokens, p.target_tokens);
            assert!((3..=5).contains(&p.source_tokens.len()));
        }
    }
}
