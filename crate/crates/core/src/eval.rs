//! Pearson correlation and per-language / pooled reporting.
//!
//! A pooled group's correlation is computed once over the concatenation of
//! its members' (prediction, gold) pairs, not averaged across members.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn pearson(pred: &[f64], gold: &[f64]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(Error::shape(
            "pearson",
            format!("{} predictions vs {} gold scores", pred.len(), gold.len()),
        ));
    }
    if pred.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "pearson needs at least 2 pairs, got {}",
            pred.len()
        )));
    }
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let mg = gold.iter().sum::<f64>() / n;
    let (mut spg, mut spp, mut sgg) = (0.0, 0.0, 0.0);
    for (p, g) in pred.iter().zip(gold) {
        let (dp, dg) = (p - mp, g - mg);
        spg += dp * dg;
        spp += dp * dp;
        sgg += dg * dg;
    }
    if spp == 0.0 {
        return Err(Error::ConstantSequence("predictions"));
    }
    if sgg == 0.0 {
        return Err(Error::ConstantSequence("gold scores"));
    }
    Ok((spg / (spp.sqrt() * sgg.sqrt())).clamp(-1.0, 1.0))
}

/// One scored instance with its gold score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub language_pair: String,
    pub pred: f64,
    pub gold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupScore {
    pub r: f64,
    pub n: usize,
}

/// Named pooled groups, each a list of language pairs.
pub type Grouping = BTreeMap<String, Vec<String>>;

/// High-resource and low-resource pools over the five benchmark pairs.
pub fn default_grouping() -> Grouping {
    let mut g = Grouping::new();
    g.insert("et+ne+ro".into(), vec!["et-en".into(), "ne-en".into(), "ro-en".into()]);
    g.insert("zh+de".into(), vec!["en-zh".into(), "en-de".into()]);
    g
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_language: BTreeMap<String, GroupScore>,
    pub pooled: BTreeMap<String, GroupScore>,
    /// Groups that could not be scored, with the reason.
    pub warnings: Vec<String>,
}

fn score_group(items: &[&EvalItem]) -> Result<GroupScore> {
    let pred: Vec<f64> = items.iter().map(|i| i.pred).collect();
    let gold: Vec<f64> = items.iter().map(|i| i.gold).collect();
    Ok(GroupScore {
        r: pearson(&pred, &gold)?,
        n: items.len(),
    })
}

pub fn report(items: &[EvalItem], grouping: &Grouping) -> EvalReport {
    let mut by_lang: BTreeMap<&str, Vec<&EvalItem>> = BTreeMap::new();
    for item in items {
        by_lang.entry(&item.language_pair).or_default().push(item);
    }
    let mut out = EvalReport::default();
    for (lang, members) in &by_lang {
        match score_group(members) {
            Ok(s) => {
                out.per_language.insert(lang.to_string(), s);
            }
            Err(e) => out.warnings.push(format!("{lang}: {e}")),
        }
    }
    for (group, langs) in grouping {
        let members: Vec<&EvalItem> = langs
            .iter()
            .filter_map(|l| by_lang.get(l.as_str()))
            .flatten()
            .copied()
            .collect();
        if members.is_empty() {
            continue;
        }
        match score_group(&members) {
            Ok(s) => {
                out.pooled.insert(group.clone(), s);
            }
            Err(e) => out.warnings.push(format!("{group}: {e}")),
        }
    }
    out
}

impl EvalReport {
    /// Column names in display order: per-language first, then pooled groups.
    pub fn columns(&self) -> Vec<String> {
        self.per_language.keys().chain(self.pooled.keys()).cloned().collect()
    }

    pub fn get(&self, column: &str) -> Option<GroupScore> {
        self.per_language
            .get(column)
            .or_else(|| self.pooled.get(column))
            .copied()
    }

    /// Aligned plain-text table: a header row, an `r` row and an `n` row.
    pub fn to_table(&self) -> String {
        let cols = self.columns();
        let width = cols.iter().map(|c| c.len()).max().unwrap_or(0).max(7);
        let mut out = format!("{:<4}", "");
        for c in &cols {
            out.push_str(&format!(" {c:>width$}"));
        }
        out.push_str(&format!("\n{:<4}", "r"));
        for c in &cols {
            out.push_str(&format!(" {:>width$.4}", self.get(c).expect("listed column").r));
        }
        out.push_str(&format!("\n{:<4}", "n"));
        for c in &cols {
            out.push_str(&format!(" {:>width$}", self.get(c).expect("listed column").n));
        }
        out.push('\n');
        for w in &self.warnings {
            out.push_str(&format!("warning: {w}\n"));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
