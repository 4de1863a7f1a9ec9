//! Cumulative results table: one row per (preset, config hash).

use std::fs::OpenOptions;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};

use qeforge::eval::EvalReport;

/// Score columns and the report entries they are read from.
pub const COLUMNS: [(&str, &str); 7] = [
    ("et", "et-en"),
    ("ne", "ne-en"),
    ("ro", "ro-en"),
    ("et+ne+ro", "et+ne+ro"),
    ("de", "en-de"),
    ("zh", "en-zh"),
    ("zh+de", "zh+de"),
];

pub fn header() -> String {
    let mut h = vec!["model", "config_hash", "seed"];
    h.extend(COLUMNS.iter().map(|c| c.0));
    h.join("\t")
}

pub fn row(preset: &str, config_hash: &str, seed: u64, report: &EvalReport) -> String {
    let mut cells = vec![preset.to_string(), config_hash.to_string(), seed.to_string()];
    for (_, key) in COLUMNS {
        cells.push(report.get(key).map_or_else(|| "-".to_string(), |s| format!("{:.4}", s.r)));
    }
    cells.join("\t")
}

/// Inserts or replaces the row keyed by `(preset, config_hash)` while
/// holding an exclusive lock on the file.
pub fn record(path: &Path, preset: &str, config_hash: &str, seed: u64, report: &EvalReport) -> Result<()> {
    let mut file = OpenOptions::new()
        .read(true)
        .write(true)
        .create(true)
        .truncate(false)
        .open(path)
        .with_context(|| format!("opening results table {}", path.display()))?;
    file.lock().with_context(|| format!("locking {}", path.display()))?;
    let mut text = String::new();
    file.read_to_string(&mut text)?;
    let head = header();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    match lines.first() {
        None => lines.push(head),
        Some(first) if *first == head => {}
        Some(first) => bail!("{} has unexpected header {first:?}", path.display()),
    }
    let new = row(preset, config_hash, seed, report);
    let key = |l: &str| l.split('\t').take(2).map(str::to_string).collect::<Vec<_>>();
    let want = key(&new);
    match lines.iter().skip(1).position(|l| key(l) == want) {
        Some(i) => lines[i + 1] = new,
        None => lines.push(new),
    }
    let mut out = lines.join("\n");
    out.push('\n');
    file.seek(SeekFrom::Start(0))?;
    file.set_len(0)?;
    file.write_all(out.as_bytes())?;
    file.flush()?;
    file.unlock()?;
    Ok(())
}
