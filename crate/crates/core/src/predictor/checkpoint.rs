//! Predictor checkpoint files.
//!
//! Layout: one format-version byte, a little-endian `u64` manifest length,
//! the UTF-8 JSON manifest, then every tensor as little-endian `f32` values
//! concatenated in manifest order.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{Architecture, PredictorHyper, PredictorParams, EMBEDDING_PREFIX};
use crate::corpus::VocabFingerprint;
use crate::error::{Error, Result};
use crate::nn::params::Parameterized;

pub const FORMAT_VERSION: u8 = 1;
const HEADER_LEN: usize = 9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Byte offset into the payload.
    pub offset: usize,
}

impl TensorEntry {
    pub fn byte_len(&self) -> usize {
        self.shape[0] * self.shape[1] * 4
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u8,
    pub architecture: Architecture,
    pub hyper: PredictorHyper,
    pub source_fingerprint: VocabFingerprint,
    pub target_fingerprint: VocabFingerprint,
    pub source_vocab_size: usize,
    pub target_vocab_size: usize,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: usize,
}

impl Manifest {
    fn validate(&self) -> Result<()> {
        let mut expected = 0;
        for t in &self.tensors {
            if t.offset != expected {
                return Err(Error::CorruptManifest(format!(
                    "tensor {} starts at byte {}, expected {expected}",
                    t.name, t.offset
                )));
            }
            expected += t.byte_len();
        }
        if expected != self.payload_bytes {
            return Err(Error::CorruptManifest(format!(
                "tensor index covers {expected} bytes but payload_bytes is {}",
                self.payload_bytes
            )));
        }
        if self.architecture != self.hyper.architecture {
            return Err(Error::CorruptManifest("architecture tag disagrees with hyperparameters".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: PredictorParams,
}

pub fn to_bytes(params: &PredictorParams) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (name, t) in params.params() {
        let entry = TensorEntry {
            name,
            shape: [t.rows(), t.cols()],
            offset,
        };
        offset += entry.byte_len();
        tensors.push(entry);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        architecture: params.hyper.architecture,
        hyper: params.hyper,
        source_fingerprint: params.source_fingerprint.clone(),
        target_fingerprint: params.target_fingerprint.clone(),
        source_vocab_size: params.source_vocab_size(),
        target_vocab_size: params.target_vocab_size(),
        tensors,
        payload_bytes: offset,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + offset);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in params.params() {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn parse_header(bytes: &[u8]) -> Result<(Manifest, usize)> {
    let Some(&version) = bytes.first() else {
        return Err(Error::CorruptManifest("file is empty".into()));
    };
    if version != FORMAT_VERSION {
        return Err(Error::UnknownFormatVersion(version));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::CorruptManifest("truncated header".into()));
    }
    let len = u64::from_le_bytes(bytes[1..HEADER_LEN].try_into().expect("8 bytes")) as usize;
    let end = HEADER_LEN
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::CorruptManifest(format!("manifest length {len} exceeds file")))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes[HEADER_LEN..end]).map_err(|e| Error::CorruptManifest(e.to_string()))?;
    if manifest.format_version != version {
        return Err(Error::CorruptManifest("manifest version differs from header".into()));
    }
    manifest.validate()?;
    Ok((manifest, end))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let (manifest, start) = parse_header(bytes)?;
    let payload = &bytes[start..];
    if payload.len() != manifest.payload_bytes {
        return Err(Error::PayloadSize {
            expected: manifest.payload_bytes,
            found: payload.len(),
        });
    }
    let mut params = PredictorParams::with_sizes(
        manifest.hyper,
        manifest.source_vocab_size,
        manifest.target_vocab_size,
        manifest.source_fingerprint.clone(),
        manifest.target_fingerprint.clone(),
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .map_err(|e| Error::CorruptManifest(e.to_string()))?;
    {
        let slots = params.params_mut();
        let mut problems = Vec::new();
        if slots.len() != manifest.tensors.len() {
            problems.push(format!(
                "model has {} tensors, manifest lists {}",
                slots.len(),
                manifest.tensors.len()
            ));
        }
        for ((name, slot), entry) in slots.into_iter().zip(&manifest.tensors) {
            if name != entry.name || [slot.rows(), slot.cols()] != entry.shape {
                problems.push(format!(
                    "{name} {:?} vs manifest {} {:?}",
                    slot.shape(),
                    entry.name,
                    entry.shape
                ));
                continue;
            }
            let raw = &payload[entry.offset..entry.offset + entry.byte_len()];
            for (v, chunk) in slot.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
                *v = f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64;
            }
        }
        if !problems.is_empty() {
            return Err(Error::CorruptManifest(problems.join("; ")));
        }
    }
    Ok(Checkpoint { manifest, params })
}

pub fn save_checkpoint(params: &PredictorParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(params)?;
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Reads only the header and manifest; the payload is never loaded.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        let n = f.read(&mut header[got..]).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        got += n;
    }
    if got == 0 {
        return Err(Error::CorruptManifest("file is empty".into()));
    }
    if header[0] != FORMAT_VERSION {
        return Err(Error::UnknownFormatVersion(header[0]));
    }
    if got < HEADER_LEN {
        return Err(Error::CorruptManifest("truncated header".into()));
    }
    let len = u64::from_le_bytes(header[1..].try_into().expect("8 bytes"));
    let mut json = Vec::new();
    f.take(len).read_to_end(&mut json).map_err(|e| Error::io(path, e))?;
    if json.len() as u64 != len {
        return Err(Error::CorruptManifest(format!("manifest length {len} exceeds file")));
    }
    let mut bytes = header.to_vec();
    bytes.extend_from_slice(&json);
    Ok(parse_header(&bytes)?.0)
}

/// Copies every non-embedding tensor of the checkpoint at `path` into
/// `fresh`, keeping `fresh`'s embeddings and vocabulary fingerprints.
pub fn load_pretrained_excluding_embeddings(path: impl AsRef<Path>, fresh: PredictorParams) -> Result<PredictorParams> {
    let ckpt = load_checkpoint(path)?;
    transfer_excluding_embeddings(&ckpt.params, fresh)
}

pub fn transfer_excluding_embeddings(pretrained: &PredictorParams, mut fresh: PredictorParams) -> Result<PredictorParams> {
    let mut problems = Vec::new();
    if pretrained.hyper.architecture != fresh.hyper.architecture {
        problems.push(format!(
            "architecture {} vs {}",
            pretrained.hyper.architecture, fresh.hyper.architecture
        ));
    }
    let source: std::collections::HashMap<String, &crate::nn::Tensor2> = pretrained.params().into_iter().collect();
    for (name, t) in fresh.params() {
        if name.starts_with(EMBEDDING_PREFIX) {
            continue;
        }
        match source.get(&name) {
            Some(s) if s.shape() == t.shape() => {}
            Some(s) => problems.push(format!("{name}: checkpoint {:?}, model {:?}", s.shape(), t.shape())),
            None => problems.push(format!("{name}: missing from checkpoint")),
        }
    }
    if !problems.is_empty() {
        return Err(Error::IncompatibleTensors(problems));
    }
    for (name, t) in fresh.params_mut() {
        if let Some(s) = source.get(&name).filter(|_| !name.starts_with(EMBEDDING_PREFIX)) {
            t.data_mut().copy_from_slice(s.data());
        }
    }
    Ok(fresh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::params::PredictorHyper;
    use crate::nn::Tensor2;

    fn fp(s: &str) -> VocabFingerprint {
        VocabFingerprint(s.into())
    }

    fn model(hyper: PredictorHyper, seed: u64) -> PredictorParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PredictorParams::with_sizes(hyper, 9, 11, fp("s"), fp("t"), &mut rng).unwrap()
    }

    fn rounded(p: &PredictorParams) -> PredictorParams {
        let mut q = p.clone();
        for (_, t) in q.params_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        q
    }

    #[test]
    fn round_trip_is_exact_at_single_precision() {
        for hyper in [PredictorHyper::rnn().with_hidden(4), PredictorHyper::transformer().with_hidden(8)] {
            let p = model(PredictorHyper { layers: 2, ..hyper }, 1);
            let back = from_bytes(&to_bytes(&p).unwrap()).unwrap();
            assert_eq!(back.params, rounded(&p));
            for ((_, a), (_, b)) in back.params.params().into_iter().zip(rounded(&p).params()) {
                assert_eq!(a.max_abs_diff(b), 0.0);
            }
        }
    }

    #[test]
    fn corrupted_files_are_rejected_by_class() {
        let p = model(PredictorHyper::rnn().with_hidden(4), 2);
        let bytes = to_bytes(&p).unwrap();

        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(from_bytes(truncated), Err(Error::PayloadSize { .. })));

        let mut wrong_version = bytes.clone();
        wrong_version[0] = 7;
        assert!(matches!(from_bytes(&wrong_version), Err(Error::UnknownFormatVersion(7))));

        let mut garbled = bytes.clone();
        garbled[HEADER_LEN] = b'#';
        assert!(matches!(from_bytes(&garbled), Err(Error::CorruptManifest(_))));

        assert!(matches!(from_bytes(&bytes[..5]), Err(Error::CorruptManifest(_))));
        assert!(matches!(from_bytes(&[]), Err(Error::CorruptManifest(_))));
    }

    #[test]
    fn manifest_reads_without_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let p = model(PredictorHyper::rnn().with_hidden(4), 3);
        save_checkpoint(&p, &path).unwrap();
        // Chop the payload off entirely; the manifest must still read.
        let bytes = std::fs::read(&path).unwrap();
        let (_, end) = parse_header(&bytes).unwrap();
        std::fs::write(&path, &bytes[..end]).unwrap();
        let m = read_manifest(&path).unwrap();
        assert_eq!(m.tensors.last().unwrap().name, "output.w");
        assert_eq!(m.tensors.last().unwrap().shape, [8, 11]);
        assert!(matches!(load_checkpoint(&path), Err(Error::PayloadSize { found: 0, .. })));
    }

    #[test]
    fn transfer_keeps_fresh_embeddings_only() {
        let hyper = PredictorHyper::rnn().with_hidden(4);
        let pre = rounded(&model(hyper, 4));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fresh = PredictorParams::with_sizes(hyper, 13, 17, fp("s2"), fp("t2"), &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pre.ckpt");
        save_checkpoint(&pre, &path).unwrap();

        // Different target vocabulary size changes W's column count.
        let err = load_pretrained_excluding_embeddings(&path, fresh.clone()).unwrap_err();
        match err {
            Error::IncompatibleTensors(list) => {
                assert_eq!(list.len(), 1);
                assert!(list[0].starts_with("output.w"), "{list:?}");
            }
            other => panic!("unexpected {other:?}"),
        }

        let fresh = PredictorParams::with_sizes(hyper, 13, 11, fp("s2"), fp("t2"), &mut rng).unwrap();
        let out = load_pretrained_excluding_embeddings(&path, fresh.clone()).unwrap();
        let pre_tensors: std::collections::HashMap<String, Tensor2> =
            pre.params().into_iter().map(|(n, t)| (n, t.clone())).collect();
        for (name, t) in out.params() {
            if name.starts_with(EMBEDDING_PREFIX) {
                let kept = fresh.params().into_iter().find(|(n, _)| *n == name).unwrap().1.clone();
                assert_eq!(*t, kept, "{name}");
            } else {
                assert_eq!(*t, pre_tensors[&name], "{name}");
            }
        }
        assert_eq!(out.source_fingerprint, fp("s2"));
    }

    #[test]
    fn transfer_rejects_different_width() {
        let pre = model(PredictorHyper::rnn().with_hidden(8), 6);
        let fresh = model(PredictorHyper::rnn().with_hidden(4), 7);
        match transfer_excluding_embeddings(&pre, fresh) {
            Err(Error::IncompatibleTensors(list)) => assert!(list.len() > 5),
            other => panic!("unexpected {other:?}"),
        }
    }
}
