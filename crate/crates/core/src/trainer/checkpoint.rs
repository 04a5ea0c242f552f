//! Single-file training checkpoints: a JSON metadata record followed by named
//! little-endian parameter and optimizer arrays, closed by a CRC-32.
//!
//! Layout: `ATNGCKPT` magic, `u32` format version, `u32` metadata length,
//! metadata JSON, `u32` tensor count, then per tensor `u32` name length,
//! name, `u32` rank, `u64` dims, raw values; finally the CRC-32 of all
//! preceding bytes.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use attnage_tensor::{Adam, AdamConfig, DType, Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainState;
use crate::conditioning::AgeGroupScheme;
use crate::error::{Error, Result};
use crate::models::{Discriminator, Generator, ModelConfig, ParamsExt};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"ATNGCKPT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct AdamState {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

impl AdamState {
    fn of<T: Scalar>(opt: &Adam<T>) -> Self {
        let c = opt.config;
        AdamState {
            lr: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
            step: opt.step_count(),
        }
    }

    fn config(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Metadata stored ahead of the arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub dtype: String,
    pub resolution: [usize; 2],
    pub scheme: AgeGroupScheme,
    pub model: ModelConfig,
    pub step: u64,
    rng: RngState,
    gen_adam: AdamState,
    disc_adam: AdamState,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(s.get(2 * i..2 * i + 2)?, 16).ok()?;
    }
    Some(out)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor<T: Scalar>(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[T]) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len() as u32);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in data {
        v.write_le(out);
    }
}

fn adam_entries<'a, T: Scalar>(
    prefix: &str,
    opt: &'a Adam<T>,
    params: &[&Tensor<T>],
) -> Vec<(String, Vec<usize>, &'a [T])> {
    let (first, second) = opt.moments();
    let mut out = Vec::new();
    for (kind, moments) in [("m", first), ("v", second)] {
        for (i, (m, p)) in moments.iter().zip(params).enumerate() {
            out.push((format!("{prefix}.{kind}.{i}"), p.shape().to_vec(), m.as_slice()));
        }
    }
    out
}

/// Writes `state` to `path` (via a temporary file and rename).
pub fn save_checkpoint<T: Scalar>(state: &TrainState<T>, path: &Path) -> Result<()> {
    let (h, w) = state.resolution();
    let meta = CheckpointMeta {
        version: CHECKPOINT_VERSION,
        dtype: T::DTYPE.name().to_string(),
        resolution: [h, w],
        scheme: state.scheme.clone(),
        model: state.model_config.clone(),
        step: state.step,
        rng: RngState {
            seed: hex(&state.rng.get_seed()),
            stream: state.rng.get_stream(),
            word_pos: state.rng.get_word_pos().to_string(),
        },
        gen_adam: AdamState::of(&state.gen_opt),
        disc_adam: AdamState::of(&state.disc_opt),
    };
    let meta_json = serde_json::to_vec(&meta).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;

    let gen = state.generator.named_parameters();
    let disc = state.discriminator.named_parameters();
    let mut entries: Vec<(String, Vec<usize>, &[T])> = Vec::new();
    for (prefix, params) in [("generator", &gen), ("discriminator", &disc)] {
        for (name, t) in params.iter() {
            entries.push((format!("{prefix}.{name}"), t.shape().to_vec(), t.data()));
        }
    }
    let gen_refs: Vec<&Tensor<T>> = gen.iter().map(|(_, t)| *t).collect();
    let disc_refs: Vec<&Tensor<T>> = disc.iter().map(|(_, t)| *t).collect();
    entries.extend(adam_entries("adam.generator", &state.gen_opt, &gen_refs));
    entries.extend(adam_entries("adam.discriminator", &state.disc_opt, &disc_refs));

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u32(&mut out, meta_json.len() as u32);
    out.extend_from_slice(&meta_json);
    put_u32(&mut out, entries.len() as u32);
    for (name, shape, data) in &entries {
        put_tensor(&mut out, name, shape, data);
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);

    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, &out).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

struct Archive<T> {
    meta: CheckpointMeta,
    tensors: Vec<(String, Vec<usize>, Vec<T>)>,
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_header(path: &Path, bytes: &[u8]) -> Result<(CheckpointMeta, usize)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len()) != Some(MAGIC.as_slice()) {
        return Err(corrupt(path, "not a checkpoint file (bad magic)"));
    }
    let version = r.u32().ok_or_else(|| corrupt(path, "truncated header"))?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if bytes.len() < 4 {
        return Err(corrupt(path, "truncated file"));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(corrupt(path, format!("checksum mismatch (format version {version})")));
    }
    let len = r.u32().ok_or_else(|| corrupt(path, "truncated header"))? as usize;
    let json = r.take(len).ok_or_else(|| corrupt(path, "truncated metadata"))?;
    let meta: CheckpointMeta =
        serde_json::from_slice(json).map_err(|e| corrupt(path, format!("metadata: {e}")))?;
    Ok((meta, r.pos))
}

fn read_archive<T: Scalar>(path: &Path) -> Result<Archive<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (meta, pos) = read_header(path, &bytes)?;
    if meta.dtype != T::DTYPE.name() {
        return Err(corrupt(
            path,
            format!("stored as {} but loaded as {}", meta.dtype, T::DTYPE.name()),
        ));
    }
    let body = &bytes[..bytes.len() - 4];
    let mut r = Reader { bytes: body, pos };
    let truncated = || corrupt(path, "truncated tensor data");
    let count = r.u32().ok_or_else(truncated)?;
    let size = DType::size_of(T::DTYPE);
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = r.u32().ok_or_else(truncated)? as usize;
        let name = String::from_utf8(r.take(len).ok_or_else(truncated)?.to_vec())
            .map_err(|_| corrupt(path, "tensor name is not UTF-8"))?;
        let rank = r.u32().ok_or_else(truncated)? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(truncated)?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * size).ok_or_else(truncated)?;
        let data = raw.chunks_exact(size).map(T::read_le).collect();
        tensors.push((name, shape, data));
    }
    if r.pos != body.len() {
        return Err(corrupt(path, "trailing bytes after tensor data"));
    }
    Ok(Archive { meta, tensors })
}

/// Metadata only, after validating magic, version and checksum.
pub fn read_checkpoint_meta(path: &Path) -> Result<CheckpointMeta> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(read_header(path, &bytes)?.0)
}

fn assign<T: Scalar>(
    path: &Path,
    prefix: &str,
    named: Vec<String>,
    params: Vec<&mut Tensor<T>>,
    store: &mut HashMap<String, (Vec<usize>, Vec<T>)>,
) -> Result<()> {
    for (name, p) in named.into_iter().zip(params) {
        let key = format!("{prefix}.{name}");
        let (shape, data) = store
            .remove(&key)
            .ok_or_else(|| corrupt(path, format!("missing tensor {key}")))?;
        if shape != p.shape() {
            return Err(corrupt(
                path,
                format!("tensor {key} has shape {shape:?}, model expects {:?}", p.shape()),
            ));
        }
        *p = Tensor::parameter(data, &shape)?;
    }
    Ok(())
}

fn take_moments<T: Scalar>(
    path: &Path,
    prefix: &str,
    kind: &str,
    count: usize,
    store: &mut HashMap<String, (Vec<usize>, Vec<T>)>,
) -> Result<Vec<Vec<T>>> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        match store.remove(&format!("{prefix}.{kind}.{}", out.len())) {
            Some((_, data)) => out.push(data),
            None => break,
        }
    }
    // An optimizer that never stepped has no moments yet.
    if out.is_empty() || out.len() == count {
        Ok(out)
    } else {
        Err(corrupt(path, format!("incomplete optimizer moments {prefix}.{kind}")))
    }
}

/// Restores a training state. With `expected_resolution`, a checkpoint built
/// for a different resolution is rejected.
pub fn load_checkpoint<T: Scalar>(path: &Path, expected_resolution: Option<(usize, usize)>) -> Result<TrainState<T>> {
    let archive = read_archive::<T>(path)?;
    let meta = archive.meta;
    let resolution = (meta.resolution[0], meta.resolution[1]);
    if let Some(expected) = expected_resolution {
        if expected != resolution {
            return Err(corrupt(
                path,
                format!(
                    "checkpoint resolution {}x{} does not match configured {}x{}",
                    resolution.0, resolution.1, expected.0, expected.1
                ),
            ));
        }
    }
    let mut store: HashMap<_, _> = archive
        .tensors
        .into_iter()
        .map(|(n, s, d)| (n, (s, d)))
        .collect();

    let mut dummy = ChaCha8Rng::seed_from_u64(0);
    let mut generator = Generator::<T>::new(&meta.model, resolution, &mut dummy)?;
    let mut discriminator = Discriminator::<T>::new(&meta.model, resolution, &mut dummy)?;
    let gen_names: Vec<String> = generator.named_parameters().into_iter().map(|(n, _)| n).collect();
    let disc_names: Vec<String> = discriminator.named_parameters().into_iter().map(|(n, _)| n).collect();
    let (gen_count, disc_count) = (gen_names.len(), disc_names.len());
    assign(path, "generator", gen_names, generator.parameters_mut(), &mut store)?;
    assign(path, "discriminator", disc_names, discriminator.parameters_mut(), &mut store)?;

    let mut optimizer = |prefix: &str, count: usize, state: &AdamState| -> Result<Adam<T>> {
        let first = take_moments(path, prefix, "m", count, &mut store)?;
        let second = take_moments(path, prefix, "v", count, &mut store)?;
        Ok(Adam::from_state(state.config(), state.step, first, second)?)
    };
    let gen_opt = optimizer("adam.generator", gen_count, &meta.gen_adam)?;
    let disc_opt = optimizer("adam.discriminator", disc_count, &meta.disc_adam)?;
    if let Some(extra) = store.keys().next() {
        return Err(corrupt(path, format!("unexpected tensor {extra}")));
    }

    let seed = unhex(&meta.rng.seed).ok_or_else(|| corrupt(path, "bad rng seed"))?;
    let word_pos: u128 = meta
        .rng
        .word_pos
        .parse()
        .map_err(|_| corrupt(path, "bad rng position"))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(meta.rng.stream);
    rng.set_word_pos(word_pos);

    Ok(TrainState {
        generator,
        discriminator,
        gen_opt,
        disc_opt,
        step: meta.step,
        rng,
        model_config: meta.model,
        scheme: meta.scheme,
    })
}
