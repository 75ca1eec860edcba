//! Binary containers for feature datasets and model checkpoints.
//!
//! Both start with the magic `COME` and a little-endian `u32` format
//! version. All integers are little-endian `u32` unless noted.
//!
//! Feature container:
//!
//! ```text
//! "COME" version N T D
//! N × { source label  T·D × f32 }
//! ```
//!
//! Checkpoint:
//!
//! ```text
//! "COME" version "CKPT"
//! S  S × u64              frozen-expert seeds
//! B  B × { len name  rows cols  rows·cols × f32 }
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, GeneratorConfig, Sample};
use crate::error::{ComeError, Result};
use crate::numerics::{Mat, Parameters};

pub const MAGIC: &[u8; 4] = b"COME";
pub const FORMAT_VERSION: u32 = 1;
const CHECKPOINT_TAG: &[u8; 4] = b"CKPT";

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| ComeError::Format(format!("{what} = {v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(ComeError::Format(format!(
                "truncated: wanted {n} bytes at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| ComeError::Format("length overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }

    fn header(&mut self) -> Result<()> {
        if self.take(4)? != MAGIC {
            return Err(ComeError::Format("missing COME magic".into()));
        }
        let v = self.u32()?;
        if v != FORMAT_VERSION as usize {
            return Err(ComeError::Format(format!("unsupported format version {v}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(ComeError::Format(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn push_f32s(out: &mut Vec<u8>, data: &[f64]) {
    for &x in data {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

/// Serializes a dataset into the feature container.
pub fn encode_dataset(data: &Dataset) -> Result<Vec<u8>> {
    let per = data.tokens * data.width;
    let mut out = Vec::with_capacity(20 + data.len() * (8 + 4 * per));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_u32(&mut out, data.len(), "N")?;
    put_u32(&mut out, data.tokens, "T")?;
    put_u32(&mut out, data.width, "D")?;
    for s in &data.samples {
        if s.tokens.shape() != (data.tokens, data.width) {
            return Err(ComeError::shape(
                "encode_dataset",
                format!("{}x{}", data.tokens, data.width),
                format!("{:?}", s.tokens.shape()),
            ));
        }
        put_u32(&mut out, s.source, "source")?;
        put_u32(&mut out, s.label, "label")?;
        push_f32s(&mut out, s.tokens.data());
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.header()?;
    let (n, t, d) = (r.u32()?, r.u32()?, r.u32()?);
    let expect = (t * d)
        .checked_mul(4)
        .and_then(|b| b.checked_add(8))
        .and_then(|b| b.checked_mul(n))
        .and_then(|b| b.checked_add(20));
    if expect != Some(bytes.len()) {
        return Err(ComeError::Format(format!(
            "feature container of {} bytes does not match header N={n} T={t} D={d}",
            bytes.len()
        )));
    }
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let source = r.u32()?;
        let label = r.u32()?;
        let tokens = Mat::new(t, d, r.f32s(t * d)?)?;
        samples.push(Sample { tokens, source, label });
    }
    r.finish()?;
    Ok(Dataset {
        tokens: t,
        width: d,
        samples,
    })
}

/// JSON sidecar written next to a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSidecar {
    pub generator: GeneratorConfig,
    pub seed: u64,
    pub train_samples: usize,
    pub test_samples: usize,
    pub train_source_counts: Vec<usize>,
    pub test_source_counts: Vec<usize>,
    pub train_sha256: String,
    pub test_sha256: String,
}

pub const TRAIN_FILE: &str = "train.bin";
pub const TEST_FILE: &str = "test.bin";
pub const SIDECAR_FILE: &str = "dataset.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

/// Writes `train.bin`, `test.bin` and `dataset.json` into `dir`.
pub fn write_dataset_dir(
    dir: &Path,
    train: &Dataset,
    test: &Dataset,
    generator: &GeneratorConfig,
    seed: u64,
) -> Result<DatasetSidecar> {
    fs::create_dir_all(dir)?;
    let tr = encode_dataset(train)?;
    let te = encode_dataset(test)?;
    fs::write(dir.join(TRAIN_FILE), &tr)?;
    fs::write(dir.join(TEST_FILE), &te)?;
    let sidecar = DatasetSidecar {
        generator: generator.clone(),
        seed,
        train_samples: train.len(),
        test_samples: test.len(),
        train_source_counts: train.source_counts(generator.sources),
        test_source_counts: test.source_counts(generator.sources),
        train_sha256: sha256_hex(&tr),
        test_sha256: sha256_hex(&te),
    };
    fs::write(dir.join(SIDECAR_FILE), serde_json::to_string_pretty(&sidecar)? + "\n")?;
    Ok(sidecar)
}

/// Reads a directory written by [`write_dataset_dir`], checking digests.
pub fn read_dataset_dir(dir: &Path) -> Result<(Dataset, Dataset, DatasetSidecar)> {
    let sidecar: DatasetSidecar = serde_json::from_slice(&fs::read(dir.join(SIDECAR_FILE))?)?;
    let tr = fs::read(dir.join(TRAIN_FILE))?;
    let te = fs::read(dir.join(TEST_FILE))?;
    for (name, bytes, want) in [
        (TRAIN_FILE, &tr, &sidecar.train_sha256),
        (TEST_FILE, &te, &sidecar.test_sha256),
    ] {
        if &sha256_hex(bytes) != want {
            return Err(ComeError::Format(format!("{name} does not match its sidecar digest")));
        }
    }
    Ok((decode_dataset(&tr)?, decode_dataset(&te)?, sidecar))
}

/// Named parameter blobs plus the frozen-expert seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub frozen_seeds: Vec<u64>,
    pub blobs: Vec<(String, Mat)>,
}

impl Checkpoint {
    pub fn from_params(params: &impl Parameters, frozen_seeds: Vec<u64>) -> Self {
        let mut blobs = Vec::new();
        params.visit(&mut |name, m| blobs.push((name.to_string(), m.clone())));
        Checkpoint { frozen_seeds, blobs }
    }

    /// Copies blobs into `params` by name. Every parameter must be present
    /// with the right shape and no blob may be left over.
    pub fn load_into(&self, params: &mut impl Parameters) -> Result<()> {
        let mut used = vec![false; self.blobs.len()];
        let mut err = None;
        params.visit_mut(&mut |name, m| {
            if err.is_some() {
                return;
            }
            match self.blobs.iter().position(|(n, _)| n == name) {
                Some(i) if self.blobs[i].1.shape() == m.shape() => {
                    m.data_mut().copy_from_slice(self.blobs[i].1.data());
                    used[i] = true;
                }
                Some(i) => {
                    err = Some(ComeError::shape(
                        "checkpoint",
                        format!("{name} {:?}", m.shape()),
                        format!("{:?}", self.blobs[i].1.shape()),
                    ))
                }
                None => err = Some(ComeError::Format(format!("checkpoint lacks parameter {name}"))),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if let Some(i) = used.iter().position(|u| !u) {
            return Err(ComeError::Format(format!(
                "checkpoint blob {} matches no parameter",
                self.blobs[i].0
            )));
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(CHECKPOINT_TAG);
        put_u32(&mut out, self.frozen_seeds.len(), "seed count")?;
        for s in &self.frozen_seeds {
            out.extend_from_slice(&s.to_le_bytes());
        }
        put_u32(&mut out, self.blobs.len(), "blob count")?;
        for (name, m) in &self.blobs {
            put_u32(&mut out, name.len(), "name length")?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, m.rows(), "rows")?;
            put_u32(&mut out, m.cols(), "cols")?;
            push_f32s(&mut out, m.data());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        r.header()?;
        if r.take(4)? != CHECKPOINT_TAG {
            return Err(ComeError::Format("not a checkpoint container".into()));
        }
        let n_seeds = r.u32()?;
        let frozen_seeds = (0..n_seeds).map(|_| r.u64()).collect::<Result<_>>()?;
        let n_blobs = r.u32()?;
        let mut blobs = Vec::with_capacity(n_blobs.min(1024));
        for _ in 0..n_blobs {
            let len = r.u32()?;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| ComeError::Format("blob name is not UTF-8".into()))?;
            let (rows, cols) = (r.u32()?, r.u32()?);
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| ComeError::Format(format!("blob {name} too large")))?;
            blobs.push((name, Mat::new(rows, cols, r.f32s(n)?)?));
        }
        r.finish()?;
        Ok(Checkpoint { frozen_seeds, blobs })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::decode(&bytes)
    }
}
