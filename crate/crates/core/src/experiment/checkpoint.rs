//! Binary posterior checkpoints.
//!
//! Layout, little-endian: magic `RCBN`, format version `u16`, estimator code
//! `u8`, model descriptor as `u16` length plus UTF-8 bytes, parameter count
//! `u64`, sample count `u32`, the samples as `f32`, then a CRC32 of every
//! preceding byte.

use std::path::Path;

use crate::error::{Error, Result};
use crate::estimators::{EstimatorKind, Posterior, PosteriorSampleSet, SampleMeta, VariationalPosterior};
use crate::model::{ModelSpec, ParameterVector};

const MAGIC: &[u8; 4] = b"RCBN";
const VERSION: u16 = 1;

pub fn encode(posterior: &Posterior) -> Result<Vec<u8>> {
    let spec = posterior.spec();
    let descriptor = spec.descriptor();
    let desc_len = u16::try_from(descriptor.len())
        .map_err(|_| Error::Checkpoint("model descriptor too long".into()))?;
    let vectors = posterior.vectors();
    let params = spec.layout().len;
    let mut out = Vec::with_capacity(32 + descriptor.len() + 4 * params * vectors.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(posterior.estimator().code());
    out.extend_from_slice(&desc_len.to_le_bytes());
    out.extend_from_slice(descriptor.as_bytes());
    out.extend_from_slice(&(params as u64).to_le_bytes());
    out.extend_from_slice(&(vectors.len() as u32).to_le_bytes());
    for v in vectors {
        if v.len() != params {
            return Err(Error::Layout { expected: params, found: v.len() });
        }
        for &x in v {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Posterior> {
    if bytes.len() < 4 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Checkpoint("CRC mismatch".into()));
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u16::from_le_bytes(r.array("version")?);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let code = r.array::<1>("estimator")?[0];
    let estimator = EstimatorKind::from_code(code)
        .ok_or_else(|| Error::Checkpoint(format!("unknown estimator code {code}")))?;
    let desc_len = u16::from_le_bytes(r.array("descriptor length")?) as usize;
    let descriptor = std::str::from_utf8(r.take(desc_len, "descriptor")?)
        .map_err(|_| Error::Checkpoint("descriptor is not UTF-8".into()))?;
    let spec = ModelSpec::from_descriptor(descriptor)?;
    let params = u64::from_le_bytes(r.array("parameter count")?) as usize;
    let count = u32::from_le_bytes(r.array("sample count")?) as usize;
    if params != spec.layout().len {
        return Err(Error::Checkpoint(format!(
            "{params} parameters declared, descriptor implies {}",
            spec.layout().len
        )));
    }
    let payload = params
        .checked_mul(count)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Checkpoint("declared sizes overflow".into()))?;
    if body.len() - r.pos != payload {
        return Err(Error::Checkpoint(format!(
            "payload holds {} bytes, header declares {payload}",
            body.len() - r.pos
        )));
    }
    let mut vectors: Vec<Vec<f64>> = r
        .take(payload, "samples")?
        .chunks_exact(4 * params.max(1))
        .map(|c| {
            c.chunks_exact(4)
                .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
                .collect()
        })
        .collect();
    vectors.truncate(count);
    match estimator {
        EstimatorKind::Mcd => {
            let [weights]: [Vec<f64>; 1] = vectors
                .try_into()
                .map_err(|_| Error::Checkpoint("dropout checkpoint must hold one vector".into()))?;
            Ok(Posterior::Dropout { spec, weights: ParameterVector(weights) })
        }
        EstimatorKind::Vi => {
            let [mu, rho]: [Vec<f64>; 2] = vectors
                .try_into()
                .map_err(|_| Error::Checkpoint("variational checkpoint must hold mean and scale".into()))?;
            Ok(Posterior::Variational { spec, q: VariationalPosterior::new(mu, rho)? })
        }
        _ => {
            let meta = (0..vectors.len())
                .map(|i| SampleMeta { iteration: i, step_size: 0.0 })
                .collect();
            let samples = vectors.into_iter().map(ParameterVector).collect();
            Ok(Posterior::Samples(PosteriorSampleSet::new(spec, estimator, samples, meta)?))
        }
    }
}

pub fn save(path: &Path, posterior: &Posterior) -> Result<()> {
    let bytes = encode(posterior)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Posterior> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
