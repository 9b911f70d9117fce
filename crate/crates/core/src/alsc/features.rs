use std::collections::HashMap;
use std::io::{Read, Write};

use rand_distr::{Distribution, StandardNormal};

use super::data::AlscInstance;
use crate::error::{Error, Result};
use crate::rng::{self, fnv1a};
use crate::tape::Mat;

/// Token substituted for removed explanation words.
pub const MASK_TOKEN: &str = "[MASK]";

#[derive(Debug, Clone, PartialEq)]
pub struct TextFeatures {
    pub h: Vec<f64>,
    /// Per-token vectors, one row per token, when the provider has them.
    pub tokens: Option<Mat>,
}

pub trait TextProvider {
    fn dim(&self) -> usize;

    fn features(&self, inst: &AlscInstance) -> Result<TextFeatures>;

    /// Features for `tokens` with some positions replaced by the mask token.
    /// Providers without token-level vectors return the unmodified features
    /// when nothing is masked and an error otherwise.
    fn masked_features(&self, inst: &AlscInstance, masked: &[usize]) -> Result<TextFeatures>;
}

/// Seeded token-hashing encoder: every token string maps to a fixed Gaussian
/// vector; `h` is the mean over tokens with aspect tokens counted twice.
#[derive(Debug, Clone)]
pub struct ToyEncoder {
    pub dim: usize,
    pub seed: u64,
}

impl ToyEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        ToyEncoder { dim, seed }
    }

    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut r = rng::stream_indexed(self.seed, "toy.token", fnv1a(token.as_bytes()));
        let scale = 1.0 / (self.dim as f64).sqrt();
        (0..self.dim)
            .map(|_| {
                let x: f64 = StandardNormal.sample(&mut r);
                x * scale
            })
            .collect()
    }

    pub fn encode(&self, tokens: &[String], span: (usize, usize)) -> Result<TextFeatures> {
        if tokens.is_empty() {
            return Err(Error::Invalid("cannot encode an empty token list".into()));
        }
        let mut m = Mat::zeros((tokens.len(), self.dim));
        let mut h = vec![0.0; self.dim];
        let mut total = 0.0;
        for (i, tok) in tokens.iter().enumerate() {
            let v = self.token_vector(tok);
            let w = if i >= span.0 && i < span.1 { 2.0 } else { 1.0 };
            for (d, x) in v.iter().enumerate() {
                m[[i, d]] = *x;
                h[d] += w * x;
            }
            total += w;
        }
        h.iter_mut().for_each(|x| *x /= total);
        Ok(TextFeatures { h, tokens: Some(m) })
    }
}

impl TextProvider for ToyEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn features(&self, inst: &AlscInstance) -> Result<TextFeatures> {
        self.encode(&inst.tokens, inst.aspect_span)
    }

    fn masked_features(&self, inst: &AlscInstance, masked: &[usize]) -> Result<TextFeatures> {
        let mut tokens = inst.tokens.clone();
        for &i in masked {
            if let Some(t) = tokens.get_mut(i) {
                *t = MASK_TOKEN.to_string();
            }
        }
        self.encode(&tokens, inst.aspect_span)
    }
}

/// Precomputed sentence vectors keyed by instance id hash.
#[derive(Debug, Clone, Default)]
pub struct FileProvider {
    dim: usize,
    vectors: HashMap<u64, Vec<f32>>,
}

impl FileProvider {
    pub fn new(dim: usize) -> Self {
        FileProvider {
            dim,
            vectors: HashMap::new(),
        }
    }

    pub fn insert(&mut self, id: &str, v: Vec<f32>) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::DimMismatch {
                context: "feature vector",
                expected: self.dim,
                got: v.len(),
            });
        }
        self.vectors.insert(fnv1a(id.as_bytes()), v);
        Ok(())
    }

    /// Vectors carried inline in the dataset's `features` fields.
    pub fn from_instances<'a>(instances: impl IntoIterator<Item = &'a AlscInstance>) -> Result<Self> {
        let mut p: Option<FileProvider> = None;
        for inst in instances {
            if let Some(f) = &inst.features {
                let prov = p.get_or_insert_with(|| FileProvider::new(f.len()));
                prov.insert(&inst.id, f.clone())?;
            }
        }
        Ok(p.unwrap_or_default())
    }

    pub fn from_arft<R: Read>(input: R) -> Result<Self> {
        let (dim, records) = read_arft(input)?;
        Ok(FileProvider {
            dim,
            vectors: records.into_iter().collect(),
        })
    }
}

impl TextProvider for FileProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn features(&self, inst: &AlscInstance) -> Result<TextFeatures> {
        let v = self
            .vectors
            .get(&fnv1a(inst.id.as_bytes()))
            .ok_or_else(|| Error::MissingFeatures(inst.id.clone()))?;
        Ok(TextFeatures {
            h: v.iter().map(|&x| x as f64).collect(),
            tokens: None,
        })
    }

    fn masked_features(&self, inst: &AlscInstance, masked: &[usize]) -> Result<TextFeatures> {
        if masked.is_empty() {
            self.features(inst)
        } else {
            Err(Error::Invalid(
                "precomputed features cannot be re-encoded after masking".into(),
            ))
        }
    }
}

const ARFT_MAGIC: &[u8; 4] = b"ARFT";

/// `ARFT` sidecar: magic, dim u32, count u64, then `(fnv1a(id) u64, f32 × dim)`.
pub fn write_arft<W: Write>(dim: usize, records: &[(&str, &[f32])], mut out: W) -> Result<()> {
    out.write_all(ARFT_MAGIC)?;
    out.write_all(&(dim as u32).to_le_bytes())?;
    out.write_all(&(records.len() as u64).to_le_bytes())?;
    for (id, v) in records {
        if v.len() != dim {
            return Err(Error::DimMismatch {
                context: "ARFT record",
                expected: dim,
                got: v.len(),
            });
        }
        out.write_all(&fnv1a(id.as_bytes()).to_le_bytes())?;
        for x in v.iter() {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Feature width and `(key, row)` records.
pub type ArftRecords = (usize, Vec<(u64, Vec<f32>)>);

pub fn read_arft<R: Read>(mut input: R) -> Result<ArftRecords> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..4] != ARFT_MAGIC {
        return Err(Error::format("ARFT sidecar", "bad magic or truncated header"));
    }
    let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let rec = 8 + 4 * dim;
    if bytes.len() != 16 + count * rec {
        return Err(Error::format("ARFT sidecar", "payload size does not match header"));
    }
    let records = bytes[16..]
        .chunks_exact(rec)
        .map(|c| {
            let id = u64::from_le_bytes(c[..8].try_into().unwrap());
            let v = c[8..]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            (id, v)
        })
        .collect();
    Ok((dim, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alsc::data::Label;

    fn inst(id: &str, tokens: &[&str]) -> AlscInstance {
        AlscInstance {
            id: id.into(),
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            aspect_span: (0, 1),
            entity: "UNK".into(),
            label: Label::O,
            features: None,
        }
    }

    #[test]
    fn toy_is_deterministic() {
        let t = ToyEncoder::new(16, 3);
        let a = t.features(&inst("a", &["x", "is", "good"])).unwrap();
        let b = t.features(&inst("b", &["x", "is", "good"])).unwrap();
        assert_eq!(a, b);
        assert!(t.encode(&[], (0, 0)).is_err());
    }

    #[test]
    fn aspect_tokens_count_twice() {
        let t = ToyEncoder::new(4, 0);
        let f = t.encode(&["a".into(), "b".into()], (0, 1)).unwrap();
        let (va, vb) = (t.token_vector("a"), t.token_vector("b"));
        for d in 0..4 {
            assert!((f.h[d] - (2.0 * va[d] + vb[d]) / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn arft_roundtrip() {
        let v1 = [0.25f32, -1.5, 3.0];
        let v2 = [1e-7f32, 0.0, -0.0];
        let mut buf = Vec::new();
        write_arft(3, &[("a", &v1), ("b", &v2)], &mut buf).unwrap();
        let p = FileProvider::from_arft(&buf[..]).unwrap();
        let f = p.features(&inst("b", &["z"])).unwrap();
        let back: Vec<f32> = f.h.iter().map(|&x| x as f32).collect();
        assert_eq!(
            back.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            v2.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        assert!(matches!(p.features(&inst("c", &["z"])), Err(Error::MissingFeatures(_))));
    }
}
