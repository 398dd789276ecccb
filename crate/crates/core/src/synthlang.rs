//! Synthetic languages.
//!
//! A language owns a contiguous token range. Each token has a prototype
//! feature vector: a Gaussian draw shared-in-distribution across languages
//! plus one language-wide offset of norm `sep`. Token sequences follow a
//! bigram chain without self-transitions, and every token emits a few noisy
//! copies of its prototype. Everything is a pure function of the seed.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};
use crate::vocab::{LanguageId, TokenRange, VocabRegistry};

/// Generation knobs shared by every language of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LanguageParams {
    pub d_feat: usize,
    pub tokens_per_language: usize,
    pub dur_min: usize,
    pub dur_max: usize,
    pub noise: f64,
    /// Norm of the language offset added to every prototype.
    pub sep: f64,
    /// Per-coordinate standard deviation of prototypes.
    pub proto_std: f64,
    /// Utterance length in tokens, inclusive bounds.
    pub utt_tokens_min: usize,
    pub utt_tokens_max: usize,
}

impl Default for LanguageParams {
    fn default() -> Self {
        Self {
            d_feat: 16,
            tokens_per_language: 12,
            dur_min: 1,
            dur_max: 3,
            noise: 0.1,
            sep: 2.0,
            proto_std: 1.0,
            utt_tokens_min: 3,
            utt_tokens_max: 6,
        }
    }
}

impl LanguageParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.d_feat == 0 || self.tokens_per_language < 2 {
            return bad("need d_feat >= 1 and at least two tokens per language");
        }
        if self.dur_min == 0 || self.dur_min > self.dur_max {
            return bad("duration range must satisfy 1 <= dur_min <= dur_max");
        }
        if self.utt_tokens_min == 0 || self.utt_tokens_min > self.utt_tokens_max {
            return bad("utterance length range must satisfy 1 <= min <= max");
        }
        if !(self.noise >= 0.0 && self.sep >= 0.0 && self.proto_std > 0.0) {
            return bad("noise and sep must be non-negative, proto_std positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub id: LanguageId,
    pub range: TokenRange,
    /// `[V_l, d_feat]`, row `i` belongs to token `range.lo + i`.
    pub prototypes: Tensor,
    /// `[V_l, V_l]` row-stochastic, zero diagonal.
    pub transitions: Tensor,
    pub dur_min: usize,
    pub dur_max: usize,
    pub noise: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    /// `[T, d_feat]`.
    pub features: Tensor,
    pub tokens: Vec<usize>,
    pub language: LanguageId,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub language: LanguageId,
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

/// Creates a language with a freshly claimed token range.
pub fn gen_language_spec(
    id: LanguageId,
    registry: &mut VocabRegistry,
    params: &LanguageParams,
    rng: &mut Rng,
) -> Result<LanguageSpec> {
    params.validate()?;
    let v = params.tokens_per_language;
    let range = registry.claim(id, v)?;
    let seed = rng.next_u64();
    let mut r = Rng::new(seed);

    let d = params.d_feat;
    let mut dir: Vec<f64> = (0..d).map(|_| r.normal(0.0, 1.0)).collect();
    let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    dir.iter_mut().for_each(|x| *x *= params.sep / norm);
    let mut protos = Vec::with_capacity(v * d);
    for _ in 0..v {
        for &o in &dir {
            protos.push(r.normal(0.0, params.proto_std) + o);
        }
    }

    let mut trans = vec![0.0; v * v];
    for i in 0..v {
        let row = &mut trans[i * v..(i + 1) * v];
        for (j, w) in row.iter_mut().enumerate() {
            *w = if i == j { 0.0 } else { r.normal(0.0, 1.0).exp() };
        }
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|w| *w /= s);
    }

    Ok(LanguageSpec {
        id,
        range,
        prototypes: Tensor::from_vec(&[v, d], protos)?,
        transitions: Tensor::from_vec(&[v, v], trans)?,
        dur_min: params.dur_min,
        dur_max: params.dur_max,
        noise: params.noise,
        seed,
    })
}

pub fn sample_utterance(spec: &LanguageSpec, n_tokens: usize, rng: &mut Rng) -> Result<Utterance> {
    if n_tokens == 0 {
        return Err(Error::Config("utterance needs at least one token".into()));
    }
    let v = spec.range.len();
    let d = spec.prototypes.cols();
    let mut local = Vec::with_capacity(n_tokens);
    local.push(rng.below(v));
    while local.len() < n_tokens {
        let prev = *local.last().expect("non-empty");
        local.push(rng.categorical(spec.transitions.row(prev)));
    }
    let mut frames = Vec::new();
    for &k in &local {
        let dur = rng.range_inclusive(spec.dur_min, spec.dur_max);
        for _ in 0..dur {
            frames.extend(spec.prototypes.row(k).iter().map(|&p| p + rng.normal(0.0, spec.noise)));
        }
    }
    let t = frames.len() / d;
    Ok(Utterance {
        features: Tensor::from_vec(&[t, d], frames)?,
        tokens: local.iter().map(|k| spec.range.lo + k).collect(),
        language: spec.id,
    })
}

/// Train/dev/test splits. Utterance `i` of split `s` is drawn from its own
/// stream `fork(s, i)`, so splits never share a construction index.
pub fn make_splits(
    spec: &LanguageSpec,
    params: &LanguageParams,
    n_train: usize,
    n_dev: usize,
    n_test: usize,
    rng: &Rng,
) -> Result<Dataset> {
    if n_train == 0 || n_dev == 0 || n_test == 0 {
        return Err(Error::Config("every split needs at least one utterance".into()));
    }
    let split = |tag: u64, n: usize| -> Result<Vec<Utterance>> {
        let base = rng.fork(tag.wrapping_mul(0x9E37_79B9).wrapping_add(spec.seed));
        (0..n as u64)
            .map(|i| {
                let mut r = base.fork(i);
                let len = r.range_inclusive(params.utt_tokens_min, params.utt_tokens_max);
                sample_utterance(spec, len, &mut r)
            })
            .collect()
    };
    Ok(Dataset { language: spec.id, train: split(1, n_train)?, dev: split(2, n_dev)?, test: split(3, n_test)? })
}

/// Per-frame nearest prototype over all given languages, then repeat
/// merging. The reference decoder that bounds what a model can achieve.
pub fn nearest_prototype_decode(specs: &[LanguageSpec], features: &Tensor) -> Vec<usize> {
    let mut frames = Vec::with_capacity(features.rows());
    for t in 0..features.rows() {
        let x = features.row(t);
        let mut best = (f64::INFINITY, 0);
        for spec in specs {
            for k in 0..spec.range.len() {
                let d2: f64 = spec.prototypes.row(k).iter().zip(x).map(|(p, v)| (p - v) * (p - v)).sum();
                if d2 < best.0 {
                    best = (d2, spec.range.lo + k);
                }
            }
        }
        frames.push(best.1);
    }
    frames.dedup();
    frames
}

#[derive(Serialize, Deserialize)]
struct UtteranceRecord {
    lang: LanguageId,
    tokens: Vec<usize>,
    /// Offset into the feature blob, in bytes.
    offset: u64,
    frames: usize,
    dim: usize,
}

/// Writes `<stem>.jsonl` (one record per utterance) and `<stem>.bin`
/// (little-endian f64 features in record order).
pub fn write_utterances(dir: &Path, stem: &str, utts: &[Utterance]) -> Result<()> {
    let mut index = BufWriter::new(File::create(dir.join(format!("{stem}.jsonl")))?);
    let mut blob = BufWriter::new(File::create(dir.join(format!("{stem}.bin")))?);
    let mut offset = 0u64;
    for u in utts {
        let rec = UtteranceRecord {
            lang: u.language,
            tokens: u.tokens.clone(),
            offset,
            frames: u.features.rows(),
            dim: u.features.cols(),
        };
        serde_json::to_writer(&mut index, &rec)?;
        index.write_all(b"\n")?;
        for v in u.features.data() {
            blob.write_all(&v.to_le_bytes())?;
        }
        offset += 8 * u.features.len() as u64;
    }
    index.flush()?;
    blob.flush()?;
    Ok(())
}

pub fn read_utterances(dir: &Path, stem: &str) -> Result<Vec<Utterance>> {
    let index_path = dir.join(format!("{stem}.jsonl"));
    let mut bytes = Vec::new();
    File::open(dir.join(format!("{stem}.bin")))?.read_to_end(&mut bytes)?;
    let mut out = Vec::new();
    for line in BufReader::new(File::open(&index_path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: UtteranceRecord = serde_json::from_str(&line)?;
        let start = rec.offset as usize;
        let end = start + 8 * rec.frames * rec.dim;
        let chunk = bytes.get(start..end).ok_or_else(|| Error::Format {
            path: index_path.clone(),
            reason: format!("record at offset {start} runs past the feature blob"),
        })?;
        let data = chunk.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        out.push(Utterance {
            features: Tensor::from_vec(&[rec.frames, rec.dim], data)?,
            tokens: rec.tokens,
            language: rec.lang,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_with(params: &LanguageParams, id: u32, reg: &mut VocabRegistry, seed: u64) -> LanguageSpec {
        gen_language_spec(LanguageId(id), reg, params, &mut Rng::new(seed)).unwrap()
    }

    #[test]
    fn specs_are_deterministic_and_disjoint() {
        let p = LanguageParams::default();
        let mut reg = VocabRegistry::new(100).unwrap();
        let a = spec_with(&p, 0, &mut reg, 5);
        let b = spec_with(&p, 1, &mut reg, 5);
        assert!(!a.range.overlaps(&b.range));
        let mut reg2 = VocabRegistry::new(100).unwrap();
        let a2 = spec_with(&p, 0, &mut reg2, 5);
        assert_eq!(a, a2);
        for i in 0..a.range.len() {
            let row = a.transitions.row(i);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(row[i], 0.0);
        }
    }

    #[test]
    fn exhausted_vocabulary() {
        let p = LanguageParams::default();
        let mut reg = VocabRegistry::new(20).unwrap();
        spec_with(&p, 0, &mut reg, 1);
        assert!(gen_language_spec(LanguageId(1), &mut reg, &p, &mut Rng::new(2)).is_err());
    }

    #[test]
    fn zero_sep_has_no_offset() {
        let p = LanguageParams { sep: 0.0, proto_std: 1.0, ..Default::default() };
        let mut reg = VocabRegistry::new(100).unwrap();
        let a = spec_with(&p, 0, &mut reg, 3);
        let q = LanguageParams { sep: 5.0, ..p.clone() };
        let mut reg = VocabRegistry::new(100).unwrap();
        let b = spec_with(&q, 0, &mut reg, 3);
        // same draws, the difference is exactly one shared offset of norm 5
        let diff: Vec<f64> = (0..p.d_feat).map(|j| b.prototypes.get2(0, j) - a.prototypes.get2(0, j)).collect();
        let norm = diff.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 5.0).abs() < 1e-9);
        for k in 1..a.range.len() {
            for j in 0..p.d_feat {
                let dk = b.prototypes.get2(k, j) - a.prototypes.get2(k, j);
                assert!((dk - diff[j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn noiseless_unit_duration_emits_prototypes() {
        let p = LanguageParams { noise: 0.0, dur_min: 1, dur_max: 1, ..Default::default() };
        let mut reg = VocabRegistry::new(100).unwrap();
        let s = spec_with(&p, 0, &mut reg, 9);
        let u = sample_utterance(&s, 5, &mut Rng::new(1)).unwrap();
        assert_eq!(u.frames(), 5);
        for (t, &tok) in u.tokens.iter().enumerate() {
            assert_eq!(u.features.row(t), s.prototypes.row(tok - s.range.lo));
        }
        assert!(sample_utterance(&s, 0, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn frame_count_within_duration_bounds() {
        let p = LanguageParams::default();
        let mut reg = VocabRegistry::new(100).unwrap();
        let s = spec_with(&p, 0, &mut reg, 9);
        let mut r = Rng::new(4);
        for n in 1..20 {
            let u = sample_utterance(&s, n, &mut r).unwrap();
            assert!(u.frames() >= n * p.dur_min && u.frames() <= n * p.dur_max);
            assert!(u.tokens.iter().all(|&t| s.range.contains(t)));
            assert!(u.tokens.windows(2).all(|w| w[0] != w[1]));
        }
    }

    #[test]
    fn splits_sizes_and_determinism() {
        let p = LanguageParams::default();
        let mut reg = VocabRegistry::new(100).unwrap();
        let s = spec_with(&p, 0, &mut reg, 9);
        let d1 = make_splits(&s, &p, 7, 3, 4, &Rng::new(11)).unwrap();
        let d2 = make_splits(&s, &p, 7, 3, 4, &Rng::new(11)).unwrap();
        assert_eq!(d1, d2);
        assert_eq!((d1.train.len(), d1.dev.len(), d1.test.len()), (7, 3, 4));
        for u in &d1.test {
            assert!(!d1.train.contains(u));
        }
        assert!(make_splits(&s, &p, 0, 3, 4, &Rng::new(11)).is_err());
    }

    #[test]
    fn dataset_files_round_trip() {
        let p = LanguageParams::default();
        let mut reg = VocabRegistry::new(100).unwrap();
        let s = spec_with(&p, 0, &mut reg, 9);
        let d = make_splits(&s, &p, 5, 1, 1, &Rng::new(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_utterances(dir.path(), "train", &d.train).unwrap();
        let back = read_utterances(dir.path(), "train").unwrap();
        assert_eq!(back, d.train);
    }
}
