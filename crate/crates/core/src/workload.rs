//! Synthetic document-length sampling and sequence packing.

use rand::distr::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::LogNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::masks::{MaskError, MaskPattern, MaskSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorkloadError {
    #[error("invalid length distribution: {0}")]
    Distribution(String),
    #[error("document of {len} tokens does not fit a {window}-token window")]
    Oversized { len: usize, window: usize },
    #[error("zero-length document at position {0}")]
    EmptyDocument(usize),
    #[error("{0} needs per-document parameters that were not given")]
    MissingParams(MaskPattern),
    #[error("{0} cannot be built from a packed batch")]
    UnsupportedPattern(MaskPattern),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthKind {
    /// Integer lengths uniform on `[min, max]`.
    Uniform {
        min: usize,
        max: usize,
    },
    /// `exp(N(mu, sigma))`, rounded to the nearest token and clamped.
    Lognormal {
        mu: f64,
        sigma: f64,
    },
    Point {
        len: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthComponent {
    pub weight: f64,
    pub kind: LengthKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthDistribution {
    pub components: Vec<LengthComponent>,
    pub max_len: usize,
}

impl LengthDistribution {
    pub fn point(len: usize) -> Self {
        Self {
            components: vec![LengthComponent {
                weight: 1.0,
                kind: LengthKind::Point { len },
            }],
            max_len: len,
        }
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m: String| Err(WorkloadError::Distribution(m));
        if self.max_len == 0 {
            return bad("max_len must be >= 1".into());
        }
        if self.components.is_empty() {
            return bad("no components".into());
        }
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 || self.components.iter().any(|c| !(c.weight >= 0.0)) {
            return bad(format!("weights sum to {total}, expected 1"));
        }
        for c in &self.components {
            match c.kind {
                LengthKind::Uniform { min, max } if min < 1 || min > max || max > self.max_len => {
                    return bad(format!("uniform [{min}, {max}] outside [1, {}]", self.max_len));
                }
                LengthKind::Point { len } if len < 1 || len > self.max_len => {
                    return bad(format!("point {len} outside [1, {}]", self.max_len));
                }
                LengthKind::Lognormal { sigma, mu } if !(sigma >= 0.0) || !mu.is_finite() => {
                    return bad(format!("lognormal({mu}, {sigma}) is not a valid distribution"));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// `n` lengths in `[1, max_len]`, deterministic per seed.
pub fn sample_lengths(dist: &LengthDistribution, seed: u64, n: usize) -> Result<Vec<usize>, WorkloadError> {
    dist.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = dist.components.last().unwrap();
        for c in &dist.components {
            acc += c.weight;
            if u < acc {
                chosen = c;
                break;
            }
        }
        let len = match chosen.kind {
            LengthKind::Point { len } => len,
            LengthKind::Uniform { min, max } => Uniform::new_inclusive(min, max)
                .map_err(|e| WorkloadError::Distribution(e.to_string()))?
                .sample(&mut rng),
            LengthKind::Lognormal { mu, sigma } => {
                let d = LogNormal::new(mu, sigma).map_err(|e| WorkloadError::Distribution(e.to_string()))?;
                let x: f64 = d.sample(&mut rng);
                (x.round().max(1.0) as usize).min(dist.max_len)
            }
        };
        out.push(len);
    }
    Ok(out)
}

/// Documents concatenated into one context window (`cu_seqlens` layout).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedBatch {
    pub context_window: usize,
    /// Start of every document plus the end of the last one.
    pub doc_offsets: Vec<usize>,
    pub pad_len: usize,
}

impl PackedBatch {
    pub fn doc_lens(&self) -> Vec<usize> {
        self.doc_offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn num_docs(&self) -> usize {
        self.doc_offsets.len() - 1
    }

    pub fn real_len(&self) -> usize {
        self.context_window - self.pad_len
    }
}

/// Packs documents in arrival order, opening a new window whenever the next
/// document does not fit the remaining space. Documents are never split.
pub fn pack_documents(lengths: &[usize], context_window: usize) -> Result<Vec<PackedBatch>, WorkloadError> {
    let mut batches = Vec::new();
    let mut offsets = vec![0];
    for (i, &len) in lengths.iter().enumerate() {
        if len == 0 {
            return Err(WorkloadError::EmptyDocument(i));
        }
        if len > context_window {
            return Err(WorkloadError::Oversized {
                len,
                window: context_window,
            });
        }
        let used = *offsets.last().unwrap();
        if used + len > context_window {
            batches.push(PackedBatch {
                context_window,
                pad_len: context_window - used,
                doc_offsets: std::mem::replace(&mut offsets, vec![0]),
            });
        }
        let used = *offsets.last().unwrap();
        offsets.push(used + len);
    }
    if offsets.len() > 1 {
        let used = *offsets.last().unwrap();
        batches.push(PackedBatch {
            context_window,
            pad_len: context_window - used,
            doc_offsets: offsets,
        });
    }
    Ok(batches)
}

/// Pattern parameters not carried by the batch itself.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefix_lens: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_size: Option<usize>,
}

/// Mask over a packed batch; the padding tail is fully masked.
pub fn batch_to_mask(batch: &PackedBatch, pattern: MaskPattern, params: &MaskParams) -> Result<MaskSpec, WorkloadError> {
    let mut b = MaskSpec::builder(pattern, batch.context_window).pad_len(batch.pad_len);
    match pattern {
        MaskPattern::Full | MaskPattern::Causal => {}
        p if p.needs_documents() => {
            b = b.doc_offsets(batch.doc_offsets.clone());
            match p {
                MaskPattern::PrefixLmDocument => {
                    let pre = params.prefix_lens.clone().ok_or(WorkloadError::MissingParams(p))?;
                    b = b.prefix_lens(pre);
                }
                MaskPattern::BlockCausalDocument => {
                    b = b.block_size(params.block_size.ok_or(WorkloadError::MissingParams(p))?);
                }
                _ => {}
            }
        }
        p => return Err(WorkloadError::UnsupportedPattern(p)),
    }
    Ok(b.build()?)
}
