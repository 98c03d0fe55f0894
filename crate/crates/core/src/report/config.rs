use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ReportError;
use crate::cpmech::{CpConfig, Mechanism, ProcessGrid, ShardScheme};
use crate::fabric::Topology;
use crate::masks::{MaskPattern, MaskSpec};
use crate::numcore::{HeadLayout, Precision};
use crate::workload::{pack_documents, sample_lengths, LengthDistribution};

/// Environment variable that replaces every config's seed.
pub const SEED_ENV: &str = "LONGCA_SEED";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// Shape-only payloads; timings and traffic at any size.
    #[default]
    Cost,
    /// Real tensors, checked against the single-device reference.
    Exact,
}

/// Mask parameters beyond the pattern.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskConfig {
    /// Fixed document lengths, packed into one window.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub doc_lens: Option<Vec<usize>>,
    /// Sampled document lengths; reseeded per repeat.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub doc_lengths: Option<LengthDistribution>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefix_lens: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global_len: Option<usize>,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

fn default_layout() -> HeadLayout {
    HeadLayout {
        q_heads: 8,
        kv_heads: 8,
        head_dim: 64,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub mechanism: Mechanism,
    pub pattern: MaskPattern,
    pub seq_len: usize,
    pub world_size: usize,
    #[serde(default = "default_layout")]
    pub layout: HeadLayout,
    #[serde(default)]
    pub mask: MaskConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<ProcessGrid>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<ShardScheme>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gather_cap_bytes: Option<u64>,
    /// `world_size` here is ignored; the run's own world size wins.
    #[serde(default)]
    pub topology: Topology,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub mode: RunMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub repeats: usize,
    /// Kept for parity with measured benchmarks; a simulated warm-up changes nothing.
    #[serde(default)]
    pub warmup: usize,
    #[serde(default = "yes")]
    pub backward: bool,
}

impl RunConfig {
    pub fn new(mechanism: Mechanism, pattern: MaskPattern, seq_len: usize, world_size: usize) -> Self {
        Self {
            id: None,
            mechanism,
            pattern,
            seq_len,
            world_size,
            layout: default_layout(),
            mask: MaskConfig::default(),
            grid: None,
            scheme: None,
            gather_cap_bytes: None,
            topology: Topology::default(),
            precision: Precision::default(),
            mode: RunMode::default(),
            seed: 0,
            repeats: 1,
            warmup: 0,
            backward: true,
        }
    }

    pub fn config_id(&self, index: usize) -> String {
        self.id.clone().unwrap_or_else(|| {
            format!(
                "{index:03}-{}-{}-S{}-N{}",
                self.mechanism, self.pattern, self.seq_len, self.world_size
            )
        })
    }

    pub fn validate(&self) -> Result<(), ReportError> {
        if self.repeats == 0 {
            return Err(ReportError::Config("repeats must be >= 1".into()));
        }
        if self.seq_len == 0 || self.world_size == 0 {
            return Err(ReportError::Config("seq_len and world_size must be >= 1".into()));
        }
        self.layout.validate().map_err(|e| ReportError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn cp_config(&self) -> CpConfig {
        CpConfig {
            mechanism: self.mechanism,
            world_size: self.world_size,
            grid: self.grid,
            scheme: self.scheme,
            gather_cap_bytes: self.gather_cap_bytes,
        }
    }

    pub fn topology(&self) -> Topology {
        Topology {
            world_size: self.world_size,
            ..self.topology.clone()
        }
    }

    /// Seed of repeat `rep`.
    pub fn repeat_seed(&self, rep: usize) -> u64 {
        self.seed.wrapping_add((rep as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    /// Mask for one repeat, padded to `seq_len` when documents fall short.
    pub fn mask_spec(&self, seed: u64) -> Result<MaskSpec, ReportError> {
        let m = &self.mask;
        let s = self.seq_len;
        let mut b = MaskSpec::builder(self.pattern, s);
        if self.pattern.needs_documents() {
            let lens = match (&m.doc_lens, &m.doc_lengths) {
                (Some(l), _) => l.clone(),
                (None, Some(dist)) => sample_lengths(dist, seed, s)?,
                (None, None) => return Err(ReportError::Config(format!("{} needs doc_lens or doc_lengths", self.pattern))),
            };
            let batch = pack_documents(&lens, s)?.swap_remove(0);
            if m.doc_lens.is_some() && batch.num_docs() != lens.len() {
                return Err(ReportError::Config(format!("doc_lens do not fit in {s} tokens")));
            }
            b = b.doc_offsets(batch.doc_offsets.clone()).pad_len(batch.pad_len);
        }
        if let Some(w) = m.window {
            b = b.window(w);
        }
        if let Some(p) = &m.prefix_lens {
            b = b.prefix_lens(p.clone());
        }
        if let Some(bs) = m.block_size {
            b = b.block_size(bs);
        }
        if let Some(g) = m.global_len {
            b = b.global_len(g);
        }
        Ok(b.build()?)
    }
}

/// Top-level config file: `{"runs": [...]}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixFile {
    #[serde(default)]
    pub runs: Vec<RunConfig>,
}

/// Reads a config file; `seed_override` replaces every run's seed.
pub fn load_configs(path: &Path, seed_override: Option<u64>) -> Result<Vec<RunConfig>, ReportError> {
    let text = std::fs::read_to_string(path).map_err(|e| ReportError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let file: MatrixFile = serde_json::from_str(&text).map_err(|e| ReportError::Config(format!("{}: {e}", path.display())))?;
    let mut runs = file.runs;
    for r in &mut runs {
        if let Some(seed) = seed_override {
            r.seed = seed;
        }
        r.validate()?;
    }
    Ok(runs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"mechanism":"usp","pattern":"causal","seq_len":64,"world_size":4}"#).unwrap();
        assert_eq!(c.repeats, 1);
        assert_eq!(c.mode, RunMode::Cost);
        assert!(c.backward);
        assert_eq!(c.topology().world_size, 4);
        assert_eq!(c.config_id(2), "002-usp-causal-S64-N4");
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"mechanism":"nope","pattern":"causal","seq_len":4,"world_size":1}"#).is_err());
        assert!(serde_json::from_str::<MatrixFile>(r#"{"runs":[], "extra":1}"#).is_err());
        let mut c = RunConfig::new(Mechanism::RingP2p, MaskPattern::Causal, 8, 2);
        c.repeats = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn document_masks_from_lengths() {
        let mut c = RunConfig::new(Mechanism::RingP2p, MaskPattern::CausalDocument, 16, 2);
        assert!(c.mask_spec(0).is_err());
        c.mask.doc_lens = Some(vec![5, 7]);
        let spec = c.mask_spec(0).unwrap();
        assert_eq!(spec.doc_lens(), vec![5, 7]);
        assert_eq!(spec.pad_len(), 4);
        c.mask.doc_lens = Some(vec![10, 10]);
        assert!(c.mask_spec(0).is_err());
        c.mask.doc_lens = None;
        c.mask.doc_lengths = Some(LengthDistribution::point(4));
        assert_eq!(c.mask_spec(3).unwrap().doc_lens(), vec![4; 4]);
    }

    #[test]
    fn loads_files_and_overrides_seed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        std::fs::write(
            &path,
            r#"{"runs":[{"mechanism":"ulysses","pattern":"full","seq_len":32,"world_size":2,"seed":5}]}"#,
        )
        .unwrap();
        assert_eq!(load_configs(&path, None).unwrap()[0].seed, 5);
        assert_eq!(load_configs(&path, Some(9)).unwrap()[0].seed, 9);
        assert!(load_configs(&dir.path().join("missing.json"), None).is_err());
    }
}
