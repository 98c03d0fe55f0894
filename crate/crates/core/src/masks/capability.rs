use std::collections::BTreeMap;

use serde::Serialize;

use super::{MaskError, MaskPattern};

/// Dense kernels, in table column order.
pub const DENSE_KERNELS: [&str; 7] = ["Naive-Torch", "SDPA", "FA2", "FA3", "cuDNN-Fused-Attn", "FlexAttn", "FlashMask"];

/// Which dense kernels accept which static mask patterns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct KernelCapabilityMatrix {
    support: BTreeMap<(String, MaskPattern), bool>,
}

impl Default for KernelCapabilityMatrix {
    fn default() -> Self {
        Self::dense_kernels()
    }
}

impl KernelCapabilityMatrix {
    /// The published support table. Naive/SDPA build full 2D masks and
    /// FlexAttn/FlashMask take arbitrary masks; the FlashAttention family and
    /// cuDNN stop at the six regular patterns.
    pub fn dense_kernels() -> Self {
        let regular = [
            MaskPattern::Full,
            MaskPattern::Causal,
            MaskPattern::FullSlidingWindow,
            MaskPattern::CausalSlidingWindow,
            MaskPattern::FullDocument,
            MaskPattern::CausalDocument,
        ];
        let mut support = BTreeMap::new();
        for kernel in DENSE_KERNELS {
            let general = matches!(kernel, "Naive-Torch" | "SDPA" | "FlexAttn" | "FlashMask");
            for p in MaskPattern::ALL {
                support.insert((kernel.to_string(), p), general || regular.contains(&p));
            }
        }
        Self { support }
    }

    fn canonical(name: &str) -> Option<&'static str> {
        DENSE_KERNELS.into_iter().find(|k| k.eq_ignore_ascii_case(name.trim()))
    }

    pub fn supports(&self, kernel: &str, pattern: MaskPattern) -> Result<bool, MaskError> {
        let k = Self::canonical(kernel).ok_or_else(|| MaskError::UnknownKernel(kernel.to_string()))?;
        Ok(self.support[&(k.to_string(), pattern)])
    }

    /// `mask,<kernels...>` header then one `Y`/`N` row per pattern.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("mask");
        for k in DENSE_KERNELS {
            out.push(',');
            out.push_str(k);
        }
        out.push('\n');
        for p in MaskPattern::ALL {
            out.push_str(p.title());
            for k in DENSE_KERNELS {
                out.push(',');
                out.push(if self.support[&(k.to_string(), p)] { 'Y' } else { 'N' });
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookups() {
        let m = KernelCapabilityMatrix::dense_kernels();
        assert!(!m.supports("FA3", MaskPattern::ShareQuestion).unwrap());
        assert!(m.supports("FlexAttn", MaskPattern::GlobalSliding).unwrap());
        assert!(m.supports("SDPA", MaskPattern::Full).unwrap());
        assert!(m.supports("cudnn-fused-attn", MaskPattern::CausalDocument).unwrap());
        assert_eq!(
            m.supports("xformers", MaskPattern::Full),
            Err(MaskError::UnknownKernel("xformers".into()))
        );
    }
}
