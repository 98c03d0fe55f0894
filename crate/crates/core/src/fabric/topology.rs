use serde::{Deserialize, Serialize};

use super::FabricError;

/// Cluster shape and link cost parameters.
///
/// The defaults are model parameters, not measurements: 8 ranks per node,
/// intra-node links six times faster than inter-node links, microsecond
/// latencies and an H100-class dense throughput.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Topology {
    pub world_size: usize,
    pub ranks_per_node: usize,
    /// Bytes per second.
    pub intra_bw: f64,
    pub inter_bw: f64,
    /// Seconds.
    pub link_latency_intra: f64,
    pub link_latency_inter: f64,
    /// Flops per second per device.
    pub device_flops_rate: f64,
}

impl Default for Topology {
    fn default() -> Self {
        Self {
            world_size: 1,
            ranks_per_node: 8,
            intra_bw: 300e9,
            inter_bw: 50e9,
            link_latency_intra: 2e-6,
            link_latency_inter: 5e-6,
            device_flops_rate: 989e12,
        }
    }
}

impl Topology {
    pub fn with_world(world_size: usize) -> Self {
        Self {
            world_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), FabricError> {
        let bad = |m: String| Err(FabricError::Topology(m));
        if self.world_size == 0 || self.ranks_per_node == 0 {
            return bad("world_size and ranks_per_node must be >= 1".into());
        }
        if self.world_size > self.ranks_per_node && !self.world_size.is_multiple_of(self.ranks_per_node) {
            return bad(format!(
                "world_size {} is not a multiple of ranks_per_node {}",
                self.world_size, self.ranks_per_node
            ));
        }
        let rates = [self.intra_bw, self.inter_bw, self.device_flops_rate];
        if rates.iter().any(|&r| !(r > 0.0) || !r.is_finite()) {
            return bad("bandwidths and flops rate must be positive".into());
        }
        if [self.link_latency_intra, self.link_latency_inter]
            .iter()
            .any(|&l| !(l >= 0.0) || !l.is_finite())
        {
            return bad("latencies must be non-negative".into());
        }
        Ok(())
    }

    pub fn node_of(&self, rank: usize) -> usize {
        rank / self.ranks_per_node
    }

    pub fn is_inter_node(&self, src: usize, dst: usize) -> bool {
        self.node_of(src) != self.node_of(dst)
    }

    /// `latency + bytes / bandwidth` for the link class between two ranks.
    pub fn link_time(&self, src: usize, dst: usize, bytes: u64) -> f64 {
        if self.is_inter_node(src, dst) {
            self.link_latency_inter + bytes as f64 / self.inter_bw
        } else {
            self.link_latency_intra + bytes as f64 / self.intra_bw
        }
    }

    pub fn compute_time(&self, flops: u64) -> f64 {
        flops as f64 / self.device_flops_rate
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn link_costs() {
        let t = Topology::with_world(16);
        assert_eq!(t.link_time(0, 1, 0), t.link_latency_intra);
        let gib = 1u64 << 30;
        let inter = Topology {
            inter_bw: 25.0 * gib as f64,
            link_latency_inter: 5e-6,
            ..t.clone()
        };
        assert!((inter.link_time(0, 8, gib) - (0.04 + 5e-6)).abs() < 1e-15);
        assert!(t.link_time(0, 1, gib) < t.link_time(0, 8, gib));
        assert_eq!(t.inter_bw * 6.0, t.intra_bw);
    }

    #[test]
    fn validation() {
        assert!(Topology::with_world(12).validate().is_err());
        assert!(Topology::with_world(4).validate().is_ok());
        assert!(Topology::with_world(24).validate().is_ok());
        let t = Topology {
            inter_bw: 0.0,
            ..Topology::default()
        };
        assert!(t.validate().is_err());
    }
}
