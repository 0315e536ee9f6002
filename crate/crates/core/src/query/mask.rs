use crate::error::{Error, Result};
use crate::query::{ModelConfig, PredictionMaskMode};

/// Square boolean attention mask; `true` means attention is permitted.
///
/// Every mask built here is block-diagonal: queries `i` and `j` may attend to
/// each other iff `i / block_size == j / block_size`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntraInstanceMask {
    size: usize,
    block_size: usize,
    allowed: Vec<bool>,
}

impl IntraInstanceMask {
    /// All-allowed `size x size` mask (plain self-attention).
    pub fn all_allowed(size: usize) -> Self {
        build_intra_instance_mask(1, size)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn n_instances(&self) -> usize {
        self.size / self.block_size
    }

    #[inline]
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.size + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allowed[i * self.size..(i + 1) * self.size]
    }

    pub fn allowed_count(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }

    /// Range of query indices sharing a block with `i`.
    pub fn block_range(&self, i: usize) -> std::ops::Range<usize> {
        let start = (i / self.block_size) * self.block_size;
        start..start + self.block_size
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.size).all(|i| (0..i).all(|j| self.allowed(i, j) == self.allowed(j, i)))
    }

    pub fn is_reflexive(&self) -> bool {
        (0..self.size).all(|i| self.allowed(i, i))
    }
}

/// Block-diagonal mask for `n_instances` blocks of `block_size` queries each.
///
/// Zero counts are clamped to one so the result is always well-formed.
pub fn build_intra_instance_mask(n_instances: usize, block_size: usize) -> IntraInstanceMask {
    let n_instances = n_instances.max(1);
    let block_size = block_size.max(1);
    let size = n_instances * block_size;
    let mut allowed = vec![false; size * size];
    for b in 0..n_instances {
        let lo = b * block_size;
        for i in lo..lo + block_size {
            allowed[i * size + lo..i * size + lo + block_size].fill(true);
        }
    }
    IntraInstanceMask {
        size,
        block_size,
        allowed,
    }
}

pub fn mask_for_perception(cfg: &ModelConfig) -> IntraInstanceMask {
    if cfg.toggles.masked_self_attention {
        build_intra_instance_mask(cfg.m_i, cfg.m_p)
    } else {
        IntraInstanceMask::all_allowed(cfg.m_i * cfg.m_p)
    }
}

/// One block per (agent, mode) trajectory of `N_P` points, or one block per
/// agent when the per-agent knob is set.
pub fn mask_for_prediction(cfg: &ModelConfig, n_agents: usize) -> Result<IntraInstanceMask> {
    if n_agents == 0 {
        return Err(Error::Input(
            "prediction mask needs at least one agent".into(),
        ));
    }
    let q = n_agents * cfg.n_i * cfg.n_p;
    Ok(if !cfg.toggles.masked_self_attention {
        IntraInstanceMask::all_allowed(q)
    } else {
        match cfg.toggles.prediction_mask {
            PredictionMaskMode::PerTrajectory => {
                build_intra_instance_mask(n_agents * cfg.n_i, cfg.n_p)
            }
            PredictionMaskMode::PerAgent => build_intra_instance_mask(n_agents, cfg.n_i * cfg.n_p),
        }
    })
}

pub fn mask_for_planning(cfg: &ModelConfig) -> IntraInstanceMask {
    if cfg.toggles.masked_self_attention {
        build_intra_instance_mask(cfg.k_i, cfg.k_p)
    } else {
        IntraInstanceMask::all_allowed(cfg.k_i * cfg.k_p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_blocks_of_three() {
        let m = build_intra_instance_mask(2, 3);
        assert_eq!(m.size(), 6);
        // enumerate pairs sharing floor(i / 3)
        let mut expected = 0;
        for i in 0..6 {
            for j in 0..6 {
                let same = i / 3 == j / 3;
                expected += usize::from(same);
                assert_eq!(m.allowed(i, j), same, "({i},{j})");
            }
        }
        assert_eq!(expected, 18);
        assert_eq!(m.allowed_count(), 18);
        assert_eq!(36 - m.allowed_count(), 18);
    }

    #[test]
    fn single_instance_is_plain_attention() {
        let m = build_intra_instance_mask(1, 7);
        assert_eq!(m.allowed_count(), 49);
        assert_eq!(m, IntraInstanceMask::all_allowed(7));
    }

    #[test]
    fn perception_default_has_forty_thousand_allowed() {
        let m = build_intra_instance_mask(100, 20);
        assert_eq!(m.size(), 2000);
        assert_eq!(m.allowed_count(), 100 * 20 * 20);
    }

    #[test]
    fn prediction_mask_is_per_trajectory() {
        let cfg = ModelConfig::full_scale();
        let m = mask_for_prediction(&cfg, 1).unwrap();
        assert_eq!(m.size(), 30);
        assert_eq!(m.block_size(), 6);
        assert_eq!(m.n_instances(), 5);
        // mode 0 point 0 vs mode 1 point 0 of the same agent
        assert!(!m.allowed(0, 6));
        for i in 0..30 {
            for j in 0..30 {
                assert_eq!(m.allowed(i, j), i / 6 == j / 6);
            }
        }
        assert!(mask_for_prediction(&cfg, 0).is_err());
    }

    #[test]
    fn per_agent_knob_merges_modes() {
        let mut cfg = ModelConfig::full_scale();
        cfg.toggles.prediction_mask = PredictionMaskMode::PerAgent;
        let m = mask_for_prediction(&cfg, 2).unwrap();
        assert!(m.allowed(0, 6));
        assert!(!m.allowed(0, 30));
    }

    #[test]
    fn unmasked_arm_is_all_allowed() {
        let mut cfg = ModelConfig::full_scale();
        cfg.toggles.masked_self_attention = false;
        assert_eq!(mask_for_planning(&cfg).allowed_count(), 18 * 18);
        assert_eq!(
            mask_for_prediction(&cfg, 2).unwrap().allowed_count(),
            60 * 60
        );
    }
}
