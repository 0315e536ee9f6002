use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which groups of prediction queries share an attention block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionMaskMode {
    /// One block per (agent, mode) trajectory.
    #[default]
    PerTrajectory,
    /// One block per agent, so modes of the same agent see each other.
    PerAgent,
}

/// Module toggles for the intra-instance attention passes.
///
/// Turning a module's `*_intra` flag off removes both its query
/// initialization pass and the self-attention sublayer of every decoder
/// layer. `masked_self_attention = false` keeps those layers but replaces
/// every mask with an all-allowed one. `query_init = false` skips only the
/// initialization pass in every module.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntraToggles {
    pub perception_intra: bool,
    pub prediction_intra: bool,
    pub planning_intra: bool,
    pub masked_self_attention: bool,
    pub query_init: bool,
    pub prediction_mask: PredictionMaskMode,
}

impl Default for IntraToggles {
    fn default() -> Self {
        Self {
            perception_intra: true,
            prediction_intra: true,
            planning_intra: true,
            masked_self_attention: true,
            query_init: true,
            prediction_mask: PredictionMaskMode::PerTrajectory,
        }
    }
}

/// Query counts and transformer sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Map instance queries.
    #[serde(rename = "M_I")]
    pub m_i: usize,
    /// Points per map instance.
    #[serde(rename = "M_P")]
    pub m_p: usize,
    /// Agent queries.
    #[serde(rename = "N_O")]
    pub n_o: usize,
    /// Trajectory modes per agent.
    #[serde(rename = "N_I")]
    pub n_i: usize,
    /// Points per predicted agent trajectory.
    #[serde(rename = "N_P")]
    pub n_p: usize,
    /// Ego trajectory modes.
    #[serde(rename = "K_I")]
    pub k_i: usize,
    /// Points per ego trajectory.
    #[serde(rename = "K_P")]
    pub k_p: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub n_classes: usize,
    /// BEV token grid along the forward axis.
    pub bev_tokens_x: usize,
    /// BEV token grid along the lateral axis.
    pub bev_tokens_y: usize,
    /// Pooled sub-cells per token side; each token sees `bev_subcells^2`
    /// pooled cells of every raster channel.
    pub bev_subcells: usize,
    #[serde(default)]
    pub toggles: IntraToggles,
}

impl ModelConfig {
    /// Query counts used for the full-scale model: 100 x 20 map queries,
    /// 5 modes of 6 points per agent, 3 ego modes of 6 points.
    pub fn full_scale() -> Self {
        Self {
            m_i: 100,
            m_p: 20,
            n_o: 8,
            n_i: 5,
            n_p: 6,
            k_i: 3,
            k_p: 6,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            n_classes: 2,
            bev_tokens_x: 10,
            bev_tokens_y: 8,
            bev_subcells: 3,
            toggles: IntraToggles::default(),
        }
    }

    /// Desk-scale training configuration.
    pub fn toy() -> Self {
        Self {
            m_i: 10,
            m_p: 10,
            n_o: 6,
            ..Self::full_scale()
        }
    }

    /// Small configuration used for finite-difference gradient checks.
    pub fn gradcheck() -> Self {
        Self {
            m_i: 3,
            m_p: 4,
            n_o: 2,
            n_i: 2,
            n_p: 3,
            k_i: 2,
            k_p: 3,
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            n_classes: 2,
            bev_tokens_x: 8,
            bev_tokens_y: 8,
            bev_subcells: 1,
            toggles: IntraToggles::default(),
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn map_queries(&self) -> usize {
        self.m_i * self.m_p
    }

    pub fn motion_queries(&self) -> usize {
        self.n_o * self.n_i * self.n_p
    }

    pub fn ego_queries(&self) -> usize {
        self.k_i * self.k_p
    }

    pub fn bev_tokens(&self) -> usize {
        self.bev_tokens_x * self.bev_tokens_y
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("M_I", self.m_i),
            ("M_P", self.m_p),
            ("N_O", self.n_o),
            ("N_I", self.n_i),
            ("N_P", self.n_p),
            ("K_I", self.k_i),
            ("K_P", self.k_p),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("n_classes", self.n_classes),
            ("bev_tokens_x", self.bev_tokens_x),
            ("bev_tokens_y", self.bev_tokens_y),
            ("bev_subcells", self.bev_subcells),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        // sinusoidal 2-D position encoding splits the width four ways
        if !self.d_model.is_multiple_of(4) {
            return Err(Error::Config("d_model must be a multiple of 4".into()));
        }
        if self.m_p < 2 || self.n_p < 2 || self.k_p < 2 {
            return Err(Error::Config(
                "polylines and trajectories need at least 2 points".into(),
            ));
        }
        Ok(())
    }
}
