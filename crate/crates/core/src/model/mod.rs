//! Perception, prediction and planning decoders over a pooled BEV encoder.

mod bev;
mod layers;
mod output;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use bev::{bev_token_width, pool_bev, token_centers, VELOCITY_SCALE};
pub use layers::{
    position_encoding, Attention, AttentionKernel, DecoderLayer, FeedForward, Linear, Mlp, Norm,
    SelfAttnPlan,
};
pub use output::ModelOutput;

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::query::{
    mask_for_perception, mask_for_planning, mask_for_prediction, motion_indices, pairwise_indices,
    IntraInstanceMask, ModelConfig, QueryBank, EMBEDDING_INIT_STD,
};
use crate::scalar::Scalar;
use crate::scene::{rasterize_bev, SceneGenConfig, VectorScene};

/// Meters per unit of trajectory-head output (one step of cumulative offset).
pub const TRAJECTORY_STEP_SCALE: f64 = 5.0;
/// Meters per unit of map point-head output.
pub const MAP_COORD_SCALE: f64 = 30.0;
/// Features per present agent: last two velocity steps and heading.
pub const AGENT_STATE_DIM: usize = 6;
pub const N_COMMANDS: usize = 3;

/// Output-layer init gain for the regression and classification heads.
const HEAD_GAIN: f64 = 0.1;

/// Everything the network reads from one scene.
#[derive(Clone, Debug)]
pub struct SceneInput<T> {
    /// Pooled raster features, `[tokens, s^2 * channels]`.
    pub bev: Tensor<T>,
    /// Position encoding of every BEV token, `[tokens, d]`.
    pub bev_pe: Tensor<T>,
    /// Number of present agents (the leading agent slots).
    pub n_agents: usize,
    /// `[n_agents, AGENT_STATE_DIM]`.
    pub agent_states: Option<Tensor<T>>,
    /// Position encoding of each present agent's anchor, `[n_agents, d]`.
    pub agent_pe: Option<Tensor<T>>,
    /// Anchor of every motion query, `[N_O * N_I * N_P, 2]`; zero for empty slots.
    pub anchors: Tensor<T>,
    pub command: usize,
}

impl<T: Scalar> SceneInput<T> {
    pub fn new(scene: &VectorScene, scene_cfg: &SceneGenConfig, cfg: &ModelConfig) -> Result<Self> {
        if scene.agents.len() > cfg.n_o {
            return Err(Error::Input(format!(
                "scene {} has {} agents but the model has {} agent queries",
                scene.seed,
                scene.agents.len(),
                cfg.n_o
            )));
        }
        let grid = rasterize_bev(scene, scene_cfg);
        let d = cfg.d_model;
        let bev = pool_bev(&grid, cfg);
        let pe: Vec<T> = token_centers(&grid, cfg)
            .into_iter()
            .flat_map(|[x, y]| position_encoding::<T>(x, y, d))
            .collect();
        let bev_pe = Tensor::new(vec![cfg.bev_tokens(), d], pe)?;

        let n = scene.agents.len();
        let dt = scene_cfg.timestep;
        let mut states = Vec::with_capacity(n * AGENT_STATE_DIM);
        let mut agent_pe = Vec::with_capacity(n * d);
        for a in &scene.agents {
            let h = &a.history;
            let vel = |i: usize| -> [f64; 2] {
                if i == 0 {
                    return [0.0, 0.0];
                }
                [(h[i][0] - h[i - 1][0]) / dt, (h[i][1] - h[i - 1][1]) / dt]
            };
            let last = h.len() - 1;
            let (v1, v0) = (vel(last), vel(last.saturating_sub(1)));
            let heading = h[last][2];
            states.extend(
                [v1[0], v1[1], v0[0], v0[1]]
                    .map(|v| v / VELOCITY_SCALE)
                    .into_iter()
                    .chain([heading.cos(), heading.sin()])
                    .map(T::lit),
            );
            agent_pe.extend(position_encoding::<T>(h[last][0], h[last][1], d));
        }
        let per_agent = cfg.n_i * cfg.n_p;
        let anchors = Tensor::from_fn(vec![cfg.motion_queries(), 2], |i| {
            let agent = i / 2 / per_agent;
            scene
                .agents
                .get(agent)
                .map_or(T::zero(), |a| T::lit(a.current()[i % 2]))
        });
        Ok(Self {
            bev,
            bev_pe,
            n_agents: n,
            agent_states: (n > 0)
                .then(|| Tensor::new(vec![n, AGENT_STATE_DIM], states))
                .transpose()?,
            agent_pe: (n > 0)
                .then(|| Tensor::new(vec![n, d], agent_pe))
                .transpose()?,
            anchors,
            command: scene.command.index(),
        })
    }
}

/// Query-initialization pass, decoder layers and a closing norm.
#[derive(Clone, Debug)]
pub struct DecoderStack {
    pub init: Option<Attention>,
    pub layers: Vec<DecoderLayer>,
    pub norm: Norm,
}

impl DecoderStack {
    fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        contexts: &[&str],
        intra: bool,
        cfg: &ModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let (d, h) = (cfg.d_model, cfg.n_heads);
        let init = (intra && cfg.toggles.query_init)
            .then(|| Attention::register(store, &format!("{prefix}.init"), d, h, rng))
            .transpose()?;
        let layers = (0..cfg.n_layers)
            .map(|l| {
                DecoderLayer::register(
                    store,
                    &format!("{prefix}.layer{l}"),
                    contexts,
                    intra,
                    d,
                    h,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            init,
            layers,
            norm: Norm::register(store, &format!("{prefix}.norm"), d)?,
        })
    }

    fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        mut x: Var,
        memories: &[Var],
        plan: SelfAttnPlan<'_>,
    ) -> Result<Var> {
        if let Some(init) = &self.init {
            x = init.self_block(tape, store, x, plan)?;
        }
        for layer in &self.layers {
            x = layer.forward(tape, store, x, memories, plan)?;
        }
        self.norm.forward(tape, store, x)
    }
}

#[derive(Clone, Debug)]
pub struct PerceptionParams {
    pub queries: QueryBank,
    pub stack: DecoderStack,
    pub point_head: Mlp,
    pub class_head: Linear,
}

#[derive(Clone, Debug)]
pub struct PredictionParams {
    pub queries: QueryBank,
    pub agent_state: Linear,
    /// Added to the queries of agent slots with no agent.
    pub empty: ParamId,
    pub stack: DecoderStack,
    pub trajectory_head: Mlp,
    pub mode_head: Linear,
    pub existence_head: Linear,
}

#[derive(Clone, Debug)]
pub struct PlanningParams {
    pub queries: QueryBank,
    pub command: ParamId,
    pub stack: DecoderStack,
    pub trajectory_head: Mlp,
    pub mode_head: Linear,
}

/// Perception decoder results: queries `[M_I * M_P, d]`, points
/// `[M_I * M_P, 2]` and class logits `[M_I, classes + 1]` per scene.
///
/// Every var stacks the scenes of a batch along its leading axis.
#[derive(Clone, Copy, Debug)]
pub struct PerceptionVars {
    pub queries: Var,
    pub points: Var,
    pub class_logits: Var,
}

/// Prediction decoder results over all `N_O` agent slots: queries and
/// trajectories `[N_O * N_I * N_P, ..]`, mode logits `[N_O * N_I, 1]`,
/// existence logits `[N_O, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct PredictionVars {
    pub queries: Var,
    pub trajectories: Var,
    pub mode_logits: Var,
    pub existence_logits: Var,
}

/// Planning decoder results: trajectories `[K_I * K_P, 2]`, mode logits `[K_I, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct PlanningVars {
    pub trajectories: Var,
    pub mode_logits: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub batch: usize,
    pub bev: Var,
    pub perception: PerceptionVars,
    pub prediction: PredictionVars,
    pub planning: PlanningVars,
}

/// The full network: parameters plus the fixed attention masks.
pub struct InvDriver<T> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub bev_proj: Linear,
    pub perception: PerceptionParams,
    pub prediction: PredictionParams,
    pub planning: PlanningParams,
    pub kernel: AttentionKernel,
    perception_mask: Arc<IntraInstanceMask>,
    prediction_mask: Arc<IntraInstanceMask>,
    planning_mask: Arc<IntraInstanceMask>,
}

impl<T: Scalar> InvDriver<T> {
    /// Registers every parameter with a deterministic initialization.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d, tg) = (cfg.d_model, cfg.toggles);
        let rng = &mut rng;

        let bev_proj =
            Linear::register(&mut store, "bev.proj", bev_token_width(&cfg), d, 1.0, rng)?;

        let perception = PerceptionParams {
            queries: QueryBank::register(
                &mut store,
                "perception.query",
                cfg.m_i,
                cfg.m_p,
                None,
                d,
                rng,
            )?,
            stack: DecoderStack::register(
                &mut store,
                "perception",
                &["cross_attn"],
                tg.perception_intra,
                &cfg,
                rng,
            )?,
            point_head: Mlp::register(
                &mut store,
                "perception.point_head",
                d,
                d,
                2,
                HEAD_GAIN,
                rng,
            )?,
            class_head: Linear::register(
                &mut store,
                "perception.class_head",
                d,
                cfg.n_classes + 1,
                HEAD_GAIN,
                rng,
            )?,
        };

        let prediction = PredictionParams {
            queries: QueryBank::register(
                &mut store,
                "prediction.query",
                cfg.n_o,
                cfg.n_p,
                Some(cfg.n_i),
                d,
                rng,
            )?,
            agent_state: Linear::register(
                &mut store,
                "prediction.agent_state",
                AGENT_STATE_DIM,
                d,
                1.0,
                rng,
            )?,
            empty: store.register(
                "prediction.empty",
                crate::query::gaussian_table(1, d, EMBEDDING_INIT_STD, rng),
            )?,
            stack: DecoderStack::register(
                &mut store,
                "prediction",
                &["cross_attn"],
                tg.prediction_intra,
                &cfg,
                rng,
            )?,
            trajectory_head: Mlp::register(
                &mut store,
                "prediction.trajectory_head",
                d,
                d,
                2,
                HEAD_GAIN,
                rng,
            )?,
            // mode logits only enter a softmax over modes, which cancels a shared bias
            mode_head: Linear::register_unbiased(
                &mut store,
                "prediction.mode_head",
                d,
                1,
                HEAD_GAIN,
                rng,
            )?,
            existence_head: Linear::register(
                &mut store,
                "prediction.existence_head",
                d,
                1,
                HEAD_GAIN,
                rng,
            )?,
        };

        let planning = PlanningParams {
            queries: QueryBank::register(
                &mut store,
                "planning.query",
                cfg.k_i,
                cfg.k_p,
                None,
                d,
                rng,
            )?,
            command: store.register(
                "planning.command",
                crate::query::gaussian_table(N_COMMANDS, d, EMBEDDING_INIT_STD, rng),
            )?,
            stack: DecoderStack::register(
                &mut store,
                "planning",
                &["map_attn", "motion_attn"],
                tg.planning_intra,
                &cfg,
                rng,
            )?,
            trajectory_head: Mlp::register(
                &mut store,
                "planning.trajectory_head",
                d,
                d,
                2,
                HEAD_GAIN,
                rng,
            )?,
            mode_head: Linear::register_unbiased(
                &mut store,
                "planning.mode_head",
                d,
                1,
                HEAD_GAIN,
                rng,
            )?,
        };

        Ok(Self {
            perception_mask: Arc::new(mask_for_perception(&cfg)),
            prediction_mask: Arc::new(mask_for_prediction(&cfg, cfg.n_o)?),
            planning_mask: Arc::new(mask_for_planning(&cfg)),
            cfg,
            store,
            kernel: AttentionKernel::default(),
            bev_proj,
            perception,
            prediction,
            planning,
        })
    }

    pub fn perception_mask(&self) -> &Arc<IntraInstanceMask> {
        &self.perception_mask
    }

    pub fn prediction_mask(&self) -> &Arc<IntraInstanceMask> {
        &self.prediction_mask
    }

    pub fn planning_mask(&self) -> &Arc<IntraInstanceMask> {
        &self.planning_mask
    }

    fn plan<'a>(&self, mask: &'a Arc<IntraInstanceMask>, batch: usize) -> SelfAttnPlan<'a> {
        SelfAttnPlan {
            mask,
            kernel: self.kernel,
            batch,
        }
    }

    /// Projected BEV tokens plus their position encoding, `[tokens, d]`
    /// per scene.
    pub fn encode_bev(&self, tape: &mut Tape<T>, inputs: &[&SceneInput<T>]) -> Result<Var> {
        let raw = tape.constant(stack(inputs.iter().map(|i| &i.bev))?);
        let x = self.bev_proj.forward(tape, &self.store, raw)?;
        let pe = tape.constant(stack(inputs.iter().map(|i| &i.bev_pe))?);
        tape.add(x, pe)
    }

    /// Instance-major pairwise sum of two embedding tables, repeated for
    /// each scene of the batch.
    fn compose(
        &self,
        tape: &mut Tape<T>,
        instances: Var,
        points: Var,
        batch: usize,
    ) -> Result<Var> {
        let (n, p) = (tape.shape(instances)[0], tape.shape(points)[0]);
        let (ii, pi) = pairwise_indices(n, p);
        let a = tape.gather_rows(instances, ii.repeat(batch))?;
        let b = tape.gather_rows(points, pi.repeat(batch))?;
        tape.add(a, b)
    }

    pub fn perception_decoder(
        &self,
        tape: &mut Tape<T>,
        bev: Var,
        batch: usize,
    ) -> Result<PerceptionVars> {
        let (p, s) = (&self.perception, &self.store);
        let inst = tape.param(s, p.queries.instances);
        let pts = tape.param(s, p.queries.points);
        let q0 = self.compose(tape, inst, pts, batch)?;
        let queries =
            p.stack
                .forward(tape, s, q0, &[bev], self.plan(&self.perception_mask, batch))?;
        let raw = p.point_head.forward(tape, s, queries)?;
        let points = tape.scale(raw, T::lit(MAP_COORD_SCALE));
        let pooled = tape.group_mean(queries, self.cfg.m_p)?;
        let class_logits = p.class_head.forward(tape, s, pooled)?;
        Ok(PerceptionVars {
            queries,
            points,
            class_logits,
        })
    }

    /// Per-slot additive term, `[N_O, d]` per scene: state projection and
    /// anchor encoding for present agents, the empty embedding for the
    /// remaining slots.
    fn agent_slot_terms(&self, tape: &mut Tape<T>, inputs: &[&SceneInput<T>]) -> Result<Var> {
        let (p, s) = (&self.prediction, &self.store);
        let states: Vec<_> = inputs
            .iter()
            .filter_map(|i| i.agent_states.as_ref())
            .collect();
        let pes: Vec<_> = inputs.iter().filter_map(|i| i.agent_pe.as_ref()).collect();
        let present = states.len();
        let mut table = Vec::with_capacity(2);
        let mut n_present = 0;
        if present > 0 {
            let st = tape.constant(stack(states.into_iter())?);
            let x = p.agent_state.forward(tape, s, st)?;
            let pe = tape.constant(stack(pes.into_iter())?);
            n_present = tape.shape(x)[0];
            table.push(tape.add(x, pe)?);
        }
        table.push(tape.param(s, p.empty));
        let table = tape.concat_rows(&table)?;
        // present rows first, then the single empty row
        let mut rows = Vec::with_capacity(inputs.len() * self.cfg.n_o);
        let mut next = 0;
        for input in inputs {
            rows.extend(next..next + input.n_agents);
            next += input.n_agents;
            rows.extend(std::iter::repeat_n(n_present, self.cfg.n_o - input.n_agents));
        }
        tape.gather_rows(table, rows)
    }

    pub fn prediction_decoder(
        &self,
        tape: &mut Tape<T>,
        bev: Var,
        inputs: &[&SceneInput<T>],
    ) -> Result<PredictionVars> {
        let (p, s, cfg) = (&self.prediction, &self.store, &self.cfg);
        let batch = inputs.len();
        let modes_id = p.queries.modes.expect("prediction queries have modes");
        let agents = tape.param(s, p.queries.instances);
        let agents = tape.gather_rows(agents, (0..cfg.n_o).collect::<Vec<_>>().repeat(batch))?;
        let slots = self.agent_slot_terms(tape, inputs)?;
        let agents = tape.add(agents, slots)?;
        let modes = tape.param(s, modes_id);
        let points = tape.param(s, p.queries.points);
        let [ai, mi, pi] = motion_indices(cfg.n_o, cfg.n_i, cfg.n_p);
        let ai = (0..batch)
            .flat_map(|b| ai.iter().map(move |&i| i + b * cfg.n_o))
            .collect();
        let a = tape.gather_rows(agents, ai)?;
        let m = tape.gather_rows(modes, mi.repeat(batch))?;
        let t = tape.gather_rows(points, pi.repeat(batch))?;
        let q0 = tape.add(a, m)?;
        let q0 = tape.add(q0, t)?;

        let queries =
            p.stack
                .forward(tape, s, q0, &[bev], self.plan(&self.prediction_mask, batch))?;
        let steps = p.trajectory_head.forward(tape, s, queries)?;
        let steps = tape.scale(steps, T::lit(TRAJECTORY_STEP_SCALE));
        let offsets = tape.group_cumsum(steps, cfg.n_p)?;
        let anchors = tape.constant(stack(inputs.iter().map(|i| &i.anchors))?);
        let trajectories = tape.add(offsets, anchors)?;
        let per_mode = tape.group_mean(queries, cfg.n_p)?;
        let mode_logits = p.mode_head.forward(tape, s, per_mode)?;
        let per_agent = tape.group_mean(queries, cfg.n_i * cfg.n_p)?;
        let existence_logits = p.existence_head.forward(tape, s, per_agent)?;
        Ok(PredictionVars {
            queries,
            trajectories,
            mode_logits,
            existence_logits,
        })
    }

    /// Ego decoder. Reads only the final map and motion queries, never the
    /// BEV tokens. `commands` holds one command index per scene.
    pub fn planning_decoder(
        &self,
        tape: &mut Tape<T>,
        map_queries: Var,
        motion_queries: Var,
        commands: &[usize],
    ) -> Result<PlanningVars> {
        let (p, s, cfg) = (&self.planning, &self.store, &self.cfg);
        if let Some(c) = commands.iter().find(|&&c| c >= N_COMMANDS) {
            return Err(Error::Input(format!("command index {c} out of range")));
        }
        let batch = commands.len();
        let modes = tape.param(s, p.queries.instances);
        let modes = tape.gather_rows(modes, (0..cfg.k_i).collect::<Vec<_>>().repeat(batch))?;
        let cmd = tape.param(s, p.command);
        let cmd = tape.gather_rows(
            cmd,
            commands.iter().flat_map(|&c| [c].repeat(cfg.k_i)).collect(),
        )?;
        let modes = tape.add(modes, cmd)?;
        let pts = tape.param(s, p.queries.points);
        let (_, pi) = pairwise_indices(cfg.k_i, cfg.k_p);
        let mi: Vec<usize> = (0..batch * cfg.k_i)
            .flat_map(|m| [m].repeat(cfg.k_p))
            .collect();
        let a = tape.gather_rows(modes, mi)?;
        let b = tape.gather_rows(pts, pi.repeat(batch))?;
        let q0 = tape.add(a, b)?;
        let queries = p.stack.forward(
            tape,
            s,
            q0,
            &[map_queries, motion_queries],
            self.plan(&self.planning_mask, batch),
        )?;
        let steps = p.trajectory_head.forward(tape, s, queries)?;
        let steps = tape.scale(steps, T::lit(TRAJECTORY_STEP_SCALE));
        let trajectories = tape.group_cumsum(steps, cfg.k_p)?;
        let per_mode = tape.group_mean(queries, cfg.k_p)?;
        let mode_logits = p.mode_head.forward(tape, s, per_mode)?;
        Ok(PlanningVars {
            trajectories,
            mode_logits,
        })
    }

    /// Decodes a batch of scenes in one pass. Scenes never interact: every
    /// attention and grouping stays inside its own scene's rows.
    pub fn forward(&self, tape: &mut Tape<T>, inputs: &[&SceneInput<T>]) -> Result<ForwardVars> {
        if inputs.is_empty() {
            return Err(Error::Input("forward needs at least one scene".into()));
        }
        let batch = inputs.len();
        let bev = self.encode_bev(tape, inputs)?;
        let perception = self.perception_decoder(tape, bev, batch)?;
        let prediction = self.prediction_decoder(tape, bev, inputs)?;
        let commands: Vec<usize> = inputs.iter().map(|i| i.command).collect();
        let planning =
            self.planning_decoder(tape, perception.queries, prediction.queries, &commands)?;
        Ok(ForwardVars {
            batch,
            bev,
            perception,
            prediction,
            planning,
        })
    }

    /// Rasterizes, encodes and decodes one scene.
    pub fn full_forward(
        &self,
        scene: &VectorScene,
        scene_cfg: &SceneGenConfig,
    ) -> Result<ModelOutput<T>> {
        let input = SceneInput::new(scene, scene_cfg, &self.cfg)?;
        let mut tape = Tape::new();
        let vars = self.forward(&mut tape, &[&input])?;
        ModelOutput::from_tape(&tape, &vars, &self.cfg, 0, input.n_agents)
    }
}

/// Concatenates tensors with matching trailing shape along the leading axis.
fn stack<'a, T: Scalar + 'a>(parts: impl Iterator<Item = &'a Tensor<T>>) -> Result<Tensor<T>> {
    let mut shape: Option<Vec<usize>> = None;
    let mut data = Vec::new();
    for t in parts {
        match &mut shape {
            None => shape = Some(t.shape().to_vec()),
            Some(s) => {
                if s[1..] != t.shape()[1..] {
                    return Err(Error::shape("stack", s, t.shape()));
                }
                s[0] += t.shape()[0];
            }
        }
        data.extend_from_slice(t.data());
    }
    let shape = shape.ok_or_else(|| Error::Input("stack of nothing".into()))?;
    Tensor::new(shape, data)
}
