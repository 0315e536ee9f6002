//! Finite-difference gradient checks of every substrate operation, one
//! decoder layer and the full model loss.

use std::cell::RefCell;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, GradCheckReport, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{AttentionKernel, DecoderLayer, InvDriver, SceneInput, SelfAttnPlan};
use crate::query::{build_intra_instance_mask, ModelConfig};
use crate::scene::{generate_scene, SceneGenConfig};
use crate::train::{total_loss_with, LossWeights, SceneTargets};

pub const FD_STEP: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;

pub const OPS: &[&str] = &[
    "matmul",
    "matmul_nt",
    "masked_softmax",
    "softmax",
    "layer_norm",
    "linear",
    "l1",
    "relu",
    "heads",
    "groups",
    "cross_entropy",
    "bce",
    "concat",
];

pub type ObjectiveFn = Box<dyn Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>>;

/// A scalar function of the parameters in `store` listed in `params`.
pub struct Objective {
    pub name: String,
    pub store: ParamStore<f64>,
    pub params: Vec<ParamId>,
    pub f: ObjectiveFn,
}

impl Objective {
    pub fn check(&self, tolerance: f64) -> Result<GradCheckReport> {
        self.check_with_step(FD_STEP, tolerance)
    }

    pub fn check_with_step(&self, step: f64, tolerance: f64) -> Result<GradCheckReport> {
        grad_check(
            &self.store,
            &self.params,
            |t, s| (self.f)(t, s),
            step,
            tolerance,
        )
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Objective exercising one substrate operation on random inputs.
pub fn op_objective(op: &str, seed: u64) -> Result<Objective> {
    if !OPS.contains(&op) {
        return Err(Error::Input(format!("unknown operation `{op}`")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let a = store.register("a", rand_tensor(&mut rng, &[3, 4]))?;
    let b = store.register("b", rand_tensor(&mut rng, &[4, 2]))?;
    let c = store.register("c", rand_tensor(&mut rng, &[4]))?;
    let coef = rand_tensor(&mut rng, &[3, 4]);
    let coef2 = rand_tensor(&mut rng, &[3, 2]);
    let target = rand_tensor(&mut rng, &[3, 4]);
    let mask = Arc::new(build_intra_instance_mask(1, 3));
    let name = op.to_string();
    let f = move |tape: &mut Tape<f64>, s: &ParamStore<f64>| -> Result<Var> {
        let (av, bv, cv) = (tape.param(s, a), tape.param(s, b), tape.param(s, c));
        let k = tape.constant(coef.clone());
        let k2 = tape.constant(coef2.clone());
        Ok(match name.as_str() {
            "matmul" => {
                let y = tape.matmul(av, bv)?;
                let y = tape.mul(y, k2)?;
                tape.sum(y)
            }
            "matmul_nt" => {
                let y = tape.matmul_nt_scaled(av, av, 0.7)?;
                let y = tape.mul(y, y)?;
                tape.mean(y)
            }
            "masked_softmax" => {
                let sq = tape.matmul_nt(av, av)?;
                let p = tape.masked_softmax(sq, &mask)?;
                let y = tape.matmul(p, av)?;
                let y = tape.mul(y, k)?;
                tape.sum(y)
            }
            "softmax" => {
                let sc = tape.matmul(av, bv)?;
                let p = tape.softmax(sc);
                let y = tape.mul(p, k2)?;
                tape.sum(y)
            }
            "layer_norm" => {
                let y = tape.layer_norm(av, cv, cv)?;
                let y = tape.mul(y, k)?;
                tape.sum(y)
            }
            "linear" => {
                let bias = tape.gather_rows(cv, vec![0, 1])?;
                let y = tape.linear(av, bv, bias)?;
                let y = tape.mul(y, k2)?;
                tape.sum(y)
            }
            "l1" => {
                let t = tape.constant(target.clone());
                tape.l1_loss(av, t)?
            }
            "relu" => {
                let y = tape.relu(av);
                let y = tape.mul(y, k)?;
                tape.sum(y)
            }
            "heads" => {
                let y = tape.split_heads(av, 2)?;
                let z = tape.matmul_nt(y, y)?;
                let z = tape.matmul(z, y)?;
                let m = tape.merge_heads(z)?;
                let m = tape.mul(m, k)?;
                tape.sum(m)
            }
            "groups" => {
                let y = tape.group_cumsum(av, 3)?;
                let y = tape.mul(y, k)?;
                let r = tape.reshape(y, vec![6, 2])?;
                let m = tape.group_mean(r, 2)?;
                let m = tape.mul(m, m)?;
                tape.sum(m)
            }
            "cross_entropy" => tape.cross_entropy(av, &[1, 3, 0])?,
            "bce" => tape.bce_with_logits(cv, &[1.0, 0.0, 1.0, 0.0])?,
            "concat" => {
                let y = tape.concat_rows(&[av, av])?;
                let y = tape.add_row(y, cv)?;
                let y = tape.mul(y, y)?;
                tape.mean(y)
            }
            _ => unreachable!(),
        })
    };
    Ok(Objective {
        name: op.to_string(),
        store,
        params: vec![a, b, c],
        f: Box::new(f),
    })
}

/// One decoder layer with cross-attention, masked self-attention over three
/// instances of two points, and the feed-forward block. Queries and memory
/// are parameters so input gradients are checked too.
pub fn decoder_layer_objective(seed: u64) -> Result<Objective> {
    let (d, heads, n_inst, bs) = (8, 2, 3, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let layer = DecoderLayer::register(
        &mut store,
        "layer",
        &["cross_attn"],
        true,
        d,
        heads,
        &mut rng,
    )?;
    let x = store.register("queries", rand_tensor(&mut rng, &[n_inst * bs, d]))?;
    let memory = store.register("memory", rand_tensor(&mut rng, &[5, d]))?;
    let coef = rand_tensor(&mut rng, &[n_inst * bs, d]);
    let mask = Arc::new(build_intra_instance_mask(n_inst, bs));
    let params = store.ids().collect();
    let f = move |tape: &mut Tape<f64>, s: &ParamStore<f64>| -> Result<Var> {
        let (xv, mv) = (tape.param(s, x), tape.param(s, memory));
        let plan = SelfAttnPlan {
            mask: &mask,
            kernel: AttentionKernel::Dense,
            batch: 1,
        };
        let out = layer.forward(tape, s, xv, &[mv], plan)?;
        let k = tape.constant(coef.clone());
        let y = tape.mul(out, k)?;
        Ok(tape.sum(y))
    };
    Ok(Objective {
        name: "decoder_layer".into(),
        store,
        params,
        f: Box::new(f),
    })
}

/// Scene settings matching [`ModelConfig::gradcheck`]: three future steps
/// and at most two agents.
pub fn gradcheck_scene_config() -> SceneGenConfig {
    SceneGenConfig {
        future_steps: 3,
        agent_count_min: 1,
        agent_count_max: 2,
        ..SceneGenConfig::default()
    }
}

/// Total training loss of the small gradient-check model on one scene,
/// over every parameter.
pub fn model_objective(seed: u64) -> Result<Objective> {
    let cfg = ModelConfig::gradcheck();
    let sc = gradcheck_scene_config();
    let scene = generate_scene(seed, &sc);
    let input = SceneInput::<f64>::new(&scene, &sc, &cfg)?;
    let targets = SceneTargets::new(&scene, &cfg)?;
    let model = InvDriver::<f64>::new(cfg, seed)?;
    let weights = LossWeights::default();
    // matching and winning modes are held at their values for the
    // unperturbed parameters, where the analytic gradient is taken
    let mut tape = Tape::new();
    let vars = model.forward(&mut tape, &[&input])?;
    let (_, _, choices) =
        total_loss_with(&mut tape, &vars, 0, &targets, &weights, &model.cfg, None)?;
    let store = model.store.clone();
    let params = store.ids().collect();
    let model = RefCell::new(model);
    let f = move |tape: &mut Tape<f64>, s: &ParamStore<f64>| -> Result<Var> {
        // the model reads its own store, so load the perturbed values first
        let mut model = model.borrow_mut();
        model.store = s.clone();
        let vars = model.forward(tape, &[&input])?;
        Ok(total_loss_with(
            tape,
            &vars,
            0,
            &targets,
            &weights,
            &model.cfg,
            Some(&choices),
        )?
        .0)
    };
    Ok(Objective {
        name: "model_loss".into(),
        store,
        params,
        f: Box::new(f),
    })
}

/// Outcome of one objective of the suite.
#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Elements failing tolerance by more than the finite-difference
    /// rounding floor.
    pub unexplained: usize,
}

/// Every operation over `seeds` seeds and the decoder layer at
/// `op_tolerance`, and the model loss at `model_tolerance`.
pub fn run_suite(seeds: u64, op_tolerance: f64, model_tolerance: f64) -> Result<Vec<SuiteEntry>> {
    let mut entries = Vec::new();
    let mut push = |obj: Objective, tol: f64| -> Result<()> {
        let report = obj.check(tol)?;
        entries.push(SuiteEntry {
            name: obj.name,
            max_rel_error: report.max_rel_error(),
            tolerance: tol,
            passed: report.passed(),
            unexplained: report.unexplained,
        });
        Ok(())
    };
    for op in OPS {
        for seed in 0..seeds {
            push(op_objective(op, seed)?, op_tolerance)?;
        }
    }
    push(decoder_layer_objective(0)?, op_tolerance)?;
    push(model_objective(0)?, model_tolerance)?;
    Ok(entries)
}
