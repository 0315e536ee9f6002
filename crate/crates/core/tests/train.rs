mod common;

use common::brute_force;
use invdriver::autodiff::{grad_check, ParamStore, Tape, Tensor, Var};
use invdriver::checks::gradcheck_scene_config;
use invdriver::error::Error;
use invdriver::geometry::Point;
use invdriver::model::{
    ForwardVars, InvDriver, PerceptionVars, PlanningVars, PredictionVars, SceneInput,
};
use invdriver::query::ModelConfig;
use invdriver::scene::{generate_scene, generate_scenes, SceneGenConfig, VectorScene};
use invdriver::train::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cost_matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..=6, 1usize..=6).prop_flat_map(|(n, m)| {
        prop_oneof![
            prop::collection::vec(prop::collection::vec(0.0..10.0f64, m), n),
            // coarse values create ties
            prop::collection::vec(prop::collection::vec((0u8..4).prop_map(f64::from), m), n),
        ]
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn hungarian_matches_brute_force(cost in cost_matrix()) {
        let r = hungarian(&cost).unwrap();
        let (n, m) = (cost.len(), cost[0].len());
        prop_assert_eq!(r.pairs.len(), n.min(m));
        let mut rows: Vec<_> = r.pairs.iter().map(|p| p.0).collect();
        let mut cols: Vec<_> = r.pairs.iter().map(|p| p.1).collect();
        rows.dedup();
        cols.sort();
        cols.dedup();
        prop_assert_eq!(rows.len(), r.pairs.len());
        prop_assert_eq!(cols.len(), r.pairs.len());
        prop_assert_eq!(r.total_cost, r.pairs.iter().fold(0.0, |s, &(i, j)| s + cost[i][j]));
        prop_assert_eq!(r.total_cost, brute_force(&cost));
    }
}

#[test]
fn hungarian_examples() {
    let c = vec![
        vec![4.0, 1.0, 3.0],
        vec![2.0, 0.0, 5.0],
        vec![3.0, 2.0, 2.0],
    ];
    assert_eq!(hungarian(&c).unwrap().total_cost, brute_force(&c));
    assert_eq!(hungarian(&c).unwrap().total_cost, 5.0);
    assert_eq!(hungarian(&[vec![7.0]]).unwrap().pairs, vec![(0, 0)]);
    assert!(matches!(
        hungarian(&[vec![f64::NAN, 1.0]]),
        Err(Error::Input(_))
    ));
}

fn line(offset: f64) -> Vec<Point<f64>> {
    (0..4)
        .map(|i| [i as f64 * 2.0, offset + 0.3 * i as f64])
        .collect()
}

#[test]
fn match_map_examples() {
    let gt = vec![(0, line(0.0)), (1, line(5.0))];
    // prediction 0 is GT 1 reversed, prediction 1 is far off, prediction 2 is GT 0
    let mut pts: Vec<Point<f64>> = line(5.0).into_iter().rev().collect();
    pts.extend(line(-20.0));
    pts.extend(line(0.0));
    let logits = [-30.0, 30.0, -30.0, 0.0, 0.0, 0.0, 30.0, -30.0, -30.0];
    let r = match_map(&pts, &logits, &gt, 4).unwrap();
    assert_eq!(r.pairs, vec![(0, 1), (2, 0)]);
    assert_eq!(r.reversed, vec![true, false]);
    // geometric cost 0 in both pairs; the class term is below 1e-20
    assert!(r.total_cost < 1e-12, "{}", r.total_cost);

    let empty = match_map(&pts, &logits, &[], 4).unwrap();
    assert!(empty.pairs.is_empty());
    assert_eq!(empty.target_of(0), None);
}

/// Raw output tensors for one scene, laid out like the forward vars.
#[derive(Clone, Debug)]
struct Raw {
    points: Tensor<f64>,
    class_logits: Tensor<f64>,
    trajectories: Tensor<f64>,
    mode_logits: Tensor<f64>,
    existence: Tensor<f64>,
    plan: Tensor<f64>,
    plan_logits: Tensor<f64>,
}

impl Raw {
    fn read(tape: &Tape<f64>, v: &ForwardVars) -> Self {
        Self {
            points: tape.value(v.perception.points).clone(),
            class_logits: tape.value(v.perception.class_logits).clone(),
            trajectories: tape.value(v.prediction.trajectories).clone(),
            mode_logits: tape.value(v.prediction.mode_logits).clone(),
            existence: tape.value(v.prediction.existence_logits).clone(),
            plan: tape.value(v.planning.trajectories).clone(),
            plan_logits: tape.value(v.planning.mode_logits).clone(),
        }
    }

    fn random(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = |shape: Vec<usize>, scale: f64| {
            Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
        };
        Self {
            points: t(vec![cfg.m_i * cfg.m_p, 2], 20.0),
            class_logits: t(vec![cfg.m_i, cfg.n_classes + 1], 3.0),
            trajectories: t(vec![cfg.n_o * cfg.n_i * cfg.n_p, 2], 20.0),
            mode_logits: t(vec![cfg.n_o * cfg.n_i, 1], 3.0),
            existence: t(vec![cfg.n_o, 1], 3.0),
            plan: t(vec![cfg.k_i * cfg.k_p, 2], 20.0),
            plan_logits: t(vec![cfg.k_i, 1], 3.0),
        }
    }

    fn vars(&self, tape: &mut Tape<f64>) -> ForwardVars {
        let mut c = |t: &Tensor<f64>| tape.constant(t.clone());
        let dummy = c(&Tensor::zeros(vec![1, 1]));
        ForwardVars {
            batch: 1,
            bev: dummy,
            perception: PerceptionVars {
                queries: dummy,
                points: c(&self.points),
                class_logits: c(&self.class_logits),
            },
            prediction: PredictionVars {
                queries: dummy,
                trajectories: c(&self.trajectories),
                mode_logits: c(&self.mode_logits),
                existence_logits: c(&self.existence),
            },
            planning: PlanningVars {
                trajectories: c(&self.plan),
                mode_logits: c(&self.plan_logits),
            },
        }
    }
}

fn pts(t: &Tensor<f64>, from: usize, n: usize) -> Vec<Point<f64>> {
    t.data()[2 * from..2 * (from + n)]
        .chunks(2)
        .map(|c| [c[0], c[1]])
        .collect()
}

fn ce(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[target]
}

fn bce(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

fn point_l1(a: &[Point<f64>], b: &[Point<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| (p[0] - q[0]).abs() + (p[1] - q[1]).abs())
        .sum::<f64>()
        / a.len() as f64
}

/// Edge loop: `1 - cos` per edge, zero-length edges contribute 0.
fn direction_oracle(pred: &[Point<f64>], gt: &[Point<f64>]) -> f64 {
    let mut total = 0.0;
    for i in 0..pred.len() - 1 {
        let a = [pred[i + 1][0] - pred[i][0], pred[i + 1][1] - pred[i][1]];
        let b = [gt[i + 1][0] - gt[i][0], gt[i + 1][1] - gt[i][1]];
        let (na, nb) = (
            (a[0] * a[0] + a[1] * a[1]).sqrt(),
            (b[0] * b[0] + b[1] * b[1]).sqrt(),
        );
        if na > 0.0 && nb > 0.0 {
            total += 1.0 - ((a[0] * b[0] + a[1] * b[1]) / (na * nb)).clamp(-1.0, 1.0);
        }
    }
    total / (pred.len() - 1) as f64
}

/// Independent recomputation of every weighted term, with the map matching
/// taken from the loss and the winning modes found by enumeration.
fn oracle(
    raw: &Raw,
    t: &SceneTargets,
    w: &LossWeights,
    cfg: &ModelConfig,
    map: &MatchResult,
) -> (LossBreakdown, Vec<usize>) {
    let mut out = LossBreakdown::default();
    let (m_p, width) = (cfg.m_p, cfg.n_classes + 1);
    if !map.pairs.is_empty() {
        let (mut l1, mut dir) = (0.0, 0.0);
        for (&(i, g), &rev) in map.pairs.iter().zip(&map.reversed) {
            let mut gt = t.map[g].1.clone();
            if rev {
                gt.reverse();
            }
            let pred = pts(&raw.points, i * m_p, m_p);
            l1 += point_l1(&pred, &gt);
            dir += direction_oracle(&pred, &gt);
        }
        out.map_pts = w.w_map_pts * l1 / map.pairs.len() as f64;
        out.map_dir = w.w_map_dir * dir / map.pairs.len() as f64;
    }
    let cls: f64 = (0..cfg.m_i)
        .map(|i| {
            let class = map.target_of(i).map_or(cfg.n_classes, |g| t.map[g].0);
            ce(&raw.class_logits.data()[i * width..(i + 1) * width], class)
        })
        .sum();
    out.map_cls = w.w_map_cls * cls / cfg.m_i as f64;

    // agents sit in the slot of their own index (zero anchor distance)
    let (n_i, n_p) = (cfg.n_i, cfg.n_p);
    let mut winners = Vec::new();
    let (mut l1, mut mode_ce) = (0.0, 0.0);
    for (a, future) in t.agent_futures.iter().enumerate() {
        let errors: Vec<f64> = (0..n_i)
            .map(|m| point_l1(&pts(&raw.trajectories, (a * n_i + m) * n_p, n_p), future))
            .collect();
        let best = (0..n_i).fold(0, |b, m| if errors[m] < errors[b] { m } else { b });
        winners.push(best);
        l1 += errors[best];
        mode_ce += ce(&raw.mode_logits.data()[a * n_i..(a + 1) * n_i], best);
    }
    if !winners.is_empty() {
        out.pred_pts = w.w_pred_pts * l1 / winners.len() as f64;
        out.pred_cls = w.w_pred_cls * mode_ce / winners.len() as f64;
    }
    let exist: f64 = (0..cfg.n_o)
        .map(|s| {
            bce(
                raw.existence.data()[s],
                if s < t.agent_futures.len() { 1.0 } else { 0.0 },
            )
        })
        .sum();
    out.pred_exist = w.w_pred_cls * exist / cfg.n_o as f64;

    let mode = t.command % cfg.k_i;
    let plan = pts(&raw.plan, mode * cfg.k_p, cfg.k_p);
    out.plan_pts = w.w_plan_pts * point_l1(&plan, &t.ego_future);
    out.plan_dir = w.w_plan_dir * direction_oracle(&plan, &t.ego_future);
    out.plan_cls = w.w_plan_cls * ce(raw.plan_logits.data(), mode);
    (out, winners)
}

fn scene_cfg() -> SceneGenConfig {
    gradcheck_scene_config()
}

fn targets(seed: u64, cfg: &ModelConfig) -> SceneTargets {
    SceneTargets::new(&generate_scene(seed, &scene_cfg()), cfg).unwrap()
}

fn loss_of(
    raw: &Raw,
    t: &SceneTargets,
    w: &LossWeights,
    cfg: &ModelConfig,
) -> (f64, LossBreakdown, LossChoices) {
    let mut tape = Tape::new();
    let vars = raw.vars(&mut tape);
    let (loss, log, choices) = total_loss_with(&mut tape, &vars, 0, t, w, cfg, None).unwrap();
    (tape.value(loss).item(), log, choices)
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

fn assert_breakdown_close(a: &LossBreakdown, b: &LossBreakdown, tol: f64) {
    for (name, (x, y)) in LossBreakdown::COLUMNS
        .iter()
        .zip(a.terms().iter().zip(b.terms()))
    {
        assert!(close(*x, y, tol), "{name}: {x} vs {y}");
    }
}

#[test]
fn losses_match_component_oracle() {
    let cfg = ModelConfig::gradcheck();
    let w = LossWeights::default();
    for seed in 0..20 {
        let t = targets(seed, &cfg);
        let raw = Raw::random(&cfg, seed);
        let (total, log, choices) = loss_of(&raw, &t, &w, &cfg);
        let (expected, winners) = oracle(&raw, &t, &w, &cfg, &choices.map);
        assert_breakdown_close(&log, &expected, 1e-10);
        assert_eq!(choices.winners, winners);
        assert!(close(total, expected.total(), 1e-10));
        assert!(close(
            total,
            log.map() + log.prediction() + log.planning(),
            1e-10
        ));
    }
}

#[test]
fn model_outputs_match_component_oracle() {
    let cfg = ModelConfig::gradcheck();
    let w = LossWeights::default();
    for seed in 0..5 {
        let scene = generate_scene(seed, &scene_cfg());
        let model = InvDriver::<f64>::new(cfg.clone(), seed).unwrap();
        let input = SceneInput::new(&scene, &scene_cfg(), &cfg).unwrap();
        let t = SceneTargets::new(&scene, &cfg).unwrap();
        let mut tape = Tape::new();
        let vars = model.forward(&mut tape, &[&input]).unwrap();
        let (loss, log, choices) =
            total_loss_with(&mut tape, &vars, 0, &t, &w, &cfg, None).unwrap();
        let raw = Raw::read(&tape, &vars);
        let (expected, winners) = oracle(&raw, &t, &w, &cfg, &choices.map);
        assert_breakdown_close(&log, &expected, 1e-10);
        assert_eq!(choices.winners, winners);
        assert!(close(tape.value(loss).item(), expected.total(), 1e-10));
    }
}

#[test]
fn map_matching_minimizes_the_stated_cost() {
    // the matcher's total equals the brute-force minimum over the same costs
    let cfg = ModelConfig::gradcheck();
    for seed in 0..10 {
        let t = targets(seed, &cfg);
        let raw = Raw::random(&cfg, seed + 100);
        let (_, _, choices) = loss_of(&raw, &t, &LossWeights::default(), &cfg);
        if t.map.is_empty() {
            continue;
        }
        let width = cfg.n_classes + 1;
        let cost: Vec<Vec<f64>> = (0..cfg.m_i)
            .map(|i| {
                let pred = pts(&raw.points, i * cfg.m_p, cfg.m_p);
                let logits = &raw.class_logits.data()[i * width..(i + 1) * width];
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
                t.map
                    .iter()
                    .map(|(class, line)| {
                        let rev: Vec<_> = line.iter().rev().copied().collect();
                        let geo = point_l1(&pred, line).min(point_l1(&pred, &rev));
                        geo + MATCH_CLASS_COST * (1.0 - (logits[*class] - max).exp() / z)
                    })
                    .collect()
            })
            .collect();
        assert!(close(choices.map.total_cost, brute_force(&cost), 1e-12));
        for (&(i, g), &rev) in choices.map.pairs.iter().zip(&choices.map.reversed) {
            let pred = pts(&raw.points, i * cfg.m_p, cfg.m_p);
            let line = &t.map[g].1;
            let r: Vec<_> = line.iter().rev().copied().collect();
            assert_eq!(rev, point_l1(&pred, &r) < point_l1(&pred, line));
        }
    }
}

#[test]
fn weighted_sum_is_linear_in_the_weights() {
    let cfg = ModelConfig::gradcheck();
    let w = LossWeights::default();
    let w2 = LossWeights {
        w_map_pts: 0.3,
        w_map_cls: 2.0,
        w_map_dir: 0.0,
        w_pred_pts: 1.7,
        w_pred_cls: 0.1,
        w_plan_pts: 0.0,
        w_plan_dir: 4.0,
        w_plan_cls: 1.2,
    };
    for seed in 0..5 {
        let t = targets(seed, &cfg);
        let raw = Raw::random(&cfg, seed);
        let at = |w: &LossWeights| loss_of(&raw, &t, w, &cfg).0;
        let base = at(&w);
        assert!(close(at(&w.scaled(2.0)), 2.0 * base, 1e-12));
        assert!(close(at(&w.plus(&w2)), base + at(&w2), 1e-12));
        assert_eq!(at(&LossWeights::zero()), 0.0);
    }
}

fn exact_outputs(t: &SceneTargets, cfg: &ModelConfig, confidence: f64) -> Raw {
    let mut raw = Raw::random(cfg, 0);
    let width = cfg.n_classes + 1;
    let (p, l) = (raw.points.data_mut(), raw.class_logits.data_mut());
    for i in 0..cfg.m_i {
        let class = t.map.get(i).map_or(cfg.n_classes, |e| e.0);
        for c in 0..width {
            l[i * width + c] = if c == class { confidence } else { -confidence };
        }
        if let Some((_, line)) = t.map.get(i) {
            for (k, q) in line.iter().enumerate() {
                p[2 * (i * cfg.m_p + k)..2 * (i * cfg.m_p + k) + 2].copy_from_slice(q);
            }
        }
    }
    let (n_i, n_p) = (cfg.n_i, cfg.n_p);
    for (a, future) in t.agent_futures.iter().enumerate() {
        // mode 1 is exact, the others far off
        for m in 0..n_i {
            for (k, q) in future.iter().enumerate() {
                let off = if m == 1 { 0.0 } else { 50.0 };
                let r = 2 * ((a * n_i + m) * n_p + k);
                raw.trajectories.data_mut()[r..r + 2].copy_from_slice(&[q[0] + off, q[1]]);
            }
            raw.mode_logits.data_mut()[a * n_i + m] = if m == 1 { confidence } else { -confidence };
        }
    }
    for s in 0..cfg.n_o {
        raw.existence.data_mut()[s] = if s < t.agent_futures.len() {
            confidence
        } else {
            -confidence
        };
    }
    let mode = t.command % cfg.k_i;
    for (k, q) in t.ego_future.iter().enumerate() {
        let r = 2 * (mode * cfg.k_p + k);
        raw.plan.data_mut()[r..r + 2].copy_from_slice(q);
    }
    for k in 0..cfg.k_i {
        raw.plan_logits.data_mut()[k] = if k == mode { confidence } else { -confidence };
    }
    raw
}

#[test]
fn exact_outputs_drive_the_loss_to_zero() {
    let cfg = ModelConfig::gradcheck();
    let t = (0..)
        .map(|s| targets(s, &cfg))
        .find(|t| !t.map.is_empty() && !t.agent_futures.is_empty())
        .unwrap();
    let mut previous = f64::INFINITY;
    for confidence in [5.0, 10.0, 20.0, 40.0] {
        let raw = exact_outputs(&t, &cfg, confidence);
        let (total, log, choices) = loss_of(&raw, &t, &LossWeights::default(), &cfg);
        assert_eq!(log.map_pts, 0.0);
        assert_eq!(log.pred_pts, 0.0);
        assert_eq!(log.plan_pts, 0.0);
        assert!(log.map_dir.abs() < 1e-15 && log.plan_dir.abs() < 1e-15);
        assert!(choices.winners.iter().all(|&m| m == 1));
        assert!(total < previous);
        previous = total;
    }
    assert!(previous < 1e-15, "{previous}");
}

#[test]
fn zero_agent_scene_has_only_the_existence_term() {
    let cfg = ModelConfig::gradcheck();
    let mut scene = generate_scene(3, &scene_cfg());
    scene.agents.clear();
    let t = SceneTargets::new(&scene, &cfg).unwrap();
    let raw = Raw::random(&cfg, 3);
    let (_, log, choices) = loss_of(&raw, &t, &LossWeights::default(), &cfg);
    assert_eq!((log.pred_pts, log.pred_cls), (0.0, 0.0));
    assert!(choices.winners.is_empty());
    let expected: f64 = raw
        .existence
        .data()
        .iter()
        .map(|&z| bce(z, 0.0))
        .sum::<f64>()
        / cfg.n_o as f64;
    assert!(close(log.pred_exist, 0.5 * expected, 1e-12));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn every_term_is_nonnegative(
        scene_seed in 0u64..1000,
        out_seed in 0u64..1000,
        w in prop::array::uniform8(0.0..3.0f64),
    ) {
        let cfg = ModelConfig::gradcheck();
        let weights = LossWeights {
            w_map_pts: w[0],
            w_map_cls: w[1],
            w_map_dir: w[2],
            w_pred_pts: w[3],
            w_pred_cls: w[4],
            w_plan_pts: w[5],
            w_plan_dir: w[6],
            w_plan_cls: w[7],
        };
        let t = targets(scene_seed, &cfg);
        let (total, log, _) = loss_of(&Raw::random(&cfg, out_seed), &t, &weights, &cfg);
        prop_assert!(log.terms().iter().all(|&x| x >= 0.0), "{:?}", log);
        prop_assert!(total >= 0.0);
    }

    #[test]
    fn direction_loss_matches_edge_loop(
        pred in prop::collection::vec(prop::array::uniform2(-10.0..10.0f64), 2..12),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gt: Vec<Point<f64>> = pred.iter().map(|_| [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)]).collect();
        if pred.len() > 2 {
            // a zero-length edge
            gt[1] = gt[0];
        }
        let v = direction_loss(&pred, &gt);
        prop_assert!((v - direction_oracle(&pred, &gt)).abs() <= 1e-12);
        prop_assert!((0.0..=2.0).contains(&v));
    }

    #[test]
    fn winning_mode_is_the_first_minimum(errors in prop::collection::vec((0u8..5).prop_map(f64::from), 1..8)) {
        let best = winning_mode(&errors);
        let min = errors.iter().copied().fold(f64::INFINITY, f64::min);
        prop_assert_eq!(best, errors.iter().position(|&e| e == min).unwrap());
    }
}

#[test]
fn direction_loss_examples() {
    let a: Vec<Point<f64>> = vec![[0.0, 0.0], [1.0, 0.5], [3.0, 0.0], [4.0, 2.0]];
    let back: Vec<Point<f64>> = a.iter().map(|p| [-p[0], -p[1]]).collect();
    assert_eq!(direction_loss(&a, &a), 0.0);
    assert!((direction_loss(&a, &back) - 2.0).abs() < 1e-15);
}

#[test]
fn direction_loss_on_tape_passes_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let pred = store
        .register(
            "pred",
            Tensor::from_fn(vec![8, 2], |_| rng.gen_range(-3.0..3.0)),
        )
        .unwrap();
    let mut gt: Vec<Point<f64>> = (0..8)
        .map(|_| [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)])
        .collect();
    gt[5] = gt[4];
    let f = |tape: &mut Tape<f64>, s: &ParamStore<f64>| -> invdriver::error::Result<Var> {
        let p = tape.param(s, pred);
        direction_loss_on_tape(tape, p, gt.clone(), 4)
    };
    let report = grad_check(&store, &[pred], f, 1e-5, 1e-4).unwrap();
    assert!(report.passed(), "{:?}", report.worst());

    let mut tape = Tape::new();
    let p = tape.param(&store, pred);
    let v = direction_loss_on_tape(&mut tape, p, gt.clone(), 4).unwrap();
    let flat = pts(store.value(pred), 0, 8);
    let expected =
        0.5 * (direction_oracle(&flat[..4], &gt[..4]) + direction_oracle(&flat[4..], &gt[4..]));
    assert!((tape.value(v).item() - expected).abs() < 1e-12);
    let p = tape.param(&store, pred);
    assert!(matches!(
        direction_loss_on_tape(&mut tape, p, gt[..6].to_vec(), 4),
        Err(Error::Shape { .. })
    ));
}

/// Gradient norm per parameter on a scene with agents and an empty slot.
fn gradient_norms(cfg: ModelConfig, sc: &SceneGenConfig) -> Vec<(String, f64)> {
    let scene = (0..)
        .map(|s| generate_scene(s, sc))
        .find(|s| (1..cfg.n_o).contains(&s.agents.len()) && s.map_elements.len() >= 2)
        .unwrap();
    let mut model = InvDriver::<f64>::new(cfg, 0).unwrap();
    let input = SceneInput::new(&scene, sc, &model.cfg).unwrap();
    let t = SceneTargets::new(&scene, &model.cfg).unwrap();
    let mut tape = Tape::new();
    let vars = model.forward(&mut tape, &[&input]).unwrap();
    let (loss, _) =
        total_loss(&mut tape, &vars, 0, &t, &LossWeights::default(), &model.cfg).unwrap();
    model.store.zero_grad();
    tape.backward(loss, &mut model.store).unwrap();
    model
        .store
        .iter()
        .map(|p| {
            (
                p.name.clone(),
                p.grad.data().iter().map(|g| g * g).sum::<f64>().sqrt(),
            )
        })
        .collect()
}

#[test]
fn every_parameter_receives_gradient() {
    let sc = SceneGenConfig::default();
    for cfg in [ModelConfig::toy(), ModelConfig::full_scale()] {
        let dead: Vec<_> = gradient_norms(cfg, &sc)
            .into_iter()
            .filter(|(_, n)| *n == 0.0)
            .collect();
        assert!(dead.is_empty(), "{dead:?}");
    }
    let dead: Vec<_> = gradient_norms(ModelConfig::gradcheck(), &scene_cfg())
        .into_iter()
        .filter(|(_, n)| *n == 0.0)
        .collect();
    assert!(dead.is_empty(), "{dead:?}");
}

#[test]
fn training_config_is_validated() {
    let bad = [
        TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            loss_weights: LossWeights::zero(),
            ..TrainConfig::default()
        },
    ];
    for c in bad {
        assert!(matches!(
            Trainer::<f64>::new(ModelConfig::gradcheck(), c),
            Err(Error::Config(_))
        ));
    }
    let mut trainer =
        Trainer::<f64>::new(ModelConfig::gradcheck(), TrainConfig::default()).unwrap();
    assert!(matches!(trainer.run_epoch(&[]), Err(Error::Input(_))));
}

fn small_run(epochs: usize) -> (TrainConfig, Vec<Example<f64>>) {
    let sc = scene_cfg();
    let scenes = generate_scenes(0..6, &sc);
    let train = TrainConfig {
        epochs,
        batch_size: 2,
        seed: 9,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    (
        train,
        prepare_examples(&scenes, &sc, &ModelConfig::gradcheck()).unwrap(),
    )
}

fn trained(epochs: usize) -> Trainer<f64> {
    let (train, examples) = small_run(epochs);
    let mut t = Trainer::new(ModelConfig::gradcheck(), train).unwrap();
    t.fit(&examples, None, |_| {}).unwrap();
    t
}

fn assert_same_state(a: &Trainer<f64>, b: &Trainer<f64>) {
    assert_eq!(a.model.store.numel(), b.model.store.numel());
    for (p, q) in a.model.store.iter().zip(b.model.store.iter()) {
        assert_eq!(p.name, q.name);
        let bits = |t: &Tensor<f64>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p.value), bits(&q.value), "{}", p.name);
    }
    assert_eq!(a.optimizer, b.optimizer);
    assert_eq!(a.history, b.history);
    assert_eq!(a.epochs_done, b.epochs_done);
    assert_eq!(a.config, b.config);
}

#[test]
fn training_is_bitwise_deterministic() {
    let (a, b) = (trained(2), trained(2));
    assert_same_state(&a, &b);
    assert_eq!(a.history.len(), 2);
    assert_eq!(a.optimizer.steps, 6);
}

#[test]
fn epoch_order_is_a_seeded_permutation() {
    let t = Trainer::<f64>::new(ModelConfig::gradcheck(), TrainConfig::default()).unwrap();
    let (a, b) = (t.epoch_order(0, 20), t.epoch_order(1, 20));
    let mut sorted = a.clone();
    sorted.sort();
    assert_eq!(sorted, (0..20).collect::<Vec<_>>());
    assert_ne!(a, b);
    assert_eq!(a, t.epoch_order(0, 20));
}

#[test]
fn checkpoint_round_trip_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.ckpt");
    let full = trained(3);

    let (train, examples) = small_run(1);
    let mut first = Trainer::new(ModelConfig::gradcheck(), train).unwrap();
    first.fit(&examples, Some(&path), |_| {}).unwrap();
    let loaded = Trainer::<f64>::load(&path).unwrap();
    assert_same_state(&first, &loaded);

    let mut resumed = loaded;
    resumed.config.epochs = 3;
    resumed.fit(&examples, None, |_| {}).unwrap();
    resumed.config.epochs = full.config.epochs;
    assert_same_state(&full, &resumed);

    let bytes = std::fs::read(&path).unwrap();
    let mut bad = bytes.clone();
    bad[0] ^= 1;
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(
        Trainer::<f64>::load(&path),
        Err(Error::Parse { .. })
    ));
    let mut bad = bytes.clone();
    bad[8] = 99;
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(
        Trainer::<f64>::load(&path),
        Err(Error::Version { .. })
    ));
    std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
    assert!(matches!(
        Trainer::<f64>::load(&path),
        Err(Error::Parse { .. })
    ));
}

#[test]
fn checkpoint_cadence() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.ckpt");
    let (mut train, examples) = small_run(3);
    train.checkpoint_every = 2;
    let mut t = Trainer::new(ModelConfig::gradcheck(), train).unwrap();
    let mut on_disk = Vec::new();
    // the callback of an epoch runs before that epoch's save
    t.fit(&examples, Some(&path), |_| {
        on_disk.push(Trainer::<f64>::load(&path).ok().map(|c| c.epochs_done));
    })
    .unwrap();
    assert_eq!(on_disk, vec![None, None, Some(2)]);
    assert_eq!(Trainer::<f64>::load(&path).unwrap().epochs_done, 3);
}

#[test]
fn history_csv_has_the_documented_columns() {
    let t = trained(2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("history.csv");
    write_history_csv(&path, &t.history).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "epoch,total,map_pts,map_cls,map_dir,pred_pts,pred_cls,pred_exist,plan_pts,plan_dir,plan_cls"
    );
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 2);
    for (row, rec) in rows.iter().zip(&t.history) {
        assert_eq!(row[0], rec.epoch as f64);
        assert_eq!(row[1], rec.total);
        assert!(close(row[1], row[2..].iter().sum(), 1e-12));
    }
}

#[test]
fn non_finite_loss_names_the_scene() {
    let (train, examples) = small_run(1);
    let mut t = Trainer::new(ModelConfig::gradcheck(), train).unwrap();
    let id = t.model.store.ids().next().unwrap();
    t.model.store.value_mut(id).data_mut()[0] = f64::NAN;
    match t.run_epoch(&examples) {
        Err(Error::NonFinite { what }) => {
            assert!(what.contains("epoch 1") && what.contains("scene"), "{what}")
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn toy_training_reduces_the_loss() {
    let sc = SceneGenConfig::default();
    let scenes: Vec<VectorScene> = generate_scenes(0..16, &sc);
    let train = TrainConfig {
        epochs: 10,
        ..TrainConfig::default()
    };
    let examples = prepare_examples::<f64>(&scenes, &sc, &ModelConfig::toy()).unwrap();
    let mut t = Trainer::new(ModelConfig::toy(), train).unwrap();
    t.fit(&examples, None, |_| {}).unwrap();
    assert!(t.history[9].total < t.history[0].total, "{:?}", t.history);
}
