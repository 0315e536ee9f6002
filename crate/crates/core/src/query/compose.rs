use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const EMBEDDING_INIT_STD: f64 = 0.02;

/// Row sources for the instance-major pairwise sum: output row `i * p + j`
/// reads instance row `i` and point row `j`.
pub fn pairwise_indices(n: usize, p: usize) -> (Vec<usize>, Vec<usize>) {
    let inst = (0..n * p).map(|r| r / p).collect();
    let pt = (0..n * p).map(|r| r % p).collect();
    (inst, pt)
}

/// Row sources for agent-major, then mode, then point motion queries.
pub fn motion_indices(agents: usize, modes: usize, points: usize) -> [Vec<usize>; 3] {
    let total = agents * modes * points;
    [
        (0..total).map(|r| r / (modes * points)).collect(),
        (0..total).map(|r| (r / points) % modes).collect(),
        (0..total).map(|r| r % points).collect(),
    ]
}

fn check_width<T: Scalar>(tables: &[&Tensor<T>]) -> Result<usize> {
    let d = tables[0].last_dim();
    for t in tables {
        if t.rank() != 2 || t.last_dim() != d {
            return Err(Error::shape("compose", tables[0].shape(), t.shape()));
        }
    }
    Ok(d)
}

/// Pairwise addition of instance and point embeddings, `[n, d] (+) [p, d] -> [n*p, d]`.
pub fn compose_queries<T: Scalar>(instances: &Tensor<T>, points: &Tensor<T>) -> Result<Tensor<T>> {
    let d = check_width(&[instances, points])?;
    let (n, p) = (instances.rows(), points.rows());
    let mut out = Vec::with_capacity(n * p * d);
    for i in 0..n {
        for j in 0..p {
            out.extend(
                instances
                    .row(i)
                    .iter()
                    .zip(points.row(j))
                    .map(|(&a, &b)| a + b),
            );
        }
    }
    Tensor::new(vec![n * p, d], out)
}

pub fn compose_motion_queries<T: Scalar>(
    agents: &Tensor<T>,
    modes: &Tensor<T>,
    points: &Tensor<T>,
) -> Result<Tensor<T>> {
    let d = check_width(&[agents, modes, points])?;
    let (no, ni, np) = (agents.rows(), modes.rows(), points.rows());
    let mut out = Vec::with_capacity(no * ni * np * d);
    for o in 0..no {
        for m in 0..ni {
            for t in 0..np {
                out.extend(
                    agents
                        .row(o)
                        .iter()
                        .zip(modes.row(m))
                        .zip(points.row(t))
                        .map(|((&a, &b), &c)| a + b + c),
                );
            }
        }
    }
    Tensor::new(vec![no * ni * np, d], out)
}

/// Learned embedding tables for one decoder's queries.
#[derive(Clone, Debug)]
pub struct QueryBank {
    pub instances: ParamId,
    pub points: ParamId,
    pub modes: Option<ParamId>,
}

impl QueryBank {
    /// Registers `prefix.instance`, `prefix.point` and optionally
    /// `prefix.mode`, all drawn from N(0, 0.02^2). The point table is a
    /// single `[points, d]` table shared by every instance.
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        count: usize,
        points: usize,
        modes: Option<usize>,
        d_model: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut table = |name: &str, rows: usize, rng: &mut R| {
            store.register(
                format!("{prefix}.{name}"),
                gaussian_table(rows, d_model, EMBEDDING_INIT_STD, rng),
            )
        };
        let instances = table("instance", count, rng)?;
        let point_id = table("point", points, rng)?;
        let modes = modes.map(|m| table("mode", m, rng)).transpose()?;
        Ok(Self {
            instances,
            points: point_id,
            modes,
        })
    }
}

pub(crate) fn gaussian_table<T: Scalar, R: Rng>(
    rows: usize,
    cols: usize,
    std: f64,
    rng: &mut R,
) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(vec![rows, cols], |_| T::lit(normal.sample(rng)))
}
