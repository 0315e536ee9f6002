use crate::autodiff::Tensor;
use crate::query::ModelConfig;
use crate::scalar::Scalar;
use crate::scene::{BevGrid, BEV_CHANNELS, CH_VX, CH_VY};

/// Velocity channels are divided by this before pooling (m/s).
pub const VELOCITY_SCALE: f64 = 10.0;

pub fn bev_token_width(cfg: &ModelConfig) -> usize {
    cfg.bev_subcells * cfg.bev_subcells * BEV_CHANNELS
}

/// Average-pools the raster onto a `(tokens_x * s) x (tokens_y * s)` grid
/// (raster cell `r` lands in pooled cell `r * P / H`) and concatenates the
/// `s x s` pooled cells under each token, channel-minor.
///
/// Returns `[tokens_x * tokens_y, s^2 * channels]`, token-major along the
/// forward axis.
pub fn pool_bev<T: Scalar>(grid: &BevGrid, cfg: &ModelConfig) -> Tensor<T> {
    let s = cfg.bev_subcells;
    let (px, py) = (cfg.bev_tokens_x * s, cfg.bev_tokens_y * s);
    let mut sums = vec![0.0; BEV_CHANNELS * px * py];
    let mut counts = vec![0usize; px * py];
    for r in 0..grid.height {
        let pr = r * px / grid.height;
        for c in 0..grid.width {
            let pc = c * py / grid.width;
            counts[pr * py + pc] += 1;
            for ch in 0..BEV_CHANNELS {
                let mut v = grid.get(ch, r, c);
                if ch == CH_VX || ch == CH_VY {
                    v /= VELOCITY_SCALE;
                }
                sums[(ch * px + pr) * py + pc] += v;
            }
        }
    }
    let width = bev_token_width(cfg);
    Tensor::from_fn(vec![cfg.bev_tokens(), width], |i| {
        let (token, f) = (i / width, i % width);
        let (tx, ty) = (token / cfg.bev_tokens_y, token % cfg.bev_tokens_y);
        let (sub, ch) = (f / BEV_CHANNELS, f % BEV_CHANNELS);
        let (pr, pc) = (tx * s + sub / s, ty * s + sub % s);
        let n = counts[pr * py + pc];
        if n == 0 {
            T::zero()
        } else {
            T::lit(sums[(ch * px + pr) * py + pc] / n as f64)
        }
    })
}

/// Ground-plane center of every token, in token order.
pub fn token_centers(grid: &BevGrid, cfg: &ModelConfig) -> Vec<[f64; 2]> {
    let sx = grid.height as f64 * grid.resolution / cfg.bev_tokens_x as f64;
    let sy = grid.width as f64 * grid.resolution / cfg.bev_tokens_y as f64;
    (0..cfg.bev_tokens())
        .map(|t| {
            let (i, j) = (t / cfg.bev_tokens_y, t % cfg.bev_tokens_y);
            [
                grid.x_min + (i as f64 + 0.5) * sx,
                grid.y_min + (j as f64 + 0.5) * sy,
            ]
        })
        .collect()
}
