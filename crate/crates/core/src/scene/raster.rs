use super::{MapClass, SceneGenConfig, VectorScene};
use crate::geometry::{point_segment_distance, OrientedRect, Point};

pub const CH_BOUNDARY: usize = 0;
pub const CH_DIVIDER: usize = 1;
pub const CH_AGENT: usize = 2;
pub const CH_VX: usize = 3;
pub const CH_VY: usize = 4;
pub const BEV_CHANNELS: usize = 5;

/// Supersampling factor per axis for footprint coverage.
const FOOTPRINT_SAMPLES: usize = 4;

/// Channel-major raster of the perception range. Row `r` spans the forward
/// interval starting at `x_min + r * resolution`; column `c` spans the
/// lateral interval starting at `-y_extent + c * resolution`.
#[derive(Clone, Debug, PartialEq)]
pub struct BevGrid {
    pub height: usize,
    pub width: usize,
    pub resolution: f64,
    pub x_min: f64,
    pub y_min: f64,
    pub data: Vec<f64>,
}

impl BevGrid {
    pub fn zeros(cfg: &SceneGenConfig) -> Self {
        let (height, width) = cfg.grid_size();
        Self {
            height,
            width,
            resolution: cfg.resolution,
            x_min: cfg.x_min(),
            y_min: -cfg.range_lateral,
            data: vec![0.0; BEV_CHANNELS * height * width],
        }
    }

    #[inline]
    fn index(&self, ch: usize, r: usize, c: usize) -> usize {
        (ch * self.height + r) * self.width + c
    }

    pub fn get(&self, ch: usize, r: usize, c: usize) -> f64 {
        self.data[self.index(ch, r, c)]
    }

    pub fn channel(&self, ch: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[ch * n..(ch + 1) * n]
    }

    pub fn cell_center(&self, r: usize, c: usize) -> Point<f64> {
        [
            self.x_min + (r as f64 + 0.5) * self.resolution,
            self.y_min + (c as f64 + 0.5) * self.resolution,
        ]
    }

    /// Cell holding `p`; points on the far edge map to the last cell.
    pub fn cell_of(&self, p: Point<f64>) -> Option<(usize, usize)> {
        let fr = (p[0] - self.x_min) / self.resolution;
        let fc = (p[1] - self.y_min) / self.resolution;
        if fr < 0.0 || fc < 0.0 || fr > self.height as f64 || fc > self.width as f64 {
            return None;
        }
        Some((
            (fr as usize).min(self.height - 1),
            (fc as usize).min(self.width - 1),
        ))
    }

    /// Inclusive cell-index span covering `[lo, hi]` on one axis.
    fn span(origin: f64, res: f64, n: usize, lo: f64, hi: f64) -> Option<(usize, usize)> {
        let a = ((lo - origin) / res).floor();
        let b = ((hi - origin) / res).floor();
        if b < 0.0 || a >= n as f64 {
            return None;
        }
        Some((a.max(0.0) as usize, (b as usize).min(n - 1)))
    }

    fn cells_near(
        &self,
        lo: Point<f64>,
        hi: Point<f64>,
    ) -> Option<((usize, usize), (usize, usize))> {
        Some((
            Self::span(self.x_min, self.resolution, self.height, lo[0], hi[0])?,
            Self::span(self.y_min, self.resolution, self.width, lo[1], hi[1])?,
        ))
    }
}

/// Paints map strokes (value `1 - d / resolution` for cell centers within one
/// cell of the line) and current agent footprints (area coverage) plus their
/// velocities.
pub fn rasterize_bev(scene: &VectorScene, cfg: &SceneGenConfig) -> BevGrid {
    let mut grid = BevGrid::zeros(cfg);
    let res = grid.resolution;

    for line in &scene.map_elements {
        let ch = match line.class {
            MapClass::Boundary => CH_BOUNDARY,
            MapClass::Divider => CH_DIVIDER,
        };
        for w in line.points.windows(2) {
            let (a, b) = (w[0], w[1]);
            let lo = [a[0].min(b[0]) - res, a[1].min(b[1]) - res];
            let hi = [a[0].max(b[0]) + res, a[1].max(b[1]) + res];
            let Some(((r0, r1), (c0, c1))) = grid.cells_near(lo, hi) else {
                continue;
            };
            for r in r0..=r1 {
                for c in c0..=c1 {
                    let d = point_segment_distance(grid.cell_center(r, c), a, b);
                    let v = 1.0 - d / res;
                    let i = grid.index(ch, r, c);
                    if v > grid.data[i] {
                        grid.data[i] = v;
                    }
                }
            }
        }
    }

    let step = res / FOOTPRINT_SAMPLES as f64;
    let per_cell = (FOOTPRINT_SAMPLES * FOOTPRINT_SAMPLES) as f64;
    for agent in &scene.agents {
        let pose = agent.current();
        let rect = OrientedRect::new(
            [pose[0], pose[1]],
            pose[2],
            agent.footprint[0],
            agent.footprint[1],
        );
        let vel = agent.velocity(cfg.timestep);
        let corners = rect.corners();
        let lo = corners
            .iter()
            .fold([f64::INFINITY; 2], |m, p| [m[0].min(p[0]), m[1].min(p[1])]);
        let hi = corners.iter().fold([f64::NEG_INFINITY; 2], |m, p| {
            [m[0].max(p[0]), m[1].max(p[1])]
        });
        let Some(((r0, r1), (c0, c1))) = grid.cells_near(lo, hi) else {
            continue;
        };
        for r in r0..=r1 {
            for c in c0..=c1 {
                let base = [grid.x_min + r as f64 * res, grid.y_min + c as f64 * res];
                let mut hits = 0usize;
                for i in 0..FOOTPRINT_SAMPLES {
                    for j in 0..FOOTPRINT_SAMPLES {
                        let p = [
                            base[0] + (i as f64 + 0.5) * step,
                            base[1] + (j as f64 + 0.5) * step,
                        ];
                        hits += rect.contains(p) as usize;
                    }
                }
                let cover = hits as f64 / per_cell;
                let i = grid.index(CH_AGENT, r, c);
                if cover > 0.0 && cover >= grid.data[i] {
                    grid.data[i] = cover;
                    let (ix, iy) = (grid.index(CH_VX, r, c), grid.index(CH_VY, r, c));
                    grid.data[ix] = vel[0];
                    grid.data[iy] = vel[1];
                }
            }
        }
    }
    grid
}
