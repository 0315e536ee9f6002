#![allow(dead_code)]

use invdriver::geometry::{OrientedRect, Point};

/// Minimum over every injection of the smaller side into the larger, each
/// total summed in row order like the solver's.
pub fn brute_force(cost: &[Vec<f64>]) -> f64 {
    fn go(cost: &[Vec<f64>], chosen: &mut Vec<(usize, usize)>, used: &mut [bool], best: &mut f64) {
        let (n, m) = (cost.len(), cost[0].len());
        let k = chosen.len();
        if k == n.min(m) {
            let mut pairs = chosen.clone();
            pairs.sort();
            *best = best.min(pairs.iter().fold(0.0, |s, &(r, c)| s + cost[r][c]));
            return;
        }
        for j in 0..n.max(m) {
            if !used[j] {
                used[j] = true;
                chosen.push(if n <= m { (k, j) } else { (j, k) });
                go(cost, chosen, used, best);
                chosen.pop();
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    let wide = cost.len().max(cost[0].len());
    go(cost, &mut Vec::new(), &mut vec![false; wide], &mut best);
    best
}

/// Dense sampling verdict: some sample of either rectangle lies inside the other.
pub fn sampled_overlap(a: &OrientedRect<f64>, b: &OrientedRect<f64>) -> bool {
    let samples = |r: OrientedRect<f64>| {
        let (s, c) = r.heading.sin_cos();
        (0..100).flat_map(move |i| {
            (0..100).map(move |j| {
                let u = (i as f64 / 99.0 - 0.5) * r.length;
                let v = (j as f64 / 99.0 - 0.5) * r.width;
                [r.center[0] + c * u - s * v, r.center[1] + s * u + c * v]
            })
        })
    };
    samples(*a).any(|p| b.contains(p)) || samples(*b).any(|p| a.contains(p))
}

/// Signed overlap of the projections on the least-overlapping of the four
/// edge normals; near zero means the outlines nearly touch.
pub fn boundary_margin(a: &OrientedRect<f64>, b: &OrientedRect<f64>) -> f64 {
    let axes = |r: &OrientedRect<f64>| {
        let (s, c) = r.heading.sin_cos();
        [[c, s], [-s, c]]
    };
    let (ca, cb) = (a.corners(), b.corners());
    axes(a)
        .into_iter()
        .chain(axes(b))
        .map(|ax| {
            let proj = |cs: &[Point<f64>; 4]| {
                let d: Vec<f64> = cs.iter().map(|p| p[0] * ax[0] + p[1] * ax[1]).collect();
                (
                    d.iter().copied().fold(f64::INFINITY, f64::min),
                    d.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                )
            };
            let ((alo, ahi), (blo, bhi)) = (proj(&ca), proj(&cb));
            ahi.min(bhi) - alo.max(blo)
        })
        .fold(f64::INFINITY, f64::min)
}

/// exp-normalize over the allowed subset only
pub fn restricted_softmax(row: &[f64], allowed: &[bool]) -> Vec<f64> {
    let z: f64 = row
        .iter()
        .zip(allowed)
        .filter(|(_, &a)| a)
        .map(|(&v, _)| v.exp())
        .sum();
    row.iter()
        .zip(allowed)
        .map(|(&v, &a)| if a { v.exp() / z } else { 0.0 })
        .collect()
}
