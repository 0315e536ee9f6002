//! Planar geometry on polylines and oriented rectangles.

use crate::scalar::Scalar;

pub type Point<T> = [T; 2];

#[inline]
pub fn dist<T: Scalar>(a: Point<T>, b: Point<T>) -> T {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

pub fn point_segment_distance<T: Scalar>(p: Point<T>, a: Point<T>, b: Point<T>) -> T {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    if len2 == T::zero() {
        return dist(p, a);
    }
    let t = (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2)
        .max(T::zero())
        .min(T::one());
    dist(p, [a[0] + t * dx, a[1] + t * dy])
}

/// Distance from `p` to the nearest point of `line` (a single point counts
/// as a degenerate polyline).
pub fn point_polyline_distance<T: Scalar>(p: Point<T>, line: &[Point<T>]) -> T {
    match line {
        [] => T::infinity(),
        [only] => dist(p, *only),
        _ => line
            .windows(2)
            .map(|w| point_segment_distance(p, w[0], w[1]))
            .fold(T::infinity(), T::min),
    }
}

pub fn polyline_length<T: Scalar>(line: &[Point<T>]) -> T {
    line.windows(2).map(|w| dist(w[0], w[1])).sum()
}

/// `n` points spaced uniformly by arc length, endpoints included.
pub fn resample_polyline<T: Scalar>(line: &[Point<T>], n: usize) -> Vec<Point<T>> {
    assert!(n >= 2 && !line.is_empty());
    if line.len() == 1 {
        return vec![line[0]; n];
    }
    let total = polyline_length(line);
    let mut out = Vec::with_capacity(n);
    let mut seg = 0;
    let mut seg_start = T::zero();
    for i in 0..n {
        let target = total * T::lit(i as f64) / T::lit((n - 1) as f64);
        while seg + 2 < line.len() && seg_start + dist(line[seg], line[seg + 1]) < target {
            seg_start += dist(line[seg], line[seg + 1]);
            seg += 1;
        }
        let len = dist(line[seg], line[seg + 1]);
        let t = if len > T::zero() {
            ((target - seg_start) / len).max(T::zero()).min(T::one())
        } else {
            T::zero()
        };
        let (a, b) = (line[seg], line[seg + 1]);
        out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
    }
    out[n - 1] = line[line.len() - 1];
    out
}

/// Symmetric mean point-to-polyline distance.
pub fn chamfer_distance<T: Scalar>(a: &[Point<T>], b: &[Point<T>]) -> T {
    let one_way = |from: &[Point<T>], to: &[Point<T>]| {
        from.iter()
            .map(|&p| point_polyline_distance(p, to))
            .sum::<T>()
            / T::lit(from.len() as f64)
    };
    (one_way(a, b) + one_way(b, a)) / T::lit(2.0)
}

/// Rectangle with `length` along `heading` and `width` across it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrientedRect<T> {
    pub center: Point<T>,
    pub heading: T,
    pub length: T,
    pub width: T,
}

impl<T: Scalar> OrientedRect<T> {
    pub fn new(center: Point<T>, heading: T, length: T, width: T) -> Self {
        Self {
            center,
            heading,
            length,
            width,
        }
    }

    fn axes(&self) -> [Point<T>; 2] {
        let (s, c) = self.heading.sin_cos();
        [[c, s], [-s, c]]
    }

    pub fn corners(&self) -> [Point<T>; 4] {
        let [u, v] = self.axes();
        let hl = self.length / T::lit(2.0);
        let hw = self.width / T::lit(2.0);
        let at = |a: T, b: T| {
            [
                self.center[0] + u[0] * a + v[0] * b,
                self.center[1] + u[1] * a + v[1] * b,
            ]
        };
        [at(hl, hw), at(-hl, hw), at(-hl, -hw), at(hl, -hw)]
    }

    pub fn contains(&self, p: Point<T>) -> bool {
        let [u, v] = self.axes();
        let d = [p[0] - self.center[0], p[1] - self.center[1]];
        let a = d[0] * u[0] + d[1] * u[1];
        let b = d[0] * v[0] + d[1] * v[1];
        a.abs() <= self.length / T::lit(2.0) && b.abs() <= self.width / T::lit(2.0)
    }

    /// Separating-axis test over the four edge normals. Touching counts as
    /// intersecting.
    pub fn intersects(&self, other: &Self) -> bool {
        let (ca, cb) = (self.corners(), other.corners());
        for axis in self.axes().into_iter().chain(other.axes()) {
            let project = |cs: &[Point<T>; 4]| {
                cs.iter()
                    .fold((T::infinity(), T::neg_infinity()), |(lo, hi), p| {
                        let d = p[0] * axis[0] + p[1] * axis[1];
                        (lo.min(d), hi.max(d))
                    })
            };
            let (alo, ahi) = project(&ca);
            let (blo, bhi) = project(&cb);
            if ahi < blo || bhi < alo {
                return false;
            }
        }
        true
    }

    /// Distance from `p` to the rectangle outline.
    pub fn boundary_distance(&self, p: Point<T>) -> T {
        let c = self.corners();
        let ring = [c[0], c[1], c[2], c[3], c[0]];
        point_polyline_distance(p, &ring)
    }
}
