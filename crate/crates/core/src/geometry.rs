//! Small planar-geometry helpers shared by assembly, estimator, and oracles.

pub type Point = [f64; 2];

#[inline]
pub fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
pub fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

#[inline]
pub fn cross(a: Point, b: Point) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

#[inline]
pub fn norm(a: Point) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn dist(a: Point, b: Point) -> f64 {
    norm(sub(a, b))
}

/// Triangle given by physical vertex coordinates.
pub type Tri = [Point; 3];

pub fn tri_area(t: &Tri) -> f64 {
    0.5 * cross(sub(t[1], t[0]), sub(t[2], t[0])).abs()
}

pub fn tri_diam(t: &Tri) -> f64 {
    dist(t[0], t[1]).max(dist(t[1], t[2])).max(dist(t[2], t[0]))
}

pub fn tri_centroid(t: &Tri) -> Point {
    [(t[0][0] + t[1][0] + t[2][0]) / 3.0, (t[0][1] + t[1][1] + t[2][1]) / 3.0]
}

/// Map barycentric coordinates to the physical point.
pub fn bary_to_point(t: &Tri, b: [f64; 3]) -> Point {
    [
        b[0] * t[0][0] + b[1] * t[1][0] + b[2] * t[2][0],
        b[0] * t[0][1] + b[1] * t[1][1] + b[2] * t[2][1],
    ]
}

/// Barycentric coordinates of `p` with respect to `t` (signed).
pub fn barycentric(t: &Tri, p: Point) -> [f64; 3] {
    let det = cross(sub(t[1], t[0]), sub(t[2], t[0]));
    let l1 = cross(sub(p, t[0]), sub(t[2], t[0])) / det;
    let l2 = cross(sub(t[1], t[0]), sub(p, t[0])) / det;
    [1.0 - l1 - l2, l1, l2]
}

/// Gradient of the P1 hat function that is 1 at vertex `i` of `t`.
pub fn hat_gradient(t: &Tri, i: usize) -> Point {
    let det = cross(sub(t[1], t[0]), sub(t[2], t[0]));
    let e = sub(t[(i + 2) % 3], t[(i + 1) % 3]);
    [-e[1] / det, e[0] / det]
}

pub fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let ab = sub(b, a);
    let t = (dot(sub(p, a), ab) / dot(ab, ab)).clamp(0.0, 1.0);
    dist(p, [a[0] + t * ab[0], a[1] + t * ab[1]])
}

/// Distance between two triangles with disjoint interiors (0 if touching).
pub fn tri_tri_distance(a: &Tri, b: &Tri) -> f64 {
    let mut d = f64::INFINITY;
    for i in 0..3 {
        for j in 0..3 {
            d = d.min(point_segment_distance(a[i], b[j], b[(j + 1) % 3]));
            d = d.min(point_segment_distance(b[i], a[j], a[(j + 1) % 3]));
        }
    }
    d
}

/// Positive parameters t where the ray `x + t w` crosses the open segment
/// (a, b).
pub fn ray_segment_crossing(x: Point, w: Point, a: Point, b: Point) -> Option<f64> {
    let e = sub(b, a);
    let den = cross(w, e);
    if den.abs() < 1e-300 {
        return None; // parallel
    }
    let ax = sub(a, x);
    let t = cross(ax, e) / den;
    let u = cross(ax, w) / den;
    if t > 0.0 && u > 0.0 && u < 1.0 {
        Some(t)
    } else {
        None
    }
}

/// Even-odd containment test against a segment soup. Retries with rotated
/// ray directions when a ray grazes a vertex.
pub fn point_in_polygon(x: Point, segments: &[(Point, Point)]) -> bool {
    let mut angle: f64 = 0.537_216_843_916_221_4; // arbitrary non-special direction
    'retry: for _ in 0..32 {
        let w = [angle.cos(), angle.sin()];
        let mut crossings = 0;
        for &(a, b) in segments {
            let e = sub(b, a);
            let den = cross(w, e);
            if den.abs() < 1e-300 {
                continue;
            }
            let ax = sub(a, x);
            let t = cross(ax, e) / den;
            let u = cross(ax, w) / den;
            if t > 0.0 && (-1e-9..=1.0 + 1e-9).contains(&u) {
                if u < 1e-9 || u > 1.0 - 1e-9 {
                    angle += 0.033;
                    continue 'retry; // grazing a vertex: rotate and retry
                }
                crossings += 1;
            }
        }
        return crossings % 2 == 1;
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn barycentric_and_gradients() {
        let t: Tri = [[0.0, 0.0], [2.0, 0.0], [0.0, 1.0]];
        let p = bary_to_point(&t, [0.2, 0.5, 0.3]);
        let b = barycentric(&t, p);
        assert!((b[0] - 0.2).abs() < 1e-14);
        assert!((b[1] - 0.5).abs() < 1e-14);
        assert!((b[2] - 0.3).abs() < 1e-14);

        // hat gradients: phi_i affine, 1 at vertex i, 0 at the others
        for i in 0..3 {
            let g = hat_gradient(&t, i);
            for j in 0..3 {
                let expected = if i == j { 1.0 } else { 0.0 };
                let val = dot(g, sub(t[j], t[i])) + 1.0;
                assert!((val - expected).abs() < 1e-13, "i={i} j={j} val={val}");
            }
        }
    }

    #[test]
    fn distances() {
        let a: Tri = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let b: Tri = [[3.0, 0.0], [4.0, 0.0], [3.0, 1.0]];
        assert!((tri_tri_distance(&a, &b) - 2.0).abs() < 1e-14);
        let c: Tri = [[1.0, 0.0], [2.0, 0.0], [1.0, 1.0]];
        assert!(tri_tri_distance(&a, &c).abs() < 1e-14);
    }

    #[test]
    fn polygon_containment() {
        let square = vec![
            ([0.0, 0.0], [1.0, 0.0]),
            ([1.0, 0.0], [1.0, 1.0]),
            ([1.0, 1.0], [0.0, 1.0]),
            ([0.0, 1.0], [0.0, 0.0]),
        ];
        assert!(point_in_polygon([0.5, 0.5], &square));
        assert!(!point_in_polygon([1.5, 0.5], &square));
    }
}
