//! Gauss rules on intervals and triangles.

use std::sync::OnceLock;

/// Gauss-Legendre nodes/weights on [0, 1].
#[derive(Debug, Clone)]
pub struct GaussRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

fn legendre_and_derivative(n: usize, x: f64) -> (f64, f64) {
    // Three-term recurrence for P_n and its derivative on [-1, 1].
    let (mut p0, mut p1) = (1.0, x);
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// n-point Gauss-Legendre rule mapped to [0, 1]; exact for degree 2n-1.
pub fn gauss_legendre_01(n: usize) -> GaussRule {
    assert!(n >= 1, "gauss rule needs at least one point");
    static CACHE: OnceLock<std::sync::Mutex<std::collections::HashMap<usize, GaussRule>>> =
        OnceLock::new();
    let cache = CACHE.get_or_init(|| std::sync::Mutex::new(std::collections::HashMap::new()));
    if let Some(r) = cache.lock().unwrap().get(&n) {
        return r.clone();
    }
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        // Chebyshev initial guess, Newton refinement.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre_and_derivative(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre_and_derivative(n, x);
        // Map [-1,1] -> [0,1].
        nodes[n - 1 - i] = 0.5 * (x + 1.0);
        weights[n - 1 - i] = 1.0 / ((1.0 - x * x) * dp * dp);
    }
    let rule = GaussRule { nodes, weights };
    cache.lock().unwrap().insert(n, rule.clone());
    rule
}

/// Quadrature point on a triangle in barycentric coordinates plus weight
/// (weights sum to 1; multiply by the triangle area).
#[derive(Debug, Clone, Copy)]
pub struct TriPoint {
    pub bary: [f64; 3],
    pub weight: f64,
}

/// 3-point rule, exact for quadratics (edge midpoints).
pub fn tri_rule_degree2() -> Vec<TriPoint> {
    let w = 1.0 / 3.0;
    vec![
        TriPoint { bary: [0.5, 0.5, 0.0], weight: w },
        TriPoint { bary: [0.0, 0.5, 0.5], weight: w },
        TriPoint { bary: [0.5, 0.0, 0.5], weight: w },
    ]
}

/// Classical 7-point rule, exact for degree 5. All points are interior.
pub fn tri_rule_degree5() -> Vec<TriPoint> {
    let a1 = 0.059715871789769820;
    let b1 = 0.470142064105115090;
    let w1 = 0.132394152788506180;
    let a2 = 0.797426985353087320;
    let b2 = 0.101286507323456340;
    let w2 = 0.125939180544827150;
    let mut pts = vec![TriPoint { bary: [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], weight: 0.225 }];
    for perm in [[a1, b1, b1], [b1, a1, b1], [b1, b1, a1]] {
        pts.push(TriPoint { bary: perm, weight: w1 });
    }
    for perm in [[a2, b2, b2], [b2, a2, b2], [b2, b2, a2]] {
        pts.push(TriPoint { bary: perm, weight: w2 });
    }
    pts
}

/// Collapsed (Duffy) tensor rule with n*n points; exact for polynomials of
/// degree n-1 and spectrally accurate for smooth integrands.
pub fn tri_rule_tensor(n: usize) -> std::sync::Arc<Vec<TriPoint>> {
    static CACHE: OnceLock<std::sync::Mutex<std::collections::HashMap<usize, std::sync::Arc<Vec<TriPoint>>>>> =
        OnceLock::new();
    let cache = CACHE.get_or_init(|| std::sync::Mutex::new(std::collections::HashMap::new()));
    if let Some(r) = cache.lock().unwrap().get(&n) {
        return r.clone();
    }
    let rule = std::sync::Arc::new(tri_rule_tensor_uncached(n));
    cache.lock().unwrap().insert(n, rule.clone());
    rule
}

fn tri_rule_tensor_uncached(n: usize) -> Vec<TriPoint> {
    let g = gauss_legendre_01(n);
    let mut pts = Vec::with_capacity(n * n);
    for (i, &u) in g.nodes.iter().enumerate() {
        for (j, &v) in g.nodes.iter().enumerate() {
            // x = u, y = v*(1-u) maps the square onto {x>=0, y>=0, x+y<=1}.
            let l1 = u;
            let l2 = v * (1.0 - u);
            // area-fraction weight: d(l1,l2) = (1-u) du dv over a triangle of area 1/2
            let w = g.weights[i] * g.weights[j] * 2.0 * (1.0 - u);
            pts.push(TriPoint { bary: [1.0 - l1 - l2, l1, l2], weight: w });
        }
    }
    pts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_integrates_polynomials() {
        for n in 1..=16 {
            let r = gauss_legendre_01(n);
            for k in 0..(2 * n) {
                let exact = 1.0 / (k as f64 + 1.0);
                let got: f64 = r
                    .nodes
                    .iter()
                    .zip(&r.weights)
                    .map(|(&x, &w)| w * x.powi(k as i32))
                    .sum();
                assert!((got - exact).abs() < 1e-13, "n={n} k={k}: {got} vs {exact}");
            }
        }
    }

    #[test]
    fn triangle_rules_integrate_reference_monomials() {
        // \int_K x^a y^b = a! b! / (a+b+2)!
        let exact = |a: u32, b: u32| {
            let fact = |m: u32| (1..=m).map(|v| v as f64).product::<f64>().max(1.0);
            fact(a) * fact(b) / fact(a + b + 2)
        };
        let check = |pts: &[TriPoint], deg: u32, tol: f64| {
            for a in 0..=deg {
                for b in 0..=(deg - a) {
                    // weights are area fractions; reference triangle has area 1/2
                    let got: f64 = pts
                        .iter()
                        .map(|p| p.weight * 0.5 * p.bary[1].powi(a as i32) * p.bary[2].powi(b as i32))
                        .sum();
                    assert!(
                        (got - exact(a, b)).abs() < tol,
                        "a={a} b={b}: {got} vs {}",
                        exact(a, b)
                    );
                }
            }
        };
        check(&tri_rule_degree2(), 2, 1e-14);
        check(&tri_rule_degree5(), 5, 1e-14);
        check(&tri_rule_tensor(6), 5, 1e-13);
    }
}
