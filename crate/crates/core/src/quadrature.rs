//! Gauss-Legendre rules and shifted Legendre polynomials.

/// Nodes and weights of an `n`-point Gauss-Legendre rule on `[-1, 1]`,
/// nodes sorted in increasing order.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n > 0, "quadrature rule needs at least one node");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

/// Legendre polynomial `P_n(x)` and its derivative.
pub fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    if n == 0 {
        return (1.0, 0.0);
    }
    let mut p0 = 1.0;
    let mut p1 = x;
    let mut d0 = 0.0;
    let mut d1 = 1.0;
    for k in 1..n {
        let kf = k as f64;
        let p2 = ((2.0 * kf + 1.0) * x * p1 - kf * p0) / (kf + 1.0);
        let d2 = d0 + (2.0 * kf + 1.0) * p1;
        p0 = p1;
        p1 = p2;
        d0 = d1;
        d1 = d2;
    }
    (p1, d1)
}

/// Gauss-Legendre rule mapped to an interval.
#[derive(Clone, Debug)]
pub struct GaussRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussRule {
    pub fn on_interval(n: usize, a: f64, b: f64) -> Self {
        let (xs, ws) = gauss_legendre(n);
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        Self {
            nodes: xs.iter().map(|x| mid + half * x).collect(),
            weights: ws.iter().map(|w| half * w).collect(),
        }
    }

    /// Composite rule: `segments` equal pieces, `n` nodes per piece.
    pub fn composite(n: usize, segments: usize, a: f64, b: f64) -> Self {
        let h = (b - a) / segments as f64;
        let mut nodes = Vec::with_capacity(n * segments);
        let mut weights = Vec::with_capacity(n * segments);
        for s in 0..segments {
            let piece = Self::on_interval(n, a + h * s as f64, a + h * (s + 1) as f64);
            nodes.extend(piece.nodes);
            weights.extend(piece.weights);
        }
        Self { nodes, weights }
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_two() {
        for n in 1..40 {
            let (_, w) = gauss_legendre(n);
            assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-13, "n = {n}");
        }
    }

    #[test]
    fn exact_for_polynomials_up_to_degree_2n_minus_1() {
        let rule = GaussRule::on_interval(5, 0.0, 0.38);
        for k in 0..10 {
            let exact = 0.38f64.powi(k + 1) / (k + 1) as f64;
            let got = rule.integrate(|x| x.powi(k));
            assert!((got - exact).abs() < 1e-15 * exact.max(1e-3), "degree {k}");
        }
    }

    #[test]
    fn nodes_sorted() {
        let (x, _) = gauss_legendre(33);
        assert!(x.windows(2).all(|p| p[0] < p[1]));
        assert_eq!(x[16], 0.0);
    }

    #[test]
    fn legendre_values() {
        let (p, d) = legendre_with_derivative(2, 0.5);
        assert!((p - (1.5 * 0.25 - 0.5)).abs() < 1e-15);
        assert!((d - 1.5).abs() < 1e-15);
    }
}
