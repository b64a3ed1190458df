//! Quadrature rules and the interpolation basis used for the `a` function.

use std::num::NonZeroUsize;

use gauss_quad::hermite::GaussHermite;
use nalgebra::DMatrix;

/// Gauss–Hermite rule for expectations under `N(0, 1)`: `E f(T) ≈ Σ w_k f(t_k)`, `Σ w_k = 1`.
pub fn normal_rule(n: usize) -> (Vec<f64>, Vec<f64>) {
    let n = NonZeroUsize::new(n).expect("quadrature size must be positive");
    let rule = GaussHermite::new(n);
    let norm = std::f64::consts::PI.sqrt();
    let (nodes, weights): (Vec<f64>, Vec<f64>) = rule
        .as_node_weight_pairs()
        .iter()
        .map(|&(t, w)| (t * std::f64::consts::SQRT_2, w / norm))
        .unzip();
    let total: f64 = weights.iter().sum();
    (nodes, weights.into_iter().map(|w| w / total).collect())
}

/// Equally spaced nodes on `[lo, hi]` with trapezoid weights.
pub fn trapezoid_rule(lo: f64, hi: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 2 && hi > lo);
    let step = (hi - lo) / (n - 1) as f64;
    let nodes = (0..n).map(|i| lo + step * i as f64).collect();
    let weights = (0..n)
        .map(|i| if i == 0 || i == n - 1 { 0.5 * step } else { step })
        .collect();
    (nodes, weights)
}

/// How values stored at the grid nodes are extended to arbitrary `x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterpKind {
    Linear,
    Cubic,
}

/// Local representation of the interpolant at one point:
/// `f(x) = cl·f_i + cr·f_{i+1} + dl·m_i + dr·m_{i+1}` where `m = D f` are
/// spline second derivatives (zero for linear interpolation).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stencil {
    pub left: usize,
    pub right: usize,
    pub cl: f64,
    pub cr: f64,
    pub dl: f64,
    pub dr: f64,
}

/// Interpolation basis on strictly increasing nodes; constant outside the node range.
#[derive(Debug, Clone)]
pub struct Interpolator {
    nodes: Vec<f64>,
    kind: InterpKind,
    /// Natural-spline operator mapping nodal values to second derivatives.
    second: DMatrix<f64>,
}

impl Interpolator {
    pub fn new(nodes: &[f64], kind: InterpKind) -> Self {
        let g = nodes.len();
        assert!(g >= 1);
        assert!(nodes.windows(2).all(|p| p[1] > p[0]), "nodes must increase");
        let kind = if g < 3 { InterpKind::Linear } else { kind };
        let second = match kind {
            InterpKind::Linear => DMatrix::zeros(g, g),
            InterpKind::Cubic => natural_spline_operator(nodes),
        };
        Self {
            nodes: nodes.to_vec(),
            kind,
            second,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn kind(&self) -> InterpKind {
        self.kind
    }

    /// Second-derivative operator `D` (zero for linear interpolation).
    pub fn second_operator(&self) -> &DMatrix<f64> {
        &self.second
    }

    pub fn stencil(&self, x: f64) -> Stencil {
        let g = self.nodes.len();
        if g == 1 {
            return Stencil {
                left: 0,
                right: 0,
                cl: 1.0,
                cr: 0.0,
                dl: 0.0,
                dr: 0.0,
            };
        }
        if x <= self.nodes[0] {
            return Stencil {
                left: 0,
                right: 0,
                cl: 1.0,
                cr: 0.0,
                dl: 0.0,
                dr: 0.0,
            };
        }
        if x >= self.nodes[g - 1] {
            return Stencil {
                left: g - 2,
                right: g - 1,
                cl: 0.0,
                cr: 1.0,
                dl: 0.0,
                dr: 0.0,
            };
        }
        let i = match self.nodes.binary_search_by(|v| v.partial_cmp(&x).unwrap()) {
            Ok(i) => i.min(g - 2),
            Err(i) => i - 1,
        };
        let h = self.nodes[i + 1] - self.nodes[i];
        let b = (x - self.nodes[i]) / h;
        let a = 1.0 - b;
        let (dl, dr) = match self.kind {
            InterpKind::Linear => (0.0, 0.0),
            InterpKind::Cubic => ((a * a * a - a) * h * h / 6.0, (b * b * b - b) * h * h / 6.0),
        };
        Stencil {
            left: i,
            right: i + 1,
            cl: a,
            cr: b,
            dl,
            dr,
        }
    }

    /// Dense row `r` with `f(x) = r · f_nodes`.
    pub fn row(&self, x: f64) -> Vec<f64> {
        let s = self.stencil(x);
        let g = self.nodes.len();
        let mut row = vec![0.0; g];
        row[s.left] += s.cl;
        row[s.right] += s.cr;
        if self.kind == InterpKind::Cubic {
            for (c, r) in row.iter_mut().enumerate() {
                *r += s.dl * self.second[(s.left, c)] + s.dr * self.second[(s.right, c)];
            }
        }
        row
    }

    pub fn eval(&self, values: &[f64], x: f64) -> f64 {
        self.row(x).iter().zip(values).map(|(r, v)| r * v).sum()
    }
}

/// Matrix `D` with `m = D f` the second derivatives of the natural cubic spline through `(x, f)`.
fn natural_spline_operator(x: &[f64]) -> DMatrix<f64> {
    let g = x.len();
    let inner = g - 2;
    let mut a = DMatrix::<f64>::zeros(inner, inner);
    let mut rhs = DMatrix::<f64>::zeros(inner, g);
    for r in 0..inner {
        let i = r + 1;
        let h0 = x[i] - x[i - 1];
        let h1 = x[i + 1] - x[i];
        a[(r, r)] = (h0 + h1) / 3.0;
        if r > 0 {
            a[(r, r - 1)] = h0 / 6.0;
        }
        if r + 1 < inner {
            a[(r, r + 1)] = h1 / 6.0;
        }
        rhs[(r, i - 1)] += 1.0 / h0;
        rhs[(r, i)] -= 1.0 / h0 + 1.0 / h1;
        rhs[(r, i + 1)] += 1.0 / h1;
    }
    let solved = a.lu().solve(&rhs).expect("spline system is diagonally dominant");
    let mut d = DMatrix::<f64>::zeros(g, g);
    for r in 0..inner {
        for c in 0..g {
            d[(r + 1, c)] = solved[(r, c)];
        }
    }
    d
}

/// Chebyshev–Lobatto points of order `n` and the matching transform.
#[derive(Debug, Clone)]
pub struct ChebyshevBasis {
    n: usize,
    cos: Vec<f64>,
}

impl ChebyshevBasis {
    pub fn new(n: usize) -> Self {
        assert!(n >= 2, "a Chebyshev basis needs at least two points");
        let m = (n - 1) as f64;
        let cos = (0..n * n)
            .map(|jk| (std::f64::consts::PI * ((jk / n) * (jk % n)) as f64 / m).cos())
            .collect();
        Self { n, cos }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Points on `[lo, hi]`, from `hi` down to `lo`.
    pub fn points(&self, lo: f64, hi: f64) -> Vec<f64> {
        (0..self.n)
            .map(|k| 0.5 * (lo + hi) + 0.5 * (hi - lo) * self.cos[self.n + k])
            .collect()
    }

    /// Interpolating series through `values` taken at [`points`](Self::points).
    pub fn fit(&self, lo: f64, hi: f64, values: &[f64]) -> Chebyshev {
        let n = self.n;
        assert_eq!(values.len(), n);
        let m = (n - 1) as f64;
        let mut coef: Vec<f64> = (0..n)
            .map(|j| {
                let row = &self.cos[j * n..(j + 1) * n];
                let inner: f64 = (1..n - 1).map(|k| values[k] * row[k]).sum();
                (inner + 0.5 * (values[0] * row[0] + values[n - 1] * row[n - 1])) * 2.0 / m
            })
            .collect();
        coef[0] *= 0.5;
        coef[n - 1] *= 0.5;
        Chebyshev::from_coefficients(lo, hi, coef)
    }
}

/// A Chebyshev series on `[lo, hi]` with its derivative series.
#[derive(Debug, Clone, PartialEq)]
pub struct Chebyshev {
    lo: f64,
    hi: f64,
    coef: Vec<f64>,
    dcoef: Vec<f64>,
}

fn clenshaw(c: &[f64], t: f64) -> f64 {
    let (mut b1, mut b2) = (0.0, 0.0);
    for &ck in c.iter().skip(1).rev() {
        let b0 = ck + 2.0 * t * b1 - b2;
        b2 = b1;
        b1 = b0;
    }
    c[0] + t * b1 - b2
}

impl Chebyshev {
    /// Series `Σ_j c_j T_j` in the variable mapped from `[lo, hi]` to `[−1, 1]`.
    pub fn from_coefficients(lo: f64, hi: f64, coef: Vec<f64>) -> Self {
        let n = coef.len();
        assert!(n >= 1 && hi > lo);
        let mut dcoef = vec![0.0; n + 1];
        for j in (1..n).rev() {
            dcoef[j - 1] = dcoef[j + 1] + 2.0 * j as f64 * coef[j];
        }
        dcoef.truncate(n);
        dcoef[0] *= 0.5;
        let scale = 2.0 / (hi - lo);
        dcoef.iter_mut().for_each(|d| *d *= scale);
        Chebyshev { lo, hi, coef, dcoef }
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coef
    }

    pub fn range(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    fn local(&self, x: f64) -> f64 {
        (2.0 * x - self.lo - self.hi) / (self.hi - self.lo)
    }

    pub fn eval(&self, x: f64) -> f64 {
        clenshaw(&self.coef, self.local(x))
    }

    pub fn derivative(&self, x: f64) -> f64 {
        clenshaw(&self.dcoef, self.local(x))
    }

    /// Magnitude of the trailing coefficients, a cheap accuracy indicator.
    pub fn tail(&self) -> f64 {
        let n = self.coef.len();
        self.coef[n.saturating_sub(2)..].iter().fold(0.0, |m, c| m.max(c.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_rule_moments() {
        let (t, w) = normal_rule(20);
        let m = |k: i32| t.iter().zip(&w).map(|(t, w)| w * t.powi(k)).sum::<f64>();
        assert!((m(0) - 1.0).abs() < 1e-14);
        assert!(m(1).abs() < 1e-14);
        assert!((m(2) - 1.0).abs() < 1e-12);
        assert!((m(4) - 3.0).abs() < 1e-11);
        assert!(t.windows(2).all(|p| p[1] > p[0]));
    }

    #[test]
    fn chebyshev_series_is_spectrally_accurate() {
        let b = ChebyshevBasis::new(18);
        let (lo, hi) = (-1.5, 2.0);
        let f = |x: f64| 1.0 / (1.0 + (-x).exp());
        let vals: Vec<f64> = b.points(lo, hi).into_iter().map(f).collect();
        let c = b.fit(lo, hi, &vals);
        for k in 0..50 {
            let x = lo + (hi - lo) * k as f64 / 49.0;
            let df = f(x) * (1.0 - f(x));
            assert!((c.eval(x) - f(x)).abs() < 1e-9);
            assert!((c.derivative(x) - df).abs() < 1e-7);
        }
        let cubic = b.fit(
            lo,
            hi,
            &b.points(lo, hi).iter().map(|x| x * x * x - x).collect::<Vec<_>>(),
        );
        assert!((cubic.derivative(0.5) - (3.0 * 0.25 - 1.0)).abs() < 1e-12);
        assert!(cubic.tail() < 1e-13);
    }

    #[test]
    fn trapezoid_integrates_linear() {
        let (x, w) = trapezoid_rule(-1.0, 3.0, 9);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * (2.0 * x + 1.0)).sum();
        assert!((s - 12.0).abs() < 1e-12);
    }

    #[test]
    fn interpolator_reproduces_nodes_and_lines() {
        let nodes = [-2.0, -0.5, 0.0, 1.0, 3.0];
        for kind in [InterpKind::Linear, InterpKind::Cubic] {
            let it = Interpolator::new(&nodes, kind);
            let vals: Vec<f64> = nodes.iter().map(|x| 2.0 * x - 1.0).collect();
            for (x, v) in nodes.iter().zip(&vals) {
                assert!((it.eval(&vals, *x) - v).abs() < 1e-12);
            }
            assert!((it.eval(&vals, 0.4) - (-0.2)).abs() < 1e-12);
            // constant extension outside the range
            assert!((it.eval(&vals, 10.0) - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cubic_is_accurate_on_smooth_functions() {
        let nodes: Vec<f64> = (0..41).map(|i| -4.0 + 0.2 * i as f64).collect();
        let it = Interpolator::new(&nodes, InterpKind::Cubic);
        let vals: Vec<f64> = nodes.iter().map(|x| (x * 0.7).sin()).collect();
        let err = (0..100)
            .map(|k| -3.0 + 0.06 * k as f64)
            .map(|x| (it.eval(&vals, x) - (x * 0.7).sin()).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-4, "{err}");
    }
}
