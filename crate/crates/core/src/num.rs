//! Small numeric utilities: 3-vector algebra, Gauss-Legendre panels and a
//! deterministic pairwise reduction.

/// 3-component vector alias; geometry works on plain arrays.
pub type V3 = [f64; 3];

#[inline]
pub fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm(a: V3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn add(a: V3, b: V3) -> V3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale(s: f64, a: V3) -> V3 {
    [s * a[0], s * a[1], s * a[2]]
}

#[inline]
pub fn axpy(s: f64, a: V3, b: V3) -> V3 {
    [s * a[0] + b[0], s * a[1] + b[1], s * a[2] + b[2]]
}

#[inline]
pub fn cross(a: V3, b: V3) -> V3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn normalize(a: V3) -> V3 {
    let n = norm(a);
    scale(1.0 / n, a)
}

/// Unit-norm check used by argument validation; |omega| must equal 1 to 1e-12.
#[inline]
pub fn is_unit(a: V3) -> bool {
    (norm(a) - 1.0).abs() < 1e-12
}

/// Completes `omega` to a deterministic right-handed orthonormal frame
/// `(u, v, omega)`. The seed axis is the coordinate axis least aligned with
/// `omega`, which keeps the frame stable under small perturbations.
pub fn orthonormal_frame(omega: V3) -> (V3, V3) {
    let abs = [omega[0].abs(), omega[1].abs(), omega[2].abs()];
    let k = if abs[0] <= abs[1] && abs[0] <= abs[2] {
        0
    } else if abs[1] <= abs[2] {
        1
    } else {
        2
    };
    let mut e = [0.0; 3];
    e[k] = 1.0;
    let u = normalize(axpy(-dot(e, omega), omega, e));
    let v = cross(omega, u);
    (u, v)
}

/// Nodes and weights of the 8-point Gauss-Legendre rule on [-1, 1].
const GL8_NODES: [f64; 8] = [
    -0.960_289_856_497_536_2,
    -0.796_666_477_413_626_7,
    -0.525_532_409_916_329,
    -0.183_434_642_495_649_8,
    0.183_434_642_495_649_8,
    0.525_532_409_916_329,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_2,
];
const GL8_WEIGHTS: [f64; 8] = [
    0.101_228_536_290_376_26,
    0.222_381_034_453_374_47,
    0.313_706_645_877_887_3,
    0.362_683_783_378_361_98,
    0.362_683_783_378_361_98,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_47,
    0.101_228_536_290_376_26,
];

/// 2-point Gauss-Legendre rule on [-1, 1] (degree of exactness 3).
const GL2_NODES: [f64; 2] = [-0.577_350_269_189_625_8, 0.577_350_269_189_625_8];
const GL2_WEIGHTS: [f64; 2] = [1.0, 1.0];

/// Integrates `f` over `[a, b]` with `panels` equal Gauss-Legendre panels.
pub fn gauss_panels(a: f64, b: f64, panels: usize, order8: bool, mut f: impl FnMut(f64) -> f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let (nodes, weights): (&[f64], &[f64]) = if order8 {
        (&GL8_NODES, &GL8_WEIGHTS)
    } else {
        (&GL2_NODES, &GL2_WEIGHTS)
    };
    let h = (b - a) / panels as f64;
    let mut vals = Vec::with_capacity(panels * nodes.len());
    for p in 0..panels {
        let lo = a + p as f64 * h;
        let mid = lo + 0.5 * h;
        for (t, w) in nodes.iter().zip(weights) {
            vals.push(w * 0.5 * h * f(mid + 0.5 * h * t));
        }
    }
    pairwise_sum(&vals)
}

/// Adaptive composite Gauss-Legendre: panel count doubles until the relative
/// increment drops below `rel_tol` (or `max_doublings` is hit). Returns the
/// last estimate together with the achieved relative increment.
pub fn gauss_adaptive(
    a: f64,
    b: f64,
    initial_panels: usize,
    rel_tol: f64,
    max_doublings: usize,
    mut f: impl FnMut(f64) -> f64,
) -> (f64, f64) {
    let mut panels = initial_panels.max(1);
    let mut last = gauss_panels(a, b, panels, true, &mut f);
    let mut rel = f64::INFINITY;
    for _ in 0..max_doublings {
        panels *= 2;
        let next = gauss_panels(a, b, panels, true, &mut f);
        rel = (next - last).abs() / next.abs().max(1e-300);
        last = next;
        if rel < rel_tol {
            break;
        }
    }
    (last, rel)
}

/// Fixed-order pairwise (tree) reduction. Summation order depends only on
/// the slice length, never on thread scheduling, so parallel callers that
/// collect per-node values first get bit-identical totals on every run.
pub fn pairwise_sum(vals: &[f64]) -> f64 {
    match vals.len() {
        0 => 0.0,
        1 => vals[0],
        2 => vals[0] + vals[1],
        n if n <= 8 => {
            let mut s = 0.0;
            for v in vals {
                s += v;
            }
            s
        }
        n => {
            let mid = n / 2;
            pairwise_sum(&vals[..mid]) + pairwise_sum(&vals[mid..])
        }
    }
}

/// Mean and standard error of a sample; the reduction is pairwise for
/// determinism.
pub fn mean_stderr(vals: &[f64]) -> (f64, f64) {
    let n = vals.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = pairwise_sum(vals) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let sq: Vec<f64> = vals.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = pairwise_sum(&sq) / (n as f64 - 1.0);
    (mean, (var / n as f64).sqrt())
}

/// Monotone cubic (Fritsch-Carlson) interpolant through strictly increasing
/// `(x, y)` data. Used by the range map and its inverse.
pub struct MonotoneCubic {
    xs: Vec<f64>,
    ys: Vec<f64>,
    slopes: Vec<f64>,
}

impl MonotoneCubic {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Self {
        let n = xs.len();
        assert!(n >= 2, "need at least two interpolation nodes");
        let mut d = vec![0.0; n - 1];
        for i in 0..n - 1 {
            d[i] = (ys[i + 1] - ys[i]) / (xs[i + 1] - xs[i]);
        }
        let mut m = vec![0.0; n];
        m[0] = d[0];
        m[n - 1] = d[n - 2];
        for i in 1..n - 1 {
            m[i] = if d[i - 1] * d[i] <= 0.0 {
                0.0
            } else {
                // Harmonic mean keeps the interpolant monotone.
                2.0 * d[i - 1] * d[i] / (d[i - 1] + d[i])
            };
        }
        // Fritsch-Carlson limiter.
        for i in 0..n - 1 {
            if d[i] == 0.0 {
                m[i] = 0.0;
                m[i + 1] = 0.0;
            } else {
                let alpha = m[i] / d[i];
                let beta = m[i + 1] / d[i];
                let s = alpha * alpha + beta * beta;
                if s > 9.0 {
                    let tau = 3.0 / s.sqrt();
                    m[i] = tau * alpha * d[i];
                    m[i + 1] = tau * beta * d[i];
                }
            }
        }
        Self { xs, ys, slopes: m }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        let x = x.clamp(self.xs[0], self.xs[n - 1]);
        let i = match self.xs.binary_search_by(|v| v.partial_cmp(&x).unwrap()) {
            Ok(i) => i.min(n - 2),
            Err(i) => i.saturating_sub(1).min(n - 2),
        };
        let h = self.xs[i + 1] - self.xs[i];
        let t = (x - self.xs[i]) / h;
        let h00 = (1.0 + 2.0 * t) * (1.0 - t) * (1.0 - t);
        let h10 = t * (1.0 - t) * (1.0 - t);
        let h01 = t * t * (3.0 - 2.0 * t);
        let h11 = t * t * (t - 1.0);
        h00 * self.ys[i] + h10 * h * self.slopes[i] + h01 * self.ys[i + 1] + h11 * h * self.slopes[i + 1]
    }
}
