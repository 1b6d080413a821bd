//! Projected BFGS for smooth objectives under box constraints.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxMinimizerConfig {
    pub max_iterations: usize,
    /// Stop once the projected gradient's max-norm falls below this.
    pub gradient_tolerance: f64,
    /// Stop once a step improves the objective by less than this (relative).
    pub value_tolerance: f64,
    /// Largest allowed step, per coordinate.
    pub max_step: f64,
}

impl Default for BoxMinimizerConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            gradient_tolerance: 1e-6,
            value_tolerance: 1e-10,
            max_step: 3.0,
        }
    }
}

fn project(x: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    x.iter().zip(lo.iter().zip(hi)).map(|(v, (l, h))| v.clamp(*l, *h)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `f` over `[lo, hi]` starting from `x0`. `f` returns the value
/// and gradient or `None` where it cannot be evaluated; such points are
/// backtracked away from. Returns `None` if `x0` itself cannot be evaluated.
pub fn minimize_box<F>(mut f: F, x0: &[f64], lo: &[f64], hi: &[f64], cfg: &BoxMinimizerConfig) -> Option<(Vec<f64>, f64)>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let mut x = project(x0, lo, hi);
    let (mut fx, mut g) = f(&x)?;
    let identity = |n: usize| {
        let mut h = vec![vec![0.0; n]; n];
        for (i, row) in h.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        h
    };
    let mut h = identity(n);

    for _ in 0..cfg.max_iterations {
        // Coordinates pinned at a bound with the gradient pushing outward.
        let active: Vec<bool> = (0..n)
            .map(|i| (x[i] <= lo[i] && g[i] > 0.0) || (x[i] >= hi[i] && g[i] < 0.0))
            .collect();
        let pg = (0..n)
            .map(|i| (x[i] - (x[i] - g[i]).clamp(lo[i], hi[i])).abs())
            .fold(0.0, f64::max);
        if pg < cfg.gradient_tolerance {
            break;
        }

        let mut d: Vec<f64> = (0..n)
            .map(|i| {
                if active[i] {
                    0.0
                } else {
                    -(0..n).filter(|&j| !active[j]).map(|j| h[i][j] * g[j]).sum::<f64>()
                }
            })
            .collect();
        if dot(&d, &g) >= 0.0 {
            h = identity(n);
            d = (0..n).map(|i| if active[i] { 0.0 } else { -g[i] }).collect();
        }
        let largest = d.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if largest == 0.0 {
            break;
        }
        let mut t = (cfg.max_step / largest).min(1.0);

        let mut accepted = None;
        for _ in 0..40 {
            let trial: Vec<f64> = project(
                &x.iter().zip(&d).map(|(xi, di)| xi + t * di).collect::<Vec<_>>(),
                lo,
                hi,
            );
            let step: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
            if let Some((ft, gt)) = f(&trial) {
                if ft <= fx + 1e-4 * dot(&g, &step) {
                    accepted = Some((trial, ft, gt, step));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((xn, fxn, gn, s)) = accepted else {
            break;
        };
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 {
            // H⁺ = (I - ρ s yᵀ) H (I - ρ y sᵀ) + ρ s sᵀ
            let rho = 1.0 / sy;
            let hy: Vec<f64> = (0..n).map(|i| dot(&h[i], &y)).collect();
            let yhy = dot(&y, &hy);
            for i in 0..n {
                for j in 0..n {
                    h[i][j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
                }
            }
        }
        let improvement = fx - fxn;
        x = xn;
        fx = fxn;
        g = gn;
        if improvement.abs() <= cfg.value_tolerance * (1.0 + fx.abs()) {
            break;
        }
    }
    Some((x, fx))
}
