//! Nelder–Mead simplex minimization.

#[derive(Debug, Clone, Copy)]
pub struct NelderMeadOptions {
    /// Edge length of the initial axis-aligned simplex.
    pub initial_step: f64,
    /// Stop when `max f - min f` over the simplex falls below this.
    pub f_tol: f64,
    pub max_iter: usize,
    /// Number of restarts from the best vertex after convergence.
    pub restarts: usize,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            initial_step: 0.1,
            f_tol: 1e-9,
            max_iter: 2000,
            restarts: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

const REFLECT: f64 = 1.0;
const EXPAND: f64 = 2.0;
const CONTRACT: f64 = 0.5;
const SHRINK: f64 = 0.5;

/// Minimizes `f` from `x0`. Non-finite objective values are treated as `+inf`,
/// so infeasible regions can be expressed by returning NaN or infinity.
pub fn nelder_mead<F>(f: F, x0: &[f64], opts: &NelderMeadOptions) -> Minimum
where
    F: Fn(&[f64]) -> f64,
{
    let eval = |x: &[f64]| {
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let mut best = run(&eval, x0, opts);
    for _ in 0..opts.restarts {
        let again = run(&eval, &best.x, opts);
        let improved = again.value < best.value - opts.f_tol;
        let iterations = best.iterations + again.iterations;
        if again.value <= best.value {
            best = Minimum {
                iterations,
                ..again
            };
        } else {
            best.iterations = iterations;
        }
        if !improved {
            break;
        }
    }
    best
}

fn run<F: Fn(&[f64]) -> f64>(f: &F, x0: &[f64], opts: &NelderMeadOptions) -> Minimum {
    let n = x0.len();
    assert!(n > 0, "nelder_mead needs at least one parameter");

    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    simplex.push(x0.to_vec());
    for i in 0..n {
        let mut v = x0.to_vec();
        v[i] += opts.initial_step;
        simplex.push(v);
    }
    let mut fx: Vec<f64> = simplex.iter().map(|v| f(v)).collect();

    let point = |c: &[f64], toward: &[f64], t: f64| -> Vec<f64> {
        c.iter().zip(toward).map(|(&ci, &ti)| ci + t * (ti - ci)).collect()
    };

    for iter in 0..opts.max_iter {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| fx[a].total_cmp(&fx[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        fx = order.iter().map(|&i| fx[i]).collect();

        if fx[n] - fx[0] < opts.f_tol {
            return Minimum {
                x: simplex.swap_remove(0),
                value: fx[0],
                iterations: iter,
                converged: true,
            };
        }

        let mut centroid = vec![0.0; n];
        for v in &simplex[..n] {
            for (c, x) in centroid.iter_mut().zip(v) {
                *c += x / n as f64;
            }
        }

        let xr = point(&centroid, &simplex[n], -REFLECT);
        let fr = f(&xr);
        if fr < fx[0] {
            let xe = point(&centroid, &simplex[n], -EXPAND);
            let fe = f(&xe);
            if fe < fr {
                simplex[n] = xe;
                fx[n] = fe;
            } else {
                simplex[n] = xr;
                fx[n] = fr;
            }
            continue;
        }
        if fr < fx[n - 1] {
            simplex[n] = xr;
            fx[n] = fr;
            continue;
        }
        let (xc, fc) = if fr < fx[n] {
            let xc = point(&centroid, &xr, CONTRACT);
            let fc = f(&xc);
            (xc, fc)
        } else {
            let xc = point(&centroid, &simplex[n], CONTRACT);
            let fc = f(&xc);
            (xc, fc)
        };
        if fc < fr.min(fx[n]) {
            simplex[n] = xc;
            fx[n] = fc;
            continue;
        }
        for i in 1..=n {
            simplex[i] = point(&simplex[0], &simplex[i], SHRINK);
            fx[i] = f(&simplex[i]);
        }
    }

    let best = (0..=n).min_by(|&a, &b| fx[a].total_cmp(&fx[b])).unwrap();
    Minimum {
        x: simplex.swap_remove(best),
        value: fx[best],
        iterations: opts.max_iter,
        converged: false,
    }
}
