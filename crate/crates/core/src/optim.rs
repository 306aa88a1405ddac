//! Small box-constrained quasi-Newton minimizer.
//!
//! Projected BFGS with an active set: variables pinned at a bound with the
//! gradient pushing outward are frozen for the iteration, the remaining ones
//! take a quasi-Newton step, and an Armijo backtracking search runs along the
//! projected path. Gradients come from central finite differences. Every
//! accepted step strictly lowers the objective, so the result is never worse
//! than the start.

use nalgebra::{SMatrix, SVector};

pub type Vec6 = SVector<f64, 6>;
type Mat6 = SMatrix<f64, 6, 6>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxOptions {
    /// Hard cap on objective evaluations, gradients included.
    pub max_evaluations: usize,
    /// Stop once an accepted step moves no variable by more than this.
    pub step_tolerance: f64,
    /// Finite-difference step.
    pub fd_step: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxResult {
    pub x: Vec6,
    pub value: f64,
    pub start_value: f64,
    pub evaluations: usize,
    /// The evaluation budget ran out before convergence.
    pub exhausted: bool,
}

struct Counted<F> {
    f: F,
    n: usize,
    max: usize,
}

impl<F: FnMut(&Vec6) -> f64> Counted<F> {
    fn eval(&mut self, x: &Vec6) -> Option<f64> {
        if self.n >= self.max {
            return None;
        }
        self.n += 1;
        Some((self.f)(x))
    }

    fn gradient(&mut self, x: &Vec6, h: f64) -> Option<Vec6> {
        if self.n + 12 > self.max {
            return None;
        }
        let mut g = Vec6::zeros();
        for i in 0..6 {
            let mut a = *x;
            let mut b = *x;
            a[i] += h;
            b[i] -= h;
            g[i] = (self.eval(&a)? - self.eval(&b)?) / (2.0 * h);
        }
        Some(g)
    }
}

fn project(x: &Vec6, lo: &Vec6, hi: &Vec6) -> Vec6 {
    Vec6::from_fn(|i, _| x[i].clamp(lo[i], hi[i]))
}

/// Minimizes `f` over `lo <= x <= hi` starting from `x0` (clamped into the box).
pub fn minimize_box<F: FnMut(&Vec6) -> f64>(
    f: F,
    x0: Vec6,
    lo: Vec6,
    hi: Vec6,
    opts: &BoxOptions,
) -> BoxResult {
    let mut obj = Counted {
        f,
        n: 0,
        max: opts.max_evaluations.max(1),
    };
    let mut x = project(&x0, &lo, &hi);
    let mut fx = obj.eval(&x).expect("budget allows one evaluation");
    let start_value = fx;
    let done = |x: Vec6, value: f64, n: usize, exhausted: bool| BoxResult {
        x,
        value,
        start_value,
        evaluations: n,
        exhausted,
    };
    if !fx.is_finite() {
        return done(x, fx, obj.n, false);
    }
    let Some(mut g) = obj.gradient(&x, opts.fd_step) else {
        return done(x, fx, obj.n, true);
    };
    let mut hinv = Mat6::identity();
    let mut fresh = true;
    loop {
        let at_lo = |i: usize| x[i] <= lo[i] + 1e-15;
        let at_hi = |i: usize| x[i] >= hi[i] - 1e-15;
        let free: [bool; 6] = std::array::from_fn(|i| !((at_lo(i) && g[i] > 0.0) || (at_hi(i) && g[i] < 0.0)));
        if free.iter().all(|f| !f) || g.iter().zip(free).all(|(gi, f)| !f || *gi == 0.0) {
            return done(x, fx, obj.n, false);
        }

        let mut d = Vec6::zeros();
        {
            let mut gf = g;
            let mut h = hinv;
            for i in 0..6 {
                if !free[i] {
                    gf[i] = 0.0;
                    h.row_mut(i).fill(0.0);
                    h.column_mut(i).fill(0.0);
                }
            }
            d -= h * gf;
        }
        let slope = g.dot(&d);
        if !(slope < 0.0) {
            hinv = Mat6::identity();
            fresh = true;
            d = Vec6::from_fn(|i, _| if free[i] { -g[i] } else { 0.0 });
        }
        // The first step of a fresh model moves the largest coordinate across
        // at most the full box width.
        let width = (hi - lo).amax().max(opts.step_tolerance);
        let mut alpha = if fresh { (width / d.amax()).min(1.0) } else { 1.0 };

        let mut accepted = None;
        let mut backtracked = false;
        for _ in 0..30 {
            let xn = project(&(x + d * alpha), &lo, &hi);
            let s = xn - x;
            if s.amax() == 0.0 {
                break;
            }
            let Some(fn_) = obj.eval(&xn) else {
                return done(x, fx, obj.n, true);
            };
            if fn_ < fx && fn_ <= fx + 1e-4 * g.dot(&s) {
                accepted = Some((xn, fn_, s));
                break;
            }
            if s.amax() < opts.step_tolerance * 1e-3 {
                break;
            }
            alpha *= 0.5;
            backtracked = true;
        }
        let Some((xn, fn_, s)) = accepted else {
            if fresh {
                return done(x, fx, obj.n, false);
            }
            hinv = Mat6::identity();
            fresh = true;
            continue;
        };
        x = xn;
        fx = fn_;
        // A short step only signals convergence when the line search did
        // not have to shorten it.
        if s.amax() < opts.step_tolerance && !backtracked {
            return done(x, fx, obj.n, false);
        }
        let Some(gn) = obj.gradient(&x, opts.fd_step) else {
            return done(x, fx, obj.n, true);
        };
        let y = gn - g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if fresh {
                // Shanno scaling of the initial inverse Hessian.
                hinv = Mat6::identity() * (sy / y.dot(&y));
            }
            let rho = 1.0 / sy;
            let i = Mat6::identity();
            hinv = (i - s * y.transpose() * rho) * hinv * (i - y * s.transpose() * rho)
                + s * s.transpose() * rho;
            fresh = false;
        }
        g = gn;
    }
}
