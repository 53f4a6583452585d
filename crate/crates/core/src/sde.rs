//! Euler–Maruyama simulation of the reference diffusion `dX = sigma dB`, of
//! the controlled dynamics `dX = f dt + sigma dB`, and the discretized
//! Girsanov densities that connect the two.
//!
//! Brownian increments are counter based: path `j` owns ChaCha stream `j`
//! and step `k` always consumes the words `[k W, (k + 1) W)` of it, where `W`
//! depends only on the dimension. A path therefore does not depend on how
//! many other paths are simulated or on the thread layout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{FeedbackPair, GameSpec, Player};
use crate::linalg::{self, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub horizon: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, horizon: f64, n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::Config("n_steps must be >= 1".into()));
        }
        if !(t0.is_finite() && horizon.is_finite() && horizon > t0) {
            return Err(Error::Config(format!("time grid needs t0 < T, got [{t0}, {horizon}]")));
        }
        Ok(TimeGrid { t0, horizon, n_steps })
    }

    pub fn dt(&self) -> f64 {
        (self.horizon - self.t0) / self.n_steps as f64
    }

    /// Knot `t_k`; the last knot is exactly `T`.
    pub fn knot(&self, k: usize) -> f64 {
        if k >= self.n_steps {
            self.horizon
        } else {
            self.t0 + (self.horizon - self.t0) * k as f64 / self.n_steps as f64
        }
    }

    pub fn knots(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|k| self.knot(k)).collect()
    }

    /// Index of the knot at or immediately left of `t`, clamped to the grid.
    pub fn left_knot(&self, t: f64) -> usize {
        let pos = (t - self.t0) / self.dt();
        // knots that are hit up to rounding count as reached
        let k = (pos + 1e-9).floor();
        if k <= 0.0 {
            0
        } else {
            (k as usize).min(self.n_steps)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    Reference,
    Controlled,
}

/// Monte Carlo ensemble on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub dim: usize,
    pub seed: u64,
    pub scheme: Scheme,
    /// `n_paths x n_steps x m`, path-major.
    increments: Vec<f64>,
    /// `n_paths x (n_steps + 1) x m`, path-major.
    states: Vec<f64>,
}

impl PathBundle {
    pub fn increment(&self, path: usize, k: usize) -> &[f64] {
        let m = self.dim;
        let off = (path * self.grid.n_steps + k) * m;
        &self.increments[off..off + m]
    }

    pub fn state(&self, path: usize, k: usize) -> &[f64] {
        let m = self.dim;
        let off = (path * (self.grid.n_steps + 1) + k) * m;
        &self.states[off..off + m]
    }

    /// States of all paths at knot `k`, `n_paths x m` row-major.
    pub fn states_at(&self, k: usize) -> Vec<f64> {
        let m = self.dim;
        let mut out = Vec::with_capacity(self.n_paths * m);
        for j in 0..self.n_paths {
            out.extend_from_slice(self.state(j, k));
        }
        out
    }

    /// FNV-1a digest of every stored number, for reproducibility checks.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.increments.iter().chain(&self.states) {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

/// Source of the `Z` values fed into feedback controls.
pub trait GradientField: Sync {
    fn gradient(&self, player: Player, t: f64, x: &[f64]) -> Vector;
}

/// `Z = 0`, for feedbacks that ignore it.
#[derive(Debug, Clone, Copy)]
pub struct ZeroGradient {
    pub dim: usize,
}

impl GradientField for ZeroGradient {
    fn gradient(&self, _player: Player, _t: f64, _x: &[f64]) -> Vector {
        smallvec::smallvec![0.0; self.dim]
    }
}

/// ChaCha words consumed per time step for an `m`-dimensional increment.
pub fn words_per_step(m: usize) -> u128 {
    // one Box–Muller pair per two coordinates, two u64 draws per pair
    (m.div_ceil(2) * 4) as u128
}

fn path_rng(seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

fn fill_normals(rng: &mut ChaCha8Rng, scale: f64, out: &mut [f64]) {
    let mut j = 0;
    while j < out.len() {
        let u1: f64 = 1.0 - rng.random::<f64>();
        let u2: f64 = rng.random::<f64>();
        let r = (-2.0 * u1.ln()).sqrt() * scale;
        let a = std::f64::consts::TAU * u2;
        out[j] = r * a.cos();
        if j + 1 < out.len() {
            out[j + 1] = r * a.sin();
        }
        j += 2;
    }
}

/// Increment of `path` at step `k`, regenerated from `(seed, path, k)` alone.
pub fn brownian_increment(seed: u64, path: usize, k: usize, m: usize, dt: f64) -> Vector {
    let mut rng = path_rng(seed, path);
    rng.set_word_pos(k as u128 * words_per_step(m));
    let mut out: Vector = smallvec::smallvec![0.0; m];
    fill_normals(&mut rng, dt.sqrt(), &mut out);
    out
}

fn check_x0(spec: &GameSpec, x0: &[f64], n_paths: usize) -> Result<()> {
    if n_paths == 0 {
        return Err(Error::Config("n_paths must be >= 1".into()));
    }
    if x0.len() != spec.dim || x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config(format!(
            "x0 must be a finite vector of length {}, got {x0:?}",
            spec.dim
        )));
    }
    Ok(())
}

/// Simulates `n_paths` paths with the drift produced by `drift_at`
/// (`None` = reference dynamics).
fn simulate<D>(
    spec: &GameSpec,
    grid: TimeGrid,
    x0: &[f64],
    n_paths: usize,
    seed: u64,
    scheme: Scheme,
    drift_at: D,
) -> Result<PathBundle>
where
    D: Fn(f64, &[f64]) -> Option<Vector> + Sync,
{
    check_x0(spec, x0, n_paths)?;
    let m = spec.dim;
    let n = grid.n_steps;
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let mut increments = vec![0.0; n_paths * n * m];
    let mut states = vec![0.0; n_paths * (n + 1) * m];

    let outcomes: Vec<Result<()>> = increments
        .par_chunks_mut(n * m)
        .zip(states.par_chunks_mut((n + 1) * m))
        .enumerate()
        .map(|(j, (inc, st))| {
            let mut rng = path_rng(seed, j);
            for k in 0..n {
                fill_normals(&mut rng, sqrt_dt, &mut inc[k * m..(k + 1) * m]);
            }
            st[..m].copy_from_slice(x0);
            for k in 0..n {
                let t = grid.knot(k);
                let (cur, next) = st[k * m..(k + 2) * m].split_at_mut(m);
                let sig = (spec.sigma)(t, cur);
                if sig.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Simulation {
                        path: j,
                        step: k,
                        reason: format!("non-finite diffusion coefficient at x = {cur:?}"),
                    });
                }
                let noise = linalg::mat_vec(&sig, &inc[k * m..(k + 1) * m]);
                let drift = drift_at(t, cur);
                for r in 0..m {
                    let d = drift.as_ref().map_or(0.0, |f| f[r] * dt);
                    next[r] = cur[r] + d + noise[r];
                }
                if next.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Simulation {
                        path: j,
                        step: k,
                        reason: "state became non-finite".into(),
                    });
                }
            }
            Ok(())
        })
        .collect();
    outcomes.into_iter().collect::<Result<Vec<()>>>()?;

    Ok(PathBundle {
        grid,
        n_paths,
        dim: m,
        seed,
        scheme,
        increments,
        states,
    })
}

/// Euler–Maruyama for `dX = sigma(t, X) dB` under the reference measure.
pub fn simulate_reference(
    spec: &GameSpec,
    grid: TimeGrid,
    x0: &[f64],
    n_paths: usize,
    seed: u64,
) -> Result<PathBundle> {
    simulate(spec, grid, x0, n_paths, seed, Scheme::Reference, |_, _| None)
}

/// Controls `(u, v)` of a feedback pair at `(t, x)`.
pub fn feedback_controls(
    feedbacks: &FeedbackPair,
    z_source: &dyn GradientField,
    t: f64,
    x: &[f64],
) -> (Vector, Vector) {
    let z1 = z_source.gradient(Player::One, t, x);
    let z2 = z_source.gradient(Player::Two, t, x);
    (feedbacks[0].eval(t, x, &z1, &z2), feedbacks[1].eval(t, x, &z1, &z2))
}

/// Euler–Maruyama for `dX = f(t, X, u, v) dt + sigma(t, X) dB` with the
/// controls given in feedback form. Uses the same increments as
/// [`simulate_reference`] for the same seed.
pub fn simulate_controlled(
    spec: &GameSpec,
    grid: TimeGrid,
    x0: &[f64],
    feedbacks: &FeedbackPair,
    z_source: &dyn GradientField,
    n_paths: usize,
    seed: u64,
) -> Result<PathBundle> {
    simulate(spec, grid, x0, n_paths, seed, Scheme::Controlled, |t, x| {
        let (u, v) = feedback_controls(feedbacks, z_source, t, x);
        Some((spec.drift)(t, x, &u, &v))
    })
}

/// Per-path outputs of a pass over a reference bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct PathFunctionals {
    /// `log zeta_T`, left-point discretized.
    pub log_weights: Vec<f64>,
    /// `sum_k h_i(t_k, X_k, u_k, v_k) dt + g^i(X_T)` per player.
    pub costs: [Vec<f64>; 2],
}

fn require_reference(bundle: &PathBundle) -> Result<()> {
    if bundle.scheme != Scheme::Reference {
        return Err(Error::Contract(
            "Girsanov weights need a reference-measure bundle".into(),
        ));
    }
    Ok(())
}

/// Log Girsanov densities and accumulated costs along reference paths.
pub fn reference_functionals(
    spec: &GameSpec,
    bundle: &PathBundle,
    feedbacks: &FeedbackPair,
    z_source: &dyn GradientField,
) -> Result<PathFunctionals> {
    reference_functionals_by(spec, bundle, |_, _, t, x| feedback_controls(feedbacks, z_source, t, x))
}

/// As [`reference_functionals`], with the controls supplied per
/// `(path, step, t, x)`; lets callers reuse tabulated controls.
pub fn reference_functionals_by<C>(spec: &GameSpec, bundle: &PathBundle, controls: C) -> Result<PathFunctionals>
where
    C: Fn(usize, usize, f64, &[f64]) -> (Vector, Vector) + Sync,
{
    require_reference(bundle)?;
    let n = bundle.grid.n_steps;
    let dt = bundle.grid.dt();
    let rows: Vec<Result<(f64, f64, f64)>> = (0..bundle.n_paths)
        .into_par_iter()
        .map(|j| {
            let (mut log_w, mut c1, mut c2) = (0.0, 0.0, 0.0);
            for k in 0..n {
                let t = bundle.grid.knot(k);
                let x = bundle.state(j, k);
                let (u, v) = controls(j, k, t, x);
                let eta = spec.eta(t, x, &u, &v);
                log_w += linalg::dot(&eta, bundle.increment(j, k)) - 0.5 * linalg::dot(&eta, &eta) * dt;
                c1 += (spec.running_cost[0])(t, x, &u, &v) * dt;
                c2 += (spec.running_cost[1])(t, x, &u, &v) * dt;
            }
            let xt = bundle.state(j, n);
            c1 += (spec.terminal_cost[0])(xt);
            c2 += (spec.terminal_cost[1])(xt);
            if !log_w.is_finite() {
                return Err(Error::Simulation {
                    path: j,
                    step: n,
                    reason: "non-finite Girsanov exponent".into(),
                });
            }
            if !(c1.is_finite() && c2.is_finite()) {
                return Err(Error::NonFiniteCost { path: j });
            }
            Ok((log_w, c1, c2))
        })
        .collect();
    let mut out = PathFunctionals {
        log_weights: Vec::with_capacity(bundle.n_paths),
        costs: [Vec::with_capacity(bundle.n_paths), Vec::with_capacity(bundle.n_paths)],
    };
    for row in rows {
        let (w, c1, c2) = row?;
        out.log_weights.push(w);
        out.costs[0].push(c1);
        out.costs[1].push(c2);
    }
    Ok(out)
}

/// Discretized `zeta_T(sigma^{-1} f)` per path:
/// `exp(sum_k eta_k . dB_k - 1/2 sum_k |eta_k|^2 dt)`.
pub fn girsanov_weight(
    spec: &GameSpec,
    bundle: &PathBundle,
    feedbacks: &FeedbackPair,
    z_source: &dyn GradientField,
) -> Result<Vec<f64>> {
    let fun = reference_functionals(spec, bundle, feedbacks, z_source)?;
    fun.log_weights
        .iter()
        .enumerate()
        .map(|(j, lw)| {
            let w = lw.exp();
            if w > 0.0 && w.is_finite() {
                Ok(w)
            } else {
                Err(Error::Simulation {
                    path: j,
                    step: bundle.grid.n_steps,
                    reason: format!("Girsanov weight exp({lw}) is not positive and finite"),
                })
            }
        })
        .collect()
}

/// Sample mean and standard error.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let mean = linalg::chunked_sum(n, |i| values[i]) / n as f64;
    if n < 2 {
        return (mean, f64::INFINITY);
    }
    let ss = linalg::chunked_sum(n, |i| (values[i] - mean).powi(2));
    (mean, (ss / (n - 1) as f64 / n as f64).sqrt())
}

/// `E[sup_{k} |X_{t_k}|^{2q}]` over the bundle.
pub fn sup_moment(bundle: &PathBundle, q: u32) -> f64 {
    let n = bundle.grid.n_steps;
    let total = linalg::chunked_sum(bundle.n_paths, |j| {
        (0..=n)
            .map(|k| linalg::dot(bundle.state(j, k), bundle.state(j, k)).powi(q as i32))
            .fold(0.0, f64::max)
    });
    total / bundle.n_paths as f64
}

/// `E[zeta^p]` from a vector of weights.
pub fn weight_moment(weights: &[f64], p: f64) -> f64 {
    linalg::chunked_sum(weights.len(), |j| weights[j].powf(p)) / weights.len() as f64
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use smallvec::smallvec;

    use super::*;
    use crate::game::{lq_game, ControlBox, FeedbackControl, LqGameParams};

    /// Scalar game with unit diffusion and drift `f = u` (player one's control).
    pub(crate) fn unit_drift_game() -> GameSpec {
        let mut p = LqGameParams::reference_example();
        p.c = 0.0;
        p.terminal = [vec![0.0, 1.0], vec![0.0, 1.0]];
        p.gamma = [1.0, 0.0];
        p.rho = [0.0, 1.0];
        let mut g = lq_game(&p).unwrap();
        g.running_cost = [Arc::new(|_, _, _, _| 0.0), Arc::new(|_, _, _, _| 0.0)];
        g
    }

    fn constant_pair(u: f64, v: f64) -> FeedbackPair {
        [
            FeedbackControl::constant("u", smallvec![u]),
            FeedbackControl::constant("v", smallvec![v]),
        ]
    }

    #[test]
    fn grid_knots() {
        let g = TimeGrid::new(0.0, 1.0, 10).unwrap();
        assert_eq!(g.knot(10), 1.0);
        assert_eq!(g.left_knot(0.3), 3);
        assert_eq!(g.left_knot(0.35), 3);
        assert_eq!(g.left_knot(1.0), 10);
        assert_eq!(g.left_knot(-1.0), 0);
        assert!(TimeGrid::new(1.0, 1.0, 5).is_err());
        assert!(TimeGrid::new(0.0, 1.0, 0).is_err());
    }

    #[test]
    fn increments_are_counter_based() {
        let game = unit_drift_game();
        let grid = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let small = simulate_reference(&game, grid, &[0.0], 3, 99).unwrap();
        let big = simulate_reference(&game, grid, &[0.0], 50, 99).unwrap();
        for j in 0..3 {
            for k in [0, 7, 19] {
                assert_eq!(small.increment(j, k), big.increment(j, k));
                let fresh = brownian_increment(99, j, k, 1, grid.dt());
                assert_eq!(fresh.as_slice(), small.increment(j, k));
            }
        }
    }

    #[test]
    fn two_dim_increments_are_counter_based() {
        let mut game = unit_drift_game();
        game.dim = 3;
        game.sigma = Arc::new(|_, _| crate::linalg::identity(3));
        game.sigma_inv = Arc::new(|_, _| crate::linalg::identity(3));
        let grid = TimeGrid::new(0.0, 1.0, 8).unwrap();
        let b = simulate_reference(&game, grid, &[0.0; 3], 4, 5).unwrap();
        let fresh = brownian_increment(5, 2, 6, 3, grid.dt());
        assert_eq!(fresh.as_slice(), b.increment(2, 6));
    }

    #[test]
    fn degenerate_diffusion_keeps_paths_constant() {
        let mut game = unit_drift_game();
        game.sigma = Arc::new(|_, _| smallvec![0.0]);
        let b = simulate_reference(&game, TimeGrid::new(0.0, 1.0, 10).unwrap(), &[0.7], 20, 1).unwrap();
        for j in 0..20 {
            for k in 0..=10 {
                assert_eq!(b.state(j, k), &[0.7]);
            }
        }
    }

    #[test]
    fn zero_drift_controlled_matches_reference() {
        let mut game = unit_drift_game();
        game.drift = Arc::new(|_, _, _, _| smallvec![0.0]);
        let grid = TimeGrid::new(0.0, 1.0, 16).unwrap();
        let r = simulate_reference(&game, grid, &[0.2], 64, 8).unwrap();
        let c = simulate_controlled(&game, grid, &[0.2], &constant_pair(0.5, 0.0), &ZeroGradient { dim: 1 }, 64, 8)
            .unwrap();
        for j in 0..64 {
            assert_eq!(r.state(j, 16), c.state(j, 16));
        }
    }

    #[test]
    fn nonfinite_sigma_aborts_with_location() {
        let mut game = unit_drift_game();
        game.sigma = Arc::new(|t, _| smallvec![if t > 0.45 { f64::NAN } else { 1.0 }]);
        let err = simulate_reference(&game, TimeGrid::new(0.0, 1.0, 10).unwrap(), &[0.0], 3, 0).unwrap_err();
        assert!(matches!(err, Error::Simulation { path: 0, step: 5, .. }), "{err}");
    }

    #[test]
    fn zero_eta_gives_unit_weights() {
        let mut game = unit_drift_game();
        game.drift = Arc::new(|_, _, _, _| smallvec![0.0]);
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let b = simulate_reference(&game, grid, &[0.0], 100, 2).unwrap();
        let w = girsanov_weight(&game, &b, &constant_pair(0.4, 0.0), &ZeroGradient { dim: 1 }).unwrap();
        assert!(w.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn zero_increment_path_weight() {
        let game = unit_drift_game();
        let mut game0 = game.clone();
        game0.sigma = Arc::new(|_, _| smallvec![0.0]);
        let grid = TimeGrid::new(0.0, 2.0, 10).unwrap();
        let mut b = simulate_reference(&game0, grid, &[0.0], 1, 2).unwrap();
        b.increments.iter_mut().for_each(|v| *v = 0.0);
        let c = 0.6;
        let w = girsanov_weight(&game, &b, &constant_pair(c, 0.0), &ZeroGradient { dim: 1 }).unwrap();
        let expected = (-c * c * 2.0 / 2.0_f64).exp();
        assert!((w[0] - expected).abs() < 1e-14, "{} vs {expected}", w[0]);
    }

    #[test]
    fn controlled_bundle_rejected_for_weights() {
        let game = unit_drift_game();
        let grid = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let pair = constant_pair(0.1, 0.0);
        let c = simulate_controlled(&game, grid, &[0.0], &pair, &ZeroGradient { dim: 1 }, 5, 0).unwrap();
        assert!(matches!(
            girsanov_weight(&game, &c, &pair, &ZeroGradient { dim: 1 }),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn x0_must_match_dimension() {
        let game = unit_drift_game();
        let grid = TimeGrid::new(0.0, 1.0, 4).unwrap();
        assert!(simulate_reference(&game, grid, &[0.0, 1.0], 5, 0).is_err());
        assert!(simulate_reference(&game, grid, &[0.0], 0, 0).is_err());
    }

    #[test]
    fn box_sampling_stays_inside() {
        let b = ControlBox::new(&[0.0, -1.0], &[1.0, 1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert!(b.contains(&b.sample(&mut rng), 0.0));
        }
    }
}
