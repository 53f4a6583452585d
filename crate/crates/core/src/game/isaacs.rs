//! Brute-force oracle for the generalized Isaacs condition.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ControlBox, GameSpec, Player, BOX_TOL};
use crate::error::{Error, Result};
use crate::linalg::Vector;

fn order_controls<'a>(player: Player, own: &'a [f64], other: &'a [f64]) -> (&'a [f64], &'a [f64]) {
    match player {
        Player::One => (own, other),
        Player::Two => (other, own),
    }
}

/// Hamiltonian values of `player` over the uniform grid of its own box.
fn grid_values(
    spec: &GameSpec,
    player: Player,
    t: f64,
    x: &[f64],
    z: &[f64],
    other: &[f64],
    grid: &[Vector],
) -> Vec<f64> {
    grid.iter()
        .map(|g| {
            let (u, v) = order_controls(player, g, other);
            spec.hamiltonian_unchecked(player, t, x, z, u, v)
        })
        .collect()
}

/// Largest change of the objective between neighbouring grid points.
fn grid_slack(values: &[f64], n: usize, d: usize) -> f64 {
    let mut slack = 0.0_f64;
    let mut stride = 1;
    for _ in 0..d {
        for (flat, val) in values.iter().enumerate() {
            if (flat / stride) % n + 1 < n {
                slack = slack.max((values[flat + stride] - val).abs());
            }
        }
        stride *= n;
    }
    slack
}

fn argmin_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = k;
        }
    }
    best
}

/// Argmin of `u -> H_i(t, x, z_i, u, opponent)` over a uniform grid with
/// `grid_n` points per coordinate; ties go to the lexicographically smallest
/// grid point.
pub fn best_response_grid(
    spec: &GameSpec,
    player: Player,
    t: f64,
    x: &[f64],
    z_i: &[f64],
    opponent_value: &[f64],
    grid_n: usize,
) -> Result<Vector> {
    if grid_n < 2 {
        return Err(Error::Config(format!("grid_n must be >= 2, got {grid_n}")));
    }
    if x.len() != spec.dim || z_i.len() != spec.dim {
        return Err(Error::Domain("state/gradient dimension mismatch".into()));
    }
    let opp_box = spec.control_box(player.other());
    if !opp_box.contains(opponent_value, BOX_TOL) {
        return Err(Error::Domain(format!(
            "opponent control {opponent_value:?} outside its box"
        )));
    }
    let grid = spec.control_box(player).grid(grid_n);
    let values = grid_values(spec, player, t, x, z_i, opponent_value, &grid);
    Ok(grid[argmin_first(&values)].clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsaacsSample {
    pub t: f64,
    pub x: Vector,
    pub z1: Vector,
    pub z2: Vector,
    /// `H_i(u*, v*) - min_grid H_i(., opponent*)`, per player.
    pub violation: [f64; 2],
    pub slack: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsaacsReport {
    pub sample_count: usize,
    pub grid_n: usize,
    pub max_violation: f64,
    pub max_slack: f64,
    pub failures: usize,
    pub samples: Vec<IsaacsSample>,
    pub pass: bool,
}

/// Absolute tolerance added to the grid slack.
pub const ISAACS_TOL: f64 = 1e-9;

/// Checks `H1(u*, v*) <= H1(u, v*)` and `H2(u*, v*) <= H2(u*, v)` against
/// every grid control at random `(t, x, z1, z2)`.
pub fn check_isaacs(spec: &GameSpec, sample_count: usize, grid_n: usize, seed: u64) -> Result<IsaacsReport> {
    let br = spec.best_responses()?;
    if grid_n < 2 {
        return Err(Error::Config(format!("grid_n must be >= 2, got {grid_n}")));
    }
    let m = spec.dim;
    let zbox = ControlBox::new(&vec![-5.0; m], &vec![5.0; m])?;
    let grids = [spec.control_boxes[0].grid(grid_n), spec.control_boxes[1].grid(grid_n)];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(sample_count);
    let mut failures = 0;
    for _ in 0..sample_count {
        let t = rng.random_range(0.0..=spec.horizon);
        let x = spec.sample_box.sample(&mut rng);
        let z1 = zbox.sample(&mut rng);
        let z2 = zbox.sample(&mut rng);
        let u = br[0](t, &x, &z1, &z2);
        let v = br[1](t, &x, &z1, &z2);
        let at_star = spec.hamiltonians_at(t, &x, &z1, &z2, &u, &v);
        let mut violation = [0.0; 2];
        let mut slack = [0.0; 2];
        for player in Player::BOTH {
            let i = player.index();
            let (z, other) = match player {
                Player::One => (&z1, &v),
                Player::Two => (&z2, &u),
            };
            let vals = grid_values(spec, player, t, &x, z, other, &grids[i]);
            let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            violation[i] = at_star[i] - min;
            slack[i] = grid_slack(&vals, grid_n, spec.control_boxes[i].dim());
        }
        let in_box = spec.control_boxes[0].contains(&u, BOX_TOL) && spec.control_boxes[1].contains(&v, BOX_TOL);
        if !in_box || (0..2).any(|i| violation[i] > ISAACS_TOL + slack[i]) {
            failures += 1;
        }
        samples.push(IsaacsSample {
            t,
            x,
            z1,
            z2,
            violation,
            slack,
        });
    }
    let max_violation = samples
        .iter()
        .flat_map(|s| s.violation)
        .fold(0.0_f64, f64::max);
    let max_slack = samples.iter().flat_map(|s| s.slack).fold(0.0_f64, f64::max);
    Ok(IsaacsReport {
        sample_count,
        grid_n,
        max_violation,
        max_slack,
        failures,
        samples,
        pass: failures == 0,
    })
}
