//! Games given by explicit coefficient tables: constant diffusion, affine
//! drift `A x + B u + C v`, separable running costs and polynomial terminal
//! costs. Quadratic control weights give clamped-linear best responses; a
//! zero weight gives a bang-bang selector.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{ControlBox, CostFn, GameSpec, GrowthConstants, ResponseFn, TerminalFn};
use crate::error::{Error, Result};
use crate::linalg::{self, MatrixBuf, Vector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlayerCosts {
    /// Weights of `x_j^power` in the running cost.
    pub theta: Vec<f64>,
    pub power: u32,
    /// Weights of `u_k^2`.
    pub u_weight: Vec<f64>,
    /// Weights of `v_k^2`.
    pub v_weight: Vec<f64>,
    /// `g(x) = sum_j sum_k terminal[j][k] x_j^k`.
    pub terminal: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineQuadraticParams {
    pub dim: usize,
    pub horizon: f64,
    /// Constant diffusion matrix, row-major rows.
    pub sigma: Vec<Vec<f64>>,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub controls: [ControlBox; 2],
    pub players: [PlayerCosts; 2],
}

fn flatten(name: &str, rows: &[Vec<f64>], n_rows: usize, n_cols: usize) -> Result<Vec<f64>> {
    if rows.len() != n_rows || rows.iter().any(|r| r.len() != n_cols) {
        return Err(Error::Config(format!("`{name}` must be a {n_rows}x{n_cols} table")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config(format!("`{name}` has non-finite entries")));
    }
    Ok(flat)
}

fn frobenius(a: &[f64]) -> f64 {
    linalg::norm(a)
}

fn box_radius(b: &ControlBox) -> f64 {
    b.lo.iter()
        .zip(&b.hi)
        .map(|(l, h)| l.abs().max(h.abs()).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Minimizer of `s u + w u^2` over `[lo, hi]`, smallest point on ties.
fn separable_argmin(s: f64, w: f64, lo: f64, hi: f64) -> f64 {
    if w > 0.0 {
        (-s / (2.0 * w)).clamp(lo, hi)
    } else if s < 0.0 {
        hi
    } else {
        lo
    }
}

impl AffineQuadraticParams {
    pub fn build(&self) -> Result<GameSpec> {
        let m = self.dim;
        if m == 0 {
            return Err(Error::Config("dim must be >= 1".into()));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::Config("horizon must be a positive finite number".into()));
        }
        let (d1, d2) = (self.controls[0].dim(), self.controls[1].dim());
        let sigma: MatrixBuf = flatten("sigma", &self.sigma, m, m)?.into();
        let sigma_inv = linalg::invert(&sigma, m)
            .ok_or_else(|| Error::Config("sigma must be invertible".into()))?;
        let a = flatten("a", &self.a, m, m)?;
        let b = flatten("b", &self.b, m, d1)?;
        let c = flatten("c", &self.c, m, d2)?;
        for (i, p) in self.players.iter().enumerate() {
            let ok = p.theta.len() == m
                && p.u_weight.len() == d1
                && p.v_weight.len() == d2
                && p.terminal.len() == m;
            if !ok {
                return Err(Error::Config(format!("player {} cost tables have wrong shape", i + 1)));
            }
            if p.u_weight.iter().chain(&p.v_weight).any(|w| !(*w >= 0.0)) {
                return Err(Error::Config(format!(
                    "player {} quadratic weights must be >= 0",
                    i + 1
                )));
            }
        }

        let drift = {
            let (a, b, c) = (a.clone(), b.clone(), c.clone());
            Arc::new(move |_t: f64, x: &[f64], u: &[f64], v: &[f64]| -> Vector {
                (0..m)
                    .map(|r| {
                        linalg::dot(&a[r * m..(r + 1) * m], x)
                            + linalg::dot(&b[r * d1..(r + 1) * d1], u)
                            + linalg::dot(&c[r * d2..(r + 1) * d2], v)
                    })
                    .collect()
            })
        };

        let running = [0, 1].map(|i| {
            let p = self.players[i].clone();
            Arc::new(move |_t: f64, x: &[f64], u: &[f64], v: &[f64]| {
                let pw = p.power as i32;
                let state: f64 = p.theta.iter().zip(x).map(|(w, xj)| w * xj.powi(pw)).sum();
                let own: f64 = p.u_weight.iter().zip(u).map(|(w, uk)| w * uk * uk).sum();
                let other: f64 = p.v_weight.iter().zip(v).map(|(w, vk)| w * vk * vk).sum();
                state + own + other
            }) as CostFn
        });
        let terminal = [0, 1].map(|i| {
            let tables = self.players[i].terminal.clone();
            Arc::new(move |x: &[f64]| {
                tables
                    .iter()
                    .zip(x)
                    .map(|(coeffs, xj)| coeffs.iter().rev().fold(0.0, |acc, k| acc * xj + k))
                    .sum()
            }) as TerminalFn
        });

        // Player one minimizes (B^T sigma^{-T} z1) . u + sum w_k u_k^2, player
        // two the analogue with C; both are separable per coordinate.
        let response = |mat: Vec<f64>, dc: usize, weights: Vec<f64>, bx: ControlBox, use_z2: bool| {
            let sinv = sigma_inv.clone();
            Arc::new(move |_t: f64, _x: &[f64], z1: &[f64], z2: &[f64]| -> Vector {
                let z = if use_z2 { z2 } else { z1 };
                let w = linalg::mat_t_vec(&sinv, z);
                (0..dc)
                    .map(|k| {
                        let s: f64 = (0..m).map(|r| mat[r * dc + k] * w[r]).sum();
                        separable_argmin(s, weights[k], bx.lo[k], bx.hi[k])
                    })
                    .collect()
            }) as ResponseFn
        };
        let u_star = response(
            b.clone(),
            d1,
            self.players[0].u_weight.clone(),
            self.controls[0].clone(),
            false,
        );
        let v_star = response(
            c.clone(),
            d2,
            self.players[1].v_weight.clone(),
            self.controls[1].clone(),
            true,
        );

        let c3 = frobenius(&a)
            .max(frobenius(&b) * box_radius(&self.controls[0]) + frobenius(&c) * box_radius(&self.controls[1]))
            .max(f64::MIN_POSITIVE);
        let gamma = self
            .players
            .iter()
            .map(|p| {
                let deg = p
                    .terminal
                    .iter()
                    .map(|t| t.iter().rposition(|v| *v != 0.0).unwrap_or(0))
                    .max()
                    .unwrap_or(0);
                (p.power as usize).max(deg) as f64
            })
            .fold(1.0, f64::max);
        let cost = self
            .players
            .iter()
            .map(|p| {
                let theta: f64 = p.theta.iter().map(|v| v.abs()).sum();
                let own: f64 = p
                    .u_weight
                    .iter()
                    .enumerate()
                    .map(|(k, w)| w * self.controls[0].lo[k].abs().max(self.controls[0].hi[k].abs()).powi(2))
                    .sum();
                let other: f64 = p
                    .v_weight
                    .iter()
                    .enumerate()
                    .map(|(k, w)| w * self.controls[1].lo[k].abs().max(self.controls[1].hi[k].abs()).powi(2))
                    .sum();
                let term: f64 = p.terminal.iter().flatten().map(|v| v.abs()).sum();
                (theta + own + other).max(term)
            })
            .fold(f64::MIN_POSITIVE, f64::max);

        let sig = sigma.clone();
        let sig_inv = sigma_inv.clone();
        Ok(GameSpec {
            name: "inline".into(),
            dim: m,
            horizon: self.horizon,
            sigma: Arc::new(move |_, _| sig.clone()),
            sigma_inv: Arc::new(move |_, _| sig_inv.clone()),
            drift,
            running_cost: running,
            terminal_cost: terminal,
            control_boxes: self.controls.clone(),
            best_response: Some([u_star, v_star]),
            growth: GrowthConstants {
                drift: c3,
                eta: frobenius(&sigma_inv) * c3,
                cost,
                gamma,
            },
            sample_box: ControlBox::new(&vec![-3.0; m], &vec![3.0; m])?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{check_isaacs, Player};

    pub(crate) fn two_dim_params(u_weight: f64) -> AffineQuadraticParams {
        let costs = |uw: f64, vw: f64| PlayerCosts {
            theta: vec![0.5, 0.0],
            power: 2,
            u_weight: vec![uw],
            v_weight: vec![vw],
            terminal: vec![vec![0.0, 0.0, 1.0], vec![0.0, 1.0]],
        };
        AffineQuadraticParams {
            dim: 2,
            horizon: 1.0,
            sigma: vec![vec![1.0, 0.2], vec![0.0, 0.8]],
            a: vec![vec![-0.3, 0.0], vec![0.1, 0.0]],
            b: vec![vec![1.0], vec![0.5]],
            c: vec![vec![0.0], vec![1.0]],
            controls: [ControlBox::interval(-1.0, 1.0), ControlBox::interval(0.0, 2.0)],
            players: [costs(u_weight, 0.1), costs(0.2, 1.0)],
        }
    }

    #[test]
    fn two_dim_game_validates_and_satisfies_isaacs() {
        let game = two_dim_params(1.0).build().unwrap();
        assert!(game.validate(1000, 1).unwrap().pass);
        let r = check_isaacs(&game, 60, 101, 9).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn bang_bang_selector_satisfies_isaacs() {
        let game = two_dim_params(0.0).build().unwrap();
        let r = check_isaacs(&game, 60, 101, 4).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn hamiltonian_vanishes_without_gradient_and_cost() {
        let mut p = two_dim_params(1.0);
        for pc in p.players.iter_mut() {
            pc.theta = vec![0.0, 0.0];
            pc.u_weight = vec![0.0];
            pc.v_weight = vec![0.0];
        }
        let game = p.build().unwrap();
        for (x, u, v) in [([1.0, -2.0], 0.3, 1.1), ([0.0, 0.0], -1.0, 0.0)] {
            let h = game
                .hamiltonian(Player::Two, 0.4, &x, &[0.0, 0.0], &[u], &[v])
                .unwrap();
            assert_eq!(h, 0.0);
        }
    }

    #[test]
    fn rejects_singular_sigma() {
        let mut p = two_dim_params(1.0);
        p.sigma = vec![vec![1.0, 2.0], vec![2.0, 4.0]];
        assert!(matches!(p.build(), Err(Error::Config(_))));
    }
}
