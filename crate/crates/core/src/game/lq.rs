//! The two built-in games: the scalar linear-quadratic game and its
//! geometric-Brownian-motion variant.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use smallvec::smallvec;

use super::{ControlBox, FeedbackControl, FeedbackPair, GameSpec, GrowthConstants, ResponseFn};
use crate::error::{Error, Result};
use crate::linalg::{MatrixBuf, Vector};

/// Clamp to `[-1, 1]`.
pub fn clamp_unit(eta: f64) -> f64 {
    eta.clamp(-1.0, 1.0)
}

/// `min(1, max(0, eta))`.
pub fn positive_part_capped(eta: f64) -> f64 {
    eta.clamp(0.0, 1.0)
}

/// Coefficients of the scalar game with drift `a x + b u + c v`, running
/// costs `theta_i x^{p_i} + gamma_i u^2 + rho_i v^2` and polynomial terminal
/// costs. Controls live in `U = [-1, 1]`, `V = [0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LqGameParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub theta: [f64; 2],
    pub p: [u32; 2],
    pub gamma: [f64; 2],
    pub rho: [f64; 2],
    /// `g^i(x) = sum_k terminal[i][k] x^k`.
    pub terminal: [Vec<f64>; 2],
    pub horizon: f64,
}

impl LqGameParams {
    /// `a = 0, b = c = 1, theta = 0, gamma_1 = rho_2 = 1, gamma_2 = rho_1 = 0.1,
    /// g^i(x) = x^2, T = 1`.
    pub fn reference_example() -> Self {
        LqGameParams {
            a: 0.0,
            b: 1.0,
            c: 1.0,
            theta: [0.0, 0.0],
            p: [2, 2],
            gamma: [1.0, 0.1],
            rho: [0.1, 1.0],
            terminal: [vec![0.0, 0.0, 1.0], vec![0.0, 0.0, 1.0]],
            horizon: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let scalars = [self.a, self.b, self.c, self.horizon]
            .into_iter()
            .chain(self.theta)
            .chain(self.gamma)
            .chain(self.rho)
            .chain(self.terminal.iter().flatten().copied());
        if scalars.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("LQ coefficients must be finite".into()));
        }
        if !(self.gamma[0] > 0.0) {
            return Err(Error::Config("gamma_1 must be > 0 (u* divides by 2 gamma_1)".into()));
        }
        if !(self.rho[1] > 0.0) {
            return Err(Error::Config("rho_2 must be > 0 (v* divides by 2 rho_2)".into()));
        }
        if self.gamma.iter().chain(&self.rho).any(|w| *w < 0.0) {
            return Err(Error::Config("quadratic control weights must be >= 0".into()));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::Config("horizon must be > 0".into()));
        }
        Ok(())
    }

    fn terminal_degree(&self) -> usize {
        self.terminal
            .iter()
            .map(|c| c.iter().rposition(|v| *v != 0.0).unwrap_or(0))
            .max()
            .unwrap_or(0)
    }

    fn growth(&self, eta_bound: f64, drift_bound: f64) -> GrowthConstants {
        let gamma = (self.p[0].max(self.p[1]) as f64)
            .max(self.terminal_degree() as f64)
            .max(1.0);
        // |x|^k <= 1 + |x|^gamma for k <= gamma, so coefficient sums bound both costs.
        let running = (0..2)
            .map(|i| self.theta[i].abs() + self.gamma[i] + self.rho[i])
            .fold(0.0, f64::max);
        let terminal = self
            .terminal
            .iter()
            .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max);
        GrowthConstants {
            drift: drift_bound,
            eta: eta_bound,
            cost: running.max(terminal).max(f64::MIN_POSITIVE),
            gamma,
        }
    }

    fn costs(&self) -> ([super::CostFn; 2], [super::TerminalFn; 2]) {
        let running = [0, 1].map(|i| {
            let (theta, p, gamma, rho) = (self.theta[i], self.p[i] as i32, self.gamma[i], self.rho[i]);
            Arc::new(move |_t: f64, x: &[f64], u: &[f64], v: &[f64]| {
                theta * x[0].powi(p) + gamma * u[0] * u[0] + rho * v[0] * v[0]
            }) as super::CostFn
        });
        let terminal = [0, 1].map(|i| {
            let coeffs = self.terminal[i].clone();
            Arc::new(move |x: &[f64]| coeffs.iter().rev().fold(0.0, |acc, c| acc * x[0] + c))
                as super::TerminalFn
        });
        (running, terminal)
    }
}

fn scalar_response(map: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> ResponseFn {
    Arc::new(move |_t, _x, z1: &[f64], z2: &[f64]| -> Vector { smallvec![map(z1[0], z2[0])] })
}

/// `u*(z1, z2) = clamp_unit(-b z1 / (2 gamma_1))`, `v*(z1, z2) = positive_part_capped(-c z2 / (2 rho_2))`.
pub fn lq_feedback(params: &LqGameParams) -> Result<FeedbackPair> {
    let (u, v) = lq_response_maps(params.b, params.c, params)?;
    Ok([
        FeedbackControl::from_arc("lq u*", u),
        FeedbackControl::from_arc("lq v*", v),
    ])
}

fn lq_response_maps(b: f64, c: f64, params: &LqGameParams) -> Result<(ResponseFn, ResponseFn)> {
    let (g1, r2) = (params.gamma[0], params.rho[1]);
    if g1 == 0.0 || r2 == 0.0 {
        return Err(Error::Config(
            "gamma_1 and rho_2 must be non-zero for the LQ feedback".into(),
        ));
    }
    let u = scalar_response(move |z1, _| clamp_unit(-b * z1 / (2.0 * g1)));
    let v = scalar_response(move |_, z2| positive_part_capped(-c * z2 / (2.0 * r2)));
    Ok((u, v))
}

fn lq_boxes() -> [ControlBox; 2] {
    [ControlBox::interval(-1.0, 1.0), ControlBox::interval(0.0, 1.0)]
}

/// Scalar LQ game driven by `dX = dB` under the reference measure.
pub fn lq_game(params: &LqGameParams) -> Result<GameSpec> {
    params.validate()?;
    let (a, b, c) = (params.a, params.b, params.c);
    let (running, terminal) = params.costs();
    let (u, v) = lq_response_maps(b, c, params)?;
    // |f| <= |a||x| + |b| + |c| (|u| <= 1, |v| <= 1)
    let c3 = a.abs().max(b.abs() + c.abs()).max(f64::MIN_POSITIVE);
    Ok(GameSpec {
        name: "lq".into(),
        dim: 1,
        horizon: params.horizon,
        sigma: Arc::new(|_, _| -> MatrixBuf { smallvec![1.0] }),
        sigma_inv: Arc::new(|_, _| -> MatrixBuf { smallvec![1.0] }),
        drift: Arc::new(move |_, x, u, v| -> Vector { smallvec![a * x[0] + b * u[0] + c * v[0]] }),
        running_cost: running,
        terminal_cost: terminal,
        control_boxes: lq_boxes(),
        best_response: Some([u, v]),
        growth: params.growth(c3, c3),
        sample_box: ControlBox::interval(-3.0, 3.0),
    })
}

/// Game driven by `dX = X dB` with drift `f = x (u + v)`, so that
/// `sigma^{-1} f = u + v`. The drift coefficients `a, b, c` are ignored.
pub fn gbm_extension(params: &LqGameParams) -> Result<GameSpec> {
    params.validate()?;
    let (running, terminal) = params.costs();
    let (u, v) = lq_response_maps(1.0, 1.0, params)?;
    Ok(GameSpec {
        name: "gbm_extension".into(),
        dim: 1,
        horizon: params.horizon,
        sigma: Arc::new(|_, x| -> MatrixBuf { smallvec![x[0]] }),
        sigma_inv: Arc::new(|_, x| -> MatrixBuf { smallvec![1.0 / x[0]] }),
        drift: Arc::new(|_, x, u, v| -> Vector { smallvec![x[0] * (u[0] + v[0])] }),
        running_cost: running,
        terminal_cost: terminal,
        control_boxes: lq_boxes(),
        best_response: Some([u, v]),
        growth: params.growth(2.0, 2.0),
        sample_box: ControlBox::interval(0.05, 4.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::Player;

    #[test]
    fn clamp_unit_values() {
        assert_eq!(clamp_unit(-2.0), -1.0);
        assert_eq!(clamp_unit(0.5), 0.5);
        assert_eq!(clamp_unit(3.0), 1.0);
    }

    #[test]
    fn positive_part_capped_values() {
        assert_eq!(positive_part_capped(-1.0), 0.0);
        assert_eq!(positive_part_capped(0.5), 0.5);
        assert_eq!(positive_part_capped(2.0), 1.0);
    }

    #[test]
    fn lq_feedback_substitution() {
        let fb = lq_feedback(&LqGameParams::reference_example()).unwrap();
        // b = 1, gamma_1 = 1, z1 = 1 -> clamp_unit(-0.5)
        assert_eq!(fb[0].eval(0.0, &[0.0], &[1.0], &[0.0])[0], -0.5);
        // c = 1, rho_2 = 1, z2 = -1 -> positive_part_capped(0.5)
        assert_eq!(fb[1].eval(0.0, &[0.0], &[0.0], &[-1.0])[0], 0.5);
    }

    #[test]
    fn lq_feedback_rejects_zero_weights() {
        let mut p = LqGameParams::reference_example();
        p.gamma[0] = 0.0;
        assert!(matches!(lq_feedback(&p), Err(Error::Config(_))));
        let mut p = LqGameParams::reference_example();
        p.rho[1] = 0.0;
        assert!(matches!(lq_feedback(&p), Err(Error::Config(_))));
    }

    fn scalar_params(a: f64, b: f64, c: f64, theta: f64, gamma: f64, rho: f64) -> LqGameParams {
        LqGameParams {
            a,
            b,
            c,
            theta: [theta, 0.0],
            p: [2, 2],
            gamma: [gamma, 0.1],
            rho: [rho, 1.0],
            terminal: [vec![0.0], vec![0.0]],
            horizon: 1.0,
        }
    }

    #[test]
    fn hamiltonian_quadratic_in_own_control() {
        let game = lq_game(&scalar_params(0.0, 1.0, 0.0, 0.0, 1.0, 0.0)).unwrap();
        for v in [0.0, 0.3, 1.0] {
            let h = game
                .hamiltonian(Player::One, 0.2, &[0.7], &[1.0], &[-0.5], &[v])
                .unwrap();
            assert_eq!(h, -0.25);
        }
    }

    #[test]
    fn hamiltonian_with_state_drift() {
        let game = lq_game(&scalar_params(1.0, 0.0, 0.0, 0.0, 1.0, 0.0)).unwrap();
        let h = game
            .hamiltonian(Player::One, 0.0, &[2.0], &[3.0], &[1.0], &[0.0])
            .unwrap();
        assert_eq!(h, 7.0);
    }

    #[test]
    fn hamiltonian_zero_gradient_zero_cost() {
        let game = lq_game(&scalar_params(0.4, 1.0, 1.0, 0.0, 1e-300, 0.0)).unwrap();
        let h = game
            .hamiltonian(Player::One, 0.5, &[1.3], &[0.0], &[0.0], &[0.9])
            .unwrap();
        assert_eq!(h, 0.0);
    }

    #[test]
    fn terminal_polynomial_horner() {
        let mut p = LqGameParams::reference_example();
        p.terminal[0] = vec![1.0, -2.0, 3.0];
        let game = lq_game(&p).unwrap();
        assert_eq!((game.terminal_cost[0])(&[2.0]), 1.0 - 4.0 + 12.0);
        assert_eq!(game.growth.gamma, 2.0);
    }

    #[test]
    fn gbm_eta_is_control_sum() {
        let game = gbm_extension(&LqGameParams::reference_example()).unwrap();
        let eta = game.eta(0.3, &[2.5], &[-0.25], &[0.75]);
        assert!((eta[0] - 0.5).abs() < 1e-15);
    }
}
