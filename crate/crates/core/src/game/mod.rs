//! Two-player game description: dynamics, costs, control sets and the
//! Hamiltonians `H_i(t, x, p, u, v) = p . sigma^{-1}(t, x) f(t, x, u, v) + h_i(t, x, u, v)`.

mod affine;
mod isaacs;
mod lq;

pub use affine::{AffineQuadraticParams, PlayerCosts};
pub use isaacs::{best_response_grid, check_isaacs, IsaacsReport};
pub use lq::{clamp_unit, gbm_extension, lq_feedback, lq_game, positive_part_capped, LqGameParams};

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, MatrixBuf, Vector};

pub type MatrixFn = Arc<dyn Fn(f64, &[f64]) -> MatrixBuf + Send + Sync>;
pub type DriftFn = Arc<dyn Fn(f64, &[f64], &[f64], &[f64]) -> Vector + Send + Sync>;
pub type CostFn = Arc<dyn Fn(f64, &[f64], &[f64], &[f64]) -> f64 + Send + Sync>;
pub type TerminalFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
/// `(t, x, z1, z2) -> control`.
pub type ResponseFn = Arc<dyn Fn(f64, &[f64], &[f64], &[f64]) -> Vector + Send + Sync>;

/// Tolerance used when checking that a control lies in its box.
pub const BOX_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Player {
    One,
    Two,
}

impl Player {
    pub const BOTH: [Player; 2] = [Player::One, Player::Two];

    pub fn index(self) -> usize {
        match self {
            Player::One => 0,
            Player::Two => 1,
        }
    }

    pub fn other(self) -> Player {
        match self {
            Player::One => Player::Two,
            Player::Two => Player::One,
        }
    }

    /// 1-based label used in reports.
    pub fn number(self) -> usize {
        self.index() + 1
    }
}

/// Axis-aligned box `[lo, hi]` used for control sets and sampling regions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlBox {
    pub lo: Vector,
    pub hi: Vector,
}

impl ControlBox {
    pub fn new(lo: &[f64], hi: &[f64]) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::Config(format!(
                "box bounds must be non-empty and of equal length (got {} and {})",
                lo.len(),
                hi.len()
            )));
        }
        if lo.iter().zip(hi).any(|(l, h)| !(l <= h) || !l.is_finite() || !h.is_finite()) {
            return Err(Error::Config(format!("invalid box bounds {lo:?} / {hi:?}")));
        }
        Ok(ControlBox {
            lo: lo.into(),
            hi: hi.into(),
        })
    }

    pub fn interval(lo: f64, hi: f64) -> Self {
        ControlBox::new(&[lo], &[hi]).expect("valid interval")
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn width(&self, j: usize) -> f64 {
        self.hi[j] - self.lo[j]
    }

    pub fn contains(&self, u: &[f64], tol: f64) -> bool {
        u.len() == self.dim()
            && u
                .iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(x, (l, h))| *x >= l - tol && *x <= h + tol)
    }

    pub fn clamp(&self, u: &[f64]) -> Vector {
        u.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(x, (l, h))| x.clamp(*l, *h))
            .collect()
    }

    pub fn midpoint(&self) -> Vector {
        self.lo.iter().zip(&self.hi).map(|(l, h)| 0.5 * (l + h)).collect()
    }

    /// Point `lo + s (hi - lo)` on the main diagonal.
    pub fn diagonal_point(&self, s: f64) -> Vector {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| l + s * (h - l))
            .collect()
    }

    /// Uniform tensor grid with `n` points per coordinate, in lexicographic
    /// order (first coordinate slowest).
    pub fn grid(&self, n: usize) -> Vec<Vector> {
        let d = self.dim();
        let axis = |j: usize, k: usize| -> f64 {
            if n == 1 {
                0.5 * (self.lo[j] + self.hi[j])
            } else {
                self.lo[j] + self.width(j) * k as f64 / (n - 1) as f64
            }
        };
        let total = n.pow(d as u32);
        let mut out = Vec::with_capacity(total);
        for flat in 0..total {
            let mut rem = flat;
            let mut idx = vec![0usize; d];
            for j in (0..d).rev() {
                idx[j] = rem % n;
                rem /= n;
            }
            out.push(idx.iter().enumerate().map(|(j, &k)| axis(j, k)).collect());
        }
        out
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vector {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| if h > l { rng.random_range(*l..*h) } else { *l })
            .collect()
    }
}

/// Declared growth constants of (A2). They are configuration, spot-checked by
/// [`GameSpec::validate`], never derived.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthConstants {
    /// `|f(t,x,u,v)| <= drift (1 + |x|)`.
    pub drift: f64,
    /// `|sigma^{-1} f| <= eta (1 + |x|)`.
    pub eta: f64,
    /// `|h_i|, |g^i| <= cost (1 + |x|^gamma)`.
    pub cost: f64,
    /// Polynomial growth exponent, at least 1.
    pub gamma: f64,
}

/// A measurable feedback `(t, x, z1, z2) -> control`.
#[derive(Clone)]
pub struct FeedbackControl {
    label: String,
    map: ResponseFn,
}

impl FeedbackControl {
    pub fn new<F>(label: impl Into<String>, map: F) -> Self
    where
        F: Fn(f64, &[f64], &[f64], &[f64]) -> Vector + Send + Sync + 'static,
    {
        FeedbackControl {
            label: label.into(),
            map: Arc::new(map),
        }
    }

    pub fn from_arc(label: impl Into<String>, map: ResponseFn) -> Self {
        FeedbackControl {
            label: label.into(),
            map,
        }
    }

    pub fn constant(label: impl Into<String>, value: Vector) -> Self {
        FeedbackControl::new(label, move |_, _, _, _| value.clone())
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn eval(&self, t: f64, x: &[f64], z1: &[f64], z2: &[f64]) -> Vector {
        (self.map)(t, x, z1, z2)
    }
}

impl fmt::Debug for FeedbackControl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FeedbackControl")
            .field("label", &self.label)
            .finish_non_exhaustive()
    }
}

/// Feedbacks for player one and player two.
pub type FeedbackPair = [FeedbackControl; 2];

/// Full description of a two-player game.
#[derive(Clone)]
pub struct GameSpec {
    pub name: String,
    pub dim: usize,
    pub horizon: f64,
    pub sigma: MatrixFn,
    pub sigma_inv: MatrixFn,
    pub drift: DriftFn,
    pub running_cost: [CostFn; 2],
    pub terminal_cost: [TerminalFn; 2],
    pub control_boxes: [ControlBox; 2],
    pub best_response: Option<[ResponseFn; 2]>,
    pub growth: GrowthConstants,
    /// Region of the state space used for random spot checks.
    pub sample_box: ControlBox,
}

impl fmt::Debug for GameSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GameSpec")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("horizon", &self.horizon)
            .field("control_boxes", &self.control_boxes)
            .field("has_best_response", &self.best_response.is_some())
            .field("growth", &self.growth)
            .finish_non_exhaustive()
    }
}

impl GameSpec {
    pub fn control_box(&self, player: Player) -> &ControlBox {
        &self.control_boxes[player.index()]
    }

    /// `sigma^{-1}(t, x) f(t, x, u, v)`, the Girsanov kernel.
    pub fn eta(&self, t: f64, x: &[f64], u: &[f64], v: &[f64]) -> Vector {
        let f = (self.drift)(t, x, u, v);
        let sinv = (self.sigma_inv)(t, x);
        linalg::mat_vec(&sinv, &f)
    }

    /// Hamiltonian without control-set checks, for inner loops.
    pub fn hamiltonian_unchecked(
        &self,
        player: Player,
        t: f64,
        x: &[f64],
        p: &[f64],
        u: &[f64],
        v: &[f64],
    ) -> f64 {
        let eta = self.eta(t, x, u, v);
        linalg::dot(p, &eta) + (self.running_cost[player.index()])(t, x, u, v)
    }

    pub fn hamiltonian(
        &self,
        player: Player,
        t: f64,
        x: &[f64],
        p: &[f64],
        u: &[f64],
        v: &[f64],
    ) -> Result<f64> {
        self.check_point(x, p)?;
        for (which, (c, b)) in [u, v].iter().zip(&self.control_boxes).enumerate() {
            if !b.contains(c, BOX_TOL) {
                return Err(Error::Domain(format!(
                    "control of player {} = {c:?} lies outside [{:?}, {:?}]",
                    which + 1,
                    b.lo,
                    b.hi
                )));
            }
        }
        Ok(self.hamiltonian_unchecked(player, t, x, p, u, v))
    }

    fn check_point(&self, x: &[f64], p: &[f64]) -> Result<()> {
        if x.len() != self.dim || p.len() != self.dim {
            return Err(Error::Domain(format!(
                "state/gradient dimension mismatch: expected {}, got {} and {}",
                self.dim,
                x.len(),
                p.len()
            )));
        }
        Ok(())
    }

    pub fn best_responses(&self) -> Result<&[ResponseFn; 2]> {
        self.best_response
            .as_ref()
            .ok_or_else(|| Error::Config(format!("game `{}` has no best-response maps", self.name)))
    }

    /// Equilibrium feedbacks `(u1*, u2*)` as [`FeedbackControl`]s.
    pub fn equilibrium_feedbacks(&self) -> Result<FeedbackPair> {
        let br = self.best_responses()?;
        Ok([
            FeedbackControl::from_arc("equilibrium u1*", br[0].clone()),
            FeedbackControl::from_arc("equilibrium u2*", br[1].clone()),
        ])
    }

    /// `H_i(t, x, z^i, u1*(t,x,z1,z2), u2*(t,x,z1,z2))` for both players.
    pub fn equilibrium_hamiltonians(&self, t: f64, x: &[f64], z1: &[f64], z2: &[f64]) -> Result<[f64; 2]> {
        let br = self.best_responses()?;
        let u = (br[0])(t, x, z1, z2);
        let v = (br[1])(t, x, z1, z2);
        Ok(self.hamiltonians_at(t, x, z1, z2, &u, &v))
    }

    pub(crate) fn hamiltonians_at(
        &self,
        t: f64,
        x: &[f64],
        z1: &[f64],
        z2: &[f64],
        u: &[f64],
        v: &[f64],
    ) -> [f64; 2] {
        let eta = self.eta(t, x, u, v);
        [
            linalg::dot(z1, &eta) + (self.running_cost[0])(t, x, u, v),
            linalg::dot(z2, &eta) + (self.running_cost[1])(t, x, u, v),
        ]
    }

    /// Spot-checks the declared assumptions at random points of
    /// `[0, T] x sample_box x U1 x U2`.
    pub fn validate(&self, samples: usize, seed: u64) -> Result<SpecValidation> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = self.dim;
        let mut report = SpecValidation {
            samples,
            max_identity_error: 0.0,
            max_drift_ratio: 0.0,
            max_eta_ratio: 0.0,
            max_cost_ratio: 0.0,
            best_response_outside: 0,
            ellipticity_min: f64::INFINITY,
            ellipticity_max: 0.0,
            pass: false,
        };
        let zbox = ControlBox::new(&vec![-5.0; m], &vec![5.0; m])?;
        let id = linalg::identity(m);
        for _ in 0..samples {
            let t = rng.random_range(0.0..=self.horizon);
            let x = self.sample_box.sample(&mut rng);
            let u = self.control_boxes[0].sample(&mut rng);
            let v = self.control_boxes[1].sample(&mut rng);
            let s = (self.sigma)(t, &x);
            let si = (self.sigma_inv)(t, &x);
            let prod = linalg::mat_mul(&s, &si, m);
            let err = prod.iter().zip(&id).fold(0.0_f64, |e, (a, b)| e.max((a - b).abs()));
            report.max_identity_error = report.max_identity_error.max(err);
            let (lo, hi) = linalg::gram_eigen_range(&s, m);
            report.ellipticity_min = report.ellipticity_min.min(lo);
            report.ellipticity_max = report.ellipticity_max.max(hi);

            let xn = linalg::norm(&x);
            let f = (self.drift)(t, &x, &u, &v);
            report.max_drift_ratio = report
                .max_drift_ratio
                .max(linalg::norm(&f) / (self.growth.drift * (1.0 + xn)));
            let eta = linalg::mat_vec(&si, &f);
            report.max_eta_ratio = report
                .max_eta_ratio
                .max(linalg::norm(&eta) / (self.growth.eta * (1.0 + xn)));
            let poly = self.growth.cost * (1.0 + xn.powf(self.growth.gamma));
            for i in 0..2 {
                let h = (self.running_cost[i])(t, &x, &u, &v).abs();
                let g = (self.terminal_cost[i])(&x).abs();
                report.max_cost_ratio = report.max_cost_ratio.max(h.max(g) / poly);
            }
            if let Some(br) = &self.best_response {
                let z1 = zbox.sample(&mut rng);
                let z2 = zbox.sample(&mut rng);
                for (b, r) in self.control_boxes.iter().zip(br.iter()) {
                    if !b.contains(&r(t, &x, &z1, &z2), BOX_TOL) {
                        report.best_response_outside += 1;
                    }
                }
            }
        }
        report.pass = report.max_identity_error <= 1e-10
            && report.max_drift_ratio <= 1.0
            && report.max_eta_ratio <= 1.0
            && report.max_cost_ratio <= 1.0
            && report.best_response_outside == 0
            && self.growth.gamma >= 1.0;
        Ok(report)
    }
}

/// Outcome of [`GameSpec::validate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecValidation {
    pub samples: usize,
    /// `max |sigma sigma^{-1} - I|` entrywise.
    pub max_identity_error: f64,
    /// Largest `|f| / (C3 (1 + |x|))`; at most 1 when the declared constant holds.
    pub max_drift_ratio: f64,
    pub max_eta_ratio: f64,
    pub max_cost_ratio: f64,
    pub best_response_outside: usize,
    /// Sampled eigenvalue range of `sigma sigma^T` (uniform ellipticity).
    pub ellipticity_min: f64,
    pub ellipticity_max: f64,
    pub pass: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_lexicographic() {
        let b = ControlBox::new(&[0.0, 10.0], &[1.0, 11.0]).unwrap();
        let g = b.grid(2);
        assert_eq!(g.len(), 4);
        assert_eq!(g[0].as_slice(), &[0.0, 10.0]);
        assert_eq!(g[1].as_slice(), &[0.0, 11.0]);
        assert_eq!(g[2].as_slice(), &[1.0, 10.0]);
    }

    #[test]
    fn grid_hits_exact_interior_points() {
        let b = ControlBox::interval(-1.0, 1.0);
        let g = b.grid(201);
        assert_eq!(g[50][0], -0.5);
        assert_eq!(g[100][0], 0.0);
        assert_eq!(g[200][0], 1.0);
    }

    #[test]
    fn rejects_inverted_box() {
        assert!(ControlBox::new(&[1.0], &[0.0]).is_err());
        assert!(ControlBox::new(&[], &[]).is_err());
    }

    #[test]
    fn hamiltonian_rejects_out_of_box_control() {
        let game = lq_game(&LqGameParams::reference_example()).unwrap();
        let err = game
            .hamiltonian(Player::One, 0.0, &[0.0], &[1.0], &[1.5], &[0.5])
            .unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
        let err = game
            .hamiltonian(Player::One, 0.0, &[0.0], &[1.0], &[0.5], &[-0.1])
            .unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn builtin_games_validate() {
        for game in [
            lq_game(&LqGameParams::reference_example()).unwrap(),
            gbm_extension(&LqGameParams::reference_example()).unwrap(),
        ] {
            let r = game.validate(2000, 3).unwrap();
            assert!(r.pass, "{}: {r:?}", game.name);
            assert!(r.ellipticity_min > 0.0);
        }
    }
}
