//! Truncated, mollified and cut-off generators
//!
//! ```text
//! H_i^n(t, x, z1, z2) = psi(z1 / n, z2 / n) * (H_i*(t, phi_n(x), .) conv xi_n)(z1, z2)
//! ```
//!
//! where `H_i*(t, x, z1, z2) = H_i(t, x, z^i, u1*(t,x,z1,z2), u2*(t,x,z1,z2))`,
//! `phi_n` clamps every state coordinate to `[-n, n]`, `xi_n(w) = n^{2m} xi(n w)`
//! is a unit-mass bump and `psi` is a smooth cutoff equal to one on the unit
//! ball and zero outside the ball of radius two. `H_i^n` is bounded and
//! Lipschitz in `(z1, z2)` and tends to `H_i*` on compacts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{GameSpec, Player};
use crate::linalg::{self, Vector};
use crate::quadrature::{gauss_legendre, romberg};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MollifyParams {
    /// Truncation and cutoff level.
    pub n: u32,
    /// Quadrature nodes per `z` coordinate.
    pub quad_points: usize,
    /// Support radius of `xi` before the `1/n` scaling.
    pub mollifier_radius: f64,
}

impl MollifyParams {
    pub fn new(n: u32, quad_points: usize) -> Self {
        MollifyParams {
            n,
            quad_points,
            mollifier_radius: 1.0,
        }
    }

    pub fn with_level(self, n: u32) -> Self {
        MollifyParams { n, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 1 {
            return Err(Error::Config("mollify.n must be >= 1".into()));
        }
        if self.quad_points < 3 {
            return Err(Error::Config("mollify.quad_points must be >= 3".into()));
        }
        if !(self.mollifier_radius > 0.0 && self.mollifier_radius.is_finite()) {
            return Err(Error::Config("mollify.mollifier_radius must be > 0".into()));
        }
        Ok(())
    }
}

/// `phi_n(x)`: componentwise clamp to `[-n, n]`.
pub fn truncate_state(x: &[f64], n: u32) -> Vector {
    let n = n as f64;
    x.iter().map(|v| v.clamp(-n, n)).collect()
}

fn edge(x: f64) -> f64 {
    if x > 0.0 {
        (-1.0 / x).exp()
    } else {
        0.0
    }
}

/// C-infinity step from 1 (at `s <= 0`) to 0 (at `s >= 1`).
fn smooth_step_down(s: f64) -> f64 {
    let a = edge(1.0 - s);
    let b = edge(s);
    a / (a + b)
}

/// Cutoff `psi(y / n, z / n)`: one for `|y|^2 + |z|^2 <= n^2`, zero for
/// `|y|^2 + |z|^2 >= 4 n^2`, smooth and monotone in between (in the scaled
/// squared radius).
pub fn cutoff(y: &[f64], z: &[f64], n: u32) -> f64 {
    let nn = (n as f64) * (n as f64);
    let r2 = (linalg::dot(y, y) + linalg::dot(z, z)) / nn;
    if r2 <= 1.0 {
        1.0
    } else if r2 >= 4.0 {
        0.0
    } else {
        smooth_step_down((r2 - 1.0) / 3.0)
    }
}

/// Unnormalized bump `exp(-1 / (1 - |w / R|^2))` on the ball of radius `R`.
pub fn bump(w: &[f64], radius: f64) -> f64 {
    let s = linalg::dot(w, w) / (radius * radius);
    if s >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - s)).exp()
    }
}

/// Exact mass of [`bump`] in `dim` dimensions via its radial profile.
pub fn bump_mass(dim: usize, radius: f64) -> f64 {
    let d = dim as f64;
    // surface area of the unit sphere in R^d
    let area = 2.0 * std::f64::consts::PI.powf(d / 2.0) / gamma_fn(d / 2.0);
    let radial = romberg(
        |r: f64| {
            if r >= 1.0 {
                0.0
            } else {
                r.powi(dim as i32 - 1) * (-1.0 / (1.0 - r * r)).exp()
            }
        },
        0.0,
        1.0,
        1e-13,
        24,
    );
    area * radial.value * radius.powi(dim as i32)
}

fn gamma_fn(x: f64) -> f64 {
    // half-integer arguments only
    if (x - x.round()).abs() < 1e-12 {
        (1..x.round() as u64).map(|k| k as f64).product()
    } else {
        let mut g = std::f64::consts::PI.sqrt();
        let mut a = 0.5;
        while a + 0.5 < x + 1e-12 {
            g *= a;
            a += 1.0;
        }
        g
    }
}

/// Radical inverse of `i` in `base`.
fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

const PRIMES: [u64; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

/// Precomputed quadrature table for `xi` on `R^{2m}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mollifier {
    pub params: MollifyParams,
    pub dim: usize,
    /// Nodes in `R^{2m}`; the first `m` coordinates shift `z1`, the rest `z2`.
    nodes: Vec<Vector>,
    weights: Vec<f64>,
    /// Raw quadrature sum of the bump divided by its exact mass.
    pub raw_mass_ratio: f64,
}

impl Mollifier {
    /// Tensor Gauss–Legendre for `m <= 2`, Halton points otherwise.
    pub fn new(params: MollifyParams, m: usize) -> Result<Self> {
        params.validate()?;
        if m == 0 {
            return Err(Error::Config("state dimension must be >= 1".into()));
        }
        let d = 2 * m;
        if d > PRIMES.len() {
            return Err(Error::Config(format!("mollifier supports m <= {}", PRIMES.len() / 2)));
        }
        let r = params.mollifier_radius;
        let q = params.quad_points;
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        if m <= 2 {
            let (gx, gw) = gauss_legendre(q);
            let total = q.pow(d as u32);
            for flat in 0..total {
                let mut rem = flat;
                let mut w = r.powi(d as i32);
                let mut node: Vector = smallvec::smallvec![0.0; d];
                for c in node.iter_mut() {
                    let k = rem % q;
                    rem /= q;
                    *c = r * gx[k];
                    w *= gw[k];
                }
                let b = bump(&node, r);
                if b > 0.0 {
                    nodes.push(node);
                    weights.push(w * b);
                }
            }
        } else {
            let count = q.pow(4);
            let vol = (2.0 * r).powi(d as i32) / count as f64;
            for i in 1..=count as u64 {
                let node: Vector = (0..d)
                    .map(|j| r * (2.0 * radical_inverse(i, PRIMES[j]) - 1.0))
                    .collect();
                let b = bump(&node, r);
                if b > 0.0 {
                    nodes.push(node);
                    weights.push(vol * b);
                }
            }
        }
        let raw: f64 = weights.iter().sum();
        if !(raw > 0.0) {
            return Err(Error::Quadrature {
                node: vec![],
                reason: "mollifier quadrature has no mass".into(),
            });
        }
        weights.iter_mut().for_each(|w| *w /= raw);
        Ok(Mollifier {
            params,
            dim: m,
            nodes,
            weights,
            raw_mass_ratio: raw / bump_mass(d, r),
        })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Sum of the normalized quadrature weights.
    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// `[H_1^n, H_2^n](t, x, z1, z2)`.
    pub fn generators(&self, spec: &GameSpec, t: f64, x: &[f64], z1: &[f64], z2: &[f64]) -> Result<[f64; 2]> {
        let n = self.params.n;
        let psi = cutoff(z1, z2, n);
        if psi == 0.0 {
            return Ok([0.0, 0.0]);
        }
        let br = spec.best_responses()?;
        let m = self.dim;
        let xt = truncate_state(x, n);
        let inv_n = 1.0 / n as f64;
        let mut acc = [0.0, 0.0];
        let mut y1: Vector = smallvec::smallvec![0.0; m];
        let mut y2: Vector = smallvec::smallvec![0.0; m];
        for (node, w) in self.nodes.iter().zip(&self.weights) {
            for j in 0..m {
                y1[j] = z1[j] - node[j] * inv_n;
                y2[j] = z2[j] - node[m + j] * inv_n;
            }
            let u = br[0](t, &xt, &y1, &y2);
            let v = br[1](t, &xt, &y1, &y2);
            let h = spec.hamiltonians_at(t, &xt, &y1, &y2, &u, &v);
            if !(h[0].is_finite() && h[1].is_finite()) {
                return Err(Error::Quadrature {
                    node: node.to_vec(),
                    reason: format!("non-finite Hamiltonian at z = ({y1:?}, {y2:?})"),
                });
            }
            acc[0] += w * h[0];
            acc[1] += w * h[1];
        }
        Ok([psi * acc[0], psi * acc[1]])
    }

    pub fn generator(
        &self,
        spec: &GameSpec,
        player: Player,
        t: f64,
        x: &[f64],
        z1: &[f64],
        z2: &[f64],
    ) -> Result<f64> {
        Ok(self.generators(spec, t, x, z1, z2)?[player.index()])
    }
}

/// `H_i^n(t, x, z1, z2)`; builds the node table on each call, prefer
/// [`Mollifier`] in loops.
pub fn mollified_generator(
    spec: &GameSpec,
    player: Player,
    t: f64,
    x: &[f64],
    z1: &[f64],
    z2: &[f64],
    params: MollifyParams,
) -> Result<f64> {
    Mollifier::new(params, spec.dim)?.generator(spec, player, t, x, z1, z2)
}

/// `sup |H_i^n - H_i*|` over a uniform grid on `[-half_width, half_width]^{2m}`
/// at fixed `(t, x)`, for both players.
pub fn sup_distance_on_compact(
    spec: &GameSpec,
    mollifier: &Mollifier,
    t: f64,
    x: &[f64],
    half_width: f64,
    points_per_axis: usize,
) -> Result<[f64; 2]> {
    let m = spec.dim;
    let d = 2 * m;
    let k = points_per_axis.max(2);
    let mut sup = [0.0_f64, 0.0];
    for flat in 0..k.pow(d as u32) {
        let mut rem = flat;
        let mut z: Vector = smallvec::smallvec![0.0; d];
        for c in z.iter_mut() {
            *c = -half_width + 2.0 * half_width * (rem % k) as f64 / (k - 1) as f64;
            rem /= k;
        }
        let (z1, z2) = z.split_at(m);
        let hn = mollifier.generators(spec, t, x, z1, z2)?;
        let h = spec.equilibrium_hamiltonians(t, x, z1, z2)?;
        for i in 0..2 {
            sup[i] = sup[i].max((hn[i] - h[i]).abs());
        }
    }
    Ok(sup)
}

/// Outcome of [`verify_generator_properties`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorReport {
    pub n: u32,
    pub samples: usize,
    pub node_count: usize,
    /// `|sum of normalized weights - 1|`.
    pub mass_error: f64,
    pub raw_mass_ratio: f64,
    /// Finite-difference step used for the Lipschitz scan.
    pub lipschitz_step: f64,
    /// Largest difference quotient at steps `h` and `2h`.
    pub lipschitz: [f64; 2],
    pub lipschitz_pass: bool,
    /// Smallest `C` making the growth bound hold on the samples.
    pub growth_c_fitted: f64,
    /// `n`-independent constant implied by the declared growth constants.
    pub growth_c_uniform: f64,
    /// `growth_c_fitted / growth_c_uniform`.
    pub growth_ratio: f64,
    pub growth_pass: bool,
    /// Largest `|H_i^n|` seen (empirical `c_n`).
    pub bound_c_n: f64,
    /// Samples outside radius `2n` where `H_i^n != 0`.
    pub nonzero_outside_support: usize,
    pub bound_pass: bool,
    /// `sup_K |H_i^n - H_i*|` at levels `n` and `2n`, max over players.
    pub sup_distance: [f64; 2],
    pub convergence_pass: bool,
    pub pass: bool,
}

/// Relative slack for "nonincreasing within quadrature noise".
pub const SUP_DISTANCE_NOISE: f64 = 1e-6;

/// The `n`-independent growth constant
/// `max(C_eta, C_h + 2 C_eta R)` for `|H_i^n| <= C(1+|phi_n(x)|)|z^i| + C(1+|phi_n(x)|^gamma)`.
pub fn uniform_growth_constant(spec: &GameSpec, params: &MollifyParams) -> f64 {
    let g = spec.growth;
    g.eta.max(g.cost + 2.0 * g.eta * params.mollifier_radius)
}

fn sampling_state_box(spec: &GameSpec, n: u32) -> (Vector, Vector) {
    let wide = 2.0 * n as f64;
    let lo = spec.sample_box.lo.iter().map(|l| if *l >= 0.0 { *l } else { -wide }).collect();
    let hi = spec.sample_box.hi.iter().map(|h| h.max(wide)).collect();
    (lo, hi)
}

/// Empirical check of the four properties of `H_i^n`: Lipschitz in
/// `(z1, z2)`, uniform growth, global boundedness and convergence to `H_i*`
/// on the compact `[-5, 5]^{2m}` as `n` doubles.
pub fn verify_generator_properties(
    spec: &GameSpec,
    params: MollifyParams,
    sample_count: usize,
    seed: u64,
) -> Result<GeneratorReport> {
    let moll = Mollifier::new(params, spec.dim)?;
    let m = spec.dim;
    let n = params.n;
    let nf = n as f64;
    let gamma = spec.growth.gamma;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (xlo, xhi) = sampling_state_box(spec, n);
    let step = params.mollifier_radius / (nf * params.quad_points as f64);

    let mut lip = [0.0_f64, 0.0];
    let mut c_fit = 0.0_f64;
    let mut c_n = 0.0_f64;
    let mut outside = 0;
    for _ in 0..sample_count {
        let t = rng.random_range(0.0..=spec.horizon);
        let x: Vector = (0..m).map(|j| rng.random_range(xlo[j]..=xhi[j])).collect();
        let z: Vector = (0..2 * m).map(|_| rng.random_range(-1.5 * nf..=1.5 * nf)).collect();
        let (z1, z2) = z.split_at(m);
        let h = moll.generators(spec, t, &x, z1, z2)?;

        let r2 = linalg::dot(&z, &z);
        if r2 >= 4.0 * nf * nf && (h[0] != 0.0 || h[1] != 0.0) {
            outside += 1;
        }
        let xt = truncate_state(&x, n);
        let xn = linalg::norm(&xt);
        for (i, zi) in [z1, z2].iter().enumerate() {
            let denom = (1.0 + xn) * linalg::norm(zi) + 1.0 + xn.powf(gamma);
            c_fit = c_fit.max(h[i].abs() / denom);
            c_n = c_n.max(h[i].abs());
        }

        // random unit direction in R^{2m}
        let mut dir: Vector = (0..2 * m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dn = linalg::norm(&dir).max(1e-300);
        dir.iter_mut().for_each(|v| *v /= dn);
        for (slot, s) in [step, 2.0 * step].into_iter().enumerate() {
            let zs: Vector = z.iter().zip(&dir).map(|(a, b)| a + s * b).collect();
            let (zs1, zs2) = zs.split_at(m);
            let hs = moll.generators(spec, t, &x, zs1, zs2)?;
            for i in 0..2 {
                lip[slot] = lip[slot].max((hs[i] - h[i]).abs() / s);
            }
        }
    }

    let lipschitz_pass = lip.iter().all(|l| l.is_finite())
        && (lip[0].max(lip[1]) <= 2.0 * lip[0].min(lip[1]) || lip[0].max(lip[1]) < 1e-12);
    let c_uniform = uniform_growth_constant(spec, &params);
    let growth_ratio = c_fit / c_uniform;

    let t_mid = 0.5 * spec.horizon;
    let x_mid = spec.sample_box.midpoint();
    let per_axis = if m == 1 { 41 } else { 9 };
    let d_n = sup_distance_on_compact(spec, &moll, t_mid, &x_mid, 5.0, per_axis)?;
    let moll_2n = Mollifier::new(params.with_level(2 * n), m)?;
    let d_2n = sup_distance_on_compact(spec, &moll_2n, t_mid, &x_mid, 5.0, per_axis)?;
    let sup_n = d_n[0].max(d_n[1]);
    let sup_2n = d_2n[0].max(d_2n[1]);
    let convergence_pass = sup_2n <= sup_n + SUP_DISTANCE_NOISE * sup_n.max(1.0);

    let mass_error = (moll.total_weight() - 1.0).abs();
    let bound_pass = c_n.is_finite() && outside == 0;
    let growth_pass = growth_ratio <= 1.0;
    Ok(GeneratorReport {
        n,
        samples: sample_count,
        node_count: moll.node_count(),
        mass_error,
        raw_mass_ratio: moll.raw_mass_ratio,
        lipschitz_step: step,
        lipschitz: lip,
        lipschitz_pass,
        growth_c_fitted: c_fit,
        growth_c_uniform: c_uniform,
        growth_ratio,
        growth_pass,
        bound_c_n: c_n,
        nonzero_outside_support: outside,
        bound_pass,
        sup_distance: [sup_n, sup_2n],
        convergence_pass,
        pass: lipschitz_pass && growth_pass && bound_pass && convergence_pass && mass_error <= 1e-6,
    })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::game::{lq_game, LqGameParams};

    fn lq() -> GameSpec {
        lq_game(&LqGameParams::reference_example()).unwrap()
    }

    #[test]
    fn truncation() {
        assert_eq!(truncate_state(&[3.0, -5.0], 2).as_slice(), &[2.0, -2.0]);
        assert_eq!(truncate_state(&[0.5], 1).as_slice(), &[0.5]);
        assert_eq!(truncate_state(&[1.5, -2.0], 2).as_slice(), &[1.5, -2.0]);
    }

    #[test]
    fn cutoff_plateaus_and_midpoint() {
        let n = 3;
        assert_eq!(cutoff(&[2.0], &[2.0], n), 1.0); // 8 <= 9
        assert_eq!(cutoff(&[3.0], &[0.0], n), 1.0);
        assert_eq!(cutoff(&[6.0], &[0.0], n), 0.0);
        assert_eq!(cutoff(&[5.0], &[5.0], n), 0.0);
        // r^2 = 2.5 n^2 is the midpoint of the bridge in scaled radius squared
        let r = (2.5_f64).sqrt() * n as f64;
        assert!((cutoff(&[r], &[0.0], n) - 0.5).abs() < 1e-12);
        let mut prev = 1.0;
        for k in 0..=100 {
            let r = n as f64 * (1.0 + k as f64 / 100.0);
            let c = cutoff(&[r], &[0.0], n);
            assert!(c <= prev + 1e-15 && (0.0..=1.0).contains(&c));
            prev = c;
        }
    }

    #[test]
    fn mollifier_weights_have_unit_mass() {
        for (q, m) in [(3, 1), (8, 1), (5, 2), (3, 3)] {
            let moll = Mollifier::new(MollifyParams::new(4, q), m).unwrap();
            assert!((moll.total_weight() - 1.0).abs() <= 1e-6);
        }
        let fine = Mollifier::new(MollifyParams::new(4, 24), 1).unwrap();
        assert!((fine.raw_mass_ratio - 1.0).abs() < 1e-3, "{}", fine.raw_mass_ratio);
    }

    #[test]
    fn bump_mass_matches_two_dim_quadrature() {
        let (x, w) = gauss_legendre(60);
        let mut q = 0.0;
        for (a, wa) in x.iter().zip(&w) {
            for (b, wb) in x.iter().zip(&w) {
                q += wa * wb * bump(&[*a, *b], 1.0);
            }
        }
        assert!((q / bump_mass(2, 1.0) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn rejects_bad_params() {
        assert!(Mollifier::new(MollifyParams::new(0, 5), 1).is_err());
        assert!(Mollifier::new(MollifyParams::new(2, 2), 1).is_err());
    }

    #[test]
    fn zero_outside_cutoff() {
        let game = lq();
        let params = MollifyParams::new(2, 6);
        for (z1, z2) in [(4.0, 0.0), (3.0, 3.0), (-10.0, 7.0)] {
            let h = mollified_generator(&game, Player::One, 0.3, &[0.1], &[z1], &[z2], params).unwrap();
            assert_eq!(h, 0.0);
        }
    }

    #[test]
    fn constant_hamiltonian_is_reproduced() {
        let mut flat = lq();
        flat.running_cost = [Arc::new(|_, _, _, _| 1.25), Arc::new(|_, _, _, _| -0.5)];
        flat.drift = Arc::new(|_, _, _, _| smallvec::smallvec![0.0]);
        let moll = Mollifier::new(MollifyParams::new(8, 6), 1).unwrap();
        let h = moll.generators(&flat, 0.5, &[2.0], &[0.4], &[-0.3]).unwrap();
        assert!((h[0] - 1.25).abs() < 1e-12 && (h[1] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn bang_bang_selector_is_smoothed() {
        let mut p = crate::game::AffineQuadraticParams {
            dim: 1,
            horizon: 1.0,
            sigma: vec![vec![1.0]],
            a: vec![vec![0.0]],
            b: vec![vec![1.0]],
            c: vec![vec![1.0]],
            controls: [crate::game::ControlBox::interval(-1.0, 1.0), crate::game::ControlBox::interval(0.0, 1.0)],
            players: [0, 1].map(|_| crate::game::PlayerCosts {
                theta: vec![0.0],
                power: 2,
                u_weight: vec![0.0],
                v_weight: vec![0.0],
                terminal: vec![vec![0.0, 0.0, 1.0]],
            }),
        };
        p.players[1].v_weight = vec![0.5];
        let game = p.build().unwrap();
        let r = verify_generator_properties(&game, MollifyParams::new(4, 8), 300, 3).unwrap();
        assert!(r.lipschitz_pass, "{r:#?}");
        assert!(r.pass, "{r:#?}");
    }

    #[test]
    fn invariant_beyond_truncation_box() {
        let mut game = lq();
        game.drift = Arc::new(|_, x, u, v| smallvec::smallvec![0.3 * x[0] + u[0] + v[0]]);
        let moll = Mollifier::new(MollifyParams::new(2, 5), 1).unwrap();
        let a = moll.generators(&game, 0.2, &[7.5], &[0.5], &[-1.0]).unwrap();
        let b = moll.generators(&game, 0.2, &[2.0], &[0.5], &[-1.0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn distance_to_hamiltonian_shrinks() {
        // dense-quadrature oracle: error at a fixed point decreases with n
        let game = lq();
        let (z1, z2) = ([1.3], [-0.7]);
        let exact = game.equilibrium_hamiltonians(0.4, &[0.5], &z1, &z2).unwrap();
        let mut prev = f64::INFINITY;
        for n in [4, 8, 16, 32] {
            let moll = Mollifier::new(MollifyParams::new(n, 24), 1).unwrap();
            let h = moll.generators(&game, 0.4, &[0.5], &z1, &z2).unwrap();
            let err = (h[0] - exact[0]).abs().max((h[1] - exact[1]).abs());
            assert!(err < prev, "n={n}: {err} !< {prev}");
            prev = err;
        }
        assert!(prev < 1e-3);
    }

    #[test]
    fn lq_properties_hold() {
        let r = verify_generator_properties(&lq(), MollifyParams::new(8, 8), 500, 11).unwrap();
        assert!(r.pass, "{r:#?}");
    }

    #[test]
    fn level_one_is_zero_beyond_radius_two() {
        let r = verify_generator_properties(&lq(), MollifyParams::new(1, 6), 200, 2).unwrap();
        assert!(r.bound_pass, "{r:#?}");
        assert_eq!(r.nonzero_outside_support, 0);
    }
}
