//! Coupled BSDE system solved backward by least-squares Monte Carlo.
//!
//! For each player `i`,
//!
//! ```text
//! -dW^i_s = H_i(s, X_s, Z^i_s, u1*(s, X_s, Z^1_s, Z^2_s), u2*(...)) ds - Z^i_s dB_s,
//!  W^i_T  = g^i(X_T),
//! ```
//!
//! along the driftless reference diffusion `dX = sigma(s, X) dB`. At every knot
//! the conditional expectations are least-squares projections on a basis in
//! `x`, which yields the deterministic maps `w^i(t_k, .)` and `z^i(t_k, .)`
//! with `W^i = w^i(t, X)` and `Z^i = z^i(t, X)`.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{Error, Result};
use crate::game::{FeedbackPair, GameSpec, Player};
use crate::linalg::{self, Vector};
use crate::mollify::{Mollifier, MollifyParams};
use crate::sde::{mean_and_se, GradientField, PathBundle, Scheme, TimeGrid};

/// Diagonal ridge added to the normalized Gram matrix.
pub const RIDGE: f64 = 1e-10;
/// Gram condition numbers above this abort the solve.
pub const MAX_CONDITION: f64 = 1e12;

type Features = SmallVec<[f64; 16]>;

/// Regression basis in the state variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegressionBasis {
    /// Monomials of total degree `<= degree` in the standardized state.
    GlobalPoly { degree: u32 },
    /// The cloud's bounding box split into `cells_per_axis` cells per active
    /// coordinate, with a local polynomial of total degree `<= degree` per cell.
    LocalPartition { cells_per_axis: u32, degree: u32 },
}

impl RegressionBasis {
    fn degree(&self) -> u32 {
        match *self {
            RegressionBasis::GlobalPoly { degree } => degree,
            RegressionBasis::LocalPartition { degree, .. } => degree,
        }
    }

    fn cells(&self) -> usize {
        match *self {
            RegressionBasis::GlobalPoly { .. } => 1,
            RegressionBasis::LocalPartition { cells_per_axis, .. } => cells_per_axis.max(1) as usize,
        }
    }

    /// Number of basis functions on an `m`-dimensional cloud.
    pub fn count(&self, m: usize) -> usize {
        let local = monomials(m, self.degree()).len();
        self.cells().pow(m as u32) * local
    }

    pub fn validate(&self, m: usize, n_paths: usize) -> Result<()> {
        if let RegressionBasis::LocalPartition { cells_per_axis: 0, .. } = self {
            return Err(Error::Config("basis.cells_per_axis must be >= 1".into()));
        }
        let count = self.count(m);
        if count * 10 > n_paths {
            return Err(Error::Config(format!(
                "basis has {count} functions; needs at least {} paths (10 per function), got {n_paths}",
                count * 10
            )));
        }
        Ok(())
    }
}

/// Exponent tuples of all monomials in `vars` variables of total degree
/// `<= degree`, constant first, then by degree.
fn monomials(vars: usize, degree: u32) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    for d in 0..=degree {
        let mut cur = vec![0; vars];
        push_degree(&mut out, &mut cur, 0, d);
    }
    out
}

fn push_degree(out: &mut Vec<Vec<u32>>, cur: &mut Vec<u32>, pos: usize, left: u32) {
    if pos == cur.len() {
        if left == 0 {
            out.push(cur.clone());
        }
        return;
    }
    for e in (0..=left).rev() {
        cur[pos] = e;
        push_degree(out, cur, pos + 1, left - e);
    }
    cur[pos] = 0;
}

/// Standardization and bounding box of the cloud at one knot. Coordinates
/// with no spread (`scale == 0`) are dropped from the basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotFrame {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl KnotFrame {
    fn from_cloud(xs: &[f64], m: usize) -> Self {
        let n = xs.len() / m;
        let mut center = vec![0.0; m];
        let mut scale = vec![0.0; m];
        let mut lo = vec![f64::INFINITY; m];
        let mut hi = vec![f64::NEG_INFINITY; m];
        for r in 0..m {
            let mean = linalg::chunked_sum(n, |j| xs[j * m + r]) / n as f64;
            let var = linalg::chunked_sum(n, |j| (xs[j * m + r] - mean).powi(2)) / n as f64;
            for j in 0..n {
                lo[r] = lo[r].min(xs[j * m + r]);
                hi[r] = hi[r].max(xs[j * m + r]);
            }
            center[r] = mean;
            let sd = var.sqrt();
            scale[r] = if sd > 1e-12 * (1.0 + mean.abs()) && hi[r] > lo[r] { sd } else { 0.0 };
        }
        KnotFrame { center, scale, lo, hi }
    }

    fn active(&self) -> Vec<usize> {
        (0..self.scale.len()).filter(|&r| self.scale[r] > 0.0).collect()
    }

    /// Whether `x` lies outside the cloud's bounding box.
    pub fn outside(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .any(|(v, (l, h))| v < l || v > h)
    }
}

/// Feature map of one knot: basis + frame resolved into monomial tables.
#[derive(Debug, Clone)]
struct Design {
    active: Vec<usize>,
    exps: Vec<Vec<u32>>,
    cells: usize,
    local: bool,
    frame: KnotFrame,
}

impl Design {
    fn new(basis: &RegressionBasis, frame: &KnotFrame) -> Self {
        let active = frame.active();
        let (cells, local) = match basis {
            RegressionBasis::GlobalPoly { .. } => (1, false),
            RegressionBasis::LocalPartition { .. } => (basis.cells(), true),
        };
        Design {
            exps: monomials(active.len(), basis.degree()),
            cells,
            local,
            active,
            frame: frame.clone(),
        }
    }

    fn per_block(&self) -> usize {
        self.exps.len()
    }

    fn blocks(&self) -> usize {
        if self.local {
            self.cells.pow(self.active.len() as u32)
        } else {
            1
        }
    }

    /// Block index and local features of `x`.
    fn features(&self, x: &[f64]) -> (usize, Features) {
        let mut coords: SmallVec<[f64; 4]> = SmallVec::new();
        let mut block = 0;
        let mut stride = 1;
        for &r in &self.active {
            if self.local {
                let (lo, hi) = (self.frame.lo[r], self.frame.hi[r]);
                let u = (x[r] - lo) / (hi - lo) * self.cells as f64;
                let idx = (u.floor().max(0.0) as usize).min(self.cells - 1);
                coords.push(2.0 * (u - idx as f64) - 1.0);
                block += idx * stride;
                stride *= self.cells;
            } else {
                coords.push((x[r] - self.frame.center[r]) / self.frame.scale[r]);
            }
        }
        let feats = self
            .exps
            .iter()
            .map(|e| e.iter().zip(&coords).map(|(p, c)| c.powi(*p as i32)).product())
            .collect();
        (block, feats)
    }

    fn eval(&self, coeffs: &[f64], x: &[f64]) -> f64 {
        let (b, f) = self.features(x);
        let p = self.per_block();
        linalg::dot(&coeffs[b * p..(b + 1) * p], &f)
    }
}

/// Features of every path at one knot, computed once and shared by all fits.
struct KnotFeatures {
    p: usize,
    blocks: usize,
    local: bool,
    block: Vec<u32>,
    values: Vec<f64>,
}

impl KnotFeatures {
    fn new(design: &Design, xs: &[f64], m: usize) -> Self {
        let p = design.per_block();
        let rows: Vec<(usize, Features)> = xs.par_chunks(m).map(|x| design.features(x)).collect();
        let mut block = Vec::with_capacity(rows.len());
        let mut values = Vec::with_capacity(rows.len() * p);
        for (b, f) in rows {
            block.push(b as u32);
            values.extend_from_slice(&f);
        }
        KnotFeatures {
            p,
            blocks: design.blocks(),
            local: design.local,
            block,
            values,
        }
    }

    fn len(&self) -> usize {
        self.block.len()
    }

    fn row(&self, j: usize) -> (usize, &[f64]) {
        (self.block[j] as usize, &self.values[j * self.p..(j + 1) * self.p])
    }

    fn fitted(&self, coeffs: &[f64]) -> Vec<f64> {
        let p = self.p;
        (0..self.len())
            .into_par_iter()
            .map(|j| {
                let (b, f) = self.row(j);
                linalg::dot(&coeffs[b * p..(b + 1) * p], f)
            })
            .collect()
    }
}

struct FitOutcome {
    coeffs: Vec<Vec<f64>>,
    cond: f64,
    fallbacks: usize,
}

/// Least-squares fit of several targets on the same design. Each block is
/// solved from its own normal equations; sparse or ill-conditioned blocks of
/// a local partition fall back to their mean, empty blocks to the global mean.
fn fit(kf: &KnotFeatures, targets: &[&[f64]], knot: usize) -> Result<FitOutcome> {
    let n = kf.len();
    let nb = kf.blocks;
    let p = kf.p;
    let nt = targets.len();
    struct Acc {
        gram: Vec<f64>,
        rhs: Vec<f64>,
        count: Vec<usize>,
        sums: Vec<f64>,
    }
    let init = || Acc {
        gram: vec![0.0; nb * p * p],
        rhs: vec![0.0; nb * p * nt],
        count: vec![0; nb],
        sums: vec![0.0; nb * nt],
    };
    let acc = linalg::chunked_fold(
        n,
        init,
        |acc, j| {
            let (b, f) = kf.row(j);
            acc.count[b] += 1;
            let g = &mut acc.gram[b * p * p..(b + 1) * p * p];
            for r in 0..p {
                for c in r..p {
                    g[r * p + c] += f[r] * f[c];
                }
            }
            for (t, target) in targets.iter().enumerate() {
                let y = target[j];
                acc.sums[b * nt + t] += y;
                let rhs = &mut acc.rhs[(b * nt + t) * p..(b * nt + t + 1) * p];
                for r in 0..p {
                    rhs[r] += f[r] * y;
                }
            }
        },
        |total, part| {
            total.gram.iter_mut().zip(&part.gram).for_each(|(a, b)| *a += b);
            total.rhs.iter_mut().zip(&part.rhs).for_each(|(a, b)| *a += b);
            total.count.iter_mut().zip(&part.count).for_each(|(a, b)| *a += b);
            total.sums.iter_mut().zip(&part.sums).for_each(|(a, b)| *a += b);
        },
    );

    let global_mean: Vec<f64> = (0..nt)
        .map(|t| (0..nb).map(|b| acc.sums[b * nt + t]).sum::<f64>() / n as f64)
        .collect();
    let mut coeffs = vec![vec![0.0; nb * p]; nt];
    let mut cond = 1.0_f64;
    let mut fallbacks = 0;
    for b in 0..nb {
        let cnt = acc.count[b];
        let block_mean = |t: usize| acc.sums[b * nt + t] / cnt as f64;
        if cnt == 0 {
            for (t, c) in coeffs.iter_mut().enumerate() {
                c[b * p] = global_mean[t];
            }
            fallbacks += usize::from(kf.local);
            continue;
        }
        if kf.local && cnt < 2 * p {
            for (t, c) in coeffs.iter_mut().enumerate() {
                c[b * p] = block_mean(t);
            }
            fallbacks += 1;
            continue;
        }
        let g = &acc.gram[b * p * p..(b + 1) * p * p];
        let gram = DMatrix::from_fn(p, p, |r, c| {
            let v = if r <= c { g[r * p + c] } else { g[c * p + r] };
            v / cnt as f64 + if r == c { RIDGE } else { 0.0 }
        });
        let eig = gram.clone().symmetric_eigenvalues();
        let lmin = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        let lmax = eig.iter().cloned().fold(0.0, f64::max);
        let kappa = if lmin > 0.0 { lmax / lmin } else { f64::INFINITY };
        let chol = if kappa <= MAX_CONDITION { gram.cholesky() } else { None };
        let Some(chol) = chol else {
            if kf.local {
                for (t, c) in coeffs.iter_mut().enumerate() {
                    c[b * p] = block_mean(t);
                }
                fallbacks += 1;
                continue;
            }
            return Err(Error::SingularRegression { knot, cond: kappa });
        };
        cond = cond.max(kappa);
        for (t, c) in coeffs.iter_mut().enumerate() {
            let rhs = DVector::from_fn(p, |r, _| acc.rhs[(b * nt + t) * p + r] / cnt as f64);
            let sol = chol.solve(&rhs);
            c[b * p..(b + 1) * p].copy_from_slice(sol.as_slice());
        }
    }
    Ok(FitOutcome { coeffs, cond, fallbacks })
}

/// Values of each coefficient vector in `coeffs` on the cloud, interleaved
/// per path (`n x coeffs.len()`).
fn fitted_rows(kf: &KnotFeatures, coeffs: &[Vec<f64>]) -> Vec<f64> {
    let p = kf.p;
    (0..kf.len())
        .into_par_iter()
        .flat_map_iter(|j| {
            let (b, f) = kf.row(j);
            coeffs.iter().map(move |c| linalg::dot(&c[b * p..(b + 1) * p], f))
        })
        .collect()
}

/// Stopping rule for the per-knot Picard iteration over the `Z^1`/`Z^2`
/// coupling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PicardParams {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for PicardParams {
    fn default() -> Self {
        PicardParams { max_iter: 10, tol: 1e-10 }
    }
}

/// Solver diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Max change of the `Y` coefficients per Picard iterate, per knot.
    pub picard_residuals: Vec<Vec<f64>>,
    pub picard_converged: Vec<bool>,
    /// Knots where Picard hit `max_iter` without meeting `tol`.
    pub picard_warnings: usize,
    /// Largest Gram condition number per knot (knot `N` is the terminal fit).
    pub condition_numbers: Vec<f64>,
    /// Local-partition blocks that fell back to a constant fit.
    pub regression_fallbacks: usize,
    /// `E[int_0^T |Z^i|^2 dt]` from the fitted `Z` on the cloud.
    pub z_energy: [f64; 2],
    /// `max |w^i(T, X_T) - g^i(X_T)|` over the cloud.
    pub terminal_residual: [f64; 2],
    /// Standard error of `g^i(X_T) + sum_k H_i dt`, the pathwise counterpart of `Y_0`.
    pub y0_std_error: [f64; 2],
}

/// Per-knot regression coefficients for `w^i` and `z^i`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BsdeSolution {
    pub grid: TimeGrid,
    pub dim: usize,
    pub basis: RegressionBasis,
    pub x0: Vec<f64>,
    pub n_paths: usize,
    pub seed: u64,
    pub mollify: Option<MollifyParams>,
    pub frames: Vec<KnotFrame>,
    /// `[player][knot][coefficient]`, knots `0..=N`.
    pub coeffs_y: [Vec<Vec<f64>>; 2],
    /// `[player][knot][coordinate][coefficient]`, knots `0..N`.
    pub coeffs_z: [Vec<Vec<Vec<f64>>>; 2],
    pub diagnostics: Diagnostics,
    #[serde(skip)]
    designs: OnceLock<Vec<Design>>,
}

impl BsdeSolution {
    fn designs(&self) -> &[Design] {
        self.designs
            .get_or_init(|| self.frames.iter().map(|f| Design::new(&self.basis, f)).collect())
    }

    /// `w^i(t, x)`, piecewise constant in `t` from the left knot.
    pub fn eval_w(&self, player: Player, t: f64, x: &[f64]) -> f64 {
        let k = self.grid.left_knot(t);
        self.designs()[k].eval(&self.coeffs_y[player.index()][k], x)
    }

    /// `z^i(t, x)`; at `t = T` the last interior knot is used.
    pub fn eval_z(&self, player: Player, t: f64, x: &[f64]) -> Vector {
        let k = self.grid.left_knot(t).min(self.grid.n_steps - 1);
        let d = &self.designs()[k];
        let (b, f) = d.features(x);
        let p = d.per_block();
        self.coeffs_z[player.index()][k]
            .iter()
            .map(|c| linalg::dot(&c[b * p..(b + 1) * p], &f))
            .collect()
    }

    /// Whether evaluation at `(t, x)` extrapolates beyond the simulated cloud.
    pub fn extrapolates(&self, t: f64, x: &[f64]) -> bool {
        self.frames[self.grid.left_knot(t)].outside(x)
    }

    /// `Y^i_0 = w^i(t_0, x_0)`.
    pub fn y0(&self, player: Player) -> f64 {
        self.eval_w(player, self.grid.t0, &self.x0)
    }
}

impl PartialEq for BsdeSolution {
    fn eq(&self, other: &Self) -> bool {
        self.grid == other.grid
            && self.dim == other.dim
            && self.basis == other.basis
            && self.x0 == other.x0
            && self.n_paths == other.n_paths
            && self.seed == other.seed
            && self.mollify == other.mollify
            && self.frames == other.frames
            && self.coeffs_y == other.coeffs_y
            && self.coeffs_z == other.coeffs_z
            && self.diagnostics == other.diagnostics
    }
}

impl GradientField for BsdeSolution {
    fn gradient(&self, player: Player, t: f64, x: &[f64]) -> Vector {
        self.eval_z(player, t, x)
    }
}

/// Driver of the BSDE system as a function of `(t, x, z1, z2)`.
pub enum Generator<'a> {
    /// `H_i` at the Isaacs selectors.
    Equilibrium(&'a GameSpec),
    /// `H_i^n`.
    Mollified(&'a GameSpec, Mollifier),
    /// `H_i` at the controls of the given feedbacks.
    Feedback(&'a GameSpec, &'a FeedbackPair),
}

impl Generator<'_> {
    fn spec(&self) -> &GameSpec {
        match self {
            Generator::Equilibrium(s) | Generator::Mollified(s, _) | Generator::Feedback(s, _) => s,
        }
    }

    pub fn eval(&self, t: f64, x: &[f64], z1: &[f64], z2: &[f64]) -> Result<[f64; 2]> {
        match self {
            Generator::Equilibrium(spec) => spec.equilibrium_hamiltonians(t, x, z1, z2),
            Generator::Mollified(spec, moll) => moll.generators(spec, t, x, z1, z2),
            Generator::Feedback(spec, fb) => {
                let u = fb[0].eval(t, x, z1, z2);
                let v = fb[1].eval(t, x, z1, z2);
                Ok(spec.hamiltonians_at(t, x, z1, z2, &u, &v))
            }
        }
    }
}

/// Solves the equilibrium system, with `H_i^n` in place of `H_i` when
/// `mollify` is set.
pub fn solve_coupled(
    spec: &GameSpec,
    bundle: &PathBundle,
    basis: RegressionBasis,
    mollify: Option<MollifyParams>,
    picard: PicardParams,
) -> Result<BsdeSolution> {
    spec.best_responses()?;
    match mollify {
        Some(params) => {
            let moll = Mollifier::new(params, spec.dim)?;
            solve_with(&Generator::Mollified(spec, moll), bundle, basis, picard, mollify)
        }
        None => solve_with(&Generator::Equilibrium(spec), bundle, basis, picard, None),
    }
}

/// Solves the system whose controls are given by `feedbacks` (both players'
/// payoffs under that strategy pair).
pub fn solve_for_feedbacks(
    spec: &GameSpec,
    feedbacks: &FeedbackPair,
    bundle: &PathBundle,
    basis: RegressionBasis,
    picard: PicardParams,
) -> Result<BsdeSolution> {
    solve_with(&Generator::Feedback(spec, feedbacks), bundle, basis, picard, None)
}

fn max_abs_diff(a: &[Vec<f64>; 2], b: &[Vec<f64>; 2]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

/// Backward induction with the given driver. `Z_k` is the projection of
/// `(Y_{k+1} - E[Y_{k+1} | X_k]) dB_k / dt`; `Y_k` the projection of
/// `Y_{k+1} + H(t_k, X_k, Z_k) dt`. The Picard iterate `0` uses the `Z` map of
/// knot `k + 1`, later iterates the fitted `Z_k`.
pub fn solve_with(
    generator: &Generator<'_>,
    bundle: &PathBundle,
    basis: RegressionBasis,
    picard: PicardParams,
    mollify: Option<MollifyParams>,
) -> Result<BsdeSolution> {
    let spec = generator.spec();
    if bundle.scheme != Scheme::Reference {
        return Err(Error::Contract("the BSDE solver needs a reference-measure bundle".into()));
    }
    if bundle.dim != spec.dim {
        return Err(Error::Config("bundle and game dimensions differ".into()));
    }
    if picard.max_iter == 0 || !(picard.tol >= 0.0) {
        return Err(Error::Config("picard.max_iter must be >= 1 and picard.tol >= 0".into()));
    }
    let n = bundle.n_paths;
    let m = spec.dim;
    let grid = bundle.grid;
    let nk = grid.n_steps;
    let dt = grid.dt();
    basis.validate(m, n)?;

    let clouds: Vec<Vec<f64>> = (0..=nk).map(|k| bundle.states_at(k)).collect();
    let frames: Vec<KnotFrame> = clouds.iter().map(|c| KnotFrame::from_cloud(c, m)).collect();
    let designs: Vec<Design> = frames.iter().map(|f| Design::new(&basis, f)).collect();

    // terminal condition
    let xt = &clouds[nk];
    let mut y_next: [Vec<f64>; 2] = [0, 1].map(|i| {
        xt.par_chunks(m).map(|x| (spec.terminal_cost[i])(x)).collect::<Vec<f64>>()
    });
    for y in &y_next {
        if let Some(j) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteCost { path: j });
        }
    }
    let mut pathwise = y_next.clone();
    let kf_terminal = KnotFeatures::new(&designs[nk], xt, m);
    let term = fit(&kf_terminal, &[&y_next[0], &y_next[1]], nk)?;
    let mut terminal_residual = [0.0; 2];
    for i in 0..2 {
        let fitted = kf_terminal.fitted(&term.coeffs[i]);
        terminal_residual[i] = fitted
            .iter()
            .zip(&y_next[i])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
    }
    drop(kf_terminal);

    let mut coeffs_y: [Vec<Vec<f64>>; 2] = [vec![vec![]; nk + 1], vec![vec![]; nk + 1]];
    let mut coeffs_z: [Vec<Vec<Vec<f64>>>; 2] = [vec![vec![]; nk], vec![vec![]; nk]];
    let [t1, t2] = term.coeffs.try_into().expect("two targets");
    coeffs_y[0][nk] = t1;
    coeffs_y[1][nk] = t2;
    let mut cond = vec![0.0; nk + 1];
    cond[nk] = term.cond;
    let mut fallbacks = term.fallbacks;
    let mut residuals = vec![Vec::new(); nk];
    let mut converged = vec![false; nk];
    let mut z_energy = [0.0; 2];
    let zero_z = vec![0.0; n * 2 * m];

    for k in (0..nk).rev() {
        let t = grid.knot(k);
        let xs = &clouds[k];
        let kf = KnotFeatures::new(&designs[k], xs, m);

        let e = fit(&kf, &[&y_next[0], &y_next[1]], k)?;
        let mut z_targets: Vec<Vec<f64>> = Vec::with_capacity(2 * m);
        for i in 0..2 {
            let ef = kf.fitted(&e.coeffs[i]);
            for r in 0..m {
                z_targets.push(
                    (0..n)
                        .into_par_iter()
                        .map(|j| (y_next[i][j] - ef[j]) * bundle.increment(j, k)[r] / dt)
                        .collect(),
                );
            }
        }
        let zt: Vec<&[f64]> = z_targets.iter().map(|v| v.as_slice()).collect();
        let zf = fit(&kf, &zt, k)?;
        drop(z_targets);
        // per path: [z1_1..z1_m, z2_1..z2_m]
        let z_fitted = fitted_rows(&kf, &zf.coeffs);
        let z_prev: Option<Vec<f64>> = (k + 1 < nk).then(|| {
            let kp = KnotFeatures::new(&designs[k + 1], xs, m);
            let prev: Vec<Vec<f64>> = coeffs_z[0][k + 1].iter().chain(&coeffs_z[1][k + 1]).cloned().collect();
            fitted_rows(&kp, &prev)
        });

        let gen_values = |z: &[f64]| -> Result<[Vec<f64>; 2]> {
            let rows: Vec<Result<[f64; 2]>> = (0..n)
                .into_par_iter()
                .map(|j| {
                    let x = &xs[j * m..(j + 1) * m];
                    let zj = &z[j * 2 * m..(j + 1) * 2 * m];
                    let h = generator.eval(t, x, &zj[..m], &zj[m..])?;
                    if h[0].is_finite() && h[1].is_finite() {
                        Ok(h)
                    } else {
                        Err(Error::NonFiniteCost { path: j })
                    }
                })
                .collect();
            let mut out = [Vec::with_capacity(n), Vec::with_capacity(n)];
            for r in rows {
                let h = r?;
                out[0].push(h[0]);
                out[1].push(h[1]);
            }
            Ok(out)
        };

        let mut cy: Option<[Vec<f64>; 2]> = None;
        let mut gen: Option<[Vec<f64>; 2]> = None;
        let mut kappa = e.cond.max(zf.cond);
        fallbacks += e.fallbacks + zf.fallbacks;
        for l in 0..picard.max_iter {
            // iterates >= 2 see the same Z as iterate 1 and reuse its driver values
            if l <= 1 {
                let z_in: &[f64] = match (l, &z_prev) {
                    (0, Some(zp)) => zp,
                    (0, None) => &zero_z,
                    _ => &z_fitted,
                };
                gen = Some(gen_values(z_in)?);
            }
            let g = gen.as_ref().expect("driver values computed at l = 0");
            let gf = fit(&kf, &[&g[0], &g[1]], k)?;
            kappa = kappa.max(gf.cond);
            fallbacks += gf.fallbacks;
            let new: [Vec<f64>; 2] = [0, 1].map(|i| {
                e.coeffs[i].iter().zip(&gf.coeffs[i]).map(|(a, b)| a + dt * b).collect()
            });
            if let Some(old) = &cy {
                let res = max_abs_diff(old, &new);
                residuals[k].push(res);
                cy = Some(new);
                if res <= picard.tol {
                    converged[k] = true;
                    break;
                }
            } else {
                cy = Some(new);
            }
        }
        let cy = cy.expect("at least one Picard iterate");
        let g = gen.expect("at least one Picard iterate");
        for i in 0..2 {
            y_next[i] = kf.fitted(&cy[i]);
            for j in 0..n {
                pathwise[i][j] += dt * g[i][j];
            }
            let off = i * m;
            z_energy[i] += dt
                * linalg::chunked_sum(n, |j| {
                    let zj = &z_fitted[j * 2 * m + off..j * 2 * m + off + m];
                    linalg::dot(zj, zj)
                })
                / n as f64;
        }
        cond[k] = kappa;
        let [c1, c2] = cy;
        coeffs_y[0][k] = c1;
        coeffs_y[1][k] = c2;
        let mut zc = zf.coeffs;
        let z2 = zc.split_off(m);
        coeffs_z[0][k] = zc;
        coeffs_z[1][k] = z2;
    }

    let y0_std_error = [0, 1].map(|i| mean_and_se(&pathwise[i]).1);
    let picard_warnings = converged.iter().filter(|c| !**c).count();
    let sol = BsdeSolution {
        grid,
        dim: m,
        basis,
        x0: bundle.state(0, 0).to_vec(),
        n_paths: n,
        seed: bundle.seed,
        mollify,
        frames,
        coeffs_y,
        coeffs_z,
        diagnostics: Diagnostics {
            picard_residuals: residuals,
            picard_converged: converged,
            picard_warnings,
            condition_numbers: cond,
            regression_fallbacks: fallbacks,
            z_energy,
            terminal_residual,
            y0_std_error,
        },
        designs: OnceLock::new(),
    };
    let _ = sol.designs.set(designs);
    Ok(sol)
}

/// Polynomial-growth fit of `|w^i|` on spheres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthReport {
    pub radii: Vec<f64>,
    /// `max |w^i|` per player and radius.
    pub max_abs: [Vec<f64>; 2],
    /// Fitted exponent per player.
    pub exponent: [f64; 2],
    /// Fitted constant per player.
    pub constant: [f64; 2],
}

fn sphere_directions(m: usize) -> Vec<Vector> {
    let mut dirs: Vec<Vector> = Vec::new();
    for r in 0..m {
        for s in [-1.0, 1.0] {
            let mut d: Vector = smallvec::smallvec![0.0; m];
            d[r] = s;
            dirs.push(d);
        }
    }
    if m > 1 {
        for corner in 0..(1usize << m.min(6)) {
            let d: Vector = (0..m)
                .map(|r| if r < 6 && corner >> r & 1 == 1 { 1.0 } else { -1.0 } / (m as f64).sqrt())
                .collect();
            dirs.push(d);
        }
    }
    dirs
}

/// Evaluates `max |w^i(t_k, x)|` over knots with `T/2 <= t_k < T` and points
/// of the sphere `|x| = r`, and fits `log max = log C + lambda log r` by least
/// squares. Early knots are skipped since their clouds are too narrow; the
/// terminal knot only reproduces the fit of `g`.
pub fn growth_diagnostic(sol: &BsdeSolution, radii: &[f64]) -> Result<GrowthReport> {
    if radii.len() < 2 || radii.iter().any(|r| !(*r > 0.0)) {
        return Err(Error::Config("growth diagnostic needs at least two positive radii".into()));
    }
    let dirs = sphere_directions(sol.dim);
    let half = sol.grid.t0 + 0.5 * (sol.grid.horizon - sol.grid.t0);
    let knots: Vec<usize> = (0..sol.grid.n_steps).filter(|&k| sol.grid.knot(k) >= half).collect();
    let designs = sol.designs();
    let mut max_abs = [Vec::new(), Vec::new()];
    for &r in radii {
        for i in 0..2 {
            let mut best = 0.0_f64;
            for &k in &knots {
                for d in &dirs {
                    let x: Vector = d.iter().map(|c| c * r).collect();
                    best = best.max(designs[k].eval(&sol.coeffs_y[i][k], &x).abs());
                }
            }
            max_abs[i].push(best);
        }
    }
    let mut exponent = [0.0; 2];
    let mut constant = [0.0; 2];
    let lx: Vec<f64> = radii.iter().map(|r| r.ln()).collect();
    for i in 0..2 {
        let ly: Vec<f64> = max_abs[i].iter().map(|v| v.max(f64::MIN_POSITIVE).ln()).collect();
        let mx = lx.iter().sum::<f64>() / lx.len() as f64;
        let my = ly.iter().sum::<f64>() / ly.len() as f64;
        let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
        let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
        exponent[i] = sxy / sxx;
        constant[i] = (my - exponent[i] * mx).exp();
    }
    Ok(GrowthReport {
        radii: radii.to_vec(),
        max_abs,
        exponent,
        constant,
    })
}

/// Relative tolerance for [`growth_stable`].
pub const GROWTH_STABILITY: f64 = 0.2;

/// Whether the fitted exponents of two solutions (e.g. mollification levels
/// `n` and `2n`) agree within 20% per player; exponents below one are
/// compared on an absolute scale of one.
pub fn growth_stable(a: &GrowthReport, b: &GrowthReport) -> bool {
    (0..2).all(|i| {
        let (x, y) = (a.exponent[i], b.exponent[i]);
        x.is_finite() && y.is_finite() && (x - y).abs() <= GROWTH_STABILITY * x.abs().max(y.abs()).max(1.0)
    })
}
