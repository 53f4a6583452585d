//! Payoff estimation under feedback strategies and Nash certification by
//! unilateral deviations.
//!
//! `J^i(u, v) = E^{(u,v)}[ sum_k h_i(t_k, X_k, u_k, v_k) dt + g^i(X_T) ]` is
//! estimated either by reweighting reference paths with the Girsanov density
//! or by simulating the controlled dynamics directly. Deviation tests reuse
//! one reference bundle for the equilibrium and every deviation, so each
//! improvement is a paired difference over the same paths.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsde::BsdeSolution;
use crate::error::{Error, Result};
use crate::game::{FeedbackControl, FeedbackPair, GameSpec, Player};
use crate::linalg::Vector;
use crate::sde::{
    feedback_controls, mean_and_se, reference_functionals_by, simulate_controlled, simulate_reference,
    GradientField, PathBundle, TimeGrid,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    GirsanovWeighted,
    DirectControlled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PayoffEstimate {
    pub player: Player,
    pub value: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub method: Method,
}

/// Sample mean of the Girsanov weights and its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightCheck {
    pub mean: f64,
    pub std_error: f64,
    /// `|mean - 1| <= 4 SE`.
    pub pass: bool,
}

impl WeightCheck {
    fn from_weights(w: &[f64]) -> Self {
        let (mean, std_error) = mean_and_se(w);
        WeightCheck {
            mean,
            std_error,
            pass: (mean - 1.0).abs() <= 4.0 * std_error,
        }
    }
}

/// Gradients of a [`GradientField`] tabulated along a bundle, so that
/// feedbacks can be re-evaluated on the same paths without re-evaluating the
/// field.
struct GradientTable {
    m: usize,
    steps: usize,
    z: [Vec<f64>; 2],
}

impl GradientTable {
    fn new(bundle: &PathBundle, field: &dyn GradientField) -> Self {
        let m = bundle.dim;
        let steps = bundle.grid.n_steps;
        let z = Player::BOTH.map(|p| {
            (0..bundle.n_paths)
                .into_par_iter()
                .flat_map_iter(|j| {
                    (0..steps).flat_map(move |k| field.gradient(p, bundle.grid.knot(k), bundle.state(j, k)))
                })
                .collect()
        });
        GradientTable { m, steps, z }
    }

    fn at(&self, j: usize, k: usize) -> (&[f64], &[f64]) {
        let off = (j * self.steps + k) * self.m;
        (&self.z[0][off..off + self.m], &self.z[1][off..off + self.m])
    }
}

/// Per-path `zeta_T * cost_i` and `zeta_T` along a reference bundle.
struct WeightedCosts {
    weighted: [Vec<f64>; 2],
    weights: Vec<f64>,
}

fn weighted_costs(
    spec: &GameSpec,
    bundle: &PathBundle,
    table: &GradientTable,
    feedbacks: [&FeedbackControl; 2],
) -> Result<WeightedCosts> {
    let fun = reference_functionals_by(spec, bundle, |j, k, t, x| {
        let (z1, z2) = table.at(j, k);
        (feedbacks[0].eval(t, x, z1, z2), feedbacks[1].eval(t, x, z1, z2))
    })?;
    let weights: Vec<f64> = fun.log_weights.iter().map(|lw| lw.exp()).collect();
    if let Some(j) = weights.iter().position(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(Error::Simulation {
            path: j,
            step: bundle.grid.n_steps,
            reason: "Girsanov weight is not positive and finite".into(),
        });
    }
    let weighted = [0, 1].map(|i| weights.iter().zip(&fun.costs[i]).map(|(w, c)| w * c).collect::<Vec<f64>>());
    for w in &weighted {
        if let Some(j) = w.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteCost { path: j });
        }
    }
    Ok(WeightedCosts { weighted, weights })
}

fn estimates(values: &[Vec<f64>; 2], method: Method) -> [PayoffEstimate; 2] {
    Player::BOTH.map(|p| {
        let (value, std_error) = mean_and_se(&values[p.index()]);
        PayoffEstimate {
            player: p,
            value,
            std_error,
            n_paths: values[0].len(),
            method,
        }
    })
}

/// Costs along controlled paths, left-point running cost plus terminal cost.
fn controlled_costs(
    spec: &GameSpec,
    bundle: &PathBundle,
    feedbacks: &FeedbackPair,
    z_source: &dyn GradientField,
) -> Result<[Vec<f64>; 2]> {
    let n = bundle.grid.n_steps;
    let dt = bundle.grid.dt();
    let rows: Vec<Result<[f64; 2]>> = (0..bundle.n_paths)
        .into_par_iter()
        .map(|j| {
            let mut c = [0.0, 0.0];
            for k in 0..n {
                let t = bundle.grid.knot(k);
                let x = bundle.state(j, k);
                let (u, v) = feedback_controls(feedbacks, z_source, t, x);
                c[0] += (spec.running_cost[0])(t, x, &u, &v) * dt;
                c[1] += (spec.running_cost[1])(t, x, &u, &v) * dt;
            }
            let xt = bundle.state(j, n);
            c[0] += (spec.terminal_cost[0])(xt);
            c[1] += (spec.terminal_cost[1])(xt);
            if c[0].is_finite() && c[1].is_finite() {
                Ok(c)
            } else {
                Err(Error::NonFiniteCost { path: j })
            }
        })
        .collect();
    let mut out = [Vec::with_capacity(bundle.n_paths), Vec::with_capacity(bundle.n_paths)];
    for r in rows {
        let c = r?;
        out[0].push(c[0]);
        out[1].push(c[1]);
    }
    Ok(out)
}

/// `[J^1, J^2]` under `feedbacks`, whose `z` arguments come from `z_source`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_payoff(
    spec: &GameSpec,
    feedbacks: &FeedbackPair,
    z_source: &dyn GradientField,
    grid: TimeGrid,
    x0: &[f64],
    n_paths: usize,
    seed: u64,
    method: Method,
) -> Result<[PayoffEstimate; 2]> {
    Ok(estimate_payoff_with_weights(spec, feedbacks, z_source, grid, x0, n_paths, seed, method)?.0)
}

/// As [`estimate_payoff`]; the Girsanov method also returns its weight check.
#[allow(clippy::too_many_arguments)]
pub fn estimate_payoff_with_weights(
    spec: &GameSpec,
    feedbacks: &FeedbackPair,
    z_source: &dyn GradientField,
    grid: TimeGrid,
    x0: &[f64],
    n_paths: usize,
    seed: u64,
    method: Method,
) -> Result<([PayoffEstimate; 2], Option<WeightCheck>)> {
    match method {
        Method::GirsanovWeighted => {
            let bundle = simulate_reference(spec, grid, x0, n_paths, seed)?;
            let table = GradientTable::new(&bundle, z_source);
            let wc = weighted_costs(spec, &bundle, &table, [&feedbacks[0], &feedbacks[1]])?;
            Ok((estimates(&wc.weighted, method), Some(WeightCheck::from_weights(&wc.weights))))
        }
        Method::DirectControlled => {
            let bundle = simulate_controlled(spec, grid, x0, feedbacks, z_source, n_paths, seed)?;
            let costs = controlled_costs(spec, &bundle, feedbacks, z_source)?;
            Ok((estimates(&costs, method), None))
        }
    }
}

/// `sqrt(se_a^2 + se_b^2)`.
pub fn combined_se(a: &PayoffEstimate, b: &PayoffEstimate) -> f64 {
    a.std_error.hypot(b.std_error)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct W0Row {
    pub player: Player,
    pub w0: f64,
    pub j: f64,
    pub std_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct W0Report {
    pub rows: [W0Row; 2],
    pub weights: WeightCheck,
    pub pass: bool,
}

/// Default relative discretization allowance for [`verify_w0_equals_j`].
pub const W0_ALLOWANCE: f64 = 0.02;

/// Compares `w^i(t_0, x_0)` from `sol` with the Girsanov estimate of
/// `J^i(feedbacks)`: pass iff `|W_0 - J| <= max(3 SE, allowance |J|)`.
pub fn verify_w0_equals_j(
    spec: &GameSpec,
    sol: &BsdeSolution,
    feedbacks: &FeedbackPair,
    grid: TimeGrid,
    n_paths: usize,
    seed: u64,
    allowance: f64,
) -> Result<W0Report> {
    let (est, wc) = estimate_payoff_with_weights(
        spec,
        feedbacks,
        sol,
        grid,
        &sol.x0,
        n_paths,
        seed,
        Method::GirsanovWeighted,
    )?;
    let rows = est.map(|e| {
        let w0 = sol.y0(e.player);
        let tolerance = (3.0 * e.std_error).max(allowance * e.value.abs());
        W0Row {
            player: e.player,
            w0,
            j: e.value,
            std_error: e.std_error,
            tolerance,
            pass: (w0 - e.value).abs() <= tolerance,
        }
    });
    Ok(W0Report {
        pass: rows.iter().all(|r| r.pass),
        rows,
        weights: wc.expect("Girsanov run reports weights"),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviationKind {
    Constants,
    BangBang,
    PerturbedFeedback,
    Custom,
}

/// A unilateral deviation: `player` switches to `control`, the opponent keeps
/// its equilibrium feedback.
#[derive(Debug, Clone)]
pub struct Deviation {
    pub player: Player,
    pub kind: DeviationKind,
    pub control: FeedbackControl,
}

#[derive(Debug, Clone, Default)]
pub struct DeviationFamily {
    pub deviations: Vec<Deviation>,
}

impl DeviationFamily {
    pub fn extend(&mut self, other: DeviationFamily) {
        self.deviations.extend(other.deviations);
    }

    pub fn len(&self) -> usize {
        self.deviations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deviations.is_empty()
    }

    /// One-line summary, e.g. `player1: 9 constants + 4 bang_bang`.
    pub fn describe(&self) -> String {
        let mut parts = Vec::new();
        for p in Player::BOTH {
            let mut counts: Vec<(DeviationKind, usize)> = Vec::new();
            for d in self.deviations.iter().filter(|d| d.player == p) {
                match counts.iter_mut().find(|(k, _)| *k == d.kind) {
                    Some((_, c)) => *c += 1,
                    None => counts.push((d.kind, 1)),
                }
            }
            if !counts.is_empty() {
                let body: Vec<String> = counts.iter().map(|(k, c)| format!("{c} {}", kind_name(*k))).collect();
                parts.push(format!("player{}: {}", p.number(), body.join(" + ")));
            }
        }
        parts.join("; ")
    }
}

fn kind_name(kind: DeviationKind) -> &'static str {
    match kind {
        DeviationKind::Constants => "constants",
        DeviationKind::BangBang => "bang_bang",
        DeviationKind::PerturbedFeedback => "perturbed_feedback",
        DeviationKind::Custom => "custom",
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic uniform in `[-1, 1)` from a key.
fn hash_unit(key: u64) -> f64 {
    (splitmix(key) >> 11) as f64 / (1u64 << 52) as f64 - 1.0
}

fn fmt_point(v: &[f64]) -> String {
    let items: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
    items.join(";")
}

/// Deviations of one kind for one player.
///
/// * `Constants`: `count` points on the diagonal of the box from `lo` to `hi`
///   (the midpoint when `count == 1`); for a scalar box this is the uniform grid.
/// * `BangBang`: member `j = 1..=count` starts at `lo`, and switches corner at
///   the `j` interior times `T l / (j + 1)`, `l = 1..=j`.
/// * `PerturbedFeedback`: member `j` adds `U(-0.1 w, 0.1 w)` noise (box width
///   `w`) to the equilibrium map and clips to the box; the noise is a fixed
///   function of `(seed, j, coordinate, t)`.
pub fn make_player_deviations(
    spec: &GameSpec,
    player: Player,
    kind: DeviationKind,
    count: usize,
    seed: u64,
) -> Result<DeviationFamily> {
    if count == 0 {
        return Err(Error::Config("deviation count must be >= 1".into()));
    }
    let bx = spec.control_box(player).clone();
    let tag = format!("player{}", player.number());
    let mut deviations = Vec::with_capacity(count);
    match kind {
        DeviationKind::Constants => {
            for l in 0..count {
                let s = if count == 1 { 0.5 } else { l as f64 / (count - 1) as f64 };
                let point = bx.diagonal_point(s);
                let label = format!("{tag} constant {}", fmt_point(&point));
                deviations.push(FeedbackControl::constant(label, point));
            }
        }
        DeviationKind::BangBang => {
            let horizon = spec.horizon;
            for j in 1..=count {
                let (lo, hi) = (bx.lo.clone(), bx.hi.clone());
                let label = format!("{tag} bang_bang {j} switch{}", if j == 1 { "" } else { "es" });
                deviations.push(FeedbackControl::new(label, move |t, _, _, _| {
                    // number of switch times T l / (j + 1) already passed
                    let passed = ((t / horizon * (j + 1) as f64) + 1e-12).floor().clamp(0.0, j as f64) as usize;
                    if passed.is_multiple_of(2) {
                        lo.clone()
                    } else {
                        hi.clone()
                    }
                }));
            }
        }
        DeviationKind::PerturbedFeedback => {
            let eq = spec.equilibrium_feedbacks()?;
            let base = eq[player.index()].clone();
            for j in 0..count {
                let bx = bx.clone();
                let base = base.clone();
                let key = splitmix(seed ^ splitmix(((player.index() as u64) << 32) | j as u64));
                let label = format!("{tag} perturbed {j}");
                deviations.push(FeedbackControl::new(label, move |t, x, z1, z2| {
                    let u = base.eval(t, x, z1, z2);
                    let noisy: Vector = u
                        .iter()
                        .enumerate()
                        .map(|(r, val)| {
                            let k = splitmix(key ^ splitmix(t.to_bits()) ^ (r as u64).wrapping_mul(0x5851_f42d));
                            val + 0.1 * bx.width(r) * hash_unit(k)
                        })
                        .collect();
                    bx.clamp(&noisy)
                }));
            }
        }
        DeviationKind::Custom => {
            return Err(Error::Config("custom deviations are built directly".into()));
        }
    }
    Ok(DeviationFamily {
        deviations: deviations
            .into_iter()
            .map(|control| Deviation { player, kind, control })
            .collect(),
    })
}

/// [`make_player_deviations`] for both players.
pub fn make_deviation_family(spec: &GameSpec, kind: DeviationKind, count: usize, seed: u64) -> Result<DeviationFamily> {
    let mut fam = make_player_deviations(spec, Player::One, kind, count, seed)?;
    fam.extend(make_player_deviations(spec, Player::Two, kind, count, seed)?);
    Ok(fam)
}

/// Sizes of the three deviation kinds per player.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FamilySizes {
    pub constants: usize,
    pub bang_bang: usize,
    pub perturbed: usize,
}

impl Default for FamilySizes {
    fn default() -> Self {
        FamilySizes {
            constants: 9,
            bang_bang: 4,
            perturbed: 5,
        }
    }
}

/// Constants, bang-bang switchers and perturbed feedbacks for both players;
/// kinds with size zero are skipped.
pub fn standard_family(spec: &GameSpec, sizes: FamilySizes, seed: u64) -> Result<DeviationFamily> {
    let mut fam = DeviationFamily::default();
    for p in Player::BOTH {
        for (kind, count) in [
            (DeviationKind::Constants, sizes.constants),
            (DeviationKind::BangBang, sizes.bang_bang),
            (DeviationKind::PerturbedFeedback, sizes.perturbed),
        ] {
            if count > 0 {
                fam.extend(make_player_deviations(spec, p, kind, count, seed)?);
            }
        }
    }
    Ok(fam)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationRow {
    pub player: Player,
    pub kind: DeviationKind,
    pub description: String,
    pub payoff: f64,
    pub std_error: f64,
    /// `J_eq - J_dev` for the deviating player (positive = deviation pays).
    pub improvement: f64,
    /// Standard error of the paired differences.
    pub improvement_se: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NashReport {
    pub n_paths: usize,
    pub seed: u64,
    pub rel_tol: f64,
    pub family: String,
    pub equilibrium: [PayoffEstimate; 2],
    pub equilibrium_direct: Option<[PayoffEstimate; 2]>,
    pub weights: WeightCheck,
    pub rows: Vec<DeviationRow>,
    pub pass: bool,
}

/// Row tolerance `max(3 SE, rel_tol |J_eq|)`.
pub fn deviation_tolerance(improvement_se: f64, rel_tol: f64, j_eq: f64) -> f64 {
    (3.0 * improvement_se).max(rel_tol * j_eq.abs())
}

impl NashReport {
    /// Verdict if the report had been produced with another `rel_tol`.
    pub fn pass_at(&self, rel_tol: f64) -> bool {
        self.rows.iter().all(|r| {
            let j_eq = self.equilibrium[r.player.index()].value;
            r.improvement <= deviation_tolerance(r.improvement_se, rel_tol, j_eq)
        })
    }
}

/// Deviation sweep under common random numbers: every payoff is a Girsanov
/// estimate on the same reference bundle, and the improvement of a deviation
/// is the mean of per-path differences to the equilibrium. A row fails iff
/// its improvement exceeds `max(3 SE, rel_tol |J_eq|)`.
#[allow(clippy::too_many_arguments)]
pub fn deviation_test(
    spec: &GameSpec,
    z_source: &dyn GradientField,
    eq_feedbacks: &FeedbackPair,
    family: &DeviationFamily,
    grid: TimeGrid,
    x0: &[f64],
    n_paths: usize,
    seed: u64,
    rel_tol: f64,
) -> Result<NashReport> {
    if family.is_empty() {
        return Err(Error::Config("deviation family is empty".into()));
    }
    if !(rel_tol >= 0.0) {
        return Err(Error::Config("rel_tol must be >= 0".into()));
    }
    let bundle = simulate_reference(spec, grid, x0, n_paths, seed)?;
    let table = GradientTable::new(&bundle, z_source);
    let eq = weighted_costs(spec, &bundle, &table, [&eq_feedbacks[0], &eq_feedbacks[1]])?;
    let equilibrium = estimates(&eq.weighted, Method::GirsanovWeighted);
    let weights = WeightCheck::from_weights(&eq.weights);

    let mut rows = Vec::with_capacity(family.len());
    for dev in &family.deviations {
        let i = dev.player.index();
        let pair = match dev.player {
            Player::One => [&dev.control, &eq_feedbacks[1]],
            Player::Two => [&eq_feedbacks[0], &dev.control],
        };
        let wc = weighted_costs(spec, &bundle, &table, pair)?;
        let (payoff, std_error) = mean_and_se(&wc.weighted[i]);
        let diffs: Vec<f64> = eq.weighted[i].iter().zip(&wc.weighted[i]).map(|(a, b)| a - b).collect();
        let (improvement, improvement_se) = mean_and_se(&diffs);
        let tolerance = deviation_tolerance(improvement_se, rel_tol, equilibrium[i].value);
        rows.push(DeviationRow {
            player: dev.player,
            kind: dev.kind,
            description: dev.control.label().to_string(),
            payoff,
            std_error,
            improvement,
            improvement_se,
            tolerance,
            pass: improvement <= tolerance,
        });
    }
    Ok(NashReport {
        n_paths,
        seed,
        rel_tol,
        family: family.describe(),
        equilibrium,
        equilibrium_direct: None,
        weights,
        pass: rows.iter().all(|r| r.pass),
        rows,
    })
}

/// Mean of the weights as computed by [`crate::sde::girsanov_weight`], with a
/// 4 SE check against one.
pub fn weight_check(weights: &[f64]) -> WeightCheck {
    WeightCheck::from_weights(weights)
}
