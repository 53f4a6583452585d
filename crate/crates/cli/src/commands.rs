//! Subcommand pipelines. Each returns whether its check passed and the
//! summary line; artifacts are written under the configured output directory.

use std::io;

use nash_bsde::bsde::{solve_coupled, BsdeSolution};
use nash_bsde::density::{
    aronson_grid, check_aronson, domination_check, gaussian_density, lognormal_mass_report, AronsonParams,
    DominationReport, LognormalMassReport,
};
use nash_bsde::game::{check_isaacs, GameSpec, Player};
use nash_bsde::mollify::{verify_generator_properties, GeneratorReport, MollifyParams, SUP_DISTANCE_NOISE};
use nash_bsde::payoff::{deviation_test, estimate_payoff, standard_family, Method, NashReport};
use nash_bsde::quadrature::{integrate_box, Integral};
use nash_bsde::sde::simulate_reference;
use serde::Serialize;

use crate::config::{ConfigError, RunConfig};
use crate::output::{fmt_f64, indexed, nums, Artifacts, Summary};

#[derive(Debug)]
pub enum CliError {
    Config(ConfigError),
    Numerical(nash_bsde::Error),
    Io(io::Error),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

impl From<nash_bsde::Error> for CliError {
    fn from(e: nash_bsde::Error) -> Self {
        match e {
            nash_bsde::Error::Config(message) => CliError::Config(ConfigError {
                field: String::new(),
                message,
            }),
            other => CliError::Numerical(other),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Io(e)
    }
}

pub struct Outcome {
    pub pass: bool,
    pub summary: Summary,
}

type Run = Result<Outcome, CliError>;

fn solve(cfg: &RunConfig, spec: &GameSpec) -> Result<BsdeSolution, CliError> {
    let mc = cfg.monte_carlo;
    let bundle = simulate_reference(spec, cfg.time_grid(), &cfg.x0, mc.n_paths, mc.seed)?;
    let mollify = cfg.mollify.map(MollifyParams::from);
    Ok(solve_coupled(spec, &bundle, cfg.basis, mollify, cfg.picard_params())?)
}

/// `paths.csv`: one row per exported path per knot.
pub fn simulate(cfg: &RunConfig, out: &mut Artifacts) -> Run {
    let spec = cfg.build_game()?;
    let mc = cfg.monte_carlo;
    let grid = cfg.time_grid();
    let bundle = simulate_reference(&spec, grid, &cfg.x0, mc.n_paths, mc.seed)?;
    let m = spec.dim;
    let exported = cfg.export.max_paths.min(mc.n_paths);
    let mut header = vec!["path_id".to_string(), "t".to_string()];
    header.extend(indexed("x", m));
    let mut rows = Vec::with_capacity(exported * (grid.n_steps + 1));
    for j in 0..exported {
        for k in 0..=grid.n_steps {
            let mut row = vec![j.to_string(), fmt_f64(grid.knot(k))];
            row.extend(nums(bundle.state(j, k)));
            rows.push(row);
        }
    }
    out.csv("paths.csv", &header, &rows)?;
    let terminal = bundle.states_at(grid.n_steps);
    let mean_xt = terminal.iter().step_by(m).sum::<f64>() / mc.n_paths as f64;
    Ok(Outcome {
        pass: true,
        summary: Summary::new("simulate", true)
            .int("n_paths", mc.n_paths)
            .int("exported_paths", exported)
            .int("n_steps", grid.n_steps)
            .int("fingerprint", format!("{:016x}", bundle.fingerprint()))
            .num("mean_x1_T", mean_xt),
    })
}

/// `solution.json` and `convergence.csv`.
pub fn solve_cmd(cfg: &RunConfig, out: &mut Artifacts) -> Run {
    let spec = cfg.build_game()?;
    let sol = solve(cfg, &spec)?;
    out.json("solution.json", "bsde_solution", &sol)?;
    let d = &sol.diagnostics;
    let header: Vec<String> = ["knot", "t", "picard_iterations", "final_residual", "converged", "condition_number"]
        .map(String::from)
        .to_vec();
    let rows: Vec<Vec<String>> = (0..sol.grid.n_steps)
        .map(|k| {
            let res = &d.picard_residuals[k];
            vec![
                k.to_string(),
                fmt_f64(sol.grid.knot(k)),
                (res.len() + 1).to_string(),
                fmt_f64(res.last().copied().unwrap_or(0.0)),
                d.picard_converged[k].to_string(),
                fmt_f64(d.condition_numbers[k]),
            ]
        })
        .collect();
    out.csv("convergence.csv", &header, &rows)?;
    Ok(Outcome {
        pass: true,
        summary: Summary::new("solve", true)
            .num("y0_1", sol.y0(Player::One))
            .num("y0_2", sol.y0(Player::Two))
            .num("y0_se_1", d.y0_std_error[0])
            .num("y0_se_2", d.y0_std_error[1])
            .num("z_energy_1", d.z_energy[0])
            .num("z_energy_2", d.z_energy[1])
            .int("picard_warnings", d.picard_warnings)
            .int("regression_fallbacks", d.regression_fallbacks),
    })
}

#[derive(Serialize)]
struct NashOutput<'a> {
    /// `w^i(t0, x0)` of the solved system, next to `report.equilibrium`.
    w0: [f64; 2],
    report: &'a NashReport,
}

/// `nash_report.csv` (one row per deviation) and `nash_report.json`.
pub fn verify_nash(cfg: &RunConfig, out: &mut Artifacts) -> Run {
    let spec = cfg.build_game()?;
    let sol = solve(cfg, &spec)?;
    let eq = spec.equilibrium_feedbacks()?;
    let family = standard_family(&spec, cfg.family_sizes(), cfg.monte_carlo.seed)?;
    let grid = cfg.time_grid();
    let (n_paths, seed) = (cfg.nash_paths(), cfg.nash_seed());
    let mut report = deviation_test(&spec, &sol, &eq, &family, grid, &cfg.x0, n_paths, seed, cfg.nash.rel_tol)?;
    if cfg.nash.direct_check {
        let direct = estimate_payoff(&spec, &eq, &sol, grid, &cfg.x0, n_paths, seed, Method::DirectControlled)?;
        report.equilibrium_direct = Some(direct);
    }
    let header: Vec<String> = [
        "player",
        "kind",
        "description",
        "payoff",
        "std_error",
        "improvement",
        "improvement_se",
        "tolerance",
        "pass",
    ]
    .map(String::from)
    .to_vec();
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            vec![
                r.player.number().to_string(),
                serde_json::to_value(r.kind)
                    .ok()
                    .and_then(|v| v.as_str().map(String::from))
                    .unwrap_or_default(),
                r.description.clone(),
                fmt_f64(r.payoff),
                fmt_f64(r.std_error),
                fmt_f64(r.improvement),
                fmt_f64(r.improvement_se),
                fmt_f64(r.tolerance),
                r.pass.to_string(),
            ]
        })
        .collect();
    out.csv("nash_report.csv", &header, &rows)?;
    let w0 = [sol.y0(Player::One), sol.y0(Player::Two)];
    out.json("nash_report.json", "nash_report", &NashOutput { w0, report: &report })?;
    let worst = report
        .rows
        .iter()
        .map(|r| r.improvement - r.tolerance)
        .fold(f64::NEG_INFINITY, f64::max);
    let failures = report.rows.iter().filter(|r| !r.pass).count();
    Ok(Outcome {
        pass: report.pass,
        summary: Summary::new("verify-nash", report.pass)
            .int("deviations", report.rows.len())
            .int("failures", failures)
            .num("j_eq_1", report.equilibrium[0].value)
            .num("j_eq_2", report.equilibrium[1].value)
            .num("w0_1", w0[0])
            .num("w0_2", w0[1])
            .num("max_excess", worst)
            .num("weight_mean", report.weights.mean),
    })
}

/// `isaacs.csv`: one row per sampled `(t, x, z1, z2)`.
pub fn check_isaacs_cmd(cfg: &RunConfig, out: &mut Artifacts) -> Run {
    let spec = cfg.build_game()?;
    let c = cfg.isaacs;
    let report = check_isaacs(&spec, c.samples, c.grid_points, c.seed)?;
    let m = spec.dim;
    let mut header = vec!["sample".to_string(), "t".to_string()];
    header.extend(indexed("x", m));
    header.extend(indexed("z1", m));
    header.extend(indexed("z2", m));
    header.extend(["violation_1", "violation_2", "slack_1", "slack_2"].map(String::from));
    let rows: Vec<Vec<String>> = report
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut row = vec![i.to_string(), fmt_f64(s.t)];
            row.extend(nums(&s.x));
            row.extend(nums(&s.z1));
            row.extend(nums(&s.z2));
            row.extend(nums(&s.violation));
            row.extend(nums(&s.slack));
            row
        })
        .collect();
    out.csv("isaacs.csv", &header, &rows)?;
    Ok(Outcome {
        pass: report.pass,
        summary: Summary::new("check-isaacs", report.pass)
            .int("samples", report.sample_count)
            .int("grid_points", report.grid_n)
            .int("failures", report.failures)
            .num("max_violation", report.max_violation)
            .num("max_slack", report.max_slack),
    })
}

/// Whether the sup-distances at consecutive levels are nonincreasing.
fn sup_distance_monotone(reports: &[GeneratorReport]) -> bool {
    reports.windows(2).all(|w| {
        let (a, b) = (w[0].sup_distance[0], w[1].sup_distance[0]);
        b <= a + SUP_DISTANCE_NOISE * a.max(1.0)
    })
}

/// `generator.csv`: one row per mollification level.
pub fn verify_generator(cfg: &RunConfig, out: &mut Artifacts) -> Run {
    let spec = cfg.build_game()?;
    let g = &cfg.generator;
    let mut reports = Vec::with_capacity(g.levels.len());
    for &n in &g.levels {
        let params = MollifyParams {
            n,
            quad_points: g.quad_points,
            mollifier_radius: g.mollifier_radius,
        };
        reports.push(verify_generator_properties(&spec, params, g.samples, g.seed)?);
    }
    let header: Vec<String> = [
        "n",
        "samples",
        "node_count",
        "mass_error",
        "lipschitz_h",
        "lipschitz_2h",
        "lipschitz_pass",
        "growth_c_fitted",
        "growth_c_uniform",
        "growth_ratio",
        "growth_pass",
        "bound_c_n",
        "nonzero_outside_support",
        "bound_pass",
        "sup_distance_n",
        "sup_distance_2n",
        "convergence_pass",
        "pass",
    ]
    .map(String::from)
    .to_vec();
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.n.to_string(),
                r.samples.to_string(),
                r.node_count.to_string(),
                fmt_f64(r.mass_error),
                fmt_f64(r.lipschitz[0]),
                fmt_f64(r.lipschitz[1]),
                r.lipschitz_pass.to_string(),
                fmt_f64(r.growth_c_fitted),
                fmt_f64(r.growth_c_uniform),
                fmt_f64(r.growth_ratio),
                r.growth_pass.to_string(),
                fmt_f64(r.bound_c_n),
                r.nonzero_outside_support.to_string(),
                r.bound_pass.to_string(),
                fmt_f64(r.sup_distance[0]),
                fmt_f64(r.sup_distance[1]),
                r.convergence_pass.to_string(),
                r.pass.to_string(),
            ]
        })
        .collect();
    out.csv("generator.csv", &header, &rows)?;
    let monotone = sup_distance_monotone(&reports);
    let pass = monotone && reports.iter().all(|r| r.pass);
    let max_ratio = reports.iter().map(|r| r.growth_ratio).fold(0.0, f64::max);
    Ok(Outcome {
        pass,
        summary: Summary::new("verify-generator", pass)
            .int("levels", reports.len())
            .int("failed_levels", reports.iter().filter(|r| !r.pass).count())
            .num("max_growth_ratio", max_ratio)
            .int("sup_distance_monotone", monotone),
    })
}

#[derive(Serialize)]
struct DensityOutput {
    /// Frozen diffusion coefficient `sigma(t0, x0)`, row-major.
    sigma: Vec<f64>,
    gaussian_mass: Integral,
    gaussian_mass_pass: bool,
    aronson_params: AronsonParams,
    max_lower_violation: f64,
    max_upper_violation: f64,
    aronson_pass: bool,
    domination: DominationReport,
    domination_bound_pass: bool,
    lognormal: LognormalMassReport,
    pass: bool,
}

/// Tolerance on the unit mass of the Gaussian kernel.
const MASS_TOL: f64 = 1e-4;

/// `density.csv` (the Aronson grid) and `density.json`. The Gaussian family
/// uses the diffusion coefficient frozen at `(t0, x0)`.
pub fn density_check(cfg: &RunConfig, out: &mut Artifacts) -> Run {
    let spec = cfg.build_game()?;
    let d = &cfg.density;
    let m = spec.dim;
    let t0 = cfg.grid.t0;
    let x0 = cfg.x0.clone();
    let sigma: Vec<f64> = (spec.sigma)(t0, &x0).to_vec();
    let kernel = |from: f64| {
        let (x0, sigma) = (x0.clone(), sigma.clone());
        move |s: f64, x: &[f64]| gaussian_density(from, &x0, s, x, &sigma)
    };

    // unit mass at the latest elapsed time, on +-10 standard deviations
    let tau = d.s_hi;
    let sd: Vec<f64> = (0..m)
        .map(|r| (0..m).map(|c| sigma[r * m + c].powi(2)).sum::<f64>().sqrt() * tau.sqrt())
        .collect();
    let lo: Vec<f64> = x0.iter().zip(&sd).map(|(x, s)| x - 10.0 * s).collect();
    let hi: Vec<f64> = x0.iter().zip(&sd).map(|(x, s)| x + 10.0 * s).collect();
    let level = match m {
        1 => 10,
        2 => 8,
        3 => 6,
        _ => 4,
    };
    let at_tau = kernel(t0);
    let failure = std::cell::RefCell::new(None);
    let gaussian_mass = integrate_box(
        |x| {
            at_tau(t0 + tau, x).unwrap_or_else(|e| {
                failure.borrow_mut().get_or_insert(e);
                f64::NAN
            })
        },
        &lo,
        &hi,
        level,
    );
    if let Some(e) = failure.into_inner() {
        return Err(e.into());
    }
    let gaussian_mass_pass = (gaussian_mass.value - 1.0).abs() <= MASS_TOL;

    let params = cfg.aronson_params(m);
    let grid = aronson_grid(&x0, t0 + d.s_lo, t0 + d.s_hi, d.n_s, d.radius, d.n_x);
    let aronson = check_aronson(params, kernel(t0), t0, &x0, &grid)?;

    let dom = d.domination;
    let from = t0 + dom.t1;
    let box_lo: Vec<f64> = x0.iter().map(|x| x - dom.half_width).collect();
    let box_hi: Vec<f64> = x0.iter().map(|x| x + dom.half_width).collect();
    let domination = domination_check(
        kernel(from),
        kernel(from),
        from,
        dom.delta,
        cfg.grid.horizon,
        &box_lo,
        &box_hi,
        dom.q,
        dom.level,
    )?;
    let domination_bound_pass = domination.integral.value <= cfg.grid.horizon + 1e-6;

    let ln = d.lognormal;
    let lognormal = lognormal_mass_report(ln.t, ln.x, ln.s)?;

    let mut header = vec!["s".to_string()];
    header.extend(indexed("x", m));
    header.extend(["density", "lower", "upper", "lower_violation", "upper_violation"].map(String::from));
    let rows: Vec<Vec<String>> = aronson
        .rows
        .iter()
        .map(|r| {
            let mut row = vec![fmt_f64(r.s)];
            row.extend(nums(&r.x));
            row.extend(nums(&[r.density, r.lower, r.upper, r.lower_violation, r.upper_violation]));
            row
        })
        .collect();
    out.csv("density.csv", &header, &rows)?;

    let pass = gaussian_mass_pass && aronson.pass && domination.pass && domination_bound_pass;
    let summary = Summary::new("density-check", pass)
        .num("gaussian_mass", gaussian_mass.value)
        .num("max_lower_violation", aronson.max_lower_violation)
        .num("max_upper_violation", aronson.max_upper_violation)
        .num("domination_integral", domination.integral.value)
        .num("domination_relative_change", domination.relative_change)
        .int("lognormal_unit_mass", &lognormal.unit_mass);
    out.json(
        "density.json",
        "density_check",
        &DensityOutput {
            sigma,
            gaussian_mass,
            gaussian_mass_pass,
            aronson_params: params,
            max_lower_violation: aronson.max_lower_violation,
            max_upper_violation: aronson.max_upper_violation,
            aronson_pass: aronson.pass,
            domination,
            domination_bound_pass,
            lognormal,
            pass,
        },
    )?;
    Ok(Outcome { pass, summary })
}
