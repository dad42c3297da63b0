use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array2;
use otgmm_core::direction::{default_iota, DirectionalObjective, DistanceOptions, MarginalObjective};
use otgmm_core::idset::{default_eta, estimate_identified_set, ParamGrid};
use otgmm_core::inference::{adjusted_bootstrap_test, bootstrap_test, confidence_region, BootstrapOptions};
use otgmm_core::mc::{
    heatmap_svg, population_entropic_point, run_coverage_study, run_rct_demo, simulate_panel_logit, CoverageOptions,
    LogitDgpConfig,
};
use otgmm_core::ot::sinkhorn_warm;
use otgmm_core::panel::{ame_bounds_attrition, slope_identified_set, PanelSummary, PartitionedObjective, SlopeSet};
use otgmm_core::{model_by_name, CostTensor, EmpiricalMeasure, MomentModel, SinkhornOptions};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::io::{num, panel_files, read_panel, read_table, read_weights, write_panel, CsvOut};
use crate::{
    AmeArgs, BootArgs, CliError, Command, DataArgs, IdsetArgs, McArgs, RctArgs, RegionArgs, SearchArgs, SimulateArgs,
    SinkhornArgs, SlopeArgs, SolverArgs, TestArgs, EXIT_ACCEPT, EXIT_REJECT,
};

const DESK_CONFIG: &str = include_str!("../configs/desk.json");

/// What a command read and wrote.
pub struct Outcome {
    pub code: u8,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// Fully resolved parameters, recorded in the manifest.
    pub resolved: Value,
    /// Result printed on standard output.
    pub stdout: Option<String>,
}

/// Monte Carlo study configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    pub dgp: LogitDgpConfig,
    pub epsilon: f64,
    pub iota_scale: f64,
    pub draws: usize,
    pub alpha: f64,
    pub bootstrap_seed: u64,
    pub resolution: usize,
    /// `[low, high, count]` per coordinate.
    pub grid: Vec<(f64, f64, usize)>,
}

pub fn run(cmd: &Command) -> Result<Outcome, CliError> {
    match cmd {
        Command::Sinkhorn(a) => sinkhorn(a),
        Command::Test(a) => test(a),
        Command::Idset(a) => idset(a),
        Command::Region(a) => region(a),
        Command::LogitSlope(a) => logit_slope(a),
        Command::Ame(a) => ame(a),
        Command::Mc(a) => mc(a),
        Command::RctDemo(a) => rct_demo(a),
        Command::SimulatePanel(a) => simulate(a),
        Command::Replay(_) => Err(CliError::usage("replay cannot be nested")),
    }
}

/// Input paths made absolute so a manifest replays from any directory.
pub fn resolve_paths(cmd: &mut Command) -> Result<(), CliError> {
    fn abs(p: &mut PathBuf) -> Result<(), CliError> {
        *p = fs::canonicalize(&*p).map_err(|e| CliError::data(format!("{}: {e}", p.display())))?;
        Ok(())
    }
    fn data(d: &mut DataArgs) -> Result<(), CliError> {
        for p in [&mut d.mu, &mut d.nu, &mut d.panel].into_iter().flatten() {
            abs(p)?;
        }
        Ok(())
    }
    match cmd {
        Command::Sinkhorn(a) => {
            abs(&mut a.cost)?;
            abs(&mut a.mu)?;
            abs(&mut a.nu)?;
        }
        Command::Test(a) => data(&mut a.data)?,
        Command::Idset(a) => data(&mut a.data)?,
        Command::Region(a) => data(&mut a.data)?,
        Command::LogitSlope(a) => abs(&mut a.panel)?,
        Command::Ame(a) => abs(&mut a.slope.panel)?,
        Command::Mc(McArgs { config: Some(p), .. }) | Command::SimulatePanel(SimulateArgs { config: Some(p), .. }) => {
            abs(p)?
        }
        _ => {}
    }
    Ok(())
}

pub fn out_dir(cmd: &Command) -> Option<&Path> {
    match cmd {
        Command::Sinkhorn(a) => a.out.as_deref(),
        Command::Test(a) => a.out.as_deref(),
        Command::Idset(a) => Some(&a.out),
        Command::Region(a) => Some(&a.out),
        Command::LogitSlope(a) => Some(&a.out),
        Command::Ame(a) => Some(&a.slope.out),
        Command::Mc(a) => Some(&a.out),
        Command::RctDemo(a) => Some(&a.out),
        Command::SimulatePanel(a) => Some(&a.out),
        Command::Replay(a) => Some(&a.out),
    }
}

/// Points every output of `cmd` into `dir`.
pub fn redirect(cmd: &mut Command, dir: PathBuf) {
    match cmd {
        Command::Sinkhorn(a) => {
            if let Some(c) = &mut a.coupling_out {
                *c = dir.join(c.file_name().unwrap_or_else(|| "coupling.csv".as_ref()));
            }
            a.out = Some(dir);
        }
        Command::Test(a) => a.out = Some(dir),
        Command::Idset(a) => a.out = dir,
        Command::Region(a) => a.out = dir,
        Command::LogitSlope(a) => a.out = dir,
        Command::Ame(a) => a.slope.out = dir,
        Command::Mc(a) => a.out = dir,
        Command::RctDemo(a) => a.out = dir,
        Command::SimulatePanel(a) => a.out = dir,
        Command::Replay(a) => a.out = dir,
    }
}

fn positive(name: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::usage(format!("--{name} must be positive, got {v}")))
    }
}

fn check_solver(epsilon: f64, s: &SolverArgs) -> Result<SinkhornOptions, CliError> {
    positive("epsilon", epsilon)?;
    positive("tol", s.tol)?;
    if s.max_iter == 0 {
        return Err(CliError::usage("--max-iter must be positive"));
    }
    Ok(SinkhornOptions {
        epsilon,
        tol: s.tol,
        max_iter: s.max_iter,
        epsilon_scaling: true,
    })
}

fn check_boot(b: &BootArgs) -> Result<(), CliError> {
    if !(b.alpha > 0.0 && b.alpha < 1.0) {
        return Err(CliError::usage(format!("--alpha must lie in (0, 1), got {}", b.alpha)));
    }
    if b.draws < 50 {
        return Err(CliError::usage(format!(
            "--bootstrap needs at least 50 draws, got {}",
            b.draws
        )));
    }
    if !(b.iota_scale >= 0.0 && b.iota_scale.is_finite()) {
        return Err(CliError::usage("--iota-scale must be nonnegative"));
    }
    Ok(())
}

fn distance_options(s: &SearchArgs, iota: f64, seed: u64) -> Result<DistanceOptions, CliError> {
    if s.resolution < 3 {
        return Err(CliError::usage("--resolution must be at least 3"));
    }
    Ok(DistanceOptions {
        resolution: s.resolution,
        refine: !s.no_refine,
        iota,
        seed,
        ..Default::default()
    })
}

pub fn parse_grid(axes: &[String]) -> Result<ParamGrid, CliError> {
    let triples = axes
        .iter()
        .map(|s| {
            let parts: Vec<&str> = s.split(':').collect();
            let bad = || CliError::usage(format!("grid axis {s:?} is not low:high:count"));
            if parts.len() != 3 {
                return Err(bad());
            }
            let lo: f64 = parts[0].trim().parse().map_err(|_| bad())?;
            let hi: f64 = parts[1].trim().parse().map_err(|_| bad())?;
            let count: usize = parts[2].trim().parse().map_err(|_| bad())?;
            Ok((lo, hi, count))
        })
        .collect::<Result<Vec<_>, _>>()?;
    ParamGrid::from_triples(&triples).map_err(|e| CliError::usage(e.to_string()))
}

/// Data behind a directional objective, loaded once per command.
enum Source {
    Marginal {
        model: Box<dyn MomentModel>,
        mu: EmpiricalMeasure,
        nu: EmpiricalMeasure,
    },
    Panel(Arc<PanelSummary>),
}

impl Source {
    fn load(d: &DataArgs) -> Result<(Self, Vec<PathBuf>), CliError> {
        let model_name = d.model.as_deref().unwrap_or(if d.panel.is_some() {
            "panel_logit"
        } else {
            "benefit_share"
        });
        if let Some(dir) = &d.panel {
            if model_name != "panel_logit" {
                return Err(CliError::usage("--panel requires --model panel_logit"));
            }
            let data = read_panel(dir)?;
            return Ok((Self::Panel(Arc::new(PanelSummary::from_data(&data)?)), panel_files(dir)));
        }
        let (Some(mu_path), Some(nu_path)) = (&d.mu, &d.nu) else {
            return Err(CliError::usage("give --mu and --nu, or --panel"));
        };
        let (mu, nu) = (read_table(mu_path)?, read_table(nu_path)?);
        let k = match model_name {
            "panel_logit" => mu.headers.len().saturating_sub(1),
            _ => mu.headers.len(),
        };
        let model = model_by_name(model_name, k).map_err(|e| CliError::usage(e.to_string()))?;
        for (t, dim, path) in [(&mu, model.dim_x(), mu_path), (&nu, model.dim_y(), nu_path)] {
            if t.headers.len() != dim {
                return Err(CliError::data(format!(
                    "{}: model {} expects {dim} columns, found {}",
                    path.display(),
                    model_name,
                    t.headers.len()
                )));
            }
        }
        let source = Self::Marginal {
            model,
            mu: EmpiricalMeasure::uniform(mu.rows)?,
            nu: EmpiricalMeasure::uniform(nu.rows)?,
        };
        Ok((source, vec![mu_path.clone(), nu_path.clone()]))
    }

    fn param_dim(&self) -> usize {
        match self {
            Self::Marginal { model, .. } => model.param_dim(),
            Self::Panel(s) => s.k,
        }
    }

    fn sample_size(&self) -> usize {
        match self {
            Self::Marginal { mu, .. } => mu.sample_size(),
            Self::Panel(s) => s.n_org(),
        }
    }

    fn objective(&self, theta: &[f64], opts: SinkhornOptions) -> otgmm_core::Result<Box<dyn DirectionalObjective>> {
        Ok(match self {
            Self::Marginal { model, mu, nu } => Box::new(MarginalObjective::new(model.as_ref(), theta, mu, nu, opts)?),
            Self::Panel(s) => Box::new(PartitionedObjective::new(Arc::clone(s), theta, opts)?),
        })
    }
}

fn check_dim(source: &Source, got: usize) -> Result<(), CliError> {
    if got != source.param_dim() {
        return Err(CliError::usage(format!(
            "parameter has {got} coordinates, the model expects {}",
            source.param_dim()
        )));
    }
    Ok(())
}

fn theta_headers(k: usize) -> impl Iterator<Item = String> {
    (1..=k).map(|c| format!("theta_{c}"))
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn prepare_out(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))
}

fn sinkhorn(a: &SinkhornArgs) -> Result<Outcome, CliError> {
    let mut opts = check_solver(a.epsilon, &a.solver)?;
    opts.epsilon_scaling = !a.no_scaling;
    let cost = read_table(&a.cost)?;
    let m = cost.headers.len();
    let n = cost.rows.len();
    if let Some(i) = cost.rows.iter().position(|r| r.len() != m) {
        return Err(CliError::data(format!(
            "{}:{}: expected {m} columns",
            a.cost.display(),
            i + 2
        )));
    }
    let (wa, wb) = (read_weights(&a.mu)?, read_weights(&a.nu)?);
    if wa.len() != n || wb.len() != m {
        return Err(CliError::data(format!(
            "cost is {n}x{m} but the weights have lengths {} and {}",
            wa.len(),
            wb.len()
        )));
    }
    let c = Array2::from_shape_vec((n, m), cost.rows.concat()).map_err(|e| CliError::data(e.to_string()))?;
    let tensor = CostTensor::from_matrix(c)?;
    let r = sinkhorn_warm(&tensor, &wa, &wb, &opts, None)?;
    let summary = json!({
        "value": r.value,
        "kl_term": r.kl,
        "transport_cost": r.transport_cost,
        "iterations": r.iterations,
        "marginal_error": r.marginal_error,
        "converged": r.converged,
        "epsilon": r.epsilon,
    });
    let stdout = Some(serde_json::to_string_pretty(&summary)?);
    let mut outputs = Vec::new();
    if let Some(dir) = &a.out {
        prepare_out(dir)?;
        let p = dir.join("sinkhorn.json");
        write_json(&p, &summary)?;
        outputs.push(p);
    }
    if let Some(path) = &a.coupling_out {
        let plan = r.coupling(&tensor);
        let mut w = CsvOut::new((0..m).map(|j| format!("col_{}", j + 1)));
        for row in plan.rows() {
            w.row(row.iter().map(|v| num(*v)));
        }
        w.write(path)?;
        outputs.push(path.clone());
    }
    if !r.converged {
        return Err(CliError::data(format!(
            "sinkhorn did not converge in {} iterations (marginal error {:e})",
            r.iterations, r.marginal_error
        )));
    }
    Ok(Outcome {
        code: EXIT_ACCEPT,
        inputs: vec![a.cost.clone(), a.mu.clone(), a.nu.clone()],
        outputs,
        resolved: serde_json::to_value(a)?,
        stdout,
    })
}

fn test(a: &TestArgs) -> Result<Outcome, CliError> {
    let sk = check_solver(a.epsilon, &a.solver)?;
    check_boot(&a.boot)?;
    let (source, inputs) = Source::load(&a.data)?;
    check_dim(&source, a.theta0.len())?;
    let iota = default_iota(source.sample_size(), a.boot.iota_scale);
    let opts = BootstrapOptions {
        draws: a.boot.draws,
        alpha: a.boot.alpha,
        seed: a.boot.seed,
        distance: distance_options(&a.search, iota, a.boot.seed)?,
    };
    let obj = source.objective(&a.theta0, sk)?;
    let r = if a.boot.adjusted {
        adjusted_bootstrap_test(obj.as_ref(), &opts)?
    } else {
        bootstrap_test(obj.as_ref(), &opts)?
    };
    let stdout = Some(serde_json::to_string_pretty(&r)?);
    let mut outputs = Vec::new();
    if let Some(dir) = &a.out {
        prepare_out(dir)?;
        let p = dir.join("test.json");
        write_json(&p, &r)?;
        outputs.push(p);
    }
    Ok(Outcome {
        code: if r.reject { EXIT_REJECT } else { EXIT_ACCEPT },
        inputs,
        outputs,
        resolved: json!({ "args": a, "iota": iota }),
        stdout,
    })
}

fn idset(a: &IdsetArgs) -> Result<Outcome, CliError> {
    let sk = check_solver(a.epsilon, &a.solver)?;
    positive("eta-scale", a.eta_scale)?;
    let grid = parse_grid(&a.grid)?;
    let (source, inputs) = Source::load(&a.data)?;
    check_dim(&source, grid.dim())?;
    let eta = match a.eta {
        Some(e) => {
            positive("eta", e)?;
            e
        }
        None => default_eta(source.sample_size() as f64, a.eta_scale)?,
    };
    let opts = distance_options(&a.search, 0.0, 0)?;
    let est = estimate_identified_set(&grid, eta, &opts, |t| source.objective(t, sk))?;
    prepare_out(&a.out)?;
    let k = grid.dim();
    let mut w = CsvOut::new(theta_headers(k).chain(["d_hat".into(), "member".into()]));
    for ((p, d), m) in grid.points().iter().zip(&est.d_values).zip(&est.members) {
        w.row(p.iter().map(|v| num(*v)).chain([num(*d), (*m as u8).to_string()]));
    }
    let csv = a.out.join("idset.csv");
    w.write(&csv)?;
    let summary = a.out.join("idset.json");
    write_json(
        &summary,
        &json!({
            "eta": eta,
            "grid_points": grid.len(),
            "members": est.member_points(),
            "warnings": est.warnings,
        }),
    )?;
    let mut outputs = vec![csv, summary];
    if k == 2 {
        let max = est.d_values.iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        let p = a.out.join("heatmap.svg");
        fs::write(&p, heatmap_svg(&grid, &est.d_values, (0.0, max), "distance D(theta)")?)?;
        outputs.push(p);
    }
    Ok(Outcome {
        code: EXIT_ACCEPT,
        inputs,
        outputs,
        resolved: json!({ "args": a, "eta": eta }),
        stdout: None,
    })
}

fn region(a: &RegionArgs) -> Result<Outcome, CliError> {
    let sk = check_solver(a.epsilon, &a.solver)?;
    check_boot(&a.boot)?;
    let grid = parse_grid(&a.grid)?;
    let (source, inputs) = Source::load(&a.data)?;
    check_dim(&source, grid.dim())?;
    let iota = default_iota(source.sample_size(), a.boot.iota_scale);
    let opts = BootstrapOptions {
        draws: a.boot.draws,
        alpha: a.boot.alpha,
        seed: a.boot.seed,
        distance: distance_options(&a.search, iota, a.boot.seed)?,
    };
    let r = confidence_region(&grid, &opts, a.boot.adjusted, |t| source.objective(t, sk))?;
    prepare_out(&a.out)?;
    let k = grid.dim();
    let mut w = CsvOut::new(
        theta_headers(k).chain(
            [
                "d_hat",
                "statistic",
                "critical_value",
                "p_value",
                "accepted",
                "unreliable",
            ]
            .map(String::from),
        ),
    );
    for (p, s) in grid.points().iter().zip(&r.per_point) {
        w.row(p.iter().map(|v| num(*v)).chain([
            num(s.d_hat),
            num(s.statistic),
            num(s.critical_value),
            num(s.p_value),
            (!s.reject as u8).to_string(),
            (s.unreliable as u8).to_string(),
        ]));
    }
    let csv = a.out.join("region.csv");
    w.write(&csv)?;
    let mut outputs = vec![csv];
    if k == 2 {
        let pv: Vec<f64> = r.per_point.iter().map(|s| s.p_value).collect();
        let p = a.out.join("heatmap.svg");
        fs::write(&p, heatmap_svg(&grid, &pv, (0.0, 1.0), "bootstrap p-value")?)?;
        outputs.push(p);
    }
    Ok(Outcome {
        code: EXIT_ACCEPT,
        inputs,
        outputs,
        resolved: json!({ "args": a, "iota": iota }),
        stdout: None,
    })
}

fn slope_set(a: &SlopeArgs) -> Result<(SlopeSet, ParamGrid, PanelSummary, Vec<PathBuf>), CliError> {
    positive("epsilon", a.epsilon)?;
    let grid = parse_grid(&a.grid)?;
    let data = read_panel(&a.panel)?;
    if grid.dim() != data.k {
        return Err(CliError::usage(format!(
            "grid has {} axes, the panel has {} covariates",
            grid.dim(),
            data.k
        )));
    }
    let set = slope_identified_set(&data, &grid, a.epsilon)?;
    Ok((set, grid, PanelSummary::from_data(&data)?, panel_files(&a.panel)))
}

fn write_slope_csv(path: &Path, k: usize, set: &SlopeSet) -> Result<(), CliError> {
    let per = |name: &'static str| (1..=k).map(move |c| format!("{name}_{c}"));
    let headers: Vec<String> = theta_headers(k)
        .chain(per("nu_lower"))
        .chain(per("nu_upper"))
        .chain(per("retainer_moment"))
        .chain(per("attriter_lower"))
        .chain(per("attriter_upper"))
        .chain(["p_hat", "clipped_mass", "member"].map(String::from))
        .collect();
    let mut w = CsvOut::new(headers);
    for (b, m) in set.bounds.iter().zip(&set.members) {
        let nums = [
            &b.theta,
            &b.nu_lower,
            &b.nu_upper,
            &b.retainer_moment,
            &b.attriter_lower,
            &b.attriter_upper,
        ]
        .into_iter()
        .flatten()
        .chain([&b.p_hat, &b.clipped_mass])
        .map(|v| num(*v));
        w.row(nums.chain(std::iter::once((*m as u8).to_string())));
    }
    w.write(path)
}

fn logit_slope(a: &SlopeArgs) -> Result<Outcome, CliError> {
    let (set, grid, _, inputs) = slope_set(a)?;
    prepare_out(&a.out)?;
    let csv = a.out.join("slope_bounds.csv");
    write_slope_csv(&csv, grid.dim(), &set)?;
    let summary = a.out.join("slope.json");
    write_json(
        &summary,
        &json!({
            "members": set.members.iter().filter(|m| **m).count(),
            "grid_points": grid.len(),
            "warnings": set.warnings,
        }),
    )?;
    Ok(Outcome {
        code: EXIT_ACCEPT,
        inputs,
        outputs: vec![csv, summary],
        resolved: serde_json::to_value(a)?,
        stdout: None,
    })
}

fn ame(a: &AmeArgs) -> Result<Outcome, CliError> {
    let (set, grid, summary, inputs) = slope_set(&a.slope)?;
    if !(1..=2).contains(&a.tau) {
        return Err(CliError::usage("--tau must be 1 or 2"));
    }
    if a.j == 0 || a.j > grid.dim() {
        return Err(CliError::usage(format!("--j must lie in 1..={}", grid.dim())));
    }
    let accepted: Vec<Vec<f64>> = grid
        .points()
        .iter()
        .zip(&set.members)
        .filter(|(_, m)| **m)
        .map(|(p, _)| p.clone())
        .collect();
    let r = ame_bounds_attrition(&summary, &accepted, a.slope.epsilon, a.grid_size, a.tau, a.j)?;
    let out = &a.slope.out;
    prepare_out(out)?;
    let k = grid.dim();
    let mut w = CsvOut::new(theta_headers(k).chain(["lower".into(), "upper".into()]));
    for (t, (lo, hi)) in r.theta_grid.iter().zip(&r.intervals) {
        w.row(t.iter().map(|v| num(*v)).chain([num(*lo), num(*hi)]));
    }
    let intervals = out.join("ame_intervals.csv");
    w.write(&intervals)?;
    let mut w = CsvOut::new(["lower", "upper"]);
    for (lo, hi) in &r.union {
        w.row([num(*lo), num(*hi)]);
    }
    let union = out.join("ame_union.csv");
    w.write(&union)?;
    let slope = out.join("slope_bounds.csv");
    write_slope_csv(&slope, k, &set)?;
    Ok(Outcome {
        code: EXIT_ACCEPT,
        inputs,
        outputs: vec![intervals, union, slope],
        resolved: serde_json::to_value(a)?,
        stdout: None,
    })
}

fn load_mc_config(path: Option<&Path>) -> Result<(McConfig, Vec<PathBuf>), CliError> {
    let (text, inputs) = match path {
        Some(p) => (
            fs::read_to_string(p).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?,
            vec![p.to_path_buf()],
        ),
        None => (DESK_CONFIG.to_string(), Vec::new()),
    };
    let cfg: McConfig = serde_json::from_str(&text).map_err(|e| CliError::usage(format!("config: {e}")))?;
    Ok((cfg, inputs))
}

fn mc(a: &McArgs) -> Result<Outcome, CliError> {
    let (mut cfg, inputs) = load_mc_config(a.config.as_deref())?;
    if let Some(v) = a.n_sims {
        cfg.dgp.n_sims = v;
    }
    if let Some(v) = a.n_org {
        cfg.dgp.n_org = v;
    }
    if let Some(v) = a.n_ref {
        cfg.dgp.n_ref = v;
    }
    if let Some(v) = a.draws {
        cfg.draws = v;
    }
    if let Some(v) = a.seed {
        cfg.dgp.seed = v;
    }
    let grid = if a.grid.is_empty() {
        ParamGrid::from_triples(&cfg.grid).map_err(|e| CliError::usage(e.to_string()))?
    } else {
        parse_grid(&a.grid)?
    };
    cfg.grid = grid.axes().iter().map(|ax| (ax.low, ax.high, ax.count)).collect();
    cfg.dgp.validate().map_err(|e| CliError::usage(e.to_string()))?;
    positive("epsilon", cfg.epsilon)?;
    check_boot(&BootArgs {
        iota_scale: cfg.iota_scale,
        draws: cfg.draws,
        alpha: cfg.alpha,
        seed: cfg.bootstrap_seed,
        adjusted: false,
    })?;
    let opts = CoverageOptions {
        epsilon: cfg.epsilon,
        iota_scale: cfg.iota_scale,
        bootstrap: BootstrapOptions {
            draws: cfg.draws,
            alpha: cfg.alpha,
            seed: cfg.bootstrap_seed,
            distance: distance_options(
                &SearchArgs {
                    resolution: cfg.resolution,
                    no_refine: false,
                },
                0.0,
                cfg.bootstrap_seed,
            )?,
        },
    };
    let report = run_coverage_study(&cfg.dgp, &grid, &opts)?;
    prepare_out(&a.out)?;
    let k = grid.dim();
    let mut w = CsvOut::new(theta_headers(k).chain(["coverage".into(), "mean_distance".into()]));
    for ((p, c), d) in grid.points().iter().zip(&report.coverage).zip(&report.mean_distance) {
        w.row(p.iter().map(|v| num(*v)).chain([num(*c), num(*d)]));
    }
    let coverage = a.out.join("coverage.csv");
    w.write(&coverage)?;
    let mut w = CsvOut::new(
        std::iter::once("rep".to_string())
            .chain(theta_headers(k))
            .chain(["d_hat", "statistic", "critical_value", "p_value", "reject"].map(String::from)),
    );
    for r in &report.replications {
        for (p, s) in grid.points().iter().zip(&r.points) {
            w.row(
                std::iter::once(r.rep.to_string())
                    .chain(p.iter().map(|v| num(*v)))
                    .chain([num(s.d_hat), num(s.statistic), num(s.critical_value), num(s.p_value)])
                    .chain(std::iter::once((s.reject as u8).to_string())),
            );
        }
    }
    let distance = a.out.join("distance.csv");
    w.write(&distance)?;
    let summary = a.out.join("mc.json");
    write_json(
        &summary,
        &json!({
            "n_sims": report.n_sims,
            "completed": report.replications.len(),
            "failed": report.failed,
            "alpha": report.alpha,
            "population_entropic_point": population_entropic_point(&cfg.dgp).ok(),
        }),
    )?;
    let mut outputs = vec![coverage, distance, summary];
    if k == 2 {
        let p = a.out.join("heatmap.svg");
        fs::write(&p, heatmap_svg(&grid, &report.coverage, (0.0, 1.0), "coverage")?)?;
        outputs.push(p);
    }
    Ok(Outcome {
        code: EXIT_ACCEPT,
        inputs,
        outputs,
        resolved: json!({ "args": a, "config": cfg }),
        stdout: None,
    })
}

fn rct_demo(a: &RctArgs) -> Result<Outcome, CliError> {
    positive("epsilon", a.epsilon)?;
    positive("sigma", a.sigma)?;
    if a.thetas.is_empty() {
        return Err(CliError::usage("--thetas is empty"));
    }
    let curves = run_rct_demo(a.n, a.mu0, a.mu1, a.sigma, a.epsilon, &a.thetas, a.u_points, a.seed)?;
    prepare_out(&a.out)?;
    let mut w = CsvOut::new(["theta", "u", "value", "converged"]);
    for c in &curves {
        w.row([num(c.theta), num(c.u), num(c.value), (c.converged as u8).to_string()]);
    }
    let p = a.out.join("curves.csv");
    w.write(&p)?;
    Ok(Outcome {
        code: EXIT_ACCEPT,
        inputs: Vec::new(),
        outputs: vec![p],
        resolved: serde_json::to_value(a)?,
        stdout: None,
    })
}

fn simulate(a: &SimulateArgs) -> Result<Outcome, CliError> {
    let (mut cfg, inputs) = load_mc_config(a.config.as_deref())?;
    if let Some(v) = a.n_org {
        cfg.dgp.n_org = v;
    }
    if let Some(v) = a.n_ref {
        cfg.dgp.n_ref = v;
    }
    cfg.dgp.validate().map_err(|e| CliError::usage(e.to_string()))?;
    let data = simulate_panel_logit(&cfg.dgp, a.rep)?;
    write_panel(&a.out, &data)?;
    Ok(Outcome {
        code: EXIT_ACCEPT,
        inputs,
        outputs: panel_files(&a.out),
        resolved: json!({ "args": a, "dgp": cfg.dgp }),
        stdout: None,
    })
}
