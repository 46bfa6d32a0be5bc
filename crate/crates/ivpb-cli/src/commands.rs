//! The four subcommands as library functions.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, ensure, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ivpb::collision_ops::{self, CollisionTables};
use ivpb::diagnostics::{self, EnergyAccumulator, EnergyReport};
use ivpb::field_solver::{self, h2_norm, PotentialState};
use ivpb::phase_grid::{Fourier, ScalarFieldX, SpatialGrid};
use ivpb::table_cache;
use ivpb::time_stepper::{self, Model, RunConfig, RunStatus, SimState};

use crate::config::ConfigFile;
use crate::snapshot::{self, Snapshot};

/// Bumped whenever the CSV columns change.
pub const CSV_SCHEMA_VERSION: u32 = 1;

pub const CSV_HEADER: [&str; 13] = [
    "t",
    "triple_norm_sq",
    "triple_norm_nu_sq",
    "e_functional",
    "y_lyapunov",
    "mass_res",
    "momentum_res_1",
    "momentum_res_2",
    "momentum_res_3",
    "energy_res",
    "neutrality_res",
    "min_F",
    "newton_iters",
];

pub fn csv_record(r: &EnergyReport) -> Vec<String> {
    let mut v: Vec<String> = [
        r.time,
        r.triple_norm_sq,
        r.triple_norm_nu_sq,
        r.e_functional,
        r.y_lyapunov,
        r.mass_res,
        r.momentum_res[0],
        r.momentum_res[1],
        r.momentum_res[2],
        r.energy_res,
        r.neutrality_res,
        r.min_f,
    ]
    .iter()
    .map(|x| format!("{x:e}"))
    .collect();
    v.push(r.newton_iters.to_string());
    v
}

fn create_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating output directory {}", out.display()))
}

pub fn load_tables(cfg: &ConfigFile) -> Result<Arc<CollisionTables>> {
    let c = &cfg.collision;
    let t = table_cache::load_or_build(cfg.grid.v_max, cfg.grid.nv, c.sphere_order, c.cache_dir.as_deref())?;
    Ok(Arc::new(t))
}

pub fn build_model(cfg: &ConfigFile, run: &RunConfig) -> Result<Model> {
    let sgrid = SpatialGrid::new(&run.nx)?;
    Ok(Model::new(&sgrid, load_tables(cfg)?, run.poisson))
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub status: RunStatus,
    pub dt: f64,
    pub steps: usize,
    pub rows: usize,
    pub final_state: SimState,
    pub reports: Vec<EnergyReport>,
    pub decay: Option<diagnostics::DecayFit>,
    pub csv_path: PathBuf,
}

/// `run`: advances the configured initial data, or a snapshot, to t_end.
pub fn run(cfg: &ConfigFile, out: &Path, resume: Option<&Path>) -> Result<RunOutcome> {
    let rc = cfg.resolve()?;
    create_out(out)?;
    cfg.echo(out)?;
    let model = build_model(cfg, &rc)?;
    let (state, accum) = match resume {
        Some(p) => {
            let snap = snapshot::read(p, Some(&model.vgrid))?;
            let f = &snap.state.field;
            ensure!(
                f.sgrid.n_per_dim == rc.nx
                    && f.vgrid.v_max == rc.v_max
                    && f.vgrid.n_per_axis == rc.nv
                    && f.mode == rc.mode,
                "snapshot grid or mode does not match the configuration"
            );
            (snap.state, snap.accum)
        }
        None => (time_stepper::build_initial_data(&model, &rc.initial, rc.mode)?, EnergyAccumulator::default()),
    };
    let csv_path = out.join("timeseries.csv");
    let mut w = csv::Writer::from_writer(File::create(&csv_path).with_context(|| format!("creating {}", csv_path.display()))?);
    w.write_record(CSV_HEADER)?;
    let every = cfg.output.snapshot_every;
    let mut rows = 0usize;
    let traj = time_stepper::run_continued(&rc, &model, state, accum, |s, r| {
        w.write_record(csv_record(r)).map_err(|e| ivpb::Error::Contract(e.to_string()))?;
        w.flush()?;
        rows += 1;
        if every > 0 && rows % every == 0 {
            let snap = Snapshot {
                state: s.clone(),
                accum: accum_after(r),
            };
            snapshot::write(&out.join(format!("snap_{:08}.snap", s.step_index)), &snap)
                .map_err(|e| ivpb::Error::Contract(format!("{e:#}")))?;
        }
        Ok(())
    })?;
    drop(w);
    let final_state = traj.states.last().expect("at least one state").clone();
    let last = traj.reports.last().expect("at least one report");
    snapshot::write(
        &out.join("final.snap"),
        &Snapshot {
            state: final_state.clone(),
            accum: accum_after(last),
        },
    )?;
    let t: Vec<f64> = traj.reports.iter().map(|r| r.time).collect();
    let y: Vec<f64> = traj.reports.iter().map(|r| r.triple_norm_sq).collect();
    let decay = diagnostics::decay_rate_fit(&t, &y, rc.transient_fraction, traj.reports[0].e_functional).ok();
    let outcome = RunOutcome {
        status: traj.status,
        dt: traj.dt,
        steps: traj.steps,
        rows,
        final_state,
        reports: traj.reports,
        decay,
        csv_path,
    };
    std::fs::write(out.join("summary.toml"), summary_text(&outcome))?;
    Ok(outcome)
}

fn accum_after(r: &EnergyReport) -> EnergyAccumulator {
    EnergyAccumulator {
        last: Some((r.time, r.triple_norm_nu_sq)),
        integral: r.nu_integral,
    }
}

fn summary_text(o: &RunOutcome) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "csv_schema_version = {CSV_SCHEMA_VERSION}");
    match o.status {
        RunStatus::Completed => {
            let _ = writeln!(s, "status = \"completed\"");
        }
        RunStatus::EarlyAbort { time, e_functional } => {
            let _ = writeln!(s, "status = \"early_abort\"\nabort_time = {time:e}\nabort_e_functional = {e_functional:e}");
        }
    }
    let _ = writeln!(s, "dt = {:e}\nsteps = {}\nrows = {}\nfinal_time = {:e}", o.dt, o.steps, o.rows, o.final_state.time);
    if let Some(d) = o.decay {
        let _ = writeln!(
            s,
            "decay_rate = {:e}\ndecay_r2 = {:e}\ndecay_envelope_constant = {:e}\ndecay_samples = {}",
            d.lambda, d.r2, d.envelope_constant, d.samples
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub name: &'static str,
    pub value: f64,
    /// Human-readable acceptance condition.
    pub limit: String,
    pub pass: bool,
}

fn row(name: &'static str, value: f64, limit: f64, upper: bool) -> CheckRow {
    let pass = if upper { value <= limit } else { value > limit };
    CheckRow {
        name,
        value,
        limit: format!("{} {limit:e}", if upper { "<=" } else { ">" }),
        pass,
    }
}

fn quarter_mu_random(tables: &CollisionTables, rng: &mut ChaCha8Rng) -> Vec<f64> {
    tables.vgrid.mu_table.iter().map(|m| rng.random_range(-1.0..1.0) * m.powf(0.25)).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Operator, grid and field-solver invariants for the configured tables.
pub fn check_rows(cfg: &ConfigFile, seed: u64) -> Result<Vec<CheckRow>> {
    let rc = cfg.resolve()?;
    let tables = load_tables(cfg)?;
    let t = tables.as_ref();
    let vg = &t.vgrid;
    let mut rows = Vec::new();

    let wsum: f64 = t.sphere.weights.iter().sum();
    rows.push(row("sphere_weight_sum_rel_err", (wsum - 4.0 * PI).abs() / (4.0 * PI), 1e-12, true));
    rows.push(row("velocity_mass_defect", vg.mass_defect.abs(), 1e-6, true));
    let nu_min = t.nu.iter().cloned().fold(f64::INFINITY, f64::min);
    rows.push(row("nu_min", nu_min, 0.0, false));
    rows.push(row("symmetry_defect", collision_ops::symmetry_defect(t), 1e-10, true));
    let null = collision_ops::null_space_residuals(t);
    rows.push(row("null_residual_max", null.iter().cloned().fold(0.0, f64::max), 1e-2, true));
    let est = diagnostics::coercivity_estimate(t, cfg.collision.coercivity_trials, seed)?;
    rows.push(row("coercivity_delta", est.delta, 0.0, false));

    let sqrt_mu = vg.sqrt_mu_table.clone();
    let zero = vec![0.0; vg.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = quarter_mu_random(t, &mut rng);
    let gz = collision_ops::gamma(&g, &zero, t)?;
    rows.push(row("gamma_with_zero_max", gz.iter().fold(0.0f64, |a, x| a.max(x.abs())), 0.0, true));
    let geq = collision_ops::gamma(&sqrt_mu, &sqrt_mu, t)?;
    rows.push(row("gamma_equilibrium_rel", norm(&geq) / norm(&sqrt_mu), 1e-2, true));
    let gg = collision_ops::gamma(&g, &g, t)?;
    let proj = collision_ops::conserve_project(&gg, vg)?;
    let mom = t.null_basis().moments(&proj);
    let scale = t.null_basis().moments(&gg).iter().fold(norm(&gg) * vg.weight(), |a, x| a.max(x.abs()));
    rows.push(row(
        "projected_gamma_moments_rel",
        mom.iter().fold(0.0f64, |a, x| a.max(x.abs())) / scale,
        1e-13,
        true,
    ));
    let mut tri: f64 = 0.0;
    for _ in 0..cfg.collision.coercivity_trials {
        let (a, b, c) = (quarter_mu_random(t, &mut rng), quarter_mu_random(t, &mut rng), quarter_mu_random(t, &mut rng));
        match diagnostics::trilinear_ratio(t, &a, &b, &c)? {
            Some(r) => tri = tri.max(r),
            None => tri = f64::INFINITY,
        }
    }
    rows.push(row("trilinear_ratio_max", tri, 10.0, true));

    let g1 = SpatialGrid::new(&[64])?;
    let fourier = Fourier::new(&g1);
    let opts = cfg.poisson_options();
    let one = ScalarFieldX::from_fn(&g1, |_| 1.0);
    let p0 = field_solver::solve_poisson_poincare_with(&fourier, &one, None, &opts)?;
    rows.push(row("poisson_uniform_phi_max", p0.phi.values.iter().fold(0.0f64, |a, x| a.max(x.abs())), 1e-14, true));
    rows.push(row("poisson_uniform_neutrality", p0.neutrality_residual(), 1e-12, true));
    let eps = 1e-3;
    let cosine = |a: f64| ScalarFieldX::from_fn(&g1, move |x| 1.0 + a * (2.0 * PI * x[0]).cos());
    let p1 = field_solver::solve_poisson_poincare_with(&fourier, &cosine(eps), None, &opts)?;
    let exact: Vec<f64> = (0..g1.len()).map(|i| eps * (2.0 * PI * g1.coords(i)[0]).cos() / (1.0 + 4.0 * PI * PI)).collect();
    let diff: Vec<f64> = p1.phi.values.iter().zip(&exact).map(|(a, b)| a - b).collect();
    rows.push(row("poisson_linearization_rel_err", g1.l2(&diff) / g1.l2(&exact), 1e-4, true));
    rows.push(row("poisson_newton_iters", p1.newton_iters as f64, 6.0, true));
    rows.push(row("poisson_neutrality", p1.neutrality_residual(), 1e-10, true));
    let r2 = ScalarFieldX::from_fn(&g1, |x| 1.0 + eps * (2.0 * PI * x[0]).cos() + 5e-4 * (6.0 * PI * x[0]).sin());
    let p2 = field_solver::solve_poisson_poincare_with(&fourier, &r2, None, &opts)?;
    let dphi: Vec<f64> = p1.phi.values.iter().zip(&p2.phi.values).map(|(a, b)| a - b).collect();
    let drho: Vec<f64> = cosine(eps).values.iter().zip(&r2.values).map(|(a, b)| a - b).collect();
    rows.push(row("poisson_stability_ratio", h2_norm(&fourier, &dphi) / g1.l2(&drho), 4.5, true));

    let freq = diagnostics::physical_frequencies(&diagnostics::PlasmaParams {
        n_e: 1e19,
        n_i: 1e19,
        t_e: 1e4,
        t_i: 1e4,
        z_i: 1.0,
        m_e: 9.109_383_7015e-31,
        m_i: 1.672_621_923_69e-27,
        ln_lambda: 15.0,
    })?;
    let want = (9.109_383_7015e-31f64 / 1.672_621_923_69e-27).sqrt();
    rows.push(row("frequency_ratio_rel_err", (freq.ii_over_ee / want - 1.0).abs(), 1e-12, true));

    let sgrid = SpatialGrid::new(&rc.nx)?;
    let model = Model::new(&sgrid, tables.clone(), rc.poisson);
    let s0 = time_stepper::build_initial_data(&model, &rc.initial, rc.mode)?;
    let cons = diagnostics::conservation_residuals(&model, &s0);
    rows.push(row("initial_mass_res", cons.mass, 1e-12, true));
    rows.push(row("initial_momentum_res", cons.momentum.iter().fold(0.0f64, |a, x| a.max(x.abs())), 1e-12, true));
    rows.push(row("initial_neutrality_res", cons.neutrality, 1e-10, true));
    let snap = Snapshot {
        state: s0,
        accum: EnergyAccumulator::default(),
    };
    let back = snapshot::decode(&snapshot::encode(&snap), Some(&model.vgrid))?;
    let same = back.state.field.values.iter().zip(&snap.state.field.values).all(|(a, b)| a.to_bits() == b.to_bits())
        && back == snap;
    rows.push(CheckRow {
        name: "snapshot_round_trip",
        value: if same { 0.0 } else { 1.0 },
        limit: "bitwise".into(),
        pass: same,
    });
    Ok(rows)
}

pub fn format_check(rows: &[CheckRow]) -> String {
    let mut s = format!("{:<32} {:>14}  {:<14} result\n", "invariant", "value", "limit");
    for r in rows {
        let _ = writeln!(s, "{:<32} {:>14.6e}  {:<14} {}", r.name, r.value, r.limit, if r.pass { "PASS" } else { "FAIL" });
    }
    s
}

/// `check`: writes `check.txt` and returns the rows; the caller decides the
/// exit status.
pub fn check(cfg: &ConfigFile, out: &Path, seed: u64) -> Result<Vec<CheckRow>> {
    create_out(out)?;
    cfg.echo(out)?;
    let rows = check_rows(cfg, seed)?;
    std::fs::write(out.join("check.txt"), format_check(&rows))?;
    Ok(rows)
}

/// Density values from a CSV with a `rho` column, in grid order.
pub fn read_density(path: &Path, grid: &SpatialGrid) -> Result<ScalarFieldX> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let col = r
        .headers()?
        .iter()
        .position(|h| h.trim() == "rho")
        .with_context(|| format!("{} has no 'rho' column", path.display()))?;
    let mut values = Vec::with_capacity(grid.len());
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let field = rec.get(col).with_context(|| format!("row {} is missing rho", i + 1))?;
        values.push(field.trim().parse::<f64>().with_context(|| format!("row {}: bad rho {field:?}", i + 1))?);
    }
    if values.len() != grid.len() {
        bail!("{} has {} density values, grid has {} points", path.display(), values.len(), grid.len());
    }
    Ok(ScalarFieldX {
        grid: grid.clone(),
        values,
    })
}

/// `poisson`: solves for the potential of `poisson.density_file`, or of the
/// configured initial data when no file is given.
pub fn poisson(cfg: &ConfigFile, out: &Path) -> Result<(ScalarFieldX, PotentialState)> {
    let rc = cfg.resolve()?;
    create_out(out)?;
    cfg.echo(out)?;
    let grid = SpatialGrid::new(&rc.nx)?;
    let rho = match &cfg.poisson.density_file {
        Some(p) => read_density(p, &grid)?,
        None if rc.initial == Default::default() => ScalarFieldX::from_fn(&grid, |_| 1.0),
        None => {
            let model = build_model(cfg, &rc)?;
            let s0 = time_stepper::build_initial_data(&model, &rc.initial, rc.mode)?;
            time_stepper::density(&s0.field)
        }
    };
    let fourier = Fourier::new(&grid);
    let st = field_solver::solve_poisson_poincare_with(&fourier, &rho, None, &rc.poisson)?;
    let mut w = csv::Writer::from_path(out.join("potential.csv"))?;
    let mut header: Vec<String> = (1..=grid.dims).map(|d| format!("x{d}")).collect();
    header.extend(["rho", "phi", "exp_phi"].map(String::from));
    header.extend((1..=grid.dims).map(|d| format!("e{d}")));
    w.write_record(&header)?;
    for i in 0..grid.len() {
        let x = grid.coords(i);
        let mut rec: Vec<String> = (0..grid.dims).map(|d| format!("{:e}", x[d])).collect();
        rec.extend([rho.values[i], st.phi.values[i], st.exp_phi.values[i]].map(|v| format!("{v:e}")));
        rec.extend((0..grid.dims).map(|d| format!("{:e}", st.e_field[d][i])));
        w.write_record(&rec)?;
    }
    w.flush()?;
    let mut rep = String::new();
    let _ = writeln!(rep, "newton_iters = {}", st.newton_iters);
    let _ = writeln!(rep, "residual_norm = {:e}", st.residual_norm);
    let hist: Vec<String> = st.residual_history.iter().map(|v| format!("{v:e}")).collect();
    let _ = writeln!(rep, "residual_history = [{}]", hist.join(", "));
    let _ = writeln!(rep, "neutrality_residual = {:e}", st.neutrality_residual());
    let _ = writeln!(rep, "mean_defect = {:e}", st.mean_defect);
    std::fs::write(out.join("poisson_report.toml"), rep)?;
    Ok((rho, st))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub delta: f64,
    pub rayleigh_min: f64,
    pub lanczos_min: f64,
    pub lanczos_steps: usize,
    pub null_residuals: [f64; 5],
    pub symmetry_defect: f64,
    pub leakage: f64,
    pub nu_min: f64,
    pub nu_max: f64,
}

pub fn spectrum_of(tables: &CollisionTables, trials: usize, seed: u64) -> Result<Spectrum> {
    let est = diagnostics::coercivity_estimate(tables, trials, seed)?;
    Ok(Spectrum {
        delta: est.delta,
        rayleigh_min: est.rayleigh_min,
        lanczos_min: est.lanczos_min,
        lanczos_steps: est.lanczos_steps,
        null_residuals: collision_ops::null_space_residuals(tables),
        symmetry_defect: collision_ops::symmetry_defect(tables),
        leakage: tables.metadata.leakage,
        nu_min: tables.nu.iter().cloned().fold(f64::INFINITY, f64::min),
        nu_max: tables.nu.iter().cloned().fold(0.0, f64::max),
    })
}

pub fn format_spectrum(s: &Spectrum) -> String {
    let null: Vec<String> = s.null_residuals.iter().map(|v| format!("{v:e}")).collect();
    format!(
        "coercivity_delta = {:e}\nrayleigh_min = {:e}\nlanczos_min = {:e}\nlanczos_steps = {}\n\
         null_residuals = [{}]\nsymmetry_defect = {:e}\nleakage = {:e}\nnu_min = {:e}\nnu_max = {:e}\n",
        s.delta,
        s.rayleigh_min,
        s.lanczos_min,
        s.lanczos_steps,
        null.join(", "),
        s.symmetry_defect,
        s.leakage,
        s.nu_min,
        s.nu_max
    )
}

/// `spectrum`: coercivity constant and operator structure of the tables.
pub fn spectrum(cfg: &ConfigFile, out: &Path, seed: u64) -> Result<Spectrum> {
    cfg.resolve()?;
    create_out(out)?;
    cfg.echo(out)?;
    let s = spectrum_of(&*load_tables(cfg)?, cfg.collision.coercivity_trials, seed)?;
    std::fs::write(out.join("spectrum.toml"), format_spectrum(&s))?;
    Ok(s)
}
