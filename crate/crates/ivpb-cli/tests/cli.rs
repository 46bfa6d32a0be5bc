use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;

use ivpb::diagnostics::EnergyAccumulator;
use ivpb::field_solver::PotentialState;
use ivpb::phase_grid::{build_velocity_grid, Mode, PerturbationField, ScalarFieldX, SpatialGrid};
use ivpb::time_stepper::SimState;
use ivpb_cli::commands;
use ivpb_cli::config::{ConfigFile, DtValue};
use ivpb_cli::snapshot::{self, Snapshot};
use proptest::prelude::*;

fn cache_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("ktab")
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ivpb"))
}

/// A cheap configuration: 8 spatial points, 8 velocity points per axis.
fn small(extra: &str) -> ConfigFile {
    let text = format!(
        "[grid]\nnx = [8]\nnv = 8\n[collision]\ncache_dir = {:?}\ncoercivity_trials = 5\n{extra}",
        cache_dir().display().to_string()
    );
    ConfigFile::parse(&text).unwrap()
}

fn write_config(dir: &Path, cfg: &ConfigFile) -> PathBuf {
    let p = dir.join("in.toml");
    std::fs::write(&p, cfg.to_toml().unwrap()).unwrap();
    p
}

#[test]
fn minimal_config_gets_defaults_and_echo() {
    let cfg = ConfigFile::parse("[grid]\nnx = [16]\n").unwrap();
    assert_eq!(cfg.grid.nx, vec![16]);
    assert_eq!(cfg.grid.nv, 16);
    assert_eq!(cfg.grid.v_max, 6.0);
    assert_eq!(cfg.time.dt, DtValue::Keyword("auto".into()));
    assert_eq!(cfg.time.t_end, 1.0);
    assert_eq!(cfg.output.k_max, 2);
    assert!(cfg.collision.conservation_correction);
    let rc = cfg.resolve().unwrap();
    assert_eq!(rc.mode, Mode::Perturbation);
    let dir = tempfile::tempdir().unwrap();
    let path = cfg.echo(dir.path()).unwrap();
    let back = ConfigFile::load(&path).unwrap();
    assert_eq!(back, cfg);
    let text = std::fs::read_to_string(path).unwrap();
    for section in ["[grid]", "[time]", "[collision]", "[poisson]", "[output]"] {
        assert!(text.contains(section), "{section} missing from echo:\n{text}");
    }
}

#[test]
fn negative_dt_is_rejected_with_message() {
    let cfg = ConfigFile::parse("[grid]\nnx = [8]\n[time]\ndt = -1\n").unwrap();
    let err = cfg.resolve().unwrap_err().to_string();
    assert_eq!(err, "time.dt must be positive or 'auto'");
    let cfg = ConfigFile::parse("[time]\ndt = 0.0\n").unwrap();
    assert_eq!(cfg.resolve().unwrap_err().to_string(), "time.dt must be positive or 'auto'");
    let cfg = ConfigFile::parse("[time]\ndt = \"soon\"\n").unwrap();
    assert_eq!(cfg.resolve().unwrap_err().to_string(), "time.dt must be positive or 'auto'");
    let cfg = ConfigFile::parse("[time]\ndt = 0.01\n").unwrap();
    assert!(cfg.resolve().is_ok());
}

#[test]
fn unknown_keys_are_rejected_in_every_section() {
    for section in ["grid", "time", "initial_data", "collision", "poisson", "output"] {
        let err = ConfigFile::parse(&format!("[{section}]\nbogus = 1\n")).unwrap_err();
        assert!(format!("{err:#}").contains("bogus"), "{section}: {err:#}");
    }
    assert!(ConfigFile::parse("[extra]\nx = 1\n").is_err());
    assert!(ConfigFile::parse("[initial_data]\na = [{ amplitude = 1.0, colour = 2 }]\n").is_err());
}

#[test]
fn physical_mode_with_negative_capable_data_is_rejected() {
    let cfg = ConfigFile::parse(
        "[time]\nmode = \"PHYSICAL\"\n[initial_data]\na = [{ amplitude = 0.2 }]\nc = [{ amplitude = 0.05 }]\n",
    )
    .unwrap();
    let err = cfg.resolve().unwrap_err().to_string();
    assert!(err.contains("PHYSICAL") && err.contains("negative"), "{err}");
    let ok = ConfigFile::parse("[time]\nmode = \"PHYSICAL\"\n[initial_data]\na = [{ amplitude = 1e-3 }]\nc = [{ amplitude = 1e-4 }]\n")
        .unwrap();
    assert!(ok.resolve().is_ok());
    let same_data_perturbation = ConfigFile::parse("[initial_data]\na = [{ amplitude = 0.2 }]\nc = [{ amplitude = 0.05 }]\n").unwrap();
    assert!(same_data_perturbation.resolve().is_ok());
}

#[test]
fn other_validation_errors_name_the_key() {
    let cases = [
        ("[time]\nmode = \"KINETIC\"\n", "time.mode"),
        ("[time]\nt_end = -1.0\n", "time.t_end"),
        ("[time]\nm0 = 2.0\n", "time.m0"),
        ("[output]\nk_max = 3\n", "output.k_max"),
        ("[output]\ninterval = 0.0\n", "output.interval"),
        ("[grid]\nnx = []\n", "grid.nx"),
        ("[poisson]\ntol = 0.0\n", "poisson"),
    ];
    for (text, key) in cases {
        let err = ConfigFile::parse(text).unwrap().resolve().unwrap_err().to_string();
        assert!(err.contains(key), "{text:?}: {err}");
    }
}

fn sample_snapshot(seed: u64, with_prev: bool) -> Snapshot {
    let sgrid = SpatialGrid::new(&[4, 2]).unwrap();
    let vgrid = Arc::new(build_velocity_grid(6.0, 4).unwrap());
    let mut x = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
    let mut next = move || {
        x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((x >> 11) as f64 / (1u64 << 53) as f64) - 0.5
    };
    let mut field = PerturbationField::zeros(&sgrid, &vgrid, Mode::Perturbation);
    field.values.iter_mut().for_each(|v| *v = next());
    let scalar = |next: &mut dyn FnMut() -> f64| ScalarFieldX {
        grid: sgrid.clone(),
        values: (0..sgrid.len()).map(|_| next()).collect(),
    };
    let potential = PotentialState {
        phi: scalar(&mut next),
        e_field: [0, 1, 2].map(|_| (0..sgrid.len()).map(|_| next()).collect()),
        exp_phi: scalar(&mut next),
        newton_iters: 3,
        residual_norm: 1e-13,
        residual_history: vec![1e-3, 1e-7, 1e-13],
        u_bar: scalar(&mut next),
        mean_defect: -2.5e-17,
    };
    let prev_field = with_prev.then(|| {
        let mut p = field.clone();
        p.values.iter_mut().for_each(|v| *v = next());
        p
    });
    Snapshot {
        state: SimState {
            field,
            potential,
            time: 0.375,
            step_index: 42,
            prev_field,
        },
        accum: EnergyAccumulator {
            last: Some((0.375, 1.25)),
            integral: 0.0625,
        },
    }
}

#[test]
fn snapshot_round_trips_bitwise() {
    for with_prev in [false, true] {
        let s = sample_snapshot(7, with_prev);
        let bytes = snapshot::encode(&s);
        assert_eq!(&bytes[..8], b"IVPBSNAP");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(bytes[12], Mode::Perturbation.code());
        let back = snapshot::decode(&bytes, None).unwrap();
        assert_eq!(back, s);
        assert_eq!(snapshot::encode(&back), bytes);
    }
}

#[test]
fn snapshot_field_is_x_major_then_v_major() {
    let s = sample_snapshot(3, false);
    let bytes = snapshot::encode(&s);
    // magic, version, mode, dims, nx[2], v_max, nv, time, step, len
    let start = 8 + 4 + 1 + 1 + 8 + 8 + 4 + 8 + 8 + 8;
    let f = &s.state.field;
    for (k, v) in f.values.iter().enumerate().take(70) {
        let at = start + 8 * k;
        assert_eq!(f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()).to_bits(), v.to_bits());
    }
    assert_eq!(f.at_x(1)[0].to_bits(), f.values[f.nv()].to_bits());
}

#[test]
fn snapshot_errors() {
    let bytes = snapshot::encode(&sample_snapshot(1, true));
    let mut bad = bytes.clone();
    bad[8..12].copy_from_slice(&2u32.to_le_bytes());
    let err = format!("{:#}", snapshot::decode(&bad, None).unwrap_err());
    assert!(err.contains("unsupported snapshot version 2"), "{err}");
    let mut bad = bytes.clone();
    bad[0] = b'X';
    let err = format!("{:#}", snapshot::decode(&bad, None).unwrap_err());
    assert!(err.contains("magic"), "{err}");
    for cut in [0, 5, 11, 30, bytes.len() / 2, bytes.len() - 1] {
        let err = format!("{:#}", snapshot::decode(&bytes[..cut], None).unwrap_err());
        assert!(err.contains("truncated"), "cut {cut}: {err}");
    }
    let mut long = bytes.clone();
    long.push(0);
    assert!(snapshot::decode(&long, None).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn snapshot_preserves_arbitrary_bits(seed in any::<u64>(), bits in proptest::collection::vec(any::<u64>(), 8)) {
        let mut s = sample_snapshot(seed, seed % 2 == 0);
        for (k, b) in bits.iter().enumerate() {
            s.state.field.values[k * 7] = f64::from_bits(*b);
        }
        s.state.time = f64::from_bits(bits[0]);
        let bytes = snapshot::encode(&s);
        let back = snapshot::decode(&bytes, None).unwrap();
        prop_assert_eq!(snapshot::encode(&back), bytes);
    }
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|x| x.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

#[test]
fn run_with_zero_end_time_writes_one_row() {
    let cfg = small("[time]\nt_end = 0.0\n[initial_data]\na = [{ amplitude = 1e-3 }]\n");
    let dir = tempfile::tempdir().unwrap();
    let out = commands::run(&cfg, dir.path(), None).unwrap();
    assert_eq!(out.rows, 1);
    let (header, rows) = read_csv(&out.csv_path);
    let want = [
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
    assert_eq!(header, want);
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][0].parse::<f64>().unwrap(), 0.0);
    assert!(dir.path().join("config.resolved.toml").exists());
    let summary = std::fs::read_to_string(dir.path().join("summary.toml")).unwrap();
    assert!(summary.contains("csv_schema_version = 1"), "{summary}");
    let snap = snapshot::read(&dir.path().join("final.snap"), None).unwrap();
    assert_eq!(snap.state.step_index, 0);
}

fn short_run(extra: &str) -> ConfigFile {
    small(&format!(
        "[time]\ndt = 0.004\nt_end = 0.016\n[output]\ninterval = 0.004\nk_max = 1\nsnapshot_every = 2\n\
         [initial_data]\na = [{{ amplitude = 1e-3 }}]\nmicro = [{{ amplitude = 5e-4, phase = 0.5 }}]\n{extra}"
    ))
}

#[test]
fn csv_is_identical_across_thread_counts() {
    let cfg = short_run("");
    let dir = tempfile::tempdir().unwrap();
    let input = write_config(dir.path(), &cfg);
    let mut csvs = Vec::new();
    for threads in ["1", "3"] {
        let out = dir.path().join(format!("t{threads}"));
        let status = bin()
            .args(["run", "--config"])
            .arg(&input)
            .arg("--out")
            .arg(&out)
            .args(["--threads", threads])
            .status()
            .unwrap();
        assert!(status.success());
        csvs.push(std::fs::read(out.join("timeseries.csv")).unwrap());
        csvs.push(std::fs::read(out.join("final.snap")).unwrap());
    }
    assert_eq!(csvs[0], csvs[2], "CSV differs between 1 and 3 threads");
    assert_eq!(csvs[1], csvs[3], "final snapshot differs between 1 and 3 threads");
}

#[test]
fn resumed_run_reproduces_the_uninterrupted_one() {
    let cfg = short_run("");
    let dir = tempfile::tempdir().unwrap();
    let full = dir.path().join("full");
    let a = commands::run(&cfg, &full, None).unwrap();
    assert_eq!(a.rows, 5);
    // rows at steps 0..=4; every second row is snapshotted: steps 1 and 3
    let snap = full.join("snap_00000001.snap");
    assert!(snap.exists());
    let resumed = dir.path().join("resumed");
    let b = commands::run(&cfg, &resumed, Some(&snap)).unwrap();
    assert_eq!(b.rows, 4);
    let (_, rows_a) = read_csv(&full.join("timeseries.csv"));
    let (_, rows_b) = read_csv(&resumed.join("timeseries.csv"));
    assert_eq!(rows_a[1..], rows_b[..]);
    assert_eq!(std::fs::read(full.join("final.snap")).unwrap(), std::fs::read(resumed.join("final.snap")).unwrap());
}

#[test]
fn resume_rejects_a_mismatched_grid() {
    let cfg = short_run("");
    let dir = tempfile::tempdir().unwrap();
    commands::run(&small("[time]\nt_end = 0.0\n"), dir.path(), None).unwrap();
    let mut other = cfg.clone();
    other.grid.nx = vec![16];
    let err = commands::run(&other, &dir.path().join("b"), Some(&dir.path().join("final.snap"))).unwrap_err();
    assert!(format!("{err:#}").contains("does not match"), "{err:#}");
}

#[test]
fn poisson_of_uniform_density_is_zero() {
    let cfg = small("");
    let dir = tempfile::tempdir().unwrap();
    let (rho, st) = commands::poisson(&cfg, dir.path()).unwrap();
    assert!(rho.values.iter().all(|r| *r == 1.0));
    assert!(st.phi.values.iter().all(|p| *p == 0.0));
    assert!(st.neutrality_residual() <= 1e-12);
    let (header, rows) = read_csv(&dir.path().join("potential.csv"));
    assert_eq!(header, ["x1", "rho", "phi", "exp_phi", "e1"]);
    assert_eq!(rows.len(), 8);
    assert!(rows.iter().all(|r| r[2].parse::<f64>().unwrap() == 0.0));
}

#[test]
fn poisson_reads_a_density_file() {
    let dir = tempfile::tempdir().unwrap();
    let density = dir.path().join("rho.csv");
    let eps = 1e-4;
    let n = 64;
    let mut text = String::from("x,rho\n");
    for i in 0..n {
        let x = i as f64 / n as f64;
        text.push_str(&format!("{x},{}\n", 1.0 + eps * (2.0 * std::f64::consts::PI * x).cos()));
    }
    std::fs::write(&density, text).unwrap();
    let mut cfg = small("");
    cfg.grid.nx = vec![n];
    cfg.poisson.density_file = Some(density);
    let (_, st) = commands::poisson(&cfg, &dir.path().join("out")).unwrap();
    let k2 = 4.0 * std::f64::consts::PI.powi(2);
    for (i, p) in st.phi.values.iter().enumerate() {
        let x = i as f64 / n as f64;
        let lin = eps * (2.0 * std::f64::consts::PI * x).cos() / (1.0 + k2);
        assert!((p - lin).abs() <= 1e-3 * eps, "{i}: {p} vs {lin}");
    }
    cfg.grid.nx = vec![32];
    assert!(commands::poisson(&cfg, &dir.path().join("bad")).is_err());
}

#[test]
fn check_reports_failures_with_nonzero_exit() {
    // 8 points per velocity axis is too coarse for the mass-defect limit
    let dir = tempfile::tempdir().unwrap();
    let input = write_config(dir.path(), &small(""));
    let out = bin().args(["check", "--config"]).arg(&input).arg("--out").arg(dir.path().join("o")).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("velocity_mass_defect") && text.contains("FAIL"), "{text}");
    assert!(text.contains("symmetry_defect"));
    assert!(dir.path().join("o/check.txt").exists());
}

#[test]
fn check_passes_on_default_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ConfigFile::parse(&format!("[collision]\ncache_dir = {:?}\n", cache_dir().display().to_string())).unwrap();
    let input = write_config(dir.path(), &cfg);
    let out = bin().args(["check", "--seed", "11", "--config"]).arg(&input).arg("--out").arg(dir.path()).output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}\n{}", String::from_utf8_lossy(&out.stderr));
    assert!(!text.contains("FAIL"), "{text}");
}

#[test]
fn bad_config_exits_with_error_text() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("bad.toml");
    std::fs::write(&input, "[grid]\nnx = [8]\n[time]\ndt = -1\n").unwrap();
    let out = bin().args(["run", "--config"]).arg(&input).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("time.dt must be positive or 'auto'"));
}

#[test]
fn spectrum_reports_positive_gap() {
    let dir = tempfile::tempdir().unwrap();
    let s = commands::spectrum(&small(""), dir.path(), 5).unwrap();
    assert!(s.delta > 0.0);
    assert!(s.symmetry_defect <= 1e-10);
    assert!(s.null_residuals.iter().all(|r| *r <= 1e-2));
    assert!(s.nu_min > 0.0 && s.nu_max > s.nu_min);
    let text = std::fs::read_to_string(dir.path().join("spectrum.toml")).unwrap();
    assert!(text.contains("coercivity_delta"));
}
