//! TOML run configuration. Every section is optional and every key has a
//! default; unknown keys are rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use ivpb::field_solver::PoissonOptions;
use ivpb::phase_grid::Mode;
use ivpb::time_stepper::{DtSpec, FourierMode, InitialSpec, RunConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigFile {
    pub grid: GridSection,
    pub time: TimeSection,
    pub initial_data: InitialSection,
    pub collision: CollisionSection,
    pub poisson: PoissonSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    /// Spatial points per axis; the length sets the dimension.
    pub nx: Vec<usize>,
    pub v_max: f64,
    /// Velocity points per axis.
    pub nv: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            nx: vec![32],
            v_max: 6.0,
            nv: 16,
        }
    }
}

/// `dt = "auto"` or a number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DtValue {
    Value(f64),
    Keyword(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeSection {
    pub dt: DtValue,
    pub cfl_safety: f64,
    pub t_end: f64,
    /// "PERTURBATION" or "PHYSICAL".
    pub mode: String,
    pub m0: f64,
}

impl Default for TimeSection {
    fn default() -> Self {
        Self {
            dt: DtValue::Keyword("auto".into()),
            cfl_safety: 0.5,
            t_end: 1.0,
            mode: "PERTURBATION".into(),
            m0: 0.5,
        }
    }
}

/// amplitude · cos(2π wave·x + phase).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeEntry {
    pub amplitude: f64,
    #[serde(default = "unit_wave")]
    pub wave: [i64; 3],
    #[serde(default)]
    pub phase: f64,
}

fn unit_wave() -> [i64; 3] {
    [1, 0, 0]
}

impl From<ModeEntry> for FourierMode {
    fn from(m: ModeEntry) -> Self {
        FourierMode {
            amplitude: m.amplitude,
            wave: m.wave,
            phase: m.phase,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitialSection {
    pub a: Vec<ModeEntry>,
    pub b1: Vec<ModeEntry>,
    pub b2: Vec<ModeEntry>,
    pub b3: Vec<ModeEntry>,
    pub c: Vec<ModeEntry>,
    /// Coefficient of v₁v₂√μ.
    pub micro: Vec<ModeEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollisionSection {
    pub sphere_order: usize,
    pub conservation_correction: bool,
    /// Directory for assembled tables; none disables caching.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    /// Random trial functions for the coercivity and trilinear checks.
    pub coercivity_trials: usize,
}

impl Default for CollisionSection {
    fn default() -> Self {
        Self {
            sphere_order: 38,
            conservation_correction: true,
            cache_dir: None,
            coercivity_trials: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoissonSection {
    pub tol: f64,
    pub max_iters: usize,
    pub max_halvings: usize,
    pub inner_tol: f64,
    pub inner_max_iters: usize,
    /// CSV density for the `poisson` subcommand.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub density_file: Option<PathBuf>,
}

impl Default for PoissonSection {
    fn default() -> Self {
        let d = PoissonOptions::default();
        Self {
            tol: d.tol,
            max_iters: d.max_iters,
            max_halvings: d.max_halvings,
            inner_tol: d.inner_tol,
            inner_max_iters: d.inner_max_iters,
            density_file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Time between CSV rows.
    pub interval: f64,
    pub k_max: usize,
    pub transient_fraction: f64,
    /// Write a snapshot every this many output rows; 0 keeps only the final one.
    pub snapshot_every: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            interval: 0.05,
            k_max: 2,
            transient_fraction: 0.1,
            snapshot_every: 0,
        }
    }
}

fn modes(v: &[ModeEntry]) -> Vec<FourierMode> {
    v.iter().map(|&m| m.into()).collect()
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn mode(&self) -> Result<Mode> {
        match self.time.mode.to_ascii_uppercase().as_str() {
            "PERTURBATION" => Ok(Mode::Perturbation),
            "PHYSICAL" => Ok(Mode::Physical),
            other => bail!("time.mode must be PERTURBATION or PHYSICAL, got {other:?}"),
        }
    }

    pub fn poisson_options(&self) -> PoissonOptions {
        let p = &self.poisson;
        PoissonOptions {
            tol: p.tol,
            max_iters: p.max_iters,
            max_halvings: p.max_halvings,
            inner_tol: p.inner_tol,
            inner_max_iters: p.inner_max_iters,
        }
    }

    /// Converts to a validated solver configuration.
    pub fn resolve(&self) -> Result<RunConfig> {
        let dt = match &self.time.dt {
            DtValue::Value(v) => DtSpec::Fixed(*v),
            DtValue::Keyword(s) if s.eq_ignore_ascii_case("auto") => DtSpec::Auto {
                cfl_safety: self.time.cfl_safety,
            },
            DtValue::Keyword(_) => bail!("time.dt must be positive or 'auto'"),
        };
        let p = &self.poisson;
        if !(p.tol > 0.0 && p.inner_tol > 0.0) || p.max_iters == 0 || p.inner_max_iters == 0 {
            bail!("poisson tolerances and iteration limits must be positive");
        }
        let i = &self.initial_data;
        let cfg = RunConfig {
            nx: self.grid.nx.clone(),
            v_max: self.grid.v_max,
            nv: self.grid.nv,
            sphere_order: self.collision.sphere_order,
            dt,
            t_end: self.time.t_end,
            mode: self.mode()?,
            m0: self.time.m0,
            k_max: self.output.k_max,
            conservation_correction: self.collision.conservation_correction,
            output_interval: self.output.interval,
            initial: InitialSpec {
                a: modes(&i.a),
                b: [modes(&i.b1), modes(&i.b2), modes(&i.b3)],
                c: modes(&i.c),
                micro: modes(&i.micro),
            },
            poisson: self.poisson_options(),
            transient_fraction: self.output.transient_fraction,
        };
        cfg.validate().map_err(|e| match e {
            ivpb::Error::Config(msg) => anyhow::anyhow!(msg),
            other => other.into(),
        })?;
        Ok(cfg)
    }

    /// TOML text with every default filled in.
    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Writes `config.resolved.toml` into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("config.resolved.toml");
        std::fs::write(&path, self.to_toml()?).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
