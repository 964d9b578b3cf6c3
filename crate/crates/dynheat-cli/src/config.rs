//! TOML run configuration and its translation into solver inputs.

use serde::Deserialize;

use dynheat::coeffexpr::{parse_expr, sample_coefficients, CoefficientSpec, Env};
use dynheat::coeffexpr::{eval_expr, CoefficientTables};
use dynheat::geometry::{build_disk_mesh, build_interval_mesh, MeshKind, PairField, RegionSet, RegionSpec};
use dynheat::nash::GameProblem;
use dynheat::pdecore::{zero_space_time, SpaceTime, StepMatrices, TimeGrid};
use dynheat::semilinear::Nonlinearity;
use dynheat::{Error, Real, Result};

fn default_zero() -> String {
    "0".into()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryBlock {
    pub kind: String,
    pub n: Option<usize>,
    pub length: Option<f64>,
    pub n_r: Option<usize>,
    pub n_theta: Option<usize>,
    pub radius: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeBlock {
    pub t_final: f64,
    pub steps: usize,
    #[serde(default = "TimeBlock::default_theta")]
    pub theta: f64,
}

impl TimeBlock {
    fn default_theta() -> f64 {
        0.5
    }
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct CoefficientsBlock {
    #[serde(rename = "A")]
    pub diff: Option<String>,
    #[serde(rename = "ATensor")]
    pub diff_tensor: Option<[f64; 3]>,
    #[serde(rename = "AGamma")]
    pub diff_gamma: Option<String>,
    pub a: Option<String>,
    #[serde(alias = "bGamma")]
    pub b: Option<String>,
    #[serde(rename = "Bx")]
    pub drift_x: Option<String>,
    #[serde(rename = "By")]
    pub drift_y: Option<String>,
    #[serde(rename = "BGamma")]
    pub drift_gamma: Option<String>,
}

/// A region is `[lo, hi]` on the interval or `[r_lo, r_hi, th_lo, th_hi]`
/// on the disk.
pub type RegionValue = Vec<f64>;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionsBlock {
    pub omega: RegionValue,
    pub omega1: RegionValue,
    pub omega2: RegionValue,
    pub omega_d: RegionValue,
    pub omega_prime: RegionValue,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FollowersBlock {
    pub alpha1: f64,
    pub alpha2: f64,
    pub mu1: f64,
    pub mu2: f64,
    #[serde(default = "default_zero")]
    pub target1: String,
    #[serde(default = "default_zero")]
    pub target2: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeaderBlock {
    pub y0: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HumBlock {
    #[serde(default = "HumBlock::default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "HumBlock::default_solver")]
    pub solver: String,
    #[serde(default = "HumBlock::default_tol")]
    pub tol: f64,
    #[serde(default = "HumBlock::default_max_iter")]
    pub max_iter: usize,
}

impl HumBlock {
    fn default_epsilon() -> f64 {
        1e-3
    }
    fn default_solver() -> String {
        "cg".into()
    }
    fn default_tol() -> f64 {
        1e-8
    }
    fn default_max_iter() -> usize {
        400
    }
}

impl Default for HumBlock {
    fn default() -> Self {
        Self {
            epsilon: Self::default_epsilon(),
            solver: Self::default_solver(),
            tol: Self::default_tol(),
            max_iter: Self::default_max_iter(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CarlemanBlock {
    #[serde(default = "CarlemanBlock::default_lambda")]
    pub lambda: f64,
    #[serde(default = "CarlemanBlock::default_s")]
    pub s: f64,
    #[serde(default = "CarlemanBlock::default_samples")]
    pub samples: usize,
    #[serde(default = "CarlemanBlock::default_seed")]
    pub seed: u64,
}

impl CarlemanBlock {
    fn default_lambda() -> f64 {
        2.0
    }
    fn default_s() -> f64 {
        3.0
    }
    fn default_samples() -> usize {
        200
    }
    fn default_seed() -> u64 {
        7
    }
}

impl Default for CarlemanBlock {
    fn default() -> Self {
        Self {
            lambda: Self::default_lambda(),
            s: Self::default_s(),
            samples: Self::default_samples(),
            seed: Self::default_seed(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NonlinearityBlock {
    #[serde(rename = "F", default = "default_zero")]
    pub f: String,
    #[serde(rename = "G", default = "default_zero")]
    pub g: String,
    #[serde(rename = "LF", default)]
    pub l_f: f64,
    #[serde(rename = "LG", default)]
    pub l_g: f64,
    #[serde(rename = "dF_ds", default = "default_zero")]
    pub df_ds: String,
    #[serde(rename = "dF_dgx", default = "default_zero")]
    pub df_dgx: String,
    #[serde(rename = "dF_dgy", default = "default_zero")]
    pub df_dgy: String,
    #[serde(rename = "dG_ds", default = "default_zero")]
    pub dg_ds: String,
    #[serde(rename = "dG_dgt", default = "default_zero")]
    pub dg_dgt: String,
    #[serde(default = "NonlinearityBlock::default_outer_tol")]
    pub outer_tol: f64,
    #[serde(default = "NonlinearityBlock::default_max_outer")]
    pub max_outer: usize,
}

impl NonlinearityBlock {
    fn default_outer_tol() -> f64 {
        1e-8
    }
    fn default_max_outer() -> usize {
        40
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    #[serde(default = "OutputBlock::default_directory")]
    pub directory: String,
}

impl OutputBlock {
    fn default_directory() -> String {
        "out".into()
    }
}

impl Default for OutputBlock {
    fn default() -> Self {
        Self { directory: Self::default_directory() }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub geometry: GeometryBlock,
    pub time: TimeBlock,
    #[serde(default)]
    pub coefficients: CoefficientsBlock,
    pub regions: RegionsBlock,
    pub followers: FollowersBlock,
    pub leader: LeaderBlock,
    #[serde(default)]
    pub hum: HumBlock,
    #[serde(default)]
    pub carleman: CarlemanBlock,
    pub nonlinearity: Option<NonlinearityBlock>,
    #[serde(default)]
    pub output: OutputBlock,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("cannot parse configuration: {e}")))
    }
}

fn region_spec(kind: MeshKind, name: &str, value: &[f64]) -> Result<RegionSpec> {
    match (kind, value.len()) {
        (MeshKind::Interval, 2) => Ok(RegionSpec::Interval { lo: value[0], hi: value[1] }),
        (MeshKind::Disk, 4) => Ok(RegionSpec::Annulus {
            r_lo: value[0],
            r_hi: value[1],
            th_lo: value[2],
            th_hi: value[3],
        }),
        (MeshKind::Interval, k) => Err(Error::Config(format!(
            "region {name}: expected [lo, hi] on the interval, got {k} entries"
        ))),
        (MeshKind::Disk, k) => Err(Error::Config(format!(
            "region {name}: expected [r_lo, r_hi, th_lo, th_hi] on the disk, got {k} entries"
        ))),
    }
}

fn parse_named(name: &str, text: &str) -> Result<dynheat::coeffexpr::Expr> {
    parse_expr(text).map_err(|e| Error::Config(format!("{name}: {e}")))
}

/// Everything a subcommand needs, assembled and validated.
pub struct Built {
    pub problem: GameProblem<Real>,
    pub lin: CoefficientTables<Real>,
    pub nl: Option<Nonlinearity>,
}

pub fn build(cfg: &RunConfig) -> Result<Built> {
    let mesh = match cfg.geometry.kind.as_str() {
        "interval" => {
            let n = cfg
                .geometry
                .n
                .ok_or_else(|| Error::Config("geometry.n is required on the interval".into()))?;
            let length = cfg.geometry.length.unwrap_or(1.0);
            build_interval_mesh(n, length)?
        }
        "disk" => {
            let n_r = cfg
                .geometry
                .n_r
                .ok_or_else(|| Error::Config("geometry.n_r is required on the disk".into()))?;
            let n_t = cfg
                .geometry
                .n_theta
                .ok_or_else(|| Error::Config("geometry.n_theta is required on the disk".into()))?;
            let radius = cfg.geometry.radius.unwrap_or(1.0);
            build_disk_mesh(n_r, n_t, radius)?
        }
        other => {
            return Err(Error::Config(format!(
                "geometry.kind must be \"interval\" or \"disk\", got \"{other}\""
            )))
        }
    };

    let grid = TimeGrid::new(cfg.time.t_final, cfg.time.steps, cfg.time.theta)?;

    let kind = mesh.kind;
    let regions = RegionSet::build(
        &mesh,
        &region_spec(kind, "omega", &cfg.regions.omega)?,
        &region_spec(kind, "omega1", &cfg.regions.omega1)?,
        &region_spec(kind, "omega2", &cfg.regions.omega2)?,
        &region_spec(kind, "omega_d", &cfg.regions.omega_d)?,
        &region_spec(kind, "omega_prime", &cfg.regions.omega_prime)?,
    )?;

    let mut spec = CoefficientSpec::heat();
    let c = &cfg.coefficients;
    if let Some(t) = &c.diff {
        spec.diff = parse_named("coefficients.A", t)?;
    }
    spec.diff_tensor = c.diff_tensor;
    if let Some(t) = &c.diff_gamma {
        spec.diff_gamma = parse_named("coefficients.AGamma", t)?;
    }
    if let Some(t) = &c.a {
        spec.pot_a = parse_named("coefficients.a", t)?;
    }
    if let Some(t) = &c.b {
        spec.pot_b = parse_named("coefficients.b", t)?;
    }
    if let Some(t) = &c.drift_x {
        spec.drift_x = parse_named("coefficients.Bx", t)?;
    }
    if let Some(t) = &c.drift_y {
        spec.drift_y = parse_named("coefficients.By", t)?;
    }
    if let Some(t) = &c.drift_gamma {
        spec.drift_gamma = parse_named("coefficients.BGamma", t)?;
    }
    let lin = sample_coefficients(&spec, &mesh, &grid)?;
    let step = StepMatrices::build(&mesh, &lin, &grid)?;

    let f = &cfg.followers;
    for (name, v) in [("alpha1", f.alpha1), ("alpha2", f.alpha2), ("mu1", f.mu1), ("mu2", f.mu2)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Config(format!("followers.{name} must be positive, got {v}")));
        }
    }

    let y0_expr = parse_named("leader.y0", &cfg.leader.y0)?;
    let mut state = vec![0.0; mesh.n_bulk()];
    for (i, p) in mesh.coords.iter().enumerate() {
        state[i] = eval_expr(&y0_expr, &Env::at_point(kind, p, 0.0))?;
    }
    let y0 = PairField::from_state(&mesh, &state);

    let t1 = parse_named("followers.target1", &f.target1)?;
    let t2 = parse_named("followers.target2", &f.target2)?;
    let sample_target = |e: &dynheat::coeffexpr::Expr| -> Result<SpaceTime<Real>> {
        let mut field = zero_space_time(mesh.n_bulk(), &grid);
        for k in 0..=grid.m {
            let t = grid.time(k);
            for (i, p) in mesh.coords.iter().enumerate() {
                field[k][i] = eval_expr(e, &Env::at_point(kind, p, t))?;
            }
        }
        Ok(field)
    };
    let targets = [sample_target(&t1)?, sample_target(&t2)?];

    if !(cfg.hum.epsilon > 0.0) {
        return Err(Error::Config("hum.epsilon must be positive".into()));
    }
    match cfg.hum.solver.as_str() {
        "cg" | "prox" => {}
        other => {
            return Err(Error::Config(format!(
                "hum.solver must be \"cg\" or \"prox\", got \"{other}\""
            )))
        }
    }

    let nl = match &cfg.nonlinearity {
        Some(b) => Some(Nonlinearity {
            f: parse_named("nonlinearity.F", &b.f)?,
            g: parse_named("nonlinearity.G", &b.g)?,
            l_f: b.l_f,
            l_g: b.l_g,
            df_ds: parse_named("nonlinearity.dF_ds", &b.df_ds)?,
            df_dgx: parse_named("nonlinearity.dF_dgx", &b.df_dgx)?,
            df_dgy: parse_named("nonlinearity.dF_dgy", &b.df_dgy)?,
            dg_ds: parse_named("nonlinearity.dG_ds", &b.dg_ds)?,
            dg_dgt: parse_named("nonlinearity.dG_dgt", &b.dg_dgt)?,
        }),
        None => None,
    };
    if let Some(nl) = &nl {
        nl.validate()?;
    }

    let problem = GameProblem {
        mesh,
        grid,
        regions,
        step,
        alpha: [f.alpha1, f.alpha2],
        mu: [f.mu1, f.mu2],
        y0,
        targets,
        background: None,
    };
    Ok(Built { problem, lin, nl })
}
