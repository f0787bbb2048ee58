//! Scenario files: a versioned JSON schema, validation and world construction.
//!
//! The schema is documented in `docs/scenario-schema.md`. Every check reports the
//! dotted path of the offending field.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use dualgrid_core::cfd::{Boundaries, Boundary, CfdSettings, DragCoupling, FluidProps};
use dualgrid_core::coupling::{CouplingConfig, Mode};
use dualgrid_core::dem::{parse_particles, ContactParams, DemConfig, DragModel, OutOfDomain, Particle};
use dualgrid_core::interp::Strategy;
use dualgrid_core::mesh::UniformGrid;
use dualgrid_core::partition::{colocate_partition, rcb_partition, LoadWeights, PartitionMap};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::BenchError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub domain: DomainSpec,
    pub grids: GridsSpec,
    pub fluid: FluidSpec,
    #[serde(default)]
    pub boundaries: BoundariesSpec,
    #[serde(default)]
    pub gravity: [f64; 3],
    #[serde(default)]
    pub cfd: CfdSpec,
    pub dem: DemSpec,
    pub particles: ParticleSource,
    pub coupling: CouplingSpec,
    pub run: RunSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub lower: [f64; 3],
    pub upper: [f64; 3],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridsSpec {
    /// Bulk-scale grid, also the DEM decomposition grid in multiscale mode.
    pub coarse: GridSpec,
    /// Fluid grid in multiscale mode.
    pub fine: GridSpec,
    /// Single grid of monoscale mode; defaults to the coarse grid.
    #[serde(default)]
    pub mono: Option<GridSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionKind {
    Colocated,
    Rcb,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightsKind {
    #[default]
    Uniform,
    ParticleHistogram,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub dims: [usize; 3],
    #[serde(default = "colocated")]
    pub partition: PartitionKind,
    #[serde(default)]
    pub weights: WeightsKind,
    /// Relabel ranks `r -> P-1-r` after partitioning.
    #[serde(default)]
    pub reverse_ranks: bool,
}

fn colocated() -> PartitionKind {
    PartitionKind::Colocated
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FluidSpec {
    pub rho1: f64,
    pub rho2: f64,
    pub mu1: f64,
    pub mu2: f64,
    #[serde(default)]
    pub surface_tension: f64,
    #[serde(default)]
    pub initial_alpha: AlphaInit,
    #[serde(default)]
    pub initial_velocity: [f64; 3],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum AlphaInit {
    Uniform {
        value: f64,
    },
    /// `inside` for cell centres in the box, `outside` elsewhere.
    Box {
        lower: [f64; 3],
        upper: [f64; 3],
        inside: f64,
        outside: f64,
    },
}

impl Default for AlphaInit {
    fn default() -> Self {
        AlphaInit::Uniform { value: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "type", deny_unknown_fields)]
pub enum BoundarySpec {
    #[default]
    Wall,
    Slip,
    Inlet {
        velocity: [f64; 3],
        #[serde(default = "one")]
        alpha: f64,
    },
    Outlet {
        #[serde(default)]
        pressure: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl BoundarySpec {
    fn to_core(self) -> Boundary<f64> {
        match self {
            BoundarySpec::Wall => Boundary::Wall,
            BoundarySpec::Slip => Boundary::Slip,
            BoundarySpec::Inlet { velocity, alpha } => Boundary::Inlet {
                velocity: Vector3::from(velocity),
                alpha,
            },
            BoundarySpec::Outlet { pressure } => Boundary::Outlet { pressure },
        }
    }

    fn is_impermeable(&self) -> bool {
        matches!(self, BoundarySpec::Wall | BoundarySpec::Slip)
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundariesSpec {
    #[serde(default)]
    pub x_min: BoundarySpec,
    #[serde(default)]
    pub x_max: BoundarySpec,
    #[serde(default)]
    pub y_min: BoundarySpec,
    #[serde(default)]
    pub y_max: BoundarySpec,
    #[serde(default)]
    pub z_min: BoundarySpec,
    #[serde(default)]
    pub z_max: BoundarySpec,
}

impl BoundariesSpec {
    fn faces(&self) -> [(&'static str, BoundarySpec); 6] {
        [
            ("x_min", self.x_min),
            ("x_max", self.x_max),
            ("y_min", self.y_min),
            ("y_max", self.y_max),
            ("z_min", self.z_min),
            ("z_max", self.z_max),
        ]
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CfdSpec {
    pub compression: f64,
    pub cfl_limit: f64,
    pub diffusion_limit: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub drag_coupling: String,
}

impl Default for CfdSpec {
    fn default() -> Self {
        let d = CfdSettings::<f64>::default();
        Self {
            compression: d.compression,
            cfl_limit: d.cfl_limit,
            diffusion_limit: d.diffusion_limit,
            tolerance: d.tolerance,
            max_iterations: d.max_iterations,
            drag_coupling: "semi-implicit".into(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemSpec {
    pub stiffness: f64,
    pub restitution: f64,
    pub friction: f64,
    /// Particle walls on x_min, x_max, y_min, y_max, z_min, z_max. Defaults to
    /// the impermeable fluid boundaries.
    #[serde(default)]
    pub walls: Option<[bool; 6]>,
    #[serde(default = "reflect")]
    pub out_of_domain: String,
    #[serde(default)]
    pub external_torque: [f64; 3],
}

fn reflect() -> String {
    "reflect".into()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticleSpec {
    pub id: u64,
    pub position: [f64; 3],
    #[serde(default)]
    pub velocity: [f64; 3],
    pub radius: f64,
    pub density: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum ParticleSource {
    None,
    List {
        particles: Vec<ParticleSpec>,
    },
    /// Text file with `id x y z ux uy uz r rho` per line, relative to the scenario file.
    File {
        path: PathBuf,
    },
    /// Simple cubic packing filling a box, ids from 0 in x-fastest order.
    Lattice {
        lower: [f64; 3],
        upper: [f64; 3],
        radius: f64,
        density: f64,
        /// Centre distance as a multiple of the diameter.
        #[serde(default = "lattice_gap")]
        spacing_factor: f64,
        #[serde(default)]
        velocity: [f64; 3],
        #[serde(default)]
        max_count: Option<usize>,
    },
    /// Non-overlapping random cloud drawn from a seeded generator.
    Random {
        count: usize,
        lower: [f64; 3],
        upper: [f64; 3],
        radius: f64,
        density: f64,
        #[serde(default)]
        max_speed: f64,
        seed: u64,
    },
}

fn lattice_gap() -> f64 {
    1.02
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingSpec {
    /// `di-felice` or `constant`.
    #[serde(default = "di_felice")]
    pub drag: String,
    /// Drag coefficient for the constant model [kg/s].
    #[serde(default)]
    pub beta: f64,
    #[serde(default = "eps_min")]
    pub eps_min: f64,
    pub dt: f64,
    #[serde(default = "one_usize")]
    pub n_cfd: usize,
    #[serde(default = "ten")]
    pub n_sub: usize,
    /// `cell` or `trilinear`.
    #[serde(default = "cell")]
    pub sampling: String,
}

fn di_felice() -> String {
    "di-felice".into()
}

fn eps_min() -> f64 {
    0.05
}

fn one_usize() -> usize {
    1
}

fn ten() -> usize {
    10
}

fn cell() -> String {
    "cell".into()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub end_time: f64,
    #[serde(default = "distributed")]
    pub strategy: String,
    #[serde(default = "multiscale")]
    pub mode: String,
}

fn distributed() -> String {
    "distributed".into()
}

fn multiscale() -> String {
    "multiscale".into()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSpec {
    /// Write field snapshots every this many steps (0: only the final state).
    pub snapshot_every: usize,
    /// Any of `u`, `p`, `alpha`, `eps`, `f_fpi`, `coarse_eps`.
    pub snapshot_fields: Vec<String>,
    /// Write all particle states every this many steps (0: never).
    pub trajectory_every: usize,
    pub probes: Vec<ProbeSpec>,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            snapshot_every: 0,
            snapshot_fields: vec!["u".into(), "p".into(), "alpha".into(), "eps".into()],
            trajectory_every: 0,
            probes: Vec::new(),
        }
    }
}

pub const SNAPSHOT_FIELDS: [&str; 6] = ["u", "p", "alpha", "eps", "f_fpi", "coarse_eps"];

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum ProbeSpec {
    /// Position, velocity and acceleration of one particle every step.
    Particle { name: String, id: u64 },
    /// Fluid value in the fluid cell containing `position` every step.
    Point {
        name: String,
        position: [f64; 3],
        field: String,
    },
}

impl ProbeSpec {
    pub fn name(&self) -> &str {
        match self {
            ProbeSpec::Particle { name, .. } | ProbeSpec::Point { name, .. } => name,
        }
    }
}

/// Command-line settings that override or complement the scenario.
#[derive(Clone, Debug)]
pub struct RunOptions {
    pub ranks: usize,
    pub backend: dualgrid_core::transport::Backend,
    pub strategy: Option<Strategy>,
    pub mode: Option<Mode>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            ranks: 1,
            backend: dualgrid_core::transport::Backend::Deterministic,
            strategy: None,
            mode: None,
        }
    }
}

fn invalid(field: &str, message: impl std::fmt::Display) -> BenchError {
    BenchError::Invalid {
        field: field.to_string(),
        message: message.to_string(),
    }
}

fn positive(field: &str, v: f64) -> Result<(), BenchError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(field, format!("must be a positive number, got {v}")))
    }
}

/// A loaded scenario with its source text hash and resolved particles.
#[derive(Clone, Debug)]
pub struct LoadedScenario {
    pub scenario: Scenario,
    /// SHA-256 of the canonical JSON form of the scenario.
    pub config_hash: String,
    pub particles: Vec<Particle<f64>>,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, BenchError> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| invalid("<root>", e))?;
        if s.schema_version != SCHEMA_VERSION {
            return Err(invalid(
                "schema_version",
                format!("unsupported version {} (expected {SCHEMA_VERSION})", s.schema_version),
            ));
        }
        Ok(s)
    }

    /// Hash of the scenario as serialised by this program, so formatting of the
    /// source file does not matter.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("scenario serialises");
        hex::encode(Sha256::digest(&canonical))
    }

    pub fn strategy(&self) -> Result<Strategy, BenchError> {
        self.run.strategy.parse().map_err(|e| invalid("run.strategy", e))
    }

    pub fn mode(&self) -> Result<Mode, BenchError> {
        self.run.mode.parse().map_err(|e| invalid("run.mode", e))
    }

    pub fn domain_lower(&self) -> Vector3<f64> {
        Vector3::from(self.domain.lower)
    }

    pub fn domain_upper(&self) -> Vector3<f64> {
        Vector3::from(self.domain.upper)
    }

    pub fn grid(&self, which: &str) -> Result<UniformGrid<f64>, BenchError> {
        let spec = match which {
            "coarse" => &self.grids.coarse,
            "fine" => &self.grids.fine,
            "mono" => self.grids.mono.as_ref().unwrap_or(&self.grids.coarse),
            _ => unreachable!("grid name"),
        };
        UniformGrid::from_bounds(self.domain_lower(), self.domain_upper(), spec.dims)
            .map_err(|e| invalid(&format!("grids.{which}.dims"), e))
    }

    pub fn steps(&self) -> usize {
        let per = self.coupling.dt * self.coupling.n_cfd as f64;
        ((self.run.end_time / per) - 1e-9).ceil().max(0.0) as usize
    }

    pub fn fluid_props(&self) -> Result<FluidProps<f64>, BenchError> {
        let f = &self.fluid;
        let mut p = FluidProps::new(f.rho1, f.rho2, f.mu1, f.mu2).map_err(|e| invalid("fluid", e))?;
        p.surface_tension = f.surface_tension;
        Ok(p)
    }

    pub fn boundaries(&self) -> Boundaries<f64> {
        Boundaries {
            faces: self.boundaries.faces().map(|(_, b)| b.to_core()),
        }
    }

    pub fn cfd_settings(&self) -> Result<CfdSettings<f64>, BenchError> {
        let c = &self.cfd;
        Ok(CfdSettings {
            gravity: Vector3::from(self.gravity),
            compression: c.compression,
            cfl_limit: c.cfl_limit,
            diffusion_limit: c.diffusion_limit,
            tolerance: c.tolerance,
            max_iterations: c.max_iterations,
            drag: c
                .drag_coupling
                .parse::<DragCoupling>()
                .map_err(|e| invalid("cfd.drag_coupling", e))?,
        })
    }

    pub fn dem_config(&self) -> Result<DemConfig<f64>, BenchError> {
        let d = &self.dem;
        let contact = ContactParams::new(d.stiffness, d.restitution, d.friction).map_err(|e| invalid("dem", e))?;
        let walls = d
            .walls
            .unwrap_or_else(|| self.boundaries.faces().map(|(_, b)| b.is_impermeable()));
        Ok(DemConfig {
            contact,
            gravity: Vector3::from(self.gravity),
            walls,
            out_of_domain: d
                .out_of_domain
                .parse::<OutOfDomain>()
                .map_err(|e| invalid("dem.out_of_domain", e))?,
            external_torque: Vector3::from(d.external_torque),
        })
    }

    pub fn coupling_config(&self, strategy: Strategy) -> Result<CouplingConfig<f64>, BenchError> {
        let c = &self.coupling;
        let drag = match c.drag.as_str() {
            "di-felice" => DragModel::DiFelice,
            "constant" => {
                positive("coupling.beta", c.beta)?;
                DragModel::Constant { beta: c.beta }
            }
            other => return Err(invalid("coupling.drag", format!("unknown model '{other}' (expected di-felice or constant)"))),
        };
        Ok(CouplingConfig {
            strategy,
            drag,
            eps_min: c.eps_min,
            dt: c.dt,
            n_cfd: c.n_cfd,
            n_sub: c.n_sub,
            sampling: c.sampling.parse().map_err(|e| invalid("coupling.sampling", e))?,
        })
    }

    /// Initial phase fraction at a point.
    pub fn alpha_at(&self, x: &Vector3<f64>) -> f64 {
        match &self.fluid.initial_alpha {
            AlphaInit::Uniform { value } => *value,
            AlphaInit::Box {
                lower,
                upper,
                inside,
                outside,
            } => {
                let inside_box = (0..3).all(|a| x[a] >= lower[a] && x[a] <= upper[a]);
                if inside_box {
                    *inside
                } else {
                    *outside
                }
            }
        }
    }

    /// Checks everything that does not depend on the rank count.
    pub fn validate(&self) -> Result<(), BenchError> {
        for a in 0..3 {
            if !(self.domain.upper[a] > self.domain.lower[a]) {
                return Err(invalid("domain.upper", "must exceed domain.lower on every axis"));
            }
        }
        let coarse = self.grid("coarse")?;
        let fine = self.grid("fine")?;
        self.grid("mono")?;
        if self.grids.coarse.partition != PartitionKind::Colocated {
            return Err(invalid("grids.coarse.partition", "the coarse grid is always co-located with the DEM decomposition"));
        }
        if let Some(m) = &self.grids.mono {
            if m.partition != PartitionKind::Colocated {
                return Err(invalid("grids.mono.partition", "the mono-scale grid is always co-located with the DEM decomposition"));
            }
        }
        for (name, v) in [("rho1", self.fluid.rho1), ("rho2", self.fluid.rho2), ("mu1", self.fluid.mu1), ("mu2", self.fluid.mu2)] {
            positive(&format!("fluid.{name}"), v)?;
        }
        if !(self.fluid.surface_tension >= 0.0) {
            return Err(invalid("fluid.surface_tension", "must be non-negative"));
        }
        match &self.fluid.initial_alpha {
            AlphaInit::Uniform { value } => unit("fluid.initial_alpha.value", *value)?,
            AlphaInit::Box { inside, outside, .. } => {
                unit("fluid.initial_alpha.inside", *inside)?;
                unit("fluid.initial_alpha.outside", *outside)?;
            }
        }
        for (name, b) in self.boundaries.faces() {
            if let BoundarySpec::Inlet { alpha, .. } = b {
                unit(&format!("boundaries.{name}.alpha"), alpha)?;
            }
        }
        positive("cfd.cfl_limit", self.cfd.cfl_limit)?;
        positive("cfd.diffusion_limit", self.cfd.diffusion_limit)?;
        positive("cfd.tolerance", self.cfd.tolerance)?;
        if self.cfd.max_iterations == 0 {
            return Err(invalid("cfd.max_iterations", "must be at least 1"));
        }
        if !(self.cfd.compression >= 0.0) {
            return Err(invalid("cfd.compression", "must be non-negative"));
        }
        self.cfd_settings()?;
        positive("dem.stiffness", self.dem.stiffness)?;
        if !(self.dem.restitution > 0.0 && self.dem.restitution <= 1.0) {
            return Err(invalid("dem.restitution", "must lie in (0, 1]"));
        }
        if !(self.dem.friction >= 0.0) {
            return Err(invalid("dem.friction", "must be non-negative"));
        }
        self.dem_config()?;
        positive("coupling.dt", self.coupling.dt)?;
        if self.coupling.n_cfd == 0 {
            return Err(invalid("coupling.n_cfd", "must be at least 1"));
        }
        if self.coupling.n_sub == 0 {
            return Err(invalid("coupling.n_sub", "must be at least 1"));
        }
        if !(self.coupling.eps_min > 0.0 && self.coupling.eps_min < 1.0) {
            return Err(invalid("coupling.eps_min", "must lie in (0, 1)"));
        }
        self.coupling_config(Strategy::Distributed)?;
        positive("run.end_time", self.run.end_time)?;
        self.strategy()?;
        self.mode()?;
        for f in &self.output.snapshot_fields {
            if !SNAPSHOT_FIELDS.contains(&f.as_str()) {
                return Err(invalid("output.snapshot_fields", format!("unknown field '{f}'")));
            }
        }
        let mut names = std::collections::BTreeSet::new();
        for (i, p) in self.output.probes.iter().enumerate() {
            let field = format!("output.probes[{i}]");
            let name = p.name();
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return Err(invalid(&format!("{field}.name"), "must be a non-empty [A-Za-z0-9_-] string"));
            }
            if !names.insert(name.to_string()) {
                return Err(invalid(&format!("{field}.name"), format!("duplicate probe name '{name}'")));
            }
            if let ProbeSpec::Point { position, field: f, .. } = p {
                if !["u", "p", "alpha", "eps"].contains(&f.as_str()) {
                    return Err(invalid(&format!("{field}.field"), format!("unknown field '{f}'")));
                }
                if fine.locate_cell(&Vector3::from(*position)).is_none() {
                    return Err(invalid(&format!("{field}.position"), "outside the domain"));
                }
            }
        }
        let _ = coarse;
        Ok(())
    }

    /// Resolves the particle source. `base` is the directory of the scenario file.
    pub fn particles(&self, base: &Path) -> Result<Vec<Particle<f64>>, BenchError> {
        let field = "particles";
        let make = |id, x: Vector3<f64>, u: Vector3<f64>, r, rho| {
            Particle::new(id, x, u, r, rho).map_err(|e| invalid(field, e))
        };
        let out = match &self.particles {
            ParticleSource::None => Vec::new(),
            ParticleSource::List { particles } => particles
                .iter()
                .map(|p| make(p.id, p.position.into(), p.velocity.into(), p.radius, p.density))
                .collect::<Result<_, _>>()?,
            ParticleSource::File { path } => {
                let path = base.join(path);
                let text = std::fs::read_to_string(&path).map_err(|e| BenchError::Io {
                    path: path.clone(),
                    source: e,
                })?;
                parse_particles(&text).map_err(|e| invalid("particles.path", format!("{}: {e}", path.display())))?
            }
            ParticleSource::Lattice {
                lower,
                upper,
                radius,
                density,
                spacing_factor,
                velocity,
                max_count,
            } => {
                positive("particles.radius", *radius)?;
                if !(*spacing_factor >= 1.0) {
                    return Err(invalid("particles.spacing_factor", "must be at least 1 (no initial overlap)"));
                }
                let s = 2.0 * radius * spacing_factor;
                let n: Vec<usize> = (0..3)
                    .map(|a| {
                        let span = upper[a] - lower[a] - 2.0 * radius;
                        if span < 0.0 {
                            0
                        } else {
                            (span / s + 1e-9).floor() as usize + 1
                        }
                    })
                    .collect();
                let mut out = Vec::with_capacity(n[0] * n[1] * n[2]);
                'fill: for k in 0..n[2] {
                    for j in 0..n[1] {
                        for i in 0..n[0] {
                            if max_count.is_some_and(|m| out.len() >= m) {
                                break 'fill;
                            }
                            let x = Vector3::new(
                                lower[0] + radius + i as f64 * s,
                                lower[1] + radius + j as f64 * s,
                                lower[2] + radius + k as f64 * s,
                            );
                            out.push(make(out.len() as u64, x, Vector3::from(*velocity), *radius, *density)?);
                        }
                    }
                }
                out
            }
            ParticleSource::Random {
                count,
                lower,
                upper,
                radius,
                density,
                max_speed,
                seed,
            } => {
                positive("particles.radius", *radius)?;
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let mut out: Vec<Particle<f64>> = Vec::with_capacity(*count);
                let min_dist = 2.0 * radius * 1.01;
                let mut attempts = 0usize;
                let lo = Vector3::from(*lower).add_scalar(*radius);
                let hi = Vector3::from(*upper).add_scalar(-*radius);
                if (0..3).any(|a| !(hi[a] > lo[a])) {
                    return Err(invalid("particles.upper", "box too small for the particle radius"));
                }
                while out.len() < *count {
                    attempts += 1;
                    if attempts > 1000 * count + 1000 {
                        return Err(invalid("particles.count", "could not place that many non-overlapping particles"));
                    }
                    let x = Vector3::from_fn(|a, _| rng.random_range(lo[a]..hi[a]));
                    if out.iter().any(|p| (p.position - x).norm() < min_dist) {
                        continue;
                    }
                    let u = if *max_speed > 0.0 {
                        Vector3::from_fn(|_, _| rng.random_range(-*max_speed..*max_speed))
                    } else {
                        Vector3::zeros()
                    };
                    out.push(make(out.len() as u64, x, u, *radius, *density)?);
                }
                out
            }
        };
        let lo = self.domain_lower();
        let hi = self.domain_upper();
        if let Some(p) = out.iter().find(|p| (0..3).any(|a| p.position[a] < lo[a] || p.position[a] >= hi[a])) {
            return Err(invalid("particles", format!("particle {} starts outside the domain", p.id)));
        }
        Ok(out)
    }

    /// Loads, validates and resolves a scenario file.
    pub fn load(path: &Path) -> Result<LoadedScenario, BenchError> {
        let text = std::fs::read_to_string(path).map_err(|e| BenchError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let scenario = Scenario::from_json(&text)?;
        scenario.validate()?;
        let base = path.parent().unwrap_or(Path::new("."));
        let particles = scenario.particles(base)?;
        Ok(LoadedScenario {
            config_hash: scenario.hash(),
            scenario,
            particles,
        })
    }
}

fn unit(field: &str, v: f64) -> Result<(), BenchError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(invalid(field, format!("must lie in [0, 1], got {v}")))
    }
}

/// Grids and partitions of one run, identical on every rank.
#[derive(Clone, Debug)]
pub struct Setup {
    pub mode: Mode,
    pub strategy: Strategy,
    /// DEM decomposition grid: the coarse grid, or the mono grid in monoscale mode.
    pub dem_grid: UniformGrid<f64>,
    pub dem_map: Arc<PartitionMap>,
    /// Fluid grid and partition in multiscale mode.
    pub fine: Option<(UniformGrid<f64>, Arc<PartitionMap>)>,
}

impl Setup {
    pub fn new(loaded: &LoadedScenario, opts: &RunOptions) -> Result<Self, BenchError> {
        let s = &loaded.scenario;
        let mode = match opts.mode {
            Some(m) => m,
            None => s.mode()?,
        };
        let strategy = match opts.strategy {
            Some(st) => st,
            None => s.strategy()?,
        };
        let (dem_name, dem_spec) = match mode {
            Mode::Multiscale => ("coarse", &s.grids.coarse),
            Mode::Monoscale => ("mono", s.grids.mono.as_ref().unwrap_or(&s.grids.coarse)),
        };
        let dem_grid = s.grid(dem_name)?;
        let dem_map = partition(&dem_grid, dem_spec, dem_name, opts.ranks, &loaded.particles)?;
        let fine = match mode {
            Mode::Multiscale => {
                let g = s.grid("fine")?;
                let m = partition(&g, &s.grids.fine, "fine", opts.ranks, &loaded.particles)?;
                Some((g, m))
            }
            Mode::Monoscale => None,
        };
        Ok(Self {
            mode,
            strategy,
            dem_grid,
            dem_map,
            fine,
        })
    }
}

fn partition(
    grid: &UniformGrid<f64>,
    spec: &GridSpec,
    name: &str,
    ranks: usize,
    particles: &[Particle<f64>],
) -> Result<Arc<PartitionMap>, BenchError> {
    let field = format!("grids.{name}.partition");
    let map = match spec.partition {
        PartitionKind::Colocated => colocate_partition(grid, ranks).map_err(|e| invalid(&field, e))?,
        PartitionKind::Rcb => {
            let weights = match spec.weights {
                WeightsKind::Uniform => LoadWeights::uniform(grid.cell_count()),
                WeightsKind::ParticleHistogram => LoadWeights::histogram(grid, particles.iter().map(|p| p.position))
                    .map_err(|e| invalid(&format!("grids.{name}.weights"), e))?,
            };
            rcb_partition(grid, &weights, ranks).map_err(|e| invalid(&field, e))?
        }
    };
    Ok(Arc::new(if spec.reverse_ranks { map.reversed() } else { map }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> serde_json::Value {
        serde_json::json!({
            "schema_version": 1,
            "name": "t",
            "domain": {"lower": [0.0, 0.0, 0.0], "upper": [1.0, 1.0, 1.0]},
            "grids": {"coarse": {"dims": [2, 2, 2]}, "fine": {"dims": [4, 4, 4], "partition": "rcb"}},
            "fluid": {"rho1": 1000.0, "rho2": 1000.0, "mu1": 1e-3, "mu2": 1e-3},
            "dem": {"stiffness": 1000.0, "restitution": 0.9, "friction": 0.3},
            "particles": {"kind": "none"},
            "coupling": {"dt": 1e-3},
            "run": {"end_time": 0.01}
        })
    }

    fn parse(v: &serde_json::Value) -> Result<Scenario, BenchError> {
        let s = Scenario::from_json(&v.to_string())?;
        s.validate()?;
        Ok(s)
    }

    fn field_of(e: BenchError) -> String {
        match e {
            BenchError::Invalid { field, .. } => field,
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn minimal_scenario_is_valid() {
        let s = parse(&minimal()).unwrap();
        assert_eq!(s.steps(), 10);
        assert_eq!(s.mode().unwrap(), Mode::Multiscale);
        assert_eq!(s.dem_config().unwrap().walls, [true; 6]);
    }

    #[test]
    fn validation_names_the_field() {
        let cases: [(&str, serde_json::Value); 6] = [
            ("fluid.rho1", serde_json::json!({"fluid": {"rho1": -1.0, "rho2": 1.0, "mu1": 1.0, "mu2": 1.0}})),
            ("coupling.dt", serde_json::json!({"coupling": {"dt": 0.0}})),
            ("grids.coarse.dims", serde_json::json!({"grids": {"coarse": {"dims": [0, 2, 2]}, "fine": {"dims": [4, 4, 4]}}})),
            ("run.mode", serde_json::json!({"run": {"end_time": 1.0, "mode": "both"}})),
            ("dem.restitution", serde_json::json!({"dem": {"stiffness": 1.0, "restitution": 1.5, "friction": 0.3}})),
            ("schema_version", serde_json::json!({"schema_version": 2})),
        ];
        for (field, patch) in cases {
            let mut v = minimal();
            for (k, x) in patch.as_object().unwrap() {
                v[k] = x.clone();
            }
            assert_eq!(field_of(parse(&v).unwrap_err()), field);
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v = minimal();
        v["grids"]["fine"]["dimz"] = serde_json::json!([1, 1, 1]);
        assert!(parse(&v).is_err());
    }

    #[test]
    fn hash_ignores_formatting() {
        let v = minimal();
        let a = Scenario::from_json(&v.to_string()).unwrap();
        let b = Scenario::from_json(&serde_json::to_string_pretty(&v).unwrap()).unwrap();
        assert_eq!(a.hash(), b.hash());
        let mut w = v.clone();
        w["coupling"]["dt"] = serde_json::json!(2e-3);
        assert_ne!(a.hash(), Scenario::from_json(&w.to_string()).unwrap().hash());
    }

    #[test]
    fn lattice_fills_the_box_without_overlap() {
        let mut v = minimal();
        v["particles"] = serde_json::json!({
            "kind": "lattice", "lower": [0.0, 0.0, 0.0], "upper": [0.1, 0.05, 0.02],
            "radius": 0.005, "density": 2500.0, "spacing_factor": 1.0
        });
        let s = parse(&v).unwrap();
        let ps = s.particles(Path::new(".")).unwrap();
        assert_eq!(ps.len(), 10 * 5 * 2);
        assert!(ps.iter().all(|p| p.position.x + p.radius <= 0.1 + 1e-12));
    }

    #[test]
    fn random_cloud_is_seeded_and_separated() {
        let mut v = minimal();
        v["particles"] = serde_json::json!({
            "kind": "random", "count": 200, "lower": [0.0, 0.0, 0.0], "upper": [1.0, 1.0, 1.0],
            "radius": 0.02, "density": 2500.0, "max_speed": 0.1, "seed": 4
        });
        let s = parse(&v).unwrap();
        let a = s.particles(Path::new(".")).unwrap();
        let b = s.particles(Path::new(".")).unwrap();
        assert_eq!(a, b);
        for (i, p) in a.iter().enumerate() {
            for q in &a[..i] {
                assert!((p.position - q.position).norm() >= 0.04);
            }
        }
    }
}
