//! CFD-DEM drivers.
//!
//! The multiscale driver projects particles onto the coarse grid (co-located with
//! the DEM partition, so no messages), maps porosity and momentum sources down to
//! the fine grid, advances the fluid there, maps the fluid state back up and
//! advances the particles with drag sampled from the coarse cells. The mono-scale
//! driver does the same on a single grid without any grid-to-grid mapping.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::Vector3;

use crate::cfd::{Boundaries, CfdReport, CfdSettings, FluidProps, FluidState};
use crate::dem::{DemConfig, DemDomain, DragModel, FluidSample, Particle};
use crate::error::{Error, Result};
use crate::interp::{build_comm_matrix, interpolate_fields, CommMatrix, InterpolationKind, Strategy};
use crate::mesh::{halo_exchange_all, GridField, LocalLayout, UniformGrid};
use crate::partition::PartitionMap;
use crate::real::Real;
use crate::sum::ExactSum;
use crate::transport::{RankContext, TrafficCounters};

/// Which driver advances the world.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Multiscale,
    Monoscale,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multiscale" => Ok(Mode::Multiscale),
            "monoscale" => Ok(Mode::Monoscale),
            other => Err(Error::config(format!("unknown mode '{other}' (expected multiscale or monoscale)"))),
        }
    }
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::Multiscale => "multiscale",
            Mode::Monoscale => "monoscale",
        }
    }
}

/// How fluid values are read at a particle position.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FluidSampling {
    /// Values of the coarse cell containing the particle centre.
    #[default]
    Cell,
    /// Velocity, density and viscosity interpolated trilinearly between the
    /// surrounding coarse cell centres. Porosity stays the cell value.
    Trilinear,
}

impl std::str::FromStr for FluidSampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cell" => Ok(FluidSampling::Cell),
            "trilinear" => Ok(FluidSampling::Trilinear),
            other => Err(Error::config(format!("unknown fluid sampling '{other}' (expected cell or trilinear)"))),
        }
    }
}

impl FluidSampling {
    pub fn name(&self) -> &'static str {
        match self {
            FluidSampling::Cell => "cell",
            FluidSampling::Trilinear => "trilinear",
        }
    }
}

/// Time stepping and exchange settings of the coupled run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CouplingConfig<T: Real> {
    pub strategy: Strategy,
    pub drag: DragModel<T>,
    /// Porosity floor applied after projection.
    pub eps_min: T,
    /// Fluid time step.
    pub dt: T,
    /// Fluid steps per coupling step.
    pub n_cfd: usize,
    /// DEM sub-steps per coupling step.
    pub n_sub: usize,
    pub sampling: FluidSampling,
}

impl<T: Real> CouplingConfig<T> {
    pub fn dem_dt(&self) -> T {
        self.dt * T::from_usize(self.n_cfd).unwrap() / T::from_usize(self.n_sub).unwrap()
    }

    fn validate(&self) -> Result<()> {
        if self.n_cfd == 0 || self.n_sub == 0 {
            return Err(Error::config("n_cfd and n_sub must be at least 1"));
        }
        if !(self.dt > T::zero()) {
            return Err(Error::config("coupling time step must be positive"));
        }
        if !(self.eps_min > T::zero() && self.eps_min < T::one()) {
            return Err(Error::config("eps_min must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Wall time and traffic of one phase on one rank.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PhaseStats {
    pub seconds: f64,
    pub traffic: TrafficCounters,
}

impl PhaseStats {
    fn add(&mut self, seconds: f64, traffic: &TrafficCounters) {
        self.seconds += seconds;
        if self.traffic.per_peer.is_empty() {
            self.traffic = traffic.clone();
        } else {
            self.traffic.add(traffic);
        }
    }
}

pub const PHASES: [&str; 7] = ["projection", "interp_down", "cfd", "interp_up", "dem", "drag", "migration"];

/// Per-rank record of one coupling step. Diagnostics are global values.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub time: f64,
    pub total_seconds: f64,
    /// Indexed like [`PHASES`].
    pub phases: [PhaseStats; 7],
    pub cfd: Vec<CfdReport>,
    pub particles: usize,
    pub kinetic_energy: f64,
    /// Sum of `(1 - eps) V` on the coarse grid before flooring.
    pub solid_volume_coarse: f64,
    /// Sum of particle volumes.
    pub particle_volume: f64,
    /// Sum of `(1 - eps) V` on the fluid grid.
    pub solid_volume_fine: f64,
    /// Cells where the porosity floor was applied.
    pub eps_floored: usize,
    /// Sum of projection-time drag on all particles.
    pub drag_total: [f64; 3],
    /// Sum of the mapped particle force density times cell volume on the fluid grid.
    pub fpi_total: [f64; 3],
    pub deleted_particles: usize,
}

impl StepMetrics {
    pub fn phase(&self, name: &str) -> &PhaseStats {
        let i = PHASES.iter().position(|p| *p == name).expect("unknown phase");
        &self.phases[i]
    }

    /// `|sum F_drag + sum F_fpi V| / sum |F_drag|`, or 0 without drag.
    pub fn action_reaction_residual(&self, drag_scale: f64) -> f64 {
        let r: f64 = (0..3).map(|a| (self.drag_total[a] + self.fpi_total[a]).powi(2)).sum::<f64>().sqrt();
        if drag_scale > 0.0 {
            r / drag_scale
        } else {
            r
        }
    }
}

/// Coarse-grid fields exchanged between particles and fluid.
#[derive(Clone, Debug)]
struct CoarseFields<T: Real> {
    eps: GridField<T>,
    beta: GridField<T>,
    beta_up: GridField<T>,
    f_fpi: GridField<T>,
    u: GridField<T>,
    p: GridField<T>,
    rho: GridField<T>,
    mu: GridField<T>,
}

impl<T: Real> CoarseFields<T> {
    /// Fluid state seen by a particle at `x` in owned coarse cell `l`. Trilinear
    /// sampling reads halo cells, which the caller keeps current.
    fn sample(&self, layout: &LocalLayout<T>, l: usize, x: &Vector3<T>, sampling: FluidSampling) -> Result<FluidSample<T>> {
        let porosity = self.eps.get(l, 0);
        if sampling == FluidSampling::Cell {
            return Ok(FluidSample {
                velocity: self.u.vector(l),
                porosity,
                density: self.rho.get(l, 0),
                viscosity: self.mu.get(l, 0),
            });
        }
        let grid = layout.grid();
        let dims = grid.dims();
        let mut base = [0usize; 3];
        let mut t = [T::zero(); 3];
        for a in 0..3 {
            let s = (x[a] - grid.origin()[a]) / grid.spacing()[a] - T::half();
            if dims[a] == 1 {
                continue;
            }
            let top = T::from_usize(dims[a] - 2).unwrap();
            let i0 = s.floor().max(T::zero()).min(top);
            base[a] = i0.to_usize().unwrap();
            t[a] = (s - i0).max(T::zero()).min(T::one());
        }
        let mut velocity = Vector3::zeros();
        let mut density = T::zero();
        let mut viscosity = T::zero();
        for corner in 0..8 {
            let mut w = T::one();
            let mut ijk = base;
            for a in 0..3 {
                if corner >> a & 1 == 1 {
                    w *= t[a];
                    ijk[a] = (ijk[a] + 1).min(dims[a] - 1);
                } else {
                    w *= T::one() - t[a];
                }
            }
            if w == T::zero() {
                continue;
            }
            let c = layout
                .local_index(grid.index(ijk))
                .ok_or_else(|| Error::Consistency(format!("coarse cell {ijk:?} is outside the halo of rank {}", layout.rank())))?;
            velocity += self.u.vector(c) * w;
            density += self.rho.get(c, 0) * w;
            viscosity += self.mu.get(c, 0) * w;
        }
        Ok(FluidSample {
            velocity,
            porosity,
            density,
            viscosity,
        })
    }
}

struct Projection {
    solid: ExactSum,
    particle_volume: ExactSum,
    floored: usize,
    drag: [ExactSum; 3],
    drag_abs: ExactSum,
}

/// Everything one rank holds for a coupled run.
pub struct RankWorld<T: Real> {
    mode: Mode,
    config: CouplingConfig<T>,
    coarse: Arc<LocalLayout<T>>,
    fields: CoarseFields<T>,
    pub fluid: FluidState<T>,
    pub dem: DemDomain<T>,
    down: Option<CommMatrix<T>>,
    up: Option<CommMatrix<T>>,
    /// Fine-grid copies of the mapped coarse fields.
    fine_eps: Option<GridField<T>>,
    fine_beta: Option<GridField<T>>,
    fine_beta_up: Option<GridField<T>>,
    fine_f_fpi: Option<GridField<T>>,
    matrix_builds: usize,
    step: usize,
    time: T,
    last_drag_scale: f64,
}

/// Inputs to [`RankWorld::new`]; identical on every rank.
pub struct WorldSpec<'a, T: Real> {
    pub coarse: &'a UniformGrid<T>,
    pub coarse_map: Arc<PartitionMap>,
    /// Fluid grid and its partition; `None` runs mono-scale on the coarse grid.
    pub fine: Option<(&'a UniformGrid<T>, Arc<PartitionMap>)>,
    pub particles: &'a [Particle<T>],
    pub dem: DemConfig<T>,
    pub props: FluidProps<T>,
    pub boundaries: Boundaries<T>,
    pub cfd: CfdSettings<T>,
    pub coupling: CouplingConfig<T>,
}

fn timed<R>(
    ctx: &RankContext<'_>,
    stats: &mut PhaseStats,
    step: usize,
    name: &'static str,
    f: impl FnOnce() -> Result<R>,
) -> Result<R> {
    let before = ctx.counters();
    let t0 = Instant::now();
    let out = f().map_err(|e| e.in_phase(step, name));
    stats.add(t0.elapsed().as_secs_f64(), &ctx.counters().since(&before));
    out
}

impl<T: Real> RankWorld<T> {
    /// Builds this rank's share of the world. `init_fluid` may set the initial phase
    /// fraction and velocity on the fluid grid.
    pub fn new(ctx: &RankContext<'_>, spec: WorldSpec<'_, T>, init_fluid: impl FnOnce(&mut FluidState<T>)) -> Result<Self> {
        spec.coupling.validate()?;
        let rank = ctx.rank();
        let coarse = LocalLayout::new(spec.coarse, spec.coarse_map.clone(), rank)?;
        let (mode, fluid_layout) = match &spec.fine {
            Some((grid, map)) => {
                if grid.lower() != spec.coarse.lower() || grid.upper() != spec.coarse.upper() {
                    return Err(Error::config("coarse and fine grids must cover the same box"));
                }
                (Mode::Multiscale, LocalLayout::new(grid, map.clone(), rank)?)
            }
            None => (Mode::Monoscale, coarse.clone()),
        };
        let dem = DemDomain::new(spec.coarse, spec.coarse_map.clone(), rank, spec.particles, spec.dem.clone())?;
        if let Some(min_mass) = spec.particles.iter().map(|p| p.mass).reduce(|a, b| a.min(b)) {
            dem.check_time_step(spec.coupling.dem_dt(), min_mass)?;
        }
        let mut fluid = FluidState::new(&fluid_layout, spec.props, spec.boundaries, spec.cfd);
        init_fluid(&mut fluid);
        let (down, up, matrix_builds) = if mode == Mode::Multiscale {
            let down = build_comm_matrix(&coarse, &fluid_layout)?;
            let up = down.reversed();
            (Some(down), Some(up), 1)
        } else {
            (None, None, 0)
        };
        let fine_field = |c| (mode == Mode::Multiscale).then(|| GridField::zeros(&fluid_layout, c));
        let (rho0, mu0) = spec.props.mixture(T::one());
        let fields = CoarseFields {
            eps: GridField::filled(&coarse, 1, T::one()),
            beta: GridField::zeros(&coarse, 1),
            beta_up: GridField::zeros(&coarse, 3),
            f_fpi: GridField::zeros(&coarse, 3),
            u: GridField::zeros(&coarse, 3),
            p: GridField::zeros(&coarse, 1),
            rho: GridField::filled(&coarse, 1, rho0),
            mu: GridField::filled(&coarse, 1, mu0),
        };
        let mut world = Self {
            mode,
            config: spec.coupling,
            coarse,
            fields,
            fluid,
            dem,
            down,
            up,
            fine_eps: fine_field(1).map(|mut f| {
                f.fill(T::one());
                f
            }),
            fine_beta: fine_field(1),
            fine_beta_up: fine_field(3),
            fine_f_fpi: fine_field(3),
            matrix_builds,
            step: 0,
            time: T::zero(),
            last_drag_scale: 0.0,
        };
        world.fluid.init(ctx)?;
        world.dem.exchange(ctx)?;
        world.map_up(ctx)?;
        world.project()?;
        world.map_down(ctx)?;
        let eps0 = world.fluid_eps().clone();
        world.fluid.reset_porosity(&eps0)?;
        world.fluid.init(ctx)?;
        world.compute_particle_forces()?;
        Ok(world)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn config(&self) -> &CouplingConfig<T> {
        &self.config
    }

    pub fn coarse_layout(&self) -> &Arc<LocalLayout<T>> {
        &self.coarse
    }

    /// Communication matrices built so far; stays at one for a multiscale run.
    pub fn matrix_builds(&self) -> usize {
        self.matrix_builds
    }

    pub fn comm_matrix(&self) -> Option<&CommMatrix<T>> {
        self.down.as_ref()
    }

    /// Owned cells covered by less than `threshold` of their volume, as
    /// `(partial, none)`, for the fluid cells of the down mapping and the
    /// coarse cells of the up mapping. `None` in mono-scale mode.
    pub fn coverage_report(&self, threshold: f64) -> Option<[(usize, usize); 2]> {
        Some([self.down.as_ref()?.coverage_report(threshold), self.up.as_ref()?.coverage_report(threshold)])
    }

    pub fn time(&self) -> T {
        self.time
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    pub fn coarse_porosity(&self) -> &GridField<T> {
        &self.fields.eps
    }

    /// Porosity as seen by the fluid solver.
    pub fn fluid_eps(&self) -> &GridField<T> {
        self.fine_eps.as_ref().unwrap_or(&self.fields.eps)
    }

    /// Particle force density mapped onto the fluid grid.
    pub fn fluid_f_fpi(&self) -> &GridField<T> {
        self.fine_f_fpi.as_ref().unwrap_or(&self.fields.f_fpi)
    }

    /// Particle volume per coarse cell, momentum sources and the drag reaction,
    /// from owned particles only. Never communicates.
    fn project(&mut self) -> Result<Projection> {
        let grid = self.coarse.grid().clone();
        let vol = grid.cell_volume();
        let f = &mut self.fields;
        let n_owned = self.coarse.n_owned();
        let mut solid = vec![T::zero(); n_owned];
        let mut cells = Vec::with_capacity(self.dem.local.len());
        for p in &self.dem.local {
            let l = grid
                .locate_cell(&p.position)
                .and_then(|g| self.coarse.local_index(g))
                .filter(|&l| l < n_owned)
                .ok_or_else(|| Error::Consistency(format!("particle {} is not in a cell owned by rank {}", p.id, self.coarse.rank())))?;
            solid[l] += p.volume();
            cells.push(l);
        }
        let mut out = Projection {
            solid: ExactSum::new(),
            particle_volume: ExactSum::new(),
            floored: 0,
            drag: [ExactSum::new(), ExactSum::new(), ExactSum::new()],
            drag_abs: ExactSum::new(),
        };
        for (l, s) in solid.iter().enumerate() {
            let raw = T::one() - *s / vol;
            out.solid.add((*s).as_f64());
            let eps = if raw < self.config.eps_min {
                out.floored += 1;
                self.config.eps_min
            } else {
                raw
            };
            f.eps.set(l, 0, eps);
            f.beta.set(l, 0, T::zero());
            f.beta_up.set_vector(l, &Vector3::zeros());
            f.f_fpi.set_vector(l, &Vector3::zeros());
        }
        for (p, &l) in self.dem.local.iter().zip(&cells) {
            out.particle_volume.add(p.volume().as_f64());
            let sample = f.sample(&self.coarse, l, &p.position, self.config.sampling)?;
            let beta = self.config.drag.beta(p, &sample)?;
            let drag = (sample.velocity - p.velocity) * beta;
            f.beta.set(l, 0, f.beta.get(l, 0) + beta / vol);
            f.beta_up.set_vector(l, &(f.beta_up.vector(l) + p.velocity * (beta / vol)));
            f.f_fpi.set_vector(l, &(f.f_fpi.vector(l) - drag / vol));
            for a in 0..3 {
                out.drag[a].add(drag[a].as_f64());
            }
            out.drag_abs.add(drag.norm().as_f64());
        }
        Ok(out)
    }

    /// Coarse porosity and sources onto the fluid grid.
    fn map_down(&mut self, ctx: &RankContext<'_>) -> Result<()> {
        let Some(down) = &self.down else {
            return self.fluid.set_sources(&self.fields.beta, &self.fields.beta_up);
        };
        let f = &self.fields;
        interpolate_fields(
            down,
            &[&f.eps, &f.beta, &f.beta_up, &f.f_fpi],
            &[
                InterpolationKind::Consistent,
                InterpolationKind::Conservative,
                InterpolationKind::Conservative,
                InterpolationKind::Conservative,
            ],
            &mut [
                self.fine_eps.as_mut().unwrap(),
                self.fine_beta.as_mut().unwrap(),
                self.fine_beta_up.as_mut().unwrap(),
                self.fine_f_fpi.as_mut().unwrap(),
            ],
            self.config.strategy,
            ctx,
        )?;
        self.fluid.set_sources(self.fine_beta.as_ref().unwrap(), self.fine_beta_up.as_ref().unwrap())
    }

    /// Fluid velocity, pressure, density and viscosity onto the coarse grid.
    fn map_up(&mut self, ctx: &RankContext<'_>) -> Result<()> {
        let f = &mut self.fields;
        if let Some(up) = &self.up {
            let kind = InterpolationKind::Consistent;
            interpolate_fields(
                up,
                &[&self.fluid.u, &self.fluid.p, &self.fluid.rho, &self.fluid.mu],
                &[kind; 4],
                &mut [&mut f.u, &mut f.p, &mut f.rho, &mut f.mu],
                self.config.strategy,
                ctx,
            )?;
        } else {
            for l in 0..self.coarse.n_owned() {
                f.u.set_vector(l, &self.fluid.u.vector(l));
                f.p.set(l, 0, self.fluid.p.get(l, 0));
                f.rho.set(l, 0, self.fluid.rho.get(l, 0));
                f.mu.set(l, 0, self.fluid.mu.get(l, 0));
            }
        }
        if self.config.sampling == FluidSampling::Trilinear {
            halo_exchange_all(&mut [&mut f.u, &mut f.rho, &mut f.mu], ctx)?;
        }
        Ok(())
    }

    fn compute_particle_forces(&mut self) -> Result<()> {
        let f = &self.fields;
        let grid = self.coarse.grid();
        let coarse = &self.coarse;
        let model = self.config.drag;
        let sampling = self.config.sampling;
        let mut drag = |p: &Particle<T>| -> Result<Vector3<T>> {
            let l = grid
                .locate_cell(&p.position)
                .and_then(|g| coarse.local_index(g))
                .filter(|&l| l < coarse.n_owned())
                .ok_or_else(|| Error::Consistency(format!("particle {} is not in an owned coarse cell", p.id)))?;
            model.force(p, &f.sample(coarse, l, &p.position, sampling)?)
        };
        self.dem.compute_forces(Some(&mut drag))
    }

    /// Porosity target for fluid sub-step `k` of `n`, ramping linearly from the
    /// current porosity.
    fn porosity_ramp(&self, start: &[T], k: usize) -> GridField<T> {
        let target = self.fluid_eps();
        let n = T::from_usize(self.config.n_cfd).unwrap();
        let s = T::from_usize(k + 1).unwrap() / n;
        let mut out = target.clone();
        for (o, (&a, &b)) in out.values_mut().iter_mut().zip(start.iter().zip(target.values())) {
            *o = if k + 1 == self.config.n_cfd { b } else { a + (b - a) * s };
        }
        out
    }

    /// One coupling step.
    pub fn step(&mut self, ctx: &RankContext<'_>) -> Result<StepMetrics> {
        let t_start = Instant::now();
        let step = self.step;
        let mut m = StepMetrics {
            step: step + 1,
            ..StepMetrics::default()
        };
        let proj = timed(ctx, &mut m.phases[0], step, "projection", || self.project())?;
        timed(ctx, &mut m.phases[1], step, "interp_down", || self.map_down(ctx))?;
        let eps_start = self.fluid.eps.values().to_vec();
        let dt = self.config.dt;
        for k in 0..self.config.n_cfd {
            let target = self.porosity_ramp(&eps_start, k);
            let report = timed(ctx, &mut m.phases[2], step, "cfd", || {
                self.fluid.set_porosity_target(&target)?;
                self.fluid.step(dt, ctx)
            })?;
            m.cfd.push(report);
        }
        timed(ctx, &mut m.phases[3], step, "interp_up", || self.map_up(ctx))?;
        let dt_dem = self.config.dem_dt();
        for _ in 0..self.config.n_sub {
            timed(ctx, &mut m.phases[4], step, "dem", || self.dem.advance_positions(dt_dem))?;
            timed(ctx, &mut m.phases[6], step, "migration", || self.dem.exchange(ctx))?;
            timed(ctx, &mut m.phases[5], step, "drag", || self.compute_particle_forces())?;
            timed(ctx, &mut m.phases[4], step, "dem", || {
                self.dem.finish_velocities(dt_dem);
                Ok(())
            })?;
        }
        ctx.barrier().map_err(|e| e.in_phase(step, "barrier"))?;
        m.total_seconds = t_start.elapsed().as_secs_f64();

        // global diagnostics, outside the timed phases
        let fluid_grid = self.fluid.layout().grid().clone();
        let vf = fluid_grid.cell_volume();
        let eps_f = self.fluid_eps();
        let f_fpi = self.fluid_f_fpi();
        let mut solid_fine = ExactSum::new();
        let mut fpi = [ExactSum::new(), ExactSum::new(), ExactSum::new()];
        for c in 0..self.fluid.layout().n_owned() {
            solid_fine.add(((T::one() - eps_f.get(c, 0)) * vf).as_f64());
            for (a, s) in fpi.iter_mut().enumerate() {
                s.add((f_fpi.get(c, a) * vf).as_f64());
            }
        }
        let mut ke = ExactSum::new();
        for p in &self.dem.local {
            ke.add(p.kinetic_energy().as_f64());
        }
        let [d0, d1, d2] = proj.drag;
        let [f0, f1, f2] = fpi;
        let mut count = ExactSum::new();
        count.add(self.dem.local.len() as f64);
        let mut deleted = ExactSum::new();
        deleted.add(self.dem.deleted() as f64);
        let mut floored = ExactSum::new();
        floored.add(proj.floored as f64);
        let g = ctx.allreduce_exact(&[
            proj.solid,
            proj.particle_volume,
            solid_fine,
            d0,
            d1,
            d2,
            f0,
            f1,
            f2,
            proj.drag_abs,
            ke,
            count,
            deleted,
            floored,
        ])?;
        self.step += 1;
        self.time += T::from_usize(self.config.n_cfd).unwrap() * dt;
        m.time = self.time.as_f64();
        m.solid_volume_coarse = g[0];
        m.particle_volume = g[1];
        m.solid_volume_fine = g[2];
        m.drag_total = [g[3], g[4], g[5]];
        m.fpi_total = [g[6], g[7], g[8]];
        self.last_drag_scale = g[9];
        m.kinetic_energy = g[10];
        m.particles = g[11] as usize;
        m.deleted_particles = g[12] as usize;
        m.eps_floored = g[13] as usize;
        Ok(m)
    }

    /// `sum |F_drag|` of the last step, the natural scale of the action-reaction residual.
    pub fn drag_scale(&self) -> f64 {
        self.last_drag_scale
    }

    /// All particles, sorted by id, on rank 0, with their owner rank.
    pub fn gather_particles(&self, ctx: &RankContext<'_>) -> Result<Option<Vec<(usize, Particle<T>)>>> {
        self.dem.gather(ctx)
    }
}
