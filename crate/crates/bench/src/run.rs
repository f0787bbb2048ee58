//! The run harness: launches the ranks, steps the world and writes the outputs.

use std::fs;
use std::path::{Path, PathBuf};

use dualgrid_core::coupling::{RankWorld, StepMetrics, WorldSpec, PHASES};
use dualgrid_core::dem::Particle;
use dualgrid_core::mesh::GridField;
use dualgrid_core::partition::{imbalance_factor, LoadWeights};
use dualgrid_core::transport::wire::{Reader, Writer};
use dualgrid_core::transport::{launch, RankContext};
use dualgrid_core::{Error, Result as CoreResult};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::output::{io_err, Cell, CsvWriter, Snapshot};
use crate::scenario::{LoadedScenario, ProbeSpec, RunOptions, Setup};
use crate::BenchError;

pub const MANIFEST: &str = "manifest.json";
pub const METRICS: &str = "metrics.csv";
pub const TIMING: &str = "timing.csv";
pub const TRAFFIC: &str = "traffic.csv";
pub const PARTICLES_FINAL: &str = "particles_final.csv";
pub const TRAJECTORIES: &str = "trajectories.csv";
pub const SNAPSHOT_DIR: &str = "snapshots";
pub const SNAPSHOT_INDEX: &str = "snapshots/index.csv";
pub const PROBE_DIR: &str = "probes";

/// What a run was and how it was configured. Contains nothing time-dependent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub scenario: String,
    pub config_sha256: String,
    pub code_version: String,
    pub backend: String,
    pub ranks: usize,
    pub strategy: String,
    pub mode: String,
    pub steps: usize,
    pub dt: f64,
    pub particles: usize,
    /// Communication matrices built per rank (1 in multiscale mode, 0 otherwise).
    pub matrix_builds: Vec<usize>,
    /// Max over mean of the initial particle count per rank on the DEM partition.
    pub dem_imbalance: Option<f64>,
    /// Max over mean of the fluid cell count per rank.
    pub fluid_cell_imbalance: f64,
    /// Fluid and coarse cells covered below 99 % by the other grid, summed over
    /// ranks. Such cells only receive the covered share of mapped values.
    pub poorly_covered_cells: Option<[usize; 2]>,
}

/// Everything a run produced, in memory as well as on disk.
#[derive(Debug)]
pub struct RunResult {
    pub out_dir: PathBuf,
    pub manifest: Manifest,
    /// `metrics[rank][step]`.
    pub metrics: Vec<Vec<StepMetrics>>,
}

impl RunResult {
    /// Per-step metrics of rank 0; global diagnostics are the same on every rank.
    pub fn global(&self) -> &[StepMetrics] {
        &self.metrics[0]
    }

    /// Sum over ranks and steps of one phase's sent messages.
    pub fn phase_messages(&self, phase: &str) -> u64 {
        self.metrics
            .iter()
            .flatten()
            .map(|m| m.phase(phase).traffic.messages_sent + m.phase(phase).traffic.messages_received)
            .sum()
    }
}

const COVERAGE_THRESHOLD: f64 = 0.99;

struct RankOutput {
    metrics: Vec<StepMetrics>,
    matrix_builds: usize,
    coverage: Option<[(usize, usize); 2]>,
}

/// Root-side output writers.
struct Outputs {
    dir: PathBuf,
    index: CsvWriter,
    probes: Vec<(ProbeSpec, CsvWriter)>,
    trajectories: Option<CsvWriter>,
}

fn abort(e: BenchError) -> Error {
    Error::Aborted(format!("output: {e}"))
}

impl Outputs {
    fn create(dir: &Path, loaded: &LoadedScenario) -> Result<Self, BenchError> {
        let out = &loaded.scenario.output;
        fs::create_dir_all(dir.join(SNAPSHOT_DIR)).map_err(io_err(dir))?;
        fs::create_dir_all(dir.join(PROBE_DIR)).map_err(io_err(dir))?;
        let index = CsvWriter::create(&dir.join(SNAPSHOT_INDEX), &["step", "time", "field", "components", "file"])?;
        let mut probes = Vec::new();
        for p in &out.probes {
            let path = dir.join(PROBE_DIR).join(format!("{}.csv", p.name()));
            let header: &[&str] = match p {
                ProbeSpec::Particle { .. } => &[
                    "step", "time", "id", "rank", "x", "y", "z", "ux", "uy", "uz", "ax", "ay", "az",
                ],
                ProbeSpec::Point { field, .. } if field == "u" => &["step", "time", "cell", "ux", "uy", "uz"],
                ProbeSpec::Point { .. } => &["step", "time", "cell", "value"],
            };
            probes.push((p.clone(), CsvWriter::create(&path, header)?));
        }
        let trajectories = if out.trajectory_every > 0 {
            Some(CsvWriter::create(
                &dir.join(TRAJECTORIES),
                &["step", "time", "id", "x", "y", "z", "ux", "uy", "uz"],
            )?)
        } else {
            None
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            index,
            probes,
            trajectories,
        })
    }
}

fn field_for<'a>(world: &'a RankWorld<f64>, name: &str) -> &'a GridField<f64> {
    match name {
        "u" => &world.fluid.u,
        "p" => &world.fluid.p,
        "alpha" => &world.fluid.alpha,
        "eps" => &world.fluid.eps,
        "f_fpi" => world.fluid_f_fpi(),
        "coarse_eps" => world.coarse_porosity(),
        _ => unreachable!("validated field name"),
    }
}

fn write_snapshots(world: &RankWorld<f64>, step: usize, ctx: &RankContext<'_>, out: &mut Option<Outputs>, fields: &[String]) -> CoreResult<()> {
    let time = world.time();
    for name in fields {
        let f = field_for(world, name);
        let Some(values) = f.gather_global(ctx)? else {
            continue;
        };
        let o = out.as_mut().expect("root has outputs");
        let file = format!("{name}_{step:06}.bin");
        Snapshot::new(f.layout().grid(), step, time, f.components(), values)
            .write(&o.dir.join(SNAPSHOT_DIR).join(&file))
            .map_err(abort)?;
        o.index
            .row(&[step.into(), time.into(), name.as_str().into(), f.components().into(), file.as_str().into()])
            .map_err(abort)?;
    }
    Ok(())
}

/// One gather per step carrying every probe sample held by this rank.
fn sample_probes(world: &RankWorld<f64>, probes: &[ProbeSpec], step: usize, ctx: &RankContext<'_>, out: &mut Option<Outputs>) -> CoreResult<()> {
    let mut w = Writer::new();
    let layout = world.fluid.layout();
    for (i, p) in probes.iter().enumerate() {
        match p {
            ProbeSpec::Particle { id, .. } => {
                if let Some(q) = world.dem.local.iter().find(|q| q.id == *id) {
                    w.u32(i as u32);
                    q.encode(&mut w);
                }
            }
            ProbeSpec::Point { position, field, .. } => {
                let grid = layout.grid();
                let Some(cell) = grid.locate_cell(&Vector3::from(*position)) else {
                    continue;
                };
                if let Some(l) = layout.local_index(cell).filter(|&l| l < layout.n_owned()) {
                    let f = field_for(world, field);
                    w.u32(i as u32);
                    w.u64(cell as u64);
                    for c in 0..f.components() {
                        w.f64(f.get(l, c));
                    }
                }
            }
        }
    }
    let Some(parts) = ctx.gather_to_root(w.finish())? else {
        return Ok(());
    };
    let o = out.as_mut().expect("root has outputs");
    let time = world.time();
    let gravity = world.dem.config().gravity;
    for (rank, part) in parts.iter().enumerate() {
        let mut r = Reader::new(part);
        while !r.is_done() {
            let i = r.u32()? as usize;
            let (spec, csv) = o.probes.get_mut(i).ok_or_else(|| Error::Wire(format!("probe index {i}")))?;
            match spec {
                ProbeSpec::Particle { .. } => {
                    let q = Particle::<f64>::decode(&mut r)?;
                    let a = q.acceleration(&gravity);
                    let mut row: Vec<Cell> = vec![step.into(), time.into(), q.id.into(), rank.into()];
                    row.extend(q.position.iter().chain(q.velocity.iter()).chain(a.iter()).map(|&v| Cell::F(v)));
                    csv.row(&row).map_err(abort)?;
                }
                ProbeSpec::Point { field, .. } => {
                    let cell = r.u64()?;
                    let n = if field == "u" { 3 } else { 1 };
                    let mut row: Vec<Cell> = vec![step.into(), time.into(), cell.into()];
                    for _ in 0..n {
                        row.push(Cell::F(r.f64()?));
                    }
                    csv.row(&row).map_err(abort)?;
                }
            }
        }
    }
    Ok(())
}

fn particle_rows(ps: &[(usize, Particle<f64>)]) -> Vec<Vec<Cell>> {
    ps.iter()
        .map(|(_, p)| {
            let q = p.orientation.as_ref().coords;
            let mut row = vec![Cell::from(p.id)];
            row.extend(
                p.position
                    .iter()
                    .chain(p.velocity.iter())
                    .chain(p.angular_velocity.iter())
                    .chain([q.w, q.x, q.y, q.z].iter())
                    .chain(p.force.iter())
                    .chain([p.radius, p.density].iter())
                    .map(|&v| Cell::F(v)),
            );
            row
        })
        .collect()
}

/// Runs a loaded scenario and writes its outputs to `out_dir`.
pub fn run(loaded: &LoadedScenario, opts: &RunOptions, out_dir: &Path) -> Result<RunResult, BenchError> {
    let s = &loaded.scenario;
    let setup = Setup::new(loaded, opts)?;
    let steps = s.steps();
    let props = s.fluid_props()?;
    let cfd = s.cfd_settings()?;
    let dem = s.dem_config()?;
    let coupling = s.coupling_config(setup.strategy)?;
    let boundaries = s.boundaries();
    let v0 = Vector3::from(s.fluid.initial_velocity);
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let snapshot_every = s.output.snapshot_every;
    let trajectory_every = s.output.trajectory_every;
    let probes = s.output.probes.clone();
    let fields = s.output.snapshot_fields.clone();

    let per_rank = launch(opts.backend, opts.ranks, |ctx| {
        let mut out = if ctx.is_root() {
            Some(Outputs::create(out_dir, loaded).map_err(abort)?)
        } else {
            None
        };
        let spec = WorldSpec {
            coarse: &setup.dem_grid,
            coarse_map: setup.dem_map.clone(),
            fine: setup.fine.as_ref().map(|(g, m)| (g, m.clone())),
            particles: &loaded.particles,
            dem: dem.clone(),
            props,
            boundaries,
            cfd,
            coupling,
        };
        let mut world = RankWorld::new(ctx, spec, |f| {
            f.set_alpha(|x| s.alpha_at(x));
            f.set_velocity(|_| v0);
        })?;
        write_snapshots(&world, 0, ctx, &mut out, &fields)?;
        if !probes.is_empty() {
            sample_probes(&world, &probes, 0, ctx, &mut out)?;
        }
        let mut metrics = Vec::with_capacity(steps);
        for step in 1..=steps {
            metrics.push(world.step(ctx)?);
            if !probes.is_empty() {
                sample_probes(&world, &probes, step, ctx, &mut out)?;
            }
            if trajectory_every > 0 && step % trajectory_every == 0 {
                if let Some(ps) = world.gather_particles(ctx)? {
                    let o = out.as_mut().expect("root has outputs");
                    let t = o.trajectories.as_mut().expect("trajectory file");
                    for (_, p) in &ps {
                        let mut row = vec![Cell::from(step), Cell::F(world.time()), Cell::from(p.id)];
                        row.extend(p.position.iter().chain(p.velocity.iter()).map(|&v| Cell::F(v)));
                        t.row(&row).map_err(abort)?;
                    }
                }
            }
            if snapshot_every > 0 && step % snapshot_every == 0 && step != steps {
                write_snapshots(&world, step, ctx, &mut out, &fields)?;
            }
        }
        if steps > 0 {
            write_snapshots(&world, steps, ctx, &mut out, &fields)?;
        }
        if let Some(ps) = world.gather_particles(ctx)? {
            let o = out.take().expect("root has outputs");
            let mut w = CsvWriter::create(
                &o.dir.join(PARTICLES_FINAL),
                &[
                    "id", "x", "y", "z", "ux", "uy", "uz", "wx", "wy", "wz", "qw", "qx", "qy", "qz", "fx", "fy", "fz",
                    "radius", "density",
                ],
            )
            .map_err(abort)?;
            for row in particle_rows(&ps) {
                w.row(&row).map_err(abort)?;
            }
            w.finish().map_err(abort)?;
            o.index.finish().map_err(abort)?;
            for (_, csv) in o.probes {
                csv.finish().map_err(abort)?;
            }
            if let Some(t) = o.trajectories {
                t.finish().map_err(abort)?;
            }
        }
        Ok(RankOutput {
            metrics,
            matrix_builds: world.matrix_builds(),
            coverage: world.coverage_report(COVERAGE_THRESHOLD),
        })
    })?;

    let metrics: Vec<Vec<StepMetrics>> = per_rank.iter().map(|r| r.metrics.clone()).collect();
    write_metrics(out_dir, &metrics)?;
    write_timing(out_dir, &metrics)?;
    write_traffic(out_dir, &metrics)?;

    let dem_imbalance = LoadWeights::histogram(&setup.dem_grid, loaded.particles.iter().map(|p| p.position))
        .ok()
        .map(|w| imbalance_factor(&setup.dem_map, &w))
        .transpose()?;
    let fluid_cell_imbalance = match &setup.fine {
        Some((g, m)) => imbalance_factor(m, &LoadWeights::uniform(g.cell_count()))?,
        None => imbalance_factor(&setup.dem_map, &LoadWeights::uniform(setup.dem_grid.cell_count()))?,
    };
    let manifest = Manifest {
        scenario: s.name.clone(),
        config_sha256: loaded.config_hash.clone(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        backend: opts.backend.name().to_string(),
        ranks: opts.ranks,
        strategy: setup.strategy.name().to_string(),
        mode: setup.mode.name().to_string(),
        steps,
        dt: s.coupling.dt,
        particles: loaded.particles.len(),
        matrix_builds: per_rank.iter().map(|r| r.matrix_builds).collect(),
        dem_imbalance,
        fluid_cell_imbalance,
        poorly_covered_cells: per_rank.iter().try_fold([0, 0], |acc, r| {
            r.coverage.map(|[down, up]| [acc[0] + down.0 + down.1, acc[1] + up.0 + up.1])
        }),
    };
    let path = out_dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    fs::write(&path, text + "\n").map_err(io_err(&path))?;
    Ok(RunResult {
        out_dir: out_dir.to_path_buf(),
        manifest,
        metrics,
    })
}

fn write_metrics(dir: &Path, metrics: &[Vec<StepMetrics>]) -> Result<(), BenchError> {
    let mut header: Vec<String> = [
        "step",
        "time",
        "particles",
        "deleted",
        "kinetic_energy",
        "particle_volume",
        "solid_volume_coarse",
        "solid_volume_fine",
        "eps_floored",
        "drag_x",
        "drag_y",
        "drag_z",
        "fpi_x",
        "fpi_y",
        "fpi_z",
        "cfl",
        "diffusion_number",
        "pressure_iterations",
        "pressure_residual",
        "max_divergence",
        "alpha_mass",
        "clipped_mass",
    ]
    .map(String::from)
    .to_vec();
    for p in PHASES {
        header.push(format!("{p}_messages"));
        header.push(format!("{p}_bytes"));
    }
    let refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut w = CsvWriter::create(&dir.join(METRICS), &refs)?;
    for (i, m) in metrics[0].iter().enumerate() {
        let last = m.cfd.last();
        let mut row: Vec<Cell> = vec![
            m.step.into(),
            m.time.into(),
            m.particles.into(),
            m.deleted_particles.into(),
            m.kinetic_energy.into(),
            m.particle_volume.into(),
            m.solid_volume_coarse.into(),
            m.solid_volume_fine.into(),
            m.eps_floored.into(),
        ];
        row.extend(m.drag_total.iter().chain(&m.fpi_total).map(|&v| Cell::F(v)));
        row.extend([
            Cell::F(m.cfd.iter().map(|c| c.cfl).fold(0.0, f64::max)),
            Cell::F(m.cfd.iter().map(|c| c.diffusion_number).fold(0.0, f64::max)),
            Cell::from(m.cfd.iter().map(|c| c.projection.iterations).sum::<usize>()),
            Cell::F(last.map_or(0.0, |c| c.projection.residual)),
            Cell::F(m.cfd.iter().map(|c| c.projection.max_divergence).fold(0.0, f64::max)),
            Cell::F(last.map_or(0.0, |c| c.alpha_mass_after)),
            Cell::F(m.cfd.iter().map(|c| c.clipped_mass).sum()),
        ]);
        for p in PHASES {
            let (msgs, bytes) = metrics
                .iter()
                .map(|r| &r[i].phase(p).traffic)
                .fold((0, 0), |(a, b), t| (a + t.messages_sent, b + t.bytes_sent));
            row.push(Cell::U(msgs));
            row.push(Cell::U(bytes));
        }
        w.row(&row)?;
    }
    w.finish()
}

fn write_timing(dir: &Path, metrics: &[Vec<StepMetrics>]) -> Result<(), BenchError> {
    let mut header = vec!["step".to_string(), "total_s".to_string()];
    header.extend(PHASES.iter().map(|p| format!("{p}_s")));
    let refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut w = CsvWriter::create(&dir.join(TIMING), &refs)?;
    for i in 0..metrics[0].len() {
        let max = |f: &dyn Fn(&StepMetrics) -> f64| metrics.iter().map(|r| f(&r[i])).fold(0.0, f64::max);
        let mut row = vec![Cell::from(metrics[0][i].step), Cell::F(max(&|m| m.total_seconds))];
        for p in PHASES {
            row.push(Cell::F(max(&|m| m.phase(p).seconds)));
        }
        w.row(&row)?;
    }
    w.finish()
}

fn write_traffic(dir: &Path, metrics: &[Vec<StepMetrics>]) -> Result<(), BenchError> {
    let mut w = CsvWriter::create(
        &dir.join(TRAFFIC),
        &["step", "rank", "phase", "messages_sent", "bytes_sent", "messages_received", "bytes_received"],
    )?;
    for i in 0..metrics[0].len() {
        for (rank, r) in metrics.iter().enumerate() {
            for p in PHASES {
                let t = &r[i].phase(p).traffic;
                if t.messages_sent == 0 && t.messages_received == 0 {
                    continue;
                }
                w.row(&[
                    r[i].step.into(),
                    rank.into(),
                    p.into(),
                    t.messages_sent.into(),
                    t.bytes_sent.into(),
                    t.messages_received.into(),
                    t.bytes_received.into(),
                ])?;
            }
        }
    }
    w.finish()
}

/// Loads a scenario file and runs it.
pub fn run_file(path: &Path, opts: &RunOptions, out_dir: &Path) -> Result<RunResult, BenchError> {
    let loaded = crate::scenario::Scenario::load(path)?;
    run(&loaded, opts, out_dir)
}
