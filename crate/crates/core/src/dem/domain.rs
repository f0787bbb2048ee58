use std::collections::HashMap;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::mesh::{UniformGrid, STENCIL};
use crate::partition::PartitionMap;
use crate::real::Real;
use crate::transport::wire::{Reader, Writer};
use crate::transport::RankContext;

use super::contact::{contact_force, ContactParams, Wall};
use super::particle::Particle;
use super::{drift, half_kick};

const TAG_PARTICLES: u32 = 0x5041_5254;

/// What happens to a particle that leaves the global domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutOfDomain {
    /// Mirror the position back inside and reverse the normal velocity.
    Reflect,
    /// Remove the particle from the simulation.
    Delete,
    /// Abort the run.
    Error,
}

impl FromStr for OutOfDomain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reflect" => Ok(OutOfDomain::Reflect),
            "delete" => Ok(OutOfDomain::Delete),
            "error" => Ok(OutOfDomain::Error),
            other => Err(Error::config(format!(
                "unknown out-of-domain policy '{other}' (expected reflect, delete or error)"
            ))),
        }
    }
}

/// Static DEM configuration shared by all ranks.
#[derive(Clone, Debug, PartialEq)]
pub struct DemConfig<T: Real> {
    pub contact: ContactParams<T>,
    pub gravity: Vector3<T>,
    /// Solid walls on the domain faces, ordered x-, x+, y-, y+, z-, z+.
    pub walls: [bool; 6],
    pub out_of_domain: OutOfDomain,
    /// Constant external torque applied to every particle.
    pub external_torque: Vector3<T>,
}

/// Particle traffic of one exchange round on one rank.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ExchangeStats {
    pub migrated_out: usize,
    pub migrated_in: usize,
    pub ghosts: usize,
}

/// Particles owned by one rank plus read-only ghost copies from its neighbours.
///
/// A particle is owned by the rank owning the coarse cell that contains its
/// centre. Ghosts are copies of particles whose cell touches (by face, edge or
/// corner) a cell of another rank; with coarse cells at least one particle
/// diameter wide this covers every possible contact partner.
#[derive(Debug)]
pub struct DemDomain<T: Real> {
    coarse: UniformGrid<T>,
    map: Arc<PartitionMap>,
    rank: usize,
    config: DemConfig<T>,
    walls: Vec<Wall<T>>,
    /// Neighbour-search bins per coarse cell along each axis.
    subdiv: [usize; 3],
    pub local: Vec<Particle<T>>,
    pub ghosts: Vec<Particle<T>>,
    deleted: usize,
    reflected: usize,
}

impl<T: Real> DemDomain<T> {
    /// Keeps the particles of `all` that this rank owns. `all` must be the same on every rank.
    pub fn new(
        coarse: &UniformGrid<T>,
        map: Arc<PartitionMap>,
        rank: usize,
        all: &[Particle<T>],
        config: DemConfig<T>,
    ) -> Result<Self> {
        if !map.matches(coarse) {
            return Err(Error::config("DEM partition does not match the coarse grid"));
        }
        let r_max = all.iter().map(|p| p.radius).fold(T::zero(), |a, b| a.max(b));
        let h = coarse.spacing();
        if r_max > T::zero() && coarse.min_spacing() < r_max + r_max {
            return Err(Error::config(format!(
                "coarse cells ({}) must be at least one particle diameter ({}) wide",
                coarse.min_spacing(),
                r_max + r_max
            )));
        }
        let subdiv = [0, 1, 2].map(|a| {
            if r_max > T::zero() {
                (h[a] / (r_max + r_max)).floor().to_usize().unwrap_or(1).clamp(1, 64)
            } else {
                1
            }
        });
        let (lo, hi) = (coarse.lower(), coarse.upper());
        let mut walls = Vec::new();
        for a in 0..3 {
            let mut n = Vector3::zeros();
            n[a] = T::one();
            if config.walls[2 * a] {
                walls.push(Wall { normal: n, offset: lo[a] });
            }
            if config.walls[2 * a + 1] {
                walls.push(Wall { normal: -n, offset: -hi[a] });
            }
        }
        let mut ids: Vec<u64> = all.iter().map(|p| p.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("particle ids must be unique"));
        }
        let mut local = Vec::new();
        for p in all {
            let cell = coarse.locate_cell(&p.position).ok_or(Error::OutOfDomain {
                id: p.id,
                x: p.position.x.as_f64(),
                y: p.position.y.as_f64(),
                z: p.position.z.as_f64(),
            })?;
            if map.owner(cell) == rank {
                local.push(p.clone());
            }
        }
        local.sort_by_key(|p| p.id);
        Ok(Self {
            coarse: coarse.clone(),
            map,
            rank,
            config,
            walls,
            subdiv,
            local,
            ghosts: Vec::new(),
            deleted: 0,
            reflected: 0,
        })
    }

    pub fn config(&self) -> &DemConfig<T> {
        &self.config
    }

    pub fn coarse(&self) -> &UniformGrid<T> {
        &self.coarse
    }

    pub fn map(&self) -> &Arc<PartitionMap> {
        &self.map
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Particles removed by the delete policy on this rank so far.
    pub fn deleted(&self) -> usize {
        self.deleted
    }

    pub fn reflected(&self) -> usize {
        self.reflected
    }

    /// Errors if `dt` cannot resolve a contact of the lightest particle in `all`.
    pub fn check_time_step(&self, dt: T, min_mass: T) -> Result<()> {
        if !(dt > T::zero()) {
            return Err(Error::config("DEM time step must be positive"));
        }
        let bound = self.config.contact.stable_time_step(min_mass);
        if dt > bound {
            return Err(Error::TimeStep {
                dt: dt.as_f64(),
                bound: bound.as_f64(),
            });
        }
        Ok(())
    }

    /// First half of a velocity Verlet step: half kick and drift of owned particles,
    /// then the out-of-domain policy.
    pub fn advance_positions(&mut self, dt: T) -> Result<()> {
        let g = self.config.gravity;
        for p in &mut self.local {
            half_kick(p, dt, &g);
            drift(p, dt);
        }
        self.enforce_domain()
    }

    /// Second half kick with freshly computed forces.
    pub fn finish_velocities(&mut self, dt: T) {
        let g = self.config.gravity;
        for p in &mut self.local {
            half_kick(p, dt, &g);
        }
    }

    fn enforce_domain(&mut self) -> Result<()> {
        let lo = self.coarse.lower();
        let hi = self.coarse.upper();
        let policy = self.config.out_of_domain;
        let mut deleted = 0;
        let mut reflected = 0;
        let mut err = None;
        self.local.retain_mut(|p| {
            if self.coarse.locate_cell(&p.position).is_some() {
                return true;
            }
            match policy {
                OutOfDomain::Delete => {
                    deleted += 1;
                    false
                }
                OutOfDomain::Error => {
                    err.get_or_insert(Error::OutOfDomain {
                        id: p.id,
                        x: p.position.x.as_f64(),
                        y: p.position.y.as_f64(),
                        z: p.position.z.as_f64(),
                    });
                    true
                }
                OutOfDomain::Reflect => {
                    reflected += 1;
                    for a in 0..3 {
                        let x = p.position[a];
                        if x < lo[a] {
                            p.position[a] = lo[a] + lo[a] - x;
                            p.velocity[a] = -p.velocity[a];
                        } else if x >= hi[a] {
                            p.position[a] = hi[a] + hi[a] - x;
                            p.velocity[a] = -p.velocity[a];
                        }
                        // stay strictly inside the half-open box
                        let span = hi[a] - lo[a];
                        let inset = span * T::lit(1e-12);
                        p.position[a] = p.position[a].max(lo[a]).min(hi[a] - inset);
                    }
                    true
                }
            }
        });
        self.deleted += deleted;
        self.reflected += reflected;
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    fn cell_of(&self, p: &Particle<T>) -> Result<usize> {
        self.coarse.locate_cell(&p.position).ok_or_else(|| {
            Error::Consistency(format!("particle {} is outside the coarse grid", p.id))
        })
    }

    /// Hands particles to the owners of their new cells and rebuilds the ghost layer.
    ///
    /// One message per neighbouring rank that has something to receive; nothing is
    /// sent when all particles stay put and none sits next to a rank boundary.
    pub fn exchange(&mut self, ctx: &RankContext<'_>) -> Result<ExchangeStats> {
        let p = ctx.world_size();
        let me = self.rank;
        let mut migrate: Vec<Vec<usize>> = vec![Vec::new(); p];
        let mut ghost: Vec<Vec<usize>> = vec![Vec::new(); p];
        let mut keep = Vec::with_capacity(self.local.len());
        let mut self_ghosts = Vec::new();
        let mut stats = ExchangeStats::default();
        for (i, part) in self.local.iter().enumerate() {
            let cell = self.cell_of(part)?;
            let owner = self.map.owner(cell);
            if owner == me {
                keep.push(i);
            } else {
                migrate[owner].push(i);
                stats.migrated_out += 1;
            }
            let mut sent_to: [usize; 27] = [usize::MAX; 27];
            let mut n_sent = 0;
            for d in STENCIL {
                let Some(nb) = self.coarse.offset(cell, d) else { continue };
                let q = self.map.owner(nb);
                if q == owner || sent_to[..n_sent].contains(&q) {
                    continue;
                }
                sent_to[n_sent] = q;
                n_sent += 1;
                if q == me {
                    self_ghosts.push(i);
                } else {
                    ghost[q].push(i);
                }
            }
        }
        let mut outgoing = Vec::new();
        if p > 1 {
            for q in 0..p {
                if migrate[q].is_empty() && ghost[q].is_empty() {
                    continue;
                }
                let size = Particle::<T>::wire_size();
                let mut w = Writer::with_capacity(8 + size * (migrate[q].len() + ghost[q].len()));
                w.u32(migrate[q].len() as u32);
                for &i in &migrate[q] {
                    self.local[i].encode(&mut w);
                }
                w.u32(ghost[q].len() as u32);
                for &i in &ghost[q] {
                    self.local[i].encode(&mut w);
                }
                stats.ghosts += ghost[q].len();
                outgoing.push((q, w.finish()));
            }
        }
        let received = ctx.sparse_exchange(TAG_PARTICLES, outgoing)?;
        let mut ghosts: Vec<Particle<T>> = self_ghosts.iter().map(|&i| self.local[i].clone()).collect();
        let mut local: Vec<Particle<T>> = Vec::with_capacity(keep.len());
        let old = std::mem::take(&mut self.local);
        let mut keep_flags = vec![false; old.len()];
        for &i in &keep {
            keep_flags[i] = true;
        }
        local.extend(old.into_iter().zip(keep_flags).filter(|(_, k)| *k).map(|(p, _)| p));
        for (src, payload) in received {
            let mut r = Reader::new(&payload);
            let n_mig = r.u32()?;
            for _ in 0..n_mig {
                let part = Particle::decode(&mut r)?;
                let cell = self.cell_of(&part)?;
                if self.map.owner(cell) != me {
                    return Err(Error::Consistency(format!(
                        "rank {src} migrated particle {} to rank {me}, which does not own its cell",
                        part.id
                    )));
                }
                local.push(part);
                stats.migrated_in += 1;
            }
            let n_ghost = r.u32()?;
            for _ in 0..n_ghost {
                ghosts.push(Particle::decode(&mut r)?);
            }
            r.finish()?;
        }
        local.sort_by_key(|p| p.id);
        ghosts.sort_by_key(|p| p.id);
        self.local = local;
        self.ghosts = ghosts;
        Ok(stats)
    }

    fn bin_of(&self, x: &Vector3<T>) -> [i64; 3] {
        let o = self.coarse.origin();
        let h = self.coarse.spacing();
        let d = self.coarse.dims();
        [0, 1, 2].map(|a| {
            let s = self.subdiv[a];
            let w = h[a] / T::from_usize(s).unwrap();
            let b = ((x[a] - o[a]) / w).floor().to_i64().unwrap_or(0);
            b.clamp(0, (d[a] * s) as i64 - 1)
        })
    }

    /// Contact, wall and drag forces on owned particles. Uses the current ghost layer;
    /// never communicates. Contributions are summed in a fixed order: contacts by
    /// partner id, walls, then drag.
    pub fn compute_forces(
        &mut self,
        mut drag: Option<&mut dyn FnMut(&Particle<T>) -> Result<Vector3<T>>>,
    ) -> Result<()> {
        let n_local = self.local.len();
        let mut bins: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
        for (i, p) in self.local.iter().chain(self.ghosts.iter()).enumerate() {
            bins.entry(self.bin_of(&p.position)).or_default().push(i as u32);
        }
        let get = |i: usize| -> &Particle<T> {
            if i < n_local {
                &self.local[i]
            } else {
                &self.ghosts[i - n_local]
            }
        };
        let params = self.config.contact;
        let mut results = Vec::with_capacity(n_local);
        let mut partners: Vec<(u64, usize)> = Vec::new();
        for i in 0..n_local {
            let pi = &self.local[i];
            let b = self.bin_of(&pi.position);
            partners.clear();
            for d in STENCIL {
                let key = [b[0] + d[0], b[1] + d[1], b[2] + d[2]];
                if let Some(list) = bins.get(&key) {
                    for &j in list {
                        let j = j as usize;
                        if j != i {
                            partners.push((get(j).id, j));
                        }
                    }
                }
            }
            partners.sort_unstable();
            let mut force = Vector3::zeros();
            let mut torque = self.config.external_torque;
            for &(_, j) in &partners {
                let pj = get(j);
                let reach = pi.radius + pj.radius;
                if (pi.position - pj.position).norm_squared() >= reach * reach {
                    continue;
                }
                let (f, m) = contact_force(pi, pj, &params)?;
                force += f;
                torque += m;
            }
            for w in &self.walls {
                if let Some((f, m)) = w.force(pi, &params) {
                    force += f;
                    torque += m;
                }
            }
            let f_drag = match drag.as_mut() {
                Some(d) => d(pi)?,
                None => Vector3::zeros(),
            };
            force += f_drag;
            results.push((force, torque, f_drag));
        }
        for (p, (f, m, d)) in self.local.iter_mut().zip(results) {
            p.force = f;
            p.torque = m;
            p.drag = d;
        }
        Ok(())
    }

    /// One DEM step: positions, exchange, forces, velocities.
    pub fn step(
        &mut self,
        dt: T,
        ctx: &RankContext<'_>,
        drag: Option<&mut dyn FnMut(&Particle<T>) -> Result<Vector3<T>>>,
    ) -> Result<ExchangeStats> {
        self.advance_positions(dt)?;
        let stats = self.exchange(ctx)?;
        self.compute_forces(drag)?;
        self.finish_velocities(dt);
        Ok(stats)
    }

    /// Every owned particle, sorted by id, assembled on rank 0.
    pub fn gather(&self, ctx: &RankContext<'_>) -> Result<Option<Vec<(usize, Particle<T>)>>> {
        let mut w = Writer::new();
        for p in &self.local {
            p.encode(&mut w);
        }
        let Some(parts) = ctx.gather_to_root(w.finish())? else {
            return Ok(None);
        };
        let mut all = Vec::new();
        for (rank, payload) in parts.iter().enumerate() {
            let mut r = Reader::new(payload);
            while !r.is_done() {
                all.push((rank, Particle::decode(&mut r)?));
            }
        }
        all.sort_by_key(|(_, p)| p.id);
        Ok(Some(all))
    }
}
