//! Discrete element solver for spheres.
//!
//! Linear spring-dashpot contacts found through a bin grid nested in the coarse
//! cells, velocity Verlet integration, and per-step migration of particles and
//! ghost copies between the ranks of the coarse partition.

mod contact;
mod domain;
mod drag;
mod io;
mod particle;

use nalgebra::{UnitQuaternion, Vector3};

pub use contact::{contact_force, pair_force, ContactParams, PairForce, Wall};
pub use domain::{DemConfig, DemDomain, ExchangeStats, OutOfDomain};
pub use drag::{drag_force, DragModel, FluidSample};
pub use io::{format_particles, parse_particles};
pub use particle::Particle;

use crate::error::{Error, Result};
use crate::real::Real;

/// Half a velocity update from the stored force and torque plus gravity.
pub fn half_kick<T: Real>(p: &mut Particle<T>, dt: T, gravity: &Vector3<T>) {
    let h = T::half() * dt;
    p.velocity += (p.force / p.mass + gravity) * h;
    p.angular_velocity += p.torque * (h / p.inertia);
}

/// Position and orientation update at constant velocity.
pub fn drift<T: Real>(p: &mut Particle<T>, dt: T) {
    p.position += p.velocity * dt;
    let spin = UnitQuaternion::from_scaled_axis(p.angular_velocity * dt);
    p.orientation = UnitQuaternion::new_normalize((spin * p.orientation).into_inner());
}

/// One velocity Verlet step for a closed particle set.
///
/// `forces` must overwrite `force` and `torque` of every particle from the
/// drifted state; the stored forces of the previous step drive the first half
/// kick. Gravity is added here and must not be included by `forces`.
pub fn integrate_step<T: Real, F>(
    particles: &mut [Particle<T>],
    dt: T,
    gravity: &Vector3<T>,
    contact: Option<&ContactParams<T>>,
    mut forces: F,
) -> Result<()>
where
    F: FnMut(&mut [Particle<T>]) -> Result<()>,
{
    if !(dt > T::zero()) {
        return Err(Error::config("DEM time step must be positive"));
    }
    if let Some(params) = contact {
        if let Some(m) = particles.iter().map(|p| p.mass).reduce(|a, b| a.min(b)) {
            let bound = params.stable_time_step(m);
            if dt > bound {
                return Err(Error::TimeStep {
                    dt: dt.as_f64(),
                    bound: bound.as_f64(),
                });
            }
        }
    }
    for p in particles.iter_mut() {
        half_kick(p, dt, gravity);
        drift(p, dt);
    }
    forces(particles)?;
    for p in particles.iter_mut() {
        half_kick(p, dt, gravity);
    }
    Ok(())
}

/// Contact forces of a small closed set, all pairs in id order. Reference for tests.
pub fn brute_force_contacts<T: Real>(particles: &mut [Particle<T>], params: &ContactParams<T>) -> Result<()> {
    let n = particles.len();
    let mut out = vec![(Vector3::zeros(), Vector3::zeros()); n];
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| particles[i].id);
    for &i in &order {
        for &j in &order {
            if i != j {
                let (f, m) = contact_force(&particles[i], &particles[j], params)?;
                out[i].0 += f;
                out[i].1 += m;
            }
        }
    }
    for (p, (f, m)) in particles.iter_mut().zip(out) {
        p.force = f;
        p.torque = m;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::mesh::UniformGrid;
    use crate::partition::{colocate_partition, PartitionMap};
    use crate::transport::{launch, Backend};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sphere(id: u64, x: [f64; 3], u: [f64; 3]) -> Particle<f64> {
        Particle::new(id, Vector3::from(x), Vector3::from(u), 0.005, 2500.0).unwrap()
    }

    fn bed_contact() -> ContactParams<f64> {
        ContactParams::new(1000.0, 0.9, 0.3).unwrap()
    }

    /// Restitution of a linear spring-dashpot from its closed-form solution: the
    /// contact ends when the spring-dashpot force returns to zero.
    fn analytic_restitution(k: f64, c: f64, m_eff: f64) -> f64 {
        let w0 = (k / m_eff).sqrt();
        let z = c / (2.0 * (k * m_eff).sqrt());
        let wd = w0 * (1.0 - z * z).sqrt();
        // δ(t) = v0/wd e^{-z w0 t} sin(wd t); force k δ + c δ' vanishes at t* with
        // tan(wd t*) = -2 z sqrt(1-z²) / (1 - 2 z²)
        let phi = (-2.0 * z * (1.0 - z * z).sqrt()).atan2(1.0 - 2.0 * z * z);
        let t_end = (std::f64::consts::PI + phi) / wd;
        let ddelta = |t: f64| (-z * w0 * t).exp() * ((wd * t).cos() - z * w0 / wd * (wd * t).sin());
        -ddelta(t_end)
    }

    #[test]
    fn free_flight() {
        let mut ps = vec![sphere(1, [0.0; 3], [1.0, 0.0, 0.0])];
        integrate_step(&mut ps, 0.1, &Vector3::zeros(), None, |_| Ok(())).unwrap();
        assert_eq!(ps[0].position, Vector3::new(0.1, 0.0, 0.0));
    }

    #[test]
    fn gravity_verlet_is_exact() {
        let g = Vector3::new(0.0, 0.0, -9.81);
        let mut ps = vec![sphere(1, [0.0; 3], [0.0; 3])];
        let dt = 1e-3;
        for _ in 0..1000 {
            integrate_step(&mut ps, dt, &g, None, |_| Ok(())).unwrap();
        }
        assert!((ps[0].velocity.z + 9.81).abs() < 1e-12);
        assert!((ps[0].position.z + 0.5 * 9.81).abs() < 1e-12);
    }

    #[test]
    fn time_step_bound_is_enforced() {
        let params = bed_contact();
        let mut ps = vec![sphere(1, [0.0; 3], [0.0; 3])];
        let bound = params.stable_time_step(ps[0].mass);
        let err = integrate_step(&mut ps, bound * 1.01, &Vector3::zeros(), Some(&params), |_| Ok(())).unwrap_err();
        assert!(matches!(err, Error::TimeStep { .. }));
    }

    #[test]
    fn quaternion_stays_normalised() {
        let mut ps = vec![sphere(1, [0.0; 3], [0.0; 3])];
        ps[0].angular_velocity = Vector3::new(3.0, -7.0, 11.0);
        for _ in 0..10000 {
            integrate_step(&mut ps, 1e-3, &Vector3::zeros(), None, |_| Ok(())).unwrap();
        }
        assert!((ps[0].orientation.as_ref().norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn analytic_oracle_recovers_undamped_limit() {
        assert!((analytic_restitution(1000.0, 0.0, 1e-3) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_sphere_restitution() {
        let params = bed_contact();
        let v = 0.5;
        let mut ps = vec![sphere(1, [-0.0052, 0.0, 0.0], [v / 2.0, 0.0, 0.0]), sphere(2, [0.0052, 0.0, 0.0], [-v / 2.0, 0.0, 0.0])];
        let m_eff = ps[0].mass / 2.0;
        let oracle = analytic_restitution(params.stiffness, params.damping(m_eff), m_eff);
        // separation is where the contact force vanishes, slightly before δ returns to zero
        assert!((oracle - 0.9).abs() < 0.005, "oracle {oracle}");
        let dt = params.stable_time_step(ps[0].mass) / 20.0;
        let mut touched = false;
        for _ in 0..200_000 {
            integrate_step(&mut ps, dt, &Vector3::zeros(), Some(&params), |ps| brute_force_contacts(ps, &params)).unwrap();
            let gap = (ps[1].position - ps[0].position).norm();
            touched |= gap < 0.01;
            if touched && gap > 0.0102 {
                break;
            }
        }
        assert!(touched);
        let rel = ps[1].velocity.x - ps[0].velocity.x;
        let e = rel / v;
        assert!((e - 0.9).abs() < 0.9 * 0.02, "measured e = {e}");
        assert!((e - oracle).abs() < 0.005, "measured e = {e}, oracle {oracle}");
        // equal masses head on: momentum stays zero
        assert!((ps[0].velocity + ps[1].velocity).norm() < 1e-12);
    }

    #[test]
    fn bouncing_ball_on_a_wall() {
        let params = bed_contact();
        let wall = Wall { normal: Vector3::z(), offset: 0.0 };
        let mut ps = vec![sphere(1, [0.0, 0.0, 0.0052], [0.0, 0.0, -0.4])];
        let dt = params.stable_time_step(ps[0].mass) / 20.0;
        let mut touched = false;
        for _ in 0..200_000 {
            integrate_step(&mut ps, dt, &Vector3::zeros(), Some(&params), |ps| {
                let (f, m) = wall.force(&ps[0], &params).unwrap_or_default();
                ps[0].force = f;
                ps[0].torque = m;
                Ok(())
            })
            .unwrap();
            touched |= ps[0].position.z < 0.005;
            if touched && ps[0].position.z > 0.0052 {
                break;
            }
        }
        let e = ps[0].velocity.z / 0.4;
        assert!((e - 0.9).abs() < 0.9 * 0.02, "measured e = {e}");
    }

    #[test]
    fn constant_beta_relaxation() {
        let model = DragModel::Constant { beta: 2e-3 };
        let u_f = Vector3::new(0.7, 0.0, 0.0);
        let mut ps = vec![sphere(1, [0.0; 3], [0.0; 3])];
        let m = ps[0].mass;
        let tau = m / 2e-3;
        let steps = 20_000;
        let dt = tau / steps as f64;
        for _ in 0..steps {
            integrate_step(&mut ps, dt, &Vector3::zeros(), None, |ps| {
                ps[0].force = drag_force(&model, &ps[0], u_f, 1.0, 1000.0, 1e-3)?;
                Ok(())
            })
            .unwrap();
        }
        let expect = 0.7 * (1.0 - (-1.0f64).exp());
        assert!(((ps[0].velocity.x - expect) / expect).abs() < 1e-6, "{} vs {expect}", ps[0].velocity.x);
    }

    #[test]
    fn energy_never_grows_through_a_contact() {
        let params = ContactParams::new(1000.0, 0.6, 0.3).unwrap();
        let mut ps = vec![sphere(1, [-0.0052, 0.0, 0.0], [0.3, 0.05, 0.0]), sphere(2, [0.0052, 0.002, 0.0], [-0.3, 0.0, 0.0])];
        let dt = params.stable_time_step(ps[0].mass) / 50.0;
        let energy = |ps: &[Particle<f64>]| {
            let d = (ps[0].position - ps[1].position).norm();
            let delta = (0.01 - d).max(0.0);
            ps.iter().map(|p| p.kinetic_energy()).sum::<f64>() + 0.5 * params.stiffness * delta * delta
        };
        let mut prev = energy(&ps);
        let e0 = prev;
        for _ in 0..20_000 {
            integrate_step(&mut ps, dt, &Vector3::zeros(), Some(&params), |ps| brute_force_contacts(ps, &params)).unwrap();
            let e = energy(&ps);
            // Verlet shadow energy oscillates at O(dt²); allow that much
            assert!(e <= prev + 1e-6 * e0, "{e} > {prev}");
            prev = e;
        }
        assert!(prev < e0);
    }

    fn cloud(n: usize, seed: u64) -> Vec<Particle<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out: Vec<Particle<f64>> = Vec::new();
        let mut id = 0;
        while out.len() < n {
            let x = Vector3::new(rng.random_range(0.01..0.19), rng.random_range(0.01..0.19), rng.random_range(0.01..0.19));
            if out.iter().any(|p| (p.position - x).norm() < 0.0105) {
                continue;
            }
            let u = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
            out.push(Particle::new(id * 7 + 3, x, u, 0.005, 2500.0).unwrap());
            id += 1;
        }
        out
    }

    fn run_cloud(p: usize, particles: &[Particle<f64>], steps: usize, policy: OutOfDomain, walls: bool) -> (Vec<Particle<f64>>, usize) {
        let g = if walls { -9.81 } else { 0.0 };
        let coarse = UniformGrid::from_bounds(Vector3::zeros(), Vector3::repeat(0.2), [8, 8, 8]).unwrap();
        let map = Arc::new(colocate_partition(&coarse, p).unwrap());
        let config = DemConfig {
            contact: bed_contact(),
            gravity: Vector3::new(0.0, 0.0, g),
            walls: [walls; 6],
            out_of_domain: policy,
            external_torque: Vector3::zeros(),
        };
        let out = launch(Backend::Deterministic, p, |ctx| {
            let mut dom = DemDomain::new(&coarse, map.clone(), ctx.rank(), particles, config.clone())?;
            let dt = 2e-4;
            dom.exchange(ctx)?;
            dom.compute_forces(None)?;
            for _ in 0..steps {
                dom.step(dt, ctx, None)?;
            }
            let deleted = ctx.allreduce_sum(&[dom.deleted() as f64])?[0] as usize;
            Ok((dom.gather(ctx)?, deleted))
        })
        .unwrap();
        let (all, deleted) = out.into_iter().next().unwrap();
        (all.unwrap().into_iter().map(|(_, p)| p).collect(), deleted)
    }

    #[test]
    fn cloud_is_bitwise_identical_across_rank_counts() {
        let ps = cloud(120, 5);
        let (seq, _) = run_cloud(1, &ps, 150, OutOfDomain::Reflect, true);
        assert_eq!(seq.len(), ps.len());
        for p in [2, 4, 8] {
            let (par, _) = run_cloud(p, &ps, 150, OutOfDomain::Reflect, true);
            assert_eq!(par, seq, "P = {p}");
        }
    }

    #[test]
    fn delete_policy_counts_removed_particles() {
        let ps = cloud(60, 9);
        let (left, deleted) = run_cloud(2, &ps, 1000, OutOfDomain::Delete, false);
        assert!(deleted > 0);
        assert_eq!(left.len() + deleted, ps.len());
    }

    #[test]
    fn error_policy_aborts() {
        let coarse = UniformGrid::from_bounds(Vector3::zeros(), Vector3::repeat(0.2), [4, 4, 4]).unwrap();
        let map = Arc::new(PartitionMap::single(coarse.dims()));
        let ps = vec![sphere(1, [0.195, 0.1, 0.1], [10.0, 0.0, 0.0])];
        let config = DemConfig {
            contact: bed_contact(),
            gravity: Vector3::zeros(),
            walls: [false; 6],
            out_of_domain: OutOfDomain::Error,
            external_torque: Vector3::zeros(),
        };
        let mut dom = DemDomain::new(&coarse, map, 0, &ps, config).unwrap();
        assert!(matches!(dom.advance_positions(1e-3), Err(Error::OutOfDomain { id: 1, .. })));
    }

    #[test]
    fn crossing_particle_changes_owner_once() {
        let coarse = UniformGrid::from_bounds(Vector3::zeros(), Vector3::new(0.4, 0.1, 0.1), [4, 1, 1]).unwrap();
        let map = Arc::new(colocate_partition(&coarse, 2).unwrap());
        let ps = vec![sphere(1, [0.19, 0.05, 0.05], [1.0, 0.0, 0.0])];
        let config = DemConfig {
            contact: bed_contact(),
            gravity: Vector3::zeros(),
            walls: [false; 6],
            out_of_domain: OutOfDomain::Error,
            external_torque: Vector3::zeros(),
        };
        let out = launch(Backend::Deterministic, 2, |ctx| {
            let mut dom = DemDomain::new(&coarse, map.clone(), ctx.rank(), &ps, config.clone())?;
            let mut owners = Vec::new();
            let mut migrations = 0;
            for _ in 0..40 {
                let s = dom.step(1e-3, ctx, None)?;
                migrations += s.migrated_out;
                owners.push(dom.local.len());
            }
            Ok((owners, migrations))
        })
        .unwrap();
        let (o0, m0) = &out[0];
        let (o1, m1) = &out[1];
        assert_eq!((*m0, *m1), (1, 0));
        assert!(o0.iter().zip(o1).all(|(a, b)| a + b == 1));
        assert_eq!(o0[..9], [1; 9]);
        assert_eq!(o1[10..], [1; 30]);
    }

    #[test]
    fn interior_particles_send_nothing() {
        let coarse = UniformGrid::from_bounds(Vector3::zeros(), Vector3::new(0.8, 0.1, 0.1), [8, 1, 1]).unwrap();
        let map = Arc::new(colocate_partition(&coarse, 2).unwrap());
        let ps = vec![sphere(1, [0.05, 0.05, 0.05], [0.0; 3]), sphere(2, [0.75, 0.05, 0.05], [0.0; 3])];
        let config = DemConfig {
            contact: bed_contact(),
            gravity: Vector3::zeros(),
            walls: [false; 6],
            out_of_domain: OutOfDomain::Error,
            external_torque: Vector3::zeros(),
        };
        let counts = launch(Backend::Deterministic, 2, |ctx| {
            let mut dom = DemDomain::new(&coarse, map.clone(), ctx.rank(), &ps, config.clone())?;
            for _ in 0..5 {
                dom.step(1e-3, ctx, None)?;
            }
            Ok(ctx.counters().messages_sent)
        })
        .unwrap();
        assert_eq!(counts, vec![0, 0]);
    }

    #[test]
    fn coarse_cells_must_fit_a_particle() {
        let coarse = UniformGrid::from_bounds(Vector3::zeros(), Vector3::repeat(0.04), [8, 8, 8]).unwrap();
        let map = Arc::new(PartitionMap::single(coarse.dims()));
        let ps = vec![sphere(1, [0.02; 3], [0.0; 3])];
        let config = DemConfig {
            contact: bed_contact(),
            gravity: Vector3::zeros(),
            walls: [false; 6],
            out_of_domain: OutOfDomain::Error,
            external_torque: Vector3::zeros(),
        };
        assert!(DemDomain::new(&coarse, map, 0, &ps, config).is_err());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]
        #[test]
        fn pairwise_forces_cancel(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut ps: Vec<Particle<f64>> = (0..12)
                .map(|i| {
                    let x = Vector3::new(rng.random_range(0.0..0.03), rng.random_range(0.0..0.03), rng.random_range(0.0..0.03));
                    let mut p = Particle::new(i, x, Vector3::new(rng.random_range(-1.0..1.0), 0.0, rng.random_range(-1.0..1.0)), rng.random_range(0.004..0.008), 2500.0).unwrap();
                    p.angular_velocity = Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), 0.0);
                    p
                })
                .collect();
            let params = ContactParams::new(1000.0, 0.8, 0.3).unwrap();
            for a in &ps {
                for b in &ps {
                    if a.id < b.id {
                        let (fab, _) = contact_force(a, b, &params).unwrap();
                        let (fba, _) = contact_force(b, a, &params).unwrap();
                        proptest::prop_assert_eq!(fab, -fba);
                    }
                }
            }
            brute_force_contacts(&mut ps, &params).unwrap();
            let total = ps.iter().fold(Vector3::zeros(), |acc, p| acc + p.force);
            proptest::prop_assert!(total.norm() < 1e-12 * ps.len() as f64);
        }

        #[test]
        fn migration_conserves_count_and_momentum(seed in 0u64..1000, p in 2usize..6) {
            let ps = cloud(40, seed);
            let (out, deleted) = run_cloud(p, &ps, 20, OutOfDomain::Error, false);
            proptest::prop_assert_eq!(deleted, 0);
            proptest::prop_assert_eq!(out.len(), ps.len());
            let momentum = |set: &[Particle<f64>]| set.iter().fold(Vector3::zeros(), |acc, q| acc + q.velocity * q.mass);
            let (before, after) = (momentum(&ps), momentum(&out));
            let scale = ps.iter().map(|q| q.mass * q.velocity.norm()).sum::<f64>();
            proptest::prop_assert!((after - before).norm() <= 1e-12 * scale);
        }
    }
}
