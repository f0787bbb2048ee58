use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::real::Real;

use super::particle::Particle;

/// Linear spring-dashpot contact parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContactParams<T: Real> {
    /// Normal spring constant [N/m].
    pub stiffness: T,
    /// Coefficient of restitution in (0, 1].
    pub restitution: T,
    /// Coulomb friction coefficient.
    pub friction: T,
}

impl<T: Real> ContactParams<T> {
    pub fn new(stiffness: T, restitution: T, friction: T) -> Result<Self> {
        if !(stiffness > T::zero()) {
            return Err(Error::config("contact stiffness must be positive"));
        }
        if !(restitution > T::zero() && restitution <= T::one()) {
            return Err(Error::config("restitution must lie in (0, 1]"));
        }
        if !(friction >= T::zero()) {
            return Err(Error::config("friction coefficient must be non-negative"));
        }
        Ok(Self {
            stiffness,
            restitution,
            friction,
        })
    }

    /// Damping ratio giving the configured restitution for a linear dashpot.
    pub fn damping_ratio(&self) -> T {
        let l = self.restitution.ln();
        -l / (T::pi() * T::pi() + l * l).sqrt()
    }

    /// Normal damping coefficient for a pair of effective mass `m_eff`.
    pub fn damping(&self, m_eff: T) -> T {
        let two = T::lit(2.0);
        two * self.damping_ratio() * (self.stiffness * m_eff).sqrt()
    }

    /// Largest time step resolving a contact of the lightest particle.
    pub fn stable_time_step(&self, min_mass: T) -> T {
        T::lit(0.2) * (min_mass / self.stiffness).sqrt()
    }
}

/// Force on the first body and torques on both, for one contact.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairForce<T: Real> {
    pub force: Vector3<T>,
    pub torque_a: Vector3<T>,
    pub torque_b: Vector3<T>,
}

/// Normal and tangential dashpot force for a contact with normal `n` (pointing
/// towards body a), overlap `delta` and relative contact velocity `v_c` of a
/// with respect to b.
fn dashpot<T: Real>(n: &Vector3<T>, delta: T, v_c: &Vector3<T>, m_eff: T, params: &ContactParams<T>) -> (Vector3<T>, Vector3<T>) {
    let c = params.damping(m_eff);
    let vn = v_c.dot(n);
    let f_n = n * (params.stiffness * delta - c * vn);
    let v_t = v_c - n * vn;
    let mut f_t = v_t * (-c);
    let cap = params.friction * f_n.norm();
    let mag = f_t.norm();
    if mag > cap {
        f_t = if mag > T::zero() { f_t * (cap / mag) } else { Vector3::zeros() };
    }
    (f_n, f_t)
}

/// Contact between two spheres, evaluated with `a` as the first body.
///
/// The force on `b` is exactly `-force`. Returns `None` when the spheres do not touch.
pub fn pair_force<T: Real>(a: &Particle<T>, b: &Particle<T>, params: &ContactParams<T>) -> Result<Option<PairForce<T>>> {
    let d = a.position - b.position;
    let dist = d.norm();
    let reach = a.radius + b.radius;
    if dist >= reach {
        return Ok(None);
    }
    if !(dist > T::lit(1e-12) * reach) {
        return Err(Error::Physics(format!(
            "particles {} and {} have coincident centres",
            a.id, b.id
        )));
    }
    let n = d / dist;
    let delta = reach - dist;
    let half_delta = T::half() * delta;
    let arm_a = a.radius - half_delta;
    let arm_b = b.radius - half_delta;
    // contact point velocities: lever arms are -arm_a n and +arm_b n
    let va = a.velocity + a.angular_velocity.cross(&(n * (-arm_a)));
    let vb = b.velocity + b.angular_velocity.cross(&(n * arm_b));
    let m_eff = a.mass * b.mass / (a.mass + b.mass);
    let (f_n, f_t) = dashpot(&n, delta, &(va - vb), m_eff, params);
    let force = f_n + f_t;
    Ok(Some(PairForce {
        force,
        torque_a: (n * (-arm_a)).cross(&f_t),
        torque_b: (n * arm_b).cross(&(-f_t)),
    }))
}

/// Force and torque on `pi` from `pj`. Evaluated in id order so that the two
/// sides of a contact are exact negatives of each other.
pub fn contact_force<T: Real>(pi: &Particle<T>, pj: &Particle<T>, params: &ContactParams<T>) -> Result<(Vector3<T>, Vector3<T>)> {
    if pi.id <= pj.id {
        Ok(pair_force(pi, pj, params)?.map_or((Vector3::zeros(), Vector3::zeros()), |f| (f.force, f.torque_a)))
    } else {
        Ok(pair_force(pj, pi, params)?.map_or((Vector3::zeros(), Vector3::zeros()), |f| (-f.force, f.torque_b)))
    }
}

/// Static plane `normal · x = offset`, with `normal` pointing into the domain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Wall<T: Real> {
    pub normal: Vector3<T>,
    pub offset: T,
}

impl<T: Real> Wall<T> {
    /// Contact with an immovable plane; the wall acts as infinite mass.
    pub fn force(&self, p: &Particle<T>, params: &ContactParams<T>) -> Option<(Vector3<T>, Vector3<T>)> {
        let dist = p.position.dot(&self.normal) - self.offset;
        if dist >= p.radius {
            return None;
        }
        let n = self.normal;
        let delta = p.radius - dist;
        let arm = p.radius - T::half() * delta;
        let v = p.velocity + p.angular_velocity.cross(&(n * (-arm)));
        let (f_n, f_t) = dashpot(&n, delta, &v, p.mass, params);
        Some((f_n + f_t, (n * (-arm)).cross(&f_t)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ball(id: u64, x: f64, u: f64) -> Particle<f64> {
        Particle::new(id, Vector3::new(x, 0.0, 0.0), Vector3::new(u, 0.0, 0.0), 0.005, 2500.0).unwrap()
    }

    #[test]
    fn separated_spheres_feel_nothing() {
        let p = ContactParams::new(1000.0, 0.9, 0.3).unwrap();
        let (f, m) = contact_force(&ball(1, 0.0, 0.0), &ball(2, 0.011, 0.0), &p).unwrap();
        assert_eq!(f, Vector3::zeros());
        assert_eq!(m, Vector3::zeros());
    }

    #[test]
    fn static_overlap_is_hookean() {
        // restitution 1 means no damping
        let p = ContactParams::new(1000.0, 1.0, 0.3).unwrap();
        let (f, _) = contact_force(&ball(1, 0.0, 0.0), &ball(2, 0.0099, 0.0), &p).unwrap();
        assert!((f.x + 0.1).abs() < 1e-12, "{f}");
        assert_eq!(f.y, 0.0);
    }

    #[test]
    fn coincident_centres_are_an_error() {
        let p = ContactParams::new(1000.0, 0.9, 0.3).unwrap();
        assert!(contact_force(&ball(1, 0.0, 0.0), &ball(2, 0.0, 0.0), &p).is_err());
    }

    #[test]
    fn third_law_is_bitwise() {
        let p = ContactParams::new(1000.0, 0.7, 0.5).unwrap();
        let mut a = ball(3, 0.0, 0.3);
        a.angular_velocity = Vector3::new(1.0, 5.0, -2.0);
        a.velocity.y = 0.1;
        let mut b = ball(9, 0.0093, -0.2);
        b.position.z = 0.001;
        b.angular_velocity = Vector3::new(0.0, -3.0, 4.0);
        let (fa, _) = contact_force(&a, &b, &p).unwrap();
        let (fb, _) = contact_force(&b, &a, &p).unwrap();
        assert_eq!(fa, -fb);
        assert_ne!(fa, Vector3::zeros());
    }

    #[test]
    fn friction_is_capped() {
        let p = ContactParams::new(1000.0, 0.5, 0.1).unwrap();
        let mut a = ball(1, 0.0, 0.0);
        a.velocity = Vector3::new(0.0, 50.0, 0.0);
        let b = ball(2, 0.0098, 0.0);
        let f = pair_force(&a, &b, &p).unwrap().unwrap();
        let n = Vector3::new(-1.0, 0.0, 0.0);
        let fn_ = n * f.force.dot(&n);
        let ft = f.force - fn_;
        assert!(ft.norm() <= 0.1 * fn_.norm() * (1.0 + 1e-12));
        assert!(ft.norm() > 0.0);
    }

    #[test]
    fn damping_ratio_inverts_restitution() {
        let p = ContactParams::new(1000.0, 0.9, 0.0).unwrap();
        let z = p.damping_ratio();
        let e = (-z * std::f64::consts::PI / (1.0 - z * z).sqrt()).exp();
        assert!((e - 0.9).abs() < 1e-14);
    }
}
