use nalgebra::{Quaternion, UnitQuaternion, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::transport::wire::{Reader, Writer};

/// A rigid sphere.
#[derive(Clone, Debug, PartialEq)]
pub struct Particle<T: Real> {
    pub id: u64,
    pub position: Vector3<T>,
    pub velocity: Vector3<T>,
    pub angular_velocity: Vector3<T>,
    pub orientation: UnitQuaternion<T>,
    pub radius: T,
    pub density: T,
    pub mass: T,
    pub inertia: T,
    /// Total force from the last evaluation, gravity excluded.
    pub force: Vector3<T>,
    pub torque: Vector3<T>,
    /// Drag part of `force`, kept for diagnostics.
    pub drag: Vector3<T>,
}

impl<T: Real> Particle<T> {
    pub fn new(id: u64, position: Vector3<T>, velocity: Vector3<T>, radius: T, density: T) -> Result<Self> {
        if !(radius > T::zero()) || !(density > T::zero()) {
            return Err(Error::config(format!(
                "particle {id} needs positive radius and density (got {radius}, {density})"
            )));
        }
        if !position.iter().chain(velocity.iter()).all(|v| v.is_finite()) {
            return Err(Error::config(format!("particle {id} has a non-finite state")));
        }
        let mut p = Self {
            id,
            position,
            velocity,
            angular_velocity: Vector3::zeros(),
            orientation: UnitQuaternion::identity(),
            radius,
            density,
            mass: T::zero(),
            inertia: T::zero(),
            force: Vector3::zeros(),
            torque: Vector3::zeros(),
            drag: Vector3::zeros(),
        };
        p.update_mass();
        Ok(p)
    }

    fn update_mass(&mut self) {
        let r = self.radius;
        self.mass = self.density * T::lit(4.0 / 3.0) * T::pi() * r * r * r;
        self.inertia = T::lit(0.4) * self.mass * r * r;
    }

    pub fn volume(&self) -> T {
        let r = self.radius;
        T::lit(4.0 / 3.0) * T::pi() * r * r * r
    }

    /// Projected area `π r²`.
    pub fn area(&self) -> T {
        T::pi() * self.radius * self.radius
    }

    pub fn diameter(&self) -> T {
        self.radius + self.radius
    }

    pub fn kinetic_energy(&self) -> T {
        T::half() * (self.mass * self.velocity.norm_squared() + self.inertia * self.angular_velocity.norm_squared())
    }

    /// Acceleration implied by the last force evaluation and `gravity`.
    pub fn acceleration(&self, gravity: &Vector3<T>) -> Vector3<T> {
        self.force / self.mass + gravity
    }

    /// Encoded size in bytes.
    pub fn wire_size() -> usize {
        8 + 24 * T::BYTES
    }

    pub fn encode(&self, w: &mut Writer) {
        w.u64(self.id);
        for v in [&self.position, &self.velocity, &self.angular_velocity] {
            for &c in v.iter() {
                w.real(c);
            }
        }
        for &c in self.orientation.as_ref().coords.iter() {
            w.real(c);
        }
        w.real(self.radius).real(self.density);
        for v in [&self.force, &self.torque, &self.drag] {
            for &c in v.iter() {
                w.real(c);
            }
        }
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let id = r.u64()?;
        let vec3 = |r: &mut Reader<'_>| -> Result<Vector3<T>> { Ok(Vector3::new(r.real()?, r.real()?, r.real()?)) };
        let position = vec3(r)?;
        let velocity = vec3(r)?;
        let angular_velocity = vec3(r)?;
        let q = Vector4::new(r.real()?, r.real()?, r.real()?, r.real()?);
        let radius = r.real()?;
        let density = r.real()?;
        let force = vec3(r)?;
        let torque = vec3(r)?;
        let drag = vec3(r)?;
        let mut p = Self {
            id,
            position,
            velocity,
            angular_velocity,
            orientation: UnitQuaternion::new_unchecked(Quaternion::from(q)),
            radius,
            density,
            mass: T::zero(),
            inertia: T::zero(),
            force,
            torque,
            drag,
        };
        p.update_mass();
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mass_and_inertia_of_a_sphere() {
        let p = Particle::new(1, Vector3::zeros(), Vector3::zeros(), 0.01, 2500.0).unwrap();
        let m = 2500.0 * 4.0 / 3.0 * std::f64::consts::PI * 1e-6;
        assert!((p.mass - m).abs() < 1e-18);
        assert!((p.inertia - 0.4 * m * 1e-4).abs() < 1e-22);
    }

    #[test]
    fn wire_roundtrip_is_exact() {
        let mut p = Particle::new(42, Vector3::new(0.1, 0.2, 0.3), Vector3::new(-1.0, 0.5, 1e-9), 0.00135, 2500.0).unwrap();
        p.angular_velocity = Vector3::new(3.0, -2.0, 1.0);
        p.orientation = UnitQuaternion::from_euler_angles(0.1, 0.2, 0.3);
        p.force = Vector3::new(1e-3, 2e-3, -3e-3);
        let mut w = Writer::new();
        p.encode(&mut w);
        let buf = w.finish();
        assert_eq!(buf.len(), Particle::<f64>::wire_size());
        let q = Particle::decode(&mut Reader::new(&buf)).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn rejects_bad_radius() {
        assert!(Particle::new(0, Vector3::zeros(), Vector3::zeros(), 0.0, 1.0).is_err());
    }
}
