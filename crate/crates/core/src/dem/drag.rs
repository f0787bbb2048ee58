use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::real::Real;

use super::particle::Particle;

/// Fluid-particle momentum exchange coefficient model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DragModel<T: Real> {
    /// Fixed coefficient [kg/s], independent of the flow.
    Constant { beta: T },
    /// Single-sphere drag with a Di Felice voidage correction.
    DiFelice,
}

/// Fluid state sampled at a particle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FluidSample<T: Real> {
    pub velocity: Vector3<T>,
    /// Fluid volume fraction.
    pub porosity: T,
    pub density: T,
    pub viscosity: T,
}

impl<T: Real> DragModel<T> {
    /// Momentum exchange coefficient `β` so that the drag on the particle is `β (u_f - u_p)`.
    pub fn beta(&self, p: &Particle<T>, fluid: &FluidSample<T>) -> Result<T> {
        if !(fluid.porosity > T::zero()) {
            return Err(Error::Physics(format!(
                "porosity {} at particle {} leaves no room for fluid",
                fluid.porosity, p.id
            )));
        }
        match *self {
            DragModel::Constant { beta } => Ok(beta),
            DragModel::DiFelice => {
                let eps = fluid.porosity;
                let d = p.diameter();
                let slip = (fluid.velocity - p.velocity).norm();
                let re = eps * fluid.density * d * slip / fluid.viscosity;
                let chi = if re > T::zero() {
                    let t = T::lit(1.5) - re.log10();
                    T::lit(3.7) - T::lit(0.65) * (-(t * t) * T::half()).exp()
                } else {
                    T::lit(3.7)
                };
                // C_d |s| = (0.63 sqrt|s| + 4.8 sqrt(mu / (eps rho d)))^2, finite at zero slip
                let root = T::lit(0.63) * slip.sqrt() + T::lit(4.8) * (fluid.viscosity / (eps * fluid.density * d)).sqrt();
                Ok(T::half() * fluid.density * p.area() * root * root * eps.powf(T::lit(2.0) - chi))
            }
        }
    }

    pub fn force(&self, p: &Particle<T>, fluid: &FluidSample<T>) -> Result<Vector3<T>> {
        let beta = self.beta(p, fluid)?;
        Ok((fluid.velocity - p.velocity) * beta)
    }
}

/// Drag on `p` from a fluid of velocity `u_f`, porosity `eps`, density and viscosity.
pub fn drag_force<T: Real>(
    model: &DragModel<T>,
    p: &Particle<T>,
    u_f: Vector3<T>,
    eps: T,
    density: T,
    viscosity: T,
) -> Result<Vector3<T>> {
    model.force(
        p,
        &FluidSample {
            velocity: u_f,
            porosity: eps,
            density,
            viscosity,
        },
    )
}
