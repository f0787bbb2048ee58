//! Fine-grid two-phase flow in a porous medium.
//!
//! Volume-averaged incompressible momentum and continuity with a porosity field
//! and a particle momentum source, solved by an explicit first-order predictor
//! and one pressure projection per step on a collocated grid with face fluxes.
//! The phase indicator is advected with upwind fluxes plus an interface
//! compression term.

mod solver;

use std::str::FromStr;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::real::Real;

pub use solver::{CfdReport, FluidState, ProjectionReport};

/// Properties of the two fluid phases. Phase 1 is where `alpha = 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FluidProps<T: Real> {
    pub rho1: T,
    pub rho2: T,
    pub mu1: T,
    pub mu2: T,
    /// Surface tension coefficient. Carried for completeness; no surface tension force is applied.
    pub surface_tension: T,
}

impl<T: Real> FluidProps<T> {
    pub fn new(rho1: T, rho2: T, mu1: T, mu2: T) -> Result<Self> {
        if [rho1, rho2, mu1, mu2].iter().any(|v| !(*v > T::zero())) {
            return Err(Error::config("phase densities and viscosities must be positive"));
        }
        Ok(Self {
            rho1,
            rho2,
            mu1,
            mu2,
            surface_tension: T::zero(),
        })
    }

    /// A single phase: both entries equal.
    pub fn single(rho: T, mu: T) -> Result<Self> {
        Self::new(rho, rho, mu, mu)
    }

    /// Linear blend of density and viscosity at volume fraction `alpha`.
    #[inline]
    pub fn mixture(&self, alpha: T) -> (T, T) {
        let beta = T::one() - alpha;
        (self.rho1 * alpha + self.rho2 * beta, self.mu1 * alpha + self.mu2 * beta)
    }
}

/// Pointwise mixture density and viscosity.
pub fn mixture_properties<T: Real>(alpha: &[T], props: &FluidProps<T>) -> (Vec<T>, Vec<T>) {
    alpha.iter().map(|&a| props.mixture(a)).unzip()
}

/// Condition on one face of the domain box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Boundary<T: Real> {
    /// No-slip, impermeable.
    Wall,
    /// Free-slip, impermeable.
    Slip,
    /// Prescribed velocity and inflowing phase fraction.
    Inlet { velocity: Vector3<T>, alpha: T },
    /// Fixed pressure; velocity and phase fraction extrapolated.
    Outlet { pressure: T },
}

impl<T: Real> Boundary<T> {
    pub fn is_outlet(&self) -> bool {
        matches!(self, Boundary::Outlet { .. })
    }
}

/// Boundary conditions on the six faces, ordered x-, x+, y-, y+, z-, z+.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Boundaries<T: Real> {
    pub faces: [Boundary<T>; 6],
}

impl<T: Real> Boundaries<T> {
    pub fn closed() -> Self {
        Self {
            faces: [Boundary::Wall; 6],
        }
    }

    /// Whether the pressure level is fixed somewhere.
    pub fn has_outlet(&self) -> bool {
        self.faces.iter().any(Boundary::is_outlet)
    }

    pub fn face(&self, slot: usize) -> &Boundary<T> {
        &self.faces[slot]
    }
}

/// How the particle momentum source enters the predictor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DragCoupling {
    /// The `beta u_f` part is moved to the left-hand side of each cell.
    SemiImplicit,
    /// Evaluated with the old fluid velocity.
    Explicit,
}

impl FromStr for DragCoupling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "semi-implicit" => Ok(DragCoupling::SemiImplicit),
            "explicit" => Ok(DragCoupling::Explicit),
            other => Err(Error::config(format!("unknown drag coupling '{other}'"))),
        }
    }
}

/// Numerical settings of the fluid solver.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CfdSettings<T: Real> {
    pub gravity: Vector3<T>,
    /// Interface compression factor `c_alpha`.
    pub compression: T,
    pub cfl_limit: T,
    pub diffusion_limit: T,
    /// Relative residual at which the pressure iteration stops.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub drag: DragCoupling,
}

impl<T: Real> Default for CfdSettings<T> {
    fn default() -> Self {
        Self {
            gravity: Vector3::zeros(),
            compression: T::one(),
            cfl_limit: T::half(),
            diffusion_limit: T::half(),
            tolerance: 1e-8,
            max_iterations: 2000,
            drag: DragCoupling::SemiImplicit,
        }
    }
}
