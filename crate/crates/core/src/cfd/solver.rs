use std::sync::Arc;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::mesh::{halo_exchange, halo_exchange_all, other_axes, stencil_slot, GridField, LocalLayout, NONE};
use crate::real::Real;
use crate::sum::ExactSum;
use crate::transport::RankContext;

use super::{Boundaries, Boundary, CfdSettings, DragCoupling, FluidProps};

/// Outcome of one pressure solve.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProjectionReport {
    pub iterations: usize,
    /// Final residual relative to the right-hand side norm.
    pub residual: f64,
    /// Largest `|div(eps u) + d eps/dt|` over all cells after the correction [1/s].
    pub max_divergence: f64,
}

/// Diagnostics of one fluid step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CfdReport {
    pub cfl: f64,
    pub diffusion_number: f64,
    pub projection: ProjectionReport,
    /// Total `eps alpha V` before the step.
    pub alpha_mass_before: f64,
    /// Total `eps alpha V` after advection, before clipping.
    pub alpha_mass_after: f64,
    /// Total `eps |delta alpha| V` removed or added by clipping to [0, 1].
    pub clipped_mass: f64,
}

/// Fluid fields on the owned and halo cells of one rank, plus the face fluxes of
/// the owned cells.
///
/// Face slots are ordered x-, x+, y-, y+, z-, z+. Fluxes are outward volume
/// fluxes per unit area, `eps u . n`. A face shared by two ranks is evaluated by
/// both from the same inputs in the same order, so the two copies agree bitwise.
#[derive(Clone, Debug)]
pub struct FluidState<T: Real> {
    layout: Arc<LocalLayout<T>>,
    props: FluidProps<T>,
    bcs: Boundaries<T>,
    settings: CfdSettings<T>,
    pub u: GridField<T>,
    pub p: GridField<T>,
    pub alpha: GridField<T>,
    pub eps: GridField<T>,
    eps_next: GridField<T>,
    pub rho: GridField<T>,
    pub mu: GridField<T>,
    /// Momentum exchange coefficient per unit volume [kg/(m^3 s)].
    pub beta: GridField<T>,
    /// `beta`-weighted particle velocity per unit volume [N/m^3].
    pub beta_up: GridField<T>,
    /// Particle force density applied to the fluid in the last step [N/m^3].
    pub f_fpi: GridField<T>,
    u_star: GridField<T>,
    dir: GridField<T>,
    flux: Vec<[T; 6]>,
    nbr: Vec<[u32; 6]>,
    time: T,
}

#[inline]
fn face_axis(slot: usize) -> (usize, bool) {
    (slot / 2, slot % 2 == 1)
}

impl<T: Real> FluidState<T> {
    /// Quiescent phase-1 fluid with unit porosity.
    pub fn new(layout: &Arc<LocalLayout<T>>, props: FluidProps<T>, bcs: Boundaries<T>, settings: CfdSettings<T>) -> Self {
        let n_owned = layout.n_owned();
        let nbr = (0..n_owned)
            .map(|c| {
                let st = layout.stencil(c);
                let mut out = [NONE; 6];
                for (slot, o) in out.iter_mut().enumerate() {
                    let (a, upper) = face_axis(slot);
                    let mut d = [0i64; 3];
                    d[a] = if upper { 1 } else { -1 };
                    *o = st[stencil_slot(d)];
                }
                out
            })
            .collect();
        let (rho1, mu1) = props.mixture(T::one());
        Self {
            layout: layout.clone(),
            props,
            bcs,
            settings,
            u: GridField::zeros(layout, 3),
            p: GridField::zeros(layout, 1),
            alpha: GridField::filled(layout, 1, T::one()),
            eps: GridField::filled(layout, 1, T::one()),
            eps_next: GridField::filled(layout, 1, T::one()),
            rho: GridField::filled(layout, 1, rho1),
            mu: GridField::filled(layout, 1, mu1),
            beta: GridField::zeros(layout, 1),
            beta_up: GridField::zeros(layout, 3),
            f_fpi: GridField::zeros(layout, 3),
            u_star: GridField::zeros(layout, 3),
            dir: GridField::zeros(layout, 1),
            flux: vec![[T::zero(); 6]; n_owned],
            nbr,
            time: T::zero(),
        }
    }

    pub fn layout(&self) -> &Arc<LocalLayout<T>> {
        &self.layout
    }

    pub fn props(&self) -> &FluidProps<T> {
        &self.props
    }

    pub fn boundaries(&self) -> &Boundaries<T> {
        &self.bcs
    }

    pub fn settings(&self) -> &CfdSettings<T> {
        &self.settings
    }

    pub fn settings_mut(&mut self) -> &mut CfdSettings<T> {
        &mut self.settings
    }

    pub fn time(&self) -> T {
        self.time
    }

    /// Outward flux of owned cell `c` through face `slot`.
    pub fn face_flux(&self, c: usize, slot: usize) -> T {
        self.flux[c][slot]
    }

    /// Sets the phase fraction from a function of the cell centre (owned and halo cells).
    pub fn set_alpha(&mut self, f: impl Fn(&Vector3<T>) -> T) {
        let grid = self.layout.grid().clone();
        for l in 0..self.layout.n_local() {
            let a = f(&grid.cell_center(self.layout.global_id(l)));
            self.alpha.set(l, 0, a);
        }
    }

    pub fn set_velocity(&mut self, f: impl Fn(&Vector3<T>) -> Vector3<T>) {
        let grid = self.layout.grid().clone();
        for l in 0..self.layout.n_local() {
            let v = f(&grid.cell_center(self.layout.global_id(l)));
            self.u.set_vector(l, &v);
        }
    }

    /// Porosity the next step moves towards; the change drives the continuity source.
    pub fn set_porosity_target(&mut self, eps: &GridField<T>) -> Result<()> {
        if !Arc::ptr_eq(eps.layout(), &self.layout) || eps.components() != 1 {
            return Err(Error::Consistency("porosity target has the wrong layout".into()));
        }
        if let Some(bad) = eps.owned_values().iter().find(|&&e| !(e > T::zero() && e <= T::one())) {
            return Err(Error::Physics(format!("porosity {bad} outside (0, 1]")));
        }
        self.eps_next.values_mut().copy_from_slice(eps.values());
        Ok(())
    }

    /// Sets the current porosity without a continuity source (initial state).
    pub fn reset_porosity(&mut self, eps: &GridField<T>) -> Result<()> {
        self.set_porosity_target(eps)?;
        self.eps.values_mut().copy_from_slice(eps.values());
        Ok(())
    }

    pub fn porosity_target(&self) -> &GridField<T> {
        &self.eps_next
    }

    /// Particle momentum source: `beta` per unit volume and `beta u_p` per unit volume.
    pub fn set_sources(&mut self, beta: &GridField<T>, beta_up: &GridField<T>) -> Result<()> {
        if !Arc::ptr_eq(beta.layout(), &self.layout) || !Arc::ptr_eq(beta_up.layout(), &self.layout) {
            return Err(Error::Consistency("momentum source has the wrong layout".into()));
        }
        self.beta.values_mut().copy_from_slice(beta.values());
        self.beta_up.values_mut().copy_from_slice(beta_up.values());
        Ok(())
    }

    /// Refreshes halos and derived fields and computes face fluxes from the current
    /// velocity. Call once before the first step.
    pub fn init(&mut self, ctx: &RankContext<'_>) -> Result<()> {
        self.exchange_state(ctx)?;
        self.flux = self.raw_fluxes(&self.u, &self.eps);
        Ok(())
    }

    fn exchange_state(&mut self, ctx: &RankContext<'_>) -> Result<()> {
        halo_exchange_all(&mut [&mut self.u, &mut self.alpha, &mut self.eps, &mut self.eps_next, &mut self.p], ctx)?;
        self.update_mixture(self.layout.n_local());
        Ok(())
    }

    fn update_mixture(&mut self, n: usize) {
        for l in 0..n {
            let (r, m) = self.props.mixture(self.alpha.get(l, 0));
            self.rho.set(l, 0, r);
            self.mu.set(l, 0, m);
        }
    }

    /// Face fluxes `eps u . n` before any pressure correction.
    fn raw_fluxes(&self, u: &GridField<T>, eps: &GridField<T>) -> Vec<[T; 6]> {
        let quarter = T::lit(0.25);
        (0..self.layout.n_owned())
            .map(|c| {
                let mut out = [T::zero(); 6];
                for (slot, o) in out.iter_mut().enumerate() {
                    let (a, upper) = face_axis(slot);
                    let sg = if upper { T::one() } else { -T::one() };
                    let nb = self.nbr[c][slot];
                    *o = if nb != NONE {
                        let (l, r) = if upper { (c, nb as usize) } else { (nb as usize, c) };
                        let f = (eps.get(l, 0) + eps.get(r, 0)) * (u.get(l, a) + u.get(r, a)) * quarter;
                        sg * f
                    } else {
                        match self.bcs.face(slot) {
                            Boundary::Wall | Boundary::Slip => T::zero(),
                            Boundary::Inlet { velocity, .. } => sg * eps.get(c, 0) * velocity[a],
                            Boundary::Outlet { .. } => sg * eps.get(c, 0) * u.get(c, a),
                        }
                    };
                }
                out
            })
            .collect()
    }

    /// Global CFL and diffusion numbers for step `dt`; errors if either exceeds its limit.
    pub fn check_limits(&self, dt: T, ctx: &RankContext<'_>) -> Result<(f64, f64)> {
        if !(dt > T::zero()) {
            return Err(Error::config("fluid time step must be positive"));
        }
        let mut umax = 0.0f64;
        let mut numax = 0.0f64;
        for c in 0..self.layout.n_owned() {
            umax = umax.max(self.u.vector(c).norm().as_f64());
            numax = numax.max((self.mu.get(c, 0) / self.rho.get(c, 0)).as_f64());
        }
        for b in &self.bcs.faces {
            if let Boundary::Inlet { velocity, .. } = b {
                umax = umax.max(velocity.norm().as_f64());
            }
        }
        let m = ctx.allreduce_max(&[umax, numax])?;
        let grid = self.layout.grid();
        let h = grid.spacing();
        let dt64 = dt.as_f64();
        let cfl = m[0] * dt64 / grid.min_spacing().as_f64();
        let inv_h2: f64 = (0..3).map(|a| 1.0 / (h[a].as_f64() * h[a].as_f64())).sum();
        let dnum = m[1] * dt64 * inv_h2;
        if !(cfl <= self.settings.cfl_limit.as_f64()) {
            return Err(Error::Cfl {
                cfl,
                limit: self.settings.cfl_limit.as_f64(),
            });
        }
        if !(dnum <= self.settings.diffusion_limit.as_f64()) {
            return Err(Error::DiffusionNumber {
                number: dnum,
                limit: self.settings.diffusion_limit.as_f64(),
            });
        }
        Ok((cfl, dnum))
    }

    /// Explicit predictor of the cell velocities; pressure is left to the projection.
    pub fn momentum_step(&mut self, dt: T, ctx: &RankContext<'_>) -> Result<()> {
        let grid = self.layout.grid();
        let h = grid.spacing();
        let vol = grid.cell_volume();
        let area = [0, 1, 2].map(|a| grid.face_area(a));
        let g = self.settings.gravity;
        for c in 0..self.layout.n_owned() {
            let uc = self.u.vector(c);
            let e = self.eps.get(c, 0);
            let r = self.rho.get(c, 0);
            let emu_c = e * self.mu.get(c, 0);
            let mut conv = Vector3::zeros();
            let mut diff = Vector3::zeros();
            for slot in 0..6 {
                let (a, _) = face_axis(slot);
                let phi = self.flux[c][slot];
                let nb = self.nbr[c][slot];
                let (u_b, emu_f, d, u_in) = if nb != NONE {
                    let nb = nb as usize;
                    let un = self.u.vector(nb);
                    let emu_n = self.eps.get(nb, 0) * self.mu.get(nb, 0);
                    (un, (emu_c + emu_n) * T::half(), h[a], un)
                } else {
                    let d = h[a] * T::half();
                    match self.bcs.face(slot) {
                        Boundary::Wall => (Vector3::zeros(), emu_c, d, uc),
                        Boundary::Slip => {
                            let mut ub = uc;
                            ub[a] = T::zero();
                            (ub, emu_c, d, uc)
                        }
                        Boundary::Inlet { velocity, .. } => (*velocity, emu_c, d, *velocity),
                        Boundary::Outlet { .. } => (uc, emu_c, d, uc),
                    }
                };
                diff += (u_b - uc) * (area[a] * emu_f / d);
                if phi < T::zero() {
                    conv += (u_in - uc) * (area[a] * phi);
                }
            }
            let s = self.beta_up.vector(c);
            let b = self.beta.get(c, 0);
            let er = e * r;
            let explicit = uc * er + (conv * (-r / vol) + diff / vol + g * er) * dt;
            let (u_new, f) = match self.settings.drag {
                DragCoupling::SemiImplicit => {
                    let u_new = (explicit + s * dt) / (er + dt * b);
                    (u_new, s - u_new * b)
                }
                DragCoupling::Explicit => {
                    let f = s - uc * b;
                    ((explicit + f * dt) / er, f)
                }
            };
            self.u_star.set_vector(c, &u_new);
            self.f_fpi.set_vector(c, &f);
        }
        halo_exchange(&mut self.u_star, ctx)
    }

    /// Solves for the pressure that makes the face fluxes satisfy continuity, then
    /// corrects fluxes and cell velocities.
    pub fn pressure_projection(&mut self, dt: T, ctx: &RankContext<'_>) -> Result<ProjectionReport> {
        let grid = self.layout.grid().clone();
        let h = grid.spacing();
        let vol = grid.cell_volume();
        let area = [0, 1, 2].map(|a| grid.face_area(a));
        let n_owned = self.layout.n_owned();
        let n_local = self.layout.n_local();
        let k: Vec<T> = (0..n_local).map(|l| self.eps_next.get(l, 0) / self.rho.get(l, 0)).collect();
        let flux_star = self.raw_fluxes(&self.u_star, &self.eps_next);
        let two = T::lit(2.0);
        let mut w = vec![[T::zero(); 6]; n_owned];
        let mut diag = vec![T::zero(); n_owned];
        let mut rhs = vec![T::zero(); n_owned];
        for c in 0..n_owned {
            let deps = (self.eps_next.get(c, 0) - self.eps.get(c, 0)) / dt;
            let mut out = T::zero();
            let mut boundary = T::zero();
            for slot in 0..6 {
                let (a, _) = face_axis(slot);
                out += area[a] * flux_star[c][slot];
                let nb = self.nbr[c][slot];
                let ws = if nb != NONE {
                    let (kl, kr) = (k[c], k[nb as usize]);
                    let kf = two * kl * kr / (kl + kr);
                    dt * kf * area[a] / h[a]
                } else if let Boundary::Outlet { pressure } = self.bcs.face(slot) {
                    let ws = dt * k[c] * area[a] / (h[a] * T::half());
                    boundary += ws * *pressure;
                    ws
                } else {
                    T::zero()
                };
                w[c][slot] = ws;
                diag[c] += ws;
            }
            rhs[c] = boundary - (out + vol * deps);
        }
        let singular = !self.bcs.has_outlet();
        let (iterations, residual) = self.solve_pressure(&w, &diag, rhs, singular, ctx)?;
        halo_exchange(&mut self.p, ctx)?;

        // Cell velocities take the average face velocity correction along each axis,
        // so that cells next to a density jump see the face-weighted pressure force.
        let mut max_div = 0.0f64;
        for c in 0..n_owned {
            let pc = self.p.get(c, 0);
            let mut dv = Vector3::zeros();
            let mut count = [0u8; 3];
            let mut div = T::zero();
            for slot in 0..6 {
                let (a, upper) = face_axis(slot);
                let nb = self.nbr[c][slot];
                let mut phi = flux_star[c][slot];
                if nb != NONE {
                    let nb = nb as usize;
                    let pn = self.p.get(nb, 0);
                    let (pl, pr) = if upper { (pc, pn) } else { (pn, pc) };
                    let corr = w[c][slot] / area[a] * (pr - pl);
                    phi = if upper { phi - corr } else { phi + corr };
                    let ef = (self.eps_next.get(c, 0) + self.eps_next.get(nb, 0)) * T::half();
                    dv[a] += corr / ef;
                    count[a] += 1;
                } else if let Boundary::Outlet { pressure } = self.bcs.face(slot) {
                    let corr = w[c][slot] / area[a] * (*pressure - pc);
                    phi -= corr;
                    let corr_lr = if upper { corr } else { -corr };
                    dv[a] += corr_lr / self.eps_next.get(c, 0);
                    count[a] += 1;
                }
                self.flux[c][slot] = phi;
                div += area[a] * phi;
            }
            for a in 0..3 {
                if count[a] == 2 {
                    dv[a] *= T::half();
                }
            }
            let u = self.u_star.vector(c) - dv;
            self.u.set_vector(c, &u);
            let deps = (self.eps_next.get(c, 0) - self.eps.get(c, 0)) / dt;
            max_div = max_div.max((div / vol + deps).abs().as_f64());
        }
        let max_divergence = ctx.allreduce_max(&[max_div])?[0];
        Ok(ProjectionReport {
            iterations,
            residual,
            max_divergence,
        })
    }

    /// `out = L x` for the pressure operator; `x` must have valid halos.
    fn apply(&self, w: &[[T; 6]], diag: &[T], x: &GridField<T>, out: &mut [T]) {
        for (c, o) in out.iter_mut().enumerate() {
            let mut acc = diag[c] * x.get(c, 0);
            for slot in 0..6 {
                let nb = self.nbr[c][slot];
                if nb != NONE {
                    acc -= w[c][slot] * x.get(nb as usize, 0);
                }
            }
            *o = acc;
        }
    }

    /// Jacobi-preconditioned conjugate gradients on the owned pressure values.
    /// All inner products are exact global sums, so the iteration is identical on
    /// every rank count.
    fn solve_pressure(&mut self, w: &[[T; 6]], diag: &[T], mut b: Vec<T>, singular: bool, ctx: &RankContext<'_>) -> Result<(usize, f64)> {
        let n = b.len();
        let n_global = self.layout.grid().cell_count() as f64;
        let dot = |x: &[T], y: &[T]| -> ExactSum { x.iter().zip(y).map(|(a, b)| (*a * *b).as_f64()).collect() };
        if singular {
            let mean = ctx.allreduce_exact(&[b.iter().map(|v| v.as_f64()).collect()])?[0] / n_global;
            let m = T::lit(mean);
            b.iter_mut().for_each(|v| *v -= m);
        }
        let bnorm = ctx.allreduce_exact(&[dot(&b, &b)])?[0].sqrt();
        if bnorm == 0.0 {
            self.p.fill(T::zero());
            return Ok((0, 0.0));
        }
        let inv_diag: Vec<T> = diag.iter().map(|&d| if d > T::zero() { T::one() / d } else { T::one() }).collect();
        // initial guess: previous pressure
        let mut x: Vec<T> = (0..n).map(|c| self.p.get(c, 0)).collect();
        let mut r = vec![T::zero(); n];
        let mut q = vec![T::zero(); n];
        self.dir.values_mut()[..n].copy_from_slice(&x);
        halo_exchange(&mut self.dir, ctx)?;
        self.apply(w, diag, &self.dir, &mut q);
        for c in 0..n {
            r[c] = b[c] - q[c];
        }
        let mut z: Vec<T> = r.iter().zip(&inv_diag).map(|(a, b)| *a * *b).collect();
        let s = ctx.allreduce_exact(&[dot(&r, &r), dot(&r, &z)])?;
        let mut rel = s[0].sqrt() / bnorm;
        let mut rz = s[1];
        let mut history = vec![rel];
        let mut d = z.clone();
        let mut iterations = 0;
        let tol = self.settings.tolerance;
        while rel > tol {
            if iterations == self.settings.max_iterations {
                return Err(Error::NonConvergence {
                    iterations,
                    last: rel,
                    history,
                });
            }
            iterations += 1;
            self.dir.values_mut()[..n].copy_from_slice(&d);
            halo_exchange(&mut self.dir, ctx)?;
            self.apply(w, diag, &self.dir, &mut q);
            let dq = ctx.allreduce_exact(&[dot(&d, &q)])?[0];
            if !(dq > 0.0) {
                return Err(Error::NonConvergence {
                    iterations,
                    last: rel,
                    history,
                });
            }
            let step = T::lit(rz / dq);
            for c in 0..n {
                x[c] += step * d[c];
                r[c] -= step * q[c];
                z[c] = r[c] * inv_diag[c];
            }
            let s = ctx.allreduce_exact(&[dot(&r, &r), dot(&r, &z)])?;
            rel = s[0].sqrt() / bnorm;
            history.push(rel);
            let beta = T::lit(s[1] / rz);
            rz = s[1];
            for c in 0..n {
                d[c] = z[c] + beta * d[c];
            }
        }
        if singular {
            let mean = ctx.allreduce_exact(&[x.iter().map(|v| v.as_f64()).collect()])?[0] / n_global;
            let m = T::lit(mean);
            x.iter_mut().for_each(|v| *v -= m);
        }
        self.p.values_mut()[..n].copy_from_slice(&x);
        Ok((iterations, rel))
    }

    /// Phase fraction on both sides of a face and its gradient, evaluated from the
    /// lower cell `l` of the face along `axis`. Offsets are relative to owned cell `c`.
    fn face_gradient(&self, c: usize, slot: usize) -> Vector3<T> {
        let (a, upper) = face_axis(slot);
        let st = self.layout.stencil(c);
        let h = self.layout.grid().spacing();
        let base = if upper { 0 } else { -1 };
        let at = |side: i64, t: usize, dt: i64| -> Option<T> {
            let mut d = [0i64; 3];
            d[a] = base + side;
            d[t] += dt;
            let l = st[stencil_slot(d)];
            (l != NONE).then(|| self.alpha.get(l as usize, 0))
        };
        let mut g = Vector3::zeros();
        let al = at(0, a, 0).expect("face cell");
        let ar = at(1, a, 0).expect("face cell");
        g[a] = (ar - al) / h[a];
        let (t1, t2) = other_axes(a);
        for t in [t1, t2] {
            let mut cd = T::zero();
            for side in 0..2 {
                let centre = if side == 0 { al } else { ar };
                cd += match (at(side, t, -1), at(side, t, 1)) {
                    (Some(m), Some(p)) => (p - m) / (h[t] + h[t]),
                    (None, Some(p)) => (p - centre) / h[t],
                    (Some(m), None) => (centre - m) / h[t],
                    (None, None) => T::zero(),
                };
            }
            g[t] = cd * T::half();
        }
        g
    }

    /// Explicit upwind transport of `eps alpha` with the current face fluxes and
    /// interface compression, moving porosity to its target. Returns
    /// (mass before, mass after before clipping, clipped mass), all global.
    pub fn advect_alpha(&mut self, dt: T, ctx: &RankContext<'_>) -> Result<(f64, f64, f64)> {
        let grid = self.layout.grid().clone();
        let vol = grid.cell_volume();
        let area = [0, 1, 2].map(|a| grid.face_area(a));
        let tiny = T::lit(1e-8) / grid.min_spacing();
        let calpha = self.settings.compression;
        let n_owned = self.layout.n_owned();
        let mut before = ExactSum::new();
        let mut after = ExactSum::new();
        let mut clipped = ExactSum::new();
        let mut new_alpha = vec![T::zero(); n_owned];
        for (c, slot_alpha) in new_alpha.iter_mut().enumerate() {
            let ac = self.alpha.get(c, 0);
            let mut total = T::zero();
            for slot in 0..6 {
                let (a, upper) = face_axis(slot);
                let phi = self.flux[c][slot];
                let nb = self.nbr[c][slot];
                let out = if nb != NONE {
                    let an = self.alpha.get(nb as usize, 0);
                    let (al, ar) = if upper { (ac, an) } else { (an, ac) };
                    let phi_lr = if upper { phi } else { -phi };
                    let mut f = phi_lr * if phi_lr >= T::zero() { al } else { ar };
                    if calpha > T::zero() {
                        let g = self.face_gradient(c, slot);
                        let gn = g.norm();
                        if gn > tiny {
                            let phic = calpha * phi_lr.abs() * g[a] / gn;
                            f += phic * if phic >= T::zero() { al * (T::one() - ar) } else { ar * (T::one() - al) };
                        }
                    }
                    if upper {
                        f
                    } else {
                        -f
                    }
                } else {
                    match self.bcs.face(slot) {
                        Boundary::Wall | Boundary::Slip => T::zero(),
                        Boundary::Inlet { alpha, .. } => phi * if phi < T::zero() { *alpha } else { ac },
                        Boundary::Outlet { .. } => phi * ac,
                    }
                };
                total += area[a] * out;
            }
            let e0 = self.eps.get(c, 0);
            let e1 = self.eps_next.get(c, 0);
            before.add((e0 * ac * vol).as_f64());
            let m = e0 * ac * vol - dt * total;
            let an = m / (e1 * vol);
            after.add((e1 * an * vol).as_f64());
            let clip = an.max(T::zero()).min(T::one());
            clipped.add((e1 * (clip - an).abs() * vol).as_f64());
            *slot_alpha = clip;
        }
        for (c, a) in new_alpha.into_iter().enumerate() {
            self.alpha.set(c, 0, a);
        }
        let s = ctx.allreduce_exact(&[before, after, clipped])?;
        Ok((s[0], s[1], s[2]))
    }

    /// One full fluid step: predictor, projection, phase transport. Porosity
    /// reaches the target set by [`set_porosity_target`](Self::set_porosity_target).
    pub fn step(&mut self, dt: T, ctx: &RankContext<'_>) -> Result<CfdReport> {
        self.exchange_state(ctx)?;
        let (cfl, diffusion_number) = self.check_limits(dt, ctx)?;
        self.momentum_step(dt, ctx)?;
        let projection = self.pressure_projection(dt, ctx)?;
        let (alpha_mass_before, alpha_mass_after, clipped_mass) = self.advect_alpha(dt, ctx)?;
        let next = self.eps_next.values().to_vec();
        self.eps.values_mut().copy_from_slice(&next);
        self.update_mixture(self.layout.n_owned());
        self.time += dt;
        Ok(CfdReport {
            cfl,
            diffusion_number,
            projection,
            alpha_mass_before,
            alpha_mass_after,
            clipped_mass,
        })
    }

    /// `max |div(eps u) + d eps/dt|` over owned cells for the stored fluxes, using the last porosity change.
    pub fn local_max_divergence(&self, deps_dt: impl Fn(usize) -> T) -> T {
        let grid = self.layout.grid();
        let vol = grid.cell_volume();
        let area = [0, 1, 2].map(|a| grid.face_area(a));
        (0..self.layout.n_owned())
            .map(|c| {
                let div: T = (0..6).map(|s| area[s / 2] * self.flux[c][s]).fold(T::zero(), |a, b| a + b);
                (div / vol + deps_dt(c)).abs()
            })
            .fold(T::zero(), |a, b| a.max(b))
    }
}
