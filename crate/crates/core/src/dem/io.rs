use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::real::Real;

use super::particle::Particle;

/// Parses whitespace-separated particle records `id x y z ux uy uz r rho`.
/// Blank lines and lines starting with `#` are skipped.
pub fn parse_particles<T: Real>(text: &str) -> Result<Vec<Particle<T>>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 9 {
            return Err(Error::Parse {
                line: n + 1,
                message: format!("expected 9 fields (id x y z ux uy uz r rho), found {}", fields.len()),
            });
        }
        let id: u64 = fields[0].parse().map_err(|e| Error::Parse {
            line: n + 1,
            message: format!("bad id '{}': {e}", fields[0]),
        })?;
        let mut v = [0.0f64; 8];
        for (k, f) in fields[1..].iter().enumerate() {
            v[k] = f.parse().map_err(|e| Error::Parse {
                line: n + 1,
                message: format!("bad number '{f}': {e}"),
            })?;
        }
        let p = Particle::new(
            id,
            Vector3::new(T::lit(v[0]), T::lit(v[1]), T::lit(v[2])),
            Vector3::new(T::lit(v[3]), T::lit(v[4]), T::lit(v[5])),
            T::lit(v[6]),
            T::lit(v[7]),
        )
        .map_err(|e| Error::Parse {
            line: n + 1,
            message: e.to_string(),
        })?;
        out.push(p);
    }
    Ok(out)
}

/// Writes particles in the format read by [`parse_particles`].
pub fn format_particles<T: Real>(particles: &[Particle<T>]) -> String {
    let mut s = String::from("# id x y z ux uy uz r rho\n");
    for p in particles {
        s.push_str(&format!(
            "{} {:e} {:e} {:e} {:e} {:e} {:e} {:e} {:e}\n",
            p.id,
            p.position.x.as_f64(),
            p.position.y.as_f64(),
            p.position.z.as_f64(),
            p.velocity.x.as_f64(),
            p.velocity.y.as_f64(),
            p.velocity.z.as_f64(),
            p.radius.as_f64(),
            p.density.as_f64()
        ));
    }
    s
}
