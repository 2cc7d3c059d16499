//! Weighted atomic measures on the plane.
//!
//! One type serves the occupation-measure discretizations, the
//! self-intersection measures, and the transported measures of the flows.

use nalgebra::Vector2;

use crate::error::{Result, SiltError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Atom {
    pub pos: Vector2<f64>,
    pub weight: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmpiricalMeasure {
    pub atoms: Vec<Atom>,
}

impl EmpiricalMeasure {
    pub fn new(atoms: Vec<Atom>) -> Result<Self> {
        for (i, a) in atoms.iter().enumerate() {
            if !a.pos.x.is_finite() || !a.pos.y.is_finite() {
                return Err(SiltError::input(format!("atom {i} has non-finite coordinates")));
            }
            if !(a.weight >= 0.0) {
                return Err(SiltError::input(format!(
                    "atom {i} has negative or NaN weight {}",
                    a.weight
                )));
            }
        }
        let m = EmpiricalMeasure { atoms };
        if !m.total_mass().is_finite() {
            return Err(SiltError::input("total mass not finite"));
        }
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.weight).sum()
    }

    /// Weighted mass center; zero for the empty or massless measure.
    pub fn mass_center(&self) -> Vector2<f64> {
        let mass = self.total_mass();
        if mass <= 0.0 {
            return Vector2::zeros();
        }
        let mut c = Vector2::zeros();
        for a in &self.atoms {
            c += a.weight * a.pos;
        }
        c / mass
    }

    /// Axis-aligned bounding box of the atom positions.
    pub fn bounding_box(&self) -> Option<(Vector2<f64>, Vector2<f64>)> {
        if self.atoms.is_empty() {
            return None;
        }
        let mut lo = self.atoms[0].pos;
        let mut hi = self.atoms[0].pos;
        for a in &self.atoms {
            lo.x = lo.x.min(a.pos.x);
            lo.y = lo.y.min(a.pos.y);
            hi.x = hi.x.max(a.pos.x);
            hi.y = hi.y.max(a.pos.y);
        }
        Some((lo, hi))
    }

    /// CSV block `x,y,weight`, one atom per line.
    pub fn write_csv(&self, w: &mut impl std::io::Write) -> Result<()> {
        writeln!(w, "x,y,weight")?;
        for a in &self.atoms {
            writeln!(w, "{:.17e},{:.17e},{:.17e}", a.pos.x, a.pos.y, a.weight)?;
        }
        Ok(())
    }

    pub fn read_csv(r: impl std::io::BufRead) -> Result<Self> {
        let mut atoms = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || (lineno == 0 && line.starts_with('x')) {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 {
                return Err(SiltError::input(format!("line {}: expected x,y,weight", lineno + 1)));
            }
            let parse = |s: &str| -> Result<f64> {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| SiltError::input(format!("line {}: {e}", lineno + 1)))
            };
            atoms.push(Atom {
                pos: Vector2::new(parse(parts[0])?, parse(parts[1])?),
                weight: parse(parts[2])?,
            });
        }
        EmpiricalMeasure::new(atoms)
    }
}
