//! Pair and three-body interaction potentials.

use crate::error::{Error, Result};

/// Lennard-Jones pair potential shifted so that its unique minimum sits at
/// `rest_length` with value `-scale`:
///
/// `W(r) = scale * ((rho / r)^12 - 2 (rho / r)^6)`, `rho = rest_length`.
///
/// With `rho = eps` and `scale = 1` this is `4((eps / (2^(1/6) r))^12 -
/// (eps / (2^(1/6) r))^6)`; next-nearest pairs use `rho = sqrt(3) eps` and
/// `scale = eta`, i.e. `eta * W(r / sqrt(3))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairPotential {
    rest_length: f64,
    scale: f64,
}

impl PairPotential {
    pub fn lennard_jones(rest_length: f64, scale: f64) -> Result<Self> {
        if !(rest_length > 0.0 && rest_length.is_finite()) {
            return Err(Error::config(format!("rest length must be positive, got {rest_length}")));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::config(format!("potential scale must be positive, got {scale}")));
        }
        Ok(PairPotential { rest_length, scale })
    }

    /// Nearest-neighbour potential for lattice spacing `eps`.
    pub fn nearest(eps: f64) -> Result<Self> {
        Self::lennard_jones(eps, 1.0)
    }

    /// Next-nearest-neighbour potential `eta * W(r / sqrt(3))`.
    pub fn next_nearest(eps: f64, eta: f64) -> Result<Self> {
        Self::lennard_jones(3f64.sqrt() * eps, eta)
    }

    pub fn rest_length(&self) -> f64 {
        self.rest_length
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Unchecked value, `r > 0` assumed.
    /// (rest/r)^6, with separations within a few ulp of the rest length
    /// snapped onto it so that reference lattices are exactly stress free.
    #[inline]
    fn s6(&self, r: f64) -> f64 {
        let q = self.rest_length / r;
        if (q - 1.0).abs() <= 4.0 * f64::EPSILON {
            1.0
        } else {
            q.powi(6)
        }
    }

    #[inline]
    pub(crate) fn w(&self, r: f64) -> f64 {
        let s6 = self.s6(r);
        self.scale * (s6 * s6 - 2.0 * s6)
    }

    #[inline]
    pub(crate) fn dw(&self, r: f64) -> f64 {
        let s6 = self.s6(r);
        12.0 * self.scale * (s6 - s6 * s6) / r
    }

    #[inline]
    pub(crate) fn d2w(&self, r: f64) -> f64 {
        let s6 = self.s6(r);
        self.scale * (156.0 * s6 * s6 - 84.0 * s6) / (r * r)
    }

    pub fn value(&self, r: f64) -> Result<f64> {
        check_separation(r)?;
        Ok(self.w(r))
    }

    pub fn derivative(&self, r: f64) -> Result<f64> {
        check_separation(r)?;
        Ok(self.dw(r))
    }

    pub fn second_derivative(&self, r: f64) -> Result<f64> {
        check_separation(r)?;
        Ok(self.d2w(r))
    }
}

fn check_separation(r: f64) -> Result<()> {
    if r > 0.0 && r.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(format!("pair separation must be positive and finite, got {r}")))
    }
}

pub fn pair_value(p: &PairPotential, r: f64) -> Result<f64> {
    p.value(r)
}

pub fn pair_derivative(p: &PairPotential, r: f64) -> Result<f64> {
    p.derivative(r)
}

/// Where a triple potential takes its minimum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RestAngle {
    /// Each triple is at rest at its reference angle.
    Reference,
    Fixed(f64),
}

/// `stiffness * (cos(theta) - cos(rest))^2`, continuous on `[0, pi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriplePotential {
    pub stiffness: f64,
    pub rest_angle: RestAngle,
}

impl TriplePotential {
    pub fn new(stiffness: f64, rest_angle: RestAngle) -> Result<Self> {
        if !(stiffness >= 0.0 && stiffness.is_finite()) {
            return Err(Error::config(format!("triple stiffness must be >= 0, got {stiffness}")));
        }
        if let RestAngle::Fixed(a) = rest_angle {
            if !(0.0..=std::f64::consts::PI).contains(&a) {
                return Err(Error::config(format!("rest angle {a} outside [0, pi]")));
            }
        }
        Ok(TriplePotential { stiffness, rest_angle })
    }

    pub(crate) fn rest_cos(&self, reference_angle: f64) -> f64 {
        match self.rest_angle {
            RestAngle::Reference => reference_angle.cos(),
            RestAngle::Fixed(a) => a.cos(),
        }
    }

    /// Value as a function of `cos(theta)`.
    #[inline]
    pub(crate) fn of_cos(&self, cos: f64, rest_cos: f64) -> f64 {
        self.stiffness * (cos - rest_cos).powi(2)
    }

    /// Derivative with respect to `cos(theta)`.
    #[inline]
    pub(crate) fn d_of_cos(&self, cos: f64, rest_cos: f64) -> f64 {
        2.0 * self.stiffness * (cos - rest_cos)
    }
}

/// Triple potential at angle `theta`; `reference_angle` is used only when the
/// rest angle follows the reference configuration.
pub fn triple_value(t: &TriplePotential, theta: f64, reference_angle: f64) -> Result<f64> {
    if !(0.0..=std::f64::consts::PI).contains(&theta) {
        return Err(Error::domain(format!("angle {theta} outside [0, pi]")));
    }
    Ok(t.of_cos(theta.cos(), t.rest_cos(reference_angle)))
}
