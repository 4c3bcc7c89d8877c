//! Fixed-point intensity mass.
//!
//! Sums of intensities are kept as integers in units of 2^-48 so that adding and
//! removing pixels in any order yields the same total as a fresh summation.
//! An intensity in [0, 255] scaled by 2^48 stays below 2^56, so an `i128` holds
//! the sum of more than 2^70 pixels.

use std::ops::{Add, AddAssign, Sub, SubAssign};

const FRAC_BITS: i32 = 48;
const SCALE: f64 = (1u64 << FRAC_BITS) as f64;

/// An exact sum of intensities.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Mass(i128);

impl Mass {
    pub const ZERO: Mass = Mass(0);

    /// Quantizes one intensity. Values with more than 48 fractional bits are
    /// rounded half-to-even; every 8-bit or dyadic input is represented exactly.
    pub fn of(intensity: f64) -> Mass {
        Mass((intensity * SCALE).round_ties_even() as i128)
    }

    pub fn raw(self) -> i128 {
        self.0
    }

    pub fn to_f64(self) -> f64 {
        self.0 as f64 / SCALE
    }

    /// Mean over `count` pixels. Returns 0 for an empty set.
    pub fn mean(self, count: u64) -> f64 {
        if count == 0 {
            0.0
        } else {
            self.0 as f64 / SCALE / count as f64
        }
    }
}

impl Add for Mass {
    type Output = Mass;
    fn add(self, rhs: Mass) -> Mass {
        Mass(self.0 + rhs.0)
    }
}

impl AddAssign for Mass {
    fn add_assign(&mut self, rhs: Mass) {
        self.0 += rhs.0;
    }
}

impl Sub for Mass {
    type Output = Mass;
    fn sub(self, rhs: Mass) -> Mass {
        Mass(self.0 - rhs.0)
    }
}

impl SubAssign for Mass {
    fn sub_assign(&mut self, rhs: Mass) {
        self.0 -= rhs.0;
    }
}

impl std::iter::Sum for Mass {
    fn sum<I: Iterator<Item = Mass>>(iter: I) -> Mass {
        iter.fold(Mass::ZERO, |a, b| a + b)
    }
}
