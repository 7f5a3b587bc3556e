//! Points on the flat unit torus and the minimal-image convention.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

/// A point on the ν-torus, every coordinate normalized into `[0, 1)`.
///
/// The torus side is fixed at 1, so all lengths in the crate are
/// dimensionless fractions of the box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TorusPoint {
    coords: DVector<f64>,
}

/// Wrap a scalar into `[0, 1)`.
#[inline]
pub fn wrap_unit(x: f64) -> f64 {
    let y = x - x.floor();
    // x slightly below an integer can round to 1.0 after the subtraction
    if y >= 1.0 {
        0.0
    } else {
        y
    }
}

impl TorusPoint {
    /// Build a torus point, wrapping every coordinate into `[0, 1)`.
    pub fn new(coords: DVector<f64>) -> Self {
        Self {
            coords: coords.map(wrap_unit),
        }
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &DVector<f64> {
        &self.coords
    }

    /// The point shifted by `delta`, re-wrapped.
    pub fn translated(&self, delta: &DVector<f64>) -> Self {
        Self::new(&self.coords + delta)
    }
}

/// Minimal-image representative of `b − a` on the torus.
///
/// Each coordinate of the result lies in `[−1/2, 1/2)`; an exact tie at a
/// half-integer separation resolves to `−1/2` (half-open convention), which
/// keeps the map deterministic.
pub fn minimal_image(a: &TorusPoint, b: &TorusPoint) -> DVector<f64> {
    assert_eq!(a.dim(), b.dim(), "torus points of different dimension");
    DVector::from_fn(a.dim(), |i, _| {
        let d = wrap_unit(b.coords[i] - a.coords[i]);
        if d >= 0.5 {
            d - 1.0
        } else {
            d
        }
    })
}

/// Torus distance between two points (norm of the minimal image).
pub fn torus_distance(a: &TorusPoint, b: &TorusPoint) -> f64 {
    minimal_image(a, b).norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;
    use proptest::prelude::*;

    fn pt(coords: &[f64]) -> TorusPoint {
        TorusPoint::new(DVector::from_column_slice(coords))
    }

    #[test]
    fn identity_case() {
        let a = pt(&[0.5, 0.5]);
        assert_eq!(minimal_image(&a, &a), dvector![0.0, 0.0]);
    }

    #[test]
    fn wraparound_picks_nearest_representative() {
        let a = pt(&[0.9, 0.5]);
        let b = pt(&[0.1, 0.5]);
        let d = minimal_image(&a, &b);
        assert!((d[0] - 0.2).abs() < 1e-15, "got {}", d[0]);
        assert_eq!(d[1], 0.0);
    }

    #[test]
    fn half_separation_tie_resolves_to_negative_half() {
        let a = pt(&[0.25, 0.0]);
        let b = pt(&[0.75, 0.0]);
        let d = minimal_image(&a, &b);
        assert_eq!(d[0], -0.5);
        assert_eq!(d[1], 0.0);
    }

    #[test]
    fn normalization_is_idempotent() {
        let raw = dvector![-0.25, 1.75, 3.0, -2.0];
        let p = TorusPoint::new(raw);
        let q = TorusPoint::new(p.coords().clone());
        assert_eq!(p, q);
        for &c in p.coords().iter() {
            assert!((0.0..1.0).contains(&c));
        }
    }

    proptest! {
        #[test]
        fn antisymmetric_away_from_ties(ax in 0.0..1.0f64, ay in 0.0..1.0f64,
                                        bx in 0.0..1.0f64, by in 0.0..1.0f64) {
            let a = pt(&[ax, ay]);
            let b = pt(&[bx, by]);
            let ab = minimal_image(&a, &b);
            let ba = minimal_image(&b, &a);
            for i in 0..2 {
                // ties at ±1/2 are the documented half-open exception
                if (ab[i].abs() - 0.5).abs() > 1e-12 {
                    prop_assert!((ab[i] + ba[i]).abs() < 1e-12);
                }
                prop_assert!(ab[i].abs() <= 0.5);
            }
        }

        #[test]
        fn wrap_unit_lands_in_unit_interval(x in -1e6..1e6f64) {
            let y = wrap_unit(x);
            prop_assert!((0.0..1.0).contains(&y));
            prop_assert_eq!(wrap_unit(y), y);
        }
    }
}
