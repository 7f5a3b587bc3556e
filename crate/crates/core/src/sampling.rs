//! Seeded rejection sampling of valid phase points.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::dynamics::{DynamicsError, PhasePoint, SystemParams};
use crate::torus::{torus_distance, TorusPoint};

const MAX_ATTEMPTS: usize = 1_000_000;

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("no admissible packing found in {attempts} attempts (radius too large)")]
    Packing { attempts: usize },
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// Sample a valid phase point: positions rejection-sampled uniformly until
/// all pairwise torus distances are at least `2r`; velocities drawn from a
/// standard normal, projected to zero total momentum and scaled to unit
/// total kinetic energy. Deterministic for a fixed seed.
pub fn sample_phase_point(params: &SystemParams, seed: u64) -> Result<PhasePoint, SampleError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = params.n_balls;
    let nu = params.nu;

    let positions = 'search: {
        for _ in 0..MAX_ATTEMPTS {
            let cand: Vec<TorusPoint> = (0..n)
                .map(|_| TorusPoint::new(DVector::from_fn(nu, |_, _| rng.random::<f64>())))
                .collect();
            let ok = (0..n).all(|i| {
                (i + 1..n).all(|j| torus_distance(&cand[i], &cand[j]) >= 2.0 * params.radius)
            });
            if ok {
                break 'search cand;
            }
        }
        return Err(SampleError::Packing {
            attempts: MAX_ATTEMPTS,
        });
    };

    let velocities = loop {
        let mut vs: Vec<DVector<f64>> = (0..n)
            .map(|_| DVector::from_fn(nu, |_, _| rng.sample(StandardNormal)))
            .collect();
        let mean = vs.iter().fold(DVector::zeros(nu), |a, v| a + v) / n as f64;
        for v in &mut vs {
            *v -= &mean;
        }
        let energy: f64 = vs.iter().map(|v| v.norm_squared()).sum();
        if energy > 1e-12 {
            let scale = energy.sqrt().recip();
            for v in &mut vs {
                *v *= scale;
            }
            break vs;
        }
    };

    let point = PhasePoint {
        positions,
        velocities,
    };
    point.validate(params)?;
    Ok(point)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampled_points_satisfy_all_invariants() {
        let params = SystemParams::new(3, 2, 0.1);
        for seed in 0..50 {
            let x = sample_phase_point(&params, seed).unwrap();
            x.validate(&params).unwrap();
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let params = SystemParams::new(4, 3, 0.08);
        let a = sample_phase_point(&params, 42).unwrap();
        let b = sample_phase_point(&params, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn near_critical_packing_never_yields_invalid_points() {
        let params = SystemParams::new(3, 2, 0.24);
        for seed in 0..5 {
            match sample_phase_point(&params, seed) {
                Ok(x) => x.validate(&params).unwrap(),
                Err(SampleError::Packing { .. }) => {}
                Err(e) => panic!("unexpected error {e}"),
            }
        }
    }
}
