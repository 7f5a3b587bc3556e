use billiard_core::dynamics::{advance_flow, Stop, SystemParams};
use billiard_core::linalg::Tolerances;
use billiard_core::neutral::{fd_jacobian_kernel, neutral_space, NeutralError};
use billiard_core::sampling::sample_phase_point;

fn main() {
    let params = SystemParams::new(3, 2, 0.1);
    let tol = Tolerances::default();
    for seed in 0..60u64 {
        let Ok(x) = sample_phase_point(&params, seed) else { continue };
        let events = 1 + (seed as usize) % 5;
        let Ok(seg) = advance_flow(&params, &x, Stop::Events(events)) else { continue };
        let space = neutral_space(&seg, &tol).unwrap();
        match fd_jacobian_kernel(&params, &x, Stop::Events(events), &tol) {
            Ok(fd) => {
                if fd.dimension != space.dimension {
                    let jk = billiard_core::linalg::kernel(&fd.jacobian, &tol).unwrap();
                    println!("seed {seed} events {events}: analytic {} fd {} | J sigmas {:?}",
                        space.dimension, fd.dimension,
                        jk.singular_values.iter().map(|s| format!("{s:.2e}")).collect::<Vec<_>>());
                }
            }
            Err(NeutralError::FragileSegment { .. }) => continue,
            Err(e) => panic!("{e}"),
        }
    }
    println!("done");
}
