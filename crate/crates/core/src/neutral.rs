//! The neutrality/advance linear system of an orbit segment.
//!
//! A position perturbation `δq` (with `Σδqᵢ = 0`) is *neutral* for a segment
//! when it leaves every velocity along the orbit unchanged. Writing `α_k`
//! for the advance of collision `k` (the amount by which the perturbation
//! moves that collision earlier), neutrality is equivalent to the linear
//! system
//!
//! * `Σᵢ δqᵢ = 0` (center of mass),
//! * for every collision `k`:
//!   `δq^(k)_{i(k)} − δq^(k)_{j(k)} = α_k (v⁻_{i(k)} − v⁻_{j(k)})`,
//!
//! where `δq^(k)` is the perturbation transported through the first `k`
//! collisions by `δqᵢ ← δqᵢ + α_l (v⁺_{l,i} − v⁻_{l,i})` for each earlier
//! collision `l` involving ball `i`. The kernel of the stacked system is the
//! neutral space; the advance coordinates of its elements realize the
//! advance map Φ, which is injective on connected segments.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{
    advance_flow, DynamicsError, EventClass, PhasePoint, Stop, SystemParams, TrajectorySegment,
};
use crate::linalg::{kernel, LinalgError, Tolerances};
use crate::symbolic::{essential_indices, SymbolicError, SymbolicSequence};

#[derive(Debug, Error)]
pub enum NeutralError {
    #[error("segment contains a singular event at index {index}")]
    SingularSegment { index: usize },
    #[error("edge {index} is essential: it introduces no eliminated relation")]
    NoRelation { index: usize },
    #[error("advance map not injective: rank {rank} < dimension {dimension}")]
    EmbeddingViolation { rank: usize, dimension: usize },
    #[error("segment too fragile for finite differences: {reason}")]
    FragileSegment { reason: String },
    #[error(transparent)]
    Symbolic(#[from] SymbolicError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// Per-collision data the system assembly needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventData {
    pub pair: (usize, usize),
    pub v_rel_pre: DVector<f64>,
    pub v_rel_post: DVector<f64>,
}

impl EventData {
    /// Velocity jump `v⁺ − v⁻` of the first ball of the pair; the second
    /// ball receives the negative (equal masses).
    fn jump_first(&self) -> DVector<f64> {
        (&self.v_rel_post - &self.v_rel_pre) / 2.0
    }
}

/// The assembled neutrality system of a segment prefix.
///
/// Unknown layout: `δq ∈ ℝ^{νN}` followed by `α ∈ ℝ^n`; rows: one ν-block
/// for the center of mass, then one ν-block per collision. The block of
/// collision `k` references only `α_1..α_k`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NeutralitySystem {
    pub n_balls: usize,
    pub nu: usize,
    pub matrix: DMatrix<f64>,
    pub events: Vec<EventData>,
}

impl NeutralitySystem {
    pub fn n_events(&self) -> usize {
        self.events.len()
    }

    pub fn n_unknowns(&self) -> usize {
        self.nu * self.n_balls + self.events.len()
    }

    /// Split a solution vector into per-ball `δq` parts and the advances.
    pub fn split(&self, x: &DVector<f64>) -> (Vec<DVector<f64>>, DVector<f64>) {
        let nu = self.nu;
        let dq = (0..self.n_balls)
            .map(|b| x.rows(b * nu, nu).clone_owned())
            .collect();
        let alphas = x.rows(nu * self.n_balls, self.events.len()).clone_owned();
        (dq, alphas)
    }

    /// Transport per-ball displacements through the first `stage` collisions.
    pub fn transport_to_stage(
        &self,
        dq: &[DVector<f64>],
        alphas: &DVector<f64>,
        stage: usize,
    ) -> Vec<DVector<f64>> {
        assert!(stage <= self.events.len());
        let mut out: Vec<DVector<f64>> = dq.to_vec();
        for (l, ev) in self.events.iter().take(stage).enumerate() {
            let jump = ev.jump_first();
            out[ev.pair.0] += &jump * alphas[l];
            out[ev.pair.1] -= &jump * alphas[l];
        }
        out
    }

    /// The uniform time-shift solution: `δq = V₀`, all advances 1.
    ///
    /// Lies in the kernel of every prefix system (the flow direction).
    pub fn flow_element(&self, initial: &PhasePoint) -> DVector<f64> {
        let nu = self.nu;
        let mut x = DVector::zeros(self.n_unknowns());
        for (b, v) in initial.velocities.iter().enumerate() {
            x.rows_mut(b * nu, nu).copy_from(v);
        }
        for k in 0..self.events.len() {
            x[nu * self.n_balls + k] = 1.0;
        }
        x
    }

    /// Residual of the system applied to a solution candidate.
    pub fn residual(&self, x: &DVector<f64>) -> f64 {
        (&self.matrix * x).norm()
    }
}

/// Assemble the neutrality system for the first `prefix` collisions.
pub fn build_neutrality_system_prefix(
    segment: &TrajectorySegment,
    prefix: usize,
) -> Result<NeutralitySystem, NeutralError> {
    assert!(prefix <= segment.events.len(), "prefix exceeds event count");
    if let Some(index) = segment.events[..prefix]
        .iter()
        .position(|e| e.class != EventClass::Regular)
    {
        return Err(NeutralError::SingularSegment { index });
    }
    let n_balls = segment.initial.positions.len();
    let nu = segment.initial.positions[0].dim();
    let events: Vec<EventData> = segment.events[..prefix]
        .iter()
        .map(|e| EventData {
            pair: e.pair,
            v_rel_pre: e.v_rel_pre.clone(),
            v_rel_post: e.v_rel_post.clone(),
        })
        .collect();

    let rows = nu * (prefix + 1);
    let cols = nu * n_balls + prefix;
    let mut m = DMatrix::zeros(rows, cols);

    // center-of-mass block
    for c in 0..nu {
        for b in 0..n_balls {
            m[(c, b * nu + c)] = 1.0;
        }
    }

    for (k, ev) in events.iter().enumerate() {
        let r0 = nu * (k + 1);
        let (i, j) = ev.pair;
        for c in 0..nu {
            m[(r0 + c, i * nu + c)] += 1.0;
            m[(r0 + c, j * nu + c)] -= 1.0;
        }
        // transport of δq through the earlier collisions, folded into α columns
        for (l, el) in events.iter().take(k).enumerate() {
            let jump = el.jump_first();
            let col = nu * n_balls + l;
            let (p, q) = el.pair;
            for (ball, sign) in [(p, 1.0), (q, -1.0)] {
                if ball == i {
                    for c in 0..nu {
                        m[(r0 + c, col)] += sign * jump[c];
                    }
                } else if ball == j {
                    for c in 0..nu {
                        m[(r0 + c, col)] -= sign * jump[c];
                    }
                }
            }
        }
        // the collision's own advance
        let col = nu * n_balls + k;
        for c in 0..nu {
            m[(r0 + c, col)] -= ev.v_rel_pre[c];
        }
    }

    Ok(NeutralitySystem {
        n_balls,
        nu,
        matrix: m,
        events,
    })
}

/// Assemble the neutrality system for the whole segment.
pub fn build_neutrality_system(
    segment: &TrajectorySegment,
) -> Result<NeutralitySystem, NeutralError> {
    build_neutrality_system_prefix(segment, segment.events.len())
}

/// The neutral space of a segment: kernel of the assembled system.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NeutralSpaceResult {
    pub dimension: usize,
    pub n_balls: usize,
    pub nu: usize,
    pub n_events: usize,
    /// Orthonormal kernel basis in the `(δq, α)` layout, one column each.
    pub basis: DMatrix<f64>,
    /// Smallest singular value above the rank cutoff (the degeneracy signal).
    pub sigma_min: Option<f64>,
    pub sigma_max: f64,
    /// All singular values of the system, descending.
    pub singular_values: Vec<f64>,
    /// Advance coordinates of the basis: `dimension × n` (rows = basis vectors).
    pub advance_matrix: DMatrix<f64>,
}

impl NeutralSpaceResult {
    /// `(δq, α)` parts of the `col`-th basis vector.
    pub fn split_basis(&self, col: usize) -> (Vec<DVector<f64>>, DVector<f64>) {
        let nu = self.nu;
        let v = self.basis.column(col);
        let dq = (0..self.n_balls)
            .map(|b| v.rows(b * nu, nu).clone_owned())
            .collect();
        let alphas = v.rows(nu * self.n_balls, self.n_events).clone_owned();
        (dq, alphas)
    }
}

/// Neutral space of a segment prefix.
pub fn neutral_space_prefix(
    segment: &TrajectorySegment,
    prefix: usize,
    tol: &Tolerances,
) -> Result<NeutralSpaceResult, NeutralError> {
    let system = build_neutrality_system_prefix(segment, prefix)?;
    neutral_space_of(&system, tol)
}

/// Neutral space of the whole segment.
pub fn neutral_space(
    segment: &TrajectorySegment,
    tol: &Tolerances,
) -> Result<NeutralSpaceResult, NeutralError> {
    let system = build_neutrality_system(segment)?;
    neutral_space_of(&system, tol)
}

/// Neutral space of an already-assembled system.
pub fn neutral_space_of(
    system: &NeutralitySystem,
    tol: &Tolerances,
) -> Result<NeutralSpaceResult, NeutralError> {
    let k = kernel(&system.matrix, tol)?;
    let n = system.n_events();
    let dq_len = system.nu * system.n_balls;
    let mut advance = DMatrix::zeros(k.dimension, n);
    for col in 0..k.dimension {
        for e in 0..n {
            advance[(col, e)] = k.basis[(dq_len + e, col)];
        }
    }
    Ok(NeutralSpaceResult {
        dimension: k.dimension,
        n_balls: system.n_balls,
        nu: system.nu,
        n_events: n,
        basis: k.basis,
        sigma_min: k.sigma_min_nonkernel,
        sigma_max: k.sigma_max,
        singular_values: k.singular_values,
        advance_matrix: advance,
    })
}

/// Whether the segment is sufficient (geometrically hyperbolic): its
/// collision graph is connected and the neutral space has the minimum
/// dimension 1.
pub fn is_sufficient(
    segment: &TrajectorySegment,
    tol: &Tolerances,
) -> Result<bool, NeutralError> {
    let n_balls = segment.initial.positions.len();
    let seq = SymbolicSequence::from_segment(segment);
    essential_indices(n_balls, &seq)?; // NotConnected for disconnected graphs
    let space = neutral_space(segment, tol)?;
    Ok(space.dimension == 1)
}

/// Certificate that the advance map is injective on the neutral space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdvanceCertificate {
    pub advance_matrix: DMatrix<f64>,
    pub rank: usize,
    pub dimension: usize,
}

/// Verify the embedding property: the advance matrix has rank equal to the
/// neutral-space dimension. Rank deficiency signals a numerically
/// degenerate segment and is surfaced, never ignored.
pub fn advance_vectors(
    result: &NeutralSpaceResult,
    tol: &Tolerances,
) -> Result<AdvanceCertificate, NeutralError> {
    if result.n_events == 0 || result.dimension == 0 {
        return Err(NeutralError::EmbeddingViolation {
            rank: 0,
            dimension: result.dimension,
        });
    }
    let rank = crate::linalg::rank(&result.advance_matrix, tol)?;
    if rank != result.dimension {
        return Err(NeutralError::EmbeddingViolation {
            rank,
            dimension: result.dimension,
        });
    }
    Ok(AdvanceCertificate {
        advance_matrix: result.advance_matrix.clone(),
        rank,
        dimension: result.dimension,
    })
}

/// A non-essential collision's displacement constraint, eliminated to a
/// relation among the earlier advances:
///
/// `α_m Δv⁻_m = Σ_{k<m} α_k (a_k Δv⁻_k + b_k Δv⁺_k)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EliminatedRelation {
    /// Zero-based index of the eliminated (non-essential) collision.
    pub target: usize,
    /// `(a_k, b_k)` weights on the pre/post relative velocities of each
    /// earlier collision `k < target`.
    pub coefficients: Vec<(f64, f64)>,
}

impl EliminatedRelation {
    /// Residual of the relation on a solution candidate of the system.
    pub fn residual(&self, system: &NeutralitySystem, x: &DVector<f64>) -> f64 {
        let (_, alphas) = system.split(x);
        let m = self.target;
        let mut rhs = DVector::zeros(system.nu);
        for (k, &(a, b)) in self.coefficients.iter().enumerate() {
            if a != 0.0 {
                rhs += &system.events[k].v_rel_pre * (a * alphas[k]);
            }
            if b != 0.0 {
                rhs += &system.events[k].v_rel_post * (b * alphas[k]);
            }
        }
        let lhs = &system.events[m].v_rel_pre * alphas[m];
        (lhs - rhs).norm()
    }
}

/// Eliminate the δq unknowns from the prefix system of a non-essential
/// collision `m` (zero-based): the first `m` collisions connect `i(m)` to
/// `j(m)`, and chaining their neutrality relations along a connecting path
/// (with the transport rule folded in) expresses the collision-`m`
/// constraint through earlier advances and recorded relative velocities.
pub fn cpf_eliminate(
    system: &NeutralitySystem,
    m: usize,
) -> Result<EliminatedRelation, NeutralError> {
    assert!(m < system.n_events(), "target index out of range");
    // a connecting path among the earlier collisions exists exactly when the
    // edge is non-essential
    let path = connecting_path(system, m).ok_or(NeutralError::NoRelation { index: m })?;

    let mut coefficients = vec![(0.0, 0.0); m];
    for step in &path {
        let l = step.edge;
        let (p, q) = system.events[l].pair;
        let sign = step.sign;
        // the collision's own relation, transported through collisions
        // l..m−1; collision l itself turns the pre form into the post form
        coefficients[l].1 += sign; // α_l · Δv⁺_l
        for t in l + 1..m {
            let (pt, qt) = system.events[t].pair;
            let mut w = 0.0;
            if p == pt {
                w += 1.0;
            }
            if q == pt {
                w -= 1.0;
            }
            if p == qt {
                w -= 1.0;
            }
            if q == qt {
                w += 1.0;
            }
            // jump of the first ball of pair t is (Δv⁺_t − Δv⁻_t)/2
            if w != 0.0 {
                coefficients[t].0 -= sign * w * 0.5;
                coefficients[t].1 += sign * w * 0.5;
            }
        }
    }
    Ok(EliminatedRelation {
        target: m,
        coefficients,
    })
}

struct PathStep {
    /// Index of the collision whose relation the step uses.
    edge: usize,
    /// +1 when the path traverses the pair in its `(i, j)` order.
    sign: f64,
}

/// Breadth-first path from `i(m)` to `j(m)` using only collisions before
/// `m`, each vertex reached through its earliest incident collision.
fn connecting_path(system: &NeutralitySystem, m: usize) -> Option<Vec<PathStep>> {
    let n = system.n_balls;
    let (src, dst) = system.events[m].pair;
    let mut reached: Vec<Option<(usize, usize)>> = vec![None; n]; // (parent, edge)
    let mut queue = std::collections::VecDeque::new();
    reached[src] = Some((src, usize::MAX));
    queue.push_back(src);
    while let Some(v) = queue.pop_front() {
        if v == dst {
            break;
        }
        for (l, ev) in system.events.iter().take(m).enumerate() {
            let (p, q) = ev.pair;
            let w = if p == v {
                q
            } else if q == v {
                p
            } else {
                continue;
            };
            if reached[w].is_none() {
                reached[w] = Some((v, l));
                queue.push_back(w);
            }
        }
    }
    reached[dst]?;
    let mut steps = Vec::new();
    let mut v = dst;
    while v != src {
        let (parent, edge) = reached[v].unwrap();
        let (p, _) = system.events[edge].pair;
        // the path runs parent → v; the relation is stated in (i, j) order
        steps.push(PathStep {
            edge,
            sign: if p == parent { 1.0 } else { -1.0 },
        });
        v = parent;
    }
    steps.reverse();
    Some(steps)
}

/// Finite-difference oracle for the neutral space.
#[derive(Debug, Clone)]
pub struct FdKernelResult {
    pub dimension: usize,
    /// Kernel directions lifted to `δq ∈ ℝ^{νN}`, one column each.
    pub basis: DMatrix<f64>,
    pub jacobian: DMatrix<f64>,
}

/// Orthonormal basis of the momentum-free position subspace `{Σδqᵢ = 0}`.
fn momentum_free_basis(params: &SystemParams, tol: &Tolerances) -> Result<DMatrix<f64>, NeutralError> {
    let (nu, n_balls) = (params.nu, params.n_balls);
    let mut com = DMatrix::zeros(nu, nu * n_balls);
    for c in 0..nu {
        for b in 0..n_balls {
            com[(c, b * nu + c)] = 1.0;
        }
    }
    let domain = kernel(&com, tol)?;
    debug_assert_eq!(domain.dimension, params.config_dim());
    Ok(domain.basis)
}

/// Raw central-difference Jacobian of the final velocities with respect to
/// position perturbations along the columns of `domain` at step `h`,
/// re-simulating per probe. Errors with `FragileSegment` when a probe
/// changes the symbolic sequence.
pub fn fd_jacobian(
    params: &SystemParams,
    x: &PhasePoint,
    reference_pairs: &[(usize, usize)],
    domain: &DMatrix<f64>,
    h: f64,
) -> Result<DMatrix<f64>, NeutralError> {
    let nu = params.nu;
    let n_balls = params.n_balls;
    let n_events = reference_pairs.len();
    let probe = |direction: &DVector<f64>, sign: f64| -> Result<DVector<f64>, NeutralError> {
        let mut point = x.clone();
        for (b, q) in point.positions.iter_mut().enumerate() {
            let delta = direction.rows(b * nu, nu) * (sign * h);
            *q = q.translated(&delta.clone_owned());
        }
        let seg = advance_flow(params, &point, Stop::Events(n_events)).map_err(|e| {
            NeutralError::FragileSegment {
                reason: format!("probe flow failed: {e}"),
            }
        })?;
        if seg.pair_sequence() != reference_pairs {
            return Err(NeutralError::FragileSegment {
                reason: "probe changed the symbolic sequence".into(),
            });
        }
        let mut out = DVector::zeros(nu * n_balls);
        for (b, v) in seg.final_state.velocities.iter().enumerate() {
            out.rows_mut(b * nu, nu).copy_from(v);
        }
        Ok(out)
    };

    let d = domain.ncols();
    let mut jacobian = DMatrix::zeros(nu * n_balls, d);
    for col in 0..d {
        let w = domain.column(col).clone_owned();
        let plus = probe(&w, 1.0)?;
        let minus = probe(&w, -1.0)?;
        jacobian.set_column(col, &((plus - minus) / (2.0 * h)));
    }
    Ok(jacobian)
}

/// Central-difference Jacobian of the final velocities with respect to
/// initial position perturbations restricted to `Σδqᵢ = 0`; its kernel is
/// an implementation-independent estimate of the neutral space.
///
/// The Jacobian entries grow with the segment's expansion factor Λ and the
/// truncation error grows like `(hΛ)²` relative to the largest singular
/// value, so after a pilot pass at `fd_step` the step is shrunk to keep
/// `h·Λ ≤ 3e-5`, which puts the truncation floor two decades below the
/// rank cutoff while leaving the round-off floor (`≈1e-16/(hΛ)`) three
/// decades below it.
///
/// Requires a non-singular reference segment with margin: every event's
/// normal speed above `10·tangency_eps` and event gaps above
/// `10·coincidence_eps`. Probes that change the symbolic sequence make the
/// segment fragile.
pub fn fd_jacobian_kernel(
    params: &SystemParams,
    x: &PhasePoint,
    stop: Stop,
    tol: &Tolerances,
) -> Result<FdKernelResult, NeutralError> {
    let reference = advance_flow(params, x, stop)?;
    let mut prev_t = 0.0;
    for ev in &reference.events {
        if ev.normal_speed().abs() <= 10.0 * tol.tangency_eps {
            return Err(NeutralError::FragileSegment {
                reason: format!("event at t={} nearly tangential", ev.time),
            });
        }
        if ev.time - prev_t <= 10.0 * tol.coincidence_eps {
            return Err(NeutralError::FragileSegment {
                reason: format!("event gap at t={} nearly coincident", ev.time),
            });
        }
        prev_t = ev.time;
    }
    let reference_pairs = reference.pair_sequence();
    let domain = momentum_free_basis(params, tol)?;

    let mut jacobian = fd_jacobian(params, x, &reference_pairs, &domain, tol.fd_step)?;
    let mut jk = kernel(&jacobian, tol)?;
    const STEP_SCALE_TARGET: f64 = 3e-5;
    if jk.sigma_max * tol.fd_step > STEP_SCALE_TARGET {
        let h = STEP_SCALE_TARGET / jk.sigma_max;
        jacobian = fd_jacobian(params, x, &reference_pairs, &domain, h)?;
        jk = kernel(&jacobian, tol)?;
    }

    // lift the kernel coordinates back to δq space
    let basis = &domain * &jk.basis;
    Ok(FdKernelResult {
        dimension: jk.dimension,
        basis,
        jacobian,
    })
}
