//! Locating crossings of the degeneracy manifold J and the past-tangency
//! manifold K along one-parameter phase-space curves, plus the
//! non-coincidence experiment and dimension statistics.
//!
//! K-crossings are bracketed by a sign change of a quadratic *defect*
//! signal: the squared pair separation in excess of contact, evaluated at
//! the critical point of the first backward free-flight approach episode.
//! The defect is negative when the first past reflection is a transversal
//! collision, zero at a tangency and positive on a miss, and it crosses
//! zero linearly in the curve parameter, so bisection reaches the
//! `bisection_res` residual target. (The normal speed itself scales like
//! the square root of the defect, which puts thresholds far below 1e-5 out
//! of f64 reach for located roots; re-validation therefore bounds the
//! normal speed by [`K_REVALIDATE_SPEED`].)
//!
//! J-crossings are dips of the smallest non-flow singular value of the
//! neutrality system; grid-local minima are refined by golden-section
//! search and accepted when the refined value falls below the rank cutoff.

use std::collections::BTreeMap;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{
    advance_flow, backward_first_reflection, earliest_contact_filtered, pair_episode,
    phantom_flow, CollisionEvent, DynamicsError, PhasePoint, Stop, SystemParams,
    TrajectorySegment,
};

use crate::neutral::{is_sufficient, neutral_space, neutral_space_prefix, NeutralError};
use crate::sampling::{sample_phase_point, SampleError};
use crate::symbolic::{essential_indices, SymbolicError, SymbolicSequence};

/// Normal-speed bound used to re-validate a located K-point. A bisected
/// root carries a defect at the 1e-16 level, which translates to a normal
/// speed of order 1e-8 at desk-scale radii; 1e-5 keeps a wide safety margin
/// while still certifying a grazing contact five orders below generic
/// collision speeds.
pub const K_REVALIDATE_SPEED: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("no past reflection at curve parameter {u}")]
    NoPastReflection { u: f64 },
    #[error("symbolic sequence unstable over the whole curve range")]
    SequenceUnstable,
    #[error("only {accepted} accepted crossings, {required} required")]
    NotEnoughSamples { accepted: usize, required: usize },
    #[error("sequence not realized within {attempts} attempts")]
    SequenceUnrealizable { attempts: usize },
    #[error("invalid curve: {0}")]
    InvalidCurve(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Neutral(#[from] NeutralError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Symbolic(#[from] SymbolicError),
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-item seed derivation: splitmix64 of the master seed xored with the
/// splitmix64-scrambled item index. Keeps merged ensemble reports
/// independent of worker count and completion order.
pub fn mix_seed(master: u64, index: u64) -> u64 {
    splitmix(master ^ splitmix(index))
}

/// A one-parameter phase-space curve `u ↦ x(u)`: positions shift along
/// `δq`, velocities along `δv` (both momentum-free), and the velocities are
/// rescaled to unit total energy at every `u`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurveSpec {
    pub base: PhasePoint,
    pub dq: Vec<DVector<f64>>,
    pub dv: Vec<DVector<f64>>,
    pub u_min: f64,
    pub u_max: f64,
    pub samples: usize,
}

impl CurveSpec {
    /// Random direction curve; `velocity_only` keeps positions fixed, which
    /// preserves the packing invariant for every `u`.
    pub fn random(
        params: &SystemParams,
        base: PhasePoint,
        seed: u64,
        range: f64,
        samples: usize,
        velocity_only: bool,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = params.n_balls;
        let nu = params.nu;
        let draw = |rng: &mut ChaCha8Rng| -> Vec<DVector<f64>> {
            let mut vs: Vec<DVector<f64>> =
                (0..n).map(|_| DVector::from_fn(nu, |_, _| rng.sample(StandardNormal))).collect();
            let mean = vs.iter().fold(DVector::zeros(nu), |a, v| a + v) / n as f64;
            for v in &mut vs {
                *v -= &mean;
            }
            vs
        };
        let mut dq = draw(&mut rng);
        let mut dv = draw(&mut rng);
        if velocity_only {
            for d in &mut dq {
                d.fill(0.0);
            }
        }
        let norm: f64 = dq
            .iter()
            .chain(&dv)
            .map(|v| v.norm_squared())
            .sum::<f64>()
            .sqrt();
        let scale = if norm > 0.0 { norm.recip() } else { 1.0 };
        for d in dq.iter_mut().chain(dv.iter_mut()) {
            *d *= scale;
        }
        Self {
            base,
            dq,
            dv,
            u_min: -range,
            u_max: range,
            samples,
        }
    }

    pub fn at(&self, u: f64) -> PhasePoint {
        let positions = self
            .base
            .positions
            .iter()
            .zip(&self.dq)
            .map(|(q, d)| q.translated(&(d * u)))
            .collect();
        let mut velocities: Vec<DVector<f64>> = self
            .base
            .velocities
            .iter()
            .zip(&self.dv)
            .map(|(v, d)| v + d * u)
            .collect();
        let energy: f64 = velocities.iter().map(|v| v.norm_squared()).sum();
        let scale = energy.sqrt().recip();
        for v in &mut velocities {
            *v *= scale;
        }
        PhasePoint {
            positions,
            velocities,
        }
    }

    pub fn grid(&self) -> Vec<f64> {
        let n = self.samples.max(2);
        (0..n)
            .map(|i| self.u_min + (self.u_max - self.u_min) * (i as f64) / ((n - 1) as f64))
            .collect()
    }

    /// Shrink the range toward zero until every grid point is a valid phase
    /// point (packing violations shrink the admissible range).
    pub fn shrink_to_valid(&mut self, params: &SystemParams) -> Result<(), ProbeError> {
        self.base
            .validate(params)
            .map_err(|e| ProbeError::InvalidCurve(format!("base point invalid: {e}")))?;
        for _ in 0..60 {
            let all_ok = self.grid().iter().all(|&u| self.at(u).validate(params).is_ok());
            if all_ok {
                return Ok(());
            }
            self.u_min *= 0.7;
            self.u_max *= 0.7;
        }
        Err(ProbeError::InvalidCurve(
            "no valid range found around the base point".into(),
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CrossingKind {
    J,
    K,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Witness {
    /// Re-validated first past reflection at the located K-point.
    K {
        event: CollisionEvent,
        normal_speed: f64,
    },
    /// Degeneracy-signal dip with the kernel dimensions around it.
    J {
        sigma_dip: f64,
        dim_left: usize,
        dim_at: usize,
        dim_right: usize,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossingReport {
    pub kind: CrossingKind,
    pub u_star: f64,
    /// `|signal(u_star)|`: the defect for K, the singular-value dip for J.
    pub residual: f64,
    pub witness: Witness,
    /// Whether the colliding pair stayed the reference pair across the
    /// bracket (K) — unstable crossings are excluded from acceptance.
    pub bracket_pair_stable: bool,
    /// Stability + residual below `bisection_res` + re-validation.
    pub accepted: bool,
    /// The pair involved, for tabular output (K only).
    pub pair: Option<(usize, usize)>,
}

/// Scan a curve for crossings of the past-tangency manifold K.
///
/// The backward flow must find a first past reflection at every grid point;
/// consecutive grid points whose first-past pair changes (or whose
/// reflection time jumps) bracket a candidate, which is bisected on the
/// reference pair's defect signal.
pub fn scan_k(params: &SystemParams, curve: &CurveSpec) -> Result<Vec<CrossingReport>, ProbeError> {
    let grid = curve.grid();
    let mut pairs = Vec::with_capacity(grid.len());
    let mut taus = Vec::with_capacity(grid.len());
    for &u in &grid {
        let x = curve.at(u);
        x.validate(params)
            .map_err(|e| ProbeError::InvalidCurve(format!("grid point u={u}: {e}")))?;
        let (tau, ev) = backward_first_reflection(params, &x)
            .map_err(|_| ProbeError::NoPastReflection { u })?;
        pairs.push(ev.pair);
        taus.push(tau);
    }

    let mut dtau: Vec<f64> = taus.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    dtau.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median_dtau = dtau.get(dtau.len() / 2).copied().unwrap_or(0.0);

    let mut reports = Vec::new();
    for k in 0..grid.len() - 1 {
        let (ua, ub) = (grid[k], grid[k + 1]);
        let pair_changed = pairs[k] != pairs[k + 1];
        let tau_jumped = (taus[k + 1] - taus[k]).abs() > 0.05 + 10.0 * median_dtau;
        if !pair_changed && !tau_jumped {
            continue;
        }
        let mut candidates = vec![pairs[k]];
        if pairs[k + 1] != pairs[k] {
            candidates.push(pairs[k + 1]);
        }
        for ref_pair in candidates {
            let ga = defect_signal(params, curve, ua, ref_pair);
            let gb = defect_signal(params, curve, ub, ref_pair);
            let (Some(ga), Some(gb)) = (ga, gb) else {
                continue;
            };
            if ga.signum() == gb.signum() {
                continue;
            }
            if let Some(report) = bisect_k(params, curve, ua, ub, ga, ref_pair) {
                reports.push(report);
            }
        }
    }
    reports.sort_by(|a, b| a.u_star.partial_cmp(&b.u_star).unwrap());
    Ok(reports)
}

/// Defect of the reference pair's first backward approach episode.
fn defect_signal(
    params: &SystemParams,
    curve: &CurveSpec,
    u: f64,
    pair: (usize, usize),
) -> Option<f64> {
    let reversed = curve.at(u).negated();
    pair_episode(params, &reversed, pair, params.time_cap).map(|e| e.defect)
}

/// Whether the reference pair's episode really is the first backward
/// contact/approach: no other pair collides strictly earlier.
fn k_point_stable(params: &SystemParams, state: &PhasePoint, ref_pair: (usize, usize)) -> bool {
    let reversed = state.negated();
    let Some(episode) = pair_episode(params, &reversed, ref_pair, params.time_cap) else {
        return false;
    };
    match earliest_contact_filtered(params, &reversed, |p| p != ref_pair, episode.time) {
        Some((_, t_other)) => t_other >= episode.time - params.tolerances.coincidence_eps,
        None => true,
    }
}

fn bisect_k(
    params: &SystemParams,
    curve: &CurveSpec,
    ua: f64,
    ub: f64,
    ga: f64,
    ref_pair: (usize, usize),
) -> Option<CrossingReport> {
    let tol = &params.tolerances;
    let mut lo = ua;
    let mut hi = ub;
    let mut g_lo = ga;
    let mut stable = k_point_stable(params, &curve.at(lo), ref_pair)
        && k_point_stable(params, &curve.at(hi), ref_pair);
    for _ in 0..200 {
        let width = (hi - lo).abs();
        if width < 4.0 * f64::EPSILON * (lo.abs().max(hi.abs()) + 1.0) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let Some(g_mid) = defect_signal(params, curve, mid, ref_pair) else {
            stable = false;
            break;
        };
        if !k_point_stable(params, &curve.at(mid), ref_pair) {
            stable = false;
        }
        if g_mid == 0.0 {
            lo = mid;
            g_lo = g_mid;
            break;
        }
        if g_mid.signum() == g_lo.signum() {
            lo = mid;
            g_lo = g_mid;
        } else {
            hi = mid;
        }
    }
    // report the contact-side endpoint so the witness event exists there
    let (u_star, residual) = if g_lo <= 0.0 {
        (lo, g_lo.abs())
    } else {
        (hi, defect_signal(params, curve, hi, ref_pair)?.abs())
    };

    let x_star = curve.at(u_star);
    let revalidation = backward_first_reflection(params, &x_star).ok();
    let (witness, revalidated) = match revalidation {
        Some((_, event)) if event.pair == ref_pair => {
            let speed = event.normal_speed();
            let ok = speed.abs() < K_REVALIDATE_SPEED;
            (
                Witness::K {
                    event,
                    normal_speed: speed,
                },
                ok,
            )
        }
        Some((_, event)) => {
            let speed = event.normal_speed();
            (
                Witness::K {
                    event,
                    normal_speed: speed,
                },
                false,
            )
        }
        None => return None,
    };
    let accepted = stable && revalidated && residual < tol.bisection_res;
    Some(CrossingReport {
        kind: CrossingKind::K,
        u_star,
        residual,
        witness,
        bracket_pair_stable: stable,
        accepted,
        pair: Some(ref_pair),
    })
}

/// Scan a curve for crossings of the degeneracy manifold J.
///
/// All grid points must realize a common symbolic sequence; maximal stable
/// runs are scanned independently (the curve is split at sequence changes).
/// The signal is the smallest singular value of the neutrality system above
/// the generic kernel; local minima are refined by golden-section search
/// and accepted when the refined value falls below `rank_rel · σ_max`.
pub fn scan_j(
    params: &SystemParams,
    curve: &CurveSpec,
    stop: Stop,
) -> Result<Vec<CrossingReport>, ProbeError> {
    let tol = &params.tolerances;
    let grid = curve.grid();
    let mut info: Vec<Option<(Vec<(usize, usize)>, usize, f64, f64)>> = Vec::new();
    // (sequence, dimension, signal, sigma_max) per grid point
    let mut generic_dim = usize::MAX;
    let mut evals = Vec::new();
    for &u in &grid {
        let x = curve.at(u);
        if x.validate(params).is_err() {
            evals.push(None);
            continue;
        }
        match advance_flow(params, &x, stop) {
            Ok(seg) => {
                let space = neutral_space(&seg, tol)?;
                generic_dim = generic_dim.min(space.dimension);
                evals.push(Some((seg.pair_sequence(), space)));
            }
            Err(_) => evals.push(None),
        }
    }
    if generic_dim == usize::MAX {
        return Err(ProbeError::SequenceUnstable);
    }
    for e in &evals {
        match e {
            Some((seq, space)) => {
                let sig = sorted_ascending_sigma(&space.singular_values, generic_dim);
                info.push(Some((seq.clone(), space.dimension, sig, space.sigma_max)));
            }
            None => info.push(None),
        }
    }

    // maximal runs with a common sequence
    let mut reports = Vec::new();
    let mut run_start = 0;
    let mut any_run = false;
    let mut k = 0;
    while k <= grid.len() {
        let split = k == grid.len()
            || info[k].is_none()
            || (k > run_start
                && match (&info[run_start], &info[k]) {
                    (Some(a), Some(b)) => a.0 != b.0,
                    _ => true,
                });
        if split {
            if k - run_start >= 3 {
                any_run = true;
                scan_j_run(
                    params,
                    curve,
                    stop,
                    &grid[run_start..k],
                    &info[run_start..k],
                    generic_dim,
                    &mut reports,
                )?;
            }
            if k == grid.len() {
                break;
            }
            run_start = if info[k].is_some() { k } else { k + 1 };
        }
        k += 1;
    }
    if !any_run {
        return Err(ProbeError::SequenceUnstable);
    }
    reports.sort_by(|a, b| a.u_star.partial_cmp(&b.u_star).unwrap());
    Ok(reports)
}

/// `k`-th smallest singular value (0-based), from a descending list.
fn sorted_ascending_sigma(descending: &[f64], k: usize) -> f64 {
    let n = descending.len();
    if k    >= n {
        return 0.0;
    }
    descending[n - 1 - k]
}

#[allow(clippy::too_many_arguments)]
fn scan_j_run(
    params: &SystemParams,
    curve: &CurveSpec,
    stop: Stop,
    grid: &[f64],
    info: &[Option<(Vec<(usize, usize)>, usize, f64, f64)>],
    generic_dim: usize,
    reports: &mut Vec<CrossingReport>,
) -> Result<(), ProbeError> {
    let tol = &params.tolerances;
    let run_seq = info[0].as_ref().unwrap().0.clone();
    let eval = |u: f64| -> Option<(f64, usize, f64)> {
        let x = curve.at(u);
        x.validate(params).ok()?;
        let seg = advance_flow(params, &x, stop).ok()?;
        if seg.pair_sequence() != run_seq {
            return None;
        }
        let space = neutral_space(&seg, tol).ok()?;
        Some((
            sorted_ascending_sigma(&space.singular_values, generic_dim),
            space.dimension,
            space.sigma_max,
        ))
    };

    for i in 1..grid.len() - 1 {
        let (si, _, _) = match (&info[i - 1], &info[i], &info[i + 1]) {
            (Some(a), Some(b), Some(c)) => (b.2, a.2, c.2),
            _ => continue,
        };
        let (sl, sr) = (info[i - 1].as_ref().unwrap().2, info[i + 1].as_ref().unwrap().2);
        if !(si <= sl && si <= sr) {
            continue;
        }
        // golden-section refinement of the dip
        let Some((u_star, s_star)) = golden_min(grid[i - 1], grid[i + 1], |u| {
            eval(u).map(|(s, _, _)| s)
        }) else {
            continue;
        };
        let Some((_, dim_at, sigma_max)) = eval(u_star) else {
            continue;
        };
        let accepted_dip = s_star < tol.rank_rel * sigma_max;
        if !accepted_dip {
            continue;
        }
        let dim_left = info[i - 1].as_ref().unwrap().1;
        let dim_right = info[i + 1].as_ref().unwrap().1;
        let accepted = dim_at > dim_left.min(dim_right);
        reports.push(CrossingReport {
            kind: CrossingKind::J,
            u_star,
            residual: s_star,
            witness: Witness::J {
                sigma_dip: s_star,
                dim_left,
                dim_at,
                dim_right,
            },
            bracket_pair_stable: true,
            accepted,
            pair: None,
        });
    }
    Ok(())
}

/// Golden-section minimization; `f` returning `None` aborts the candidate
/// (the symbolic sequence broke under refinement).
fn golden_min(
    mut a: f64,
    mut b: f64,
    mut f: impl FnMut(f64) -> Option<f64>,
) -> Option<(f64, f64)> {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    for _ in 0..120 {
        if (b - a).abs() < 1e-10 * (1.0 + a.abs() + b.abs()) {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d)?;
        }
    }
    let (u, s) = if fc < fd { (c, fc) } else { (d, fd) };
    Some((u, s))
}

/// How a symbolic sequence was realized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RealizationMode {
    Flow,
    Phantom,
}

/// Rejection-sample seeded phase points until the forward flow realizes the
/// sequence; optionally fall back to phantom dynamics (which deletes every
/// potential outside the prescription).
pub fn realize_sequence(
    params: &SystemParams,
    seq: &SymbolicSequence,
    seed_start: u64,
    max_attempts: usize,
    allow_phantom: bool,
) -> Result<(TrajectorySegment, RealizationMode), ProbeError> {
    seq.validate(params.n_balls)?;
    let n = seq.len();
    for k in 0..max_attempts {
        let Ok(x) = sample_phase_point(params, seed_start.wrapping_add(k as u64)) else {
            continue;
        };
        if let Ok(seg) = advance_flow(params, &x, Stop::Events(n)) {
            if seg.pair_sequence() == seq.entries {
                return Ok((seg, RealizationMode::Flow));
            }
        }
    }
    if allow_phantom {
        for k in 0..max_attempts {
            let Ok(x) = sample_phase_point(params, seed_start.wrapping_add(k as u64)) else {
                continue;
            };
            if let Ok(seg) = phantom_flow(params, &x, &seq.entries) {
                return Ok((seg, RealizationMode::Phantom));
            }
        }
    }
    Err(ProbeError::SequenceUnrealizable {
        attempts: max_attempts,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrefixStats {
    /// Neutral-space dimension histogram over the sample.
    pub histogram: BTreeMap<usize, usize>,
    /// Observed minimum = generic dimension for the prefix.
    pub delta: usize,
}

/// Empirical dimension statistics of a symbolic sequence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DimensionStats {
    pub sequence: SymbolicSequence,
    pub samples: usize,
    pub mode: RealizationMode,
    /// One entry per prefix length `0..=n`.
    pub per_prefix: Vec<PrefixStats>,
    /// `delta` per prefix length (copy of the per-prefix minima).
    pub delta_profile: Vec<usize>,
    /// Typical dimension on located J-points, when a J-location pass was
    /// run for the full sequence; populated by the caller.
    pub delta_j: Option<usize>,
}

/// Sample realizations of `sequence` and histogram the neutral-space
/// dimension of every prefix. Falls back to phantom realization for the
/// whole run when the first realization exhausts its flow budget.
pub fn dimension_statistics(
    params: &SystemParams,
    sequence: &SymbolicSequence,
    samples: usize,
    seed: u64,
) -> Result<DimensionStats, ProbeError> {
    let tol = &params.tolerances;
    let n = sequence.len();
    if samples == 0 {
        return Err(ProbeError::NotEnoughSamples {
            accepted: 0,
            required: 1,
        });
    }
    const FLOW_BUDGET: usize = 4000;
    let mut mode = RealizationMode::Flow;
    let mut per_prefix: Vec<PrefixStats> = (0..=n)
        .map(|_| PrefixStats {
            histogram: BTreeMap::new(),
            delta: usize::MAX,
        })
        .collect();

    for item in 0..samples {
        let item_seed = mix_seed(seed, item as u64);
        let allow_phantom = mode == RealizationMode::Phantom || item == 0;
        let (seg, used) = realize_sequence(params, sequence, item_seed, FLOW_BUDGET, allow_phantom)?;
        if used == RealizationMode::Phantom {
            mode = RealizationMode::Phantom;
        }
        for prefix in 0..=n {
            let space = neutral_space_prefix(&seg, prefix, tol)?;
            let stat = &mut per_prefix[prefix];
            *stat.histogram.entry(space.dimension).or_insert(0) += 1;
            stat.delta = stat.delta.min(space.dimension);
        }
    }
    let delta_profile: Vec<usize> = per_prefix.iter().map(|p| p.delta).collect();
    for w in delta_profile.windows(2) {
        assert!(w[1] <= w[0], "delta profile must be non-increasing");
    }
    Ok(DimensionStats {
        sequence: sequence.clone(),
        samples,
        mode,
        per_prefix,
        delta_profile,
        delta_j: None,
    })
}

/// One K-point of the non-coincidence experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KPointOutcome {
    pub curve_index: u64,
    pub u_star: f64,
    pub pair: (usize, usize),
    pub residual: f64,
    pub normal_speed: f64,
    /// Whether the forward collision graph is connected.
    pub connected: bool,
    /// Sufficiency of the forward segment (None when it could not be run).
    pub sufficient: Option<bool>,
    pub forward_dimension: Option<usize>,
}

/// Parameters of the non-coincidence experiment ensemble.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleSpec {
    /// Number of seeded curves to scan (all are always evaluated, keeping
    /// merged reports independent of worker count).
    pub curves: usize,
    /// Required number of accepted K-points with connected forward graphs.
    pub required_k_points: usize,
    pub curve_range: f64,
    pub grid_samples: usize,
    /// Collision count of the forward segment tested for sufficiency.
    pub forward_events: usize,
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        Self {
            curves: 400,
            required_k_points: 50,
            curve_range: 0.3,
            grid_samples: 33,
            forward_events: 5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoncoincidenceReport {
    pub spec: EnsembleSpec,
    pub master_seed: u64,
    pub curves_scanned: usize,
    pub curves_failed: usize,
    pub accepted_k_points: usize,
    pub connected_k_points: usize,
    pub sufficient_count: usize,
    pub non_sufficient_count: usize,
    /// At least one K-point with a sufficient forward segment: a strict
    /// witness that K is not contained in J.
    pub pass: bool,
    pub witnesses: Vec<KPointOutcome>,
}

/// Scan one seeded curve of the ensemble for accepted K-points and test
/// the forward segment of each for sufficiency.
pub fn noncoincidence_curve(
    params: &SystemParams,
    spec: &EnsembleSpec,
    master_seed: u64,
    curve_index: u64,
) -> Result<Vec<KPointOutcome>, ProbeError> {
    let seed = mix_seed(master_seed, curve_index);
    let base = sample_phase_point(params, seed)?;
    let mut curve = CurveSpec::random(
        params,
        base,
        mix_seed(seed, 1),
        spec.curve_range,
        spec.grid_samples,
        false,
    );
    curve.shrink_to_valid(params)?;
    let reports = scan_k(params, &curve)?;
    let mut outcomes = Vec::new();
    for rep in reports.into_iter().filter(|r| r.accepted) {
        let Witness::K {
            ref event,
            normal_speed,
        } = rep.witness
        else {
            continue;
        };
        let x_star = curve.at(rep.u_star);
        let (connected, sufficient, forward_dimension) =
            match advance_flow(params, &x_star, Stop::Events(spec.forward_events)) {
                Ok(seg) => {
                    let seq = SymbolicSequence::from_segment(&seg);
                    let connected = essential_indices(params.n_balls, &seq).is_ok();
                    if connected {
                        let space = neutral_space(&seg, &params.tolerances)?;
                        (
                            true,
                            Some(is_sufficient(&seg, &params.tolerances)?),
                            Some(space.dimension),
                        )
                    } else {
                        (false, None, None)
                    }
                }
                Err(_) => (false, None, None),
            };
        outcomes.push(KPointOutcome {
            curve_index,
            u_star: rep.u_star,
            pair: event.pair,
            residual: rep.residual,
            normal_speed,
            connected,
            sufficient,
            forward_dimension,
        });
    }
    Ok(outcomes)
}

/// Merge per-curve outcomes into the experiment report. Outcomes must be
/// supplied for curve indices `0..spec.curves` (order irrelevant).
pub fn merge_noncoincidence(
    spec: &EnsembleSpec,
    master_seed: u64,
    per_curve: Vec<Result<Vec<KPointOutcome>, ProbeError>>,
) -> Result<NoncoincidenceReport, ProbeError> {
    let curves_scanned = per_curve.len();
    let mut witnesses: Vec<KPointOutcome> = Vec::new();
    let mut curves_failed = 0;
    for outcome in per_curve {
        match outcome {
            Ok(list) => witnesses.extend(list),
            Err(_) => curves_failed += 1,
        }
    }
    witnesses.sort_by(|a, b| {
        (a.curve_index, a.pair)
            .cmp(&(b.curve_index, b.pair))
            .then(a.u_star.partial_cmp(&b.u_star).unwrap())
    });
    let accepted_k_points = witnesses.len();
    let connected: Vec<&KPointOutcome> = witnesses.iter().filter(|w| w.connected).collect();
    let connected_k_points = connected.len();
    let sufficient_count = connected
        .iter()
        .filter(|w| w.sufficient == Some(true))
        .count();
    let non_sufficient_count = connected
        .iter()
        .filter(|w| w.sufficient == Some(false))
        .count();
    if connected_k_points < spec.required_k_points {
        return Err(ProbeError::NotEnoughSamples {
            accepted: connected_k_points,
            required: spec.required_k_points,
        });
    }
    let pass = sufficient_count >= 1;
    Ok(NoncoincidenceReport {
        spec: spec.clone(),
        master_seed,
        curves_scanned,
        curves_failed,
        accepted_k_points,
        connected_k_points,
        sufficient_count,
        non_sufficient_count,
        pass,
        witnesses,
    })
}

/// The full non-coincidence experiment, sequential reference implementation.
pub fn noncoincidence_experiment(
    params: &SystemParams,
    spec: &EnsembleSpec,
    master_seed: u64,
) -> Result<NoncoincidenceReport, ProbeError> {
    if spec.curves == 0 {
        return Err(ProbeError::NotEnoughSamples {
            accepted: 0,
            required: spec.required_k_points.max(1),
        });
    }
    let per_curve = (0..spec.curves as u64)
        .map(|c| noncoincidence_curve(params, spec, master_seed, c))
        .collect();
    merge_noncoincidence(spec, master_seed, per_curve)
}

/// The triangle collision sequence (1,2),(1,3),(2,3) in zero-based labels.
pub fn triangle_sequence() -> SymbolicSequence {
    SymbolicSequence::new(vec![(0, 1), (0, 2), (1, 2)])
}

/// Independent degeneracy detector for a triangle-sequence segment on the
/// 2-torus: the planar determinant of the post-collision-1 relative
/// velocity of pair (1,2) against the sum of the pre- and post-collision-2
/// relative velocities of pair (1,3). It vanishes exactly where those
/// vectors are parallel, which is where the neutral space gains a
/// dimension.
pub fn triangle_parallelity_det(segment: &TrajectorySegment) -> f64 {
    assert!(segment.events.len() >= 2, "need the first two collisions");
    assert_eq!(segment.events[0].pair, (0, 1));
    assert_eq!(segment.events[1].pair, (0, 2));
    let a = &segment.events[0].v_rel_post;
    let b = &segment.events[1].v_rel_pre + &segment.events[1].v_rel_post;
    a[0] * b[1] - a[1] * b[0]
}

/// Search for a velocity-direction curve through a triangle-sequence point
/// whose parallelity determinant changes sign inside a sequence-stable
/// window. Returns the curve (re-centered around the sign change) together
/// with the bisected determinant root.
pub fn parallelity_curve(
    params: &SystemParams,
    master_seed: u64,
    max_tries: u64,
) -> Result<(CurveSpec, f64), ProbeError> {
    let seq = triangle_sequence();
    for attempt in 0..max_tries {
        let seed = mix_seed(master_seed, attempt);
        let Ok((seg, _)) = realize_sequence(params, &seq, seed, 3000, false) else {
            continue;
        };
        let curve = CurveSpec::random(
            params,
            seg.initial.clone(),
            mix_seed(seed, 7),
            0.25,
            41,
            true,
        );
        let det_at = |u: f64| -> Option<f64> {
            let x = curve.at(u);
            x.validate(params).ok()?;
            let s = advance_flow(params, &x, Stop::Events(3)).ok()?;
            if s.pair_sequence() != seq.entries {
                return None;
            }
            Some(triangle_parallelity_det(&s))
        };
        // locate a sign change over a sequence-stable part of the grid
        let grid = curve.grid();
        let vals: Vec<Option<f64>> = grid.iter().map(|&u| det_at(u)).collect();
        let mut bracket = None;
        for k in 0..grid.len() - 1 {
            if let (Some(a), Some(b)) = (vals[k], vals[k + 1]) {
                if a.signum() != b.signum() {
                    bracket = Some((grid[k], grid[k + 1], a));
                    break;
                }
            }
        }
        let Some((mut lo, mut hi, f_lo)) = bracket else {
            continue;
        };
        // bisect the determinant root
        let mut f_lo = f_lo;
        let mut ok = true;
        for _ in 0..200 {
            if (hi - lo).abs() < 4.0 * f64::EPSILON * (1.0 + lo.abs().max(hi.abs())) {
                break;
            }
            let mid = 0.5 * (lo + hi);
            let Some(fm) = det_at(mid) else {
                ok = false;
                break;
            };
            if fm == 0.0 {
                lo = mid;
                break;
            }
            if fm.signum() == f_lo.signum() {
                lo = mid;
                f_lo = fm;
            } else {
                hi = mid;
            }
        }
        if !ok {
            continue;
        }
        let root = 0.5 * (lo + hi);
        // re-center a tight window on the root so the dip is the only
        // feature and the sequence is stable across it
        let pad = 0.004;
        let mut centered = curve.clone();
        centered.u_min = root - pad;
        centered.u_max = root + pad;
        centered.samples = 17;
        let stable = centered.grid().iter().all(|&u| det_at(u).is_some());
        if !stable {
            continue;
        }
        return Ok((centered, root));
    }
    Err(ProbeError::SequenceUnrealizable {
        attempts: max_tries as usize,
    })
}

/// A curve crossing the tangency manifold at a parameter near zero, built
/// by flying a zero-normal-speed contact forward and perturbing the
/// velocities transversally.
pub fn planted_tangency_curve(
    params: &SystemParams,
    drift: f64,
    range: f64,
    samples: usize,
) -> CurveSpec {
    assert_eq!(params.n_balls, 3, "planted construction uses three balls");
    assert_eq!(params.nu, 2);
    let r2 = 2.0 * params.radius;
    let a = (0.5f64).sqrt();
    // pair (0,1) at exact contact along x, shearing in y. Ball 2 drifts
    // slowly: it guarantees a (much later) past reflection at every curve
    // parameter without disturbing the pair's exact tangency, since the
    // momentum compensation −v₂/2 cancels in the relative velocity.
    let v2 = nalgebra::dvector![0.031, 0.043];
    let positions = vec![
        crate::torus::TorusPoint::new(nalgebra::dvector![0.5, 0.3]),
        crate::torus::TorusPoint::new(nalgebra::dvector![0.5 - r2, 0.3]),
        crate::torus::TorusPoint::new(nalgebra::dvector![0.0, 0.75]),
    ];
    let velocities = vec![
        nalgebra::dvector![0.0, a] - &v2 / 2.0,
        nalgebra::dvector![0.0, -a] - &v2 / 2.0,
        v2,
    ];
    let start = PhasePoint {
        positions,
        velocities,
    };
    // forward free flight (the shear separates the pair; ball 2 is static)
    let mut base = start.clone();
    for (q, v) in base.positions.iter_mut().zip(&base.velocities) {
        *q = q.translated(&(v * drift));
    }
    // transversal direction: opposite x-kicks on the contact pair rotate
    // the relative velocity into the contact normal
    let dv = vec![
        nalgebra::dvector![1.0, 0.0],
        nalgebra::dvector![-1.0, 0.0],
        nalgebra::dvector![0.0, 0.0],
    ];
    let dq = vec![
        nalgebra::dvector![0.0, 0.0],
        nalgebra::dvector![0.0, 0.0],
        nalgebra::dvector![0.0, 0.0],
    ];
    CurveSpec {
        base,
        dq,
        dv,
        // keep zero strictly inside but off the grid
        u_min: -0.61 * range,
        u_max: 0.47 * range,
        samples,
    }
}
