//! Symbolic collision sequences, collision graphs and essential edges.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

use crate::dynamics::TrajectorySegment;

#[derive(Debug, Error)]
pub enum SymbolicError {
    #[error("pair ({0}, {1}) out of range for {2} balls")]
    InvalidPair(usize, usize, usize),
    #[error("collision graph disconnected: {components} components remain")]
    NotConnected { components: usize },
    #[error("cannot parse collision sequence literal: {0}")]
    Parse(String),
}

/// An ordered list of colliding pairs, optionally with collision times.
///
/// Pairs are stored zero-based with `i < j`; the display literal uses the
/// one-based form `"(1,2);(1,3);(2,3)"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolicSequence {
    pub entries: Vec<(usize, usize)>,
    pub times: Option<Vec<f64>>,
}

impl SymbolicSequence {
    pub fn new(entries: Vec<(usize, usize)>) -> Self {
        Self {
            entries,
            times: None,
        }
    }

    pub fn from_segment(segment: &TrajectorySegment) -> Self {
        Self {
            entries: segment.events.iter().map(|e| e.pair).collect(),
            times: Some(segment.events.iter().map(|e| e.time).collect()),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn validate(&self, n_balls: usize) -> Result<(), SymbolicError> {
        for &(i, j) in &self.entries {
            if i >= j || j >= n_balls {
                return Err(SymbolicError::InvalidPair(i, j, n_balls));
            }
        }
        if let Some(ts) = &self.times {
            assert_eq!(ts.len(), self.entries.len(), "times/entries length mismatch");
        }
        Ok(())
    }
}

impl fmt::Display for SymbolicSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .entries
            .iter()
            .map(|&(i, j)| format!("({},{})", i + 1, j + 1))
            .collect();
        write!(f, "{}", parts.join(";"))
    }
}

impl FromStr for SymbolicSequence {
    type Err = SymbolicError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut entries = Vec::new();
        let trimmed = s.trim();
        if trimmed.is_empty() {
            return Ok(Self::new(entries));
        }
        for part in trimmed.split(';') {
            let p = part.trim();
            let inner = p
                .strip_prefix('(')
                .and_then(|q| q.strip_suffix(')'))
                .ok_or_else(|| SymbolicError::Parse(format!("bad pair literal `{p}`")))?;
            let mut nums = inner.split(',');
            let a: usize = nums
                .next()
                .and_then(|x| x.trim().parse().ok())
                .ok_or_else(|| SymbolicError::Parse(format!("bad pair literal `{p}`")))?;
            let b: usize = nums
                .next()
                .and_then(|x| x.trim().parse().ok())
                .ok_or_else(|| SymbolicError::Parse(format!("bad pair literal `{p}`")))?;
            if nums.next().is_some() || a == 0 || b == 0 || a >= b {
                return Err(SymbolicError::Parse(format!("bad pair literal `{p}`")));
            }
            entries.push((a - 1, b - 1));
        }
        Ok(Self::new(entries))
    }
}

/// Graph on ball labels generated by a prefix of a collision sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionGraph {
    pub n_vertices: usize,
    /// Edge multiset: one entry per collision in the prefix.
    pub edges: Vec<(usize, usize)>,
}

impl CollisionGraph {
    /// Connected components by depth-first traversal.
    pub fn component_count(&self) -> usize {
        component_count(self.n_vertices, &self.edges)
    }

    pub fn is_connected(&self) -> bool {
        self.component_count() == 1
    }
}

fn component_count(n: usize, edges: &[(usize, usize)]) -> usize {
    let mut adj = vec![Vec::new(); n];
    for &(i, j) in edges {
        adj[i].push(j);
        adj[j].push(i);
    }
    let mut seen = vec![false; n];
    let mut components = 0;
    for start in 0..n {
        if seen[start] {
            continue;
        }
        components += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(v) = stack.pop() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
    }
    components
}

/// Graph of the first `prefix_len` collisions.
pub fn collision_graph(
    n_balls: usize,
    seq: &SymbolicSequence,
    prefix_len: usize,
) -> Result<CollisionGraph, SymbolicError> {
    assert!(prefix_len <= seq.len(), "prefix longer than the sequence");
    seq.validate(n_balls)?;
    Ok(CollisionGraph {
        n_vertices: n_balls,
        edges: seq.entries[..prefix_len].to_vec(),
    })
}

/// The essential edges of a connected sequence: the unique indices at which
/// the growing collision graph loses a connected component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EssentialEdgeSet {
    /// Zero-based indices into the sequence, strictly increasing; exactly
    /// `N − 1` of them for a connected sequence.
    pub indices: Vec<usize>,
    /// Component count after each prefix (length = sequence length + 1,
    /// starting from the edgeless graph).
    pub component_profile: Vec<usize>,
}

/// Essential-edge decomposition via incremental component recounts.
pub fn essential_indices(
    n_balls: usize,
    seq: &SymbolicSequence,
) -> Result<EssentialEdgeSet, SymbolicError> {
    seq.validate(n_balls)?;
    let mut profile = Vec::with_capacity(seq.len() + 1);
    profile.push(n_balls);
    let mut indices = Vec::new();
    for k in 0..seq.len() {
        let count = component_count(n_balls, &seq.entries[..=k]);
        if count < profile[k] {
            indices.push(k);
        }
        profile.push(count);
    }
    let final_components = *profile.last().unwrap();
    if final_components != 1 {
        return Err(SymbolicError::NotConnected {
            components: final_components,
        });
    }
    Ok(EssentialEdgeSet {
        indices,
        component_profile: profile,
    })
}
