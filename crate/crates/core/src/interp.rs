//! Piecewise-linear interpolation on ascending node vectors.

use crate::error::{Error, Result};

/// Position of `x` between two adjacent nodes: the interpolated value is
/// `(1 - weight) * v[lo] + weight * v[lo + 1]`. Points outside the node
/// range are clamped to the end node and flagged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bracket {
    pub lo: usize,
    pub weight: f64,
    pub clamped: Clamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Clamp {
    None,
    Below,
    Above,
}

impl Bracket {
    #[inline]
    pub fn apply(&self, values: impl Fn(usize) -> f64) -> f64 {
        if self.weight == 0.0 {
            values(self.lo)
        } else {
            (1.0 - self.weight) * values(self.lo) + self.weight * values(self.lo + 1)
        }
    }
}

/// Locates `x` in `nodes` (ascending, at least two entries).
#[inline]
pub fn bracket(nodes: &[f64], x: f64) -> Bracket {
    let n = nodes.len();
    debug_assert!(n >= 2);
    if x <= nodes[0] {
        return Bracket {
            lo: 0,
            weight: 0.0,
            clamped: if x < nodes[0] { Clamp::Below } else { Clamp::None },
        };
    }
    if x >= nodes[n - 1] {
        return Bracket {
            lo: n - 2,
            weight: 1.0,
            clamped: if x > nodes[n - 1] { Clamp::Above } else { Clamp::None },
        };
    }
    // first index with nodes[idx] > x; x lies in [nodes[idx-1], nodes[idx])
    let idx = nodes.partition_point(|&v| v <= x);
    let lo = idx - 1;
    let weight = (x - nodes[lo]) / (nodes[lo + 1] - nodes[lo]);
    Bracket {
        lo,
        weight,
        clamped: Clamp::None,
    }
}

/// Linear interpolation of `(nodes, values)` at `x`, flat beyond the ends.
pub fn interp(nodes: &[f64], values: &[f64], x: f64) -> f64 {
    bracket(nodes, x).apply(|i| values[i])
}

/// Bilinear interpolation on a tensor grid; `value(i, j)` reads node
/// `(x_nodes[i], y_nodes[j])`.
#[inline]
pub fn bilinear(x_nodes: &[f64], y_nodes: &[f64], x: f64, y: f64, value: impl Fn(usize, usize) -> f64) -> f64 {
    let bx = bracket(x_nodes, x);
    let by = bracket(y_nodes, y);
    bilinear_at(&bx, &by, value)
}

#[inline]
pub fn bilinear_at(bx: &Bracket, by: &Bracket, value: impl Fn(usize, usize) -> f64) -> f64 {
    by.apply(|j| bx.apply(|i| value(i, j)))
}

/// Result of re-expressing an endogenous line on the structured grid.
#[derive(Debug, Clone, PartialEq)]
pub struct InvertedLine {
    /// Next-period state reached from each structured node.
    pub next: Vec<f64>,
    /// Values carried along the line, evaluated at each structured node.
    pub values: Vec<f64>,
    /// Whether the structured node fell outside the implied range.
    pub clamped: Vec<bool>,
}

/// Inverts the monotone map `current -> next` traced out by an endogenous
/// grid line.
///
/// `exo_next_nodes[p]` is the next-period state on the exogenous grid,
/// `implied_current_nodes[p]` the current state from which it is optimal,
/// and `values_on_next[p]` a quantity attached to that pair. The relation
/// is linearly interpolated at every `structured` node; outside the implied
/// range the end values are used and the node is flagged.
pub fn invert_endogenous_line(
    exo_next_nodes: &[f64],
    implied_current_nodes: &[f64],
    values_on_next: &[f64],
    structured: &[f64],
) -> Result<InvertedLine> {
    let n = exo_next_nodes.len();
    if implied_current_nodes.len() != n || values_on_next.len() != n || n == 0 {
        return Err(Error::Configuration("endogenous line arrays differ in length".into()));
    }
    let mut cur = Vec::with_capacity(n);
    let mut nxt = Vec::with_capacity(n);
    let mut val = Vec::with_capacity(n);
    for p in 0..n {
        let x = implied_current_nodes[p];
        if !x.is_finite() {
            return Err(Error::NonMonotoneLine { position: p });
        }
        if let Some(&last) = cur.last() {
            if x < last {
                return Err(Error::NonMonotoneLine { position: p });
            }
            if x == last {
                continue;
            }
        }
        cur.push(x);
        nxt.push(exo_next_nodes[p]);
        val.push(values_on_next[p]);
    }
    let mut out = InvertedLine {
        next: Vec::with_capacity(structured.len()),
        values: Vec::with_capacity(structured.len()),
        clamped: Vec::with_capacity(structured.len()),
    };
    for &x in structured {
        if cur.len() == 1 {
            out.next.push(nxt[0]);
            out.values.push(val[0]);
            out.clamped.push(x != cur[0]);
            continue;
        }
        let b = bracket(&cur, x);
        out.next.push(b.apply(|i| nxt[i]));
        out.values.push(b.apply(|i| val[i]));
        out.clamped.push(b.clamped != Clamp::None);
    }
    Ok(out)
}

/// `n` log-spaced nodes from `lo` to `hi` inclusive.
pub fn log_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| {
            if i + 1 == n {
                hi
            } else if i == 0 {
                lo
            } else {
                (a + (b - a) * i as f64 / (n - 1) as f64).exp()
            }
        })
        .collect()
}
