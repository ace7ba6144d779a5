//! Identifiers and concrete tensor shapes.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Largest size any single dimension may take.
pub const MAX_DIM: u32 = 1 << 15;

/// Largest tensor order the solver will assign.
pub const MAX_ORDER: usize = 8;

/// Identifier of a tensor edge in a program graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EdgeId(pub u32);

/// Identifier of an operator node in a program graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for EdgeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "tensor_{}", self.0)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "node_{}", self.0)
    }
}

/// A concrete shape. The empty shape is an order-0 (scalar) tensor.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Shape(pub Vec<u32>);

impl Shape {
    pub fn new(dims: impl Into<Vec<u32>>) -> Self {
        Shape(dims.into())
    }

    pub fn scalar() -> Self {
        Shape(Vec::new())
    }

    pub fn order(&self) -> usize {
        self.0.len()
    }

    pub fn dims(&self) -> &[u32] {
        &self.0
    }

    /// Element count, saturating at `u64::MAX`.
    pub fn numel(&self) -> u64 {
        self.0
            .iter()
            .fold(1u64, |acc, &d| acc.saturating_mul(u64::from(d)))
    }

    /// Right-aligned view padded with leading ones up to `order`.
    /// Returns `None` if `order` is smaller than this shape's order.
    pub fn right_aligned(&self, order: usize) -> Option<Vec<u32>> {
        let pad = order.checked_sub(self.order())?;
        let mut out = vec![1; pad];
        out.extend_from_slice(&self.0);
        Some(out)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("(")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{d}")?;
        }
        if self.0.len() == 1 {
            f.write_str(",")?;
        }
        f.write_str(")")
    }
}

impl From<Vec<u32>> for Shape {
    fn from(v: Vec<u32>) -> Self {
        Shape(v)
    }
}

impl<const N: usize> From<[u32; N]> for Shape {
    fn from(v: [u32; N]) -> Self {
        Shape(v.to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numel_and_alignment() {
        let s = Shape::from([3, 4, 5]);
        assert_eq!(s.numel(), 60);
        assert_eq!(Shape::scalar().numel(), 1);
        assert_eq!(Shape::from([5]).right_aligned(3), Some(vec![1, 1, 5]));
        assert_eq!(s.right_aligned(2), None);
    }

    #[test]
    fn display_matches_python_tuples() {
        assert_eq!(Shape::from([3, 4]).to_string(), "(3, 4)");
        assert_eq!(Shape::from([7]).to_string(), "(7,)");
        assert_eq!(Shape::scalar().to_string(), "()");
    }
}
