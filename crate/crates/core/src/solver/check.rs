//! Exact re-evaluation of an assignment against a constraint set.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Block, ConstraintSet, ShapeSolution};
use crate::attrs::{domains, Attrs};
use crate::catalog::{flops_of, ConstraintKind};
use crate::shape::{EdgeId, NodeId, Shape, MAX_DIM, MAX_ORDER};

#[derive(Debug, Error, PartialEq)]
pub enum CheckError {
    #[error("incomplete solution: {0}")]
    IncompleteSolution(String),
}

/// One violated rule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub node: Option<NodeId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub edge: Option<EdgeId>,
    pub rule: String,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(n) = self.node {
            write!(f, "{n}: ")?;
        }
        if let Some(e) = self.edge {
            write!(f, "{e}: ")?;
        }
        write!(f, "{} ({})", self.rule, self.detail)
    }
}

/// Lists every violated constraint; an empty list means the solution is valid.
pub fn check(solution: &ShapeSolution, cs: &ConstraintSet) -> Result<Vec<Violation>, CheckError> {
    for e in &cs.edges {
        if !solution.shapes.contains_key(&e.edge) {
            return Err(CheckError::IncompleteSolution(format!("no shape for {}", e.edge)));
        }
    }
    for b in &cs.blocks {
        if !solution.attrs.contains_key(&b.node) {
            return Err(CheckError::IncompleteSolution(format!("no attributes for {}", b.node)));
        }
        for e in b.inputs.iter().chain(std::iter::once(&b.output)) {
            if !solution.shapes.contains_key(e) {
                return Err(CheckError::IncompleteSolution(format!("no shape for {e}")));
            }
        }
    }
    let mut out = Vec::new();
    let limits = &cs.limits;

    for e in &cs.edges {
        let s = &solution.shapes[&e.edge];
        let mut edge_rule = |rule: &str, detail: String| {
            out.push(Violation { node: None, edge: Some(e.edge), rule: rule.into(), detail })
        };
        if s.order() > MAX_ORDER {
            edge_rule("order", format!("order {} exceeds {MAX_ORDER}", s.order()));
        }
        if e.from_create && s.order() == 0 && !cs.pins.contains_key(&e.edge) {
            edge_rule("order", "created tensors need at least one dimension".into());
        }
        if let Some(d) = s.dims().iter().find(|&&d| !(1..=MAX_DIM).contains(&d)) {
            edge_rule("domain", format!("dimension {d} outside [1, {MAX_DIM}]"));
        }
        if s.order() > 0 && s.numel() < limits.min_size_tensor {
            edge_rule("min_size_tensor", format!("{} elements < {}", s.numel(), limits.min_size_tensor));
        }
        if let Some(pin) = cs.pins.get(&e.edge) {
            if pin != s {
                edge_rule("pinned", format!("expected {pin}, got {s}"));
            }
        }
    }

    let mut total_flops = 0u64;
    for b in &cs.blocks {
        let attrs = &solution.attrs[&b.node];
        let ins: Vec<&Shape> = b.inputs.iter().map(|e| &solution.shapes[e]).collect();
        let res = &solution.shapes[&b.output];
        for reason in check_block(b, &ins, res, attrs) {
            out.push(Violation { node: Some(b.node), edge: Some(b.output), rule: format!("{:?}", b.kind), detail: reason });
        }
        let owned: Vec<Shape> = ins.iter().map(|s| (*s).clone()).collect();
        match flops_of(&b.spec, &owned, res, attrs) {
            Ok(f) => total_flops = total_flops.saturating_add(f),
            Err(e) => out.push(Violation { node: Some(b.node), edge: None, rule: "flops".into(), detail: e.to_string() }),
        }
    }

    let total_numel = solution.shapes.values().fold(0u64, |a, s| a.saturating_add(s.numel()));
    let mut global = |rule: &str, detail: String| out.push(Violation { node: None, edge: None, rule: rule.into(), detail });
    if total_numel > limits.max_size {
        global("max_size", format!("{total_numel} elements > {}", limits.max_size));
    }
    if total_flops > limits.max_flops {
        global("max_flops", format!("{total_flops} > {}", limits.max_flops));
    }
    if cs.enforce_min_flops && total_flops < limits.min_flops {
        global("min_flops", format!("{total_flops} < {}", limits.min_flops));
    }
    if total_flops != solution.total_flops {
        global("total_flops", format!("recorded {} but recomputed {total_flops}", solution.total_flops));
    }
    if total_numel != solution.total_numel {
        global("total_numel", format!("recorded {} but recomputed {total_numel}", solution.total_numel));
    }
    Ok(out)
}

fn in_range(v: Option<u32>, (lo, hi): (u32, u32)) -> Option<u32> {
    v.filter(|x| (lo..=hi).contains(x))
}

/// Sliding-window output size; `None` when the window does not fit.
fn window_out(x: u32, k: u32, s: u32, p: u32, d: u32) -> Option<u32> {
    let span = i64::from(x) + 2 * i64::from(p) - i64::from(d) * (i64::from(k) - 1) - 1;
    if span < 0 {
        return None;
    }
    Some((span / i64::from(s) + 1) as u32)
}

fn check_block(b: &Block, ins: &[&Shape], c: &Shape, attrs: &Attrs) -> Vec<String> {
    let mut errs = Vec::new();
    let a = ins[0].dims();
    let cd = c.dims();
    macro_rules! fail {
        ($($t:tt)*) => {{
            errs.push(format!($($t)*));
            return errs;
        }};
    }
    if !b.spec.arity.accepts(ins.len()) {
        fail!("{} inputs do not match the operator's arity", ins.len());
    }
    match b.kind {
        ConstraintKind::Broadcast => {
            let n = ins.iter().map(|s| s.order()).max().unwrap_or(0);
            if c.order() != n {
                fail!("output order {} != max input order {n}", c.order());
            }
            for i in 0..n {
                let vals: Vec<u32> = ins.iter().filter_map(|s| s.right_aligned(n).map(|v| v[i])).collect();
                let m = vals.iter().copied().max().unwrap_or(1);
                if cd[i] != m {
                    errs.push(format!("position {i}: output {} != max {m}", cd[i]));
                }
                if vals.iter().any(|&v| v != 1 && v != m) {
                    errs.push(format!("position {i}: sizes {vals:?} do not broadcast"));
                }
            }
        }
        ConstraintKind::Unary | ConstraintKind::LayerNorm => {
            if ins[0] != c {
                fail!("output {c} != input {}", ins[0]);
            }
            if b.kind == ConstraintKind::LayerNorm && a.is_empty() {
                fail!("layer norm needs order >= 1");
            }
        }
        ConstraintKind::AlongDim => {
            if ins[0] != c {
                fail!("output {c} != input {}", ins[0]);
            }
            match attrs.dim {
                Some(d) if (d as usize) < a.len() => {}
                other => fail!("dim {other:?} invalid for order {}", a.len()),
            }
        }
        ConstraintKind::Reduce => {
            let Some(d) = attrs.dim.map(|d| d as usize).filter(|&d| d < a.len()) else {
                fail!("dim {:?} invalid for order {}", attrs.dim, a.len());
            };
            let Some(keep) = attrs.keepdim else {
                fail!("keepdim unresolved");
            };
            let mut expect: Vec<u32> = a.to_vec();
            if keep {
                expect[d] = 1;
            } else {
                expect.remove(d);
            }
            if cd != expect.as_slice() {
                fail!("output {c} != expected {}", Shape(expect));
            }
        }
        ConstraintKind::Matmul => {
            let bd = ins[1].dims();
            if a.len() < 2 || bd.len() < 2 {
                fail!("matmul operands need order >= 2");
            }
            if a[a.len() - 1] != bd[bd.len() - 2] {
                errs.push(format!("inner sizes {} and {} differ", a[a.len() - 1], bd[bd.len() - 2]));
            }
            let n = a.len().max(bd.len());
            if c.order() != n {
                fail!("output order {} != {n}", c.order());
            }
            if cd[n - 2] != a[a.len() - 2] || cd[n - 1] != bd[bd.len() - 1] {
                errs.push(format!("output matrix dims {:?} mismatch", &cd[n - 2..]));
            }
            let ab = Shape(a[..a.len() - 2].to_vec()).right_aligned(n - 2).unwrap_or_default();
            let bb = Shape(bd[..bd.len() - 2].to_vec()).right_aligned(n - 2).unwrap_or_default();
            for i in 0..n - 2 {
                let m = ab[i].max(bb[i]);
                if (ab[i] != 1 && ab[i] != m) || (bb[i] != 1 && bb[i] != m) || cd[i] != m {
                    errs.push(format!("batch position {i}: {} vs {} -> {}", ab[i], bb[i], cd[i]));
                }
            }
        }
        ConstraintKind::Bmm => {
            let bd = ins[1].dims();
            if a.len() != 3 || bd.len() != 3 || c.order() != 3 {
                fail!("bmm needs order-3 operands");
            }
            if a[0] != bd[0] || a[2] != bd[1] || cd != [a[0], a[1], bd[2]] {
                fail!("{} x {} -> {c} is not a batched product", ins[0], ins[1]);
            }
        }
        ConstraintKind::Transpose => {
            if a.len() < 2 {
                fail!("transpose needs order >= 2");
            }
            let mut expect = a.to_vec();
            let n = expect.len();
            expect.swap(n - 2, n - 1);
            if cd != expect.as_slice() {
                fail!("output {c} != {}", Shape(expect));
            }
        }
        ConstraintKind::Triangular => {
            if a.len() < 2 || ins[0] != c {
                fail!("triangular ops need order >= 2 and preserve shape");
            }
        }
        ConstraintKind::BatchNorm | ConstraintKind::InstanceNorm | ConstraintKind::GroupNorm => {
            let min_order = if b.kind == ConstraintKind::InstanceNorm { 3 } else { 2 };
            if a.len() < min_order || ins[0] != c {
                fail!("normalization needs order >= {min_order} and preserves shape");
            }
            let spatial: u64 = a[2..].iter().map(|&d| u64::from(d)).product();
            match b.kind {
                ConstraintKind::BatchNorm if u64::from(a[0]) * spatial < 2 => errs.push("fewer than 2 values per channel".into()),
                ConstraintKind::InstanceNorm if spatial < 2 => errs.push("fewer than 2 spatial values".into()),
                ConstraintKind::GroupNorm => match attrs.groups.filter(|g| domains::GROUPS.contains(g)) {
                    Some(g) if a[1].is_multiple_of(g) => {}
                    g => errs.push(format!("channels {} not divisible by groups {g:?}", a[1])),
                },
                _ => {}
            }
        }
        ConstraintKind::Conv { spatial } | ConstraintKind::ConvTranspose { spatial } => {
            let m = spatial as usize;
            let w = ins[1].dims();
            if a.len() != m + 2 || w.len() != m + 2 || c.order() != m + 2 {
                fail!("convolution operands need order {}", m + 2);
            }
            let (Some(s), Some(p), Some(d)) = (
                in_range(attrs.stride, domains::STRIDE),
                in_range(attrs.padding, domains::PADDING),
                in_range(attrs.dilation, domains::DILATION),
            ) else {
                fail!("stride/padding/dilation missing or out of range");
            };
            let Some(g) = attrs.groups.filter(|g| domains::GROUPS.contains(g)) else {
                fail!("groups {:?} not allowed", attrs.groups);
            };
            let ks = &w[2..];
            if attrs.kernel_size.as_deref() != Some(ks) {
                errs.push(format!("kernel_size {:?} != weight extents {ks:?}", attrs.kernel_size));
            }
            if ks.iter().any(|&k| k < domains::KERNEL.0 || k > domains::KERNEL.1) {
                errs.push(format!("kernel {ks:?} outside [{}, {}]", domains::KERNEL.0, domains::KERNEL.1));
            }
            if cd[0] != a[0] {
                errs.push("batch not preserved".into());
            }
            if matches!(b.kind, ConstraintKind::Conv { .. }) {
                if 2 * p > ks.iter().copied().max().unwrap_or(0) {
                    errs.push(format!("2p = {} exceeds the largest kernel", 2 * p));
                }
                if a[1] != g * w[1] || !w[0].is_multiple_of(g) || cd[1] != w[0] {
                    errs.push(format!("channels: in {} weight {:?} groups {g} out {}", a[1], &w[..2], cd[1]));
                }
                for j in 0..m {
                    let (x, k) = (a[2 + j], ks[j]);
                    if x < k {
                        errs.push(format!("spatial {j}: input {x} smaller than kernel {k}"));
                    }
                    if window_out(x, k, s, p, d) != Some(cd[2 + j]) {
                        errs.push(format!("spatial {j}: output {} != floor formula {:?}", cd[2 + j], window_out(x, k, s, p, d)));
                    }
                }
            } else {
                if a[1] != w[0] || !a[1].is_multiple_of(g) || cd[1] != g * w[1] {
                    errs.push(format!("channels: in {} weight {:?} groups {g} out {}", a[1], &w[..2], cd[1]));
                }
                for j in 0..m {
                    let expect = (i64::from(a[2 + j]) - 1) * i64::from(s) - 2 * i64::from(p) + i64::from(d) * (i64::from(ks[j]) - 1) + 1;
                    if i64::from(cd[2 + j]) != expect {
                        errs.push(format!("spatial {j}: output {} != {expect}", cd[2 + j]));
                    }
                }
            }
        }
        ConstraintKind::Pool { spatial } => {
            let m = spatial as usize;
            if a.len() != m + 2 || c.order() != m + 2 {
                fail!("pooling input needs order {}", m + 2);
            }
            let (Some(s), Some(p)) = (in_range(attrs.stride, domains::STRIDE), in_range(attrs.padding, domains::PADDING)) else {
                fail!("stride/padding missing or out of range");
            };
            let Some(ks) = attrs.kernel_size.as_ref().filter(|k| k.len() == m) else {
                fail!("kernel_size must have {m} entries");
            };
            if cd[..2] != a[..2] {
                errs.push("batch/channel not preserved".into());
            }
            for j in 0..m {
                let k = ks[j];
                if !(domains::KERNEL.0..=domains::KERNEL.1).contains(&k) || 2 * p > k {
                    errs.push(format!("spatial {j}: kernel {k} with padding {p}"));
                }
                if b.spec.name == "AvgPool3d" && a[2 + j] < k {
                    errs.push(format!("spatial {j}: input {} is smaller than kernel {k}", a[2 + j]));
                }
                if window_out(a[2 + j], k, s, p, 1) != Some(cd[2 + j]) {
                    errs.push(format!("spatial {j}: output {} != floor formula", cd[2 + j]));
                }
            }
        }
        ConstraintKind::Cat => {
            let n = a.len();
            let Some(d) = attrs.dim.map(|d| d as usize).filter(|&d| d < n) else {
                fail!("dim {:?} invalid for order {n}", attrs.dim);
            };
            if ins.iter().any(|s| s.order() != n) || c.order() != n {
                fail!("cat operands need equal orders");
            }
            for (i, &c) in cd.iter().enumerate() {
                if i == d {
                    let sum: u64 = ins.iter().map(|s| u64::from(s.dims()[i])).sum();
                    if u64::from(c) != sum {
                        errs.push(format!("concat dim {c} != sum {sum}"));
                    }
                } else if ins.iter().any(|s| s.dims()[i] != c) {
                    errs.push(format!("position {i} differs across operands"));
                }
            }
        }
        ConstraintKind::Stack => {
            if ins.iter().any(|s| *s != ins[0]) {
                fail!("stack operands differ");
            }
            let mut expect = vec![ins.len() as u32];
            expect.extend_from_slice(a);
            if cd != expect.as_slice() {
                fail!("output {c} != {}", Shape(expect));
            }
        }
    }
    errs
}
