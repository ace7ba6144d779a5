//! Forward shape inference following the framework's operator semantics.
//!
//! This module deliberately shares nothing with the solver's constraint
//! encoding: operators are dispatched by name and each rule is computed
//! directly from concrete input shapes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attrs::Attrs;
use crate::graph::ProgramGraph;
use crate::shape::{EdgeId, NodeId, Shape};
use crate::solver::ShapeSolution;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ReportStatus {
    Ok,
    /// A create edge has no shape, or a node reads an edge never defined.
    MissingInput { edge: EdgeId },
    ShapeError { node: NodeId, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeReport {
    /// Shapes inferred before the first error, keyed by edge.
    pub shapes: BTreeMap<EdgeId, Shape>,
    #[serde(flatten)]
    pub status: ReportStatus,
}

impl ShapeReport {
    pub fn is_ok(&self) -> bool {
        self.status == ReportStatus::Ok
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mismatch {
    pub edge: EdgeId,
    /// Shape recorded in the solution, if any.
    pub claimed: Option<Shape>,
    pub inferred: Shape,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchReport {
    pub inference: ReportStatus,
    pub mismatches: Vec<Mismatch>,
}

impl MatchReport {
    pub fn is_ok(&self) -> bool {
        self.inference == ReportStatus::Ok && self.mismatches.is_empty()
    }
}

/// Infers every edge shape from the create shapes. Attributes in `attrs`
/// take precedence over those stored on the node.
pub fn infer(graph: &ProgramGraph, input_shapes: &BTreeMap<EdgeId, Shape>, attrs: &BTreeMap<NodeId, Attrs>) -> ShapeReport {
    let mut shapes = BTreeMap::new();
    for c in &graph.create_statements {
        let edge = c.output.edge_id;
        let Some(shape) = input_shapes.get(&edge) else {
            return ShapeReport { shapes, status: ReportStatus::MissingInput { edge } };
        };
        shapes.insert(edge, shape.clone());
    }
    for node in &graph.nodes {
        let mut ins = Vec::with_capacity(node.inputs.len());
        for e in &node.inputs {
            match shapes.get(e) {
                Some(s) => ins.push(s.dims().to_vec()),
                None => return ShapeReport { shapes, status: ReportStatus::MissingInput { edge: *e } },
            }
        }
        let a = attrs.get(&node.node_id).unwrap_or(&node.attrs);
        match infer_op(&node.op, &ins, a) {
            Ok(out) => {
                shapes.insert(node.output.edge_id, Shape::new(out));
            }
            Err(reason) => {
                return ShapeReport { shapes, status: ReportStatus::ShapeError { node: node.node_id, reason } };
            }
        }
    }
    ShapeReport { shapes, status: ReportStatus::Ok }
}

/// Re-derives all shapes from the solution's create shapes and attributes
/// and compares them with the solution's own shapes.
pub fn verify_program(graph: &ProgramGraph, solution: &ShapeSolution) -> MatchReport {
    let inputs: BTreeMap<EdgeId, Shape> = graph
        .create_edges()
        .into_iter()
        .filter_map(|e| solution.shapes.get(&e).map(|s| (e, s.clone())))
        .collect();
    let report = infer(graph, &inputs, &solution.attrs);
    let mismatches = report
        .shapes
        .iter()
        .filter(|(e, s)| solution.shapes.get(e) != Some(s))
        .map(|(e, s)| Mismatch { edge: *e, claimed: solution.shapes.get(e).cloned(), inferred: s.clone() })
        .collect();
    MatchReport { inference: report.status, mismatches }
}

type Dims = Vec<u32>;

/// Output shape of one operator application, or the reason it is invalid.
pub fn infer_op(op: &str, ins: &[Dims], attrs: &Attrs) -> Result<Dims, String> {
    let want = |n: usize| -> Result<(), String> {
        if ins.len() == n {
            Ok(())
        } else {
            Err(format!("{op} takes {n} input(s), got {}", ins.len()))
        }
    };
    match op {
        "Add" | "Mul" | "Sub" | "Div" | "Maximum" | "Minimum" => {
            want(2)?;
            broadcast_shapes(ins)
        }
        "Lerp" => {
            want(3)?;
            broadcast_shapes(ins)
        }
        "ReLU" | "LeakyReLU" | "Sigmoid" | "Tanh" | "Swish" | "GELU" | "SELU" | "ELU" | "Hardsigmoid" | "HardTanh"
        | "Softplus" | "Softsign" | "LogSigmoid" | "Clamp" | "Cos" | "Sin" | "Exp2" | "Abs" => {
            want(1)?;
            Ok(ins[0].clone())
        }
        "Max" | "Min" | "Sum" | "Mean" | "ArgMax" | "ArgMin" | "Var" | "Norm" => {
            want(1)?;
            reduce(&ins[0], attrs.dim, attrs.keepdim.unwrap_or(false))
        }
        "Softmax" | "LogSoftmax" | "CumSum" | "CumMax" | "CumMin" => {
            want(1)?;
            let dim = attrs.dim.ok_or("needs a dim")?;
            axis(&ins[0], dim)?;
            Ok(ins[0].clone())
        }
        "Matmul" => {
            want(2)?;
            matmul(&ins[0], &ins[1])
        }
        "Bmm" => {
            want(2)?;
            let (a, b) = (&ins[0], &ins[1]);
            if a.len() != 3 || b.len() != 3 {
                return Err(format!("bmm needs two 3-d tensors, got {:?} and {:?}", a, b));
            }
            if a[0] != b[0] || a[2] != b[1] {
                return Err(format!("bmm operands {:?} and {:?} do not line up", a, b));
            }
            Ok(vec![a[0], a[1], b[2]])
        }
        "Transpose" => {
            want(1)?;
            let mut out = ins[0].clone();
            let n = out.len();
            if n < 2 {
                return Err("transposing the last two dims needs order >= 2".into());
            }
            out.swap(n - 2, n - 1);
            Ok(out)
        }
        "Triu" | "Tril" => {
            want(1)?;
            if ins[0].len() < 2 {
                return Err("triangular part needs order >= 2".into());
            }
            Ok(ins[0].clone())
        }
        "BatchNorm" => {
            want(1)?;
            let x = &ins[0];
            if x.len() < 2 {
                return Err("batch norm needs (N, C, ...)".into());
            }
            let per_channel: u64 = x.iter().enumerate().filter(|&(i, _)| i != 1).map(|(_, &d)| u64::from(d)).product();
            if per_channel <= 1 {
                return Err("batch statistics need more than one value per channel".into());
            }
            Ok(x.clone())
        }
        "LayerNorm" => {
            want(1)?;
            if ins[0].is_empty() {
                return Err("layer norm over the last dim needs order >= 1".into());
            }
            Ok(ins[0].clone())
        }
        "GroupNorm" => {
            want(1)?;
            let x = &ins[0];
            let g = attrs.groups.ok_or("needs num_groups")?;
            if x.len() < 2 {
                return Err("group norm needs (N, C, ...)".into());
            }
            if g == 0 || !x[1].is_multiple_of(g) {
                return Err(format!("{} channels are not divisible into {g} groups", x[1]));
            }
            Ok(x.clone())
        }
        "InstanceNorm" => {
            want(1)?;
            let x = &ins[0];
            if x.len() < 3 {
                return Err("instance norm needs (N, C, spatial...)".into());
            }
            let spatial: u64 = x[2..].iter().map(|&d| u64::from(d)).product();
            if spatial <= 1 {
                return Err("instance statistics need more than one spatial element".into());
            }
            Ok(x.clone())
        }
        "Cat" => {
            if ins.len() < 2 {
                return Err("cat takes at least 2 inputs".into());
            }
            let dim = attrs.dim.ok_or("needs a dim")? as usize;
            let first = &ins[0];
            axis(first, dim as u32)?;
            let mut out = first.clone();
            for t in &ins[1..] {
                if t.len() != first.len() {
                    return Err(format!("cat inputs {:?} and {:?} differ in order", first, t));
                }
                for i in 0..t.len() {
                    if i != dim && t[i] != first[i] {
                        return Err(format!("cat inputs {:?} and {:?} differ outside dim {dim}", first, t));
                    }
                }
                out[dim] = out[dim].checked_add(t[dim]).ok_or("dimension overflow")?;
            }
            Ok(out)
        }
        "Stack" => {
            if ins.len() < 2 {
                return Err("stack takes at least 2 inputs".into());
            }
            if ins.iter().any(|t| t != &ins[0]) {
                return Err("stack inputs must share one shape".into());
            }
            let mut out = vec![ins.len() as u32];
            out.extend_from_slice(&ins[0]);
            Ok(out)
        }
        _ => {
            if let Some(m) = spatial_suffix(op, "AvgPool").or_else(|| spatial_suffix(op, "MaxPool")) {
                want(1)?;
                let out = pool(&ins[0], m, attrs)?;
                // The 3-d average pool also rejects inputs smaller than the kernel before padding.
                if op == "AvgPool3d" {
                    let ks = attrs.kernel_size.as_deref().unwrap_or_default();
                    if ins[0][2..].iter().zip(ks).any(|(x, k)| x < k) {
                        return Err(format!("input {:?} is smaller than kernel {:?}", &ins[0][2..], ks));
                    }
                }
                Ok(out)
            } else if let Some(m) = spatial_suffix(op, "ConvTranspose") {
                want(2)?;
                conv_transpose(&ins[0], &ins[1], m, attrs)
            } else if let Some(m) = spatial_suffix(op, "Conv") {
                want(2)?;
                conv(&ins[0], &ins[1], m, attrs)
            } else {
                Err(format!("unknown operator `{op}`"))
            }
        }
    }
}

/// `Conv2d` with prefix `Conv` gives 2.
fn spatial_suffix(op: &str, prefix: &str) -> Option<usize> {
    match op.strip_prefix(prefix)? {
        "1d" => Some(1),
        "2d" => Some(2),
        "3d" => Some(3),
        _ => None,
    }
}

fn axis(x: &[u32], dim: u32) -> Result<(), String> {
    if (dim as usize) < x.len() {
        Ok(())
    } else {
        Err(format!("dim {dim} is out of range for order {}", x.len()))
    }
}

/// Shapes are aligned at their last dimension; missing leading dims count as
/// 1, and a dim of 1 stretches to match the other operands.
pub fn broadcast_shapes(ins: &[Dims]) -> Result<Dims, String> {
    let n = ins.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = vec![1u32; n];
    for t in ins {
        let offset = n - t.len();
        for (i, &d) in t.iter().enumerate() {
            let o = &mut out[offset + i];
            if *o == 1 {
                *o = d;
            } else if d != 1 && d != *o {
                return Err(format!("cannot broadcast {:?}", ins));
            }
        }
    }
    Ok(out)
}

fn reduce(x: &[u32], dim: Option<u32>, keepdim: bool) -> Result<Dims, String> {
    let Some(dim) = dim else {
        // Reducing over everything.
        return Ok(if keepdim { vec![1; x.len()] } else { vec![] });
    };
    axis(x, dim)?;
    let d = dim as usize;
    let mut out = x.to_vec();
    if keepdim {
        out[d] = 1;
    } else {
        out.remove(d);
    }
    Ok(out)
}

fn matmul(a: &[u32], b: &[u32]) -> Result<Dims, String> {
    if a.is_empty() || b.is_empty() {
        return Err("matmul operands need order >= 1".into());
    }
    // Vectors are promoted to matrices and the added dim is dropped afterwards.
    let (a2, drop_row) = if a.len() == 1 { (vec![1, a[0]], true) } else { (a.to_vec(), false) };
    let (b2, drop_col) = if b.len() == 1 { (vec![b[0], 1], true) } else { (b.to_vec(), false) };
    let (na, nb) = (a2.len(), b2.len());
    if a2[na - 1] != b2[nb - 2] {
        return Err(format!("matmul inner dims differ: {:?} @ {:?}", a, b));
    }
    let mut out = broadcast_shapes(&[a2[..na - 2].to_vec(), b2[..nb - 2].to_vec()])
        .map_err(|_| format!("matmul batch dims do not broadcast: {:?} @ {:?}", a, b))?;
    if !drop_row {
        out.push(a2[na - 2]);
    }
    if !drop_col {
        out.push(b2[nb - 1]);
    }
    Ok(out)
}

fn window_out(x: u32, k: u32, s: u32, p: u32, d: u32) -> Result<u32, String> {
    let span = i64::from(x) + 2 * i64::from(p) - i64::from(d) * (i64::from(k) - 1) - 1;
    if span < 0 {
        return Err(format!("kernel {k} (dilation {d}) exceeds padded input {x} + 2*{p}"));
    }
    Ok((span / i64::from(s) + 1) as u32)
}

fn conv_params(attrs: &Attrs) -> Result<(u32, u32, u32, u32), String> {
    let s = attrs.stride.unwrap_or(1);
    let p = attrs.padding.unwrap_or(0);
    let d = attrs.dilation.unwrap_or(1);
    let g = attrs.groups.unwrap_or(1);
    if s == 0 || d == 0 || g == 0 {
        return Err("stride, dilation and groups must be positive".into());
    }
    Ok((s, p, d, g))
}

fn check_kernel_attr(attrs: &Attrs, kernel: &[u32]) -> Result<(), String> {
    match &attrs.kernel_size {
        Some(ks) if ks.as_slice() != kernel => Err(format!("kernel_size {:?} disagrees with weight {:?}", ks, kernel)),
        _ => Ok(()),
    }
}

fn conv(x: &[u32], w: &[u32], m: usize, attrs: &Attrs) -> Result<Dims, String> {
    if x.len() != m + 2 || w.len() != m + 2 {
        return Err(format!("conv{m}d needs {}-d input and weight, got {:?} and {:?}", m + 2, x, w));
    }
    let (s, p, d, g) = conv_params(attrs)?;
    check_kernel_attr(attrs, &w[2..])?;
    if !w[0].is_multiple_of(g) {
        return Err(format!("{} output channels are not divisible by groups {g}", w[0]));
    }
    if u64::from(x[1]) != u64::from(w[1]) * u64::from(g) {
        return Err(format!("input has {} channels but weight expects {} x {g}", x[1], w[1]));
    }
    let mut out = vec![x[0], w[0]];
    for j in 0..m {
        out.push(window_out(x[2 + j], w[2 + j], s, p, d)?);
    }
    Ok(out)
}

fn conv_transpose(x: &[u32], w: &[u32], m: usize, attrs: &Attrs) -> Result<Dims, String> {
    if x.len() != m + 2 || w.len() != m + 2 {
        return Err(format!("conv_transpose{m}d needs {}-d input and weight, got {:?} and {:?}", m + 2, x, w));
    }
    let (s, p, d, g) = conv_params(attrs)?;
    check_kernel_attr(attrs, &w[2..])?;
    if x[1] != w[0] {
        return Err(format!("input has {} channels but weight expects {}", x[1], w[0]));
    }
    if !w[0].is_multiple_of(g) {
        return Err(format!("{} input channels are not divisible by groups {g}", w[0]));
    }
    let channels = u64::from(w[1]) * u64::from(g);
    let mut out = vec![x[0], u32::try_from(channels).map_err(|_| "channel overflow")?];
    for j in 0..m {
        let len = (i64::from(x[2 + j]) - 1) * i64::from(s) - 2 * i64::from(p) + i64::from(d) * (i64::from(w[2 + j]) - 1) + 1;
        if len < 1 {
            return Err(format!("transposed convolution output length {len} is not positive"));
        }
        out.push(u32::try_from(len).map_err(|_| "dimension overflow")?);
    }
    Ok(out)
}

fn pool(x: &[u32], m: usize, attrs: &Attrs) -> Result<Dims, String> {
    if x.len() != m + 2 {
        return Err(format!("pool{m}d needs a {}-d input, got {:?}", m + 2, x));
    }
    let ks = attrs.kernel_size.as_ref().ok_or("needs kernel_size")?;
    if ks.len() != m || ks.contains(&0) {
        return Err(format!("kernel_size {:?} does not fit pool{m}d", ks));
    }
    let s = attrs.stride.unwrap_or(1);
    let p = attrs.padding.unwrap_or(0);
    if s == 0 {
        return Err("stride must be positive".into());
    }
    let mut out = vec![x[0], x[1]];
    for j in 0..m {
        if 2 * p > ks[j] {
            return Err(format!("padding {p} exceeds half the kernel size {}", ks[j]));
        }
        out.push(window_out(x[2 + j], ks[j], s, p, 1)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn a() -> Attrs {
        Attrs::default()
    }

    #[test]
    fn broadcast_examples() {
        assert_eq!(infer_op("Add", &[vec![3, 1, 5], vec![3, 4, 5]], &a()), Ok(vec![3, 4, 5]));
        assert_eq!(infer_op("Add", &[vec![5], vec![3, 4, 5]], &a()), Ok(vec![3, 4, 5]));
        assert!(infer_op("Add", &[vec![2], vec![3]], &a()).is_err());
    }

    #[test]
    fn conv2d_lenet_layer() {
        let attrs = Attrs { stride: Some(1), padding: Some(0), dilation: Some(1), groups: Some(1), ..a() };
        assert_eq!(infer_op("Conv2d", &[vec![4096, 1, 32, 32], vec![6, 1, 5, 5]], &attrs), Ok(vec![4096, 6, 28, 28]));
    }

    #[test]
    fn reductions_splice() {
        let attrs = Attrs { dim: Some(1), keepdim: Some(false), ..a() };
        assert_eq!(infer_op("Sum", &[vec![2, 3, 4]], &attrs), Ok(vec![2, 4]));
        let attrs = Attrs { dim: Some(1), keepdim: Some(true), ..a() };
        assert_eq!(infer_op("ArgMax", &[vec![2, 3, 4]], &attrs), Ok(vec![2, 1, 4]));
        let attrs = Attrs { dim: Some(0), keepdim: Some(false), ..a() };
        assert_eq!(infer_op("ArgMin", &[vec![7]], &attrs), Ok(vec![]));
    }

    #[test]
    fn matmul_cases() {
        assert_eq!(infer_op("Matmul", &[vec![2, 1, 3, 4], vec![5, 4, 6]], &a()), Ok(vec![2, 5, 3, 6]));
        assert_eq!(infer_op("Matmul", &[vec![4], vec![4]], &a()), Ok(vec![]));
        assert_eq!(infer_op("Matmul", &[vec![3, 4], vec![4]], &a()), Ok(vec![3]));
        assert!(infer_op("Matmul", &[vec![3, 4], vec![5, 6]], &a()).is_err());
    }

    #[test]
    fn pooling_and_transposed_conv() {
        let attrs = Attrs { kernel_size: Some(vec![2, 2]), stride: Some(2), padding: Some(0), ..a() };
        assert_eq!(infer_op("MaxPool2d", &[vec![1, 6, 28, 28]], &attrs), Ok(vec![1, 6, 14, 14]));
        let attrs = Attrs { kernel_size: Some(vec![2]), stride: Some(1), padding: Some(2), ..a() };
        assert!(infer_op("AvgPool1d", &[vec![1, 1, 9]], &attrs).is_err());
        let attrs = Attrs { stride: Some(2), padding: Some(1), dilation: Some(1), groups: Some(2), ..a() };
        // (5 - 1) * 2 - 2 + (3 - 1) + 1 = 9
        assert_eq!(infer_op("ConvTranspose1d", &[vec![1, 4, 5], vec![4, 3, 3]], &attrs), Ok(vec![1, 6, 9]));
    }

    #[test]
    fn malformed_inputs_are_reported() {
        assert!(infer_op("Bogus", &[], &a()).is_err());
        assert!(infer_op("Add", &[vec![1]], &a()).is_err());
        assert!(infer_op("Softmax", &[vec![3]], &a()).is_err());
        assert!(infer_op("Cat", &[vec![2, 3], vec![2, 4]], &Attrs { dim: Some(0), ..a() }).is_err());
        assert_eq!(infer_op("Cat", &[vec![2, 3], vec![2, 4]], &Attrs { dim: Some(1), ..a() }), Ok(vec![2, 7]));
        assert_eq!(infer_op("Stack", &[vec![2], vec![2], vec![2]], &a()), Ok(vec![3, 2]));
    }
}
