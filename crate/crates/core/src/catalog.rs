//! The operator catalog: arity, attribute schema, constraint family and FLOP
//! model for every supported operator.

use std::collections::BTreeSet;
use std::sync::LazyLock;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attrs::{domains, Attrs};
use crate::shape::Shape;

#[derive(Debug, Error, PartialEq)]
pub enum CatalogError {
    #[error("unknown operator `{0}`")]
    NotFound(String),
    #[error("operator subset is empty")]
    EmptySubset,
    #[error("shape mismatch for `{op}`: {reason}")]
    ShapeMismatch { op: String, reason: String },
    #[error("malformed catalog document: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Category {
    Create,
    ElementwiseBinary,
    ElementwiseTernary,
    Reduction,
    Matrix,
    UnaryActivation,
    UnaryWithDim,
    UnaryMath,
    Cumulative,
    Normalization,
    Pool1d,
    Pool2d,
    Pool3d,
    Conv1d,
    Conv2d,
    Conv3d,
    ConvTranspose1d,
    ConvTranspose2d,
    ConvTranspose3d,
    Variadic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arity {
    Fixed(u8),
    AtLeast(u8),
}

impl Arity {
    pub fn accepts(self, n: usize) -> bool {
        match self {
            Arity::Fixed(k) => n == k as usize,
            Arity::AtLeast(k) => n >= k as usize,
        }
    }
}

/// Which shape-rule family a compute operator obeys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    /// Elementwise with right-aligned broadcasting over all inputs.
    Broadcast,
    /// Output shape equals input shape.
    Unary,
    /// Reduction over `dim`, optionally keeping it.
    Reduce,
    /// Shape-preserving op parameterised by `dim` (softmax, cumulative).
    AlongDim,
    Matmul,
    Bmm,
    Transpose,
    Triangular,
    Conv { spatial: u8 },
    ConvTranspose { spatial: u8 },
    Pool { spatial: u8 },
    BatchNorm,
    LayerNorm,
    GroupNorm,
    InstanceNorm,
    Cat,
    Stack,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopModel {
    /// One operation per output element.
    OutputElements,
    /// One operation per input element.
    InputElements,
    /// `2 * batch * M * N * K`.
    MatrixProduct,
    /// `2 * numel(out) * (C_in / g) * prod(k)`.
    Convolution,
    /// `2 * numel(in) * (C_out / g) * prod(k)`.
    TransposedConvolution,
    /// `numel(out) * prod(k)`.
    Pooling,
    /// Data movement only.
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttrDomain {
    /// A 0-indexed axis of the (first) input.
    Axis,
    Bool,
    IntRange { min: u32, max: u32 },
    IntChoice(Vec<u32>),
    FloatChoice(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttrDescriptor {
    pub name: String,
    pub domain: AttrDomain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorSpec {
    pub name: String,
    pub qualified_name: String,
    pub category: Category,
    pub arity: Arity,
    pub attr_schema: Vec<AttrDescriptor>,
    pub constraint_kind: Option<ConstraintKind>,
    pub flop_model: FlopModel,
    /// Produces an integer tensor (argmax/argmin).
    #[serde(default)]
    pub integer_output: bool,
}

impl OperatorSpec {
    pub fn is_create(&self) -> bool {
        self.category == Category::Create
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub compute_ops: Vec<OperatorSpec>,
    pub create_ops: Vec<OperatorSpec>,
}

static STANDARD: LazyLock<Catalog> = LazyLock::new(Catalog::build_standard);

impl Catalog {
    /// The full operator set, shared and immutable.
    pub fn standard() -> &'static Catalog {
        &STANDARD
    }

    pub fn lookup(&self, name: &str) -> Result<&OperatorSpec, CatalogError> {
        self.compute_ops
            .iter()
            .chain(&self.create_ops)
            .find(|s| s.name == name)
            .ok_or_else(|| CatalogError::NotFound(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.compute_ops.len() + self.create_ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Uniform draw from `subset` (all compute ops when `None`).
    pub fn sample_compute<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        subset: Option<&[String]>,
    ) -> Result<&OperatorSpec, CatalogError> {
        match subset {
            None => sample_uniform(rng, &self.compute_ops),
            Some(names) => {
                let specs = self.resolve_subset(names, false)?;
                let idx = uniform_index(rng, specs.len())?;
                Ok(specs[idx])
            }
        }
    }

    /// Uniform draw from the create ops, optionally restricted to `subset`.
    pub fn sample_create<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        subset: Option<&[String]>,
    ) -> Result<&OperatorSpec, CatalogError> {
        match subset {
            None => sample_uniform(rng, &self.create_ops),
            Some(names) => {
                let specs = self.resolve_subset(names, true)?;
                let idx = uniform_index(rng, specs.len())?;
                Ok(specs[idx])
            }
        }
    }

    fn resolve_subset(&self, names: &[String], create: bool) -> Result<Vec<&OperatorSpec>, CatalogError> {
        if names.is_empty() {
            return Err(CatalogError::EmptySubset);
        }
        // Duplicates would bias the draw.
        let unique: BTreeSet<&str> = names.iter().map(String::as_str).collect();
        let pool = if create { &self.create_ops } else { &self.compute_ops };
        // Keep catalog order so draws are independent of how the caller ordered the set.
        let mut out = Vec::with_capacity(unique.len());
        for name in &unique {
            if !pool.iter().any(|s| s.name == *name) {
                return Err(CatalogError::NotFound(name.to_string()));
            }
        }
        for spec in pool {
            if unique.contains(spec.name.as_str()) {
                out.push(spec);
            }
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("catalog serializes")
    }

    pub fn from_json(text: &str) -> Result<Catalog, CatalogError> {
        serde_json::from_str(text).map_err(|e| CatalogError::Malformed(e.to_string()))
    }

    fn build_standard() -> Catalog {
        use Category::*;
        use ConstraintKind as K;

        let mut compute = Vec::new();
        let mut push = |name: &str, qn: &str, cat: Category, arity: Arity, kind: K, flops: FlopModel, attrs: Vec<AttrDescriptor>| {
            compute.push(OperatorSpec {
                name: name.into(),
                qualified_name: qn.into(),
                category: cat,
                arity,
                attr_schema: attrs,
                constraint_kind: Some(kind),
                flop_model: flops,
                integer_output: matches!(name, "ArgMax" | "ArgMin"),
            });
        };

        for (name, qn) in [
            ("Add", "torch.add"),
            ("Mul", "torch.mul"),
            ("Sub", "torch.sub"),
            ("Div", "torch.div"),
            ("Maximum", "torch.maximum"),
            ("Minimum", "torch.minimum"),
        ] {
            push(name, qn, ElementwiseBinary, Arity::Fixed(2), K::Broadcast, FlopModel::OutputElements, vec![]);
        }
        push("Lerp", "torch.lerp", ElementwiseTernary, Arity::Fixed(3), K::Broadcast, FlopModel::OutputElements, vec![]);

        for (name, qn) in [
            ("Max", "torch.max"),
            ("Min", "torch.min"),
            ("Sum", "torch.sum"),
            ("Mean", "torch.mean"),
            ("ArgMax", "torch.argmax"),
            ("ArgMin", "torch.argmin"),
            ("Var", "torch.var"),
            ("Norm", "torch.norm"),
        ] {
            push(name, qn, Reduction, Arity::Fixed(1), K::Reduce, FlopModel::InputElements, vec![axis(), keepdim()]);
        }

        push("Matmul", "torch.matmul", Matrix, Arity::Fixed(2), K::Matmul, FlopModel::MatrixProduct, vec![]);
        push("Bmm", "torch.bmm", Matrix, Arity::Fixed(2), K::Bmm, FlopModel::MatrixProduct, vec![]);
        push("Transpose", "torch.transpose", Matrix, Arity::Fixed(1), K::Transpose, FlopModel::Zero, vec![]);
        push("Triu", "torch.triu", Matrix, Arity::Fixed(1), K::Triangular, FlopModel::Zero, vec![]);
        push("Tril", "torch.tril", Matrix, Arity::Fixed(1), K::Triangular, FlopModel::Zero, vec![]);

        for (name, qn) in [
            ("ReLU", "torch.relu"),
            ("LeakyReLU", "torch.nn.functional.leaky_relu"),
            ("Sigmoid", "torch.sigmoid"),
            ("Tanh", "torch.tanh"),
            ("Swish", "torch.nn.functional.silu"),
            ("GELU", "torch.nn.functional.gelu"),
            ("SELU", "torch.selu"),
            ("ELU", "torch.nn.functional.elu"),
            ("Hardsigmoid", "torch.nn.functional.hardsigmoid"),
            ("HardTanh", "torch.nn.functional.hardtanh"),
            ("Softplus", "torch.nn.functional.softplus"),
            ("Softsign", "torch.nn.functional.softsign"),
            ("LogSigmoid", "torch.nn.functional.logsigmoid"),
        ] {
            push(name, qn, UnaryActivation, Arity::Fixed(1), K::Unary, FlopModel::OutputElements, vec![]);
        }
        push(
            "Clamp",
            "torch.clamp",
            UnaryActivation,
            Arity::Fixed(1),
            K::Unary,
            FlopModel::OutputElements,
            vec![
                desc("min", AttrDomain::FloatChoice(domains::CLAMP_MIN.to_vec())),
                desc("max", AttrDomain::FloatChoice(domains::CLAMP_MAX.to_vec())),
            ],
        );

        push("Softmax", "torch.softmax", UnaryWithDim, Arity::Fixed(1), K::AlongDim, FlopModel::OutputElements, vec![axis()]);
        push("LogSoftmax", "torch.log_softmax", UnaryWithDim, Arity::Fixed(1), K::AlongDim, FlopModel::OutputElements, vec![axis()]);

        for (name, qn) in [("Cos", "torch.cos"), ("Sin", "torch.sin"), ("Exp2", "torch.exp2"), ("Abs", "torch.abs")] {
            push(name, qn, UnaryMath, Arity::Fixed(1), K::Unary, FlopModel::OutputElements, vec![]);
        }

        for (name, qn) in [("CumMax", "torch.cummax"), ("CumMin", "torch.cummin"), ("CumSum", "torch.cumsum")] {
            push(name, qn, Cumulative, Arity::Fixed(1), K::AlongDim, FlopModel::InputElements, vec![axis()]);
        }

        push("BatchNorm", "torch.nn.functional.batch_norm", Normalization, Arity::Fixed(1), K::BatchNorm, FlopModel::OutputElements, vec![]);
        push("LayerNorm", "torch.nn.functional.layer_norm", Normalization, Arity::Fixed(1), K::LayerNorm, FlopModel::OutputElements, vec![]);
        push(
            "GroupNorm",
            "torch.nn.functional.group_norm",
            Normalization,
            Arity::Fixed(1),
            K::GroupNorm,
            FlopModel::OutputElements,
            vec![desc("num_groups", AttrDomain::IntChoice(domains::GROUPS.to_vec()))],
        );
        push("InstanceNorm", "torch.nn.functional.instance_norm", Normalization, Arity::Fixed(1), K::InstanceNorm, FlopModel::OutputElements, vec![]);

        for (m, cat) in [(1u8, Pool1d), (2, Pool2d), (3, Pool3d)] {
            for kind in ["Avg", "Max"] {
                push(
                    &format!("{kind}Pool{m}d"),
                    &format!("torch.nn.functional.{}_pool{m}d", kind.to_lowercase()),
                    cat,
                    Arity::Fixed(1),
                    K::Pool { spatial: m },
                    FlopModel::Pooling,
                    vec![kernel(), int_range("stride", domains::STRIDE), int_range("padding", domains::PADDING)],
                );
            }
        }

        for (m, cat) in [(1u8, Conv1d), (2, Conv2d), (3, Conv3d)] {
            push(
                &format!("Conv{m}d"),
                &format!("torch.nn.functional.conv{m}d"),
                cat,
                Arity::Fixed(2),
                K::Conv { spatial: m },
                FlopModel::Convolution,
                conv_attrs(),
            );
        }
        for (m, cat) in [(1u8, ConvTranspose1d), (2, ConvTranspose2d), (3, ConvTranspose3d)] {
            push(
                &format!("ConvTranspose{m}d"),
                &format!("torch.nn.functional.conv_transpose{m}d"),
                cat,
                Arity::Fixed(2),
                K::ConvTranspose { spatial: m },
                FlopModel::TransposedConvolution,
                conv_attrs(),
            );
        }

        push("Cat", "torch.cat", Variadic, Arity::AtLeast(2), K::Cat, FlopModel::Zero, vec![axis()]);
        push("Stack", "torch.stack", Variadic, Arity::AtLeast(2), K::Stack, FlopModel::Zero, vec![]);

        let create_ops = [("Randn", "torch.randn"), ("Ones", "torch.ones"), ("Zeros", "torch.zeros")]
            .into_iter()
            .map(|(name, qn)| OperatorSpec {
                name: name.into(),
                qualified_name: qn.into(),
                category: Create,
                arity: Arity::Fixed(0),
                attr_schema: vec![],
                constraint_kind: None,
                flop_model: FlopModel::Zero,
                integer_output: false,
            })
            .collect();

        Catalog { compute_ops: compute, create_ops }
    }
}

fn desc(name: &str, domain: AttrDomain) -> AttrDescriptor {
    AttrDescriptor { name: name.into(), domain }
}

fn axis() -> AttrDescriptor {
    desc("dim", AttrDomain::Axis)
}

fn keepdim() -> AttrDescriptor {
    desc("keepdim", AttrDomain::Bool)
}

fn kernel() -> AttrDescriptor {
    int_range("kernel_size", domains::KERNEL)
}

fn int_range(name: &str, (min, max): (u32, u32)) -> AttrDescriptor {
    desc(name, AttrDomain::IntRange { min, max })
}

fn conv_attrs() -> Vec<AttrDescriptor> {
    vec![
        kernel(),
        int_range("stride", domains::STRIDE),
        int_range("padding", domains::PADDING),
        int_range("dilation", domains::DILATION),
        desc("groups", AttrDomain::IntChoice(domains::GROUPS.to_vec())),
    ]
}

fn uniform_index<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Result<usize, CatalogError> {
    if len == 0 {
        return Err(CatalogError::EmptySubset);
    }
    // u32 keeps the draw identical on 32- and 64-bit targets.
    Ok(rng.random_range(0..len as u32) as usize)
}

fn sample_uniform<'a, R: Rng + ?Sized>(rng: &mut R, pool: &'a [OperatorSpec]) -> Result<&'a OperatorSpec, CatalogError> {
    let idx = uniform_index(rng, pool.len())?;
    Ok(&pool[idx])
}

fn mismatch(spec: &OperatorSpec, reason: impl Into<String>) -> CatalogError {
    CatalogError::ShapeMismatch { op: spec.name.clone(), reason: reason.into() }
}

/// Operation count of one node under the operator's FLOP model. Saturates at `u64::MAX`.
pub fn flops_of(spec: &OperatorSpec, in_shapes: &[Shape], out_shape: &Shape, attrs: &Attrs) -> Result<u64, CatalogError> {
    if !spec.arity.accepts(in_shapes.len()) {
        return Err(mismatch(spec, format!("expected {:?} inputs, got {}", spec.arity, in_shapes.len())));
    }
    let out = out_shape.numel();
    let prod = |dims: &[u32]| dims.iter().fold(1u64, |a, &d| a.saturating_mul(u64::from(d)));
    let flops = match spec.flop_model {
        FlopModel::Zero => 0,
        FlopModel::OutputElements => out,
        FlopModel::InputElements => in_shapes[0].numel(),
        FlopModel::MatrixProduct => {
            let (a, b) = (&in_shapes[0], &in_shapes[1]);
            if a.order() < 2 || b.order() < 2 {
                return Err(mismatch(spec, "matrix operands need order >= 2"));
            }
            let k = a.dims()[a.order() - 1];
            if k != b.dims()[b.order() - 2] {
                return Err(mismatch(spec, format!("inner dims differ: {a} @ {b}")));
            }
            2u64.saturating_mul(out).saturating_mul(u64::from(k))
        }
        FlopModel::Convolution | FlopModel::TransposedConvolution => {
            let (x, w) = (&in_shapes[0], &in_shapes[1]);
            if w.order() < 3 || x.order() != w.order() {
                return Err(mismatch(spec, format!("input {x} and weight {w} orders disagree")));
            }
            let per_out = prod(&w.dims()[1..]);
            let base = if spec.flop_model == FlopModel::Convolution { out } else { x.numel() };
            2u64.saturating_mul(base).saturating_mul(per_out)
        }
        FlopModel::Pooling => {
            let kernel = attrs
                .kernel_size
                .as_ref()
                .ok_or_else(|| mismatch(spec, "pooling needs kernel_size"))?;
            out.saturating_mul(prod(kernel))
        }
    };
    Ok(flops)
}
