//! Randomized three-phase search: orders, structural choices, dimension sizes.

use std::collections::{BTreeMap, HashMap};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{Atom, Dom, Model, ModelBuilder, Rel};
use super::orders::{self, OrderBlock, OrderDom, OrderNet, ANY_ORDER, CREATE_ORDERS};
use super::{ConstraintSet, ShapeSolution, SolveError};
use crate::attrs::{domains, Attrs};
use crate::catalog::{flops_of, ConstraintKind, FlopModel};
use crate::shape::{Shape, MAX_DIM, MAX_ORDER};

/// Relative frequency of each order for created tensors.
const CREATE_ORDER_WEIGHTS: [u32; MAX_ORDER + 1] = [0, 3, 6, 6, 4, 2, 1, 1, 1];
/// Sampled sizes stay at or below this unless the domain forces larger values.
const SOFT_CAP: i64 = 4096;
/// Failures allowed in the shortest run; run `i` gets `luby(i)` times this.
const FAIL_UNIT: u64 = 64;

/// The Luby sequence 1, 1, 2, 1, 1, 2, 4, 1, ... (1-based).
fn luby(i: u64) -> u64 {
    let mut k = 1;
    while (1u64 << k) - 1 < i {
        k += 1;
    }
    if (1u64 << k) - 1 == i {
        1 << (k - 1)
    } else {
        luby(i - (1 << (k - 1)) + 1)
    }
}

/// Resolves edge indices and runs order propagation from the initial domains.
fn root_orders(cs: &ConstraintSet) -> Result<(Vec<BlockRef>, OrderNet, Vec<OrderDom>), SolveError> {
    let index: HashMap<_, _> = cs.edges.iter().enumerate().map(|(i, e)| (e.edge, i)).collect();
    let resolve = |e| index.get(&e).copied().ok_or_else(|| SolveError::Infeasible(format!("{e} has no variable")));
    let mut blocks = Vec::with_capacity(cs.blocks.len());
    for b in &cs.blocks {
        let inputs = b.inputs.iter().map(|&e| resolve(e)).collect::<Result<Vec<_>, _>>()?;
        blocks.push(BlockRef { inputs, output: resolve(b.output)? });
    }
    let net = OrderNet::new(
        cs.blocks
            .iter()
            .zip(&blocks)
            .map(|(b, r)| OrderBlock { kind: b.kind, inputs: r.inputs.clone(), output: r.output, keepdim: b.attrs.keepdim })
            .collect(),
        cs.edges.len(),
    );

    let mut dom: Vec<OrderDom> = cs.edges.iter().map(|e| if e.from_create { CREATE_ORDERS } else { ANY_ORDER }).collect();
    for (edge, shape) in &cs.pins {
        let i = resolve(*edge)?;
        // A pin overrides the default domain of create edges.
        dom[i] = orders::bit(shape.order());
    }
    if dom.contains(&0) || !net.propagate(&mut dom, net.all_blocks()) {
        return Err(SolveError::Infeasible("no consistent assignment of tensor orders".into()));
    }
    Ok((blocks, net, dom))
}

/// Whether order propagation alone leaves every edge with a candidate order.
pub(super) fn orders_consistent(cs: &ConstraintSet) -> bool {
    root_orders(cs).is_ok()
}

pub(super) fn run(cs: &ConstraintSet, seed: u64, budget: Duration, max_work: Option<u64>) -> Result<ShapeSolution, SolveError> {
    let (blocks, net, dom) = root_orders(cs)?;
    let mut search = Search {
        cs,
        blocks,
        net,
        rng: ChaCha8Rng::seed_from_u64(seed),
        fails: 0,
        limit: FAIL_UNIT,
        deadline: Instant::now() + budget,
        ticks: 0,
        max_work: max_work.unwrap_or(u64::MAX),
        abort: None,
    };
    for run in 1.. {
        search.limit = FAIL_UNIT.saturating_mul(luby(run));
        search.fails = 0;
        search.abort = None;
        if let Some(found) = search.orders(dom.clone()) {
            return Ok(search.extract(found));
        }
        match search.abort {
            None => return Err(SolveError::Infeasible("search space exhausted".into())),
            Some(Abort::Time) => return Err(SolveError::TimedOut(budget)),
            Some(Abort::Work) => return Err(SolveError::WorkExhausted(search.ticks)),
            Some(Abort::Limit) => {}
        }
    }
    unreachable!("restart loop only exits by returning")
}

struct BlockRef {
    inputs: Vec<usize>,
    output: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Abort {
    Limit,
    Time,
    Work,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum What {
    Dim,
    Stride,
    Padding,
    Dilation,
    Groups,
    /// Which operands are size 1 at an output position; bit i refers to the
    /// i-th operand present at that position.
    Pattern(usize),
}

struct Decision {
    block: usize,
    what: What,
    options: Vec<(u32, u32)>,
}

/// Atom numbering for one fixed order assignment.
struct Layout {
    orders: Vec<usize>,
    base: Vec<Atom>,
    aux: Vec<Atom>,
    atoms: usize,
}

impl Layout {
    fn dims(&self, e: usize) -> Vec<Atom> {
        (self.base[e]..self.base[e] + self.orders[e]).collect()
    }
}

enum Step {
    Found(Found),
    /// No solution below; the payload names the decision that must change
    /// next, `None` meaning none of them can help.
    Fail(Option<usize>),
}

struct Found {
    layout: Layout,
    decisions: Vec<Decision>,
    choices: Vec<u32>,
    class_of: Vec<usize>,
    values: Vec<i64>,
}

struct Search<'a> {
    cs: &'a ConstraintSet,
    blocks: Vec<BlockRef>,
    net: OrderNet,
    rng: ChaCha8Rng,
    fails: u64,
    limit: u64,
    deadline: Instant,
    ticks: u64,
    max_work: u64,
    abort: Option<Abort>,
}

fn aux_count(kind: ConstraintKind) -> usize {
    match kind {
        ConstraintKind::Conv { .. } | ConstraintKind::ConvTranspose { .. } | ConstraintKind::GroupNorm => 1,
        ConstraintKind::Pool { spatial } => spatial as usize,
        _ => 0,
    }
}

fn int_options(pin: Option<u32>, (lo, hi): (u32, u32)) -> Vec<(u32, u32)> {
    match pin {
        Some(v) if (lo..=hi).contains(&v) => vec![(v, 1)],
        Some(_) => vec![],
        None => (lo..=hi).map(|v| (v, 1)).collect(),
    }
}

fn choice_options(pin: Option<u32>, set: &[u32]) -> Vec<(u32, u32)> {
    match pin {
        Some(v) if set.contains(&v) => vec![(v, 1)],
        Some(_) => vec![],
        None => set.iter().map(|&v| (v, 1)).collect(),
    }
}

/// Masks over `k` operands with at least one operand left at full size;
/// "no operand is 1" is the common case and gets most of the weight.
fn pattern_options(k: usize) -> Vec<(u32, u32)> {
    let full = (1u32 << k) - 1;
    let others = full;
    (0..full).map(|m| (m, if m == 0 { 3 * others } else { 1 })).collect()
}

fn log_sample(rng: &mut ChaCha8Rng, lo: i64, hi: i64) -> i64 {
    let top = if lo <= SOFT_CAP { hi.min(SOFT_CAP) } else { hi };
    let bits = |v: i64| 64 - (v as u64).leading_zeros();
    let b = rng.random_range(bits(lo)..=bits(top));
    let from = lo.max(1i64 << (b - 1));
    let to = top.min((1i64 << b) - 1);
    rng.random_range(from..=to)
}

impl Search<'_> {
    fn fail(&mut self) {
        self.fails += 1;
        if self.fails >= self.limit && self.abort.is_none() {
            self.abort = Some(Abort::Limit);
        }
    }

    fn should_stop(&mut self) -> bool {
        self.ticks += 1;
        if self.ticks >= self.max_work {
            self.abort = Some(Abort::Work);
        } else if self.ticks.is_multiple_of(64) && Instant::now() >= self.deadline {
            self.abort = Some(Abort::Time);
        }
        self.abort.is_some()
    }

    fn weighted_order(&mut self, mut opts: Vec<(u32, u32)>) -> Vec<u32> {
        let mut out = Vec::with_capacity(opts.len());
        while !opts.is_empty() {
            let total: u32 = opts.iter().map(|o| o.1.max(1)).sum();
            let mut r = self.rng.random_range(0..total);
            let mut pick = 0;
            for (i, o) in opts.iter().enumerate() {
                let w = o.1.max(1);
                if r < w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            out.push(opts.remove(pick).0);
        }
        out
    }

    // ---- phase 1: orders --------------------------------------------------

    fn orders(&mut self, dom: Vec<OrderDom>) -> Option<Found> {
        let open = (0..dom.len())
            .filter(|&e| dom[e].count_ones() > 1)
            .min_by_key(|&e| (dom[e].count_ones(), e));
        let Some(e) = open else {
            let orders = dom.iter().map(|d| d.trailing_zeros() as usize).collect();
            return self.structure(orders);
        };
        let from_create = self.cs.edges[e].from_create;
        let opts = orders::values(dom[e])
            .map(|n| (n as u32, if from_create { CREATE_ORDER_WEIGHTS[n] } else { 1 }))
            .collect();
        for n in self.weighted_order(opts) {
            if self.should_stop() {
                return None;
            }
            let mut next = dom.clone();
            next[e] = orders::bit(n as usize);
            let seeds = self.net.blocks_of(e).to_vec();
            if self.net.propagate(&mut next, seeds) {
                let found = self.orders(next);
                if found.is_some() || self.abort.is_some() {
                    return found;
                }
            } else {
                self.fail();
            }
        }
        None
    }

    // ---- phase 2: structural choices --------------------------------------

    fn structure(&mut self, orders: Vec<usize>) -> Option<Found> {
        let mut base = Vec::with_capacity(orders.len());
        let mut next = 0;
        for &n in &orders {
            base.push(next);
            next += n;
        }
        let mut aux = Vec::with_capacity(self.blocks.len());
        for b in &self.cs.blocks {
            aux.push(next);
            next += aux_count(b.kind);
        }
        let layout = Layout { orders, base, aux, atoms: next };
        let decisions = self.decisions(&layout);
        let mut choices = vec![None; decisions.len()];

        let model = self.model(&layout, &decisions, &choices)?;
        let mut dom = model.init.clone();
        if !model.propagate(&mut dom, None) {
            self.fail();
            return None;
        }
        if decisions.is_empty() {
            let values = self.dims(&model, dom)?;
            return Some(Found { layout, decisions, choices: vec![], class_of: model.class_of, values });
        }
        match self.structure_step(&layout, &decisions, &mut choices, 0) {
            Step::Found(found) => Some(found),
            Step::Fail(_) => None,
        }
    }

    /// Chronological search over structural decisions with conflict-directed
    /// backjumping: when every option of decision `i` is refuted by
    /// propagation, the search returns to the last earlier decision needed
    /// for that refutation instead of the previous one.
    fn structure_step(&mut self, layout: &Layout, decisions: &[Decision], choices: &mut Vec<Option<u32>>, i: usize) -> Step {
        let order = self.weighted_order(decisions[i].options.clone());
        let mut refuted = true;
        for v in order {
            if self.should_stop() {
                return Step::Fail(None);
            }
            choices[i] = Some(v);
            let Some((model, dom)) = self.consistent(layout, decisions, choices) else {
                self.fail();
                continue;
            };
            refuted = false;
            if i + 1 == decisions.len() {
                if let Some(values) = self.dims(&model, dom) {
                    let layout = Layout {
                        orders: layout.orders.clone(),
                        base: layout.base.clone(),
                        aux: layout.aux.clone(),
                        atoms: layout.atoms,
                    };
                    let decisions = decisions
                        .iter()
                        .map(|d| Decision { block: d.block, what: d.what, options: vec![] })
                        .collect();
                    let choices = choices.iter().map(|c| c.expect("all decided")).collect();
                    return Step::Found(Found { layout, decisions, choices, class_of: model.class_of, values });
                }
            } else {
                match self.structure_step(layout, decisions, choices, i + 1) {
                    Step::Found(found) => return Step::Found(found),
                    Step::Fail(Some(to)) if to == i => {}
                    Step::Fail(to) => {
                        choices[i] = None;
                        return Step::Fail(to);
                    }
                }
            }
            if self.abort.is_some() {
                choices[i] = None;
                return Step::Fail(None);
            }
        }
        choices[i] = None;
        if !refuted || i == 0 {
            return Step::Fail(i.checked_sub(1));
        }
        Step::Fail(self.culprit(layout, decisions, choices, i))
    }

    /// The latest decision before `i` whose choice is needed to refute every
    /// option of `i`, or `None` if `i` fails with no earlier choices at all.
    /// Undecided choices are relaxations, so refutation is monotone in the
    /// length of the decided prefix.
    fn culprit(&self, layout: &Layout, decisions: &[Decision], choices: &mut [Option<u32>], i: usize) -> Option<usize> {
        let saved: Vec<Option<u32>> = choices[..i].to_vec();
        let refutes = |keep: usize, choices: &mut [Option<u32>]| {
            for (j, c) in choices[..i].iter_mut().enumerate() {
                *c = if j < keep { saved[j] } else { None };
            }
            let all_fail = decisions[i].options.iter().all(|&(v, _)| {
                choices[i] = Some(v);
                self.consistent(layout, decisions, choices).is_none()
            });
            choices[i] = None;
            all_fail
        };
        // Smallest prefix length that still refutes `i`; the full prefix does.
        let (mut lo, mut hi) = (0, i);
        while lo < hi {
            let mid = (lo + hi) / 2;
            if refutes(mid, choices) {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        choices[..i].copy_from_slice(&saved);
        lo.checked_sub(1)
    }

    /// The model for the current choices with its root propagation applied.
    fn consistent(&self, layout: &Layout, decisions: &[Decision], choices: &[Option<u32>]) -> Option<(Model, Vec<Dom>)> {
        let model = self.model(layout, decisions, choices)?;
        let mut dom = model.init.clone();
        model.propagate(&mut dom, None).then_some((model, dom))
    }

    fn decisions(&self, layout: &Layout) -> Vec<Decision> {
        let mut out = Vec::new();
        for (bi, (b, r)) in self.cs.blocks.iter().zip(&self.blocks).enumerate() {
            let mut add = |what, options| out.push(Decision { block: bi, what, options });
            let n_in = layout.orders[r.inputs[0]];
            let a = &b.attrs;
            match b.kind {
                ConstraintKind::Reduce | ConstraintKind::AlongDim | ConstraintKind::Cat => {
                    add(What::Dim, int_options(a.dim, (0, n_in.saturating_sub(1) as u32)));
                }
                ConstraintKind::Conv { .. } | ConstraintKind::ConvTranspose { .. } => {
                    add(What::Stride, int_options(a.stride, domains::STRIDE));
                    add(What::Padding, int_options(a.padding, domains::PADDING));
                    add(What::Dilation, int_options(a.dilation, domains::DILATION));
                    add(What::Groups, choice_options(a.groups, &domains::GROUPS));
                }
                ConstraintKind::Pool { .. } => {
                    add(What::Stride, int_options(a.stride, domains::STRIDE));
                    add(What::Padding, int_options(a.padding, domains::PADDING));
                }
                ConstraintKind::GroupNorm => add(What::Groups, choice_options(a.groups, &domains::GROUPS)),
                ConstraintKind::Broadcast => {
                    let n_out = layout.orders[r.output];
                    for pos in 0..n_out {
                        let present = r.inputs.iter().filter(|&&e| pos + layout.orders[e] >= n_out).count();
                        if present >= 2 {
                            add(What::Pattern(pos), pattern_options(present));
                        }
                    }
                }
                ConstraintKind::Matmul => {
                    let n_out = layout.orders[r.output];
                    let (na, nb) = (layout.orders[r.inputs[0]], layout.orders[r.inputs[1]]);
                    for pos in 0..n_out - 2 {
                        if pos + na >= n_out && pos + nb >= n_out {
                            add(What::Pattern(pos), pattern_options(2));
                        }
                    }
                }
                _ => {}
            }
        }
        out
    }

    // ---- model construction -----------------------------------------------

    fn model(&self, layout: &Layout, decisions: &[Decision], choices: &[Option<u32>]) -> Option<Model> {
        let mut bounds: Vec<Dom> = vec![(1, i64::from(MAX_DIM)); layout.atoms];
        for (bi, b) in self.cs.blocks.iter().enumerate() {
            for j in 0..aux_count(b.kind) {
                if matches!(b.kind, ConstraintKind::Pool { .. }) {
                    bounds[layout.aux[bi] + j] = (i64::from(domains::KERNEL.0), i64::from(domains::KERNEL.1));
                }
            }
        }
        let mut mb = ModelBuilder::new(bounds);
        for (edge, shape) in &self.cs.pins {
            let e = self.cs.edges.iter().position(|v| v.edge == *edge).expect("pinned edge resolved earlier");
            for (atom, &d) in layout.dims(e).into_iter().zip(shape.dims()) {
                mb.fix(atom, i64::from(d));
            }
        }

        let mut by_block: BTreeMap<usize, Vec<(What, Option<u32>)>> = BTreeMap::new();
        for (d, c) in decisions.iter().zip(choices) {
            by_block.entry(d.block).or_default().push((d.what, *c));
        }
        let none = Vec::new();
        for bi in 0..self.blocks.len() {
            let chosen = by_block.get(&bi).unwrap_or(&none);
            self.emit_block(&mut mb, layout, bi, chosen);
        }
        self.emit_globals(&mut mb, layout);
        mb.compile()
    }

    fn emit_block(&self, mb: &mut ModelBuilder, layout: &Layout, bi: usize, chosen: &[(What, Option<u32>)]) {
        let b = &self.cs.blocks[bi];
        let r = &self.blocks[bi];
        let get = |w: What| chosen.iter().find(|c| c.0 == w).and_then(|c| c.1);
        let x = layout.dims(r.inputs[0]);
        let c = layout.dims(r.output);
        let eq_all = |mb: &mut ModelBuilder, a: &[Atom], c: &[Atom]| {
            for (&p, &q) in a.iter().zip(c) {
                mb.eq(p, q);
            }
        };
        match b.kind {
            ConstraintKind::Broadcast => {
                let n_out = c.len();
                for (pos, &out) in c.iter().enumerate() {
                    let present: Vec<Atom> = r
                        .inputs
                        .iter()
                        .filter(|&&e| pos + layout.orders[e] >= n_out)
                        .map(|&e| layout.base[e] + pos + layout.orders[e] - n_out)
                        .collect();
                    broadcast_position(mb, &present, out, get(What::Pattern(pos)));
                }
            }
            ConstraintKind::Unary | ConstraintKind::AlongDim | ConstraintKind::Triangular | ConstraintKind::LayerNorm => {
                eq_all(mb, &x, &c);
            }
            ConstraintKind::BatchNorm => {
                eq_all(mb, &x, &c);
                let mut per_channel = vec![x[0]];
                per_channel.extend_from_slice(&x[2..]);
                mb.product(vec![(1, per_channel)], 2, u128::MAX);
            }
            ConstraintKind::InstanceNorm => {
                eq_all(mb, &x, &c);
                mb.product(vec![(1, x[2..].to_vec())], 2, u128::MAX);
            }
            ConstraintKind::GroupNorm => {
                eq_all(mb, &x, &c);
                if let Some(g) = get(What::Groups) {
                    mb.linear(vec![(x[1], 1), (layout.aux[bi], -i64::from(g))], 0, Rel::Eq);
                }
            }
            ConstraintKind::Reduce => {
                if let Some(d) = get(What::Dim) {
                    let d = d as usize;
                    if c.len() == x.len() {
                        for i in 0..x.len() {
                            if i == d {
                                mb.fix(c[i], 1);
                            } else {
                                mb.eq(x[i], c[i]);
                            }
                        }
                    } else {
                        let kept: Vec<Atom> = x.iter().enumerate().filter(|&(i, _)| i != d).map(|(_, &a)| a).collect();
                        eq_all(mb, &kept, &c);
                    }
                } else if c.len() == x.len() {
                    for i in 0..x.len() {
                        mb.le(c[i], x[i], 0);
                    }
                } else {
                    // Output position i keeps either input dim i or i + 1.
                    for i in 0..c.len() {
                        mb.linear(vec![(x[i], 1), (x[i + 1], 1), (c[i], -1)], -1, Rel::Ge);
                    }
                }
            }
            ConstraintKind::Matmul => {
                let y = layout.dims(r.inputs[1]);
                let (na, nb, n) = (x.len(), y.len(), c.len());
                mb.eq(x[na - 1], y[nb - 2]);
                mb.eq(c[n - 2], x[na - 2]);
                mb.eq(c[n - 1], y[nb - 1]);
                for pos in 0..n - 2 {
                    let mut present = Vec::new();
                    if pos + na >= n {
                        present.push(x[pos + na - n]);
                    }
                    if pos + nb >= n {
                        present.push(y[pos + nb - n]);
                    }
                    broadcast_position(mb, &present, c[pos], get(What::Pattern(pos)));
                }
            }
            ConstraintKind::Bmm => {
                let y = layout.dims(r.inputs[1]);
                mb.eq(x[0], y[0]);
                mb.eq(c[0], x[0]);
                mb.eq(x[2], y[1]);
                mb.eq(c[1], x[1]);
                mb.eq(c[2], y[2]);
            }
            ConstraintKind::Transpose => {
                let n = x.len();
                eq_all(mb, &x[..n - 2], &c[..n - 2]);
                mb.eq(c[n - 2], x[n - 1]);
                mb.eq(c[n - 1], x[n - 2]);
            }
            ConstraintKind::Conv { spatial } => {
                let w = layout.dims(r.inputs[1]);
                let q = layout.aux[bi];
                mb.eq(c[0], x[0]);
                mb.eq(c[1], w[0]);
                for j in 0..spatial as usize {
                    let k = w[2 + j];
                    mb.bound(k, i64::from(domains::KERNEL.0), i64::from(domains::KERNEL.1));
                    mb.le(k, x[2 + j], 0);
                }
                if let Some(ks) = &b.attrs.kernel_size {
                    pin_kernels(mb, &w[2..], ks);
                }
                let (s, p, d) = (range(get(What::Stride), domains::STRIDE), range(get(What::Padding), domains::PADDING), range(get(What::Dilation), domains::DILATION));
                match get(What::Groups) {
                    Some(g) => {
                        let g = i64::from(g);
                        mb.linear(vec![(x[1], 1), (w[1], -g)], 0, Rel::Eq);
                        mb.linear(vec![(w[0], 1), (q, -g)], 0, Rel::Eq);
                    }
                    None => group_range(mb, x[1], w[1]),
                }
                mb.linear(vec![(w[2], 1)], -2 * p.0, Rel::Ge);
                for j in 0..spatial as usize {
                    window(mb, x[2 + j], w[2 + j], c[2 + j], s, p, d);
                }
            }
            ConstraintKind::ConvTranspose { spatial } => {
                let w = layout.dims(r.inputs[1]);
                let q = layout.aux[bi];
                mb.eq(c[0], x[0]);
                mb.eq(x[1], w[0]);
                for j in 0..spatial as usize {
                    mb.bound(w[2 + j], i64::from(domains::KERNEL.0), i64::from(domains::KERNEL.1));
                }
                if let Some(ks) = &b.attrs.kernel_size {
                    pin_kernels(mb, &w[2..], ks);
                }
                let (s, p, d) = (range(get(What::Stride), domains::STRIDE), range(get(What::Padding), domains::PADDING), range(get(What::Dilation), domains::DILATION));
                match get(What::Groups) {
                    Some(g) => {
                        let g = i64::from(g);
                        mb.linear(vec![(x[1], 1), (q, -g)], 0, Rel::Eq);
                        mb.linear(vec![(c[1], 1), (w[1], -g)], 0, Rel::Eq);
                    }
                    None => group_range(mb, c[1], w[1]),
                }
                for j in 0..spatial as usize {
                    // out = s*(in - 1) - 2p + d*(k - 1) + 1, bounded over the undecided attributes.
                    let (xj, kj, cj) = (x[2 + j], w[2 + j], c[2 + j]);
                    mb.linear(vec![(xj, s.1), (kj, d.1), (cj, -1)], 1 - s.1 - 2 * p.0 - d.1, Rel::Ge);
                    mb.linear(vec![(cj, 1), (xj, -s.0), (kj, -d.0)], s.0 + 2 * p.1 + d.0 - 1, Rel::Ge);
                }
            }
            ConstraintKind::Pool { spatial } => {
                let m = spatial as usize;
                let kernels: Vec<Atom> = (0..m).map(|j| layout.aux[bi] + j).collect();
                mb.eq(c[0], x[0]);
                mb.eq(c[1], x[1]);
                if let Some(ks) = &b.attrs.kernel_size {
                    pin_kernels(mb, &kernels, ks);
                }
                let (s, p) = (range(get(What::Stride), domains::STRIDE), range(get(What::Padding), domains::PADDING));
                for j in 0..m {
                    mb.linear(vec![(kernels[j], 1)], -2 * p.0, Rel::Ge);
                    window(mb, x[2 + j], kernels[j], c[2 + j], s, p, (1, 1));
                    if b.spec.name == "AvgPool3d" {
                        mb.linear(vec![(x[2 + j], 1), (kernels[j], -1)], 0, Rel::Ge);
                    }
                }
            }
            ConstraintKind::Cat => {
                let ins: Vec<Vec<Atom>> = r.inputs.iter().map(|&e| layout.dims(e)).collect();
                match get(What::Dim) {
                    Some(d) => {
                        let d = d as usize;
                        for i in 0..c.len() {
                            if i == d {
                                let mut terms = vec![(c[i], 1)];
                                terms.extend(ins.iter().map(|v| (v[i], -1)));
                                mb.linear(terms, 0, Rel::Eq);
                            } else {
                                for v in &ins {
                                    mb.eq(v[i], c[i]);
                                }
                            }
                        }
                    }
                    None => {
                        for i in 0..c.len() {
                            for v in &ins {
                                mb.le(v[i], c[i], 0);
                            }
                            let mut terms = vec![(c[i], -1)];
                            terms.extend(ins.iter().map(|v| (v[i], 1)));
                            mb.linear(terms, 0, Rel::Ge);
                        }
                    }
                }
            }
            ConstraintKind::Stack => {
                mb.fix(c[0], r.inputs.len() as i64);
                for &e in &r.inputs {
                    eq_all(mb, &layout.dims(e), &c[1..]);
                }
            }
        }
    }

    fn emit_globals(&self, mb: &mut ModelBuilder, layout: &Layout) {
        let limits = &self.cs.limits;
        let mut numel = Vec::with_capacity(layout.orders.len());
        for e in 0..layout.orders.len() {
            let dims = layout.dims(e);
            if !dims.is_empty() && limits.min_size_tensor > 1 {
                mb.product(vec![(1, dims.clone())], u128::from(limits.min_size_tensor), u128::MAX);
            }
            numel.push((1u128, dims));
        }
        mb.product(numel, 0, u128::from(limits.max_size));

        let mut flops = Vec::new();
        for (bi, (b, r)) in self.cs.blocks.iter().zip(&self.blocks).enumerate() {
            let out = layout.dims(r.output);
            let x = layout.dims(r.inputs[0]);
            let with = |mut v: Vec<Atom>, extra: &[Atom]| {
                v.extend_from_slice(extra);
                v
            };
            match b.spec.flop_model {
                FlopModel::Zero => {}
                FlopModel::OutputElements => flops.push((1, out)),
                FlopModel::InputElements => flops.push((1, x)),
                FlopModel::MatrixProduct => {
                    let k = *x.last().expect("matrix operand has order >= 2");
                    flops.push((2, with(out, &[k])));
                }
                FlopModel::Convolution => {
                    let w = layout.dims(r.inputs[1]);
                    flops.push((2, with(out, &w[1..])));
                }
                FlopModel::TransposedConvolution => {
                    let w = layout.dims(r.inputs[1]);
                    flops.push((2, with(x, &w[1..])));
                }
                FlopModel::Pooling => {
                    let kernels: Vec<Atom> = (0..aux_count(b.kind)).map(|j| layout.aux[bi] + j).collect();
                    flops.push((1, with(out, &kernels)));
                }
            }
        }
        let lo = if self.cs.enforce_min_flops { u128::from(limits.min_flops) } else { 0 };
        mb.product(flops, lo, u128::from(limits.max_flops));
    }

    // ---- phase 3: dimension sizes -----------------------------------------

    fn dims(&mut self, model: &Model, root: Vec<Dom>) -> Option<Vec<i64>> {
        let priority: Vec<u32> = (0..model.classes()).map(|_| self.rng.random()).collect();
        struct Frame {
            dom: Vec<Dom>,
            var: usize,
            branches: Vec<Dom>,
            next: usize,
        }
        let mut stack: Vec<Frame> = Vec::new();
        let mut current = Some(root);
        loop {
            if let Some(dom) = current.take() {
                let open = (0..dom.len())
                    .filter(|&v| dom[v].0 < dom[v].1)
                    .min_by_key(|&v| (dom[v].1 - dom[v].0, priority[v]));
                match open {
                    None => {
                        let values: Vec<i64> = dom.iter().map(|d| d.0).collect();
                        if model.satisfied(&values) {
                            return Some(values);
                        }
                        self.fail();
                    }
                    Some(var) => {
                        let (lo, hi) = dom[var];
                        let v = log_sample(&mut self.rng, lo, hi);
                        let mut branches = vec![(v, v)];
                        let mut rest = Vec::new();
                        if v > lo {
                            rest.push((lo, v - 1));
                        }
                        if v < hi {
                            rest.push((v + 1, hi));
                        }
                        if rest.len() == 2 && self.rng.random_bool(0.5) {
                            rest.swap(0, 1);
                        }
                        branches.extend(rest);
                        stack.push(Frame { dom, var, branches, next: 0 });
                    }
                }
            }
            loop {
                if self.should_stop() {
                    return None;
                }
                let top = stack.last_mut()?;
                if top.next == top.branches.len() {
                    stack.pop();
                    continue;
                }
                let range = top.branches[top.next];
                top.next += 1;
                let mut dom = top.dom.clone();
                dom[top.var] = range;
                let var = top.var;
                if model.propagate(&mut dom, Some(&[var])) {
                    current = Some(dom);
                    break;
                }
                self.fail();
            }
        }
    }

    // ---- solution -----------------------------------------------------------

    fn extract(&self, found: Found) -> ShapeSolution {
        let Found { layout, decisions, choices, class_of, values } = found;
        let value = |a: Atom| values[class_of[a]];
        let mut shapes = BTreeMap::new();
        for (e, var) in self.cs.edges.iter().enumerate() {
            let dims = layout.dims(e).into_iter().map(|a| value(a) as u32).collect::<Vec<_>>();
            shapes.insert(var.edge, Shape(dims));
        }
        let mut attrs_out = BTreeMap::new();
        let mut total_flops = 0u64;
        for (bi, (b, r)) in self.cs.blocks.iter().zip(&self.blocks).enumerate() {
            let mut attrs: Attrs = b.attrs.clone();
            for (d, &v) in decisions.iter().zip(&choices) {
                if d.block != bi {
                    continue;
                }
                match d.what {
                    What::Dim => attrs.dim = Some(v),
                    What::Stride => attrs.stride = Some(v),
                    What::Padding => attrs.padding = Some(v),
                    What::Dilation => attrs.dilation = Some(v),
                    What::Groups => attrs.groups = Some(v),
                    What::Pattern(_) => {}
                }
            }
            match b.kind {
                ConstraintKind::Reduce => attrs.keepdim = Some(layout.orders[r.output] == layout.orders[r.inputs[0]]),
                ConstraintKind::Conv { .. } | ConstraintKind::ConvTranspose { .. } => {
                    let w = layout.dims(r.inputs[1]);
                    attrs.kernel_size = Some(w[2..].iter().map(|&a| value(a) as u32).collect());
                }
                ConstraintKind::Pool { spatial } => {
                    attrs.kernel_size = Some((0..spatial as usize).map(|j| value(layout.aux[bi] + j) as u32).collect());
                }
                _ => {}
            }
            let ins: Vec<Shape> = b.inputs.iter().map(|e| shapes[e].clone()).collect();
            let flops = flops_of(&b.spec, &ins, &shapes[&b.output], &attrs).unwrap_or(u64::MAX);
            total_flops = total_flops.saturating_add(flops);
            attrs_out.insert(b.node, attrs);
        }
        let total_numel = shapes.values().fold(0u64, |acc, s| acc.saturating_add(s.numel()));
        ShapeSolution { shapes, attrs: attrs_out, total_flops, total_numel }
    }
}

/// One right-aligned broadcast position. `pattern` marks operands forced to
/// size 1; the rest equal the output. Undecided positions only bound operands
/// by the output.
fn broadcast_position(mb: &mut ModelBuilder, present: &[Atom], out: Atom, pattern: Option<u32>) {
    match pattern {
        _ if present.len() == 1 => mb.eq(present[0], out),
        None => mb.broadcast(present.to_vec(), out),
        Some(mask) => {
            for (i, &a) in present.iter().enumerate() {
                if mask & (1 << i) != 0 {
                    mb.fix(a, 1);
                } else {
                    mb.eq(a, out);
                }
            }
        }
    }
}

/// A decided attribute, or the whole domain while it is open.
fn range(v: Option<u32>, (lo, hi): (u32, u32)) -> (i64, i64) {
    match v {
        Some(v) => (i64::from(v), i64::from(v)),
        None => (i64::from(lo), i64::from(hi)),
    }
}

/// `wide = g * narrow` for some group count `g` not yet chosen.
fn group_range(mb: &mut ModelBuilder, wide: Atom, narrow: Atom) {
    let g_min = i64::from(*domains::GROUPS.iter().min().expect("groups domain is non-empty"));
    let g_max = i64::from(*domains::GROUPS.iter().max().expect("groups domain is non-empty"));
    mb.linear(vec![(wide, 1), (narrow, -g_min)], 0, Rel::Ge);
    mb.linear(vec![(narrow, g_max), (wide, -1)], 0, Rel::Ge);
}

/// `out = floor((x + 2p - d*(k - 1) - 1) / s) + 1` as two linear inequalities,
/// each taken at the loosest end of the stride, padding and dilation ranges.
/// With every range a single value the pair is exact.
fn window(mb: &mut ModelBuilder, x: Atom, k: Atom, out: Atom, s: (i64, i64), p: (i64, i64), d: (i64, i64)) {
    // s*(out - 1) <= x + 2p - d*k + d - 1
    mb.linear(vec![(x, 1), (k, -d.0), (out, -s.0)], 2 * p.1 + d.0 - 1 + s.0, Rel::Ge);
    // x + 2p - d*k + d - 1 <= s*out - 1
    mb.linear(vec![(out, s.1), (x, -1), (k, d.1)], -2 * p.0 - d.1, Rel::Ge);
}

fn pin_kernels(mb: &mut ModelBuilder, atoms: &[Atom], ks: &[u32]) {
    if ks.len() != atoms.len() {
        // Wrong arity cannot be satisfied; an empty domain says so.
        if let Some(&a) = atoms.first() {
            mb.bound(a, 1, 0);
        }
        return;
    }
    for (&a, &k) in atoms.iter().zip(ks) {
        mb.fix(a, i64::from(k));
    }
}
