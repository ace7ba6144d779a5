//! Integer interval model over dimension sizes.
//!
//! Atoms are the raw unknowns (one per tensor dimension plus auxiliary
//! quotients and kernel sizes). Equalities are merged up front with a
//! union-find, so propagation runs over equivalence classes. Two propagator
//! families cover every rule: linear constraints (`= 0` or `>= 0`) with integer
//! coefficients, and bounded sums of monomials with nonnegative coefficients
//! (element counts and FLOPs), plus a broadcast relation (`out` is the largest
//! operand and every operand is 1 or `out`). Propagation is bounds consistency.

use std::collections::BTreeMap;

pub(super) type Atom = usize;
pub(super) type Dom = (i64, i64);

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub(super) enum Rel {
    Eq,
    Ge,
}

struct LinearSpec {
    terms: Vec<(Atom, i64)>,
    constant: i64,
    rel: Rel,
}

struct ProductSpec {
    monos: Vec<(u128, Vec<Atom>)>,
    lo: u128,
    hi: u128,
}

pub(super) struct ModelBuilder {
    bounds: Vec<Dom>,
    eqs: Vec<(Atom, Atom)>,
    linears: Vec<LinearSpec>,
    products: Vec<ProductSpec>,
    broadcasts: Vec<(Vec<Atom>, Atom)>,
}

impl ModelBuilder {
    pub fn new(bounds: Vec<Dom>) -> Self {
        ModelBuilder { bounds, eqs: Vec::new(), linears: Vec::new(), products: Vec::new(), broadcasts: Vec::new() }
    }

    pub fn bound(&mut self, a: Atom, lo: i64, hi: i64) {
        let d = &mut self.bounds[a];
        d.0 = d.0.max(lo);
        d.1 = d.1.min(hi);
    }

    pub fn fix(&mut self, a: Atom, v: i64) {
        self.bound(a, v, v);
    }

    pub fn eq(&mut self, a: Atom, b: Atom) {
        if a != b {
            self.eqs.push((a, b));
        }
    }

    /// `sum(c * x) + constant` related to zero by `rel`.
    pub fn linear(&mut self, terms: Vec<(Atom, i64)>, constant: i64, rel: Rel) {
        self.linears.push(LinearSpec { terms, constant, rel });
    }

    /// `a <= b + offset`.
    pub fn le(&mut self, a: Atom, b: Atom, offset: i64) {
        self.linear(vec![(b, 1), (a, -1)], offset, Rel::Ge);
    }

    /// `lo <= sum(coef * prod(atoms)) <= hi`.
    pub fn product(&mut self, monos: Vec<(u128, Vec<Atom>)>, lo: u128, hi: u128) {
        self.products.push(ProductSpec { monos, lo, hi });
    }

    /// Every operand is 1 or equal to `out`, and `out` is the largest operand.
    pub fn broadcast(&mut self, operands: Vec<Atom>, out: Atom) {
        self.broadcasts.push((operands, out));
    }

    /// Merges equalities and maps every constraint onto classes. Returns `None`
    /// when a contradiction is already visible.
    pub fn compile(self) -> Option<Model> {
        let n = self.bounds.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for &(a, b) in &self.eqs {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                parent[ra.max(rb)] = ra.min(rb);
            }
        }
        let mut class_of = vec![usize::MAX; n];
        let mut roots: Vec<usize> = Vec::new();
        let mut dom: Vec<Dom> = Vec::new();
        for a in 0..n {
            let r = find(&mut parent, a);
            if class_of[r] == usize::MAX {
                class_of[r] = roots.len();
                roots.push(r);
                dom.push((i64::MIN, i64::MAX));
            }
            let c = class_of[r];
            class_of[a] = c;
            dom[c].0 = dom[c].0.max(self.bounds[a].0);
            dom[c].1 = dom[c].1.min(self.bounds[a].1);
        }
        if dom.iter().any(|d| d.0 > d.1) {
            return None;
        }

        let mut props = Vec::new();
        for lin in self.linears {
            let mut acc: BTreeMap<usize, i128> = BTreeMap::new();
            for (a, c) in lin.terms {
                *acc.entry(class_of[a]).or_default() += i128::from(c);
            }
            let terms: Vec<(usize, i128)> = acc.into_iter().filter(|&(_, c)| c != 0).collect();
            let k = i128::from(lin.constant);
            if terms.is_empty() {
                let ok = match lin.rel {
                    Rel::Eq => k == 0,
                    Rel::Ge => k >= 0,
                };
                if !ok {
                    return None;
                }
                continue;
            }
            props.push(Prop::Linear { terms, k, eq: lin.rel == Rel::Eq });
        }
        for p in self.products {
            let monos: Vec<Mono> = p
                .monos
                .into_iter()
                .map(|(coef, atoms)| {
                    let mut acc: BTreeMap<usize, u32> = BTreeMap::new();
                    for a in atoms {
                        *acc.entry(class_of[a]).or_default() += 1;
                    }
                    Mono { coef, vars: acc.into_iter().collect() }
                })
                .collect();
            let mut occ: BTreeMap<usize, Vec<(usize, u32)>> = BTreeMap::new();
            for (m, mono) in monos.iter().enumerate() {
                for &(v, e) in &mono.vars {
                    occ.entry(v).or_default().push((m, e));
                }
            }
            props.push(Prop::Product { monos, lo: p.lo, hi: p.hi, occ: occ.into_iter().collect() });
        }

        for (operands, out) in self.broadcasts {
            let out = class_of[out];
            let mut ops: Vec<usize> = operands.into_iter().map(|a| class_of[a]).collect();
            ops.sort_unstable();
            ops.dedup();
            props.push(Prop::Broadcast { ops, out });
        }

        let mut watch = vec![Vec::new(); dom.len()];
        for (i, p) in props.iter().enumerate() {
            for v in p.vars() {
                watch[v].push(i);
            }
        }
        Some(Model { class_of, init: dom, props, watch })
    }
}

struct Mono {
    coef: u128,
    vars: Vec<(usize, u32)>,
}

enum Prop {
    Linear { terms: Vec<(usize, i128)>, k: i128, eq: bool },
    Product { monos: Vec<Mono>, lo: u128, hi: u128, occ: Vec<(usize, Vec<(usize, u32)>)> },
    Broadcast { ops: Vec<usize>, out: usize },
}

impl Prop {
    fn vars(&self) -> Vec<usize> {
        match self {
            Prop::Linear { terms, .. } => terms.iter().map(|t| t.0).collect(),
            Prop::Product { occ, .. } => occ.iter().map(|o| o.0).collect(),
            Prop::Broadcast { ops, out } => ops.iter().copied().chain(std::iter::once(*out)).collect(),
        }
    }
}

pub(super) struct Model {
    pub class_of: Vec<usize>,
    pub init: Vec<Dom>,
    props: Vec<Prop>,
    watch: Vec<Vec<usize>>,
}

/// Propagator executions allowed per call, per propagator, before giving up
/// on the fixpoint. Stopping early is sound; leaves are checked exactly.
/// Cycles of inequalities can otherwise creep towards a contradiction one
/// unit per round.
const STEPS_PER_PROP: usize = 32;
const MIN_STEPS: usize = 2048;

impl Model {
    pub fn classes(&self) -> usize {
        self.init.len()
    }

    /// Bounds propagation to a fixpoint. `seed` lists the classes whose
    /// domains changed; `None` runs every propagator. Returns false on a wipeout.
    pub fn propagate(&self, dom: &mut [Dom], seed: Option<&[usize]>) -> bool {
        let mut queued = vec![false; self.props.len()];
        let mut queue: Vec<usize> = Vec::new();
        let push = |p: usize, queued: &mut Vec<bool>, queue: &mut Vec<usize>| {
            if !queued[p] {
                queued[p] = true;
                queue.push(p);
            }
        };
        match seed {
            None => (0..self.props.len()).for_each(|p| push(p, &mut queued, &mut queue)),
            Some(vars) => {
                for &v in vars {
                    for &p in &self.watch[v] {
                        push(p, &mut queued, &mut queue);
                    }
                }
            }
        }
        let mut changed = Vec::new();
        let mut steps = 0;
        let cap = (self.props.len() * STEPS_PER_PROP).max(MIN_STEPS);
        // FIFO keeps propagation fair between long chains.
        let mut head = 0;
        while head < queue.len() {
            let p = queue[head];
            head += 1;
            queued[p] = false;
            steps += 1;
            if steps > cap {
                return true;
            }
            changed.clear();
            if !self.run(p, dom, &mut changed) {
                return false;
            }
            for &v in &changed {
                for &q in &self.watch[v] {
                    push(q, &mut queued, &mut queue);
                }
            }
            if head > 4096 && head * 2 > queue.len() {
                queue.drain(..head);
                head = 0;
            }
        }
        true
    }

    /// Exact evaluation of every constraint on fixed values.
    pub fn satisfied(&self, vals: &[i64]) -> bool {
        self.props.iter().all(|p| match p {
            Prop::Linear { terms, k, eq } => {
                let s: i128 = k + terms.iter().map(|&(v, c)| c * i128::from(vals[v])).sum::<i128>();
                if *eq {
                    s == 0
                } else {
                    s >= 0
                }
            }
            Prop::Product { monos, lo, hi, .. } => {
                let s = monos.iter().fold(0u128, |acc, m| acc.saturating_add(mono_value(m, |v| vals[v])));
                *lo <= s && s <= *hi
            }
            Prop::Broadcast { ops, out } => {
                let o = vals[*out];
                ops.iter().all(|&v| vals[v] == 1 || vals[v] == o) && ops.iter().map(|&v| vals[v]).max() == Some(o)
            }
        })
    }

    fn run(&self, p: usize, dom: &mut [Dom], changed: &mut Vec<usize>) -> bool {
        match &self.props[p] {
            Prop::Linear { terms, k, eq } => {
                if !linear_ge(terms, *k, 1, dom, changed) {
                    return false;
                }
                !*eq || linear_ge(terms, *k, -1, dom, changed)
            }
            Prop::Product { monos, lo, hi, occ } => product_upper(monos, *hi, occ, dom, changed) && product_lower(monos, *lo, occ, dom, changed),
            Prop::Broadcast { ops, out } => broadcast(ops, *out, dom, changed),
        }
    }
}

fn floor_div(a: i128, b: i128) -> i128 {
    let q = a / b;
    if a % b != 0 && ((a < 0) != (b < 0)) {
        q - 1
    } else {
        q
    }
}

fn ceil_div(a: i128, b: i128) -> i128 {
    -floor_div(-a, b)
}

fn clamp64(v: i128) -> i64 {
    v.clamp(i128::from(i64::MIN), i128::from(i64::MAX)) as i64
}

fn set_lo(dom: &mut [Dom], v: usize, lo: i128, changed: &mut Vec<usize>) -> bool {
    let lo = clamp64(lo);
    if lo > dom[v].0 {
        if lo > dom[v].1 {
            return false;
        }
        dom[v].0 = lo;
        changed.push(v);
    }
    true
}

fn set_hi(dom: &mut [Dom], v: usize, hi: i128, changed: &mut Vec<usize>) -> bool {
    let hi = clamp64(hi);
    if hi < dom[v].1 {
        if hi < dom[v].0 {
            return false;
        }
        dom[v].1 = hi;
        changed.push(v);
    }
    true
}

/// `sign * (sum(c * x) + k) >= 0`.
fn linear_ge(terms: &[(usize, i128)], k: i128, sign: i128, dom: &mut [Dom], changed: &mut Vec<usize>) -> bool {
    let contrib = |c: i128, d: Dom| if c > 0 { c * i128::from(d.1) } else { c * i128::from(d.0) };
    let max_sum: i128 = sign * k + terms.iter().map(|&(v, c)| contrib(sign * c, dom[v])).sum::<i128>();
    if max_sum < 0 {
        return false;
    }
    for &(v, c) in terms {
        let c = sign * c;
        // c * x >= -(max_sum - contribution of x at its best)
        let need = -(max_sum - contrib(c, dom[v]));
        let ok = if c > 0 { set_lo(dom, v, ceil_div(need, c), changed) } else { set_hi(dom, v, floor_div(need, c), changed) };
        if !ok {
            return false;
        }
    }
    true
}

fn broadcast(ops: &[usize], out: usize, dom: &mut [Dom], changed: &mut Vec<usize>) -> bool {
    let max_lo = ops.iter().map(|&v| dom[v].0).max().unwrap_or(1);
    let max_hi = ops.iter().map(|&v| dom[v].1).max().unwrap_or(1);
    if !set_lo(dom, out, i128::from(max_lo), changed) || !set_hi(dom, out, i128::from(max_hi), changed) {
        return false;
    }
    for &v in ops {
        if v == out {
            continue;
        }
        if dom[v].0 >= 2 {
            // Not 1, so it is the output size.
            let (lo, hi) = (dom[v].0.max(dom[out].0), dom[v].1.min(dom[out].1));
            for c in [v, out] {
                if !set_lo(dom, c, i128::from(lo), changed) || !set_hi(dom, c, i128::from(hi), changed) {
                    return false;
                }
            }
        } else {
            let hi = if dom[out].0 >= 2 && dom[v].1 < dom[out].0 { 1 } else { dom[out].1 };
            if !set_hi(dom, v, i128::from(hi), changed) {
                return false;
            }
        }
    }
    let target = dom[out].0;
    if target >= 2 {
        // Some operand must reach the output size.
        let mut able = ops.iter().filter(|&&v| v == out || dom[v].1 >= target);
        match (able.next(), able.next()) {
            (None, _) => return false,
            (Some(&v), None) if v != out
                && !set_lo(dom, v, i128::from(target), changed) => {
                    return false;
                }
            _ => {}
        }
    }
    true
}

fn pow_sat(base: u128, exp: u32) -> u128 {
    (0..exp).fold(1u128, |acc, _| acc.saturating_mul(base))
}

fn mono_value(m: &Mono, val: impl Fn(usize) -> i64) -> u128 {
    m.vars.iter().fold(m.coef, |acc, &(v, e)| acc.saturating_mul(pow_sat(val(v) as u128, e)))
}

/// Value of `m` with `skip` removed, other classes taken at `pick`.
fn mono_without(m: &Mono, skip: usize, pick: impl Fn(usize) -> i64) -> u128 {
    m.vars
        .iter()
        .filter(|&&(v, _)| v != skip)
        .fold(m.coef, |acc, &(v, e)| acc.saturating_mul(pow_sat(pick(v) as u128, e)))
}

fn eval_part(parts: &[(u128, u32)], x: u128) -> u128 {
    parts.iter().fold(0u128, |acc, &(w, e)| acc.saturating_add(w.saturating_mul(pow_sat(x, e))))
}

fn product_upper(monos: &[Mono], hi: u128, occ: &[(usize, Vec<(usize, u32)>)], dom: &mut [Dom], changed: &mut Vec<usize>) -> bool {
    if hi == u128::MAX {
        return true;
    }
    let mins: Vec<u128> = monos.iter().map(|m| mono_value(m, |v| dom[v].0)).collect();
    let total = mins.iter().fold(0u128, |a, &b| a.saturating_add(b));
    if total > hi {
        return false;
    }
    for (x, list) in occ {
        let x = *x;
        let own: u128 = list.iter().map(|&(m, _)| mins[m]).sum();
        let budget = hi - (total - own);
        let parts: Vec<(u128, u32)> = list.iter().map(|&(m, e)| (mono_without(&monos[m], x, |v| dom[v].0), e)).collect();
        let (lo_x, hi_x) = (dom[x].0 as u128, dom[x].1 as u128);
        let best = if parts.iter().all(|&(_, e)| e == 1) {
            let a: u128 = parts.iter().map(|p| p.0).sum();
            budget / a.max(1)
        } else {
            // largest v with eval_part(v) <= budget; holds at lo_x
            let (mut l, mut h) = (lo_x, hi_x);
            while l < h {
                let mid = l + (h - l).div_ceil(2);
                if eval_part(&parts, mid) <= budget {
                    l = mid;
                } else {
                    h = mid - 1;
                }
            }
            l
        };
        if best < hi_x && !set_hi(dom, x, best as i128, changed) {
            return false;
        }
    }
    true
}

fn product_lower(monos: &[Mono], lo: u128, occ: &[(usize, Vec<(usize, u32)>)], dom: &mut [Dom], changed: &mut Vec<usize>) -> bool {
    if lo == 0 {
        return true;
    }
    let maxs: Vec<u128> = monos.iter().map(|m| mono_value(m, |v| dom[v].1)).collect();
    let total = maxs.iter().fold(0u128, |a, &b| a.saturating_add(b));
    if total < lo {
        return false;
    }
    for (x, list) in occ {
        let x = *x;
        let rest = if total == u128::MAX {
            maxs.iter()
                .enumerate()
                .filter(|(m, _)| !list.iter().any(|&(lm, _)| lm == *m))
                .fold(0u128, |a, (_, &b)| a.saturating_add(b))
        } else {
            total - list.iter().map(|&(m, _)| maxs[m]).sum::<u128>()
        };
        if rest >= lo {
            continue;
        }
        let need = lo - rest;
        let parts: Vec<(u128, u32)> = list.iter().map(|&(m, e)| (mono_without(&monos[m], x, |v| dom[v].1), e)).collect();
        let (lo_x, hi_x) = (dom[x].0 as u128, dom[x].1 as u128);
        let least = if parts.iter().all(|&(_, e)| e == 1) {
            let a = parts.iter().fold(0u128, |acc, p| acc.saturating_add(p.0));
            need.div_ceil(a.max(1))
        } else {
            // smallest v with eval_part(v) >= need; holds at hi_x
            let (mut l, mut h) = (lo_x, hi_x);
            while l < h {
                let mid = l + (h - l) / 2;
                if eval_part(&parts, mid) >= need {
                    h = mid;
                } else {
                    l = mid + 1;
                }
            }
            l
        };
        if least > lo_x && !set_lo(dom, x, least.min(i128::MAX as u128) as i128, changed) {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    fn free(n: usize) -> Vec<Dom> {
        vec![(1, 32768); n]
    }

    #[test]
    fn equalities_merge_and_fix() {
        let mut b = ModelBuilder::new(free(3));
        b.eq(0, 1);
        b.fix(1, 7);
        let m = b.compile().unwrap();
        assert_eq!(m.classes(), 2);
        assert_eq!(m.init[m.class_of[0]], (7, 7));
    }

    #[test]
    fn conflicting_fixes_fail_at_compile() {
        let mut b = ModelBuilder::new(free(2));
        b.eq(0, 1);
        b.fix(0, 3);
        b.fix(1, 4);
        assert!(b.compile().is_none());
    }

    #[test]
    fn linear_window_propagates() {
        // out = in - 4 written as two inequalities with stride 1
        let mut b = ModelBuilder::new(free(2));
        b.linear(vec![(0, 1), (1, -1)], -4, Rel::Eq);
        b.fix(0, 32);
        let m = b.compile().unwrap();
        let mut dom = m.init.clone();
        assert!(m.propagate(&mut dom, None));
        assert_eq!(dom[m.class_of[1]], (28, 28));
    }

    #[test]
    fn product_bounds_prune_both_ways() {
        // 100 <= x * y <= 200 with x fixed at 10
        let mut b = ModelBuilder::new(free(2));
        b.product(vec![(1, vec![0, 1])], 100, 200);
        b.fix(0, 10);
        let m = b.compile().unwrap();
        let mut dom = m.init.clone();
        assert!(m.propagate(&mut dom, None));
        assert_eq!(dom[m.class_of[1]], (10, 20));
    }

    #[test]
    fn squared_terms_use_search() {
        // x * x <= 50 -> x <= 7
        let mut b = ModelBuilder::new(free(2));
        b.eq(0, 1);
        b.product(vec![(1, vec![0, 1])], 0, 50);
        let m = b.compile().unwrap();
        let mut dom = m.init.clone();
        assert!(m.propagate(&mut dom, None));
        assert_eq!(dom[0], (1, 7));
    }

    #[test]
    fn infeasible_sum_is_detected() {
        let mut b = ModelBuilder::new(free(2));
        b.product(vec![(1, vec![0]), (1, vec![1])], 0, 1);
        let m = b.compile().unwrap();
        let mut dom = m.init.clone();
        assert!(!m.propagate(&mut dom, None));
    }

    #[test]
    fn broadcast_relation_propagates() {
        // out fixed at 4; operand 0 fixed at 4; operand 1 can only be 1 or 4.
        let mut b = ModelBuilder::new(free(3));
        b.broadcast(vec![0, 1], 2);
        b.fix(2, 4);
        b.bound(1, 1, 3);
        let m = b.compile().unwrap();
        let mut dom = m.init.clone();
        assert!(m.propagate(&mut dom, None));
        assert_eq!(dom[m.class_of[1]], (1, 1));
        assert_eq!(dom[m.class_of[0]], (4, 4));
        assert!(m.satisfied(&[4, 1, 4]));
        assert!(!m.satisfied(&[4, 2, 4]));
        assert!(!m.satisfied(&[1, 1, 4]));
    }

    #[test]
    fn exact_check() {
        let mut b = ModelBuilder::new(free(2));
        b.le(0, 1, -1);
        let m = b.compile().unwrap();
        assert!(m.satisfied(&[3, 4]));
        assert!(!m.satisfied(&[4, 4]));
    }
}
