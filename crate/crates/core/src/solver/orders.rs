//! Tensor-order relations and arc consistency over order domains.
//!
//! An order domain is a bitmask over orders `0..=MAX_ORDER`.

use crate::catalog::ConstraintKind;
use crate::shape::MAX_ORDER;

pub(super) type OrderDom = u16;

pub(super) const ANY_ORDER: OrderDom = (1 << (MAX_ORDER + 1)) - 1;
/// Created tensors have at least one dimension.
pub(super) const CREATE_ORDERS: OrderDom = ANY_ORDER & !1;

pub(super) fn bit(n: usize) -> OrderDom {
    if n <= MAX_ORDER {
        1 << n
    } else {
        0
    }
}

pub(super) fn values(dom: OrderDom) -> impl Iterator<Item = usize> {
    (0..=MAX_ORDER).filter(move |&n| dom & (1 << n) != 0)
}

/// Output orders allowed for the given input orders; empty when the inputs
/// themselves violate the rule.
pub(super) fn out_orders(kind: ConstraintKind, ins: &[usize], keepdim: Option<bool>) -> OrderDom {
    use ConstraintKind as K;
    let a = ins[0];
    match kind {
        K::Broadcast => bit(ins.iter().copied().max().unwrap_or(0)),
        K::Unary => bit(a),
        K::Reduce if a >= 1 => match keepdim {
            Some(true) => bit(a),
            Some(false) => bit(a - 1),
            None => bit(a) | bit(a - 1),
        },
        K::AlongDim | K::LayerNorm if a >= 1 => bit(a),
        K::Matmul if a >= 2 && ins[1] >= 2 => bit(a.max(ins[1])),
        K::Bmm if a == 3 && ins[1] == 3 => bit(3),
        K::Transpose | K::Triangular | K::BatchNorm | K::GroupNorm if a >= 2 => bit(a),
        K::InstanceNorm if a >= 3 => bit(a),
        K::Conv { spatial } | K::ConvTranspose { spatial } if a == spatial as usize + 2 && ins[1] == a => bit(a),
        K::Pool { spatial } if a == spatial as usize + 2 => bit(a),
        K::Cat if a >= 1 && ins.iter().all(|&n| n == a) => bit(a),
        K::Stack if ins.iter().all(|&n| n == a) => bit(a + 1),
        _ => 0,
    }
}

pub(super) struct OrderBlock {
    pub kind: ConstraintKind,
    pub inputs: Vec<usize>,
    pub output: usize,
    pub keepdim: Option<bool>,
}

pub(super) struct OrderNet {
    pub blocks: Vec<OrderBlock>,
    watch: Vec<Vec<usize>>,
}

impl OrderNet {
    pub fn new(blocks: Vec<OrderBlock>, edge_count: usize) -> Self {
        let mut watch = vec![Vec::new(); edge_count];
        for (b, blk) in blocks.iter().enumerate() {
            for &e in blk.inputs.iter().chain(std::iter::once(&blk.output)) {
                if !watch[e].contains(&b) {
                    watch[e].push(b);
                }
            }
        }
        OrderNet { blocks, watch }
    }

    /// Generalized arc consistency to a fixpoint. Returns false on a wipeout.
    pub fn propagate(&self, dom: &mut [OrderDom], initial: impl IntoIterator<Item = usize>) -> bool {
        let mut queued = vec![false; self.blocks.len()];
        let mut queue: Vec<usize> = Vec::new();
        for b in initial {
            if !queued[b] {
                queued[b] = true;
                queue.push(b);
            }
        }
        while let Some(b) = queue.pop() {
            queued[b] = false;
            let Some(changed) = self.revise(b, dom) else {
                return false;
            };
            for e in changed {
                for &nb in &self.watch[e] {
                    if !queued[nb] {
                        queued[nb] = true;
                        queue.push(nb);
                    }
                }
            }
        }
        true
    }

    pub fn all_blocks(&self) -> std::ops::Range<usize> {
        0..self.blocks.len()
    }

    pub fn blocks_of(&self, edge: usize) -> &[usize] {
        &self.watch[edge]
    }

    /// Removes unsupported values from one block's edges. Returns the edges
    /// whose domain shrank, or `None` if one became empty.
    fn revise(&self, b: usize, dom: &mut [OrderDom]) -> Option<Vec<usize>> {
        let blk = &self.blocks[b];
        let k = blk.inputs.len();
        let mut support_in = vec![0 as OrderDom; k];
        let mut support_out: OrderDom = 0;
        let choices: Vec<Vec<usize>> = blk.inputs.iter().map(|&e| values(dom[e]).collect()).collect();
        if choices.iter().any(Vec::is_empty) {
            return None;
        }
        let mut idx = vec![0usize; k];
        let mut tuple = vec![0usize; k];
        'outer: loop {
            for i in 0..k {
                tuple[i] = choices[i][idx[i]];
            }
            // The same edge may feed a node twice; both slots must agree.
            let consistent = (0..k).all(|i| (0..i).all(|j| blk.inputs[i] != blk.inputs[j] || tuple[i] == tuple[j]));
            if consistent {
                let outs = out_orders(blk.kind, &tuple, blk.keepdim) & dom[blk.output];
                if outs != 0 {
                    support_out |= outs;
                    for i in 0..k {
                        support_in[i] |= bit(tuple[i]);
                    }
                }
            }
            for i in (0..k).rev() {
                idx[i] += 1;
                if idx[i] < choices[i].len() {
                    continue 'outer;
                }
                idx[i] = 0;
            }
            break;
        }
        let mut changed = Vec::new();
        let mut narrow = |e: usize, keep: OrderDom, dom: &mut [OrderDom]| -> bool {
            let next = dom[e] & keep;
            if next != dom[e] {
                dom[e] = next;
                if !changed.contains(&e) {
                    changed.push(e);
                }
            }
            next != 0
        };
        for (&edge, &support) in blk.inputs.iter().zip(&support_in).take(k) {
            if !narrow(edge, support, dom) {
                return None;
            }
        }
        if !narrow(blk.output, support_out, dom) {
            return None;
        }
        Some(changed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduce_orders_follow_keepdim() {
        assert_eq!(out_orders(ConstraintKind::Reduce, &[3], Some(true)), bit(3));
        assert_eq!(out_orders(ConstraintKind::Reduce, &[3], Some(false)), bit(2));
        assert_eq!(out_orders(ConstraintKind::Reduce, &[1], None), bit(1) | bit(0));
        assert_eq!(out_orders(ConstraintKind::Reduce, &[0], None), 0);
    }

    #[test]
    fn conv_needs_matching_orders() {
        let k = ConstraintKind::Conv { spatial: 2 };
        assert_eq!(out_orders(k, &[4, 4], None), bit(4));
        assert_eq!(out_orders(k, &[4, 3], None), 0);
        assert_eq!(out_orders(ConstraintKind::Transpose, &[1], None), 0);
    }

    #[test]
    fn propagation_narrows_shared_edges() {
        // edge 0 feeds a Bmm (needs 3) and a Transpose (needs >= 2).
        let net = OrderNet::new(
            vec![
                OrderBlock { kind: ConstraintKind::Bmm, inputs: vec![0, 1], output: 2, keepdim: None },
                OrderBlock { kind: ConstraintKind::Transpose, inputs: vec![0], output: 3, keepdim: None },
            ],
            4,
        );
        let mut dom = vec![CREATE_ORDERS, CREATE_ORDERS, ANY_ORDER, ANY_ORDER];
        assert!(net.propagate(&mut dom, net.all_blocks()));
        assert_eq!(dom, vec![bit(3), bit(3), bit(3), bit(3)]);

        let mut dom = vec![bit(2), CREATE_ORDERS, ANY_ORDER, ANY_ORDER];
        assert!(!net.propagate(&mut dom, net.all_blocks()));
    }
}
