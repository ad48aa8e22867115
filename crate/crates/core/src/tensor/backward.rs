use std::borrow::Cow;

use super::kernels::{self, split_axis};
use super::tape::{Gradients, Node, Op, Tape, Var};
use crate::error::{Error, Result};

const FAULT_FACTOR: f64 = 1.5;

/// Gradient buffer of `v`, allocated on first use; `None` for constant subtrees.
fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut [f64]> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(
        grads[v.0]
            .get_or_insert_with(|| vec![0.0; node.value.len()])
            .as_mut_slice(),
    )
}

impl Tape {
    /// Reverse pass from a single-element `loss`. Each node is visited once,
    /// in reverse recording order; contributions to shared inputs add up.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Contract(format!("unknown tape variable {}", loss.0)))?;
        if loss_node.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.shape
            )));
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if loss_node.requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        for id in (0..=loss.0).rev() {
            let Some(g_owned) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            let g: Cow<[f64]> = if self.fault == Some(node.op.kind()) {
                Cow::Owned(g_owned.iter().map(|v| v * FAULT_FACTOR).collect())
            } else {
                Cow::Borrowed(&g_owned)
            };
            propagate(nodes, node, &g, &mut grads);
            grads[id] = Some(g_owned);
        }
        Ok(Gradients { grads })
    }
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| nodes[v.0].value.as_slice();
    let shape = |v: Var| nodes[v.0].shape.as_slice();
    let y = node.value.as_slice();

    match &node.op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            let (m, k, n) = (shape(a)[0], shape(a)[1], shape(b)[1]);
            if let Some(da) = slot(grads, nodes, a) {
                kernels::gemm_nt_acc(g, val(b), da, m, k, n);
            }
            if let Some(db) = slot(grads, nodes, b) {
                kernels::gemm_tn_acc(val(a), g, db, m, k, n);
            }
        }
        &Op::BatchMatMul(a, b) => {
            let (bt, m, k, n) = (shape(a)[0], shape(a)[1], shape(a)[2], shape(b)[2]);
            if let Some(da) = slot(grads, nodes, a) {
                for i in 0..bt {
                    kernels::gemm_nt_acc(
                        &g[i * m * n..(i + 1) * m * n],
                        &val(b)[i * k * n..(i + 1) * k * n],
                        &mut da[i * m * k..(i + 1) * m * k],
                        m,
                        k,
                        n,
                    );
                }
            }
            if let Some(db) = slot(grads, nodes, b) {
                for i in 0..bt {
                    kernels::gemm_tn_acc(
                        &val(a)[i * m * k..(i + 1) * m * k],
                        &g[i * m * n..(i + 1) * m * n],
                        &mut db[i * k * n..(i + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }
        &Op::Transpose(x) => {
            let s = shape(x);
            let r = s.len();
            let (rows, cols) = (s[r - 2], s[r - 1]);
            let batch: usize = s[..r - 2].iter().product();
            if let Some(dx) = slot(grads, nodes, x) {
                for b in 0..batch {
                    let off = b * rows * cols;
                    for i in 0..rows {
                        for j in 0..cols {
                            dx[off + i * cols + j] += g[off + j * rows + i];
                        }
                    }
                }
            }
        }
        &Op::Reshape(x) => {
            if let Some(dx) = slot(grads, nodes, x) {
                add_into(dx, g);
            }
        }
        &Op::Add(a, b) | &Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if let Some(da) = slot(grads, nodes, a) {
                let na = da.len();
                for (i, gv) in g.iter().enumerate() {
                    da[i % na] += gv;
                }
            }
            if let Some(db) = slot(grads, nodes, b) {
                let nb = db.len();
                for (i, gv) in g.iter().enumerate() {
                    db[i % nb] += sign * gv;
                }
            }
        }
        &Op::Mul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (na, nb) = (av.len(), bv.len());
            if let Some(da) = slot(grads, nodes, a) {
                for (i, gv) in g.iter().enumerate() {
                    da[i % na] += gv * bv[i % nb];
                }
            }
            if let Some(db) = slot(grads, nodes, b) {
                for (i, gv) in g.iter().enumerate() {
                    db[i % nb] += gv * av[i % na];
                }
            }
        }
        &Op::ScaleBy(x, s) => {
            let c = val(s)[0];
            if let Some(dx) = slot(grads, nodes, x) {
                for (d, gv) in dx.iter_mut().zip(g) {
                    *d += gv * c;
                }
            }
            let xv = val(x);
            if let Some(ds) = slot(grads, nodes, s) {
                ds[0] += g.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        &Op::Affine { x, scale } => {
            if let Some(dx) = slot(grads, nodes, x) {
                for (d, gv) in dx.iter_mut().zip(g) {
                    *d += scale * gv;
                }
            }
        }
        &Op::Tanh(x) => {
            if let Some(dx) = slot(grads, nodes, x) {
                for ((d, gv), yv) in dx.iter_mut().zip(g).zip(y) {
                    *d += gv * (1.0 - yv * yv);
                }
            }
        }
        &Op::Sigmoid(x) => {
            if let Some(dx) = slot(grads, nodes, x) {
                for ((d, gv), yv) in dx.iter_mut().zip(g).zip(y) {
                    *d += gv * yv * (1.0 - yv);
                }
            }
        }
        &Op::Relu(x) => {
            let xv = val(x);
            if let Some(dx) = slot(grads, nodes, x) {
                for ((d, gv), xi) in dx.iter_mut().zip(g).zip(xv) {
                    if *xi > 0.0 {
                        *d += gv;
                    }
                }
            }
        }
        &Op::Log { x, floor } => {
            let xv = val(x);
            if let Some(dx) = slot(grads, nodes, x) {
                for ((d, gv), xi) in dx.iter_mut().zip(g).zip(xv) {
                    if *xi > floor {
                        *d += gv / xi;
                    }
                }
            }
        }
        &Op::Pow { x, exponent } => {
            let xv = val(x);
            if let Some(dx) = slot(grads, nodes, x) {
                for ((d, gv), xi) in dx.iter_mut().zip(g).zip(xv) {
                    if exponent == 0.0 || (*xi <= 0.0 && exponent < 1.0) {
                        continue;
                    }
                    *d += gv * exponent * xi.max(0.0).powf(exponent - 1.0);
                }
            }
        }
        &Op::Softmax { x, axis } => {
            let (outer, ext, inner) = split_axis(&node.shape, axis);
            if let Some(dx) = slot(grads, nodes, x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * ext * inner + i;
                        let dot: f64 = (0..ext)
                            .map(|e| g[base + e * inner] * y[base + e * inner])
                            .sum();
                        for e in 0..ext {
                            let k = base + e * inner;
                            dx[k] += y[k] * (g[k] - dot);
                        }
                    }
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = split_axis(&node.shape, *axis);
            let mut offset = 0;
            for &v in inputs {
                let ext = shape(v)[*axis];
                if let Some(dv) = slot(grads, nodes, v) {
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + ext) * inner];
                        add_into(&mut dv[o * ext * inner..(o + 1) * ext * inner], src);
                    }
                }
                offset += ext;
            }
        }
        &Op::Narrow { x, axis, start } => {
            let (outer, ext, inner) = split_axis(shape(x), axis);
            let len = node.shape[axis];
            if let Some(dx) = slot(grads, nodes, x) {
                for o in 0..outer {
                    let off = o * ext * inner + start * inner;
                    add_into(
                        &mut dx[off..off + len * inner],
                        &g[o * len * inner..(o + 1) * len * inner],
                    );
                }
            }
        }
        &Op::Conv1d { x, w, b } => {
            let (sx, sw) = (shape(x), shape(w));
            let dims = kernels::Conv1dDims {
                batch: sx[0],
                time: sx[1],
                c_in: sx[2],
                c_out: sw[2],
                kernel: sw[0],
            };
            // Separate buffers keep the three mutable borrows of `grads` disjoint.
            let mut dx = nodes[x.0].requires_grad.then(|| vec![0.0; val(x).len()]);
            let mut dw = nodes[w.0].requires_grad.then(|| vec![0.0; val(w).len()]);
            let mut db = nodes[b.0].requires_grad.then(|| vec![0.0; val(b).len()]);
            kernels::conv1d_backward(
                val(x),
                val(w),
                g,
                dims,
                dx.as_deref_mut(),
                dw.as_deref_mut(),
                db.as_deref_mut(),
            );
            for (v, d) in [(x, dx), (w, dw), (b, db)] {
                if let (Some(d), Some(slot)) = (d, slot(grads, nodes, v)) {
                    add_into(slot, &d);
                }
            }
        }
        &Op::MeanAxis { x, axis } => {
            let (outer, ext, inner) = split_axis(shape(x), axis);
            let inv = 1.0 / ext as f64;
            if let Some(dx) = slot(grads, nodes, x) {
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for e in 0..ext {
                        let dst = &mut dx[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                        for (d, gv) in dst.iter_mut().zip(src) {
                            *d += gv * inv;
                        }
                    }
                }
            }
        }
        &Op::Sum(x) => {
            if let Some(dx) = slot(grads, nodes, x) {
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        &Op::Mean(x) => {
            if let Some(dx) = slot(grads, nodes, x) {
                let share = g[0] / dx.len() as f64;
                dx.iter_mut().for_each(|d| *d += share);
            }
        }
        Op::Mask { x, mask } => {
            if let Some(dx) = slot(grads, nodes, *x) {
                for ((d, gv), m) in dx.iter_mut().zip(g).zip(mask) {
                    *d += gv * m;
                }
            }
        }
        Op::Pick { x, index } => {
            let cols = shape(*x)[1];
            if let Some(dx) = slot(grads, nodes, *x) {
                for (i, (&c, gv)) in index.iter().zip(g).enumerate() {
                    dx[i * cols + c] += gv;
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::super::Tensor;
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::from_fn([2, 3], |i| i as f64));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn square_gives_two_x() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::new([1], vec![3.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::zeros([2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn reuse_accumulates_both_paths() {
        // loss = sum(tanh(x) + 3x) via reuse vs. the same loss with a
        // duplicated leaf; the reused leaf must see the summed gradient.
        let data = Tensor::from_fn([4], |i| i as f64 * 0.3 - 0.4);
        let mut tape = Tape::new();
        let x = tape.param(&data);
        let t = tape.tanh(x);
        let l = tape.scale(x, 3.0);
        let s = tape.add(t, l).unwrap();
        let loss = tape.sum(s);
        let g = tape.backward(loss).unwrap();

        let mut tape2 = Tape::new();
        let x1 = tape2.param(&data);
        let x2 = tape2.param(&data);
        let t = tape2.tanh(x1);
        let l = tape2.scale(x2, 3.0);
        let s = tape2.add(t, l).unwrap();
        let loss = tape2.sum(s);
        let g2 = tape2.backward(loss).unwrap();

        for i in 0..4 {
            let split = g2.get(x1).unwrap()[i] + g2.get(x2).unwrap()[i];
            assert!((g.get(x).unwrap()[i] - split).abs() < 1e-15);
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant([2], vec![1.0, 2.0]).unwrap();
        let x = tape.param(&Tensor::zeros([2]));
        let p = tape.mul(c, x).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap(), &[1.0, 2.0]);
    }
}
