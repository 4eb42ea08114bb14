//! The Wengert-list tape of primitive vector operations.

use super::store::ParamStore;
use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Node {
    /// Leaf referencing `params[offset .. offset + len]`.
    Param { offset: usize },
    /// Leaf holding constant data.
    Const,
    /// `y = W x + b`, `W` row-major `(rows, cols)`.
    Affine {
        w: NodeId,
        b: NodeId,
        x: NodeId,
        rows: usize,
        cols: usize,
    },
    Relu { x: NodeId },
    LeakyRelu { x: NodeId, slope: f64 },
    Clamp { x: NodeId, lo: f64, hi: f64 },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    AddConst { x: NodeId },
    Square { x: NodeId },
    /// Single entry as a scalar node.
    Index { x: NodeId, i: usize },
    /// Sum of scalar nodes with fixed weights.
    WeightedSum { xs: Vec<NodeId>, weights: Vec<f64> },
    /// log(sum_i exp(x_i)) over scalar nodes.
    LogSumExp { xs: Vec<NodeId> },
    /// Log-softmax over the legal entries of one vector node; illegal
    /// entries are set to -inf and must not be differentiated through.
    MaskedLogSoftmax { x: NodeId, mask: Vec<bool> },
    /// log(sum over legal entries of exp(x_j)) as a scalar.
    MaskedLogSumExp { x: NodeId, mask: Vec<bool> },
    /// sum over legal entries of exp(x_j) * x_j for log-probability inputs;
    /// this is the negative entropy of the distribution.
    NegEntropy { x: NodeId, mask: Vec<bool> },
}

/// Records primitive operations and runs a single reverse sweep.
pub struct Tape {
    nodes: Vec<Node>,
    vals: Vec<Vec<f64>>,
    param_len: usize,
    consumed: bool,
}

impl Tape {
    pub fn new(params: &ParamStore) -> Self {
        Tape {
            nodes: Vec::new(),
            vals: Vec::new(),
            param_len: params.len(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.vals[id]
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.vals[id].len(), 1);
        self.vals[id][0]
    }

    fn push(&mut self, node: Node, val: Vec<f64>) -> NodeId {
        self.nodes.push(node);
        self.vals.push(val);
        self.nodes.len() - 1
    }

    // ---- leaves ---------------------------------------------------------

    pub fn param(&mut self, params: &ParamStore, offset: usize, len: usize) -> NodeId {
        let val = params.values()[offset..offset + len].to_vec();
        self.push(Node::Param { offset }, val)
    }

    pub fn param_slice(&mut self, params: &ParamStore, name: &str) -> Result<NodeId> {
        let r = params.range(name)?;
        Ok(self.param(params, r.start, r.end - r.start))
    }

    pub fn constant(&mut self, data: Vec<f64>) -> NodeId {
        self.push(Node::Const, data)
    }

    pub fn scalar_const(&mut self, c: f64) -> NodeId {
        self.constant(vec![c])
    }

    // ---- ops --------------------------------------------------------------

    pub fn affine(&mut self, w: NodeId, b: NodeId, x: NodeId, rows: usize, cols: usize) -> NodeId {
        debug_assert_eq!(self.vals[w].len(), rows * cols);
        debug_assert_eq!(self.vals[b].len(), rows);
        debug_assert_eq!(self.vals[x].len(), cols);
        let mut y = self.vals[b].clone();
        let wv = &self.vals[w];
        let xv = &self.vals[x];
        for r in 0..rows {
            let row = &wv[r * cols..(r + 1) * cols];
            let mut acc = 0.0;
            for (wi, xi) in row.iter().zip(xv.iter()) {
                acc += wi * xi;
            }
            y[r] += acc;
        }
        self.push(Node::Affine { w, b, x, rows, cols }, y)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = self.vals[x].iter().map(|v| v.max(0.0)).collect();
        self.push(Node::Relu { x }, y)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let y = self.vals[x]
            .iter()
            .map(|&v| if v >= 0.0 { v } else { slope * v })
            .collect();
        self.push(Node::LeakyRelu { x, slope }, y)
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let y = self.vals[x].iter().map(|v| v.clamp(lo, hi)).collect();
        self.push(Node::Clamp { x, lo, hi }, y)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        debug_assert_eq!(self.vals[a].len(), self.vals[b].len());
        let y = self.vals[a]
            .iter()
            .zip(self.vals[b].iter())
            .map(|(x, y)| x + y)
            .collect();
        self.push(Node::Add { a, b }, y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        debug_assert_eq!(self.vals[a].len(), self.vals[b].len());
        let y = self.vals[a]
            .iter()
            .zip(self.vals[b].iter())
            .map(|(x, y)| x - y)
            .collect();
        self.push(Node::Sub { a, b }, y)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let y = self.vals[x].iter().map(|v| v * c).collect();
        self.push(Node::Scale { x, c }, y)
    }

    pub fn add_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let y = self.vals[x].iter().map(|v| v + c).collect();
        self.push(Node::AddConst { x }, y)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let y = self.vals[x].iter().map(|v| v * v).collect();
        self.push(Node::Square { x }, y)
    }

    pub fn index(&mut self, x: NodeId, i: usize) -> NodeId {
        let y = vec![self.vals[x][i]];
        self.push(Node::Index { x, i }, y)
    }

    pub fn sum(&mut self, xs: &[NodeId]) -> NodeId {
        self.weighted_sum(xs, &vec![1.0; xs.len()])
    }

    pub fn mean(&mut self, xs: &[NodeId]) -> NodeId {
        let w = 1.0 / xs.len() as f64;
        self.weighted_sum(xs, &vec![w; xs.len()])
    }

    pub fn weighted_sum(&mut self, xs: &[NodeId], weights: &[f64]) -> NodeId {
        debug_assert_eq!(xs.len(), weights.len());
        let mut acc = 0.0;
        for (&x, &w) in xs.iter().zip(weights.iter()) {
            debug_assert_eq!(self.vals[x].len(), 1);
            acc += w * self.vals[x][0];
        }
        self.push(
            Node::WeightedSum {
                xs: xs.to_vec(),
                weights: weights.to_vec(),
            },
            vec![acc],
        )
    }

    pub fn log_sum_exp(&mut self, xs: &[NodeId]) -> NodeId {
        debug_assert!(!xs.is_empty());
        let mut max = f64::NEG_INFINITY;
        for &x in xs {
            max = max.max(self.vals[x][0]);
        }
        let mut acc = 0.0;
        for &x in xs {
            acc += (self.vals[x][0] - max).exp();
        }
        self.push(Node::LogSumExp { xs: xs.to_vec() }, vec![max + acc.ln()])
    }

    pub fn masked_log_softmax(&mut self, x: NodeId, mask: &[bool]) -> NodeId {
        let xs = &self.vals[x];
        debug_assert_eq!(xs.len(), mask.len());
        debug_assert!(mask.iter().any(|&m| m), "all-masked softmax row");
        let mut max = f64::NEG_INFINITY;
        for (v, &m) in xs.iter().zip(mask) {
            if m {
                max = max.max(*v);
            }
        }
        let mut z = 0.0;
        for (v, &m) in xs.iter().zip(mask) {
            if m {
                z += (v - max).exp();
            }
        }
        let lse = max + z.ln();
        let y = xs
            .iter()
            .zip(mask)
            .map(|(v, &m)| if m { v - lse } else { f64::NEG_INFINITY })
            .collect();
        self.push(
            Node::MaskedLogSoftmax {
                x,
                mask: mask.to_vec(),
            },
            y,
        )
    }

    pub fn masked_log_sum_exp(&mut self, x: NodeId, mask: &[bool]) -> NodeId {
        let xs = &self.vals[x];
        let mut max = f64::NEG_INFINITY;
        for (v, &m) in xs.iter().zip(mask) {
            if m {
                max = max.max(*v);
            }
        }
        let mut z = 0.0;
        for (v, &m) in xs.iter().zip(mask) {
            if m {
                z += (v - max).exp();
            }
        }
        self.push(
            Node::MaskedLogSumExp {
                x,
                mask: mask.to_vec(),
            },
            vec![max + z.ln()],
        )
    }

    /// Negative entropy `sum exp(lp) * lp` of a masked log-probability vector.
    pub fn neg_entropy(&mut self, x: NodeId, mask: &[bool]) -> NodeId {
        let xs = &self.vals[x];
        let mut acc = 0.0;
        for (v, &m) in xs.iter().zip(mask) {
            if m {
                acc += v.exp() * v;
            }
        }
        self.push(
            Node::NegEntropy {
                x,
                mask: mask.to_vec(),
            },
            vec![acc],
        )
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse sweep from a scalar loss node. Returns `dLoss/dtheta` for the
    /// whole parameter store (zeros where untouched). The tape is consumed.
    pub fn backward(&mut self, loss: NodeId) -> Result<Vec<f64>> {
        if self.consumed {
            return Err(Error::contract("tape already consumed by backward"));
        }
        self.consumed = true;
        if self.vals[loss].len() != 1 {
            return Err(Error::contract("backward requires a scalar loss node"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut param_grad = vec![0.0; self.param_len];
        grads[loss] = Some(vec![1.0]);

        for id in (0..self.nodes.len()).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[id] {
                Node::Param { offset } => {
                    for (k, gv) in g.iter().enumerate() {
                        param_grad[offset + k] += gv;
                    }
                }
                Node::Const => {}
                Node::Affine { w, b, x, rows, cols } => {
                    let (w, b, x, rows, cols) = (*w, *b, *x, *rows, *cols);
                    let xv = self.vals[x].clone();
                    let wv = &self.vals[w];
                    let mut gx = vec![0.0; cols];
                    let mut gw = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let gr = g[r];
                        if gr == 0.0 {
                            continue;
                        }
                        let row = &wv[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            gw[r * cols + c] += gr * xv[c];
                            gx[c] += gr * row[c];
                        }
                    }
                    accumulate(&mut grads[w], &gw);
                    accumulate(&mut grads[b], &g);
                    accumulate(&mut grads[x], &gx);
                }
                Node::Relu { x } => {
                    let x = *x;
                    let gx: Vec<f64> = self.vals[x]
                        .iter()
                        .zip(g.iter())
                        .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[x], &gx);
                }
                Node::LeakyRelu { x, slope } => {
                    let (x, slope) = (*x, *slope);
                    let gx: Vec<f64> = self.vals[x]
                        .iter()
                        .zip(g.iter())
                        .map(|(&v, &gv)| if v >= 0.0 { gv } else { slope * gv })
                        .collect();
                    accumulate(&mut grads[x], &gx);
                }
                Node::Clamp { x, lo, hi } => {
                    let (x, lo, hi) = (*x, *lo, *hi);
                    let gx: Vec<f64> = self.vals[x]
                        .iter()
                        .zip(g.iter())
                        .map(|(&v, &gv)| if v > lo && v < hi { gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[x], &gx);
                }
                Node::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    accumulate(&mut grads[a], &g);
                    accumulate(&mut grads[b], &g);
                }
                Node::Sub { a, b } => {
                    let (a, b) = (*a, *b);
                    accumulate(&mut grads[a], &g);
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(&mut grads[b], &neg);
                }
                Node::Scale { x, c } => {
                    let (x, c) = (*x, *c);
                    let gx: Vec<f64> = g.iter().map(|v| c * v).collect();
                    accumulate(&mut grads[x], &gx);
                }
                Node::AddConst { x } => {
                    let x = *x;
                    accumulate(&mut grads[x], &g);
                }
                Node::Square { x } => {
                    let x = *x;
                    let gx: Vec<f64> = self.vals[x]
                        .iter()
                        .zip(g.iter())
                        .map(|(&v, &gv)| 2.0 * v * gv)
                        .collect();
                    accumulate(&mut grads[x], &gx);
                }
                Node::Index { x, i } => {
                    let (x, i) = (*x, *i);
                    let mut gx = vec![0.0; self.vals[x].len()];
                    gx[i] = g[0];
                    accumulate(&mut grads[x], &gx);
                }
                Node::WeightedSum { xs, weights } => {
                    let pairs: Vec<(NodeId, f64)> =
                        xs.iter().copied().zip(weights.iter().copied()).collect();
                    for (x, w) in pairs {
                        accumulate(&mut grads[x], &[w * g[0]]);
                    }
                }
                Node::LogSumExp { xs } => {
                    let xs = xs.clone();
                    let out = self.vals[id][0];
                    for x in xs {
                        let p = (self.vals[x][0] - out).exp();
                        accumulate(&mut grads[x], &[p * g[0]]);
                    }
                }
                Node::MaskedLogSoftmax { x, mask } => {
                    let x = *x;
                    let mask = mask.clone();
                    let lp = self.vals[id].clone();
                    let mut dot = 0.0;
                    for (j, &m) in mask.iter().enumerate() {
                        if m {
                            dot += g[j];
                        }
                    }
                    let mut gx = vec![0.0; lp.len()];
                    for (j, &m) in mask.iter().enumerate() {
                        if m {
                            gx[j] = g[j] - lp[j].exp() * dot;
                        }
                    }
                    accumulate(&mut grads[x], &gx);
                }
                Node::MaskedLogSumExp { x, mask } => {
                    let x = *x;
                    let mask = mask.clone();
                    let out = self.vals[id][0];
                    let xv = self.vals[x].clone();
                    let mut gx = vec![0.0; xv.len()];
                    for (j, &m) in mask.iter().enumerate() {
                        if m {
                            gx[j] = (xv[j] - out).exp() * g[0];
                        }
                    }
                    accumulate(&mut grads[x], &gx);
                }
                Node::NegEntropy { x, mask } => {
                    let x = *x;
                    let mask = mask.clone();
                    let xv = self.vals[x].clone();
                    let mut gx = vec![0.0; xv.len()];
                    for (j, &m) in mask.iter().enumerate() {
                        if m {
                            gx[j] = xv[j].exp() * (xv[j] + 1.0) * g[0];
                        }
                    }
                    accumulate(&mut grads[x], &gx);
                }
            }
        }
        Ok(param_grad)
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g.iter()) {
                *a += v;
            }
        }
        None => *slot = Some(g.to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: Vec<f64>) -> ParamStore {
        ParamStore::builder().slice("p", values).build()
    }

    #[test]
    fn quadratic_gradient() {
        // loss = theta_i^2 at theta_i = 3 has gradient 6 at slot i
        let params = store(vec![1.0, 3.0, -2.0]);
        let mut tape = Tape::new(&params);
        let p = tape.param(&params, 0, 3);
        let x1 = tape.index(p, 1);
        let loss = tape.square(x1);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g, vec![0.0, 6.0, 0.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let params = store(vec![1.0, 2.0]);
        let mut tape = Tape::new(&params);
        let _p = tape.param(&params, 0, 2);
        let loss = tape.scalar_const(5.0);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn consumed_tape_errors() {
        let params = store(vec![1.0]);
        let mut tape = Tape::new(&params);
        let p = tape.param(&params, 0, 1);
        let loss = tape.index(p, 0);
        tape.backward(loss).unwrap();
        assert!(tape.backward(loss).is_err());
    }

    #[test]
    fn affine_matches_finite_differences() {
        let params = store(vec![0.3, -0.7, 0.2, 0.5, -0.1, 0.4, 0.9, -0.3]);
        let eval = |vals: &[f64]| -> f64 {
            let p = store(vals.to_vec());
            let mut tape = Tape::new(&p);
            let w = tape.param(&p, 0, 6); // 2x3
            let b = tape.param(&p, 6, 2);
            let x = tape.constant(vec![1.0, -2.0, 0.5]);
            let y = tape.affine(w, b, x, 2, 3);
            let y = tape.relu(y);
            let s0 = tape.index(y, 0);
            let s1 = tape.index(y, 1);
            let t = tape.add(s0, s1);
            let loss = tape.square(t);
            tape.scalar(loss)
        };
        let mut tape = Tape::new(&params);
        let w = tape.param(&params, 0, 6);
        let b = tape.param(&params, 6, 2);
        let x = tape.constant(vec![1.0, -2.0, 0.5]);
        let y = tape.affine(w, b, x, 2, 3);
        let y = tape.relu(y);
        let s0 = tape.index(y, 0);
        let s1 = tape.index(y, 1);
        let t = tape.add(s0, s1);
        let loss = tape.square(t);
        let g = tape.backward(loss).unwrap();

        let h = 1e-6;
        for i in 0..params.len() {
            let mut plus = params.values().to_vec();
            plus[i] += h;
            let mut minus = params.values().to_vec();
            minus[i] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            assert!(
                (g[i] - fd).abs() < 1e-6 * fd.abs().max(1.0),
                "slot {i}: ad {} vs fd {fd}",
                g[i]
            );
        }
    }

    #[test]
    fn masked_log_softmax_normalizes() {
        let params = store(vec![1.0, -0.5, 2.0]);
        let mut tape = Tape::new(&params);
        let p = tape.param(&params, 0, 3);
        let lp = tape.masked_log_softmax(p, &[true, false, true]);
        let v = tape.value(lp);
        assert!((v[0].exp() + v[2].exp() - 1.0).abs() < 1e-12);
        assert_eq!(v[1], f64::NEG_INFINITY);
    }

    #[test]
    fn log_sum_exp_of_scalars() {
        let params = store(vec![0.0]);
        let mut tape = Tape::new(&params);
        let a = tape.scalar_const(0.0);
        let b = tape.scalar_const((2.0f64).ln());
        let l = tape.log_sum_exp(&[a, b]);
        assert!((tape.scalar(l) - (3.0f64).ln()).abs() < 1e-14);
    }
}
