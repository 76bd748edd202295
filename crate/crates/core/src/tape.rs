//! Reverse-mode differentiation over the kernels in [`crate::tensor`].
//!
//! A [`GradTape`] records every operation as it executes. Values that were
//! added as constants are untracked and never receive a gradient; anything
//! derived from a tracked value is tracked. [`GradTape::backward`] replays
//! the record in reverse and accumulates gradients.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::tensor::{
    causal_softmax, layer_norm_with_stats, log_softmax_row, matmul, matmul_nt, LayerNormStats,
    Tensor, TensorError, TensorResult,
};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Debug)]
enum Op {
    Input,
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    CausalSoftmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        stats: LayerNormStats,
    },
    ConcatCols(Vec<usize>),
    Sum(usize),
    MeanNll {
        logits: usize,
        targets: Vec<(usize, usize)>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

#[derive(Debug)]
pub struct GradTape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for GradTape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: HashMap<usize, Tensor>,
    visited: Vec<usize>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; `None` for untracked values.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(&var.index)
    }

    /// Operation indices in the order the backward pass processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> TensorResult<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(TensorError::Usage(format!(
                "variable {} does not belong to tape {}",
                v.index, self.id
            )));
        }
        Ok(v.index)
    }

    fn tracked(&self, i: usize) -> bool {
        self.nodes[i].tracked
    }

    /// Untracked input (weights, embeddings).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Tracked input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, true)
    }

    /// Start tracking an already recorded value. Only operations recorded
    /// afterwards propagate the tracking flag.
    pub fn track(&mut self, v: Var) -> TensorResult<()> {
        let i = self.idx(v)?;
        self.nodes[i].tracked = true;
        Ok(())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.index].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = matmul(&self.nodes[ia].value, &self.nodes[ib].value)?;
        let t = self.tracked(ia) || self.tracked(ib);
        Ok(self.push(out, Op::MatMul(ia, ib), t))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = matmul_nt(&self.nodes[ia].value, &self.nodes[ib].value)?;
        let t = self.tracked(ia) || self.tracked(ib);
        Ok(self.push(out, Op::MatMulNT(ia, ib), t))
    }

    pub fn add(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = self.nodes[ia].value.add(&self.nodes[ib].value)?.checked("add")?;
        let t = self.tracked(ia) || self.tracked(ib);
        Ok(self.push(out, Op::Add(ia, ib), t))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = self.nodes[ia].value.mul(&self.nodes[ib].value)?.checked("mul")?;
        let t = self.tracked(ia) || self.tracked(ib);
        Ok(self.push(out, Op::Mul(ia, ib), t))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> TensorResult<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.scale(c).checked("scale")?;
        let t = self.tracked(ia);
        Ok(self.push(out, Op::Scale(ia, c), t))
    }

    pub fn relu(&mut self, a: Var) -> TensorResult<Var> {
        let ia = self.idx(a)?;
        let out = crate::tensor::relu(&self.nodes[ia].value);
        let t = self.tracked(ia);
        Ok(self.push(out, Op::Relu(ia), t))
    }

    pub fn causal_softmax(&mut self, a: Var) -> TensorResult<Var> {
        let ia = self.idx(a)?;
        let out = causal_softmax(&self.nodes[ia].value)?;
        let t = self.tracked(ia);
        Ok(self.push(out, Op::CausalSoftmax(ia), t))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> TensorResult<Var> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gain)?, self.idx(bias)?);
        let (out, stats) = layer_norm_with_stats(
            &self.nodes[ix].value,
            &self.nodes[ig].value,
            &self.nodes[ib].value,
        )?;
        let t = self.tracked(ix) || self.tracked(ig) || self.tracked(ib);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: ix,
                gain: ig,
                bias: ib,
                stats,
            },
            t,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> TensorResult<Var> {
        let idx = parts.iter().map(|&p| self.idx(p)).collect::<TensorResult<Vec<_>>>()?;
        let refs: Vec<&Tensor> = idx.iter().map(|&i| &self.nodes[i].value).collect();
        let out = Tensor::concat_cols(&refs)?;
        let t = idx.iter().any(|&i| self.tracked(i));
        Ok(self.push(out, Op::ConcatCols(idx), t))
    }

    pub fn sum(&mut self, a: Var) -> TensorResult<Var> {
        let ia = self.idx(a)?;
        let s = self.nodes[ia].value.sum();
        let out = Tensor::scalar(s).checked("sum")?;
        let t = self.tracked(ia);
        Ok(self.push(out, Op::Sum(ia), t))
    }

    /// Mean negative log-likelihood of `targets` given as `(row, token)`
    /// pairs against the row-wise softmax of `logits`.
    pub fn mean_nll(&mut self, logits: Var, targets: &[(usize, usize)]) -> TensorResult<Var> {
        let il = self.idx(logits)?;
        if targets.is_empty() {
            return Err(TensorError::Usage("mean_nll needs at least one target".into()));
        }
        let l = &self.nodes[il].value;
        let (rows, cols) = (l.rows(), l.cols());
        let mut total = 0.0f64;
        for &(r, tok) in targets {
            if r >= rows || tok >= cols {
                return Err(TensorError::Dimension {
                    op: "mean_nll",
                    detail: format!("target ({r}, {tok}) outside logits {:?}", l.shape()),
                });
            }
            total -= log_softmax_row(l.row(r))[tok];
        }
        let out = Tensor::scalar(total / targets.len() as f64).checked("mean_nll")?;
        let t = self.tracked(il);
        Ok(self.push(
            out,
            Op::MeanNll {
                logits: il,
                targets: targets.to_vec(),
            },
            t,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> TensorResult<Gradients> {
        let li = self.idx(loss)?;
        if !self.nodes[li].value.is_scalar() {
            return Err(TensorError::Usage(format!(
                "loss must be a scalar, got shape {:?}",
                self.nodes[li].value.shape()
            )));
        }
        let mut acc: Vec<Option<Vec<f64>>> = vec![None; li + 1];
        acc[li] = Some(vec![1.0]);
        let mut visited = Vec::new();

        for i in (0..=li).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(g) = acc[i].take() else {
                continue;
            };
            visited.push(i);
            self.propagate(i, &g, &mut acc)?;
            acc[i] = Some(g);
        }

        let mut grads = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate().take(li + 1) {
            if !node.tracked {
                continue;
            }
            let data: Vec<f64> = match &acc[i] {
                Some(g) => g.to_vec(),
                None => vec![0.0; node.value.len()],
            };
            if data.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite { op: "backward" });
            }
            grads.insert(i, Tensor::new(node.value.shape().to_vec(), data)?);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
            visited,
        })
    }

    fn accumulate(&self, acc: &mut [Option<Vec<f64>>], target: usize, contrib: Vec<f64>) {
        if !self.nodes[target].tracked {
            return;
        }
        match &mut acc[target] {
            Some(existing) => existing.iter_mut().zip(contrib).for_each(|(e, c)| *e += c),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, i: usize, g: &[f64], acc: &mut [Option<Vec<f64>>]) -> TensorResult<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Input => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.tracked(*a) {
                    // g · bᵀ
                    let bd = bv.data();
                    let mut ga = vec![0.0f64; m * k];
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let br = &bd[p * n..(p + 1) * n];
                            ga[r * k + p] = gr.iter().zip(br).map(|(&x, &y)| x * y).sum();
                        }
                    }
                    self.accumulate(acc, *a, ga);
                }
                if self.tracked(*b) {
                    // aᵀ · g
                    let ad = av.data();
                    let mut gb = vec![0.0f64; k * n];
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let x = ad[r * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(gr) {
                                *o += x * gv;
                            }
                        }
                    }
                    self.accumulate(acc, *b, gb);
                }
            }
            Op::MatMulNT(a, b) => {
                // out = a · bᵀ with a: m×k, b: n×k
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                if self.tracked(*a) {
                    let bd = bv.data();
                    let mut ga = vec![0.0f64; m * k];
                    for r in 0..m {
                        for j in 0..n {
                            let gv = g[r * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                ga[r * k + p] += gv * bd[j * k + p];
                            }
                        }
                    }
                    self.accumulate(acc, *a, ga);
                }
                if self.tracked(*b) {
                    let ad = av.data();
                    let mut gb = vec![0.0f64; n * k];
                    for r in 0..m {
                        for j in 0..n {
                            let gv = g[r * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                gb[j * k + p] += gv * ad[r * k + p];
                            }
                        }
                    }
                    self.accumulate(acc, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(acc, *a, g.to_vec());
                self.accumulate(acc, *b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                if self.tracked(*a) {
                    self.accumulate(acc, *a, g.iter().zip(bv).map(|(&x, &y)| x * y).collect());
                }
                if self.tracked(*b) {
                    self.accumulate(acc, *b, g.iter().zip(av).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(acc, *a, g.iter().map(|&x| x * c).collect());
            }
            Op::Relu(a) => {
                let av = self.nodes[*a].value.data();
                let ga = g
                    .iter()
                    .zip(av)
                    .map(|(&x, &v)| if v > 0.0 { x } else { 0.0 })
                    .collect();
                self.accumulate(acc, *a, ga);
            }
            Op::CausalSoftmax(a) => {
                let y = &node.value;
                let n = y.rows();
                let mut ga = vec![0.0f64; n * n];
                for r in 0..n {
                    let yr = y.row(r);
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f64 = (0..=r).map(|j| gr[j] * yr[j]).sum();
                    for j in 0..=r {
                        ga[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(acc, *a, ga);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            } => {
                let xv = &self.nodes[*x].value;
                let (n, d) = (xv.rows(), xv.cols());
                let gd = self.nodes[*gain].value.data();
                if self.tracked(*x) {
                    let mut gx = vec![0.0f64; n * d];
                    for r in 0..n {
                        let xh = &stats.normalized[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dxh: Vec<f64> = gr.iter().zip(gd).map(|(&a, &b)| a * b).collect();
                        let mean_dxh = dxh.iter().sum::<f64>() / d as f64;
                        let mean_dxh_xh =
                            dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[r * d + j] =
                                stats.inv_std[r] * (dxh[j] - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                    self.accumulate(acc, *x, gx);
                }
                if self.tracked(*gain) {
                    let mut gg = vec![0.0f64; d];
                    for r in 0..n {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * stats.normalized[r * d + j];
                        }
                    }
                    self.accumulate(acc, *gain, gg);
                }
                if self.tracked(*bias) {
                    let mut gb = vec![0.0f64; d];
                    for r in 0..n {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                    self.accumulate(acc, *bias, gb);
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p].value.cols();
                    if self.tracked(p) {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(acc, p, gp);
                    }
                    offset += w;
                }
            }
            Op::Sum(a) => {
                let n = self.nodes[*a].value.len();
                self.accumulate(acc, *a, vec![g[0]; n]);
            }
            Op::MeanNll { logits, targets } => {
                let l = &self.nodes[*logits].value;
                let cols = l.cols();
                let mut gl = vec![0.0f64; l.len()];
                let scale = g[0] / targets.len() as f64;
                for &(r, tok) in targets {
                    let lp = log_softmax_row(l.row(r));
                    for (j, v) in lp.iter().enumerate() {
                        gl[r * cols + j] += scale * v.exp();
                    }
                    gl[r * cols + tok] -= scale;
                }
                self.accumulate(acc, *logits, gl);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn square_gradient() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constants_have_no_gradient() {
        let mut tape = GradTape::new();
        let w = tape.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let x = tape.leaf(Tensor::from_rows(&[&[1.0, 1.0]]));
        let y = tape.matmul(x, w).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(w).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn loss_from_another_tape_is_rejected() {
        let mut a = GradTape::new();
        let mut b = GradTape::new();
        let x = a.leaf(Tensor::scalar(1.0));
        let _ = b.leaf(Tensor::scalar(1.0));
        assert!(matches!(b.backward(x), Err(TensorError::Usage(_))));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(TensorError::Usage(_))));
    }

    #[test]
    fn backward_visits_in_reverse_order() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.scale(x, 3.0).unwrap();
        let z = tape.mul(y, x).unwrap();
        let s = tape.sum(z).unwrap();
        let g = tape.backward(s).unwrap();
        let order = g.visit_order();
        assert!(order.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(order.first(), Some(&s.index()));
        // d/dx sum(3x·x) = 6x
        assert_eq!(g.get(x).unwrap().data(), &[6.0, 12.0]);
    }

    #[test]
    fn track_after_creation() {
        let mut tape = GradTape::new();
        let w = tape.constant(Tensor::from_rows(&[&[2.0]]));
        let a = tape.constant(Tensor::from_rows(&[&[3.0]]));
        let h = tape.matmul(a, w).unwrap();
        tape.track(h).unwrap();
        let out = tape.scale(h, 5.0).unwrap();
        let s = tape.sum(out).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(h).unwrap().data(), &[5.0]);
        assert!(g.get(a).is_none());
    }
}
