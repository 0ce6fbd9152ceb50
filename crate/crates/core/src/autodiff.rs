//! Minimal reverse-mode autodiff over dense `f64` matrices.
//!
//! The toy text encoder and denoiser build their forward passes on a
//! [`Tape`]; calling [`Tape::backward`] with a cotangent for the output node
//! yields gradients with respect to any earlier node. This is what backs the
//! gradient pull-back half of the encoder/denoiser adapter contracts.
//!
//! The op set is deliberately closed: only what the toy stack needs.

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "Mat::from_vec size mismatch");
        Mat { rows, cols, data }
    }

    /// Single-row matrix from a slice.
    pub fn row_vector(values: &[f64]) -> Self {
        Mat::from_vec(1, values.len(), values.to_vec())
    }

    /// Stack row slices into a matrix; all rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty(), "Mat::from_rows needs at least one row");
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "Mat::from_rows ragged input");
            data.extend_from_slice(r);
        }
        Mat::from_vec(rows.len(), cols, data)
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn rows_vec(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    /// `self * other`, shapes `[n,k] * [k,m] -> [n,m]`.
    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul inner dim mismatch");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.at(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.at(k, j);
                }
            }
        }
        out
    }

    /// `self * other^T`, shapes `[n,k] * [m,k] -> [n,m]`.
    pub fn matmul_nt(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.cols, "matmul_nt inner dim mismatch");
        let mut out = Mat::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            for j in 0..other.rows {
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += self.at(i, k) * other.at(j, k);
                }
                out.data[i * other.rows + j] = acc;
            }
        }
        out
    }

    /// `self^T * other`, shapes `[k,n] * [k,m] -> [n,m]`.
    pub fn matmul_tn(&self, other: &Mat) -> Mat {
        assert_eq!(self.rows, other.rows, "matmul_tn inner dim mismatch");
        let mut out = Mat::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            for i in 0..self.cols {
                let a = self.at(k, i);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.at(k, j);
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.at(i, j);
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

impl NodeId {
    /// Position of the node on its tape; indexes the gradient vector
    /// returned by [`Tape::backward`].
    pub fn index(self) -> usize {
        self.0
    }
}

type BackwardFn = Box<dyn Fn(&Mat) -> Vec<Mat>>;

struct Node {
    value: Mat,
    parents: Vec<NodeId>,
    backward: Option<BackwardFn>,
}

/// Records a forward computation so gradients can be pulled back through it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Mat, parents: Vec<NodeId>, backward: Option<BackwardFn>) -> NodeId {
        self.nodes.push(Node {
            value,
            parents,
            backward,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf node holding an input (or constant) value.
    pub fn input(&mut self, value: Mat) -> NodeId {
        self.push(value, vec![], None)
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!((va.rows, va.cols), (vb.rows, vb.cols), "add shape mismatch");
        let mut out = va.clone();
        out.add_assign(vb);
        self.push(
            out,
            vec![a, b],
            Some(Box::new(|g: &Mat| vec![g.clone(), g.clone()])),
        )
    }

    /// Elementwise add of a constant matrix (e.g. positional table slice).
    pub fn add_const(&mut self, a: NodeId, c: &Mat) -> NodeId {
        let va = self.value(a);
        assert_eq!((va.rows, va.cols), (c.rows, c.cols), "add_const shape");
        let mut out = va.clone();
        out.add_assign(c);
        self.push(out, vec![a], Some(Box::new(|g: &Mat| vec![g.clone()])))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let mut out = self.value(a).clone();
        for v in out.data.iter_mut() {
            *v *= factor;
        }
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g: &Mat| {
                let mut ga = g.clone();
                for v in ga.data.iter_mut() {
                    *v *= factor;
                }
                vec![ga]
            })),
        )
    }

    /// `a * b` with both operands on the tape.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let va = self.value(a).clone();
        let vb = self.value(b).clone();
        let out = va.matmul(&vb);
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g: &Mat| {
                vec![g.matmul_nt(&vb), va.matmul_tn(g)]
            })),
        )
    }

    /// `a * b^T` with both operands on the tape (attention scores).
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let va = self.value(a).clone();
        let vb = self.value(b).clone();
        let out = va.matmul_nt(&vb);
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g: &Mat| {
                vec![g.matmul(&vb), g.matmul_tn(&va)]
            })),
        )
    }

    /// `a * W` where `W` is a frozen weight matrix (no gradient for `W`).
    pub fn matmul_const(&mut self, a: NodeId, w: &Mat) -> NodeId {
        let out = self.value(a).matmul(w);
        let wt = w.transpose();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g: &Mat| vec![g.matmul(&wt)])),
        )
    }

    /// Row-wise LayerNorm with frozen gain/bias.
    pub fn layer_norm(&mut self, a: NodeId, gain: &[f64], bias: &[f64], eps: f64) -> NodeId {
        let va = self.value(a).clone();
        let d = va.cols;
        assert_eq!(gain.len(), d, "layer_norm gain length");
        assert_eq!(bias.len(), d, "layer_norm bias length");
        let mut out = Mat::zeros(va.rows, d);
        let mut inv_std = vec![0.0; va.rows];
        let mut normalized = Mat::zeros(va.rows, d);
        for r in 0..va.rows {
            let row = va.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..d {
                let n = (row[c] - mean) * inv;
                *normalized.at_mut(r, c) = n;
                *out.at_mut(r, c) = gain[c] * n + bias[c];
            }
        }
        let gain = gain.to_vec();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g: &Mat| {
                let mut ga = Mat::zeros(g.rows, d);
                for r in 0..g.rows {
                    let inv = inv_std[r];
                    let gg: Vec<f64> = (0..d).map(|c| g.at(r, c) * gain[c]).collect();
                    let mean_gg = gg.iter().sum::<f64>() / d as f64;
                    let mean_gg_n =
                        (0..d).map(|c| gg[c] * normalized.at(r, c)).sum::<f64>() / d as f64;
                    for c in 0..d {
                        *ga.at_mut(r, c) =
                            inv * (gg[c] - mean_gg - normalized.at(r, c) * mean_gg_n);
                    }
                }
                vec![ga]
            })),
        )
    }

    /// Causal row-wise softmax of `scale * logits`: row `i` attends to
    /// columns `0..=i`, masked entries come out as exactly zero.
    pub fn causal_softmax(&mut self, a: NodeId, scale: f64) -> NodeId {
        let va = self.value(a).clone();
        assert_eq!(va.rows, va.cols, "causal_softmax expects square logits");
        let n = va.rows;
        let mut out = Mat::zeros(n, n);
        for i in 0..n {
            let mut maxv = f64::NEG_INFINITY;
            for j in 0..=i {
                maxv = maxv.max(scale * va.at(i, j));
            }
            let mut denom = 0.0;
            for j in 0..=i {
                let e = (scale * va.at(i, j) - maxv).exp();
                *out.at_mut(i, j) = e;
                denom += e;
            }
            for j in 0..=i {
                *out.at_mut(i, j) /= denom;
            }
        }
        let probs = out.clone();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g: &Mat| {
                let mut ga = Mat::zeros(n, n);
                for i in 0..n {
                    let mut dot = 0.0;
                    for j in 0..=i {
                        dot += g.at(i, j) * probs.at(i, j);
                    }
                    for j in 0..=i {
                        *ga.at_mut(i, j) = scale * probs.at(i, j) * (g.at(i, j) - dot);
                    }
                }
                vec![ga]
            })),
        )
    }

    /// QuickGELU activation `x * sigmoid(1.702 x)`.
    pub fn quick_gelu(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a).clone();
        let mut out = va.clone();
        for v in out.data.iter_mut() {
            *v = *v * sigmoid(1.702 * *v);
        }
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g: &Mat| {
                let mut ga = g.clone();
                for (gv, &x) in ga.data.iter_mut().zip(va.data.iter()) {
                    let s = sigmoid(1.702 * x);
                    *gv *= s + 1.702 * x * s * (1.0 - s);
                }
                vec![ga]
            })),
        )
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        for v in out.data.iter_mut() {
            *v = v.tanh();
        }
        let y = out.clone();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g: &Mat| {
                let mut ga = g.clone();
                for (gv, &t) in ga.data.iter_mut().zip(y.data.iter()) {
                    *gv *= 1.0 - t * t;
                }
                vec![ga]
            })),
        )
    }

    /// Mean over rows: `[n,d] -> [1,d]`.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let (n, d) = (va.rows, va.cols);
        let mut out = Mat::zeros(1, d);
        for r in 0..n {
            for c in 0..d {
                out.data[c] += va.at(r, c);
            }
        }
        for v in out.data.iter_mut() {
            *v /= n as f64;
        }
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g: &Mat| {
                let mut ga = Mat::zeros(n, d);
                for r in 0..n {
                    for c in 0..d {
                        *ga.at_mut(r, c) = g.data[c] / n as f64;
                    }
                }
                vec![ga]
            })),
        )
    }

    /// Horizontal concatenation of equally-tall nodes.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows;
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols).collect();
        let total: usize = widths.iter().sum();
        let mut out = Mat::zeros(rows, total);
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(widths.iter()) {
            let vp = self.value(p);
            assert_eq!(vp.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.data[r * total + offset..r * total + offset + w].copy_from_slice(vp.row(r));
            }
            offset += w;
        }
        let widths_b = widths.clone();
        self.push(
            out,
            parts.to_vec(),
            Some(Box::new(move |g: &Mat| {
                let mut grads = Vec::with_capacity(widths_b.len());
                let mut offset = 0;
                for &w in &widths_b {
                    let mut part = Mat::zeros(rows, w);
                    for r in 0..rows {
                        part.data[r * w..(r + 1) * w]
                            .copy_from_slice(&g.row(r)[offset..offset + w]);
                    }
                    grads.push(part);
                    offset += w;
                }
                grads
            })),
        )
    }

    /// Mean squared error against a constant target, over all entries.
    /// Output is a `[1,1]` scalar node.
    pub fn mse_const(&mut self, a: NodeId, target: &Mat) -> NodeId {
        let va = self.value(a).clone();
        assert_eq!((va.rows, va.cols), (target.rows, target.cols), "mse shape");
        let n = (va.rows * va.cols) as f64;
        let mut acc = 0.0;
        for (x, t) in va.data.iter().zip(target.data.iter()) {
            let d = x - t;
            acc += d * d;
        }
        let target = target.clone();
        self.push(
            Mat::from_vec(1, 1, vec![acc / n]),
            vec![a],
            Some(Box::new(move |g: &Mat| {
                let s = g.data[0] * 2.0 / n;
                let mut ga = va.clone();
                for (x, t) in ga.data.iter_mut().zip(target.data.iter()) {
                    *x = s * (*x - t);
                }
                vec![ga]
            })),
        )
    }

    /// Pull the cotangent `seed` (same shape as `output`'s value) back
    /// through the tape. Returns per-node gradients; nodes unreachable from
    /// `output` get `None`.
    pub fn backward(&self, output: NodeId, seed: Mat) -> Vec<Option<Mat>> {
        let out_val = self.value(output);
        assert_eq!(
            (seed.rows, seed.cols),
            (out_val.rows, out_val.cols),
            "backward seed shape mismatch"
        );
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let g = match &grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            let node = &self.nodes[i];
            if let Some(back) = &node.backward {
                let parent_grads = back(&g);
                assert_eq!(parent_grads.len(), node.parents.len());
                for (pid, pg) in node.parents.iter().zip(parent_grads) {
                    match &mut grads[pid.0] {
                        Some(existing) => existing.add_assign(&pg),
                        slot => *slot = Some(pg),
                    }
                }
            }
        }
        grads
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences of a scalar tape function w.r.t. one input.
    fn finite_diff<F>(build: F, input: &Mat, h: f64) -> Mat
    where
        F: Fn(&mut Tape, NodeId) -> NodeId,
    {
        let mut grad = Mat::zeros(input.rows, input.cols);
        for i in 0..input.data.len() {
            let mut plus = input.clone();
            plus.data[i] += h;
            let mut minus = input.clone();
            minus.data[i] -= h;
            let fp = {
                let mut t = Tape::new();
                let x = t.input(plus);
                let l = build(&mut t, x);
                t.value(l).data[0]
            };
            let fm = {
                let mut t = Tape::new();
                let x = t.input(minus);
                let l = build(&mut t, x);
                t.value(l).data[0]
            };
            grad.data[i] = (fp - fm) / (2.0 * h);
        }
        grad
    }

    fn check_op<F>(build: F, input: Mat, tol: f64)
    where
        F: Fn(&mut Tape, NodeId) -> NodeId,
    {
        let mut tape = Tape::new();
        let x = tape.input(input.clone());
        let loss = build(&mut tape, x);
        let grads = tape.backward(loss, Mat::from_vec(1, 1, vec![1.0]));
        let analytic = grads[0].clone().expect("input gradient missing");
        let numeric = finite_diff(&build, &input, 1e-6);
        for (a, n) in analytic.data.iter().zip(numeric.data.iter()) {
            let denom = a.abs().max(n.abs()).max(1e-8);
            assert!(
                (a - n).abs() / denom < tol,
                "gradient mismatch: analytic {a}, numeric {n}"
            );
        }
    }

    fn fixture(rows: usize, cols: usize, salt: u64) -> Mat {
        let mut m = Mat::zeros(rows, cols);
        for (i, v) in m.data.iter_mut().enumerate() {
            *v = ((i as f64 + 1.3) * 0.7 + salt as f64 * 0.11).sin();
        }
        m
    }

    #[test]
    fn matmul_forward_matches_loops() {
        let a = fixture(2, 3, 1);
        let b = fixture(3, 4, 2);
        let c = a.matmul(&b);
        for i in 0..2 {
            for j in 0..4 {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += a.at(i, k) * b.at(k, j);
                }
                assert!((c.at(i, j) - acc).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn grad_layer_norm() {
        let gain = vec![1.0, 1.2, 0.8, 1.0];
        let bias = vec![0.0, 0.1, -0.2, 0.0];
        check_op(
            move |t, x| {
                let y = t.layer_norm(x, &gain, &bias, 1e-12);
                let target = Mat::zeros(3, 4);
                t.mse_const(y, &target)
            },
            fixture(3, 4, 3),
            1e-6,
        );
    }

    #[test]
    fn grad_causal_softmax() {
        check_op(
            |t, x| {
                let p = t.causal_softmax(x, 0.5);
                let target = fixture(4, 4, 9);
                t.mse_const(p, &target)
            },
            fixture(4, 4, 4),
            1e-6,
        );
    }

    #[test]
    fn grad_attention_shaped_composite() {
        // q k^T -> causal softmax -> weighted values, all from one input.
        let wq = fixture(4, 4, 11);
        let wk = fixture(4, 4, 12);
        let wv = fixture(4, 4, 13);
        check_op(
            move |t, x| {
                let q = t.matmul_const(x, &wq);
                let k = t.matmul_const(x, &wk);
                let v = t.matmul_const(x, &wv);
                let s = t.matmul_nt(q, k);
                let p = t.causal_softmax(s, 0.5);
                let o = t.matmul(p, v);
                let target = Mat::zeros(3, 4);
                t.mse_const(o, &target)
            },
            fixture(3, 4, 5),
            1e-5,
        );
    }

    #[test]
    fn grad_mlp_composite() {
        let w1 = fixture(4, 8, 21);
        let w2 = fixture(8, 4, 22);
        check_op(
            move |t, x| {
                let h = t.matmul_const(x, &w1);
                let h = t.quick_gelu(h);
                let o = t.matmul_const(h, &w2);
                let target = fixture(2, 4, 23);
                t.mse_const(o, &target)
            },
            fixture(2, 4, 6),
            1e-6,
        );
    }

    #[test]
    fn grad_pool_concat_tanh() {
        let w = fixture(10, 2, 31);
        check_op(
            move |t, x| {
                let pooled = t.mean_rows(x);
                let c = t.input(fixture(1, 2, 32));
                let j = t.concat_cols(&[pooled, c]);
                let h = t.matmul_const(j, &w.transpose().transpose());
                let h = t.tanh(h);
                let target = Mat::zeros(1, 2);
                t.mse_const(h, &target)
            },
            fixture(4, 8, 7),
            1e-6,
        );
    }

    #[test]
    fn backward_accumulates_shared_parents() {
        // y = x + x => dy/dx = 2
        let mut t = Tape::new();
        let x = t.input(Mat::from_vec(1, 2, vec![3.0, -1.0]));
        let y = t.add(x, x);
        let s = t.mse_const(y, &Mat::zeros(1, 2));
        let grads = t.backward(s, Mat::from_vec(1, 1, vec![1.0]));
        let g = grads[0].as_ref().unwrap();
        // d/dx mean((2x)^2) over 2 entries = 4x per entry
        assert!((g.data[0] - 4.0 * 3.0).abs() < 1e-12);
        assert!((g.data[1] + 4.0).abs() < 1e-12);
        let numeric = finite_diff(
            |t, x| {
                let y = t.add(x, x);
                t.mse_const(y, &Mat::zeros(1, 2))
            },
            &Mat::from_vec(1, 2, vec![3.0, -1.0]),
            1e-6,
        );
        for (a, n) in g.data.iter().zip(numeric.data.iter()) {
            assert!((a - n).abs() < 1e-6);
        }
    }
}
