//! Reverse-mode automatic differentiation over a tensor tape.
//!
//! Values are eager: every op computes its result when it is pushed, so a
//! caller can read intermediate values while building a graph. `backward`
//! runs one reverse sweep and accumulates gradients for every node.
//!
//! Tensors are `ndarray::Array2<f64>`; scalars are (1, 1) arrays. The op
//! set is exactly what a small decoder-only transformer plus the losses in
//! `objectives` need — this is a micro framework, not a general one.

use crate::kernels;
use ndarray::{s, Array2};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    /// Gather rows of `table` by token id.
    EmbedRows { table: NodeId, ids: Vec<usize> },
    SliceRows { src: NodeId, start: usize, len: usize },
    ColBlock { src: NodeId, start: usize, len: usize },
    ConcatCols { parts: Vec<NodeId> },
    Add { a: NodeId, b: NodeId },
    /// Broadcast-add a (1, n) bias to every row.
    AddBias { a: NodeId, bias: NodeId },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    MatMul { a: NodeId, b: NodeId },
    /// a · bᵀ
    MatMulNt { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    AddConst { a: NodeId },
    CausalMask { a: NodeId },
    SoftmaxRows { a: NodeId },
    LogSoftmaxRows { a: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, eps: f64 },
    Gelu { a: NodeId },
    /// Pick entries (r_i, c_i) into a (k, 1) column.
    PickEntries { a: NodeId, coords: Vec<(usize, usize)> },
    /// Σ_i weights[i] · a[0, cols[i]] on a (1, n) row, result (1, 1).
    DotCols { a: NodeId, cols: Vec<usize>, weights: Vec<f64> },
    SumAll { a: NodeId },
    Square { a: NodeId },
    /// max(a, min); gradient is zero where the input was clamped.
    ClampMin { a: NodeId, min: f64 },
}

pub struct Tape {
    vals: Vec<Array2<f64>>,
    ops: Vec<Op>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { vals: Vec::new(), ops: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.vals[id.0]
    }

    /// Value of a (1, 1) node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.vals[id.0].dim(), (1, 1));
        self.vals[id.0][[0, 0]]
    }

    fn push(&mut self, val: Array2<f64>, op: Op) -> NodeId {
        self.vals.push(val);
        self.ops.push(op);
        NodeId(self.vals.len() - 1)
    }

    pub fn input(&mut self, val: Array2<f64>) -> NodeId {
        self.push(val, Op::Input)
    }

    pub fn constant(&mut self, c: f64) -> NodeId {
        self.input(Array2::from_elem((1, 1), c))
    }

    pub fn embed_rows(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let t = &self.vals[table.0];
        let mut out = Array2::zeros((ids.len(), t.ncols()));
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).assign(&t.row(id));
        }
        self.push(out, Op::EmbedRows { table, ids: ids.to_vec() })
    }

    pub fn slice_rows(&mut self, src: NodeId, start: usize, len: usize) -> NodeId {
        let out = self.vals[src.0].slice(s![start..start + len, ..]).to_owned();
        self.push(out, Op::SliceRows { src, start, len })
    }

    pub fn col_block(&mut self, src: NodeId, start: usize, len: usize) -> NodeId {
        let out = self.vals[src.0].slice(s![.., start..start + len]).to_owned();
        self.push(out, Op::ColBlock { src, start, len })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.vals[parts[0].0].nrows();
        let total: usize = parts.iter().map(|p| self.vals[p.0].ncols()).sum();
        let mut out = Array2::zeros((rows, total));
        let mut at = 0;
        for p in parts {
            let v = &self.vals[p.0];
            out.slice_mut(s![.., at..at + v.ncols()]).assign(v);
            at += v.ncols();
        }
        self.push(out, Op::ConcatCols { parts: parts.to_vec() })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = &self.vals[a.0] + &self.vals[b.0];
        self.push(out, Op::Add { a, b })
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let out = kernels::add_bias(self.vals[a.0].view(), self.vals[bias.0].view());
        self.push(out, Op::AddBias { a, bias })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = &self.vals[a.0] * &self.vals[b.0];
        self.push(out, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = &self.vals[a.0] / &self.vals[b.0];
        self.push(out, Op::Div { a, b })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = kernels::matmul(self.vals[a.0].view(), self.vals[b.0].view());
        self.push(out, Op::MatMul { a, b })
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = kernels::matmul_nt(self.vals[a.0].view(), self.vals[b.0].view());
        self.push(out, Op::MatMulNt { a, b })
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = self.vals[a.0].mapv(|v| v * c);
        self.push(out, Op::Scale { a, c })
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = self.vals[a.0].mapv(|v| v + c);
        self.push(out, Op::AddConst { a })
    }

    pub fn causal_mask(&mut self, a: NodeId) -> NodeId {
        let out = kernels::causal_mask(self.vals[a.0].view());
        self.push(out, Op::CausalMask { a })
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let out = kernels::softmax_rows(self.vals[a.0].view());
        self.push(out, Op::SoftmaxRows { a })
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let out = kernels::log_softmax_rows(self.vals[a.0].view());
        self.push(out, Op::LogSoftmaxRows { a })
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let out = kernels::layer_norm(
            self.vals[x.0].view(),
            self.vals[gain.0].view(),
            self.vals[bias.0].view(),
            eps,
        );
        self.push(out, Op::LayerNorm { x, gain, bias, eps })
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let out = kernels::gelu(self.vals[a.0].view());
        self.push(out, Op::Gelu { a })
    }

    pub fn pick_entries(&mut self, a: NodeId, coords: &[(usize, usize)]) -> NodeId {
        let v = &self.vals[a.0];
        let mut out = Array2::zeros((coords.len(), 1));
        for (i, &(r, c)) in coords.iter().enumerate() {
            out[[i, 0]] = v[[r, c]];
        }
        self.push(out, Op::PickEntries { a, coords: coords.to_vec() })
    }

    pub fn dot_cols(&mut self, a: NodeId, cols: &[usize], weights: &[f64]) -> NodeId {
        debug_assert_eq!(cols.len(), weights.len());
        let v = &self.vals[a.0];
        debug_assert_eq!(v.nrows(), 1);
        let mut acc = 0.0;
        for (&c, &w) in cols.iter().zip(weights.iter()) {
            acc += v[[0, c]] * w;
        }
        self.push(
            Array2::from_elem((1, 1), acc),
            Op::DotCols { a, cols: cols.to_vec(), weights: weights.to_vec() },
        )
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let total = self.vals[a.0].sum();
        self.push(Array2::from_elem((1, 1), total), Op::SumAll { a })
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let out = self.vals[a.0].mapv(|v| v * v);
        self.push(out, Op::Square { a })
    }

    /// Clamp from below. Returns the node and the number of clamped entries.
    pub fn clamp_min(&mut self, a: NodeId, min: f64) -> (NodeId, usize) {
        let mut clamped = 0usize;
        let out = self.vals[a.0].mapv(|v| {
            if v < min {
                clamped += 1;
                min
            } else {
                v
            }
        });
        (self.push(out, Op::ClampMin { a, min }), clamped)
    }

    /// Reverse sweep from `root` (a (1, 1) node). Returns per-node gradients;
    /// nodes unreachable from the root keep a zero gradient.
    pub fn backward(&self, root: NodeId) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.vals.len()];
        grads[root.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.step_backward(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(grads: &mut [Option<Array2<f64>>], id: NodeId, delta: Array2<f64>) {
        match &mut grads[id.0] {
            Some(g) => *g += &delta,
            slot => *slot = Some(delta),
        }
    }

    fn step_backward(&self, idx: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        match &self.ops[idx] {
            Op::Input => {}
            Op::EmbedRows { table, ids } => {
                let t = &self.vals[table.0];
                let mut dt = Array2::zeros(t.dim());
                for (i, &id) in ids.iter().enumerate() {
                    let mut row = dt.row_mut(id);
                    row += &g.row(i);
                }
                Self::accumulate(grads, *table, dt);
            }
            Op::SliceRows { src, start, len } => {
                let mut ds = Array2::zeros(self.vals[src.0].dim());
                ds.slice_mut(s![*start..*start + *len, ..]).assign(g);
                Self::accumulate(grads, *src, ds);
            }
            Op::ColBlock { src, start, len } => {
                let mut ds = Array2::zeros(self.vals[src.0].dim());
                ds.slice_mut(s![.., *start..*start + *len]).assign(g);
                Self::accumulate(grads, *src, ds);
            }
            Op::ConcatCols { parts } => {
                let mut at = 0;
                for p in parts {
                    let w = self.vals[p.0].ncols();
                    let dp = g.slice(s![.., at..at + w]).to_owned();
                    Self::accumulate(grads, *p, dp);
                    at += w;
                }
            }
            Op::Add { a, b } => {
                Self::accumulate(grads, *a, g.clone());
                Self::accumulate(grads, *b, g.clone());
            }
            Op::AddBias { a, bias } => {
                Self::accumulate(grads, *a, g.clone());
                let mut db = Array2::zeros((1, g.ncols()));
                for row in g.rows() {
                    let mut b0 = db.row_mut(0);
                    b0 += &row;
                }
                Self::accumulate(grads, *bias, db);
            }
            Op::Mul { a, b } => {
                Self::accumulate(grads, *a, g * &self.vals[b.0]);
                Self::accumulate(grads, *b, g * &self.vals[a.0]);
            }
            Op::Div { a, b } => {
                let bv = &self.vals[b.0];
                Self::accumulate(grads, *a, g / bv);
                let d_b = -(g * &self.vals[idx]) / bv;
                Self::accumulate(grads, *b, d_b);
            }
            Op::MatMul { a, b } => {
                let da = kernels::matmul_nt(g.view(), self.vals[b.0].view());
                let db = kernels::matmul(self.vals[a.0].t(), g.view());
                Self::accumulate(grads, *a, da);
                Self::accumulate(grads, *b, db);
            }
            Op::MatMulNt { a, b } => {
                // out = a · bᵀ
                let da = kernels::matmul(g.view(), self.vals[b.0].view());
                let db = kernels::matmul(g.t(), self.vals[a.0].view());
                Self::accumulate(grads, *a, da);
                Self::accumulate(grads, *b, db);
            }
            Op::Scale { a, c } => {
                Self::accumulate(grads, *a, g.mapv(|v| v * c));
            }
            Op::AddConst { a } => {
                Self::accumulate(grads, *a, g.clone());
            }
            Op::CausalMask { a } => {
                Self::accumulate(grads, *a, g.clone());
            }
            Op::SoftmaxRows { a } => {
                let p = &self.vals[idx];
                let mut da = Array2::zeros(p.dim());
                for (i, gr) in g.rows().into_iter().enumerate() {
                    let pr = p.row(i);
                    let dot: f64 = gr.iter().zip(pr.iter()).map(|(x, y)| x * y).sum();
                    for j in 0..p.ncols() {
                        da[[i, j]] = pr[j] * (gr[j] - dot);
                    }
                }
                Self::accumulate(grads, *a, da);
            }
            Op::LogSoftmaxRows { a } => {
                let out = &self.vals[idx];
                let mut da = Array2::zeros(out.dim());
                for (i, gr) in g.rows().into_iter().enumerate() {
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..out.ncols() {
                        da[[i, j]] = gr[j] - out[[i, j]].exp() * gsum;
                    }
                }
                Self::accumulate(grads, *a, da);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = &self.vals[x.0];
                let gv = self.vals[gain.0].row(0).to_owned();
                let stats = kernels::layer_norm_stats(xv.view(), *eps);
                let n = xv.ncols();
                let nf = n as f64;
                let mut dx = Array2::zeros(xv.dim());
                let mut dg = Array2::zeros((1, n));
                let mut db = Array2::zeros((1, n));
                for (i, (mean, inv)) in stats.iter().enumerate() {
                    let xr = xv.row(i);
                    let gr = g.row(i);
                    // dy_hat = g ∘ gain; means over the row
                    let mut sum_dy = 0.0;
                    let mut sum_dy_xhat = 0.0;
                    for j in 0..n {
                        let xhat = (xr[j] - mean) * inv;
                        let dy = gr[j] * gv[j];
                        sum_dy += dy;
                        sum_dy_xhat += dy * xhat;
                        dg[[0, j]] += gr[j] * xhat;
                        db[[0, j]] += gr[j];
                    }
                    let mean_dy = sum_dy / nf;
                    let mean_dy_xhat = sum_dy_xhat / nf;
                    for j in 0..n {
                        let xhat = (xr[j] - mean) * inv;
                        let dy = gr[j] * gv[j];
                        dx[[i, j]] = inv * (dy - mean_dy - xhat * mean_dy_xhat);
                    }
                }
                Self::accumulate(grads, *x, dx);
                Self::accumulate(grads, *gain, dg);
                Self::accumulate(grads, *bias, db);
            }
            Op::Gelu { a } => {
                let xv = &self.vals[a.0];
                let mut da = g.clone();
                da.zip_mut_with(xv, |gv, &x| *gv *= kernels::gelu_grad_scalar(x));
                Self::accumulate(grads, *a, da);
            }
            Op::PickEntries { a, coords } => {
                let mut da = Array2::zeros(self.vals[a.0].dim());
                for (i, &(r, c)) in coords.iter().enumerate() {
                    da[[r, c]] += g[[i, 0]];
                }
                Self::accumulate(grads, *a, da);
            }
            Op::DotCols { a, cols, weights } => {
                let mut da = Array2::zeros(self.vals[a.0].dim());
                let gs = g[[0, 0]];
                for (&c, &w) in cols.iter().zip(weights.iter()) {
                    da[[0, c]] += w * gs;
                }
                Self::accumulate(grads, *a, da);
            }
            Op::SumAll { a } => {
                let gs = g[[0, 0]];
                Self::accumulate(grads, *a, Array2::from_elem(self.vals[a.0].dim(), gs));
            }
            Op::Square { a } => {
                let da = 2.0 * g * &self.vals[a.0];
                Self::accumulate(grads, *a, da);
            }
            Op::ClampMin { a, min } => {
                let xv = &self.vals[a.0];
                let mut da = g.clone();
                da.zip_mut_with(xv, |gv, &x| {
                    if x < *min {
                        *gv = 0.0;
                    }
                });
                Self::accumulate(grads, *a, da);
            }
        }
    }
}

pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to node `id`; zeros if the node
    /// does not influence the root.
    pub fn get(&self, id: NodeId, shape: (usize, usize)) -> Array2<f64> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Array2::zeros(shape),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central finite differences of a scalar graph w.r.t. one input node.
    fn fd_check(
        build: impl Fn(&mut Tape, NodeId) -> NodeId,
        x0: Array2<f64>,
        h: f64,
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let x = tape.input(x0.clone());
        let loss = build(&mut tape, x);
        assert_eq!(tape.value(loss).dim(), (1, 1));
        let grads = tape.backward(loss);
        let gx = grads.get(x, x0.dim());

        for r in 0..x0.nrows() {
            for c in 0..x0.ncols() {
                let eval = |delta: f64| {
                    let mut pert = x0.clone();
                    pert[[r, c]] += delta;
                    let mut t = Tape::new();
                    let xi = t.input(pert);
                    let l = build(&mut t, xi);
                    t.scalar(l)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let ad = gx[[r, c]];
                // A zero analytic gradient only produces rounding noise
                // under finite differences.
                if fd.abs() < 1e-9 && ad.abs() < 1e-9 {
                    continue;
                }
                let denom = fd.abs().max(ad.abs()).max(1e-6);
                assert!(
                    (fd - ad).abs() / denom < tol,
                    "({r},{c}): fd={fd} ad={ad}"
                );
            }
        }
    }

    #[test]
    fn matmul_chain_gradient() {
        let w = array![[0.3, -0.2], [0.5, 0.1], [-0.4, 0.9]];
        fd_check(
            move |t, x| {
                let wn = t.input(w.clone());
                let y = t.matmul(x, wn);
                let sq = t.square(y);
                t.sum_all(sq)
            },
            array![[0.2, -0.7, 1.1], [0.0, 0.4, -0.3]],
            1e-5,
            1e-7,
        );
    }

    #[test]
    fn softmax_pick_gradient() {
        fd_check(
            |t, x| {
                let sm = t.log_softmax_rows(x);
                let picked = t.pick_entries(sm, &[(0, 2), (1, 0)]);
                let s = t.sum_all(picked);
                t.scale(s, -1.0)
            },
            array![[0.1, 0.9, -0.4, 0.2], [1.2, -0.1, 0.3, 0.0]],
            1e-5,
            1e-7,
        );
    }

    #[test]
    fn layer_norm_gelu_gradient() {
        fd_check(
            |t, x| {
                let g = t.input(array![[1.1, 0.9, 1.0, 1.2]]);
                let b = t.input(array![[0.0, 0.1, -0.1, 0.0]]);
                let ln = t.layer_norm(x, g, b, 1e-5);
                let ge = t.gelu(ln);
                let sq = t.square(ge);
                t.sum_all(sq)
            },
            array![[0.4, -0.2, 0.8, 0.1], [0.0, 1.5, -0.6, 0.2]],
            1e-5,
            3e-7,
        );
    }

    #[test]
    fn attention_shaped_gradient() {
        // q·kᵀ → mask → softmax → ·v → sum, differentiating through q.
        let k = array![[0.2, 0.4], [-0.3, 0.5], [0.7, -0.1]];
        let v = array![[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]];
        fd_check(
            move |t, q| {
                let kn = t.input(k.clone());
                let vn = t.input(v.clone());
                let scores = t.matmul_nt(q, kn);
                let scaled = t.scale(scores, 1.0 / (2.0f64).sqrt());
                let masked = t.causal_mask(scaled);
                let attn = t.softmax_rows(masked);
                let ctx = t.matmul(attn, vn);
                let sq = t.square(ctx);
                t.sum_all(sq)
            },
            array![[0.1, -0.2], [0.6, 0.3], [-0.4, 0.8]],
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn div_and_dot_cols_gradient() {
        fd_check(
            |t, x| {
                let sm = t.softmax_rows(x);
                let num = t.dot_cols(sm, &[0, 2, 3], &[1.0, 2.0, 3.0]);
                let den = t.dot_cols(sm, &[0, 2, 3], &[1.0, 1.0, 1.0]);
                let e = t.div(num, den);
                let shifted = t.add_const(e, -2.0);
                t.square(shifted)
            },
            array![[0.3, -0.5, 0.9, 0.1, 0.2]],
            1e-5,
            1e-7,
        );
    }

    #[test]
    fn clamp_zeroes_gradient_below_floor() {
        let mut t = Tape::new();
        let x = t.input(array![[-2.0, 3.0]]);
        let (c, n_clamped) = t.clamp_min(x, 0.0);
        assert_eq!(n_clamped, 1);
        let s = t.sum_all(c);
        let grads = t.backward(s);
        let gx = grads.get(x, (1, 2));
        assert_eq!(gx[[0, 0]], 0.0);
        assert_eq!(gx[[0, 1]], 1.0);
    }

    #[test]
    fn unused_input_gets_zero_gradient() {
        let mut t = Tape::new();
        let x = t.input(array![[1.0]]);
        let unused = t.input(array![[5.0]]);
        let s = t.square(x);
        let loss = t.sum_all(s);
        let grads = t.backward(loss);
        assert_eq!(grads.get(unused, (1, 1))[[0, 0]], 0.0);
    }
}
