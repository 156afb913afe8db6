//! Minimal reverse-mode autodiff tape over `ndarray::Array2<f64>`.
//!
//! The model builds its whole forward pass (all samples of a batch plus the
//! losses) on one tape; `backward` then walks the tape once and accumulates
//! gradients into every leaf. All values are dense 2-d double matrices; row
//! vectors are `(1, n)` and scalars are `(1, 1)`.

use ndarray::{s, Array2, Axis};

use crate::error::{CoreError, Result};

pub type NodeId = usize;

pub type Mat = Array2<f64>;

const LN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    /// (m,k)·(k,n)
    MatMul(NodeId, NodeId),
    /// (m,k)·(n,k)ᵀ
    MatMulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// (m,n) + broadcast (1,n)
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    /// Row-wise softmax; `false` mask entries (keys/columns) get weight 0.
    SoftmaxRows(NodeId, Option<Vec<bool>>),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    ConcatRows(Vec<NodeId>),
    SliceRows {
        x: NodeId,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<NodeId>),
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    /// Row gather: out[i] = x[ids[i]]. Used for embedding lookup and for
    /// selecting masked positions.
    GatherRows {
        x: NodeId,
        ids: Vec<usize>,
    },
    /// Elementwise multiply by a fixed 0 / 1/(1-p) mask.
    Dropout {
        x: NodeId,
        mask: Mat,
    },
    /// Mean over rows of cross-entropy between row softmax and target ids.
    SoftmaxXent {
        logits: NodeId,
        targets: Vec<usize>,
    },
    /// Mean squared error against a constant target, averaged over elements.
    MseVs {
        pred: NodeId,
        target: Mat,
    },
    /// Cross-modal NT-Xent contrastive loss over N (image, text) pairs.
    NtXent {
        img: NodeId,
        txt: NodeId,
        tau: f64,
    },
    /// Weighted sum of (1,1) scalars.
    WeightedSum(Vec<(NodeId, f64)>),
}

pub struct Tape {
    values: Vec<Mat>,
    ops: Vec<Op>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            ops: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.values[id]
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.values[id][[0, 0]]
    }

    fn push(&mut self, value: Mat, op: Op) -> NodeId {
        self.values.push(value);
        self.ops.push(op);
        self.values.len() - 1
    }

    pub fn leaf(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.values[a].dot(&self.values[b]);
        self.push(v, Op::MatMul(a, b))
    }

    /// a · bᵀ
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.values[a].dot(&self.values[b].t());
        self.push(v, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.values[a] + &self.values[b];
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        debug_assert_eq!(self.values[row].nrows(), 1);
        let v = &self.values[a] + &self.values[row].row(0);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.values[a] * &self.values[b];
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.values[a].mapv(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.values[a].mapv(gelu);
        self.push(v, Op::Gelu(a))
    }

    /// Row-wise softmax with an optional key mask. Masked columns get weight
    /// exactly 0; each row must keep at least one unmasked column.
    pub fn softmax_rows(&mut self, a: NodeId, mask: Option<Vec<bool>>) -> NodeId {
        let x = &self.values[a];
        if let Some(m) = &mask {
            debug_assert_eq!(m.len(), x.ncols());
            debug_assert!(m.iter().any(|&b| b));
        }
        let mut out = Mat::zeros(x.raw_dim());
        for (i, row) in x.axis_iter(Axis(0)).enumerate() {
            let mut mx = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if mask.as_ref().map_or(true, |m| m[j]) && v > mx {
                    mx = v;
                }
            }
            let mut denom = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if mask.as_ref().map_or(true, |m| m[j]) {
                    let e = (v - mx).exp();
                    out[[i, j]] = e;
                    denom += e;
                }
            }
            for j in 0..x.ncols() {
                out[[i, j]] /= denom;
            }
        }
        self.push(out, Op::SoftmaxRows(a, mask))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = &self.values[x];
        let g = self.values[gamma].row(0).to_owned();
        let b = self.values[beta].row(0).to_owned();
        let n = xv.ncols() as f64;
        let mut out = Mat::zeros(xv.raw_dim());
        for (i, row) in xv.axis_iter(Axis(0)).enumerate() {
            let mu = row.sum() / n;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..xv.ncols() {
                out[[i, j]] = (row[j] - mu) * inv * g[j] + b[j];
            }
        }
        self.push(out, Op::LayerNorm { x, gamma, beta })
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.values[p].view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows shape mismatch");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.values[x].slice(s![start..start + len, ..]).to_owned();
        self.push(v, Op::SliceRows { x, start, len })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.values[p].view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols shape mismatch");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.values[x].slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols { x, start, len })
    }

    pub fn gather_rows(&mut self, x: NodeId, ids: &[usize]) -> NodeId {
        let src = &self.values[x];
        let mut v = Mat::zeros((ids.len(), src.ncols()));
        for (i, &id) in ids.iter().enumerate() {
            v.row_mut(i).assign(&src.row(id));
        }
        self.push(v, Op::GatherRows { x, ids: ids.to_vec() })
    }

    pub fn dropout(&mut self, x: NodeId, mask: Mat) -> NodeId {
        debug_assert_eq!(mask.raw_dim(), self.values[x].raw_dim());
        let v = &self.values[x] * &mask;
        self.push(v, Op::Dropout { x, mask })
    }

    /// Mean cross-entropy of row softmax vs target ids; returns a (1,1) node.
    pub fn softmax_xent(&mut self, logits: NodeId, targets: Vec<usize>) -> NodeId {
        let x = &self.values[logits];
        debug_assert_eq!(targets.len(), x.nrows());
        let mut total = 0.0;
        for (i, row) in x.axis_iter(Axis(0)).enumerate() {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() + mx;
            total += lse - row[targets[i]];
        }
        let v = Mat::from_elem((1, 1), total / targets.len() as f64);
        self.push(v, Op::SoftmaxXent { logits, targets })
    }

    /// Mean over elements of (pred - target)²; returns a (1,1) node.
    pub fn mse_vs(&mut self, pred: NodeId, target: Mat) -> NodeId {
        let p = &self.values[pred];
        debug_assert_eq!(p.raw_dim(), target.raw_dim());
        let n = (p.nrows() * p.ncols()) as f64;
        let loss = p
            .iter()
            .zip(target.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        let v = Mat::from_elem((1, 1), loss);
        self.push(v, Op::MseVs { pred, target })
    }

    /// Cross-modal contrastive loss over a batch of N matched (image, text)
    /// rows. For each of the 2N anchors the positive is its modality partner
    /// and the denominator runs over the other 2N-1 points; the node value is
    /// the mean per-anchor loss. Errors on rows with zero norm.
    pub fn nt_xent(&mut self, img: NodeId, txt: NodeId, tau: f64) -> Result<NodeId> {
        let (u, _norms) = self.ntxent_normalized(img, txt)?;
        let n2 = u.nrows();
        let sims = u.dot(&u.t());
        let mut total = 0.0;
        for i in 0..n2 {
            let p = partner(i, n2 / 2);
            let mut mx = f64::NEG_INFINITY;
            for k in 0..n2 {
                if k != i {
                    mx = mx.max(sims[[i, k]] / tau);
                }
            }
            let mut denom = 0.0;
            for k in 0..n2 {
                if k != i {
                    denom += (sims[[i, k]] / tau - mx).exp();
                }
            }
            total += denom.ln() + mx - sims[[i, p]] / tau;
        }
        let v = Mat::from_elem((1, 1), total / n2 as f64);
        Ok(self.push(v, Op::NtXent { img, txt, tau }))
    }

    fn ntxent_normalized(&self, img: NodeId, txt: NodeId) -> Result<(Mat, Vec<f64>)> {
        let a = &self.values[img];
        let b = &self.values[txt];
        if a.raw_dim() != b.raw_dim() || a.nrows() == 0 {
            return Err(CoreError::Input(
                "contrastive batches must share a nonempty shape".into(),
            ));
        }
        let n = a.nrows();
        let mut u = Mat::zeros((2 * n, a.ncols()));
        let mut norms = Vec::with_capacity(2 * n);
        for (i, row) in a.axis_iter(Axis(0)).chain(b.axis_iter(Axis(0))).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(CoreError::Numeric(
                    "zero-norm embedding in contrastive batch".into(),
                ));
            }
            for j in 0..a.ncols() {
                u[[i, j]] = row[j] / norm;
            }
            norms.push(norm);
        }
        Ok((u, norms))
    }

    pub fn weighted_sum(&mut self, parts: &[(NodeId, f64)]) -> NodeId {
        let total: f64 = parts.iter().map(|&(id, w)| self.scalar(id) * w).sum();
        let v = Mat::from_elem((1, 1), total);
        self.push(v, Op::WeightedSum(parts.to_vec()))
    }

    /// Reverse pass from `root` (must be (1,1)); returns per-node gradients.
    pub fn backward(&self, root: NodeId) -> Vec<Option<Mat>> {
        let mut grads: Vec<Option<Mat>> = vec![None; self.values.len()];
        grads[root] = Some(Mat::from_elem((1, 1), 1.0));
        for id in (0..=root).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        grads
    }

    fn accumulate(&self, id: NodeId, g: &Mat, grads: &mut [Option<Mat>]) {
        match &self.ops[id] {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = g.dot(&self.values[*b].t());
                let db = self.values[*a].t().dot(g);
                add_grad(grads, *a, da);
                add_grad(grads, *b, db);
            }
            Op::MatMulNT(a, b) => {
                let da = g.dot(&self.values[*b]);
                let db = g.t().dot(&self.values[*a]);
                add_grad(grads, *a, da);
                add_grad(grads, *b, db);
            }
            Op::Add(a, b) => {
                add_grad(grads, *a, g.clone());
                add_grad(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                add_grad(grads, *a, g.clone());
                let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                add_grad(grads, *row, dr);
            }
            Op::Mul(a, b) => {
                add_grad(grads, *a, g * &self.values[*b]);
                add_grad(grads, *b, g * &self.values[*a]);
            }
            Op::Scale(a, c) => {
                add_grad(grads, *a, g.mapv(|x| x * c));
            }
            Op::Gelu(a) => {
                let dx = self.values[*a].mapv(gelu_grad);
                add_grad(grads, *a, g * &dx);
            }
            Op::SoftmaxRows(a, mask) => {
                let y = &self.values[id];
                let mut dx = Mat::zeros(y.raw_dim());
                for i in 0..y.nrows() {
                    let mut dot = 0.0;
                    for j in 0..y.ncols() {
                        dot += g[[i, j]] * y[[i, j]];
                    }
                    for j in 0..y.ncols() {
                        if mask.as_ref().map_or(true, |m| m[j]) {
                            dx[[i, j]] = y[[i, j]] * (g[[i, j]] - dot);
                        }
                    }
                }
                add_grad(grads, *a, dx);
            }
            Op::LayerNorm { x, gamma, beta } => {
                let xv = &self.values[*x];
                let gv = self.values[*gamma].row(0).to_owned();
                let n = xv.ncols() as f64;
                let mut dx = Mat::zeros(xv.raw_dim());
                let mut dgamma = Mat::zeros((1, xv.ncols()));
                let mut dbeta = Mat::zeros((1, xv.ncols()));
                for i in 0..xv.nrows() {
                    let row = xv.row(i);
                    let mu = row.sum() / n;
                    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mu) * inv).collect();
                    let dy = g.row(i);
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..xv.ncols() {
                        let dxh = dy[j] * gv[j];
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xhat[j];
                        dgamma[[0, j]] += dy[j] * xhat[j];
                        dbeta[[0, j]] += dy[j];
                    }
                    for j in 0..xv.ncols() {
                        let dxh = dy[j] * gv[j];
                        dx[[i, j]] =
                            inv * (dxh - sum_dxhat / n - xhat[j] * sum_dxhat_xhat / n);
                    }
                }
                add_grad(grads, *x, dx);
                add_grad(grads, *gamma, dgamma);
                add_grad(grads, *beta, dbeta);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.values[p].nrows();
                    let dp = g.slice(s![start..start + rows, ..]).to_owned();
                    add_grad(grads, p, dp);
                    start += rows;
                }
            }
            Op::SliceRows { x, start, len } => {
                let mut dx = Mat::zeros(self.values[*x].raw_dim());
                dx.slice_mut(s![*start..*start + *len, ..]).assign(g);
                add_grad(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let cols = self.values[p].ncols();
                    let dp = g.slice(s![.., start..start + cols]).to_owned();
                    add_grad(grads, p, dp);
                    start += cols;
                }
            }
            Op::SliceCols { x, start, len } => {
                let mut dx = Mat::zeros(self.values[*x].raw_dim());
                dx.slice_mut(s![.., *start..*start + *len]).assign(g);
                add_grad(grads, *x, dx);
            }
            Op::GatherRows { x, ids } => {
                let mut dx = Mat::zeros(self.values[*x].raw_dim());
                for (i, &id_) in ids.iter().enumerate() {
                    let mut row = dx.row_mut(id_);
                    row += &g.row(i);
                }
                add_grad(grads, *x, dx);
            }
            Op::Dropout { x, mask } => {
                add_grad(grads, *x, g * mask);
            }
            Op::SoftmaxXent { logits, targets } => {
                let x = &self.values[*logits];
                let scale = g[[0, 0]] / targets.len() as f64;
                let mut dx = Mat::zeros(x.raw_dim());
                for (i, row) in x.axis_iter(Axis(0)).enumerate() {
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                    for j in 0..x.ncols() {
                        let p = (row[j] - mx).exp() / denom;
                        dx[[i, j]] = scale * (p - if j == targets[i] { 1.0 } else { 0.0 });
                    }
                }
                add_grad(grads, *logits, dx);
            }
            Op::MseVs { pred, target } => {
                let p = &self.values[*pred];
                let n = (p.nrows() * p.ncols()) as f64;
                let dx = (p - target).mapv(|d| 2.0 * d / n) * g[[0, 0]];
                add_grad(grads, *pred, dx);
            }
            Op::NtXent { img, txt, tau } => {
                let (du_img, du_txt) = self.ntxent_backward(*img, *txt, *tau, g[[0, 0]]);
                add_grad(grads, *img, du_img);
                add_grad(grads, *txt, du_txt);
            }
            Op::WeightedSum(parts) => {
                for &(p, w) in parts {
                    add_grad(grads, p, g.mapv(|x| x * w));
                }
            }
        }
    }

    fn ntxent_backward(&self, img: NodeId, txt: NodeId, tau: f64, gscale: f64) -> (Mat, Mat) {
        let (u, norms) = self
            .ntxent_normalized(img, txt)
            .expect("validated at forward time");
        let n2 = u.nrows();
        let d = u.ncols();
        let n = n2 / 2;
        let sims = u.dot(&u.t());
        // dL/dS
        let mut ds = Mat::zeros((n2, n2));
        let anchor_w = gscale / n2 as f64;
        for i in 0..n2 {
            let p = partner(i, n);
            let mut mx = f64::NEG_INFINITY;
            for k in 0..n2 {
                if k != i {
                    mx = mx.max(sims[[i, k]] / tau);
                }
            }
            let mut denom = 0.0;
            for k in 0..n2 {
                if k != i {
                    denom += (sims[[i, k]] / tau - mx).exp();
                }
            }
            for k in 0..n2 {
                if k != i {
                    let a = (sims[[i, k]] / tau - mx).exp() / denom;
                    ds[[i, k]] += anchor_w * (a - if k == p { 1.0 } else { 0.0 }) / tau;
                }
            }
        }
        // S = U·Uᵀ  =>  dU = (dS + dSᵀ)·U
        let ds_sym = &ds + &ds.t();
        let du = ds_sym.dot(&u);
        // u = z / ||z||  =>  dz = (du - u (u·du)) / ||z||
        let mut dz = Mat::zeros((n2, d));
        for i in 0..n2 {
            let dot: f64 = (0..d).map(|j| u[[i, j]] * du[[i, j]]).sum();
            for j in 0..d {
                dz[[i, j]] = (du[[i, j]] - u[[i, j]] * dot) / norms[i];
            }
        }
        let d_img = dz.slice(s![..n, ..]).to_owned();
        let d_txt = dz.slice(s![n.., ..]).to_owned();
        (d_img, d_txt)
    }
}

fn partner(i: usize, n: usize) -> usize {
    if i < n {
        i + n
    } else {
        i - n
    }
}

fn add_grad(grads: &mut [Option<Mat>], id: NodeId, g: Mat) {
    match &mut grads[id] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_K * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randm(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    /// Central finite differences through an arbitrary tape builder. The
    /// builder receives the current leaf values and must return the scalar
    /// loss node; leaves are perturbed one element at a time.
    fn check_grads(leaves: &[Mat], build: impl Fn(&mut Tape, &[NodeId]) -> NodeId) {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = leaves.iter().map(|l| tape.leaf(l.clone())).collect();
        let root = build(&mut tape, &ids);
        let grads = tape.backward(root);
        let eps = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads[ids[li]].clone().unwrap_or_else(|| Mat::zeros(leaf.raw_dim()));
            for r in 0..leaf.nrows() {
                for c in 0..leaf.ncols() {
                    let eval = |delta: f64| {
                        let mut tape = Tape::new();
                        let ids: Vec<NodeId> = leaves
                            .iter()
                            .enumerate()
                            .map(|(i, l)| {
                                let mut v = l.clone();
                                if i == li {
                                    v[[r, c]] += delta;
                                }
                                tape.leaf(v)
                            })
                            .collect();
                        let root = build(&mut tape, &ids);
                        tape.scalar(root)
                    };
                    let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
                    let a = analytic[[r, c]];
                    let denom = a.abs().max(fd.abs()).max(1e-6);
                    assert!(
                        (a - fd).abs() / denom < 1e-4,
                        "leaf {li} [{r},{c}]: analytic {a} vs fd {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn grad_matmul_add_mul() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randm(&mut rng, 3, 4);
        let b = randm(&mut rng, 4, 2);
        let c = randm(&mut rng, 3, 2);
        check_grads(&[a, b, c], |t, ids| {
            let m = t.matmul(ids[0], ids[1]);
            let s = t.add(m, ids[2]);
            let sq = t.mul(s, s);
            let w = Mat::from_elem((2, 1), 1.0);
            let wl = t.leaf(w);
            let col = t.matmul(sq, wl);
            let ones = t.leaf(Mat::from_elem((1, 3), 1.0));
            t.matmul(ones, col)
        });
    }

    #[test]
    fn grad_matmul_nt_and_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = randm(&mut rng, 3, 4);
        let b = randm(&mut rng, 5, 4);
        check_grads(&[a, b], |t, ids| {
            let m = t.matmul_nt(ids[0], ids[1]);
            let sc = t.scale(m, 0.37);
            let sq = t.mul(sc, sc);
            let w = t.leaf(Mat::from_elem((5, 1), 1.0));
            let col = t.matmul(sq, w);
            let ones = t.leaf(Mat::from_elem((1, 3), 1.0));
            t.matmul(ones, col)
        });
    }

    #[test]
    fn grad_softmax_masked() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = randm(&mut rng, 3, 5);
        let weights = randm(&mut rng, 3, 5);
        let mask = vec![true, true, false, true, true];
        check_grads(&[a, weights], |t, ids| {
            let y = t.softmax_rows(ids[0], Some(mask.clone()));
            let p = t.mul(y, ids[1]);
            let w = t.leaf(Mat::from_elem((5, 1), 1.0));
            let col = t.matmul(p, w);
            let ones = t.leaf(Mat::from_elem((1, 3), 1.0));
            t.matmul(ones, col)
        });
    }

    #[test]
    fn masked_key_weight_is_exactly_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Mat::from_shape_vec((1, 3), vec![5.0, 1.0, -2.0]).unwrap());
        let y = tape.softmax_rows(x, Some(vec![true, false, true]));
        assert_eq!(tape.value(y)[[0, 1]], 0.0);
        let row_sum: f64 = tape.value(y).row(0).sum();
        assert!((row_sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn grad_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randm(&mut rng, 3, 6);
        let gamma = randm(&mut rng, 1, 6);
        let beta = randm(&mut rng, 1, 6);
        let weights = randm(&mut rng, 3, 6);
        check_grads(&[x, gamma, beta, weights], |t, ids| {
            let y = t.layer_norm(ids[0], ids[1], ids[2]);
            let p = t.mul(y, ids[3]);
            let w = t.leaf(Mat::from_elem((6, 1), 1.0));
            let col = t.matmul(p, w);
            let ones = t.leaf(Mat::from_elem((1, 3), 1.0));
            t.matmul(ones, col)
        });
    }

    #[test]
    fn grad_gelu_concat_slice_gather() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = randm(&mut rng, 4, 3);
        let b = randm(&mut rng, 2, 3);
        check_grads(&[a, b], |t, ids| {
            let g1 = t.gelu(ids[0]);
            let cat = t.concat_rows(&[g1, ids[1]]);
            let sl = t.slice_rows(cat, 1, 4);
            let gat = t.gather_rows(sl, &[0, 2, 2, 3]);
            let cols = t.slice_cols(gat, 1, 2);
            let back = t.concat_cols(&[cols, cols]);
            let sq = t.mul(back, back);
            let w = t.leaf(Mat::from_elem((4, 1), 1.0));
            let col = t.matmul(sq, w);
            let ones = t.leaf(Mat::from_elem((1, 4), 1.0));
            t.matmul(ones, col)
        });
    }

    #[test]
    fn grad_softmax_xent() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let logits = randm(&mut rng, 4, 7);
        let targets = vec![2usize, 0, 6, 3];
        check_grads(&[logits], |t, ids| t.softmax_xent(ids[0], targets.clone()));
    }

    #[test]
    fn grad_mse() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pred = randm(&mut rng, 3, 5);
        let target = randm(&mut rng, 3, 5);
        check_grads(&[pred], |t, ids| t.mse_vs(ids[0], target.clone()));
    }

    #[test]
    fn grad_nt_xent() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = randm(&mut rng, 3, 4);
        let txt = randm(&mut rng, 3, 4);
        check_grads(&[img, txt], |t, ids| {
            t.nt_xent(ids[0], ids[1], 0.3).unwrap()
        });
    }

    #[test]
    fn grad_dropout_and_weighted_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = randm(&mut rng, 3, 3);
        let mask = Mat::from_shape_fn((3, 3), |(i, j)| if (i + j) % 2 == 0 { 2.0 } else { 0.0 });
        check_grads(&[a], |t, ids| {
            let d = t.dropout(ids[0], mask.clone());
            let sq = t.mul(d, d);
            let w = t.leaf(Mat::from_elem((3, 1), 1.0));
            let col = t.matmul(sq, w);
            let ones = t.leaf(Mat::from_elem((1, 3), 1.0));
            let s1 = t.matmul(ones, col);
            let s2 = t.mse_vs(ids[0], Mat::zeros((3, 3)));
            t.weighted_sum(&[(s1, 0.5), (s2, 2.0)])
        });
    }

    #[test]
    fn nt_xent_rejects_zero_rows() {
        let mut tape = Tape::new();
        let img = tape.leaf(Mat::zeros((2, 3)));
        let txt = tape.leaf(Mat::from_elem((2, 3), 1.0));
        assert!(matches!(
            tape.nt_xent(img, txt, 0.1),
            Err(CoreError::Numeric(_))
        ));
    }
}
