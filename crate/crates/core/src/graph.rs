//! Reverse-mode autodiff over dense 2-d tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node holding the forward
//! value, and [`Graph::backward`] walks the tape in reverse accumulating
//! gradients. The op set is exactly what the encoder, the losses, and the
//! classifier need; shape errors are programmer errors and panic, mirroring
//! ndarray. Public entry points validate their inputs before building nodes.
//!
//! Parameters are bound by name via [`Graph::param`]; binding the same name
//! twice returns the same leaf, so tied weights (e.g. the token embedding
//! matrix reused by the MLM output head) accumulate gradients from every
//! use site.

use indexmap::IndexMap;
use ndarray::{concatenate, s, Array1, Array2, Axis};

use crate::scalar::Scalar;

pub type Mat<F> = Array2<F>;

/// Handle to a node in one [`Graph`]. Ids from different graphs must not mix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// One anchor row of a similarity matrix together with the columns of its
/// positive and negative examples.
#[derive(Clone, Debug)]
pub struct InfoNceGroup {
    pub anchor_row: usize,
    pub positive_cols: Vec<usize>,
    pub negative_cols: Vec<usize>,
}

const LAYER_NORM_EPS: f64 = 1e-5;

enum Op<F: Scalar> {
    Leaf,
    Add(TensorId, TensorId),
    /// X [r,c] plus a [1,c] row broadcast over rows.
    AddRow(TensorId, TensorId),
    Scale(TensorId, F),
    Matmul(TensorId, TensorId),
    /// A · Bᵀ
    MatmulNt(TensorId, TensorId),
    Relu(TensorId),
    Gelu(TensorId),
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
    },
    RowSoftmax {
        x: TensorId,
    },
    GatherRows {
        src: TensorId,
        rows: Vec<usize>,
    },
    ConcatCols(Vec<TensorId>),
    ConcatRows(Vec<TensorId>),
    SliceCols {
        src: TensorId,
        start: usize,
        end: usize,
    },
    NormalizeRows(TensorId),
    CrossEntropyMean {
        logits: TensorId,
        targets: Vec<usize>,
    },
    GroupedInfoNce {
        sims: TensorId,
        groups: Vec<InfoNceGroup>,
    },
}

pub struct Graph<F: Scalar> {
    values: Vec<Mat<F>>,
    ops: Vec<Op<F>>,
    grads: Vec<Option<Mat<F>>>,
    bound: IndexMap<String, TensorId>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            ops: Vec::new(),
            grads: Vec::new(),
            bound: IndexMap::new(),
        }
    }

    fn push(&mut self, value: Mat<F>, op: Op<F>) -> TensorId {
        self.values.push(value);
        self.ops.push(op);
        TensorId(self.values.len() - 1)
    }

    /// Constant leaf; receives no gradient.
    pub fn input(&mut self, value: Mat<F>) -> TensorId {
        self.push(value, Op::Leaf)
    }

    pub fn input_row(&mut self, row: &[F]) -> TensorId {
        let m = Mat::from_shape_vec((1, row.len()), row.to_vec()).expect("row shape");
        self.input(m)
    }

    /// Named trainable leaf. Binding an already-bound name returns the
    /// existing node so gradients from all uses accumulate in one place.
    pub fn param(&mut self, name: &str, value: &Mat<F>) -> TensorId {
        if let Some(id) = self.bound.get(name) {
            return *id;
        }
        let id = self.push(value.clone(), Op::Leaf);
        self.bound.insert(name.to_string(), id);
        id
    }

    pub fn value(&self, id: TensorId) -> &Mat<F> {
        &self.values[id.0]
    }

    /// Value of a [1,1] node.
    pub fn scalar(&self, id: TensorId) -> F {
        let v = &self.values[id.0];
        assert_eq!(v.dim(), (1, 1), "scalar() on non-scalar node");
        v[(0, 0)]
    }

    pub fn grad(&self, id: TensorId) -> Option<&Mat<F>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn param_grad(&self, name: &str) -> Option<&Mat<F>> {
        self.bound.get(name).and_then(|id| self.grad(*id))
    }

    /// Bound parameter names with their gradients (after backward).
    pub fn param_grads(&self) -> impl Iterator<Item = (&str, &Mat<F>)> {
        self.bound
            .iter()
            .filter_map(|(name, id)| self.grad(*id).map(|g| (name.as_str(), g)))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(va.dim(), vb.dim(), "add shape mismatch");
        let v = va + vb;
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: TensorId, row: TensorId) -> TensorId {
        let (va, vr) = (&self.values[a.0], &self.values[row.0]);
        assert_eq!(vr.nrows(), 1, "add_row expects a [1,c] row");
        assert_eq!(va.ncols(), vr.ncols(), "add_row width mismatch");
        let v = va + vr;
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: TensorId, c: F) -> TensorId {
        let v = self.values[a.0].mapv(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(va.ncols(), vb.nrows(), "matmul inner dim mismatch");
        let v = va.dot(vb);
        self.push(v, Op::Matmul(a, b))
    }

    /// a · bᵀ
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(va.ncols(), vb.ncols(), "matmul_nt inner dim mismatch");
        let v = va.dot(&vb.t());
        self.push(v, Op::MatmulNt(a, b))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let v = self.values[a.0].mapv(|x| if x > F::zero() { x } else { F::zero() });
        self.push(v, Op::Relu(a))
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let v = self.values[a.0].mapv(gelu_forward);
        self.push(v, Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId) -> TensorId {
        let (vx, vg, vb) = (&self.values[x.0], &self.values[gamma.0], &self.values[beta.0]);
        assert_eq!(vg.dim(), (1, vx.ncols()), "layer_norm gamma shape");
        assert_eq!(vb.dim(), (1, vx.ncols()), "layer_norm beta shape");
        let eps = F::from_f64(LAYER_NORM_EPS);
        let mut out = vx.clone();
        for mut row in out.rows_mut() {
            let n = F::from_f64(row.len() as f64);
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let rstd = (var + eps).sqrt().recip();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * rstd * vg[(0, j)] + vb[(0, j)];
            }
        }
        self.push(out, Op::LayerNorm { x, gamma, beta })
    }

    /// Row-wise softmax. When `valid` is given, invalid columns get
    /// probability zero and contribute nothing to the normalization.
    pub fn row_softmax(&mut self, x: TensorId, valid: Option<Vec<bool>>) -> TensorId {
        let vx = &self.values[x.0];
        if let Some(v) = &valid {
            assert_eq!(v.len(), vx.ncols(), "softmax mask length");
            assert!(v.iter().any(|&b| b), "softmax mask excludes every column");
        }
        let mut out = vx.clone();
        for mut row in out.rows_mut() {
            let mut max = F::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if valid.as_ref().map_or(true, |m| m[j]) && v > max {
                    max = v;
                }
            }
            let mut sum = F::zero();
            for (j, v) in row.iter_mut().enumerate() {
                if valid.as_ref().map_or(true, |m| m[j]) {
                    *v = (*v - max).exp();
                    sum = sum + *v;
                } else {
                    *v = F::zero();
                }
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        self.push(out, Op::RowSoftmax { x })
    }

    pub fn gather_rows(&mut self, src: TensorId, rows: Vec<usize>) -> TensorId {
        let vs = &self.values[src.0];
        let mut out = Mat::zeros((rows.len(), vs.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            assert!(r < vs.nrows(), "gather_rows row {r} out of {}", vs.nrows());
            out.row_mut(i).assign(&vs.row(r));
        }
        self.push(out, Op::GatherRows { src, rows })
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let views: Vec<_> = parts.iter().map(|id| self.values[id.0].view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols shapes");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let views: Vec<_> = parts.iter().map(|id| self.values[id.0].view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows shapes");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, src: TensorId, start: usize, end: usize) -> TensorId {
        let vs = &self.values[src.0];
        assert!(start < end && end <= vs.ncols(), "slice_cols range");
        let v = vs.slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols { src, start, end })
    }

    /// L2-normalize each row. Rows must have nonzero norm; callers
    /// validate this before building the node.
    pub fn normalize_rows(&mut self, a: TensorId) -> TensorId {
        let va = &self.values[a.0];
        let mut out = va.clone();
        for mut row in out.rows_mut() {
            let norm = row.iter().map(|&v| v * v).sum::<F>().sqrt();
            assert!(norm > F::zero(), "normalize_rows on zero-norm row");
            for v in row.iter_mut() {
                *v = *v / norm;
            }
        }
        self.push(out, Op::NormalizeRows(a))
    }

    /// Mean cross-entropy of `logits` rows against integer targets. [1,1].
    pub fn cross_entropy_mean(&mut self, logits: TensorId, targets: Vec<usize>) -> TensorId {
        let vl = &self.values[logits.0];
        assert_eq!(vl.nrows(), targets.len(), "one target per logits row");
        assert!(!targets.is_empty(), "cross_entropy_mean with no targets");
        for &t in &targets {
            assert!(t < vl.ncols(), "target {t} out of {} classes", vl.ncols());
        }
        let mut total = F::zero();
        for (row, &t) in vl.rows().into_iter().zip(&targets) {
            total = total + (log_sum_exp(row.iter().copied()) - row[t]);
        }
        let v = total / F::from_f64(targets.len() as f64);
        let m = Mat::from_elem((1, 1), v);
        self.push(m, Op::CrossEntropyMean { logits, targets })
    }

    /// InfoNCE over a pre-scaled similarity matrix: for each group and each
    /// positive p, adds −log( e^{s_ap} / (e^{s_ap} + Σ_neg e^{s_an}) ). [1,1].
    pub fn grouped_infonce(&mut self, sims: TensorId, groups: Vec<InfoNceGroup>) -> TensorId {
        let vs = &self.values[sims.0];
        let (_rows, cols) = vs.dim();
        let mut total = F::zero();
        for grp in &groups {
            assert!(grp.anchor_row < vs.nrows(), "anchor row in range");
            assert!(!grp.positive_cols.is_empty(), "group needs a positive");
            for &c in grp.positive_cols.iter().chain(&grp.negative_cols) {
                assert!(c < cols, "similarity column in range");
            }
            let row = vs.row(grp.anchor_row);
            for &p in &grp.positive_cols {
                let terms = std::iter::once(row[p]).chain(grp.negative_cols.iter().map(|&c| row[c]));
                total = total + (log_sum_exp(terms) - row[p]);
            }
        }
        let m = Mat::from_elem((1, 1), total);
        self.push(m, Op::GroupedInfoNce { sims, groups })
    }

    /// Run reverse accumulation from a [1,1] loss node.
    pub fn backward(&mut self, loss: TensorId) {
        assert_eq!(self.values[loss.0].dim(), (1, 1), "backward from non-scalar");
        self.grads = (0..self.values.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Mat::from_elem((1, 1), F::one()));

        let Graph { values, ops, grads, .. } = self;
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].clone() else { continue };
            match &ops[i] {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(grads, values, *a, &gout);
                    acc(grads, values, *b, &gout);
                }
                Op::AddRow(a, row) => {
                    acc(grads, values, *a, &gout);
                    let summed = gout.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(grads, values, *row, &summed);
                }
                Op::Scale(a, c) => {
                    acc(grads, values, *a, &gout.mapv(|g| g * *c));
                }
                Op::Matmul(a, b) => {
                    let da = gout.dot(&values[b.0].t());
                    let db = values[a.0].t().dot(&gout);
                    acc(grads, values, *a, &da);
                    acc(grads, values, *b, &db);
                }
                Op::MatmulNt(a, b) => {
                    let da = gout.dot(&values[b.0]);
                    let db = gout.t().dot(&values[a.0]);
                    acc(grads, values, *a, &da);
                    acc(grads, values, *b, &db);
                }
                Op::Relu(a) => {
                    let mut d = gout.clone();
                    d.zip_mut_with(&values[a.0], |g, &x| {
                        if x <= F::zero() {
                            *g = F::zero();
                        }
                    });
                    acc(grads, values, *a, &d);
                }
                Op::Gelu(a) => {
                    let mut d = gout.clone();
                    d.zip_mut_with(&values[a.0], |g, &x| *g = *g * gelu_derivative(x));
                    acc(grads, values, *a, &d);
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let vx = &values[x.0];
                    let vg = &values[gamma.0];
                    let (rows, colsn) = vx.dim();
                    let eps = F::from_f64(LAYER_NORM_EPS);
                    let n = F::from_f64(colsn as f64);
                    let mut dx = Mat::zeros((rows, colsn));
                    let mut dgamma = Mat::zeros((1, colsn));
                    let mut dbeta = Mat::zeros((1, colsn));
                    for r in 0..rows {
                        let xr = vx.row(r);
                        let gr = gout.row(r);
                        let mean = xr.iter().copied().sum::<F>() / n;
                        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
                        let rstd = (var + eps).sqrt().recip();
                        let xhat: Array1<F> = xr.map(|&v| (v - mean) * rstd);
                        let dyhat: Array1<F> =
                            Array1::from_iter(gr.iter().enumerate().map(|(j, &g)| g * vg[(0, j)]));
                        let m1 = dyhat.iter().copied().sum::<F>() / n;
                        let m2 = dyhat
                            .iter()
                            .zip(xhat.iter())
                            .map(|(&a, &b)| a * b)
                            .sum::<F>()
                            / n;
                        for j in 0..colsn {
                            dx[(r, j)] = rstd * (dyhat[j] - m1 - xhat[j] * m2);
                            dgamma[(0, j)] = dgamma[(0, j)] + gr[j] * xhat[j];
                            dbeta[(0, j)] = dbeta[(0, j)] + gr[j];
                        }
                    }
                    acc(grads, values, *x, &dx);
                    acc(grads, values, *gamma, &dgamma);
                    acc(grads, values, *beta, &dbeta);
                }
                Op::RowSoftmax { x } => {
                    let y = &values[i];
                    let mut dx = gout.clone();
                    for r in 0..y.nrows() {
                        let dot = y
                            .row(r)
                            .iter()
                            .zip(gout.row(r).iter())
                            .map(|(&a, &b)| a * b)
                            .sum::<F>();
                        for j in 0..y.ncols() {
                            dx[(r, j)] = y[(r, j)] * (gout[(r, j)] - dot);
                        }
                    }
                    acc(grads, values, *x, &dx);
                }
                Op::GatherRows { src, rows } => {
                    ensure_grad(grads, values, *src);
                    let g = grads[src.0].as_mut().expect("just ensured");
                    for (k, &r) in rows.iter().enumerate() {
                        let mut dst = g.row_mut(r);
                        dst += &gout.row(k);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    let parts = parts.clone();
                    for p in parts {
                        let w = values[p.0].ncols();
                        let slice = gout.slice(s![.., off..off + w]).to_owned();
                        acc(grads, values, p, &slice);
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    let parts = parts.clone();
                    for p in parts {
                        let h = values[p.0].nrows();
                        let slice = gout.slice(s![off..off + h, ..]).to_owned();
                        acc(grads, values, p, &slice);
                        off += h;
                    }
                }
                Op::SliceCols { src, start, end } => {
                    let (src, start, end) = (*src, *start, *end);
                    ensure_grad(grads, values, src);
                    let g = grads[src.0].as_mut().expect("just ensured");
                    let mut region = g.slice_mut(s![.., start..end]);
                    region += &gout;
                }
                Op::NormalizeRows(a) => {
                    let vx = &values[a.0];
                    let y = &values[i];
                    let mut dx = Mat::zeros(vx.dim());
                    for r in 0..vx.nrows() {
                        let norm = vx.row(r).iter().map(|&v| v * v).sum::<F>().sqrt();
                        let dot = y
                            .row(r)
                            .iter()
                            .zip(gout.row(r).iter())
                            .map(|(&a, &b)| a * b)
                            .sum::<F>();
                        for j in 0..vx.ncols() {
                            dx[(r, j)] = (gout[(r, j)] - y[(r, j)] * dot) / norm;
                        }
                    }
                    acc(grads, values, *a, &dx);
                }
                Op::CrossEntropyMean { logits, targets } => {
                    let vl = &values[logits.0];
                    let scale = gout[(0, 0)] / F::from_f64(targets.len() as f64);
                    let mut d = Mat::zeros(vl.dim());
                    for (r, &t) in targets.iter().enumerate() {
                        let row = vl.row(r);
                        let lse = log_sum_exp(row.iter().copied());
                        for j in 0..vl.ncols() {
                            let p = (row[j] - lse).exp();
                            let onehot = if j == t { F::one() } else { F::zero() };
                            d[(r, j)] = (p - onehot) * scale;
                        }
                    }
                    acc(grads, values, *logits, &d);
                }
                Op::GroupedInfoNce { sims, groups } => {
                    let vs = &values[sims.0];
                    let scale = gout[(0, 0)];
                    let mut d = Mat::zeros(vs.dim());
                    for grp in groups {
                        let row = vs.row(grp.anchor_row);
                        for &p in &grp.positive_cols {
                            let lse = log_sum_exp(
                                std::iter::once(row[p])
                                    .chain(grp.negative_cols.iter().map(|&c| row[c])),
                            );
                            let sp = (row[p] - lse).exp();
                            d[(grp.anchor_row, p)] = d[(grp.anchor_row, p)] + (sp - F::one()) * scale;
                            for &c in &grp.negative_cols {
                                let sn = (row[c] - lse).exp();
                                d[(grp.anchor_row, c)] = d[(grp.anchor_row, c)] + sn * scale;
                            }
                        }
                    }
                    acc(grads, values, *sims, &d);
                }
            }
        }
    }
}

fn ensure_grad<F: Scalar>(grads: &mut [Option<Mat<F>>], values: &[Mat<F>], id: TensorId) {
    if grads[id.0].is_none() {
        grads[id.0] = Some(Mat::zeros(values[id.0].dim()));
    }
}

fn acc<F: Scalar>(grads: &mut [Option<Mat<F>>], values: &[Mat<F>], id: TensorId, delta: &Mat<F>) {
    ensure_grad(grads, values, id);
    let g = grads[id.0].as_mut().expect("just ensured");
    *g += delta;
}

fn log_sum_exp<F: Scalar>(vals: impl Iterator<Item = F> + Clone) -> F {
    let max = vals
        .clone()
        .fold(F::neg_infinity(), |m, v| if v > m { v } else { m });
    let sum = vals.map(|v| (v - max).exp()).sum::<F>();
    sum.ln() + max
}

fn gelu_forward<F: Scalar>(x: F) -> F {
    let c = F::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let a = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (F::one() + u.tanh())
}

fn gelu_derivative<F: Scalar>(x: F) -> F {
    let c = F::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let a = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * a * x * x)
}
