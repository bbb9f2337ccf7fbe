//! Reverse-mode differentiation over a linear operation tape.

use std::collections::HashMap;
use std::ops::Range;

use indexmap::IndexMap;
use ndarray::{s, Array2, ArrayView2, Axis, CowArray, Ix2};

use super::{all_finite, c, gelu, gelu_grad, softmax_rows, ParamStore, Real};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Row ranges pairing each query block with the key/value block it attends over.
///
/// A batch is laid out by stacking every sample's rows; attention never
/// crosses from one pair of ranges to another.
#[derive(Debug, Clone, PartialEq)]
pub struct Segments {
    pub query: Vec<Range<usize>>,
    pub key: Vec<Range<usize>>,
}

impl Segments {
    pub fn single(query_rows: usize, key_rows: usize) -> Self {
        Self {
            query: vec![0..query_rows],
            key: vec![0..key_rows],
        }
    }

    /// `n` samples with the same fixed number of query and key rows each.
    pub fn uniform(n: usize, query_rows: usize, key_rows: usize) -> Self {
        Self {
            query: (0..n)
                .map(|i| i * query_rows..(i + 1) * query_rows)
                .collect(),
            key: (0..n).map(|i| i * key_rows..(i + 1) * key_rows).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.query.len()
    }

    pub fn is_empty(&self) -> bool {
        self.query.is_empty()
    }
}

struct AttentionCache<F> {
    q: Var,
    k: Var,
    v: Var,
    segments: Segments,
    heads: usize,
    scale: F,
    /// Softmax weights, indexed `segment * heads + head`.
    probs: Vec<Array2<F>>,
}

enum Op<F> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Array2<F>,
        inv_std: Vec<F>,
    },
    SoftmaxRows(Var),
    TileRows(Var, usize),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    PairMean(Var),
    Sum(Var),
    Attention(Box<AttentionCache<F>>),
    ClampedNll {
        logits: Var,
        targets: Vec<usize>,
        probs: Array2<F>,
        clamped: Vec<bool>,
    },
}

struct Node<'p, F: Real> {
    value: CowArray<'p, F, Ix2>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to every trainable parameter.
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    grads: IndexMap<String, Array2<F>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, name: &str) -> Option<&Array2<F>> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<F>)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Scales every gradient in place.
    pub fn scale(&mut self, s: F) {
        for g in self.grads.values_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<F>> {
        self.grads.get_mut(name)
    }

    /// Adds another gradient set of the same parameters into this one.
    pub fn accumulate(&mut self, other: &Gradients<F>) -> Result<()> {
        for (name, g) in &other.grads {
            match self.grads.get_mut(name) {
                Some(mine) if mine.dim() == g.dim() => *mine += g,
                _ => return Err(Error::config(format!("gradient `{name}` missing or mis-shaped"))),
            }
        }
        Ok(())
    }
}

/// Records operations over tensors so that [`Tape::backward`] can replay them.
pub struct Tape<'p, F: Real> {
    params: &'p ParamStore<F>,
    nodes: Vec<Node<'p, F>>,
    param_vars: HashMap<String, Var>,
}

impl<'p, F: Real> Tape<'p, F> {
    pub fn new(params: &'p ParamStore<F>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore<F> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> ArrayView2<'_, F> {
        self.nodes[v.0].value.view()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value[[0, 0]]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &str, value: Array2<F>, op: Op<F>, requires_grad: bool) -> Result<Var> {
        if !all_finite(&value) {
            return Err(Error::numerical(op_name, "non-finite value produced"));
        }
        self.nodes.push(Node {
            value: CowArray::from(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Array2<F>) -> Result<Var> {
        self.push("constant", value, Op::Leaf, false)
    }

    /// Looks up a parameter by name. Frozen parameters enter as constants.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(name) {
            return Ok(v);
        }
        let p = self
            .params
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))?;
        if !all_finite(&p.value) {
            return Err(Error::numerical(name, "parameter holds non-finite values"));
        }
        self.nodes.push(Node {
            value: CowArray::from(p.value.view()),
            op: if p.trainable { Op::Param } else { Op::Leaf },
            requires_grad: p.trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(name.to_owned(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(Error::config(format!(
                "matmul shape mismatch: {ar}x{ac} times {br}x{bc}"
            )));
        }
        let out = self.value(a).dot(&self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", out, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::config(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = &self.value(a) + &self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push("add", out, Op::Add(a, b), rg)
    }

    /// Adds a 1×n row to every row of an m×n tensor.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, xc) = self.shape(x);
        if self.shape(row) != (1, xc) {
            return Err(Error::config(format!(
                "row broadcast expects 1x{xc}, got {:?}",
                self.shape(row)
            )));
        }
        let out = &self.value(x) + &self.value(row);
        let rg = self.rg(x) || self.rg(row);
        self.push("add_row", out, Op::AddRow(x, row), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::config(format!(
                "mul shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = &self.value(a) * &self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push("mul", out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: F) -> Result<Var> {
        let out = self.value(a).mapv(|v| v * s);
        let rg = self.rg(a);
        self.push("scale", out, Op::Scale(a, s), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).mapv(gelu);
        let rg = self.rg(a);
        self.push("gelu", out, Op::Gelu(a), rg)
    }

    /// Per-row normalization over the feature dimension with affine 1×n gain/bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if self.shape(gain) != (1, cols) || self.shape(bias) != (1, cols) {
            return Err(Error::config(format!(
                "layer norm over width {cols} got gain {:?} and bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let xv = self.value(x);
        let mut xhat = Array2::zeros((rows, cols));
        let mut inv_std = Vec::with_capacity(rows);
        let n = c::<F>(cols as f64);
        for (r, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let is = F::one() / (var + c(eps)).sqrt();
            inv_std.push(is);
            for (o, &v) in xhat.row_mut(r).iter_mut().zip(row.iter()) {
                *o = (v - mean) * is;
            }
        }
        let out = &(&xhat * &self.value(gain)) + &self.value(bias);
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = softmax_rows(&self.value(a).to_owned());
        let rg = self.rg(a);
        self.push("softmax", out, Op::SoftmaxRows(a), rg)
    }

    /// Stacks `n` copies of `a` vertically.
    pub fn tile_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        if n == 0 {
            return Err(Error::config("tile_rows with zero copies"));
        }
        let v = self.value(a);
        let views: Vec<_> = (0..n).map(|_| v.view()).collect();
        let out = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::config(format!("tile_rows: {e}")))?;
        let rg = self.rg(a);
        self.push("tile_rows", out, Op::TileRows(a, n), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::config("concat_rows of nothing"));
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::config(format!("concat_rows: {e}")))?;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Output row `i` is input row `index[i]`.
    pub fn gather_rows(&mut self, a: Var, index: Vec<usize>) -> Result<Var> {
        let (rows, _) = self.shape(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::config(format!(
                "gather_rows index {bad} out of range for {rows} rows"
            )));
        }
        let out = self.value(a).select(Axis(0), &index);
        let rg = self.rg(a);
        self.push("gather_rows", out, Op::GatherRows(a, index), rg)
    }

    /// Averages consecutive row pairs: output row `i` = mean of rows `2i`, `2i+1`.
    pub fn pair_mean(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if rows % 2 != 0 {
            return Err(Error::config(format!("pair_mean needs an even row count, got {rows}")));
        }
        let v = self.value(a);
        let half = c::<F>(0.5);
        let out = Array2::from_shape_fn((rows / 2, cols), |(i, j)| {
            (v[[2 * i, j]] + v[[2 * i + 1, j]]) * half
        });
        let rg = self.rg(a);
        self.push("pair_mean", out, Op::PairMean(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push("sum", Array2::from_elem((1, 1), s), Op::Sum(a), rg)
    }

    /// Scaled dot-product attention within each segment pair, split across `heads`.
    ///
    /// `q` and `k` share width `d`; `v` has width `dv`. Both must divide by
    /// `heads`. Output is (rows of `q`)×`dv`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, segments: &Segments, heads: usize) -> Result<Var> {
        let (qr, d) = self.shape(q);
        let (kr, kd) = self.shape(k);
        let (vr, dv) = self.shape(v);
        if kd != d || vr != kr {
            return Err(Error::config(format!(
                "attention shapes q {qr}x{d}, k {kr}x{kd}, v {vr}x{dv} are incompatible"
            )));
        }
        if heads == 0 || d % heads != 0 || dv % heads != 0 {
            return Err(Error::config(format!(
                "attention width {d}/{dv} not divisible by {heads} heads"
            )));
        }
        if segments.query.len() != segments.key.len() {
            return Err(Error::config("attention segment lists differ in length"));
        }
        for (qs, ks) in segments.query.iter().zip(&segments.key) {
            if qs.end > qr || ks.end > kr || ks.is_empty() {
                return Err(Error::config(format!(
                    "attention segment {qs:?}/{ks:?} invalid for {qr} query and {kr} key rows"
                )));
            }
        }
        let dk = d / heads;
        let dvh = dv / heads;
        let scale = c::<F>(1.0 / (dk as f64).sqrt());
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = Array2::zeros((qr, dv));
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for (qs, ks) in segments.query.iter().zip(&segments.key) {
            for h in 0..heads {
                let qh = qv.slice(s![qs.clone(), h * dk..(h + 1) * dk]);
                let kh = kv.slice(s![ks.clone(), h * dk..(h + 1) * dk]);
                let vh = vv.slice(s![ks.clone(), h * dvh..(h + 1) * dvh]);
                let scores = qh.dot(&kh.t()).mapv(|x| x * scale);
                let p = softmax_rows(&scores);
                out.slice_mut(s![qs.clone(), h * dvh..(h + 1) * dvh])
                    .assign(&p.dot(&vh));
                probs.push(p);
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            "attention",
            out,
            Op::Attention(Box::new(AttentionCache {
                q,
                k,
                v,
                segments: segments.clone(),
                heads,
                scale,
                probs,
            })),
            rg,
        )
    }

    /// Softmax weights recorded by an attention node, `segment * heads + head`.
    pub fn attention_weights(&self, v: Var) -> Option<&[Array2<F>]> {
        match &self.nodes[v.0].op {
            Op::Attention(cache) => Some(&cache.probs),
            _ => None,
        }
    }

    /// Softmax weights of every attention node, in recording order.
    pub fn all_attention_weights(&self) -> Vec<&[Array2<F>]> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Attention(cache) => Some(cache.probs.as_slice()),
                _ => None,
            })
            .collect()
    }

    /// Sum over rows of `-ln(clamp(softmax(row)[target], lo, 1 - lo))`.
    pub fn clamped_nll(&mut self, logits: Var, targets: &[usize], lo: f64) -> Result<Var> {
        let (rows, cols) = self.shape(logits);
        if targets.len() != rows {
            return Err(Error::config(format!(
                "clamped_nll: {} targets for {rows} rows",
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::data(format!("target index {t} outside {cols} classes")));
        }
        let probs = softmax_rows(&self.value(logits).to_owned());
        let (lo, hi) = (lo, 1.0 - lo);
        let mut total = 0.0f64;
        let mut clamped = Vec::with_capacity(rows);
        for (r, &t) in targets.iter().enumerate() {
            let p = probs[[r, t]].as_f64();
            let pc = p.clamp(lo, hi);
            clamped.push(p < lo || p > hi);
            total -= pc.ln();
        }
        let rg = self.rg(logits);
        self.push(
            "clamped_nll",
            Array2::from_elem((1, 1), c(total)),
            Op::ClampedNll {
                logits,
                targets: targets.to_vec(),
                probs,
                clamped,
            },
            rg,
        )
    }

    /// Gradients of the 1×1 node `out` with respect to every trainable parameter.
    pub fn backward(&self, out: Var) -> Result<Gradients<F>> {
        if self.shape(out) != (1, 1) {
            return Err(Error::config(format!(
                "backward needs a scalar output, got {:?}",
                self.shape(out)
            )));
        }
        let mut grads: Vec<Option<Array2<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            if matches!(node.op, Op::Param) {
                grads[idx] = Some(g);
            }
        }

        let mut named = IndexMap::new();
        for (name, p) in self.params.iter() {
            if !p.trainable {
                continue;
            }
            let g = self
                .param_vars
                .get(name)
                .and_then(|v| grads[v.0].clone())
                .unwrap_or_else(|| Array2::zeros(p.value.dim()));
            if !all_finite(&g) {
                return Err(Error::numerical(name, "non-finite gradient"));
            }
            named.insert(name.to_owned(), g);
        }
        Ok(Gradients { grads: named })
    }

    fn backprop_node(&self, node: &Node<'p, F>, g: &Array2<F>, grads: &mut [Option<Array2<F>>]) -> Result<()> {
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let ga = g.dot(&self.value(*b).t());
                    self.acc(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = self.value(*a).t().dot(g);
                    self.acc(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.acc_ref(grads, *a, g);
                self.acc_ref(grads, *b, g);
            }
            Op::AddRow(x, row) => {
                self.acc_ref(grads, *x, g);
                if self.rg(*row) {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.acc(grads, *row, gr);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.acc(grads, *a, g * &self.value(*b));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, g * &self.value(*a));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.acc(grads, *a, g.mapv(|v| v * s));
            }
            Op::Gelu(a) => {
                let mut ga = self.value(*a).mapv(gelu_grad);
                ga *= g;
                self.acc(grads, *a, ga);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                if self.rg(*bias) {
                    self.acc(grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.rg(*gain) {
                    let gg = (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.acc(grads, *gain, gg);
                }
                if self.rg(*x) {
                    let gain_v = self.value(*gain);
                    let gain_row = gain_v.row(0);
                    let n = c::<F>(xhat.ncols() as f64);
                    let mut gx = Array2::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let dxhat: Vec<F> = g
                            .row(r)
                            .iter()
                            .zip(gain_row.iter())
                            .map(|(&a, &b)| a * b)
                            .collect();
                        let xr = xhat.row(r);
                        let mean_d = dxhat.iter().copied().sum::<F>() / n;
                        let mean_dx = dxhat
                            .iter()
                            .zip(xr.iter())
                            .map(|(&a, &b)| a * b)
                            .sum::<F>()
                            / n;
                        for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = inv_std[r] * (dxhat[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                    self.acc(grads, *x, gx);
                }
            }
            Op::SoftmaxRows(a) => {
                let p = &node.value;
                let mut ga = g * p;
                for (mut row, prow) in ga.rows_mut().into_iter().zip(p.rows()) {
                    let dot = row.sum();
                    row.zip_mut_with(&prow, |o, &pv| *o -= pv * dot);
                }
                self.acc(grads, *a, ga);
            }
            Op::TileRows(a, n) => {
                let (rows, cols) = self.shape(*a);
                let mut ga = Array2::zeros((rows, cols));
                for i in 0..*n {
                    ga += &g.slice(s![i * rows..(i + 1) * rows, ..]);
                }
                self.acc(grads, *a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let (rows, _) = self.shape(p);
                    if self.rg(p) {
                        self.acc(grads, p, g.slice(s![start..start + rows, ..]).to_owned());
                    }
                    start += rows;
                }
            }
            Op::GatherRows(a, index) => {
                let mut ga = Array2::zeros(self.shape(*a));
                for (i, &src) in index.iter().enumerate() {
                    let mut dst = ga.row_mut(src);
                    dst += &g.row(i);
                }
                self.acc(grads, *a, ga);
            }
            Op::PairMean(a) => {
                let (rows, cols) = self.shape(*a);
                let half = c::<F>(0.5);
                let ga = Array2::from_shape_fn((rows, cols), |(i, j)| g[[i / 2, j]] * half);
                self.acc(grads, *a, ga);
            }
            Op::Sum(a) => {
                let ga = Array2::from_elem(self.shape(*a), g[[0, 0]]);
                self.acc(grads, *a, ga);
            }
            Op::Attention(cache) => self.backprop_attention(cache, g, grads),
            Op::ClampedNll {
                logits,
                targets,
                probs,
                clamped,
            } => {
                let upstream = g[[0, 0]];
                let mut gl = Array2::zeros(probs.dim());
                for (r, &t) in targets.iter().enumerate() {
                    if clamped[r] {
                        continue;
                    }
                    for j in 0..probs.ncols() {
                        let onehot = if j == t { F::one() } else { F::zero() };
                        gl[[r, j]] = upstream * (probs[[r, j]] - onehot);
                    }
                }
                self.acc(grads, *logits, gl);
            }
        }
        Ok(())
    }

    fn backprop_attention(&self, cache: &AttentionCache<F>, g: &Array2<F>, grads: &mut [Option<Array2<F>>]) {
        let (qv, kv, vv) = (self.value(cache.q), self.value(cache.k), self.value(cache.v));
        let heads = cache.heads;
        let dk = qv.ncols() / heads;
        let dvh = vv.ncols() / heads;
        let mut gq = Array2::zeros(qv.dim());
        let mut gk = Array2::zeros(kv.dim());
        let mut gv = Array2::zeros(vv.dim());
        for (si, (qs, ks)) in cache.segments.query.iter().zip(&cache.segments.key).enumerate() {
            for h in 0..heads {
                let p = &cache.probs[si * heads + h];
                let qcols = h * dk..(h + 1) * dk;
                let vcols = h * dvh..(h + 1) * dvh;
                let go = g.slice(s![qs.clone(), vcols.clone()]);
                let vh = vv.slice(s![ks.clone(), vcols.clone()]);
                {
                    let mut dst = gv.slice_mut(s![ks.clone(), vcols.clone()]);
                    dst += &p.t().dot(&go);
                }
                let dp = go.dot(&vh.t());
                let mut ds = &dp * p;
                for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                    let dot = row.sum();
                    row.zip_mut_with(&prow, |o, &pv| *o -= pv * dot);
                }
                ds.mapv_inplace(|x| x * cache.scale);
                let kh = kv.slice(s![ks.clone(), qcols.clone()]);
                let qh = qv.slice(s![qs.clone(), qcols.clone()]);
                {
                    let mut dst = gq.slice_mut(s![qs.clone(), qcols.clone()]);
                    dst += &ds.dot(&kh);
                }
                {
                    let mut dst = gk.slice_mut(s![ks.clone(), qcols]);
                    dst += &ds.t().dot(&qh);
                }
            }
        }
        if self.rg(cache.q) {
            self.acc(grads, cache.q, gq);
        }
        if self.rg(cache.k) {
            self.acc(grads, cache.k, gk);
        }
        if self.rg(cache.v) {
            self.acc(grads, cache.v, gv);
        }
    }

    fn acc(&self, grads: &mut [Option<Array2<F>>], v: Var, g: Array2<F>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_ref(&self, grads: &mut [Option<Array2<F>>], v: Var, g: &Array2<F>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += g,
            slot @ None => *slot = Some(g.clone()),
        }
    }
}

/// Evaluates a scalar-producing computation and its parameter gradients.
pub fn value_and_grad<F: Real>(
    params: &ParamStore<F>,
    computation: impl FnOnce(&mut Tape<'_, F>) -> Result<Var>,
) -> Result<(F, Gradients<F>)> {
    let mut tape = Tape::new(params);
    let out = computation(&mut tape)?;
    if tape.shape(out) != (1, 1) {
        return Err(Error::config("computation must return a 1x1 value"));
    }
    let value = tape.scalar(out);
    let grads = tape.backward(out)?;
    Ok((value, grads))
}
