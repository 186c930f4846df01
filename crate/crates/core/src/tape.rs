//! A small reverse-mode autodiff tape over row-major `f64` matrices.
//!
//! Feature maps are carried as `(sites, channels)` matrices, so a 3×3
//! convolution is an im2col gather followed by a matmul. Values are computed
//! eagerly as ops are recorded; `backward` walks the tape once in reverse.

use ndarray::{s, Array2, Axis, Zip};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Value<'a> {
    Owned(Array2<f64>),
    Borrowed(&'a Array2<f64>),
}

impl Value<'_> {
    fn get(&self) -> &Array2<f64> {
        match self {
            Value::Owned(a) => a,
            Value::Borrowed(a) => a,
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    LayerNormRows(Var),
    Im2Col3 { x: Var, h: usize, w: usize },
    ConcatRows(Var, Var),
    MeanRows(Var),
    L2NormalizeRows(Var),
    GatherRows(Var, Vec<usize>),
    MeanSquaredError(Var, Array2<f64>),
    CrossEntropyRows(Var, Vec<usize>),
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
}

const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        self.nodes[v.0].value.get()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A leaf that borrows its value, used for parameters.
    pub fn param(&mut self, value: &'a Array2<f64>) -> Var {
        self.nodes.push(Node { value: Value::Borrowed(value), op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// Adds the single row `b` (shape `(1, n)`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + &self.value(b).row(0);
        self.push(v, Op::AddRow(a, b))
    }

    /// `a * b` with the `(1, c)` row `b` broadcast over the rows of `a`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * &self.value(b).row(0);
        self.push(v, Op::MulRow(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|x| (x - mean) * inv);
        }
        self.push(v, Op::LayerNormRows(a))
    }

    /// 3×3 zero-padded neighborhood gather: `(h·w, c)` → `(h·w, 9c)`.
    /// Column block `k = 3·(dy+1) + (dx+1)` holds the neighbor at offset (dy, dx).
    pub fn im2col3(&mut self, x: Var, h: usize, w: usize) -> Var {
        let src = self.value(x);
        let c = src.ncols();
        assert_eq!(src.nrows(), h * w, "im2col3 expects h*w rows");
        let mut out = Array2::zeros((h * w, 9 * c));
        for i in 0..h {
            for j in 0..w {
                let r = i * w + j;
                for (k, (di, dj)) in OFFSETS.iter().enumerate() {
                    let (ni, nj) = (i as isize + di, j as isize + dj);
                    if ni < 0 || nj < 0 || ni >= h as isize || nj >= w as isize {
                        continue;
                    }
                    let nr = ni as usize * w + nj as usize;
                    out.slice_mut(s![r, k * c..(k + 1) * c]).assign(&src.row(nr));
                }
            }
        }
        self.push(out, Op::Im2Col3 { x, h, w })
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let v = ndarray::concatenate(Axis(0), &[self.value(a).view(), self.value(b).view()]).expect("column counts match");
        self.push(v, Op::ConcatRows(a, b))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0));
        self.push(v, Op::MeanRows(a))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let n = row.dot(&row).sqrt().max(NORM_EPS);
            row.mapv_inplace(|x| x / n);
        }
        self.push(v, Op::L2NormalizeRows(a))
    }

    /// Embedding lookup: rows `ids` of `table`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut v = Array2::zeros((ids.len(), t.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            v.row_mut(r).assign(&t.row(id));
        }
        self.push(v, Op::GatherRows(table, ids.to_vec()))
    }

    /// Mean over all entries of `(a − target)²`, as a `(1, 1)` value.
    pub fn mse(&mut self, a: Var, target: Array2<f64>) -> Var {
        let x = self.value(a);
        assert_eq!(x.dim(), target.dim());
        let v = Zip::from(x).and(&target).fold(0.0, |acc, &p, &q| acc + (p - q) * (p - q)) / x.len() as f64;
        self.push(Array2::from_elem((1, 1), v), Op::MeanSquaredError(a, target))
    }

    /// Mean over rows of `−log softmax(row)[target]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Var {
        let x = self.value(logits);
        assert_eq!(x.nrows(), targets.len());
        let p = softmax_rows(x);
        let v = targets.iter().enumerate().map(|(r, &t)| -p[[r, t]].max(1e-300).ln()).sum::<f64>() / targets.len() as f64;
        self.push(Array2::from_elem((1, 1), v), Op::CrossEntropyRows(logits, targets.to_vec()))
    }

    /// Reverse pass from a scalar node. Only leaf gradients are kept.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let out = node.value.get();
            match &node.op {
                Op::Leaf => grads[idx] = Some(g),
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulNT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, b) => {
                    accumulate(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    accumulate(&mut grads, *a, g);
                }
                Op::MulRow(a, b) => {
                    let gb = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let ga = g * self.value(*b).row(0);
                    accumulate(&mut grads, *b, gb);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Scale(a, k) => accumulate(&mut grads, *a, g * *k),
                Op::Silu(a) => {
                    let x = self.value(*a);
                    let gx = Zip::from(&g).and(x).map_collect(|&g, &x| {
                        let s = sigmoid(x);
                        g * s * (1.0 + x * (1.0 - s))
                    });
                    accumulate(&mut grads, *a, gx);
                }
                Op::Tanh(a) => {
                    let gx = Zip::from(&g).and(out).map_collect(|&g, &y| g * (1.0 - y * y));
                    accumulate(&mut grads, *a, gx);
                }
                Op::SoftmaxRows(a) => {
                    let mut gx = Zip::from(&g).and(out).map_collect(|&g, &y| g * y);
                    for (mut row, yrow) in gx.rows_mut().into_iter().zip(out.rows()) {
                        let dot = row.sum();
                        Zip::from(&mut row).and(&yrow).for_each(|r, &y| *r -= y * dot);
                    }
                    accumulate(&mut grads, *a, gx);
                }
                Op::LayerNormRows(a) => {
                    let x = self.value(*a);
                    let mut gx = Array2::zeros(x.dim());
                    for ((mut gr, yr), (xr, grow)) in gx.rows_mut().into_iter().zip(out.rows()).zip(x.rows().into_iter().zip(g.rows())) {
                        let n = xr.len() as f64;
                        let mean = xr.sum() / n;
                        let var = xr.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        let mean_g = grow.sum() / n;
                        let mean_gy = grow.dot(&yr) / n;
                        Zip::from(&mut gr).and(&grow).and(&yr).for_each(|d, &g, &y| *d = inv * (g - mean_g - y * mean_gy));
                    }
                    accumulate(&mut grads, *a, gx);
                }
                Op::Im2Col3 { x, h, w } => {
                    let c = self.value(*x).ncols();
                    let mut gx = Array2::zeros((h * w, c));
                    for i in 0..*h {
                        for j in 0..*w {
                            let r = i * w + j;
                            for (k, (di, dj)) in OFFSETS.iter().enumerate() {
                                let (ni, nj) = (i as isize + di, j as isize + dj);
                                if ni < 0 || nj < 0 || ni >= *h as isize || nj >= *w as isize {
                                    continue;
                                }
                                let nr = ni as usize * w + nj as usize;
                                let src = g.slice(s![r, k * c..(k + 1) * c]);
                                let mut dst = gx.row_mut(nr);
                                dst += &src;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::ConcatRows(a, b) => {
                    let na = self.value(*a).nrows();
                    accumulate(&mut grads, *b, g.slice(s![na.., ..]).to_owned());
                    accumulate(&mut grads, *a, g.slice(s![..na, ..]).to_owned());
                }
                Op::MeanRows(a) => {
                    let n = self.value(*a).nrows();
                    let row = g.row(0).mapv(|v| v / n as f64);
                    let gx = Array2::from_shape_fn((n, row.len()), |(_, j)| row[j]);
                    accumulate(&mut grads, *a, gx);
                }
                Op::L2NormalizeRows(a) => {
                    let x = self.value(*a);
                    let mut gx = Array2::zeros(x.dim());
                    for ((mut gr, yr), (xr, grow)) in gx.rows_mut().into_iter().zip(out.rows()).zip(x.rows().into_iter().zip(g.rows())) {
                        let n = xr.dot(&xr).sqrt().max(NORM_EPS);
                        let proj = yr.dot(&grow);
                        Zip::from(&mut gr).and(&grow).and(&yr).for_each(|d, &g, &y| *d = (g - y * proj) / n);
                    }
                    accumulate(&mut grads, *a, gx);
                }
                Op::GatherRows(table, ids) => {
                    let t = self.value(*table);
                    let mut gt = Array2::zeros(t.dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut dst = gt.row_mut(id);
                        dst += &g.row(r);
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::MeanSquaredError(a, target) => {
                    let x = self.value(*a);
                    let k = 2.0 * g[[0, 0]] / x.len() as f64;
                    let gx = Zip::from(x).and(target).map_collect(|&p, &q| k * (p - q));
                    accumulate(&mut grads, *a, gx);
                }
                Op::CrossEntropyRows(a, targets) => {
                    let x = self.value(*a);
                    let mut gx = softmax_rows(x);
                    let k = g[[0, 0]] / targets.len() as f64;
                    for (r, &t) in targets.iter().enumerate() {
                        gx[[r, t]] -= 1.0;
                    }
                    gx.mapv_inplace(|v| v * k);
                    accumulate(&mut grads, *a, gx);
                }
            }
        }
        Gradients { grads }
    }
}

const OFFSETS: [(isize, isize); 9] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 0), (0, 1), (1, -1), (1, 0), (1, 1)];

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads[v.0].take()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}
