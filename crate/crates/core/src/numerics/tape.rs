//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Tape`] is an append-only arena: every operation pushes one node that
//! stores its forward value and the indices of its parents, so parents always
//! precede children. [`Tape::backward`] walks the arena once in reverse.

use super::linalg::{cholesky, inverse_from_cholesky};
use super::matrix::gemm_into;
use super::{Matrix, Scalar};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, T),
    ScaleBy(Var, Var),
    Shift(Var),
    AddCol(Var, Var),
    Transpose(Var),
    Relu(Var),
    SoftmaxCols(Var),
    LogDet {
        a: Var,
        inv: Matrix<T>,
    },
    Sum(Var),
    HalfSqNorm(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix<T>,
        inv_std: Vec<T>,
    },
    HeadGram {
        v: Var,
        heads: usize,
        seg: usize,
        scale: T,
    },
    HeadMix {
        v: Var,
        a: Var,
        heads: usize,
        seg: usize,
    },
    Assemble {
        patches: Var,
        cls: Option<Var>,
        pos: Var,
        batch: usize,
    },
    SelectCols {
        a: Var,
        idx: Vec<usize>,
    },
    SegmentMean {
        a: Var,
        seg: usize,
    },
    SmoothedCe {
        logits: Var,
        probs: Matrix<T>,
        targets: Matrix<T>,
    },
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording of one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar root with respect to every leaf of the tape.
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
    shapes: Vec<(usize, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`; leaves the root does not depend on get zeros.
    pub fn get(&self, v: Var) -> Matrix<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Matrix<T> {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

fn check_same(op: &'static str, a: &Matrix<impl Scalar>, b: &Matrix<impl Scalar>) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

/// Strided sub-block gemm: `c[blk] = alpha·op(a[blk])·op(b[blk]) + beta·c[blk]`.
/// Offsets and strides index directly into the row-major buffers.
#[allow(clippy::too_many_arguments)]
fn block_gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: (&[T], usize, isize, isize),
    b: (&[T], usize, isize, isize),
    beta: T,
    c: (&mut [T], usize, isize, isize),
) {
    fn span(rows: usize, cols: usize, off: usize, rs: isize, cs: isize) -> usize {
        off + (rows.saturating_sub(1)) * rs as usize + (cols.saturating_sub(1)) * cs as usize
    }
    assert!(span(m, k, a.1, a.2, a.3) < a.0.len());
    assert!(span(k, n, b.1, b.2, b.3) < b.0.len());
    assert!(span(m, n, c.1, c.2, c.3) < c.0.len());
    // SAFETY: the asserts above keep every accessed element inside its slice.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            alpha,
            a.0.as_ptr().add(a.1),
            a.2,
            a.3,
            b.0.as_ptr().add(b.1),
            b.2,
            b.3,
            beta,
            c.0.as_mut_ptr().add(c.1),
            c.2,
            c.3,
        );
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf: receives a gradient.
    pub fn param(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf: no gradient flows into it.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn matmul_impl(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let value = super::matrix::gemm(ta, self.value(a), tb, self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul { a, b, ta, tb }, ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, false, b, false)
    }

    /// `aᵀ·b`
    pub fn t_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, true, b, false)
    }

    /// `a·bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, false, b, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Sub(a, b), ng))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Hadamard(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    /// `s·a` for a 1×1 node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            return shape_err("scale_by", format!("scale must be 1x1, got {:?}", self.shape(s)));
        }
        let value = self.value(a).scale(self.value(s).item());
        let ng = self.ng(a) || self.ng(s);
        Ok(self.push(value, Op::ScaleBy(a, s), ng))
    }

    /// `a + c` entrywise for a constant scalar `c`.
    pub fn shift(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(value, Op::Shift(a), ng)
    }

    /// Adds the column vector `bias` to every column of `a`.
    pub fn add_col(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(bias) != (r, 1) {
            return shape_err("add_col", format!("bias {:?} for {r}x{c}", self.shape(bias)));
        }
        let b = self.value(bias).as_slice().to_vec();
        let mut value = self.value(a).clone();
        for i in 0..r {
            for x in &mut value.as_mut_slice()[i * c..(i + 1) * c] {
                *x += b[i];
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(value, Op::AddCol(a, bias), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(value, Op::Transpose(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).relu();
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn softmax_cols(&mut self, a: Var) -> Var {
        let value = self.value(a).softmax_cols();
        let ng = self.ng(a);
        self.push(value, Op::SoftmaxCols(a), ng)
    }

    /// `ln det a` of a symmetric positive-definite node; gradient `a⁻¹`.
    pub fn logdet(&mut self, a: Var) -> Result<Var> {
        let l = cholesky(self.value(a))?;
        let two = T::of(2.0);
        let ld: T = (0..l.rows()).map(|i| two * l[(i, i)].ln()).sum();
        let inv = inverse_from_cholesky(&l);
        let ng = self.ng(a);
        Ok(self.push(Matrix::scalar(ld), Op::LogDet { a, inv }, ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::Sum(a), ng)
    }

    /// `½‖a‖²_F`
    pub fn half_sq_norm(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).frobenius_sq() * T::of(0.5));
        let ng = self.ng(a);
        self.push(value, Op::HalfSqNorm(a), ng)
    }

    /// Per-column standardization over the rows, then `gamma ⊙ x̂ + beta`.
    pub fn layer_norm_cols(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (d, m) = self.shape(x);
        if self.shape(gamma) != (d, 1) || self.shape(beta) != (d, 1) {
            return shape_err(
                "layer_norm_cols",
                format!("affine {:?}/{:?} for width {d}", self.shape(gamma), self.shape(beta)),
            );
        }
        let xv = self.value(x);
        let g = self.value(gamma).as_slice();
        let b = self.value(beta).as_slice();
        let dn = T::of(d as f64);
        let mut xhat = Matrix::zeros(d, m);
        let mut out = Matrix::zeros(d, m);
        let mut inv_std = Vec::with_capacity(m);
        let mut mean = vec![T::zero(); m];
        for i in 0..d {
            for (j, mu) in mean.iter_mut().enumerate() {
                *mu += xv[(i, j)];
            }
        }
        for mu in &mut mean {
            *mu /= dn;
        }
        let mut var = vec![T::zero(); m];
        for i in 0..d {
            for j in 0..m {
                let c = xv[(i, j)] - mean[j];
                var[j] += c * c;
            }
        }
        for v in &var {
            inv_std.push((*v / dn + eps).sqrt().recip());
        }
        for i in 0..d {
            for j in 0..m {
                let h = (xv[(i, j)] - mean[j]) * inv_std[j];
                xhat[(i, j)] = h;
                out[(i, j)] = g[i] * h + b[i];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Per-head, per-segment Gram blocks.
    ///
    /// `v` is `(heads·p)×(batch·seg)`: rows split into heads, columns into
    /// segments of `seg` tokens. The result is `seg × (heads·batch·seg)`
    /// where block `(k, b)` (columns starting at `(k·batch + b)·seg`) holds
    /// `scale · V_{kb}ᵀ V_{kb}`.
    pub fn head_gram(&mut self, v: Var, heads: usize, seg: usize, scale: T) -> Result<Var> {
        let (rows, cols) = self.shape(v);
        if heads == 0 || rows % heads != 0 || seg == 0 || cols % seg != 0 {
            return shape_err(
                "head_gram",
                format!("{rows}x{cols} with {heads} heads and segments of {seg}"),
            );
        }
        let p = rows / heads;
        let batch = cols / seg;
        let out_cols = heads * batch * seg;
        let mut out = Matrix::zeros(seg, out_cols);
        let vs = self.value(v).as_slice();
        for k in 0..heads {
            for b in 0..batch {
                let off = k * p * cols + b * seg;
                block_gemm(
                    seg,
                    p,
                    seg,
                    scale,
                    (vs, off, 1, cols as isize),
                    (vs, off, cols as isize, 1),
                    T::zero(),
                    (out.as_mut_slice(), (k * batch + b) * seg, out_cols as isize, 1),
                );
            }
        }
        let ng = self.ng(v);
        Ok(self.push(out, Op::HeadGram { v, heads, seg, scale }, ng))
    }

    /// Per-head, per-segment mixing `V_{kb} · A_{kb}` using blocks laid out as
    /// in [`Tape::head_gram`]. Output has the shape of `v`.
    pub fn head_mix(&mut self, v: Var, a: Var, heads: usize, seg: usize) -> Result<Var> {
        let (rows, cols) = self.shape(v);
        if heads == 0 || rows % heads != 0 || seg == 0 || cols % seg != 0 {
            return shape_err("head_mix", format!("{rows}x{cols}, {heads} heads, seg {seg}"));
        }
        let p = rows / heads;
        let batch = cols / seg;
        let a_cols = heads * batch * seg;
        if self.shape(a) != (seg, a_cols) {
            return shape_err(
                "head_mix",
                format!("mixing matrix {:?}, expected {seg}x{a_cols}", self.shape(a)),
            );
        }
        let mut out = Matrix::zeros(rows, cols);
        let vs = self.value(v).as_slice();
        let asl = self.value(a).as_slice();
        for k in 0..heads {
            for b in 0..batch {
                let off = k * p * cols + b * seg;
                block_gemm(
                    p,
                    seg,
                    seg,
                    T::one(),
                    (vs, off, cols as isize, 1),
                    (asl, (k * batch + b) * seg, a_cols as isize, 1),
                    T::zero(),
                    (out.as_mut_slice(), off, cols as isize, 1),
                );
            }
        }
        let ng = self.ng(v) || self.ng(a);
        Ok(self.push(out, Op::HeadMix { v, a, heads, seg }, ng))
    }

    /// Builds the token matrix `d × (batch·N)`: per sample, an optional
    /// class token followed by that sample's patch tokens, plus the positional
    /// embedding `pos` (`d × N`).
    pub fn assemble_tokens(&mut self, patches: Var, cls: Option<Var>, pos: Var, batch: usize) -> Result<Var> {
        let (d, pc) = self.shape(patches);
        let (pd, n) = self.shape(pos);
        let c = usize::from(cls.is_some());
        if batch == 0 || pc % batch != 0 || pd != d || n != pc / batch + c {
            return shape_err(
                "assemble_tokens",
                format!("patches {d}x{pc}, pos {pd}x{n}, batch {batch}"),
            );
        }
        if let Some(cv) = cls {
            if self.shape(cv) != (d, 1) {
                return shape_err("assemble_tokens", format!("cls {:?}", self.shape(cv)));
            }
        }
        let np = pc / batch;
        let pv = self.value(patches);
        let posv = self.value(pos);
        let clsv = cls.map(|cv| self.value(cv));
        let mut out = Matrix::zeros(d, batch * n);
        for i in 0..d {
            for b in 0..batch {
                for t in 0..n {
                    let base = if t < c {
                        clsv.map_or(T::zero(), |m| m[(i, 0)])
                    } else {
                        pv[(i, b * np + t - c)]
                    };
                    out[(i, b * n + t)] = base + posv[(i, t)];
                }
            }
        }
        let ng = self.ng(patches) || self.ng(pos) || cls.is_some_and(|cv| self.ng(cv));
        Ok(self.push(
            out,
            Op::Assemble {
                patches,
                cls,
                pos,
                batch,
            },
            ng,
        ))
    }

    pub fn select_cols(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let value = self.value(a).select_cols(&idx)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::SelectCols { a, idx }, ng))
    }

    /// Mean over consecutive column segments of length `seg`.
    pub fn segment_mean(&mut self, a: Var, seg: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if seg == 0 || c % seg != 0 {
            return shape_err("segment_mean", format!("{c} columns, segment {seg}"));
        }
        let nseg = c / seg;
        let av = self.value(a);
        let inv = T::of(seg as f64).recip();
        let value = Matrix::from_fn(r, nseg, |i, s| (0..seg).map(|t| av[(i, s * seg + t)]).sum::<T>() * inv);
        let ng = self.ng(a);
        Ok(self.push(value, Op::SegmentMean { a, seg }, ng))
    }

    /// Label-smoothed cross-entropy averaged over the columns of `logits`
    /// (`classes × batch`). Target mass is `1 − s + s/C` on the label and
    /// `s/C` elsewhere.
    pub fn smoothed_cross_entropy(&mut self, logits: Var, labels: &[usize], smoothing: T) -> Result<Var> {
        let (classes, batch) = self.shape(logits);
        if labels.len() != batch {
            return shape_err(
                "smoothed_cross_entropy",
                format!("{} labels for batch {batch}", labels.len()),
            );
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Input(format!("label {bad} out of range for {classes} classes")));
        }
        if !(smoothing >= T::zero() && smoothing < T::one()) {
            return Err(Error::Parameter {
                name: "label_smoothing",
                detail: format!("{smoothing} not in [0, 1)"),
            });
        }
        let lv = self.value(logits);
        let probs = lv.softmax_cols();
        let off = smoothing / T::of(classes as f64);
        let targets = Matrix::from_fn(classes, batch, |c, b| {
            if labels[b] == c {
                T::one() - smoothing + off
            } else {
                off
            }
        });
        let mut total = T::zero();
        for b in 0..batch {
            let mx = (0..classes).fold(T::neg_infinity(), |m, c| m.max(lv[(c, b)]));
            let lse = mx + (0..classes).map(|c| (lv[(c, b)] - mx).exp()).sum::<T>().ln();
            for c in 0..classes {
                total -= targets[(c, b)] * (lv[(c, b)] - lse);
            }
        }
        let value = Matrix::scalar(total / T::of(batch as f64));
        let ng = self.ng(logits);
        Ok(self.push(value, Op::SmoothedCe { logits, probs, targets }, ng))
    }

    /// Reverse sweep from the scalar node `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.shape(root) != (1, 1) {
            return Err(Error::Contract(format!(
                "gradient root must be scalar, got {:?}",
                self.shape(root)
            )));
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::scalar(T::one()));
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads)?;
        }
        let mut leaf_grads = Vec::with_capacity(self.nodes.len());
        let mut shapes = Vec::with_capacity(self.nodes.len());
        for (node, g) in self.nodes.iter().zip(grads) {
            shapes.push(node.value.shape());
            leaf_grads.push(if matches!(node.op, Op::Leaf) { g } else { None });
        }
        Ok(Gradients {
            grads: leaf_grads,
            shapes,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) -> Result<()> {
        if !self.ng(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    /// Accumulates `alpha·op(x)·op(y)` into the gradient slot of `v`.
    #[allow(clippy::too_many_arguments)]
    fn accumulate_gemm(
        &self,
        grads: &mut [Option<Matrix<T>>],
        v: Var,
        tx: bool,
        x: &Matrix<T>,
        ty: bool,
        y: &Matrix<T>,
    ) -> Result<()> {
        if !self.ng(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => gemm_into(T::one(), tx, x, ty, y, T::one(), existing),
            slot => {
                let (r, c) = self.shape(v);
                let mut m = Matrix::zeros(r, c);
                gemm_into(T::one(), tx, x, ty, y, T::zero(), &mut m)?;
                *slot = Some(m);
                Ok(())
            }
        }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Matrix<T>>], v: Var) -> &'g mut Matrix<T> {
        let (r, c) = self.shape(v);
        grads[v.0].get_or_insert_with(|| Matrix::zeros(r, c))
    }

    fn backprop(&self, node: &Node<T>, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let av = self.value(a);
                let bv = self.value(b);
                if ta {
                    self.accumulate_gemm(grads, a, tb, bv, true, g)?;
                } else {
                    self.accumulate_gemm(grads, a, false, g, !tb, bv)?;
                }
                if tb {
                    self.accumulate_gemm(grads, b, true, g, ta, av)?;
                } else {
                    self.accumulate_gemm(grads, b, !ta, av, false, g)?;
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone())?;
                self.accumulate(grads, b, g.clone())?;
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone())?;
                self.accumulate(grads, b, g.scale(-T::one()))?;
            }
            &Op::Hadamard(a, b) => {
                if self.ng(a) {
                    self.accumulate(grads, a, g.hadamard(self.value(b))?)?;
                }
                if self.ng(b) {
                    self.accumulate(grads, b, g.hadamard(self.value(a))?)?;
                }
            }
            &Op::Scale(a, s) => self.accumulate(grads, a, g.scale(s))?,
            &Op::ScaleBy(a, s) => {
                let sv = self.value(s).item();
                if self.ng(a) {
                    self.accumulate(grads, a, g.scale(sv))?;
                }
                if self.ng(s) {
                    let ds = g.hadamard(self.value(a))?.sum();
                    self.accumulate(grads, s, Matrix::scalar(ds))?;
                }
            }
            &Op::Shift(a) => self.accumulate(grads, a, g.clone())?,
            &Op::AddCol(a, bias) => {
                self.accumulate(grads, a, g.clone())?;
                if self.ng(bias) {
                    let (r, c) = g.shape();
                    let col = Matrix::from_fn(r, 1, |i, _| g.as_slice()[i * c..(i + 1) * c].iter().copied().sum());
                    self.accumulate(grads, bias, col)?;
                }
            }
            &Op::Transpose(a) => self.accumulate(grads, a, g.transpose())?,
            &Op::Relu(a) => {
                let out = &node.value;
                let d = g.zip_map(
                    out,
                    "relu_backward",
                    |gi, yi| if yi > T::zero() { gi } else { T::zero() },
                )?;
                self.accumulate(grads, a, d)?;
            }
            &Op::SoftmaxCols(a) => {
                let y = &node.value;
                let (r, c) = y.shape();
                let mut d = Matrix::zeros(r, c);
                let mut dots = vec![T::zero(); c];
                for i in 0..r {
                    for (j, dot) in dots.iter_mut().enumerate() {
                        *dot += g[(i, j)] * y[(i, j)];
                    }
                }
                for i in 0..r {
                    for j in 0..c {
                        d[(i, j)] = y[(i, j)] * (g[(i, j)] - dots[j]);
                    }
                }
                self.accumulate(grads, a, d)?;
            }
            Op::LogDet { a, inv } => self.accumulate(grads, *a, inv.scale(g.item()))?,
            &Op::Sum(a) => {
                let (r, c) = self.shape(a);
                self.accumulate(grads, a, Matrix::filled(r, c, g.item()))?;
            }
            &Op::HalfSqNorm(a) => self.accumulate(grads, a, self.value(a).scale(g.item()))?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (d, m) = xhat.shape();
                let gam = self.value(*gamma).as_slice();
                if self.ng(*gamma) || self.ng(*beta) {
                    let mut dg = Matrix::zeros(d, 1);
                    let mut db = Matrix::zeros(d, 1);
                    for i in 0..d {
                        for j in 0..m {
                            dg[(i, 0)] += g[(i, j)] * xhat[(i, j)];
                            db[(i, 0)] += g[(i, j)];
                        }
                    }
                    self.accumulate(grads, *gamma, dg)?;
                    self.accumulate(grads, *beta, db)?;
                }
                if self.ng(*x) {
                    let dn = T::of(d as f64);
                    let mut s1 = vec![T::zero(); m];
                    let mut s2 = vec![T::zero(); m];
                    for i in 0..d {
                        for j in 0..m {
                            let dh = g[(i, j)] * gam[i];
                            s1[j] += dh;
                            s2[j] += dh * xhat[(i, j)];
                        }
                    }
                    let mut dx = Matrix::zeros(d, m);
                    for i in 0..d {
                        for j in 0..m {
                            let dh = g[(i, j)] * gam[i];
                            dx[(i, j)] = inv_std[j] / dn * (dn * dh - s1[j] - xhat[(i, j)] * s2[j]);
                        }
                    }
                    self.accumulate(grads, *x, dx)?;
                }
            }
            &Op::HeadGram { v, heads, seg, scale } => {
                if !self.ng(v) {
                    return Ok(());
                }
                let (rows, cols) = self.shape(v);
                let p = rows / heads;
                let batch = cols / seg;
                let g_cols = heads * batch * seg;
                let vs = self.value(v).as_slice();
                let gs = g.as_slice();
                let dv = self.slot(grads, v);
                for k in 0..heads {
                    for b in 0..batch {
                        let off = k * p * cols + b * seg;
                        let goff = (k * batch + b) * seg;
                        // dV += scale·V·G + scale·V·Gᵀ
                        block_gemm(
                            p,
                            seg,
                            seg,
                            scale,
                            (vs, off, cols as isize, 1),
                            (gs, goff, g_cols as isize, 1),
                            T::one(),
                            (dv.as_mut_slice(), off, cols as isize, 1),
                        );
                        block_gemm(
                            p,
                            seg,
                            seg,
                            scale,
                            (vs, off, cols as isize, 1),
                            (gs, goff, 1, g_cols as isize),
                            T::one(),
                            (dv.as_mut_slice(), off, cols as isize, 1),
                        );
                    }
                }
            }
            &Op::HeadMix { v, a, heads, seg } => {
                let (rows, cols) = self.shape(v);
                let p = rows / heads;
                let batch = cols / seg;
                let a_cols = heads * batch * seg;
                let vs = self.value(v).as_slice();
                let asl = self.value(a).as_slice();
                let gs = g.as_slice();
                if self.ng(v) {
                    let dv = self.slot(grads, v);
                    for k in 0..heads {
                        for b in 0..batch {
                            let off = k * p * cols + b * seg;
                            // dV += G·Aᵀ
                            block_gemm(
                                p,
                                seg,
                                seg,
                                T::one(),
                                (gs, off, cols as isize, 1),
                                (asl, (k * batch + b) * seg, 1, a_cols as isize),
                                T::one(),
                                (dv.as_mut_slice(), off, cols as isize, 1),
                            );
                        }
                    }
                }
                if self.ng(a) {
                    let da = self.slot(grads, a);
                    for k in 0..heads {
                        for b in 0..batch {
                            let off = k * p * cols + b * seg;
                            // dA += Vᵀ·G
                            block_gemm(
                                seg,
                                p,
                                seg,
                                T::one(),
                                (vs, off, 1, cols as isize),
                                (gs, off, cols as isize, 1),
                                T::one(),
                                (da.as_mut_slice(), (k * batch + b) * seg, a_cols as isize, 1),
                            );
                        }
                    }
                }
            }
            &Op::Assemble {
                patches,
                cls,
                pos,
                batch,
            } => {
                let (d, n) = self.shape(pos);
                let c = usize::from(cls.is_some());
                let np = n - c;
                if self.ng(patches) {
                    let dp = Matrix::from_fn(d, batch * np, |i, j| {
                        let (b, t) = (j / np, j % np);
                        g[(i, b * n + t + c)]
                    });
                    self.accumulate(grads, patches, dp)?;
                }
                if self.ng(pos) {
                    let dpos = Matrix::from_fn(d, n, |i, t| (0..batch).map(|b| g[(i, b * n + t)]).sum());
                    self.accumulate(grads, pos, dpos)?;
                }
                if let Some(cv) = cls {
                    if self.ng(cv) {
                        let dc = Matrix::from_fn(d, 1, |i, _| (0..batch).map(|b| g[(i, b * n)]).sum());
                        self.accumulate(grads, cv, dc)?;
                    }
                }
            }
            Op::SelectCols { a, idx } => {
                if self.ng(*a) {
                    let da = self.slot(grads, *a);
                    for i in 0..g.rows() {
                        for (j, &src) in idx.iter().enumerate() {
                            da[(i, src)] += g[(i, j)];
                        }
                    }
                }
            }
            &Op::SegmentMean { a, seg } => {
                let (r, c) = self.shape(a);
                let inv = T::of(seg as f64).recip();
                let da = Matrix::from_fn(r, c, |i, j| g[(i, j / seg)] * inv);
                self.accumulate(grads, a, da)?;
            }
            Op::SmoothedCe { logits, probs, targets } => {
                check_same("smoothed_ce_backward", probs, targets)?;
                let scale = g.item() / T::of(probs.cols() as f64);
                let d = probs.zip_map(targets, "smoothed_ce_backward", |p, q| (p - q) * scale)?;
                self.accumulate(grads, *logits, d)?;
            }
        }
        Ok(())
    }
}
