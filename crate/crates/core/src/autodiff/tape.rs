use crate::scalar::Scalar;

use super::tensor::Tensor;
use super::TapeError;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<S> {
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, S),
    AddScalar(Var),
    MatMul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    /// Flat index into `x` of the selected element, one per output element.
    Select { x: Var, argmax: Vec<usize> },
    Maximum(Var, Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    BroadcastRows(Var),
    AddRow(Var, Var),
    Reshape(Var),
    /// Group index of every input element.
    SumGroups { x: Var, groups: Vec<usize> },
}

#[derive(Clone, Debug)]
struct Node<S> {
    value: Tensor<S>,
    requires_grad: bool,
    op: Option<Op<S>>,
}

/// Linear record of primitive operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every operation's inputs
/// precede it. An operation is recorded (and its result marked as
/// requiring gradients) only when at least one input requires gradients.
#[derive(Clone, Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
}

/// `(outer, axis extent, inner)` for a row-major shape split at `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn shape_without(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out: Vec<usize> = shape.to_vec();
    out.remove(axis);
    if out.is_empty() {
        out.push(1);
    }
    out
}

fn matmul_into<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2.
        unsafe { matmul_avx2(a, b, out, m, k, n) };
        return;
    }
    matmul_kernel(a, b, out, m, k, n)
}

/// The same kernel compiled for wider vectors. Multiplies and adds stay
/// separate, so results match the portable path bit for bit.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matmul_avx2<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    matmul_kernel(a, b, out, m, k, n)
}

#[inline(always)]
fn matmul_kernel<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    // 4×8 output tiles accumulated in registers; every output element still
    // sums its products in order of `p`.
    const R: usize = 4;
    const C: usize = 8;
    let (mr, nc) = (m - m % R, n - n % C);
    for i in (0..mr).step_by(R) {
        let a_rows: [&[S]; R] = std::array::from_fn(|r| &a[(i + r) * k..(i + r + 1) * k]);
        for j in (0..nc).step_by(C) {
            let mut acc = [[S::zero(); C]; R];
            for r in 0..R {
                acc[r].copy_from_slice(&out[(i + r) * n + j..(i + r) * n + j + C]);
            }
            for p in 0..k {
                let bv: &[S; C] = b[p * n + j..p * n + j + C].try_into().expect("tile width");
                for r in 0..R {
                    let av = a_rows[r][p];
                    for c in 0..C {
                        acc[r][c] += av * bv[c];
                    }
                }
            }
            for r in 0..R {
                out[(i + r) * n + j..(i + r) * n + j + C].copy_from_slice(&acc[r]);
            }
        }
        for r in 0..R {
            for j in nc..n {
                let mut s = out[(i + r) * n + j];
                for p in 0..k {
                    s += a_rows[r][p] * b[p * n + j];
                }
                out[(i + r) * n + j] = s;
            }
        }
    }
    for i in mr..m {
        for j in 0..n {
            let mut s = out[i * n + j];
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a differentiable input.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(value, true, None)
    }

    /// Registers an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, false, None)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor<S>, requires_grad: bool, op: Option<Op<S>>) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor<S>, inputs: &[Var], op: Op<S>) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, rg, if rg { Some(op) } else { None })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TapeError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TapeError::ShapeMismatch { op, left: sa.to_vec(), right: sb.to_vec() });
        }
        Ok(())
    }

    fn zip_with(&mut self, op_name: &'static str, a: Var, b: Var, op: Op<S>, f: impl Fn(S, S) -> S) -> Result<Var, TapeError> {
        self.same_shape(op_name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts_unchecked(va.shape().to_vec(), data);
        Ok(self.record(out, &[a, b], op))
    }

    fn unary(&mut self, x: Var, op: Op<S>, f: impl Fn(S) -> S) -> Var {
        let out = self.value(x).map(f);
        self.record(out, &[x], op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.zip_with("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// Elementwise maximum; the gradient goes to `a` where `a >= b`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.zip_with("maximum", a, b, Op::Maximum(a, b), |x, y| if x >= y { x } else { y })
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Op::Neg(x), |v| -v)
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: S) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), |v| v.exp())
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), |v| v.ln())
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sqrt(x), |v| v.sqrt())
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TapeError::ShapeMismatch { op: "matmul", left: sa.to_vec(), right: sb.to_vec() });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let out = Tensor::from_parts_unchecked(vec![m, n], out);
        Ok(self.record(out, &[a, b], Op::MatMul(a, b)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.record(Tensor::scalar(s), &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / S::lit(t.len() as f64);
        self.record(Tensor::scalar(s), &[x], Op::Mean(x))
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<(), TapeError> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(TapeError::InvalidAxis { op, axis, shape: shape.to_vec() });
        }
        Ok(())
    }

    /// Sums out `axis`; the result drops that axis.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, TapeError> {
        self.check_axis("sum_axis", x, axis)?;
        let t = self.value(x);
        let (outer, n, inner) = split_at_axis(t.shape(), axis);
        let mut out = vec![S::zero(); outer * inner];
        let d = t.data();
        for o in 0..outer {
            for a in 0..n {
                let base = (o * n + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += d[base + i];
                }
            }
        }
        let out = Tensor::from_parts_unchecked(shape_without(t.shape(), axis), out);
        Ok(self.record(out, &[x], Op::SumAxis { x, axis }))
    }

    /// Maximum along `axis`, capturing the selected index. Ties go to the
    /// lowest index, and only that element receives gradient.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<(Var, Vec<usize>), TapeError> {
        self.check_axis("max_axis", x, axis)?;
        let t = self.value(x);
        let (outer, n, inner) = split_at_axis(t.shape(), axis);
        let d = t.data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        let mut picked = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut best_val = d[o * n * inner + i];
                for a in 1..n {
                    let v = d[(o * n + a) * inner + i];
                    if v > best_val {
                        best = a;
                        best_val = v;
                    }
                }
                out.push(best_val);
                argmax.push((o * n + best) * inner + i);
                picked.push(best);
            }
        }
        let out = Tensor::from_parts_unchecked(shape_without(t.shape(), axis), out);
        Ok((self.record(out, &[x], Op::Select { x, argmax }), picked))
    }

    /// Maximum over all elements (first index on ties).
    pub fn max(&mut self, x: Var) -> (Var, usize) {
        let d = self.value(x).data();
        let mut best = 0;
        for (i, &v) in d.iter().enumerate().skip(1) {
            if v > d[best] {
                best = i;
            }
        }
        let out = Tensor::scalar(d[best]);
        (self.record(out, &[x], Op::Select { x, argmax: vec![best] }), best)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, TapeError> {
        let first = *inputs.first().ok_or(TapeError::EmptyInput { op: "concat" })?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(TapeError::ShapeMismatch { op: "concat", left: base, right: s.to_vec() });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let block = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::from_parts_unchecked(shape, out);
        Ok(self.record(out, inputs, Op::Concat { inputs: inputs.to_vec(), axis }))
    }

    /// `len` consecutive entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, TapeError> {
        self.check_axis("slice", x, axis)?;
        let t = self.value(x);
        let (outer, n, inner) = split_at_axis(t.shape(), axis);
        if len == 0 || start + len > n {
            return Err(TapeError::SliceOutOfRange { start, len, shape: t.shape().to_vec(), axis });
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * n + start) * inner;
            out.extend_from_slice(&t.data()[from..from + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::from_parts_unchecked(shape, out);
        Ok(self.record(out, &[x], Op::Slice { x, axis, start }))
    }

    /// Repeats a vector `[n]` as every row of a `[rows, n]` matrix.
    pub fn broadcast_rows(&mut self, v: Var, rows: usize) -> Result<Var, TapeError> {
        let t = self.value(v);
        if t.shape().len() != 1 || rows == 0 {
            return Err(TapeError::ShapeMismatch { op: "broadcast_rows", left: t.shape().to_vec(), right: vec![rows] });
        }
        let n = t.len();
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            out.extend_from_slice(t.data());
        }
        let out = Tensor::from_parts_unchecked(vec![rows, n], out);
        Ok(self.record(out, &[v], Op::BroadcastRows(v)))
    }

    /// `m + broadcast_rows(v)` for `m: [rows, n]`, `v: [n]`, without the
    /// intermediate.
    pub fn add_row(&mut self, m: Var, v: Var) -> Result<Var, TapeError> {
        let (sm, sv) = (self.shape(m), self.shape(v));
        if sm.len() != 2 || sv.len() != 1 || sm[1] != sv[0] {
            return Err(TapeError::ShapeMismatch { op: "add_row", left: sm.to_vec(), right: sv.to_vec() });
        }
        let n = sv[0];
        let vd = self.value(v).data();
        let data = self.value(m).data().chunks(n).flat_map(|row| row.iter().zip(vd).map(|(&a, &b)| a + b)).collect();
        let out = Tensor::from_parts_unchecked(sm.to_vec(), data);
        Ok(self.record(out, &[m, v], Op::AddRow(m, v)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TapeError> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.record(out, &[x], Op::Reshape(x)))
    }

    /// Rows `rows[i]` of a matrix `x`, in that order; repeats are allowed.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, TapeError> {
        let t = self.value(x);
        if t.shape().len() != 2 || rows.is_empty() {
            return Err(TapeError::InvalidShape { op: "gather_rows", shape: t.shape().to_vec() });
        }
        let (n, c) = (t.rows(), t.cols());
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(TapeError::SliceOutOfRange { start: bad, len: 1, axis: 0, shape: t.shape().to_vec() });
        }
        let argmax: Vec<usize> = rows.iter().flat_map(|&r| r * c..(r + 1) * c).collect();
        let data = argmax.iter().map(|&i| t.data()[i]).collect();
        let out = Tensor::from_parts_unchecked(vec![rows.len(), c], data);
        Ok(self.record(out, &[x], Op::Select { x, argmax }))
    }

    /// Sums the elements of `x` by group: output `g` is the sum of the
    /// elements `i` with `groups[i] == g`, in index order.
    pub fn sum_groups(&mut self, x: Var, groups: &[usize], count: usize) -> Result<Var, TapeError> {
        let t = self.value(x);
        if groups.len() != t.len() || groups.iter().any(|&g| g >= count) {
            return Err(TapeError::ShapeMismatch { op: "sum_groups", left: t.shape().to_vec(), right: vec![groups.len(), count] });
        }
        let mut out = vec![S::zero(); count];
        for (&g, &v) in groups.iter().zip(t.data()) {
            out[g] += v;
        }
        let out = Tensor::from_parts_unchecked(vec![count], out);
        Ok(self.record(out, &[x], Op::SumGroups { x, groups: groups.to_vec() }))
    }

    /// Propagates d(root)/d(node) to every node that requires gradients.
    ///
    /// Gradients from multiple uses of a node are summed. Any gradients
    /// from a previous call are discarded.
    pub fn backward(&mut self, root: Var) -> Result<(), TapeError> {
        let root_shape = self.shape(root);
        if !self.value(root).is_scalar() {
            return Err(TapeError::NonScalarRoot { shape: root_shape.to_vec() });
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        if !self.nodes[root.0].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[root.0] = Some(Tensor::ones(root_shape));
        let mut finished: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(op) = &self.nodes[i].op {
                self.propagate(i, op, &g, &mut grads);
            }
            finished[i] = Some(g);
        }
        self.grads = finished;
        Ok(())
    }

    /// Accumulation buffer for `v`, or `None` when `v` takes no gradient.
    fn slot<'a>(&self, grads: &'a mut [Option<Tensor<S>>], v: Var) -> Option<&'a mut [S]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(node.value.shape())).data_mut())
    }

    fn propagate(&self, out_idx: usize, op: &Op<S>, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let gd = g.data();
        let y = self.nodes[out_idx].value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let two = S::lit(2.0);
        match *op {
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(grads, a) {
                    ga.iter_mut().zip(gd).for_each(|(s, &g)| *s += g);
                }
                if let Some(gb) = self.slot(grads, b) {
                    gb.iter_mut().zip(gd).for_each(|(s, &g)| *s += g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, a) {
                    ga.iter_mut().zip(gd).for_each(|(s, &g)| *s += g);
                }
                if let Some(gb) = self.slot(grads, b) {
                    gb.iter_mut().zip(gd).for_each(|(s, &g)| *s -= g);
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = self.slot(grads, a) {
                    for ((s, &g), &bv) in ga.iter_mut().zip(gd).zip(val(b)) {
                        *s += g * bv;
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    for ((s, &g), &av) in gb.iter_mut().zip(gd).zip(val(a)) {
                        *s += g * av;
                    }
                }
            }
            Op::Div(a, b) => {
                if let Some(ga) = self.slot(grads, a) {
                    for ((s, &g), &bv) in ga.iter_mut().zip(gd).zip(val(b)) {
                        *s += g / bv;
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    for (((s, &g), &av), &bv) in gb.iter_mut().zip(gd).zip(val(a)).zip(val(b)) {
                        *s -= g * av / (bv * bv);
                    }
                }
            }
            Op::Maximum(a, b) => {
                let (va, vb) = (val(a), val(b));
                if let Some(ga) = self.slot(grads, a) {
                    for i in 0..gd.len() {
                        if va[i] >= vb[i] {
                            ga[i] += gd[i];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    for i in 0..gd.len() {
                        if va[i] < vb[i] {
                            gb[i] += gd[i];
                        }
                    }
                }
            }
            Op::Neg(x) => {
                if let Some(gx) = self.slot(grads, x) {
                    gx.iter_mut().zip(gd).for_each(|(s, &g)| *s -= g);
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.slot(grads, x) {
                    gx.iter_mut().zip(gd).for_each(|(s, &g)| *s += g * c);
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(gx) = self.slot(grads, x) {
                    gx.iter_mut().zip(gd).for_each(|(s, &g)| *s += g);
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = self.slot(grads, x) {
                    for ((s, &g), &yv) in gx.iter_mut().zip(gd).zip(y) {
                        *s += g * yv * (S::one() - yv);
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(gx) = self.slot(grads, x) {
                    for ((s, &g), &yv) in gx.iter_mut().zip(gd).zip(y) {
                        *s += g * (S::one() - yv * yv);
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(gx) = self.slot(grads, x) {
                    for ((s, &g), &yv) in gx.iter_mut().zip(gd).zip(y) {
                        *s += g * yv;
                    }
                }
            }
            Op::Log(x) => {
                if let Some(gx) = self.slot(grads, x) {
                    for ((s, &g), &xv) in gx.iter_mut().zip(gd).zip(val(x)) {
                        *s += g / xv;
                    }
                }
            }
            Op::Square(x) => {
                if let Some(gx) = self.slot(grads, x) {
                    for ((s, &g), &xv) in gx.iter_mut().zip(gd).zip(val(x)) {
                        *s += two * xv * g;
                    }
                }
            }
            Op::Sqrt(x) => {
                if let Some(gx) = self.slot(grads, x) {
                    for ((s, &g), &yv) in gx.iter_mut().zip(gd).zip(y) {
                        *s += g / (two * yv);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (val(a), val(b));
                if let Some(ga) = self.slot(grads, a) {
                    // dA = G · Bᵀ, with Bᵀ materialized so the inner loop is contiguous.
                    let mut bt = vec![S::zero(); k * n];
                    for p in 0..k {
                        for j in 0..n {
                            bt[j * k + p] = vb[p * n + j];
                        }
                    }
                    matmul_into(gd, &bt, ga, m, n, k);
                }
                if let Some(gb) = self.slot(grads, b) {
                    // dB = Aᵀ · G
                    let mut at = vec![S::zero(); m * k];
                    for i in 0..m {
                        for p in 0..k {
                            at[p * m + i] = va[i * k + p];
                        }
                    }
                    matmul_into(&at, gd, gb, k, m, n);
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(grads, x) {
                    gx.iter_mut().for_each(|s| *s += gd[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = self.slot(grads, x) {
                    let share = gd[0] / S::lit(gx.len() as f64);
                    gx.iter_mut().for_each(|s| *s += share);
                }
            }
            Op::SumAxis { x, axis } => {
                let (outer, n, inner) = split_at_axis(self.nodes[x.0].value.shape(), axis);
                if let Some(gx) = self.slot(grads, x) {
                    for o in 0..outer {
                        for a in 0..n {
                            let base = (o * n + a) * inner;
                            for i in 0..inner {
                                gx[base + i] += gd[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::Select { x, ref argmax } => {
                if let Some(gx) = self.slot(grads, x) {
                    for (&idx, &g) in argmax.iter().zip(gd) {
                        gx[idx] += g;
                    }
                }
            }
            Op::Concat { ref inputs, axis } => {
                let out_shape = g.shape();
                let (outer, total, inner) = split_at_axis(out_shape, axis);
                let mut offset = 0;
                for &v in inputs {
                    let n = self.nodes[v.0].value.shape()[axis];
                    if let Some(gv) = self.slot(grads, v) {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * n * inner;
                            for (s, &gg) in gv[dst..dst + n * inner].iter_mut().zip(&gd[src..src + n * inner]) {
                                *s += gg;
                            }
                        }
                    }
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, n, inner) = split_at_axis(self.nodes[x.0].value.shape(), axis);
                let len = g.shape()[axis];
                if let Some(gx) = self.slot(grads, x) {
                    for o in 0..outer {
                        let dst = (o * n + start) * inner;
                        let src = o * len * inner;
                        for (s, &gg) in gx[dst..dst + len * inner].iter_mut().zip(&gd[src..src + len * inner]) {
                            *s += gg;
                        }
                    }
                }
            }
            Op::SumGroups { x, ref groups } => {
                if let Some(gx) = self.slot(grads, x) {
                    for (s, &grp) in gx.iter_mut().zip(groups) {
                        *s += gd[grp];
                    }
                }
            }
            Op::BroadcastRows(v) => {
                if let Some(gv) = self.slot(grads, v) {
                    let n = gv.len();
                    for row in gd.chunks(n) {
                        gv.iter_mut().zip(row).for_each(|(s, &gg)| *s += gg);
                    }
                }
            }
            Op::AddRow(m, v) => {
                if let Some(gm) = self.slot(grads, m) {
                    gm.iter_mut().zip(gd).for_each(|(s, &gg)| *s += gg);
                }
                if let Some(gv) = self.slot(grads, v) {
                    let n = gv.len();
                    for row in gd.chunks(n) {
                        gv.iter_mut().zip(row).for_each(|(s, &gg)| *s += gg);
                    }
                }
            }
        }
    }
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_leaf(tape: &mut Tape<f64>, v: &[f64]) -> Var {
        tape.leaf(Tensor::vector(v.to_vec()))
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::scalar(0.0));
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y).item(), 0.5);
        assert!(!tape.requires_grad(y));
    }

    #[test]
    fn identity_matmul_returns_operand() {
        let mut tape = Tape::<f64>::new();
        let a = Tensor::from_fn(&[3, 3], |i| (i as f64) * 0.7 - 2.0);
        let i3 = tape.constant(Tensor::identity(3));
        let av = tape.constant(a.clone());
        let out = tape.matmul(i3, av).unwrap();
        assert_eq!(tape.value(out), &a);
    }

    #[test]
    fn matmul_kernel_paths_agree_bitwise() {
        // Odd sizes exercise the tile remainders.
        let (m, k, n) = (11, 7, 19);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 37 % 101) as f64 - 50.0) / 7.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 53 % 97) as f64 - 48.0) / 3.0).collect();
        let mut portable = vec![0.5; m * n];
        matmul_kernel(&a, &b, &mut portable, m, k, n);
        let mut naive = vec![0.5; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    naive[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        assert_eq!(portable, naive);
        let mut dispatched = vec![0.5; m * n];
        matmul_into(&a, &b, &mut dispatched, m, k, n);
        assert_eq!(dispatched, naive);
    }

    #[test]
    fn sum_of_vector() {
        let mut tape = Tape::<f64>::new();
        let x = vec_leaf(&mut tape, &[1.0, 2.0, 3.0]);
        let s = tape.sum(x);
        assert_eq!(tape.value(s).item(), 6.0);
    }

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = vec_leaf(&mut tape, &[1.0, 2.0]);
        let sq = tape.square(x);
        let root = tape.sum(sq);
        tape.backward(root).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn reuse_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = vec_leaf(&mut tape, &[0.3, -1.0, 5.0]);
        let y = tape.add(x, x).unwrap();
        let root = tape.sum(y);
        tape.backward(root).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn max_tie_goes_to_first_index() {
        let mut tape = Tape::<f64>::new();
        let x = vec_leaf(&mut tape, &[3.0, 3.0, 1.0]);
        let (m, idx) = tape.max(x);
        assert_eq!(idx, 0);
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn max_axis_picks_per_column() {
        let mut tape = Tape::<f64>::new();
        // [[1, 5], [4, 5], [0, 2]] -> max over rows
        let x = tape.leaf(Tensor::matrix(3, 2, vec![1.0, 5.0, 4.0, 5.0, 0.0, 2.0]).unwrap());
        let (m, picked) = tape.max_axis(x, 0).unwrap();
        assert_eq!(tape.value(m).data(), &[4.0, 5.0]);
        assert_eq!(picked, vec![1, 0]);
        let root = tape.sum(m);
        tape.backward(root).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add") && msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
        let err = tape.matmul(a, a).unwrap_err();
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = vec_leaf(&mut tape, &[1.0, 2.0]);
        assert!(matches!(tape.backward(x), Err(TapeError::NonScalarRoot { .. })));
    }

    #[test]
    fn concat_and_slice_invert() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_fn(&[2, 2], |i| i as f64));
        let b = tape.leaf(Tensor::from_fn(&[2, 3], |i| 10.0 + i as f64));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).row(0), &[0.0, 1.0, 10.0, 11.0, 12.0]);
        let back = tape.slice(c, 1, 2, 3).unwrap();
        assert_eq!(tape.value(back), tape.value(b));
        let root = tape.sum(back);
        tape.backward(root).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[0.0; 4]);
        assert_eq!(tape.grad(b).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn constants_record_nothing() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::scalar(2.0));
        let b = tape.exp(a);
        assert!(!tape.requires_grad(b));
        tape.backward(b).unwrap();
        assert!(tape.grad(a).is_none());
    }
}
