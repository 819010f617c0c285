//! Forward evaluation and reverse-mode adjoints for the primitive set.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap, HashSet};

use indexmap::IndexMap;

use super::expr::{Expr, NodeId, Op};
use super::real::{gemm, MatRef};
use super::tensor::numel;
use super::{NumericsError, Real, Tensor};

/// Source of values for the named inputs of an [`Expr`].
pub trait Bindings<T> {
    fn lookup(&self, name: &str) -> Option<&Tensor<T>>;
}

impl<T> Bindings<T> for HashMap<String, Tensor<T>> {
    fn lookup(&self, name: &str) -> Option<&Tensor<T>> {
        self.get(name)
    }
}

impl<T> Bindings<T> for BTreeMap<String, Tensor<T>> {
    fn lookup(&self, name: &str) -> Option<&Tensor<T>> {
        self.get(name)
    }
}

impl<T> Bindings<T> for IndexMap<String, Tensor<T>> {
    fn lookup(&self, name: &str) -> Option<&Tensor<T>> {
        self.get(name)
    }
}

/// Per-node data kept from the forward pass for the adjoint.
enum Saved<T> {
    None,
    LayerNorm { xhat: Vec<T>, rstd: Vec<T> },
    /// Softmax probabilities of the active cross-entropy rows.
    Probs(Vec<T>),
    Norms(Vec<T>),
}

/// Values of every node of an [`Expr`] under one set of bindings.
pub struct Evaluation<'e, 'b, T: Real> {
    expr: &'e Expr,
    values: Vec<Cow<'b, Tensor<T>>>,
    saved: Vec<Saved<T>>,
}

/// Evaluates `root` of `expr`.
pub fn evaluate<T: Real, B: Bindings<T> + ?Sized>(
    expr: &Expr,
    root: NodeId,
    bindings: &B,
) -> Result<Tensor<T>, NumericsError> {
    let eval = expr.forward(bindings)?;
    Ok(eval.value(root).clone())
}

/// Gradient of the scalar `root` with respect to each named input in `wrt`.
pub fn gradients<T: Real, B: Bindings<T> + ?Sized>(
    expr: &Expr,
    root: NodeId,
    bindings: &B,
    wrt: &[&str],
) -> Result<IndexMap<String, Tensor<T>>, NumericsError> {
    expr.forward(bindings)?.backward(root, wrt)
}

impl Expr {
    /// Runs every node in order. Bindings are only read.
    pub fn forward<'e, 'b, T: Real, B: Bindings<T> + ?Sized>(
        &'e self,
        bindings: &'b B,
    ) -> Result<Evaluation<'e, 'b, T>, NumericsError> {
        let mut values: Vec<Cow<'b, Tensor<T>>> = Vec::with_capacity(self.len());
        let mut saved = Vec::with_capacity(self.len());
        for (idx, node) in self.nodes().iter().enumerate() {
            let (value, aux) = match &node.op {
                Op::Input { name } => {
                    let t = bindings.lookup(name).ok_or_else(|| NumericsError::Unbound { name: name.clone() })?;
                    if t.shape() != node.shape.as_slice() {
                        return Err(NumericsError::BindingShape {
                            name: name.clone(),
                            expected: node.shape.clone(),
                            found: t.shape().to_vec(),
                        });
                    }
                    (Cow::Borrowed(t), Saved::None)
                }
                _ => {
                    let args: Vec<&Tensor<T>> = node.inputs.iter().map(|i| values[i.0].as_ref()).collect();
                    let (v, aux) = forward_op(&node.op, &args, &node.shape);
                    (Cow::Owned(v), aux)
                }
            };
            if !value.is_finite() {
                return Err(NumericsError::NonFinite { node: idx, op: node.op.name() });
            }
            values.push(value);
            saved.push(aux);
        }
        Ok(Evaluation { expr: self, values, saved })
    }
}

impl<'e, 'b, T: Real> Evaluation<'e, 'b, T> {
    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        self.values[id.0].as_ref()
    }

    /// Reverse sweep from the scalar `root`. Only nodes that both depend on a
    /// requested input and feed `root` receive adjoints.
    pub fn backward(&self, root: NodeId, wrt: &[&str]) -> Result<IndexMap<String, Tensor<T>>, NumericsError> {
        let expr = self.expr;
        let root_shape = expr.shape(root);
        if numel(root_shape) != 1 {
            return Err(NumericsError::NonScalarRoot { shape: root_shape.to_vec() });
        }
        let mut targets = Vec::with_capacity(wrt.len());
        for name in wrt {
            let id = expr.input_id(name).ok_or_else(|| NumericsError::NotInGraph { name: name.to_string() })?;
            targets.push((name.to_string(), id));
        }
        let target_ids: HashSet<usize> = targets.iter().map(|(_, id)| id.0).collect();

        let nodes = expr.nodes();
        let mut requires = vec![false; root.0 + 1];
        for i in 0..=root.0 {
            requires[i] = match nodes[i].op {
                Op::Input { .. } => target_ids.contains(&i),
                Op::Constant { .. } | Op::StopGradient => false,
                _ => nodes[i].inputs.iter().any(|p| requires[p.0]),
            };
        }

        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        if requires[root.0] {
            grads[root.0] = Some(Tensor::full(root_shape, T::one()));
        }
        for i in (0..=root.0).rev() {
            if !requires[i] || matches!(nodes[i].op, Op::Input { .. }) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let args: Vec<&Tensor<T>> = node.inputs.iter().map(|p| self.values[p.0].as_ref()).collect();
            let wanted: Vec<bool> = node.inputs.iter().map(|p| requires[p.0]).collect();
            let out = self.values[i].as_ref();
            let input_grads = backward_op(&node.op, &args, out, &self.saved[i], &g, &wanted);
            for ((p, want), ig) in node.inputs.iter().zip(wanted).zip(input_grads) {
                if !want {
                    continue;
                }
                let Some(ig) = ig else { continue };
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
        }

        let mut out = IndexMap::with_capacity(targets.len());
        for (name, id) in targets {
            let g = if id.0 <= root.0 { grads[id.0].take() } else { None };
            let g = g.unwrap_or_else(|| Tensor::zeros(expr.shape(id)));
            out.insert(name, g);
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Broadcasting

enum Bcast {
    Same,
    Scalar,
    /// Input repeats with this period along the flattened output.
    Suffix(usize),
    /// Explicit input offset for every output element.
    Map(Vec<usize>),
}

fn bcast(out_shape: &[usize], in_shape: &[usize]) -> Bcast {
    let n_in = numel(in_shape);
    if in_shape == out_shape {
        return Bcast::Same;
    }
    if n_in == 1 {
        return Bcast::Scalar;
    }
    let trimmed: Vec<usize> = in_shape.iter().copied().skip_while(|&d| d == 1).collect();
    if out_shape.ends_with(&trimmed) {
        return Bcast::Suffix(n_in);
    }
    let rank = out_shape.len();
    let mut aligned = vec![1; rank];
    aligned[rank - in_shape.len()..].copy_from_slice(in_shape);
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        strides[d] = if aligned[d] == 1 { 0 } else { acc };
        acc *= aligned[d];
    }
    let total = numel(out_shape);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        map.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    Bcast::Map(map)
}

impl Bcast {
    #[inline]
    fn get<T: Copy>(&self, data: &[T], o: usize) -> T {
        match self {
            Bcast::Same => data[o],
            Bcast::Scalar => data[0],
            Bcast::Suffix(p) => data[o % p],
            Bcast::Map(m) => data[m[o]],
        }
    }

    #[inline]
    fn index(&self, o: usize) -> usize {
        match self {
            Bcast::Same => o,
            Bcast::Scalar => 0,
            Bcast::Suffix(p) => o % p,
            Bcast::Map(m) => m[o],
        }
    }
}

fn binary<T: Real>(a: &Tensor<T>, b: &Tensor<T>, shape: &[usize], f: impl Fn(T, T) -> T) -> Tensor<T> {
    let n = numel(shape);
    let data = match (bcast(shape, a.shape()), bcast(shape, b.shape())) {
        (Bcast::Same, Bcast::Same) => a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect(),
        (Bcast::Same, Bcast::Suffix(p)) => {
            let bd = b.data();
            a.data().chunks(p).flat_map(|row| row.iter().zip(bd).map(|(x, y)| f(*x, *y))).collect::<Vec<_>>()
        }
        (ba, bb) => (0..n).map(|o| f(ba.get(a.data(), o), bb.get(b.data(), o))).collect(),
    };
    Tensor::new(shape.to_vec(), data).expect("broadcast output")
}

/// Sums `g` (shaped like the broadcast output) back onto `in_shape`.
fn reduce_to<T: Real>(g: &Tensor<T>, in_shape: &[usize], scale: Option<(&Tensor<T>, &Bcast)>) -> Tensor<T> {
    let map = bcast(g.shape(), in_shape);
    let mut out = Tensor::zeros(in_shape);
    let od = out.data_mut();
    let gd = g.data();
    match scale {
        None => match &map {
            Bcast::Same => od.copy_from_slice(gd),
            Bcast::Suffix(p) => {
                for row in gd.chunks(*p) {
                    for (o, v) in od.iter_mut().zip(row) {
                        *o += *v;
                    }
                }
            }
            _ => {
                for (o, v) in gd.iter().enumerate() {
                    od[map.index(o)] += *v;
                }
            }
        },
        Some((other, omap)) => {
            let odata = other.data();
            for (o, v) in gd.iter().enumerate() {
                od[map.index(o)] += *v * omap.get(odata, o);
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Forward kernels

fn matmul_batches(sa: &[usize], sb: &[usize]) -> (usize, bool, bool) {
    let ba = numel(&sa[..sa.len() - 2]);
    let bb = numel(&sb[..sb.len() - 2]);
    let a_batched = sa.len() > 2;
    let b_batched = sb.len() > 2;
    (if a_batched { ba } else { bb }, a_batched, b_batched)
}

fn mat<'a, T: Real>(t: &'a Tensor<T>, batch: usize, batched: bool, trans: bool) -> MatRef<'a, T> {
    let s = t.shape();
    let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
    let off = if batched { batch * r * c } else { 0 };
    MatRef::new(&t.data()[off..off + r * c], r, c, trans)
}

fn forward_matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool, shape: &[usize]) -> Tensor<T> {
    let mut out = Tensor::zeros(shape);
    let (batches, a_batched, b_batched) = matmul_batches(a.shape(), b.shape());
    let m = shape[shape.len() - 2];
    let n = shape[shape.len() - 1];
    if a_batched && !b_batched && !ta {
        let k = a.shape()[a.rank() - 1];
        let rows = a.len() / k;
        gemm(MatRef::new(a.data(), rows, k, false), mat(b, 0, false, tb), T::zero(), out.data_mut());
        return out;
    }
    for i in 0..batches {
        let dst = &mut out.data_mut()[i * m * n..(i + 1) * m * n];
        gemm(mat(a, i, a_batched, ta), mat(b, i, b_batched, tb), T::zero(), dst);
    }
    out
}

fn forward_affine<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    let (i, o) = (w.shape()[0], w.shape()[1]);
    let rows = x.len() / i;
    let mut data = Vec::with_capacity(rows * o);
    for _ in 0..rows {
        data.extend_from_slice(b.data());
    }
    gemm(MatRef::new(x.data(), rows, i, false), MatRef::new(w.data(), i, o, false), T::one(), &mut data);
    Tensor::new(shape.to_vec(), data).expect("affine output")
}

fn softmax_row<T: Real>(row: &[T], mask: Option<&[bool]>, out: &mut [T]) {
    let active = |j: usize| mask.map_or(true, |m| m[j]);
    let mut max = T::neg_infinity();
    for (j, &v) in row.iter().enumerate() {
        if active(j) && v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for (j, (o, &v)) in out.iter_mut().zip(row).enumerate() {
        *o = if active(j) { (v - max).exp() } else { T::zero() };
        sum += *o;
    }
    let inv = T::one() / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

// tanh-approximated GELU, written with the identity ½(1 + tanh u) = σ(2u)
// so that only one exp is needed.
fn gelu_sigmoid<T: Real>(x: T) -> T {
    let u2 = T::of(2.0 * GELU_C) * (x + T::of(GELU_A) * x * x * x);
    T::one() / (T::one() + (-u2).exp())
}

fn gelu<T: Real>(x: T) -> T {
    x * gelu_sigmoid(x)
}

fn gelu_grad<T: Real>(x: T) -> T {
    let s = gelu_sigmoid(x);
    let du2 = T::of(2.0 * GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    s + x * s * (T::one() - s) * du2
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
fn split3(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

fn transpose_data<T: Real>(data: &[T], in_shape: &[usize], dim0: usize, dim1: usize) -> Vec<T> {
    let a = numel(&in_shape[..dim0]);
    let d0 = in_shape[dim0];
    let mid = numel(&in_shape[dim0 + 1..dim1]);
    let d1 = in_shape[dim1];
    let c = numel(&in_shape[dim1 + 1..]);
    let mut out = Vec::with_capacity(data.len());
    for ai in 0..a {
        for j in 0..d1 {
            for bi in 0..mid {
                for i in 0..d0 {
                    let src = ((((ai * d0 + i) * mid + bi) * d1 + j) * c) as usize;
                    out.extend_from_slice(&data[src..src + c]);
                }
            }
        }
    }
    out
}

fn forward_op<T: Real>(op: &Op, args: &[&Tensor<T>], shape: &[usize]) -> (Tensor<T>, Saved<T>) {
    let shape_vec = shape.to_vec();
    match op {
        Op::Input { .. } => unreachable!("inputs are bound, not computed"),
        Op::Constant { value } => (value.cast(), Saved::None),
        Op::MatMul { trans_a, trans_b } => (forward_matmul(args[0], args[1], *trans_a, *trans_b, shape), Saved::None),
        Op::Add => (binary(args[0], args[1], shape, |x, y| x + y), Saved::None),
        Op::Mul => (binary(args[0], args[1], shape, |x, y| x * y), Saved::None),
        Op::Affine => (forward_affine(args[0], args[1], args[2], shape), Saved::None),
        Op::Gather { indices } => {
            let table = args[0];
            let cols = table.shape()[1];
            let mut data = Vec::with_capacity(indices.len() * cols);
            for &i in indices.iter() {
                data.extend_from_slice(&table.data()[i * cols..(i + 1) * cols]);
            }
            (Tensor::new(shape_vec, data).expect("gather output"), Saved::None)
        }
        Op::Softmax | Op::MaskedSoftmax { .. } => {
            let x = args[0];
            let cols = *shape.last().unwrap();
            let mut out = Tensor::zeros(shape);
            let (mask, mask_rows) = match op {
                Op::MaskedSoftmax { mask, mask_shape } => (Some(mask), numel(mask_shape) / cols),
                _ => (None, 1),
            };
            for (r, (src, dst)) in x.data().chunks(cols).zip(out.data_mut().chunks_mut(cols)).enumerate() {
                let m = mask.map(|m| {
                    let mr = r % mask_rows;
                    &m[mr * cols..(mr + 1) * cols]
                });
                softmax_row(src, m, dst);
            }
            (out, Saved::None)
        }
        Op::LayerNorm { eps } => {
            let (x, gamma, beta) = (args[0], args[1], args[2]);
            let cols = *shape.last().unwrap();
            let rows = x.len() / cols;
            let mut out = Vec::with_capacity(x.len());
            let mut xhat = Vec::with_capacity(x.len());
            let mut rstd = Vec::with_capacity(rows);
            let inv_n = T::one() / T::of(cols as f64);
            for row in x.data().chunks(cols) {
                let mean = row.iter().copied().sum::<T>() * inv_n;
                let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() * inv_n;
                let rs = T::one() / (var + T::of(*eps)).sqrt();
                rstd.push(rs);
                for ((v, g), b) in row.iter().zip(gamma.data()).zip(beta.data()) {
                    let h = (*v - mean) * rs;
                    xhat.push(h);
                    out.push(h * *g + *b);
                }
            }
            (Tensor::new(shape_vec, out).expect("layer norm output"), Saved::LayerNorm { xhat, rstd })
        }
        Op::Gelu => {
            let data = args[0].data().iter().map(|&v| gelu(v)).collect();
            (Tensor::new(shape_vec, data).expect("gelu output"), Saved::None)
        }
        Op::Transpose { dim0, dim1 } => {
            let data = transpose_data(args[0].data(), args[0].shape(), *dim0, *dim1);
            (Tensor::new(shape_vec, data).expect("transpose output"), Saved::None)
        }
        Op::Reshape | Op::StopGradient => {
            (Tensor::new(shape_vec, args[0].data().to_vec()).expect("reshape output"), Saved::None)
        }
        Op::Slice { axis, start, len } => {
            let (outer, d, inner) = split3(args[0].shape(), *axis);
            let src = args[0].data();
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * d + start) * inner;
                data.extend_from_slice(&src[base..base + len * inner]);
            }
            (Tensor::new(shape_vec, data).expect("slice output"), Saved::None)
        }
        Op::Concat { axis } => {
            let (outer, _, inner) = split3(shape, *axis);
            let mut data = Vec::with_capacity(numel(shape));
            for o in 0..outer {
                for part in args {
                    let d = part.shape()[*axis];
                    data.extend_from_slice(&part.data()[o * d * inner..(o + 1) * d * inner]);
                }
            }
            (Tensor::new(shape_vec, data).expect("concat output"), Saved::None)
        }
        Op::CrossEntropy { targets, mask } => {
            let x = args[0];
            let vocab = *x.shape().last().unwrap();
            let mut probs = Vec::new();
            let mut total = 0.0f64;
            let mut count = 0usize;
            for (r, row) in x.data().chunks(vocab).enumerate() {
                if !mask[r] {
                    continue;
                }
                let start = probs.len();
                probs.resize(start + vocab, T::zero());
                let p = &mut probs[start..];
                softmax_row(row, None, p);
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = max.as_f64() + row.iter().map(|v| (v.as_f64() - max.as_f64()).exp()).sum::<f64>().ln();
                total += lse - row[targets[r]].as_f64();
                count += 1;
            }
            (Tensor::scalar(T::of(total / count as f64)), Saved::Probs(probs))
        }
        Op::L2Normalize { eps } => {
            let x = args[0];
            let cols = *shape.last().unwrap();
            let mut out = Vec::with_capacity(x.len());
            let mut norms = Vec::with_capacity(x.len() / cols);
            for row in x.data().chunks(cols) {
                let n = (row.iter().map(|v| *v * *v).sum::<T>() + T::of(*eps)).sqrt();
                norms.push(n);
                out.extend(row.iter().map(|v| *v / n));
            }
            (Tensor::new(shape_vec, out).expect("normalize output"), Saved::Norms(norms))
        }
    }
}

// ---------------------------------------------------------------------------
// Adjoints

fn backward_matmul<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    ta: bool,
    tb: bool,
    g: &Tensor<T>,
    wanted: &[bool],
) -> Vec<Option<Tensor<T>>> {
    let (batches, a_batched, b_batched) = matmul_batches(a.shape(), b.shape());
    let m = g.shape()[g.rank() - 2];
    let n = g.shape()[g.rank() - 1];
    let mut ga = wanted[0].then(|| Tensor::zeros(a.shape()));
    let mut gb = wanted[1].then(|| Tensor::zeros(b.shape()));

    if a_batched && !b_batched && !ta {
        let k = a.shape()[a.rank() - 1];
        let rows = a.len() / k;
        let gm = MatRef::new(g.data(), rows, n, false);
        if let Some(ga) = ga.as_mut() {
            // dA = dC · op(B)ᵀ
            let bt = mat(b, 0, false, !tb);
            gemm(gm, bt, T::zero(), ga.data_mut());
        }
        if let Some(gb) = gb.as_mut() {
            let am = MatRef::new(a.data(), rows, k, false);
            if tb {
                gemm(MatRef::new(g.data(), rows, n, true), am, T::zero(), gb.data_mut());
            } else {
                gemm(MatRef::new(a.data(), rows, k, true), gm, T::zero(), gb.data_mut());
            }
        }
        return vec![ga, gb];
    }

    for i in 0..batches {
        let gi = MatRef::new(&g.data()[i * m * n..(i + 1) * m * n], m, n, false);
        let gi_t = MatRef::new(gi.data, m, n, true);
        if let Some(ga) = ga.as_mut() {
            let s = a.shape();
            let sz = s[s.len() - 2] * s[s.len() - 1];
            let off = if a_batched { i * sz } else { 0 };
            let beta = if a_batched || i == 0 { T::zero() } else { T::one() };
            let dst = &mut ga.data_mut()[off..off + sz];
            if ta {
                // stored A is k×m: dA = op(B) · dCᵀ
                gemm(mat(b, i, b_batched, tb), gi_t, beta, dst);
            } else {
                gemm(gi, mat(b, i, b_batched, !tb), beta, dst);
            }
        }
        if let Some(gb) = gb.as_mut() {
            let s = b.shape();
            let sz = s[s.len() - 2] * s[s.len() - 1];
            let off = if b_batched { i * sz } else { 0 };
            let beta = if b_batched || i == 0 { T::zero() } else { T::one() };
            let dst = &mut gb.data_mut()[off..off + sz];
            if tb {
                // stored B is n×k: dB = dCᵀ · op(A)
                gemm(gi_t, mat(a, i, a_batched, ta), beta, dst);
            } else {
                gemm(mat(a, i, a_batched, !ta), gi, beta, dst);
            }
        }
    }
    vec![ga, gb]
}

fn backward_op<T: Real>(
    op: &Op,
    args: &[&Tensor<T>],
    out: &Tensor<T>,
    saved: &Saved<T>,
    g: &Tensor<T>,
    wanted: &[bool],
) -> Vec<Option<Tensor<T>>> {
    match op {
        Op::Input { .. } | Op::Constant { .. } | Op::StopGradient => vec![None; args.len()],
        Op::MatMul { trans_a, trans_b } => backward_matmul(args[0], args[1], *trans_a, *trans_b, g, wanted),
        Op::Add => vec![
            wanted[0].then(|| reduce_to(g, args[0].shape(), None)),
            wanted[1].then(|| reduce_to(g, args[1].shape(), None)),
        ],
        Op::Mul => {
            let sa = bcast(g.shape(), args[0].shape());
            let sb = bcast(g.shape(), args[1].shape());
            vec![
                wanted[0].then(|| reduce_to(g, args[0].shape(), Some((args[1], &sb)))),
                wanted[1].then(|| reduce_to(g, args[1].shape(), Some((args[0], &sa)))),
            ]
        }
        Op::Affine => {
            let (x, w) = (args[0], args[1]);
            let (i, o) = (w.shape()[0], w.shape()[1]);
            let rows = x.len() / i;
            let gm = MatRef::new(g.data(), rows, o, false);
            let gx = wanted[0].then(|| {
                let mut t = Tensor::zeros(x.shape());
                gemm(gm, MatRef::new(w.data(), i, o, true), T::zero(), t.data_mut());
                t
            });
            let gw = wanted[1].then(|| {
                let mut t = Tensor::zeros(w.shape());
                gemm(MatRef::new(x.data(), rows, i, true), gm, T::zero(), t.data_mut());
                t
            });
            let gb = wanted[2].then(|| {
                let mut t = Tensor::zeros(&[o]);
                for row in g.data().chunks(o) {
                    for (acc, v) in t.data_mut().iter_mut().zip(row) {
                        *acc += *v;
                    }
                }
                t
            });
            vec![gx, gw, gb]
        }
        Op::Gather { indices } => {
            let table = args[0];
            let cols = table.shape()[1];
            let mut gt = Tensor::zeros(table.shape());
            let gd = gt.data_mut();
            for (k, &i) in indices.iter().enumerate() {
                let src = &g.data()[k * cols..(k + 1) * cols];
                for (d, s) in gd[i * cols..(i + 1) * cols].iter_mut().zip(src) {
                    *d += *s;
                }
            }
            vec![Some(gt)]
        }
        Op::Softmax | Op::MaskedSoftmax { .. } => {
            let cols = *out.shape().last().unwrap();
            let mut gx = Tensor::zeros(out.shape());
            for ((y, gy), dst) in out.data().chunks(cols).zip(g.data().chunks(cols)).zip(gx.data_mut().chunks_mut(cols)) {
                let dot: T = y.iter().zip(gy).map(|(a, b)| *a * *b).sum();
                for ((d, yv), gv) in dst.iter_mut().zip(y).zip(gy) {
                    *d = *yv * (*gv - dot);
                }
            }
            vec![Some(gx)]
        }
        Op::LayerNorm { .. } => {
            let Saved::LayerNorm { xhat, rstd } = saved else { unreachable!("layer norm state") };
            let gamma = args[1];
            let cols = gamma.len();
            let inv_n = T::one() / T::of(cols as f64);
            let mut gx = wanted[0].then(|| Tensor::zeros(args[0].shape()));
            let mut gg = Tensor::zeros(&[cols]);
            let mut gbeta = Tensor::zeros(&[cols]);
            let mut dxhat = vec![T::zero(); cols];
            for (r, (gy, xh)) in g.data().chunks(cols).zip(xhat.chunks(cols)).enumerate() {
                for j in 0..cols {
                    gg.data_mut()[j] += gy[j] * xh[j];
                    gbeta.data_mut()[j] += gy[j];
                }
                if let Some(gx) = gx.as_mut() {
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for j in 0..cols {
                        dxhat[j] = gy[j] * gamma.data()[j];
                        mean_d += dxhat[j];
                        mean_dx += dxhat[j] * xh[j];
                    }
                    mean_d *= inv_n;
                    mean_dx *= inv_n;
                    let dst = &mut gx.data_mut()[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        dst[j] = rstd[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                    }
                }
            }
            vec![gx, wanted[1].then_some(gg), wanted[2].then_some(gbeta)]
        }
        Op::Gelu => {
            let data = args[0].data().iter().zip(g.data()).map(|(x, gv)| gelu_grad(*x) * *gv).collect();
            vec![Some(Tensor::new(args[0].shape().to_vec(), data).expect("gelu grad"))]
        }
        Op::Transpose { dim0, dim1 } => {
            let data = transpose_data(g.data(), g.shape(), *dim0, *dim1);
            vec![Some(Tensor::new(args[0].shape().to_vec(), data).expect("transpose grad"))]
        }
        Op::Reshape => vec![Some(Tensor::new(args[0].shape().to_vec(), g.data().to_vec()).expect("reshape grad"))],
        Op::Slice { axis, start, len } => {
            let (outer, d, inner) = split3(args[0].shape(), *axis);
            let mut gx = Tensor::zeros(args[0].shape());
            for o in 0..outer {
                let dst = (o * d + start) * inner;
                let src = o * len * inner;
                gx.data_mut()[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
            }
            vec![Some(gx)]
        }
        Op::Concat { axis } => {
            let (outer, total, inner) = split3(g.shape(), *axis);
            let mut offset = 0;
            let mut result = Vec::with_capacity(args.len());
            for (part, want) in args.iter().zip(wanted) {
                let d = part.shape()[*axis];
                if *want {
                    let mut gp = Tensor::zeros(part.shape());
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        gp.data_mut()[o * d * inner..(o + 1) * d * inner]
                            .copy_from_slice(&g.data()[src..src + d * inner]);
                    }
                    result.push(Some(gp));
                } else {
                    result.push(None);
                }
                offset += d;
            }
            result
        }
        Op::CrossEntropy { targets, mask } => {
            let Saved::Probs(probs) = saved else { unreachable!("cross-entropy state") };
            let x = args[0];
            let vocab = *x.shape().last().unwrap();
            let count = mask.iter().filter(|&&m| m).count();
            let scale = g.item() / T::of(count as f64);
            let mut gx = Tensor::zeros(x.shape());
            let mut k = 0;
            for (r, dst) in gx.data_mut().chunks_mut(vocab).enumerate() {
                if !mask[r] {
                    continue;
                }
                let p = &probs[k * vocab..(k + 1) * vocab];
                for (d, pv) in dst.iter_mut().zip(p) {
                    *d = *pv * scale;
                }
                dst[targets[r]] -= scale;
                k += 1;
            }
            vec![Some(gx)]
        }
        Op::L2Normalize { .. } => {
            let Saved::Norms(norms) = saved else { unreachable!("normalize state") };
            let cols = *out.shape().last().unwrap();
            let mut gx = Tensor::zeros(out.shape());
            for (((y, gy), dst), n) in
                out.data().chunks(cols).zip(g.data().chunks(cols)).zip(gx.data_mut().chunks_mut(cols)).zip(norms)
            {
                let dot: T = y.iter().zip(gy).map(|(a, b)| *a * *b).sum();
                for ((d, yv), gv) in dst.iter_mut().zip(y).zip(gy) {
                    *d = (*gv - *yv * dot) / *n;
                }
            }
            vec![Some(gx)]
        }
    }
}
