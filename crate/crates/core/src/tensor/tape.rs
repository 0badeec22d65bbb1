use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{axpy, dot, matmul, matmul_nt, matmul_tn_acc};
use super::{numel, Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Masking for [`Tape::attention`].
#[derive(Clone, Debug, Default)]
pub struct AttentionSpec {
    pub heads: usize,
    /// Query position `i` may only see key positions `j <= i`.
    pub causal: bool,
    /// `[batch × keys]`, `true` where the key is a real token.
    pub key_mask: Option<Vec<bool>>,
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    MatMulNt {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Relu {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        count: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<T>,
        rstd: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        dims: AttnDims,
        causal: bool,
        key_mask: Option<Vec<bool>>,
        probs: Vec<T>,
    },
}

#[derive(Clone, Copy)]
struct AttnDims {
    batch: usize,
    sq: usize,
    sk: usize,
    heads: usize,
    dh: usize,
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Define-by-run recording of a forward computation.
///
/// Operations are appended in execution order, so every node's inputs precede
/// it. A tape built with [`Tape::no_grad`] records values only.
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    grad_enabled: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that never tracks gradients (inference).
    pub fn no_grad() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        let rg = self.grad_enabled && t.requires_grad();
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf from raw parts.
    pub fn input(&mut self, shape: &[usize], data: Vec<T>, requires_grad: bool) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), data)?.with_requires_grad(requires_grad);
        if !t.is_finite() {
            return Err(Error::NonFinite { op: "input" });
        }
        let rg = self.grad_enabled && requires_grad;
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.into_data(),
            op: Op::Leaf,
            requires_grad: rg,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            requires_grad: n.requires_grad,
            grad: self.grad(v).map(|g| g.to_vec()),
        }
    }

    /// Gradient accumulated by the last [`Tape::backward`]; `None` for values
    /// that do not require gradients or were not reached.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`Tape::grad`], but a value that requires gradients and was not
    /// reached by the reverse pass yields zeros instead of `None`.
    pub fn grad_dense(&self, v: Var) -> Option<Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        Some(match self.grad(v) {
            Some(g) => g.to_vec(),
            None => vec![T::zero(); self.nodes[v.0].value.len()],
        })
    }

    fn push(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        value: Vec<T>,
        inputs: &[Var],
        op: Op<T>,
    ) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if value.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let rg = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op: if rg { op } else { Op::Leaf },
            requires_grad: rg,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rows_cols(shape: &[usize]) -> (usize, usize) {
        match shape.split_last() {
            Some((&c, lead)) => (numel(lead), c),
            None => (1, 1),
        }
    }

    /// `a[..×k] · b[k×n]`; leading dimensions of `a` are treated as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::Dimension(format!(
                "matmul: inner dimensions disagree for shapes {sa:?} and {sb:?}"
            )));
        }
        let (m, k) = Self::rows_cols(&sa);
        let n = sb[1];
        let out = matmul(self.value(a), self.value(b), m, k, n);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        self.push("matmul", shape, out, &[a, b], Op::MatMul { a, b, m, k, n })
    }

    /// `a[..×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[1] {
            return Err(Error::Dimension(format!(
                "matmul_nt: inner dimensions disagree for shapes {sa:?} and {sb:?}"
            )));
        }
        let (m, k) = Self::rows_cols(&sa);
        let n = sb[0];
        let out = matmul_nt(self.value(a), self.value(b), m, k, n);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        self.push("matmul_nt", shape, out, &[a, b], Op::MatMulNt { a, b, m, k, n })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        self.push("add", self.shape(a).to_vec(), out, &[a, b], Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        self.push("mul", self.shape(a).to_vec(), out, &[a, b], Op::Mul { a, b })
    }

    /// Adds a `[c]` vector to every row of `x[..×c]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = Self::rows_cols(self.shape(x));
        if self.shape(bias) != [c] {
            return Err(shape_err("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias);
        let out = self
            .value(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &w)| v + w))
            .collect();
        self.push("add_bias", self.shape(x).to_vec(), out, &[x, bias], Op::AddBias { x, bias })
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v * factor).collect();
        self.push("scale", self.shape(x).to_vec(), out, &[x], Op::Scale { x, factor })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v.max(T::zero())).collect();
        self.push("relu", self.shape(x).to_vec(), out, &[x], Op::Relu { x })
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().fold(0.0f64, |acc, v| acc + v.as_f64());
        self.push("sum", Vec::new(), vec![T::of(s)], &[x], Op::Sum { x })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() || shape.contains(&0) {
            return Err(shape_err("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        self.push("reshape", shape.to_vec(), out, &[x], Op::Reshape { x })
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "softmax: axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| o * len * inner + l * inner + i;
                let max = (0..len).map(|l| xv[at(l)]).fold(T::neg_infinity(), T::max);
                let mut total = 0.0f64;
                for l in 0..len {
                    let e = (xv[at(l)] - max).exp();
                    out[at(l)] = e;
                    total += e.as_f64();
                }
                for l in 0..len {
                    out[at(l)] = T::of(out[at(l)].as_f64() / total);
                }
            }
        }
        self.push(
            "softmax",
            shape,
            out,
            &[x],
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
        )
    }

    /// Mean negative log-likelihood over rows of `logits[..×V]` whose target is
    /// not `pad_id`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad_id: usize) -> Result<Var> {
        let (rows, vocab) = Self::rows_cols(self.shape(logits));
        if targets.len() != rows {
            return Err(Error::Dimension(format!(
                "cross_entropy: {} targets for logits of shape {:?}",
                targets.len(),
                self.shape(logits)
            )));
        }
        let mut tg = Vec::with_capacity(rows);
        for (r, &t) in targets.iter().enumerate() {
            if t == pad_id {
                tg.push(None);
            } else if t >= vocab {
                return Err(Error::Index(format!(
                    "cross_entropy: target {t} at position {r} outside vocabulary of {vocab}"
                )));
            } else {
                tg.push(Some(t));
            }
        }
        let count = tg.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::Contract("cross_entropy: no non-pad targets".into()));
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); lv.len()];
        let mut total = 0.0f64;
        for (r, t) in tg.iter().enumerate() {
            let Some(t) = *t else { continue };
            let row = &lv[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max).as_f64();
            let z: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[t].as_f64();
            for (p, v) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                *p = T::of((v.as_f64() - lse).exp());
            }
        }
        let loss = T::of(total / count as f64);
        self.push(
            "cross_entropy",
            Vec::new(),
            vec![loss],
            &[logits],
            Op::CrossEntropy {
                logits,
                targets: tg,
                probs,
                count,
            },
        )
    }

    /// Normalizes each row of `x[..×c]` to zero mean and unit variance, then
    /// applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, c) = Self::rows_cols(self.shape(x));
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(Error::Dimension(format!(
                "layer_norm: input {:?} with gain {:?} and bias {:?}",
                self.shape(x),
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let (xv, g, b) = (self.value(x), self.value(gain), self.value(bias));
        let mut out = vec![T::zero(); xv.len()];
        let mut normed = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xv[r * c..(r + 1) * c];
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / c as f64;
            let var = row
                .iter()
                .map(|v| (v.as_f64() - mean).powi(2))
                .sum::<f64>()
                / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = T::of(rs);
            for j in 0..c {
                let nh = T::of((row[j].as_f64() - mean) * rs);
                normed[r * c + j] = nh;
                out[r * c + j] = nh * g[j] + b[j];
            }
        }
        self.push(
            "layer_norm",
            self.shape(x).to_vec(),
            out,
            &[x, gain, bias],
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            },
        )
    }

    /// Inverted dropout. The mask is a pure function of `seed`.
    pub fn dropout(&mut self, x: Var, rate: f64, seed: u64, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = T::of(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let out = self
            .value(x)
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        self.push("dropout", self.shape(x).to_vec(), out, &[x], Op::Dropout { x, mask })
    }

    /// Gathers rows of `table[V×d]`; the result has shape `lead ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], lead: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(Error::Dimension(format!(
                "embedding: table must be 2-d, got {st:?}"
            )));
        }
        if numel(lead) != ids.len() {
            return Err(Error::Dimension(format!(
                "embedding: {} ids for output shape {lead:?}",
                ids.len()
            )));
        }
        let (vocab, d) = (st[0], st[1]);
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index(format!(
                    "token id {id} outside vocabulary of {vocab}"
                )));
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let mut shape = lead.to_vec();
        shape.push(d);
        self.push(
            "embedding",
            shape,
            out,
            &[table],
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Multi-head scaled dot-product attention over `q[B×Sq×d]`, `k[B×Sk×d]`,
    /// `v[B×Sk×d]`. Heads are contiguous slices of the model dimension.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: &AttentionSpec) -> Result<Var> {
        let (sq_, sk_, sv_) = (self.shape(q), self.shape(k), self.shape(v));
        if sq_.len() != 3 || sk_.len() != 3 || sk_ != sv_ || sq_[0] != sk_[0] || sq_[2] != sk_[2] {
            return Err(Error::Dimension(format!(
                "attention: q {sq_:?}, k {sk_:?}, v {sv_:?}"
            )));
        }
        let (batch, sq, d) = (sq_[0], sq_[1], sq_[2]);
        let sk = sk_[1];
        let heads = spec.heads;
        if heads == 0 || d % heads != 0 {
            return Err(Error::Dimension(format!(
                "attention: model dimension {d} not divisible by {heads} heads"
            )));
        }
        if let Some(m) = &spec.key_mask {
            if m.len() != batch * sk {
                return Err(Error::Dimension(format!(
                    "attention: key mask of {} entries for {batch}×{sk} keys",
                    m.len()
                )));
            }
        }
        let dims = AttnDims {
            batch,
            sq,
            sk,
            heads,
            dh: d / heads,
        };
        let dh = dims.dh;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![T::zero(); batch * heads * sq * sk];
        let mut out = vec![T::zero(); batch * sq * d];
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..sq {
                    let qrow = &qv[(b * sq + i) * d + h * dh..][..dh];
                    let prow = &mut probs[((b * heads + h) * sq + i) * sk..][..sk];
                    let valid = |j: usize| {
                        spec.key_mask.as_ref().is_none_or(|m| m[b * sk + j]) && (!spec.causal || j <= i)
                    };
                    let mut max = T::neg_infinity();
                    for j in (0..sk).filter(|&j| valid(j)) {
                        let s = dot(qrow, &kv[(b * sk + j) * d + h * dh..][..dh]) * scale;
                        prow[j] = s;
                        max = max.max(s);
                    }
                    if max == T::neg_infinity() {
                        continue;
                    }
                    let mut total = 0.0f64;
                    for j in (0..sk).filter(|&j| valid(j)) {
                        let e = (prow[j] - max).exp();
                        prow[j] = e;
                        total += e.as_f64();
                    }
                    let orow = &mut out[(b * sq + i) * d + h * dh..][..dh];
                    for j in (0..sk).filter(|&j| valid(j)) {
                        prow[j] = T::of(prow[j].as_f64() / total);
                        axpy(prow[j], &vv[(b * sk + j) * d + h * dh..][..dh], orow);
                    }
                }
            }
        }
        self.push(
            "attention",
            vec![batch, sq, d],
            out,
            &[q, k, v],
            Op::Attention {
                q,
                k,
                v,
                dims,
                causal: spec.causal,
                key_mask: spec.key_mask.clone(),
                probs,
            },
        )
    }

    /// Reverse pass from a scalar `loss`. Gradients are available through
    /// [`Tape::grad`] afterwards; values are never modified.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            self.backward_node(i, &g);
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { op: "backward" });
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, g: &[T]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let val = |v: Var| nodes[v.0].value.as_slice();
        // Returns the gradient buffer of `v` if it participates in differentiation.
        fn buf<'a, T: Element>(
            grads: &'a mut [Option<Vec<T>>],
            nodes: &[Node<T>],
            v: Var,
        ) -> Option<&'a mut Vec<T>> {
            if !nodes[v.0].requires_grad {
                return None;
            }
            let n = nodes[v.0].value.len();
            Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
        }
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if let Some(da) = buf(grads, nodes, a) {
                    let part = matmul_nt(g, val(b), m, n, k);
                    da.iter_mut().zip(part).for_each(|(x, y)| *x = *x + y);
                }
                if let Some(db) = buf(grads, nodes, b) {
                    matmul_tn_acc(val(a), g, m, k, n, db);
                }
            }
            &Op::MatMulNt { a, b, m, k, n } => {
                if let Some(da) = buf(grads, nodes, a) {
                    let part = matmul(g, val(b), m, n, k);
                    da.iter_mut().zip(part).for_each(|(x, y)| *x = *x + y);
                }
                if let Some(db) = buf(grads, nodes, b) {
                    matmul_tn_acc(g, val(a), m, n, k, db);
                }
            }
            &Op::Add { a, b } => {
                for v in [a, b] {
                    if let Some(d) = buf(grads, nodes, v) {
                        d.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y);
                    }
                }
            }
            &Op::Mul { a, b } => {
                if let Some(da) = buf(grads, nodes, a) {
                    for ((x, &gy), &bv) in da.iter_mut().zip(g).zip(val(b)) {
                        *x = *x + gy * bv;
                    }
                }
                if let Some(db) = buf(grads, nodes, b) {
                    for ((x, &gy), &av) in db.iter_mut().zip(g).zip(val(a)) {
                        *x = *x + gy * av;
                    }
                }
            }
            &Op::AddBias { x, bias } => {
                if let Some(dx) = buf(grads, nodes, x) {
                    dx.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b);
                }
                if let Some(db) = buf(grads, nodes, bias) {
                    let c = db.len();
                    for row in g.chunks(c) {
                        db.iter_mut().zip(row).for_each(|(a, &b)| *a = *a + b);
                    }
                }
            }
            &Op::Scale { x, factor } => {
                if let Some(dx) = buf(grads, nodes, x) {
                    dx.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + factor * b);
                }
            }
            &Op::Relu { x } => {
                if let Some(dx) = buf(grads, nodes, x) {
                    for ((a, &gy), &xv) in dx.iter_mut().zip(g).zip(val(x)) {
                        if xv > T::zero() {
                            *a = *a + gy;
                        }
                    }
                }
            }
            &Op::Sum { x } => {
                if let Some(dx) = buf(grads, nodes, x) {
                    dx.iter_mut().for_each(|a| *a = *a + g[0]);
                }
            }
            &Op::Reshape { x } => {
                if let Some(dx) = buf(grads, nodes, x) {
                    dx.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b);
                }
            }
            &Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = nodes[i].value.as_slice();
                if let Some(dx) = buf(grads, nodes, x) {
                    for o in 0..outer {
                        for n in 0..inner {
                            let at = |l: usize| o * len * inner + l * inner + n;
                            let s: f64 = (0..len).map(|l| (g[at(l)] * y[at(l)]).as_f64()).sum();
                            for l in 0..len {
                                let k = at(l);
                                dx[k] = dx[k] + y[k] * (g[k] - T::of(s));
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if let Some(dl) = buf(grads, nodes, *logits) {
                    let vocab = dl.len() / targets.len();
                    let w = g[0] / T::of(*count as f64);
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for c in 0..vocab {
                            let k = r * vocab + c;
                            let onehot = if c == t { T::one() } else { T::zero() };
                            dl[k] = dl[k] + w * (probs[k] - onehot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            } => {
                let c = val(*gain).len();
                let gv = val(*gain).to_vec();
                if let Some(dg) = buf(grads, nodes, *gain) {
                    for (r, grow) in g.chunks(c).enumerate() {
                        for j in 0..c {
                            dg[j] = dg[j] + grow[j] * normed[r * c + j];
                        }
                    }
                }
                if let Some(db) = buf(grads, nodes, *bias) {
                    for grow in g.chunks(c) {
                        db.iter_mut().zip(grow).for_each(|(a, &b)| *a = *a + b);
                    }
                }
                if let Some(dx) = buf(grads, nodes, *x) {
                    let mut dn = vec![T::zero(); c];
                    for (r, grow) in g.chunks(c).enumerate() {
                        let nrow = &normed[r * c..(r + 1) * c];
                        let (mut m1, mut m2) = (0.0f64, 0.0f64);
                        for j in 0..c {
                            dn[j] = grow[j] * gv[j];
                            m1 += dn[j].as_f64();
                            m2 += (dn[j] * nrow[j]).as_f64();
                        }
                        let (m1, m2) = (T::of(m1 / c as f64), T::of(m2 / c as f64));
                        for j in 0..c {
                            let k = r * c + j;
                            dx[k] = dx[k] + rstd[r] * (dn[j] - m1 - nrow[j] * m2);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(dx) = buf(grads, nodes, *x) {
                    for ((a, &gy), &m) in dx.iter_mut().zip(g).zip(mask) {
                        *a = *a + gy * m;
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(dt) = buf(grads, nodes, *table) {
                    let d = nodes[table.0].shape[1];
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(T::one(), &g[r * d..(r + 1) * d], &mut dt[id * d..(id + 1) * d]);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                dims,
                causal,
                key_mask,
                probs,
            } => {
                let AttnDims {
                    batch,
                    sq,
                    sk,
                    heads,
                    dh,
                } = *dims;
                let d = heads * dh;
                let scale = T::of(1.0 / (dh as f64).sqrt());
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let (need_q, need_k, need_v) = (
                    nodes[q.0].requires_grad,
                    nodes[k.0].requires_grad,
                    nodes[v.0].requires_grad,
                );
                let mut dq = vec![T::zero(); if need_q { qv.len() } else { 0 }];
                let mut dk = vec![T::zero(); if need_k { kv.len() } else { 0 }];
                let mut dv = vec![T::zero(); if need_v { vv.len() } else { 0 }];
                let mut ds = vec![T::zero(); sk];
                for b in 0..batch {
                    for h in 0..heads {
                        for i in 0..sq {
                            let prow = &probs[((b * heads + h) * sq + i) * sk..][..sk];
                            let go = &g[(b * sq + i) * d + h * dh..][..dh];
                            let valid = |j: usize| {
                                key_mask.as_ref().is_none_or(|m| m[b * sk + j]) && (!causal || j <= i)
                            };
                            let mut sdot = 0.0f64;
                            for j in 0..sk {
                                ds[j] = T::zero();
                                if valid(j) {
                                    let dp = dot(go, &vv[(b * sk + j) * d + h * dh..][..dh]);
                                    ds[j] = dp;
                                    sdot += (prow[j] * dp).as_f64();
                                }
                            }
                            let sdot = T::of(sdot);
                            let qrow = &qv[(b * sq + i) * d + h * dh..][..dh];
                            for j in (0..sk).filter(|&j| valid(j)) {
                                let s = prow[j] * (ds[j] - sdot) * scale;
                                let koff = (b * sk + j) * d + h * dh;
                                if need_q {
                                    axpy(s, &kv[koff..][..dh], &mut dq[(b * sq + i) * d + h * dh..][..dh]);
                                }
                                if need_k {
                                    axpy(s, qrow, &mut dk[koff..][..dh]);
                                }
                                if need_v {
                                    axpy(prow[j], go, &mut dv[koff..][..dh]);
                                }
                            }
                        }
                    }
                }
                for (var, part) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(dst) = buf(grads, nodes, var) {
                        dst.iter_mut().zip(part).for_each(|(a, b)| *a = *a + b);
                    }
                }
            }
        }
    }
}
