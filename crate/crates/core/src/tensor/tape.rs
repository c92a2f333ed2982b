//! Dynamic tape: every op evaluates eagerly, appends a node, and remembers
//! just enough to run its adjoint during [`Tape::backward`].

use std::sync::Arc;

use super::gemm::{gemm, MatRef};
use super::{softmax_into, Float, ParamStore, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Keys and values (rows × width, already position-encoded) of tokens that
/// precede a segment, e.g. the decode cache of one hypothesis for one layer.
#[derive(Debug, Clone)]
pub struct KvPast<F: Float> {
    pub k: Arc<Vec<F>>,
    pub v: Arc<Vec<F>>,
    pub len: usize,
}

/// One independent sequence inside a packed attention call: rows
/// `start..start + len` of q/k/v, optionally preceded by cached keys/values.
#[derive(Debug, Clone)]
pub struct AttnSegment<F: Float> {
    pub start: usize,
    pub len: usize,
    pub past: Option<KvPast<F>>,
}

impl<F: Float> AttnSegment<F> {
    pub fn new(start: usize, len: usize) -> Self {
        AttnSegment {
            start,
            len,
            past: None,
        }
    }

    fn past_len(&self) -> usize {
        self.past.as_ref().map_or(0, |p| p.len)
    }
}

enum Op<F: Float> {
    Leaf,
    MatMul { a: Var, b: Var, tb: bool },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddBias(Var, Var),
    Relu(Var),
    Silu(Var),
    RmsNorm { x: Var, g: Var, inv_rms: Vec<F> },
    Embedding { table: Var, ids: Vec<usize> },
    Rope { x: Var, n_heads: usize, positions: Vec<usize>, base: F },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        segs: Vec<AttnSegment<F>>,
        probs: Vec<Vec<F>>,
    },
    Softmax { x: Var, tau: F },
    MaskedCe { logits: Var, targets: Vec<usize>, mask: Vec<bool>, probs: Vec<F>, count: usize },
    Sum(Var),
    ConcatRows(Vec<Var>),
    StackCompress { x: Var, numel: usize },
    SliceRows { x: Var, start: usize },
}

struct Node<F: Float> {
    shape: Vec<usize>,
    value: Arc<Vec<F>>,
    requires_grad: bool,
    op: Op<F>,
    /// Attention probabilities kept for inspection even when no gradient
    /// is recorded.
    attn_probs: Option<Vec<Vec<F>>>,
}

/// Recorder for one forward pass.
pub struct Tape<F: Float> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
    grad_enabled: bool,
    keep_attn: bool,
    params: Vec<(String, Var)>,
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let c = *shape.last().expect("shape");
    (shape.iter().product::<usize>() / c, c)
}

fn acc<F: Float>(grads: &mut [Option<Vec<F>>], v: Var, len: usize) -> &mut Vec<F> {
    grads[v.0].get_or_insert_with(|| vec![F::zero(); len])
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
            keep_attn: false,
            params: Vec::new(),
        }
    }

    /// A tape that records values only. Nothing on it requires grad.
    pub fn no_grad() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// Keep attention probabilities on every attention node.
    pub fn keep_attention(mut self) -> Self {
        self.keep_attn = true;
        self
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<F>, requires_grad: bool, op: Op<F>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = requires_grad && self.grad_enabled;
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            value: Arc::new(value),
            requires_grad,
            op,
            attn_probs: None,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn value_arc(&self, v: Var) -> Arc<Vec<F>> {
        self.nodes[v.0].value.clone()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Snapshot of a node as a standalone tensor (shares the buffer).
    pub fn tensor(&self, v: Var) -> Tensor<F> {
        let n = &self.nodes[v.0];
        Tensor::from_arc(n.shape.clone(), n.value.clone())
    }

    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads[v.0].as_deref()
    }

    pub fn attention_probs(&self, v: Var) -> Option<&[Vec<F>]> {
        match (&self.nodes[v.0].op, &self.nodes[v.0].attn_probs) {
            (Op::Attention { probs, .. }, _) => Some(probs),
            (_, Some(p)) => Some(p),
            _ => None,
        }
    }

    pub(crate) fn param_leaves(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(n, v)| (n.as_str(), *v))
    }

    /// Records a leaf. It requires grad iff the tensor does and the tape
    /// records gradients.
    pub fn leaf(&mut self, t: &Tensor<F>) -> Var {
        let rg = t.requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data_arc().clone(),
            requires_grad: rg,
            op: Op::Leaf,
            attn_probs: None,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<F>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    /// Records a parameter leaf; its gradient can later be pulled into the
    /// store with [`ParamStore::accumulate_grads`].
    pub fn param(&mut self, store: &ParamStore<F>, name: &str) -> Result<Var> {
        let t = store.get(name)?;
        let v = self.leaf(t);
        if self.rg(v) {
            self.params.push((name.to_string(), v));
        }
        Ok(v)
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    // ---------------------------------------------------------------- ops

    /// `a · b` for `a: [m×k]`, `b: [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]` (linear layer with `[out×in]` weights).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let mut out = vec![F::zero(); m * n];
        let am = MatRef::dense(self.value(a), m, k);
        let bm = if tb {
            MatRef::dense(self.value(b), n, k).t()
        } else {
            MatRef::dense(self.value(b), k, n)
        };
        gemm(F::one(), am, bm, F::zero(), &mut out, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul { a, b, tb }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, rg, Op::Scale(a, c))
    }

    /// Adds a `[d]` bias to every row of `x: [..×d]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = rows_cols(self.shape(x));
        if self.shape(bias) != [c] {
            return Err(shape_err("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias);
        let out = self
            .value(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &bb)| v + bb))
            .collect();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(self.shape(x).to_vec(), out, rg, Op::AddBias(x, bias)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(F::zero())).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, rg, Op::Relu(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .iter()
            .map(|&v| v / (F::one() + (-v).exp()))
            .collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, rg, Op::Silu(x))
    }

    /// Scale-only RMS normalization over the last dimension with gain `g: [d]`.
    pub fn rms_norm(&mut self, x: Var, g: Var, eps: F) -> Result<Var> {
        let (_, c) = rows_cols(self.shape(x));
        if self.shape(g) != [c] {
            return Err(shape_err("rms_norm", self.shape(x), self.shape(g)));
        }
        let gain = self.value(g);
        let cf = F::from_usize(c).expect("width");
        let mut inv_rms = Vec::new();
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).chunks(c) {
            let ms = row.iter().map(|&v| v * v).sum::<F>() / cf;
            let r = F::one() / (ms + eps).sqrt();
            inv_rms.push(r);
            out.extend(row.iter().zip(gain).map(|(&v, &gg)| v * r * gg));
        }
        let rg = self.rg(x) || self.rg(g);
        Ok(self.push(self.shape(x).to_vec(), out, rg, Op::RmsNorm { x, g, inv_rms }))
    }

    /// Row gather from `table: [V×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(shape_err("embedding", &s, &[ids.len()]));
        }
        let (v, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Param(format!("embedding id {bad} out of range for table of {v} rows")));
        }
        if ids.is_empty() {
            return Err(Error::Degenerate("embedding lookup of zero ids".into()));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Rotary position encoding on adjacent pairs within each head.
    pub fn rope(&mut self, x: Var, n_heads: usize, positions: &[usize], base: F) -> Result<Var> {
        let (r, c) = rows_cols(self.shape(x));
        if r != positions.len() || n_heads == 0 || c % n_heads != 0 || (c / n_heads) % 2 != 0 {
            return Err(shape_err("rope", self.shape(x), &[positions.len(), n_heads]));
        }
        let mut out = self.value(x).to_vec();
        rope_apply(&mut out, c, n_heads, positions, base, false);
        let rg = self.rg(x);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            rg,
            Op::Rope {
                x,
                n_heads,
                positions: positions.to_vec(),
                base,
            },
        ))
    }

    /// Multi-head scaled dot-product attention over packed segments.
    /// With `causal`, query `j` of a segment sees cached keys plus new keys
    /// `0..=j`; otherwise it sees the whole segment.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        segs: Vec<AttnSegment<F>>,
        causal: bool,
    ) -> Result<Var> {
        let sq = self.shape(q).to_vec();
        if sq.len() != 2 || self.shape(k) != sq.as_slice() || self.shape(v) != sq.as_slice() {
            return Err(shape_err("attention", &sq, self.shape(k)));
        }
        let (n, d) = (sq[0], sq[1]);
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::Config(format!("width {d} not divisible by {n_heads} heads")));
        }
        let hd = d / n_heads;
        let scale = F::one() / F::from_usize(hd).expect("head dim").sqrt();
        for s in &segs {
            if s.start + s.len > n || s.len == 0 {
                return Err(Error::Contract(format!(
                    "attention segment {}..{} outside {n} rows",
                    s.start,
                    s.start + s.len
                )));
            }
            if let Some(p) = &s.past {
                if p.k.len() != p.len * d || p.v.len() != p.len * d {
                    return Err(Error::Contract("cached keys/values do not match their length".into()));
                }
            }
        }
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![F::zero(); n * d];
        let mut probs = Vec::with_capacity(segs.len() * n_heads);
        for s in &segs {
            let (l, p) = (s.len, s.past_len());
            let w = p + l;
            for h in 0..n_heads {
                let off = s.start * d + h * hd;
                let qh = MatRef::new(&qv[off..], l, hd, d);
                let mut sc = vec![F::zero(); l * w];
                if let Some(past) = &s.past {
                    let kp = MatRef::new(&past.k[h * hd..], p, hd, d);
                    gemm(scale, qh, kp.t(), F::zero(), &mut sc, w);
                }
                let kn = MatRef::new(&kv[off..], l, hd, d);
                gemm(scale, qh, kn.t(), F::zero(), &mut sc[p..], w);
                let mut pr = vec![F::zero(); l * w];
                for j in 0..l {
                    let row = &mut sc[j * w..(j + 1) * w];
                    let visible = if causal { p + j + 1 } else { w };
                    softmax_into(&row[..visible], &mut pr[j * w..j * w + visible], F::one());
                }
                let oh = &mut out[off..];
                if let Some(past) = &s.past {
                    let vp = MatRef::new(&past.v[h * hd..], p, hd, d);
                    gemm(F::one(), MatRef::new(&pr, l, p, w), vp, F::zero(), oh, d);
                    gemm(F::one(), MatRef::new(&pr[p..], l, l, w), MatRef::new(&vv[off..], l, hd, d), F::one(), oh, d);
                } else {
                    gemm(F::one(), MatRef::new(&pr, l, l, w), MatRef::new(&vv[off..], l, hd, d), F::zero(), oh, d);
                }
                probs.push(pr);
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let keep = self.keep_attn;
        let kept = if keep && !(rg && self.grad_enabled) {
            Some(probs.clone())
        } else {
            None
        };
        let var = self.push(
            vec![n, d],
            out,
            rg,
            Op::Attention {
                q,
                k,
                v,
                n_heads,
                segs,
                probs,
            },
        );
        self.nodes[var.0].attn_probs = kept;
        Ok(var)
    }

    /// `softmax(x / tau)` over the last dimension.
    pub fn softmax(&mut self, x: Var, tau: F) -> Result<Var> {
        if !(tau > F::zero()) {
            return Err(Error::Param(format!("temperature must be positive, got {tau}")));
        }
        let (_, c) = rows_cols(self.shape(x));
        let out = super::softmax_rows(self.value(x), c, tau);
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), out, rg, Op::Softmax { x, tau }))
    }

    /// Mean negative log-likelihood of `targets` over rows where `mask` holds.
    pub fn masked_cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || targets.len() != s[0] || mask.len() != s[0] {
            return Err(shape_err("masked_cross_entropy", &s, &[targets.len(), mask.len()]));
        }
        let (t, v) = (s[0], s[1]);
        if let Some(&bad) = targets.iter().find(|&&y| y >= v) {
            return Err(Error::Param(format!("target id {bad} outside vocabulary of {v}")));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Degenerate("loss mask selects no position".into()));
        }
        let lv = self.value(logits);
        let mut probs = vec![F::zero(); t * v];
        let mut total = F::zero();
        for i in 0..t {
            if !mask[i] {
                continue;
            }
            let row = &lv[i * v..(i + 1) * v];
            let max = row.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
            let sum: F = row.iter().map(|&x| (x - max).exp()).sum();
            total += sum.ln() + max - row[targets[i]];
            let pr = &mut probs[i * v..(i + 1) * v];
            for (p, &x) in pr.iter_mut().zip(row) {
                *p = (x - max).exp() / sum;
            }
        }
        let loss = total / F::from_usize(count).expect("count");
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            rg,
            Op::MaskedCe {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], rg, Op::Sum(x))
    }

    /// Vertical concatenation of 2-D nodes of equal width.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Degenerate("concat of zero parts".into()))?;
        let c = self.shape(first)[self.shape(first).len() - 1];
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != c {
                return Err(shape_err("concat_rows", self.shape(first), s));
            }
            rows += s[0];
            out.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![rows, c], out, rg, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || len == 0 || start + len > s[0] {
            return Err(shape_err("slice_rows", &s, &[start, len]));
        }
        let c = s[1];
        let out = self.value(x)[start * c..(start + len) * c].to_vec();
        let rg = self.rg(x);
        Ok(self.push(vec![len, c], out, rg, Op::SliceRows { x, start }))
    }

    /// Concatenates every `k` consecutive rows along the feature axis,
    /// right-padding the last group with zero rows: `[T×d] → [⌈T/k⌉×k·d]`.
    pub fn stack_compress(&mut self, x: Var, k: usize) -> Result<Var> {
        if k < 1 {
            return Err(Error::Param("compression rate K must be at least 1".into()));
        }
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(shape_err("stack_compress", &s, &[k]));
        }
        let (t, d) = (s[0], s[1]);
        let groups = t.div_ceil(k);
        let mut out = self.value(x).to_vec();
        out.resize(groups * k * d, F::zero());
        let rg = self.rg(x);
        Ok(self.push(vec![groups, k * d], out, rg, Op::StackCompress { x, numel: t * d }))
    }

    // ----------------------------------------------------------- backward

    /// Reverse pass from a scalar. Parameter and leaf gradients accumulate
    /// across calls until [`Tape::zero_grad`]; intermediate adjoints are
    /// consumed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        // Intermediate grads are only transient seeds; clear any stale ones.
        for (i, n) in self.nodes.iter().enumerate() {
            if !matches!(n.op, Op::Leaf) {
                self.grads[i] = None;
            }
        }
        acc(&mut self.grads, loss, 1)[0] += F::one();
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[F]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        let val = |v: Var| -> &[F] { &nodes[v.0].value };
        let rg = |v: Var| nodes[v.0].requires_grad;
        let numel = |v: Var| nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, tb } => {
                let (a, b) = (*a, *b);
                let sa = &nodes[a.0].shape;
                let (m, k) = (sa[0], sa[1]);
                let n = node.shape[1];
                let dc = MatRef::dense(g, m, n);
                if rg(a) {
                    let bm = if *tb {
                        MatRef::dense(val(b), n, k)
                    } else {
                        MatRef::dense(val(b), k, n).t()
                    };
                    let ga = acc(grads, a, m * k);
                    gemm(F::one(), dc, bm, F::one(), ga, k);
                }
                if rg(b) {
                    let am = MatRef::dense(val(a), m, k);
                    if *tb {
                        let gb = acc(grads, b, n * k);
                        gemm(F::one(), dc.t(), am, F::one(), gb, k);
                    } else {
                        let gb = acc(grads, b, k * n);
                        gemm(F::one(), am.t(), dc, F::one(), gb, n);
                    }
                }
            }
            Op::Add(a, b) => {
                for &x in [a, b] {
                    if rg(x) {
                        acc(grads, x, g.len()).iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if rg(a) {
                    let bv = val(b);
                    let ga = acc(grads, a, g.len());
                    for ((d, &s), &o) in ga.iter_mut().zip(g).zip(bv) {
                        *d += s * o;
                    }
                }
                if rg(b) {
                    let av = val(a);
                    let gb = acc(grads, b, g.len());
                    for ((d, &s), &o) in gb.iter_mut().zip(g).zip(av) {
                        *d += s * o;
                    }
                }
            }
            Op::Scale(a, c) => {
                let ga = acc(grads, *a, g.len());
                for (d, &s) in ga.iter_mut().zip(g) {
                    *d += s * *c;
                }
            }
            Op::AddBias(x, bias) => {
                let c = numel(*bias);
                if rg(*x) {
                    acc(grads, *x, g.len()).iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
                if rg(*bias) {
                    let gb = acc(grads, *bias, c);
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::Relu(x) => {
                let xv = val(*x);
                let gx = acc(grads, *x, g.len());
                for ((d, &s), &v) in gx.iter_mut().zip(g).zip(xv) {
                    if v > F::zero() {
                        *d += s;
                    }
                }
            }
            Op::Silu(x) => {
                let xv = val(*x);
                let gx = acc(grads, *x, g.len());
                for ((d, &s), &v) in gx.iter_mut().zip(g).zip(xv) {
                    let sg = F::one() / (F::one() + (-v).exp());
                    *d += s * (sg + v * sg * (F::one() - sg));
                }
            }
            Op::RmsNorm { x, g: gain, inv_rms } => {
                let (x, gain) = (*x, *gain);
                let c = numel(gain);
                let cf = F::from_usize(c).expect("width");
                let (xv, gv) = (val(x), val(gain));
                if rg(x) {
                    let mut dx = vec![F::zero(); xv.len()];
                    for (r, ((row, grow), drow)) in xv.chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)).enumerate() {
                        let ir = inv_rms[r];
                        let dot: F = row.iter().zip(grow).zip(gv).map(|((&xx, &dy), &gg)| xx * dy * gg).sum();
                        let coef = ir * ir * ir * dot / cf;
                        for j in 0..c {
                            drow[j] = ir * gv[j] * grow[j] - row[j] * coef;
                        }
                    }
                    acc(grads, x, xv.len()).iter_mut().zip(&dx).for_each(|(d, &s)| *d += s);
                }
                if rg(gain) {
                    let mut dg = vec![F::zero(); c];
                    for (r, (row, grow)) in xv.chunks(c).zip(g.chunks(c)).enumerate() {
                        for j in 0..c {
                            dg[j] += grow[j] * row[j] * inv_rms[r];
                        }
                    }
                    acc(grads, gain, c).iter_mut().zip(&dg).for_each(|(d, &s)| *d += s);
                }
            }
            Op::Embedding { table, ids } => {
                let d = nodes[table.0].shape[1];
                let gt = acc(grads, *table, numel(*table));
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[r * d + j];
                    }
                }
            }
            Op::Rope {
                x,
                n_heads,
                positions,
                base,
            } => {
                let c = *node.shape.last().expect("shape");
                let mut dx = g.to_vec();
                rope_apply(&mut dx, c, *n_heads, positions, *base, true);
                acc(grads, *x, dx.len()).iter_mut().zip(&dx).for_each(|(d, &s)| *d += s);
            }
            Op::Attention {
                q,
                k,
                v,
                n_heads,
                segs,
                probs,
            } => {
                let (q, k, v) = (*q, *k, *v);
                let d = node.shape[1];
                let hd = d / n_heads;
                let scale = F::one() / F::from_usize(hd).expect("head dim").sqrt();
                let (qv, kv, vv) = (val(q), val(k), val(v));
                let mut dq = vec![F::zero(); qv.len()];
                let mut dk = vec![F::zero(); kv.len()];
                let mut dv = vec![F::zero(); vv.len()];
                let mut pi = 0;
                for s in segs {
                    let (l, p) = (s.len, s.past_len());
                    let w = p + l;
                    for h in 0..*n_heads {
                        let pr = &probs[pi];
                        pi += 1;
                        let off = s.start * d + h * hd;
                        let doh = MatRef::new(&g[off..], l, hd, d);
                        // dP = dO · Vᵀ
                        let mut dp = vec![F::zero(); l * w];
                        if let Some(past) = &s.past {
                            gemm(F::one(), doh, MatRef::new(&past.v[h * hd..], p, hd, d).t(), F::zero(), &mut dp, w);
                        }
                        gemm(F::one(), doh, MatRef::new(&vv[off..], l, hd, d).t(), F::zero(), &mut dp[p..], w);
                        // dS = P ⊙ (dP − rowsum(dP ⊙ P)), scaled
                        for j in 0..l {
                            let prow = &pr[j * w..(j + 1) * w];
                            let drow = &mut dp[j * w..(j + 1) * w];
                            let dot: F = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                            for (dd, &pp) in drow.iter_mut().zip(prow) {
                                *dd = pp * (*dd - dot) * scale;
                            }
                        }
                        let ds = &dp;
                        if let Some(past) = &s.past {
                            gemm(F::one(), MatRef::new(ds, l, p, w), MatRef::new(&past.k[h * hd..], p, hd, d), F::one(), &mut dq[off..], d);
                        }
                        gemm(F::one(), MatRef::new(&ds[p..], l, l, w), MatRef::new(&kv[off..], l, hd, d), F::one(), &mut dq[off..], d);
                        gemm(F::one(), MatRef::new(&ds[p..], l, l, w).t(), MatRef::new(&qv[off..], l, hd, d), F::one(), &mut dk[off..], d);
                        gemm(F::one(), MatRef::new(&pr[p..], l, l, w).t(), doh, F::one(), &mut dv[off..], d);
                    }
                }
                for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
                    if rg(var) {
                        acc(grads, var, buf.len()).iter_mut().zip(&buf).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::Softmax { x, tau } => {
                let c = *node.shape.last().expect("shape");
                let y = &node.value;
                let gx = acc(grads, *x, g.len());
                for ((yr, gr), dr) in y.chunks(c).zip(g.chunks(c)).zip(gx.chunks_mut(c)) {
                    let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        dr[j] += yr[j] * (gr[j] - dot) / *tau;
                    }
                }
            }
            Op::MaskedCe {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let v = nodes[logits.0].shape[1];
                let coef = g[0] / F::from_usize(*count).expect("count");
                let gl = acc(grads, *logits, numel(*logits));
                for (t, (&m, &y)) in mask.iter().zip(targets).enumerate() {
                    if !m {
                        continue;
                    }
                    for j in 0..v {
                        let onehot = if j == y { F::one() } else { F::zero() };
                        gl[t * v + j] += coef * (probs[t * v + j] - onehot);
                    }
                }
            }
            Op::Sum(x) => {
                let gx = acc(grads, *x, numel(*x));
                for d in gx.iter_mut() {
                    *d += g[0];
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = numel(p);
                    if rg(p) {
                        acc(grads, p, n).iter_mut().zip(&g[off..off + n]).for_each(|(d, &s)| *d += s);
                    }
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                let c = node.shape[1];
                let gx = acc(grads, *x, numel(*x));
                gx[start * c..start * c + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, &s)| *d += s);
            }
            Op::StackCompress { x, numel: n } => {
                acc(grads, *x, *n).iter_mut().zip(&g[..*n]).for_each(|(d, &s)| *d += s);
            }
        }
    }
}

/// Rotates adjacent pairs `(2i, 2i+1)` of every head by `pos · base^(-2i/hd)`;
/// `inverse` rotates by the negated angle (the adjoint).
pub(crate) fn rope_apply<F: Float>(x: &mut [F], width: usize, n_heads: usize, positions: &[usize], base: F, inverse: bool) {
    let hd = width / n_heads;
    let half = hd / 2;
    let inv_freq: Vec<F> = (0..half)
        .map(|i| {
            let e = F::from_usize(2 * i).expect("i") / F::from_usize(hd).expect("hd");
            F::one() / base.powf(e)
        })
        .collect();
    for (row, &pos) in x.chunks_mut(width).zip(positions) {
        let pf = F::from_usize(pos).expect("pos");
        for (i, &f) in inv_freq.iter().enumerate() {
            let ang = pf * f;
            let (s, c) = ang.sin_cos();
            let s = if inverse { -s } else { s };
            for h in 0..n_heads {
                let j = h * hd + 2 * i;
                let (a, b) = (row[j], row[j + 1]);
                row[j] = a * c - b * s;
                row[j + 1] = a * s + b * c;
            }
        }
    }
}
