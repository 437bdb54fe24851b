use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::segment::giou_with_grad;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// rhs is a 1-D vector matching the trailing axis of lhs
    Row,
    /// rhs holds a single value
    Scalar,
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, S),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        rstd: Vec<S>,
        xhat: Vec<S>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        depthwise: bool,
    },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    NormalizeRows {
        x: Var,
        norms: Vec<S>,
        eps: S,
    },
    FocalLoss {
        p: Var,
        targets: Vec<S>,
        row_weights: Vec<S>,
        alpha: S,
        gamma: S,
    },
    GiouLoss {
        pred: Var,
        targets: Vec<[S; 2]>,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Convolution geometry for [`Tape::conv1d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub depthwise: bool,
}

/// Records operations in execution order; [`Tape::backward`] walks them in
/// reverse.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

const LOG_FLOOR: f64 = 1e-8;

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf without gradient tracking.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(op, format!("expected 2-D input, got {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("[{m}, {k}] x [{k2}, {n}]: inner dimensions differ"),
            ));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == S::zero() {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o = *o + aip * bv;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2("transpose", a)?;
        let av = self.value(a).data();
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&[c, r], out)?, Op::Transpose(a), rg))
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            Ok(Bcast::Same)
        } else if self.value(b).len() == 1 {
            Ok(Bcast::Scalar)
        } else if sb.len() == 1 && sa.last() == sb.last() {
            Ok(Bcast::Row)
        } else {
            Err(Error::dim(op, format!("cannot broadcast {sb:?} onto {sa:?}")))
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
        op: impl FnOnce(Var, Var, Bcast) -> Op<S>,
    ) -> Result<Var> {
        let bc = self.bcast(name, a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let data: Vec<S> = match bc {
            Bcast::Same => av.data().iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Scalar => av.data().iter().map(|&x| f(x, bv[0])).collect(),
            Bcast::Row => {
                let n = bv.len();
                av.data().iter().enumerate().map(|(i, &x)| f(x, bv[i % n])).collect()
            }
        };
        let out = Tensor::new(av.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op(a, b, bc), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    fn unary(&mut self, a: Var, f: impl Fn(S) -> S, op: Op<S>) -> Var {
        let av = self.value(a);
        let out = Tensor {
            shape: av.shape().to_vec(),
            data: av.data().iter().map(|&x| f(x)).collect(),
        };
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > S::zero() { x } else { S::zero() }, Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, |x| gelu_fwd(x).0, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.unary(a, |x| x.exp(), Op::Exp(a));
        if !self.value(out).all_finite() {
            return Err(Error::Domain {
                op: "exp",
                detail: "result overflowed".into(),
            });
        }
        Ok(out)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self.value(a).data().iter().find(|&&x| !(x > S::zero())) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("argument {x} is not positive"),
            });
        }
        Ok(self.unary(a, |x| x.ln(), Op::Log(a)))
    }

    /// Softmax over the trailing axis, stabilised by subtracting the row max.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let n = *av.shape().last().ok_or_else(|| Error::dim("softmax", "scalar input"))?;
        if n == 0 {
            return Err(Error::dim("softmax", "empty trailing axis"));
        }
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().fold(S::neg_infinity(), |m, &x| m.max(x));
            let mut total = S::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total = total + *x;
            }
            for x in row.iter_mut() {
                *x = *x / total;
            }
        }
        let out = Tensor::new(av.shape(), data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    /// Normalise each trailing-axis row to zero mean and unit (population)
    /// variance, then apply `gamma * x + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<Var> {
        let xv = self.value(x);
        let d = *xv
            .shape()
            .last()
            .ok_or_else(|| Error::dim("layer_norm", "scalar input"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "affine params {:?}/{:?} do not match width {d}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let dn = S::of(d as f64);
        let rows = xv.len() / d;
        let mut out = vec![S::zero(); xv.len()];
        let mut xhat = vec![S::zero(); xv.len()];
        let mut rstd = vec![S::zero(); rows];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            let rs = S::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                rstd,
                xhat,
            },
            rg,
        ))
    }

    /// 1-D convolution over time for a `[T, c_in]` input.
    ///
    /// Regular kernels are `[k, c_in, c_out]`; depthwise kernels are
    /// `[k, c]`. Output length is `(T + 2p - k) / stride + 1`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let (t, cin) = self.dims2("conv1d", x)?;
        let ws = self.shape(w).to_vec();
        let (k, cout) = match (spec.depthwise, &ws[..]) {
            (true, &[k, c]) if c == cin => (k, c),
            (false, &[k, ci, co]) if ci == cin => (k, co),
            _ => {
                return Err(Error::dim(
                    "conv1d",
                    format!(
                        "kernel {ws:?} incompatible with input [{t}, {cin}] (depthwise: {})",
                        spec.depthwise
                    ),
                ))
            }
        };
        if k % 2 == 0 {
            return Err(Error::dim("conv1d", format!("kernel width {k} is even")));
        }
        if !(spec.stride == 1 || spec.stride == 2) {
            return Err(Error::dim("conv1d", format!("stride {} not in {{1, 2}}", spec.stride)));
        }
        let padded = t + 2 * spec.padding;
        if padded < k {
            return Err(Error::dim(
                "conv1d",
                format!("kernel width {k} exceeds padded input length {padded}"),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::dim("conv1d", format!("bias {:?} != [{cout}]", self.shape(b))));
            }
        }
        let tout = (padded - k) / spec.stride + 1;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![S::zero(); tout * cout];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(cout) {
                row.copy_from_slice(bv);
            }
        }
        for o in 0..tout {
            let orow = &mut out[o * cout..(o + 1) * cout];
            for j in 0..k {
                let Some(src) = (o * spec.stride + j).checked_sub(spec.padding) else {
                    continue;
                };
                if src >= t {
                    continue;
                }
                let xrow = &xv[src * cin..(src + 1) * cin];
                if spec.depthwise {
                    let wrow = &wv[j * cin..(j + 1) * cin];
                    for c in 0..cin {
                        orow[c] = orow[c] + xrow[c] * wrow[c];
                    }
                } else {
                    for (ci, &xval) in xrow.iter().enumerate() {
                        let wrow = &wv[(j * cin + ci) * cout..(j * cin + ci + 1) * cout];
                        for (o, &wv) in orow.iter_mut().zip(wrow) {
                            *o = *o + xval * wv;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(&[tout, cout], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            out,
            Op::Conv1d {
                x,
                w,
                b,
                stride: spec.stride,
                pad: spec.padding,
                depthwise: spec.depthwise,
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = self.dims2("slice_cols", a)?;
        if start + width > c {
            return Err(Error::dim(
                "slice_cols",
                format!("columns {start}..{} out of {c}", start + width),
            ));
        }
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&av[i * c + start..i * c + start + width]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&[r, width], out)?, Op::SliceCols(a, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::dim("concat_cols", "no inputs"))?;
        let (r, _) = self.dims2("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2("concat_cols", p)?;
            if pr != r {
                return Err(Error::dim("concat_cols", format!("row counts {pr} != {r}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(&[r, total], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2("gather_rows", a)?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::dim("gather_rows", format!("row {bad} out of {r}")));
        }
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&av[i * c..(i + 1) * c]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(&[rows.len(), c], out)?,
            Op::GatherRows(a, rows.to_vec()),
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<S>();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = S::of(v.len().max(1) as f64);
        let s = v.data().iter().copied().sum::<S>() / n;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Scale every trailing-axis row to unit L2 norm (rows shorter than `eps`
    /// are divided by `eps`).
    pub fn normalize_rows(&mut self, a: Var, eps: S) -> Result<Var> {
        let av = self.value(a);
        let d = *av
            .shape()
            .last()
            .ok_or_else(|| Error::dim("normalize_rows", "scalar input"))?;
        let mut data = av.data().to_vec();
        let mut norms = Vec::with_capacity(data.len() / d.max(1));
        for row in data.chunks_mut(d) {
            let n = row.iter().map(|&v| v * v).sum::<S>().sqrt();
            let div = n.max(eps);
            row.iter_mut().for_each(|v| *v = *v / div);
            norms.push(n);
        }
        let out = Tensor::new(av.shape(), data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::NormalizeRows { x: a, norms, eps }, rg))
    }

    /// Weighted sum of sigmoid focal loss terms over a `[R, C]` probability
    /// matrix. `targets` is row-major `[R, C]` in `{0, 1}`, `row_weights` has
    /// length `R` (0 masks a row out). Log arguments are floored at 1e-8.
    pub fn focal_loss_sum(&mut self, p: Var, targets: &[S], row_weights: &[S], alpha: S, gamma: S) -> Result<Var> {
        let (r, c) = self.dims2("focal_loss", p)?;
        if targets.len() != r * c || row_weights.len() != r {
            return Err(Error::dim(
                "focal_loss",
                format!(
                    "probabilities [{r}, {c}] vs {} targets and {} row weights",
                    targets.len(),
                    row_weights.len()
                ),
            ));
        }
        let pv = self.value(p).data();
        let mut total = S::zero();
        for i in 0..r {
            let w = row_weights[i];
            if w == S::zero() {
                continue;
            }
            for j in 0..c {
                total = total + w * focal_term(pv[i * c + j], targets[i * c + j], alpha, gamma).0;
            }
        }
        let rg = self.rg(p);
        Ok(self.push(
            Tensor::scalar(total),
            Op::FocalLoss {
                p,
                targets: targets.to_vec(),
                row_weights: row_weights.to_vec(),
                alpha,
                gamma,
            },
            rg,
        ))
    }

    /// Sum of `1 - gIoU` between predicted and target segments that share a
    /// centre. Each row of `pred` is a `(start, end)` distance pair; the
    /// segment is `[-start, end]` around the common centre.
    pub fn giou_loss_sum(&mut self, pred: Var, targets: &[[S; 2]]) -> Result<Var> {
        let (r, c) = self.dims2("giou_loss", pred)?;
        if c != 2 || r != targets.len() {
            return Err(Error::dim(
                "giou_loss",
                format!("prediction [{r}, {c}] vs {} targets", targets.len()),
            ));
        }
        let pv = self.value(pred).data();
        let mut total = S::zero();
        for (i, t) in targets.iter().enumerate() {
            let (g, _, _) = giou_with_grad(-pv[2 * i], pv[2 * i + 1], -t[0], t[1]);
            total = total + (S::one() - g);
        }
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(total),
            Op::GiouLoss {
                pred,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.grads[i] {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    slot => {
                        *slot = Some(Tensor::new(self.nodes[i].value.shape(), g)?);
                    }
                }
                continue;
            }
            for (input, contribution) in self.input_grads(i, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, &b)| *a = *a + b),
                    slot => *slot = Some(contribution),
                }
            }
        }
        Ok(())
    }

    fn input_grads(&self, i: usize, g: &[S]) -> Vec<(Var, Vec<S>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let want = |v: Var| self.nodes[v.0].requires_grad;
        let zero = S::zero();
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2().expect("2-D");
                let n = self.nodes[b.0].value.shape()[1];
                let (av, bv) = (val(*a), val(*b));
                let mut res = vec![];
                if want(*a) {
                    let mut da = vec![zero; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            da[i * k + p] = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                        }
                    }
                    res.push((*a, da));
                }
                if want(*b) {
                    let mut db = vec![zero; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = av[i * k + p];
                            let drow = &mut db[p * n..(p + 1) * n];
                            for (d, &gv) in drow.iter_mut().zip(grow) {
                                *d = *d + aip * gv;
                            }
                        }
                    }
                    res.push((*b, db));
                }
                res
            }
            Op::Transpose(a) => {
                let (r, c) = self.nodes[a.0].value.dims2().expect("2-D");
                let mut da = vec![zero; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = g[j * r + i];
                    }
                }
                vec![(*a, da)]
            }
            Op::Add(a, b, bc) => vec![(*a, g.to_vec()), (*b, reduce_bcast(g, *bc, val(*b).len()))],
            Op::Sub(a, b, bc) => {
                let db = reduce_bcast(g, *bc, val(*b).len());
                vec![(*a, g.to_vec()), (*b, db.into_iter().map(|v| -v).collect())]
            }
            Op::Mul(a, b, bc) => {
                let (av, bv) = (val(*a), val(*b));
                let nb = bv.len();
                let bat = |i: usize| match bc {
                    Bcast::Same => bv[i],
                    Bcast::Scalar => bv[0],
                    Bcast::Row => bv[i % nb],
                };
                let da: Vec<S> = g.iter().enumerate().map(|(i, &gv)| gv * bat(i)).collect();
                let prod: Vec<S> = g.iter().zip(av).map(|(&gv, &x)| gv * x).collect();
                vec![(*a, da), (*b, reduce_bcast(&prod, *bc, nb))]
            }
            Op::Scale(a, c) => vec![(*a, g.iter().map(|&v| v * *c).collect())],
            Op::Relu(a) => {
                let av = val(*a);
                vec![(
                    *a,
                    g.iter()
                        .zip(av)
                        .map(|(&gv, &x)| if x > zero { gv } else { zero })
                        .collect(),
                )]
            }
            Op::Gelu(a) => {
                let av = val(*a);
                vec![(*a, g.iter().zip(av).map(|(&gv, &x)| gv * gelu_fwd(x).1).collect())]
            }
            Op::Sigmoid(a) => vec![(*a, g.iter().zip(out).map(|(&gv, &y)| gv * y * (S::one() - y)).collect())],
            Op::Exp(a) => vec![(*a, g.iter().zip(out).map(|(&gv, &y)| gv * y).collect())],
            Op::Log(a) => vec![(*a, g.iter().zip(val(*a)).map(|(&gv, &x)| gv / x).collect())],
            Op::Softmax(a) => {
                let n = *node.value.shape().last().expect("non-scalar");
                let mut da = vec![zero; out.len()];
                for ((drow, grow), yrow) in da.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                    let dot: S = grow.iter().zip(yrow).map(|(&x, &y)| x * y).sum();
                    for j in 0..n {
                        drow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                vec![(*a, da)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                rstd,
                xhat,
            } => {
                let gam = val(*gamma);
                let d = gam.len();
                let dn = S::of(d as f64);
                let mut dx = vec![zero; g.len()];
                let mut dgamma = vec![zero; d];
                let mut dbeta = vec![zero; d];
                for (r, &rs) in rstd.iter().enumerate() {
                    let grow = &g[r * d..(r + 1) * d];
                    let hrow = &xhat[r * d..(r + 1) * d];
                    let mut sum_dh = zero;
                    let mut sum_dh_h = zero;
                    for j in 0..d {
                        let dh = grow[j] * gam[j];
                        sum_dh = sum_dh + dh;
                        sum_dh_h = sum_dh_h + dh * hrow[j];
                        dgamma[j] = dgamma[j] + grow[j] * hrow[j];
                        dbeta[j] = dbeta[j] + grow[j];
                    }
                    for j in 0..d {
                        let dh = grow[j] * gam[j];
                        dx[r * d + j] = rs / dn * (dn * dh - sum_dh - hrow[j] * sum_dh_h);
                    }
                }
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad,
                depthwise,
            } => {
                let (t, cin) = self.nodes[x.0].value.dims2().expect("2-D");
                let ws = self.nodes[w.0].value.shape();
                let k = ws[0];
                let cout = *ws.last().expect("kernel rank");
                let tout = node.value.shape()[0];
                let (xv, wv) = (val(*x), val(*w));
                let mut dx = vec![zero; xv.len()];
                let mut dw = vec![zero; wv.len()];
                for o in 0..tout {
                    let grow = &g[o * cout..(o + 1) * cout];
                    for j in 0..k {
                        let Some(src) = (o * stride + j).checked_sub(*pad) else {
                            continue;
                        };
                        if src >= t {
                            continue;
                        }
                        let xrow = &xv[src * cin..(src + 1) * cin];
                        if *depthwise {
                            for c in 0..cin {
                                dx[src * cin + c] = dx[src * cin + c] + grow[c] * wv[j * cin + c];
                                dw[j * cin + c] = dw[j * cin + c] + grow[c] * xrow[c];
                            }
                        } else {
                            for ci in 0..cin {
                                let base = (j * cin + ci) * cout;
                                let wrow = &wv[base..base + cout];
                                let mut acc = zero;
                                for co in 0..cout {
                                    acc = acc + grow[co] * wrow[co];
                                    dw[base + co] = dw[base + co] + grow[co] * xrow[ci];
                                }
                                dx[src * cin + ci] = dx[src * cin + ci] + acc;
                            }
                        }
                    }
                }
                let mut res = vec![(*x, dx), (*w, dw)];
                if let Some(b) = b {
                    let mut db = vec![zero; cout];
                    for grow in g.chunks(cout) {
                        for (d, &gv) in db.iter_mut().zip(grow) {
                            *d = *d + gv;
                        }
                    }
                    res.push((*b, db));
                }
                res
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.nodes[a.0].value.dims2().expect("2-D");
                let w = node.value.shape()[1];
                let mut da = vec![zero; r * c];
                for i in 0..r {
                    da[i * c + start..i * c + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                vec![(*a, da)]
            }
            Op::ConcatCols(parts) => {
                let r = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut off = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let w = self.nodes[p.0].value.shape()[1];
                    let mut dp = Vec::with_capacity(r * w);
                    for i in 0..r {
                        dp.extend_from_slice(&g[i * total + off..i * total + off + w]);
                    }
                    off += w;
                    res.push((p, dp));
                }
                res
            }
            Op::GatherRows(a, rows) => {
                let c = node.value.shape()[1];
                let mut da = vec![zero; val(*a).len()];
                for (k, &i) in rows.iter().enumerate() {
                    for j in 0..c {
                        da[i * c + j] = da[i * c + j] + g[k * c + j];
                    }
                }
                vec![(*a, da)]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).len()])],
            Op::Mean(a) => {
                let n = val(*a).len();
                vec![(*a, vec![g[0] / S::of(n.max(1) as f64); n])]
            }
            Op::NormalizeRows { x, norms, eps } => {
                let d = *node.value.shape().last().expect("non-scalar");
                let mut dx = vec![zero; out.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let grow = &g[r * d..(r + 1) * d];
                    let yrow = &out[r * d..(r + 1) * d];
                    let drow = &mut dx[r * d..(r + 1) * d];
                    if n > *eps {
                        let dot: S = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            drow[j] = (grow[j] - yrow[j] * dot) / n;
                        }
                    } else {
                        for j in 0..d {
                            drow[j] = grow[j] / *eps;
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::FocalLoss {
                p,
                targets,
                row_weights,
                alpha,
                gamma,
            } => {
                let pv = val(*p);
                let c = self.nodes[p.0].value.shape()[1];
                let mut dp = vec![zero; pv.len()];
                for (i, &w) in row_weights.iter().enumerate() {
                    if w == zero {
                        continue;
                    }
                    for j in 0..c {
                        let k = i * c + j;
                        dp[k] = g[0] * w * focal_term(pv[k], targets[k], *alpha, *gamma).1;
                    }
                }
                vec![(*p, dp)]
            }
            Op::GiouLoss { pred, targets } => {
                let pv = val(*pred);
                let mut dp = vec![zero; pv.len()];
                for (i, t) in targets.iter().enumerate() {
                    let (_, d_ps, d_pe) = giou_with_grad(-pv[2 * i], pv[2 * i + 1], -t[0], t[1]);
                    // loss = 1 - giou, start = -ps, end = pe
                    dp[2 * i] = g[0] * d_ps;
                    dp[2 * i + 1] = -g[0] * d_pe;
                }
                vec![(*pred, dp)]
            }
        }
    }
}

fn reduce_bcast<S: Scalar>(g: &[S], bc: Bcast, n: usize) -> Vec<S> {
    match bc {
        Bcast::Same => g.to_vec(),
        Bcast::Scalar => vec![g.iter().copied().sum()],
        Bcast::Row => {
            let mut out = vec![S::zero(); n];
            for row in g.chunks(n) {
                for (o, &v) in out.iter_mut().zip(row) {
                    *o = *o + v;
                }
            }
            out
        }
    }
}

pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// tanh-approximate GELU and its derivative.
fn gelu_fwd<S: Scalar>(x: S) -> (S, S) {
    let c = S::of((2.0 / std::f64::consts::PI).sqrt());
    let k = S::of(0.044715);
    let half = S::of(0.5);
    let u = c * (x + k * x * x * x);
    let th = u.tanh();
    let y = half * x * (S::one() + th);
    let dy = half * (S::one() + th) + half * x * (S::one() - th * th) * c * (S::one() + S::of(3.0) * k * x * x);
    (y, dy)
}

/// Focal loss of one probability against a target in `[0, 1]`, and its
/// derivative with respect to the probability.
pub(crate) fn focal_term<S: Scalar>(p: S, y: S, alpha: S, gamma: S) -> (S, S) {
    let zero = S::zero();
    let one = S::one();
    let floor = S::of(LOG_FLOOR);
    let q = one - p;

    let (log_p, dlog_p) = if p > floor {
        (p.ln(), one / p)
    } else {
        (floor.ln(), zero)
    };
    let (log_q, dlog_q) = if q > floor {
        (q.ln(), -one / q)
    } else {
        (floor.ln(), zero)
    };
    // d/dx x^gamma, with the gamma == 0 limit handled explicitly
    let dpow = |x: S| {
        if gamma == zero {
            zero
        } else {
            gamma * x.powf(gamma - one)
        }
    };

    let mut loss = zero;
    let mut grad = zero;
    if y > zero {
        let wq = q.powf(gamma);
        loss = loss - y * alpha * wq * log_p;
        grad = grad - y * alpha * (-dpow(q) * log_p + wq * dlog_p);
    }
    if y < one {
        let wp = p.powf(gamma);
        let neg = one - y;
        loss = loss - neg * (one - alpha) * wp * log_q;
        grad = grad - neg * (one - alpha) * (dpow(p) * log_q + wp * dlog_q);
    }
    (loss, grad)
}
