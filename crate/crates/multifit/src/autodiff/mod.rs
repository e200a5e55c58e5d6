//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Tape`] owns every intermediate tensor of one forward pass. Ops append
//! nodes in topological order; [`Tape::backward`] replays them once in
//! reverse, accumulating gradients additively across fan-out. Any op that
//! produces a non-finite value aborts the step with an error naming the op.

pub mod kernels;

use crate::error::NumericsError;
use crate::tensor::Tensor;
pub use crate::tensor::Precision;
use kernels::{matmul, matmul_acc, matmul_tn_acc, sigmoid, transpose};

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise nonlinearity kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    MatmulNt { a: Var, b: Var },
    CausalConv { x: Var, w: Var, bias: Var, ctx: Option<Tensor> },
    Act { x: Var, kind: Activation },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Scale { x: Var, c: f64 },
    SumAll { x: Var },
    MeanAll { x: Var },
    FoPool { z: Var, f: Var, o: Var, c0: Var, cells: Vec<f64> },
    LstmSeq { x: Var, w: Var, u: Var, bias: Var, h0: Var, c0: Var, saved: LstmSaved },
    Embed { table: Var, ids: Vec<usize> },
    SmoothedCe { logits: Var, targets: Vec<usize>, eps: f64, probs: Vec<f64> },
    ConcatPool { h: Var, lengths: Vec<usize>, argmax: Vec<usize> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
}

struct LstmSaved {
    /// Post-activation gates `[T, B, 4H]`, laid out `[i | f | g | o]`.
    gates: Vec<f64>,
    /// Cell states `[T+1, B, H]`; index 0 is `c0`.
    cells: Vec<f64>,
    /// `tanh(c_t)` for every step, `[T, B, H]`.
    tanh_c: Vec<f64>,
}

struct Node {
    value: Tensor,
    op: Op,
    param: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
/// Parameter leaves always carry a gradient (zeros when unreachable).
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

pub struct Tape {
    precision: Precision,
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Tape { precision, nodes: Vec::new(), backward_done: false }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// All parameter leaves in registration order.
    pub fn param_vars(&self) -> Vec<Var> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.param)
            .map(|(i, _)| Var(i))
            .collect()
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Record a constant or input leaf. No gradient is reported for it.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        t.round_to(self.precision);
        self.nodes.push(Node { value: t, op: Op::Leaf, param: false });
        Var(self.nodes.len() - 1)
    }

    /// Record a parameter leaf; backward always yields a gradient for it.
    pub fn param(&mut self, mut t: Tensor) -> Var {
        t.round_to(self.precision);
        self.nodes.push(Node { value: t, op: Op::Leaf, param: true });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, mut value: Tensor, name: &'static str) -> Result<Var, NumericsError> {
        value.round_to(self.precision);
        if !value.all_finite() {
            return Err(NumericsError::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op, param: false });
        Ok(Var(self.nodes.len() - 1))
    }

    // ── Linear algebra ───────────────────────────────────────────────

    /// `a[..., k] @ b[k, n] -> [..., n]`. Leading axes of `a` collapse to rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let k = *ash.last().unwrap();
        if bsh.len() != 2 || bsh[0] != k {
            return Err(NumericsError::ShapeMismatch { op: "matmul", lhs: ash, rhs: bsh });
        }
        let (m, n) = (self.data(a).len() / k, bsh[1]);
        let out = matmul(self.data(a), self.data(b), m, k, n);
        let mut shape = ash;
        *shape.last_mut().unwrap() = n;
        self.push(Op::Matmul { a, b }, Tensor::new(shape, out)?, "matmul")
    }

    /// `a[..., k] @ b[n, k]^T -> [..., n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let k = *ash.last().unwrap();
        if bsh.len() != 2 || bsh[1] != k {
            return Err(NumericsError::ShapeMismatch { op: "matmul_nt", lhs: ash, rhs: bsh });
        }
        let (m, n) = (self.data(a).len() / k, bsh[0]);
        let bt = transpose(self.data(b), n, k);
        let out = matmul(self.data(a), &bt, m, k, n);
        let mut shape = ash;
        *shape.last_mut().unwrap() = n;
        self.push(Op::MatmulNt { a, b }, Tensor::new(shape, out)?, "matmul_nt")
    }

    /// Causal convolution over time: `y[t] = sum_{i<width} x[t-i] @ w[i] + bias`
    /// with zero padding on the left. `x: [T,B,Din]`, `w: [width,Din,Dout]`,
    /// `bias: [Dout]`.
    pub fn causal_conv(&mut self, x: Var, w: Var, bias: Var) -> Result<Var, NumericsError> {
        self.causal_conv_with_context(x, w, bias, None)
    }

    /// Causal convolution over time with an optional carried context: the
    /// last `width-1` input frames of the preceding window. Without a
    /// context the window is zero-padded on the left. The context is a
    /// constant (its gradient is deliberately dropped, like the recurrent
    /// state between windows).
    pub fn causal_conv_with_context(
        &mut self,
        x: Var,
        w: Var,
        bias: Var,
        ctx: Option<&Tensor>,
    ) -> Result<Var, NumericsError> {
        let xsh = self.shape(x).to_vec();
        let wsh = self.shape(w).to_vec();
        if xsh.len() != 3 || wsh.len() != 3 || wsh[1] != xsh[2] {
            return Err(NumericsError::ShapeMismatch { op: "causal_conv", lhs: xsh, rhs: wsh });
        }
        let (t, b, din) = (xsh[0], xsh[1], xsh[2]);
        let (width, dout) = (wsh[0], wsh[2]);
        if self.shape(bias) != [dout] {
            return Err(NumericsError::ShapeMismatch {
                op: "causal_conv",
                lhs: self.shape(bias).to_vec(),
                rhs: vec![dout],
            });
        }
        if let Some(c) = ctx {
            if c.shape() != [width - 1, b, din] {
                return Err(NumericsError::ShapeMismatch {
                    op: "causal_conv",
                    lhs: c.shape().to_vec(),
                    rhs: vec![width - 1, b, din],
                });
            }
        }
        let mut out = vec![0.0; t * b * dout];
        for i in 0..width {
            let wi = i * din * dout;
            if i < t {
                let rows = (t - i) * b;
                matmul_acc(
                    &self.data(x)[..rows * din],
                    &self.data(w)[wi..wi + din * dout],
                    rows,
                    din,
                    dout,
                    &mut out[i * b * dout..],
                );
            }
            if let Some(c) = ctx {
                // Output positions tt < i read frame tt-i, which lives at
                // context row width-1 + tt-i.
                for tt in 0..i.min(t) {
                    let frame = width - 1 + tt - i;
                    matmul_acc(
                        &c.data()[frame * b * din..(frame + 1) * b * din],
                        &self.data(w)[wi..wi + din * dout],
                        b,
                        din,
                        dout,
                        &mut out[tt * b * dout..(tt + 1) * b * dout],
                    );
                }
            }
        }
        // Round the accumulation, then add the bias, so width=1 stays
        // bit-identical to matmul followed by add_bias.
        self.precision.round_slice(&mut out);
        let bias_data = self.data(bias);
        for r in 0..t * b {
            for j in 0..dout {
                out[r * dout + j] += bias_data[j];
            }
        }
        self.push(
            Op::CausalConv { x, w, bias, ctx: ctx.cloned() },
            Tensor::new(vec![t, b, dout], out)?,
            "causal_conv",
        )
    }

    // ── Elementwise ──────────────────────────────────────────────────

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var, NumericsError> {
        let out: Vec<f64> = self
            .data(x)
            .iter()
            .map(|&v| match kind {
                Activation::Sigmoid => sigmoid(v),
                Activation::Tanh => v.tanh(),
                Activation::Relu => v.max(0.0),
            })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::Act { x, kind }, Tensor::new(shape, out)?, "activation")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.activation(x, Activation::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.activation(x, Activation::Relu)
    }

    fn zip_op(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericsError::ShapeMismatch {
                op: name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> =
            self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        let op = match name {
            "add" => Op::Add { a, b },
            "sub" => Op::Sub { a, b },
            _ => Op::Mul { a, b },
        };
        self.push(op, Tensor::new(shape, out)?, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip_op(a, b, "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip_op(a, b, "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip_op(a, b, "mul", |x, y| x * y)
    }

    /// Broadcast-add a `[d]` bias over the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, NumericsError> {
        let d = *self.shape(x).last().unwrap();
        if self.shape(bias) != [d] {
            return Err(NumericsError::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let bias_data = self.data(bias);
        let out: Vec<f64> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias_data[i % d])
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::AddBias { x, bias }, Tensor::new(shape, out)?, "add_bias")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, NumericsError> {
        let out: Vec<f64> = self.data(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::Scale { x, c }, Tensor::new(shape, out)?, "scale")
    }

    // ── Reductions ───────────────────────────────────────────────────

    pub fn sum_all(&mut self, x: Var) -> Result<Var, NumericsError> {
        let mut s = 0.0;
        for &v in self.data(x) {
            s += v;
        }
        self.push(Op::SumAll { x }, Tensor::scalar(s), "sum_all")
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var, NumericsError> {
        let n = self.data(x).len() as f64;
        let mut s = 0.0;
        for &v in self.data(x) {
            s += v;
        }
        self.push(Op::MeanAll { x }, Tensor::scalar(s / n), "mean_all")
    }

    // ── Recurrent pooling ────────────────────────────────────────────

    /// fo-pooling: `c_t = f_t*c_{t-1} + (1-f_t)*z_t`, `h_t = o_t*c_t`.
    /// Returns the hidden sequence `[T,B,H]` and the final cell state as a
    /// detached tensor for carrying across windows.
    pub fn fo_pool(&mut self, z: Var, f: Var, o: Var, c0: Var) -> Result<(Var, Tensor), NumericsError> {
        let zsh = self.shape(z).to_vec();
        if zsh.len() != 3 {
            return Err(NumericsError::BadShape { what: format!("fo_pool wants [T,B,H], got {zsh:?}") });
        }
        for (other, name) in [(f, "f"), (o, "o")] {
            if self.shape(other) != zsh.as_slice() {
                return Err(NumericsError::ShapeMismatch {
                    op: "fo_pool",
                    lhs: zsh,
                    rhs: self.shape(other).to_vec(),
                });
            }
            let _ = name;
        }
        let (t, b, h) = (zsh[0], zsh[1], zsh[2]);
        if self.shape(c0) != [b, h] {
            return Err(NumericsError::ShapeMismatch {
                op: "fo_pool",
                lhs: self.shape(c0).to_vec(),
                rhs: vec![b, h],
            });
        }
        let bh = b * h;
        let rnd = self.precision;
        let mut cells = vec![0.0; (t + 1) * bh];
        cells[..bh].copy_from_slice(self.data(c0));
        let mut hs = vec![0.0; t * bh];
        {
            let (zd, fd, od) = (self.data(z), self.data(f), self.data(o));
            for step in 0..t {
                for i in 0..bh {
                    let idx = step * bh + i;
                    let c_prev = cells[step * bh + i];
                    let carry = rnd.round(fd[idx] * c_prev);
                    let fresh = rnd.round(rnd.round(1.0 - fd[idx]) * zd[idx]);
                    let c = rnd.round(carry + fresh);
                    cells[(step + 1) * bh + i] = c;
                    hs[idx] = rnd.round(od[idx] * c);
                }
            }
        }
        let c_final = Tensor::new(vec![b, h], cells[t * bh..].to_vec())?;
        let hv = self.push(
            Op::FoPool { z, f, o, c0, cells },
            Tensor::new(vec![t, b, h], hs)?,
            "fo_pool",
        )?;
        Ok((hv, c_final))
    }

    /// Full LSTM recurrence over a window. Gate layout is `[i | f | g | o]`.
    /// Returns hidden states `[T,B,H]` plus detached `(h_T, c_T)`.
    pub fn lstm_seq(
        &mut self,
        x: Var,
        w: Var,
        u: Var,
        bias: Var,
        h0: Var,
        c0: Var,
    ) -> Result<(Var, Tensor, Tensor), NumericsError> {
        let xsh = self.shape(x).to_vec();
        if xsh.len() != 3 {
            return Err(NumericsError::BadShape { what: format!("lstm_seq wants [T,B,Din], got {xsh:?}") });
        }
        let (t, b, din) = (xsh[0], xsh[1], xsh[2]);
        let wsh = self.shape(w).to_vec();
        if wsh.len() != 2 || wsh[0] != din || wsh[1] % 4 != 0 {
            return Err(NumericsError::ShapeMismatch { op: "lstm_seq", lhs: xsh, rhs: wsh });
        }
        let h = wsh[1] / 4;
        if self.shape(u) != [h, 4 * h]
            || self.shape(bias) != [4 * h]
            || self.shape(h0) != [b, h]
            || self.shape(c0) != [b, h]
        {
            return Err(NumericsError::ShapeMismatch {
                op: "lstm_seq",
                lhs: self.shape(u).to_vec(),
                rhs: vec![h, 4 * h],
            });
        }
        let rnd = self.precision;
        let bh = b * h;
        // Input contribution for every step at once.
        let mut pre_all = matmul(self.data(x), self.data(w), t * b, din, 4 * h);
        let bias_data = self.data(bias).to_vec();
        let u_data = self.data(u).to_vec();

        let mut gates = vec![0.0; t * b * 4 * h];
        let mut cells = vec![0.0; (t + 1) * bh];
        cells[..bh].copy_from_slice(self.data(c0));
        let mut tanh_c = vec![0.0; t * bh];
        let mut hs = vec![0.0; t * bh];
        let mut h_prev = self.data(h0).to_vec();

        for step in 0..t {
            let pre = &mut pre_all[step * b * 4 * h..(step + 1) * b * 4 * h];
            matmul_acc(&h_prev, &u_data, b, h, 4 * h, pre);
            for bi in 0..b {
                for g in 0..4 * h {
                    let v = rnd.round(pre[bi * 4 * h + g] + bias_data[g]);
                    let gate = g / h;
                    gates[step * b * 4 * h + bi * 4 * h + g] = rnd.round(if gate == 2 {
                        v.tanh()
                    } else {
                        sigmoid(v)
                    });
                }
            }
            for bi in 0..b {
                for j in 0..h {
                    let base = step * b * 4 * h + bi * 4 * h;
                    let i_g = gates[base + j];
                    let f_g = gates[base + h + j];
                    let g_g = gates[base + 2 * h + j];
                    let o_g = gates[base + 3 * h + j];
                    let c_prev = cells[step * bh + bi * h + j];
                    let c = rnd.round(rnd.round(f_g * c_prev) + rnd.round(i_g * g_g));
                    cells[(step + 1) * bh + bi * h + j] = c;
                    let tc = rnd.round(c.tanh());
                    tanh_c[step * bh + bi * h + j] = tc;
                    let hv = rnd.round(o_g * tc);
                    hs[step * bh + bi * h + j] = hv;
                    h_prev[bi * h + j] = hv;
                }
            }
        }
        let h_final = Tensor::new(vec![b, h], hs[(t - 1) * bh..].to_vec())?;
        let c_final = Tensor::new(vec![b, h], cells[t * bh..].to_vec())?;
        let saved = LstmSaved { gates, cells, tanh_c };
        let hv = self.push(
            Op::LstmSeq { x, w, u, bias, h0, c0, saved },
            Tensor::new(vec![t, b, h], hs)?,
            "lstm_seq",
        )?;
        Ok((hv, h_final, c_final))
    }

    // ── Embedding and heads ──────────────────────────────────────────

    /// Look up `ids` (length `T*B`, row-major over `[T,B]`) in `table[V,E]`,
    /// producing `[T,B,E]`. Backward scatter-adds into the table.
    pub fn embed(&mut self, table: Var, ids: &[usize], t: usize, b: usize) -> Result<Var, NumericsError> {
        let tsh = self.shape(table).to_vec();
        if tsh.len() != 2 {
            return Err(NumericsError::BadShape { what: format!("embed table must be [V,E], got {tsh:?}") });
        }
        if ids.len() != t * b {
            return Err(NumericsError::BadShape {
                what: format!("embed ids length {} != {t}x{b}", ids.len()),
            });
        }
        let (v, e) = (tsh[0], tsh[1]);
        for &id in ids {
            if id >= v {
                return Err(NumericsError::IdOutOfRange { id, vocab: v });
            }
        }
        let table_data = self.data(table);
        let mut out = vec![0.0; ids.len() * e];
        for (row, &id) in ids.iter().enumerate() {
            out[row * e..(row + 1) * e].copy_from_slice(&table_data[id * e..(id + 1) * e]);
        }
        self.push(Op::Embed { table, ids: ids.to_vec() }, Tensor::new(vec![t, b, e], out)?, "embed")
    }

    /// Label-smoothed cross entropy, averaged over rows. `logits: [..., K]`,
    /// one target per row. `eps = 0` is plain cross entropy.
    pub fn smoothed_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        eps: f64,
    ) -> Result<Var, NumericsError> {
        let lsh = self.shape(logits).to_vec();
        let kk = *lsh.last().unwrap();
        let rows = self.data(logits).len() / kk;
        if !(0.0..1.0).contains(&eps) {
            return Err(NumericsError::InvalidConfig {
                what: format!("label smoothing eps {eps} outside [0,1)"),
            });
        }
        if targets.len() != rows {
            return Err(NumericsError::BadShape {
                what: format!("{} targets for {rows} rows", targets.len()),
            });
        }
        for &tgt in targets {
            if tgt >= kk {
                return Err(NumericsError::IdOutOfRange { id: tgt, vocab: kk });
            }
        }
        let data = self.data(logits);
        let mut probs = vec![0.0; rows * kk];
        let mut total = 0.0;
        for r in 0..rows {
            let row = &data[r * kk..(r + 1) * kk];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for &xv in row {
                z += (xv - m).exp();
            }
            let logz = m + z.ln();
            let mut sum_logits = 0.0;
            for (c, &xv) in row.iter().enumerate() {
                probs[r * kk + c] = (xv - logz).exp();
                sum_logits += xv;
            }
            total += logz - (eps / kk as f64) * sum_logits - (1.0 - eps) * row[targets[r]];
        }
        let loss = total / rows as f64;
        self.push(
            Op::SmoothedCe { logits, targets: targets.to_vec(), eps, probs },
            Tensor::scalar(loss),
            "smoothed_cross_entropy",
        )
    }

    /// Concat pooling over valid steps: `[h_last ; mean ; max]` per example.
    /// `h: [T,B,H]`, `lengths[b] in 1..=T`; output `[B, 3H]`.
    pub fn concat_pool(&mut self, h: Var, lengths: &[usize]) -> Result<Var, NumericsError> {
        let hsh = self.shape(h).to_vec();
        if hsh.len() != 3 {
            return Err(NumericsError::BadShape { what: format!("concat_pool wants [T,B,H], got {hsh:?}") });
        }
        let (t, b, hd) = (hsh[0], hsh[1], hsh[2]);
        if lengths.len() != b {
            return Err(NumericsError::BadShape {
                what: format!("{} lengths for batch of {b}", lengths.len()),
            });
        }
        for (bi, &len) in lengths.iter().enumerate() {
            if len == 0 || len > t {
                return Err(NumericsError::InvalidConfig {
                    what: format!("length {len} for example {bi} outside 1..={t}"),
                });
            }
        }
        let data = self.data(h);
        let rnd = self.precision;
        let mut out = vec![0.0; b * 3 * hd];
        let mut argmax = vec![0usize; b * hd];
        for bi in 0..b {
            let len = lengths[bi];
            for j in 0..hd {
                let at = |step: usize| data[step * b * hd + bi * hd + j];
                out[bi * 3 * hd + j] = at(len - 1);
                let mut s = 0.0;
                let mut best = 0usize;
                for step in 0..len {
                    s += at(step);
                    if at(step) > at(best) {
                        best = step;
                    }
                }
                out[bi * 3 * hd + hd + j] = rnd.round(s) / len as f64;
                out[bi * 3 * hd + 2 * hd + j] = at(best);
                argmax[bi * hd + j] = best;
            }
        }
        self.push(
            Op::ConcatPool { h, lengths: lengths.to_vec(), argmax },
            Tensor::new(vec![b, 3 * hd], out)?,
            "concat_pool",
        )
    }

    /// Batch norm over rows of `x[B,D]`. In training mode the batch statistics
    /// normalize and are returned for the caller's running-stat update; in
    /// eval mode the supplied frozen statistics are used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        frozen: Option<(&Tensor, &Tensor)>,
        eps: f64,
    ) -> Result<(Var, Tensor, Tensor), NumericsError> {
        let xsh = self.shape(x).to_vec();
        if xsh.len() != 2 {
            return Err(NumericsError::BadShape { what: format!("batch_norm wants [B,D], got {xsh:?}") });
        }
        let (b, d) = (xsh[0], xsh[1]);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(NumericsError::ShapeMismatch {
                op: "batch_norm",
                lhs: self.shape(gamma).to_vec(),
                rhs: vec![d],
            });
        }
        let data = self.data(x);
        let (mean, var) = match frozen {
            Some((m, v)) => (m.data().to_vec(), v.data().to_vec()),
            None => {
                let mut mean = vec![0.0; d];
                for row in 0..b {
                    for j in 0..d {
                        mean[j] += data[row * d + j];
                    }
                }
                for mj in mean.iter_mut() {
                    *mj /= b as f64;
                }
                let mut var = vec![0.0; d];
                for row in 0..b {
                    for j in 0..d {
                        let dv = data[row * d + j] - mean[j];
                        var[j] += dv * dv;
                    }
                }
                for vj in var.iter_mut() {
                    *vj /= b as f64;
                }
                (mean, var)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; b * d];
        let mut out = vec![0.0; b * d];
        let (gd, bd) = (self.data(gamma), self.data(beta));
        for row in 0..b {
            for j in 0..d {
                let xh = (data[row * d + j] - mean[j]) * inv_std[j];
                xhat[row * d + j] = xh;
                out[row * d + j] = gd[j] * xh + bd[j];
            }
        }
        let mean_t = Tensor::new(vec![d], mean)?;
        let var_t = Tensor::new(vec![d], var)?;
        let v = self.push(
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train: frozen.is_none() },
            Tensor::new(vec![b, d], out)?,
            "batch_norm",
        )?;
        Ok((v, mean_t, var_t))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Exactly one backward pass may run
    /// per tape; gradients accumulate additively across fan-out and every
    /// parameter leaf receives a gradient (zeros when unreachable).
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, NumericsError> {
        if self.backward_done {
            return Err(NumericsError::BackwardTwice);
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(NumericsError::NotScalar {
                op: "backward",
                shape: self.nodes[loss.0].value.shape().to_vec(),
            });
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let dout = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_op(i, &dout, &mut grads);
        }

        let mut result: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let slot = match grads[i].take() {
                Some(mut g) => {
                    self.precision.round_slice(&mut g);
                    Some(Tensor::new(node.value.shape().to_vec(), g)?)
                }
                None if node.param => Some(Tensor::zeros(node.value.shape().to_vec())),
                None => None,
            };
            if node.param {
                if let Some(g) = &slot {
                    if !g.all_finite() {
                        return Err(NumericsError::NonFinite { op: "backward" });
                    }
                }
            }
            result.push(slot);
        }
        Ok(Gradients { grads: result })
    }

    fn backward_op(&self, i: usize, dout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let numel = |v: Var| self.nodes[v.0].value.numel();
        macro_rules! acc {
            ($var:expr, $f:expr) => {{
                let buf = grads[$var.0].get_or_insert_with(|| vec![0.0; numel($var)]);
                let f: &mut dyn FnMut(&mut [f64]) = &mut $f;
                f(buf.as_mut_slice());
            }};
        }

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (ash, bsh) = (self.shape(*a), self.shape(*b).to_vec());
                let k = *ash.last().unwrap();
                let (m, n) = (numel(*a) / k, bsh[1]);
                let bt = transpose(self.data(*b), k, n);
                acc!(*a, |buf| matmul_acc(dout, &bt, m, n, k, buf));
                acc!(*b, |buf| matmul_tn_acc(self.data(*a), dout, m, k, n, buf));
            }
            Op::MatmulNt { a, b } => {
                let ash = self.shape(*a);
                let k = *ash.last().unwrap();
                let m = numel(*a) / k;
                let n = self.shape(*b)[0];
                acc!(*a, |buf| matmul_acc(dout, self.data(*b), m, n, k, buf));
                acc!(*b, |buf| matmul_tn_acc(dout, self.data(*a), m, n, k, buf));
            }
            Op::CausalConv { x, w, bias, ctx } => {
                let xsh = self.shape(*x);
                let (t, b, din) = (xsh[0], xsh[1], xsh[2]);
                let wsh = self.shape(*w);
                let (width, dout_d) = (wsh[0], wsh[2]);
                acc!(*x, |buf: &mut [f64]| {
                    for i in 0..width.min(t) {
                        let rows = (t - i) * b;
                        let wt = transpose(
                            &self.data(*w)[i * din * dout_d..(i + 1) * din * dout_d],
                            din,
                            dout_d,
                        );
                        matmul_acc(&dout[i * b * dout_d..], &wt, rows, dout_d, din, &mut buf[..rows * din]);
                    }
                });
                acc!(*w, |buf: &mut [f64]| {
                    for i in 0..width.min(t) {
                        let rows = (t - i) * b;
                        matmul_tn_acc(
                            &self.data(*x)[..rows * din],
                            &dout[i * b * dout_d..],
                            rows,
                            din,
                            dout_d,
                            &mut buf[i * din * dout_d..(i + 1) * din * dout_d],
                        );
                    }
                    if let Some(c) = ctx {
                        // Context frames feed output positions tt < i; the
                        // context itself is constant and takes no gradient.
                        for i in 1..width {
                            for tt in 0..i.min(t) {
                                let frame = width - 1 + tt - i;
                                matmul_tn_acc(
                                    &c.data()[frame * b * din..(frame + 1) * b * din],
                                    &dout[tt * b * dout_d..],
                                    b,
                                    din,
                                    dout_d,
                                    &mut buf[i * din * dout_d..(i + 1) * din * dout_d],
                                );
                            }
                        }
                    }
                });
                acc!(*bias, |buf: &mut [f64]| {
                    for r in 0..t * b {
                        for j in 0..dout_d {
                            buf[j] += dout[r * dout_d + j];
                        }
                    }
                });
            }
            Op::Act { x, kind } => {
                let y = self.nodes[i].value.data();
                let xin = self.data(*x);
                acc!(*x, |buf: &mut [f64]| {
                    for j in 0..buf.len() {
                        buf[j] += dout[j]
                            * match kind {
                                Activation::Sigmoid => y[j] * (1.0 - y[j]),
                                Activation::Tanh => 1.0 - y[j] * y[j],
                                Activation::Relu => {
                                    if xin[j] > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                            };
                    }
                });
            }
            Op::Add { a, b } => {
                acc!(*a, |buf: &mut [f64]| for j in 0..buf.len() {
                    buf[j] += dout[j];
                });
                acc!(*b, |buf: &mut [f64]| for j in 0..buf.len() {
                    buf[j] += dout[j];
                });
            }
            Op::Sub { a, b } => {
                acc!(*a, |buf: &mut [f64]| for j in 0..buf.len() {
                    buf[j] += dout[j];
                });
                acc!(*b, |buf: &mut [f64]| for j in 0..buf.len() {
                    buf[j] -= dout[j];
                });
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc!(*a, |buf: &mut [f64]| for j in 0..buf.len() {
                    buf[j] += dout[j] * bd[j];
                });
                acc!(*b, |buf: &mut [f64]| for j in 0..buf.len() {
                    buf[j] += dout[j] * ad[j];
                });
            }
            Op::AddBias { x, bias } => {
                let d = numel(*bias);
                acc!(*x, |buf: &mut [f64]| for j in 0..buf.len() {
                    buf[j] += dout[j];
                });
                acc!(*bias, |buf: &mut [f64]| for (j, &g) in dout.iter().enumerate() {
                    buf[j % d] += g;
                });
            }
            Op::Scale { x, c } => {
                acc!(*x, |buf: &mut [f64]| for j in 0..buf.len() {
                    buf[j] += dout[j] * c;
                });
            }
            Op::SumAll { x } => {
                let g = dout[0];
                acc!(*x, |buf: &mut [f64]| for v in buf.iter_mut() {
                    *v += g;
                });
            }
            Op::MeanAll { x } => {
                let g = dout[0] / numel(*x) as f64;
                acc!(*x, |buf: &mut [f64]| for v in buf.iter_mut() {
                    *v += g;
                });
            }
            Op::FoPool { z, f, o, c0, cells } => {
                let zsh = self.shape(*z);
                let (t, b, h) = (zsh[0], zsh[1], zsh[2]);
                let bh = b * h;
                let (zd, fd, od) = (self.data(*z), self.data(*f), self.data(*o));
                let mut dz = vec![0.0; t * bh];
                let mut df = vec![0.0; t * bh];
                let mut dov = vec![0.0; t * bh];
                let mut dc = vec![0.0; bh];
                for step in (0..t).rev() {
                    for j in 0..bh {
                        let idx = step * bh + j;
                        let c_t = cells[(step + 1) * bh + j];
                        let c_prev = cells[step * bh + j];
                        dov[idx] = dout[idx] * c_t;
                        let dct = dc[j] + dout[idx] * od[idx];
                        df[idx] = dct * (c_prev - zd[idx]);
                        dz[idx] = dct * (1.0 - fd[idx]);
                        dc[j] = dct * fd[idx];
                    }
                }
                acc!(*z, |buf: &mut [f64]| for j in 0..buf.len() {
                    buf[j] += dz[j];
                });
                acc!(*f, |buf: &mut [f64]| for j in 0..buf.len() {
                    buf[j] += df[j];
                });
                acc!(*o, |buf: &mut [f64]| for j in 0..buf.len() {
                    buf[j] += dov[j];
                });
                acc!(*c0, |buf: &mut [f64]| for j in 0..buf.len() {
                    buf[j] += dc[j];
                });
            }
            Op::LstmSeq { x, w, u, bias, h0, c0, saved } => {
                self.lstm_backward(i, *x, *w, *u, *bias, *h0, *c0, saved, dout, grads);
            }
            Op::Embed { table, ids } => {
                let e = self.shape(*table)[1];
                acc!(*table, |buf: &mut [f64]| {
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..e {
                            buf[id * e + j] += dout[row * e + j];
                        }
                    }
                });
            }
            Op::SmoothedCe { logits, targets, eps, probs } => {
                let kk = *self.shape(*logits).last().unwrap();
                let rows = numel(*logits) / kk;
                let g = dout[0] / rows as f64;
                let uniform = eps / kk as f64;
                acc!(*logits, |buf: &mut [f64]| {
                    for r in 0..rows {
                        for c in 0..kk {
                            let q = uniform + if c == targets[r] { 1.0 - eps } else { 0.0 };
                            buf[r * kk + c] += g * (probs[r * kk + c] - q);
                        }
                    }
                });
            }
            Op::ConcatPool { h, lengths, argmax } => {
                let hsh = self.shape(*h);
                let (_t, b, hd) = (hsh[0], hsh[1], hsh[2]);
                acc!(*h, |buf: &mut [f64]| {
                    for bi in 0..b {
                        let len = lengths[bi];
                        for j in 0..hd {
                            let dlast = dout[bi * 3 * hd + j];
                            let dmean = dout[bi * 3 * hd + hd + j] / len as f64;
                            let dmax = dout[bi * 3 * hd + 2 * hd + j];
                            buf[(len - 1) * b * hd + bi * hd + j] += dlast;
                            for step in 0..len {
                                buf[step * b * hd + bi * hd + j] += dmean;
                            }
                            buf[argmax[bi * hd + j] * b * hd + bi * hd + j] += dmax;
                        }
                    }
                });
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let (b, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let gd = self.data(*gamma);
                acc!(*beta, |buf: &mut [f64]| {
                    for row in 0..b {
                        for j in 0..d {
                            buf[j] += dout[row * d + j];
                        }
                    }
                });
                acc!(*gamma, |buf: &mut [f64]| {
                    for row in 0..b {
                        for j in 0..d {
                            buf[j] += dout[row * d + j] * xhat[row * d + j];
                        }
                    }
                });
                if *train {
                    // Gradients flow through the batch statistics.
                    let mut sum_dy = vec![0.0; d];
                    let mut sum_dy_xhat = vec![0.0; d];
                    for row in 0..b {
                        for j in 0..d {
                            let dxh = dout[row * d + j] * gd[j];
                            sum_dy[j] += dxh;
                            sum_dy_xhat[j] += dxh * xhat[row * d + j];
                        }
                    }
                    acc!(*x, |buf: &mut [f64]| {
                        for row in 0..b {
                            for j in 0..d {
                                let dxh = dout[row * d + j] * gd[j];
                                buf[row * d + j] += inv_std[j] / b as f64
                                    * (b as f64 * dxh - sum_dy[j] - xhat[row * d + j] * sum_dy_xhat[j]);
                            }
                        }
                    });
                } else {
                    acc!(*x, |buf: &mut [f64]| {
                        for row in 0..b {
                            for j in 0..d {
                                buf[row * d + j] += dout[row * d + j] * gd[j] * inv_std[j];
                            }
                        }
                    });
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn lstm_backward(
        &self,
        node: usize,
        x: Var,
        w: Var,
        u: Var,
        bias: Var,
        h0: Var,
        c0: Var,
        saved: &LstmSaved,
        dout: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let xsh = self.shape(x);
        let (t, b, din) = (xsh[0], xsh[1], xsh[2]);
        let h = self.shape(u)[0];
        let bh = b * h;
        let hs = self.nodes[node].value.data();
        let u_data = self.data(u);
        let ut = transpose(u_data, h, 4 * h);

        let mut dgates = vec![0.0; t * b * 4 * h];
        let mut du = vec![0.0; h * 4 * h];
        let mut dbias = vec![0.0; 4 * h];
        let mut dh_carry = vec![0.0; bh];
        let mut dc = vec![0.0; bh];

        for step in (0..t).rev() {
            let gbase = step * b * 4 * h;
            for bi in 0..b {
                for j in 0..h {
                    let dh = dout[step * bh + bi * h + j] + dh_carry[bi * h + j];
                    let i_g = saved.gates[gbase + bi * 4 * h + j];
                    let f_g = saved.gates[gbase + bi * 4 * h + h + j];
                    let g_g = saved.gates[gbase + bi * 4 * h + 2 * h + j];
                    let o_g = saved.gates[gbase + bi * 4 * h + 3 * h + j];
                    let tc = saved.tanh_c[step * bh + bi * h + j];
                    let c_prev = saved.cells[step * bh + bi * h + j];

                    let d_o = dh * tc;
                    let dct = dc[bi * h + j] + dh * o_g * (1.0 - tc * tc);
                    let d_i = dct * g_g;
                    let d_g = dct * i_g;
                    let d_f = dct * c_prev;
                    dc[bi * h + j] = dct * f_g;

                    dgates[gbase + bi * 4 * h + j] = d_i * i_g * (1.0 - i_g);
                    dgates[gbase + bi * 4 * h + h + j] = d_f * f_g * (1.0 - f_g);
                    dgates[gbase + bi * 4 * h + 2 * h + j] = d_g * (1.0 - g_g * g_g);
                    dgates[gbase + bi * 4 * h + 3 * h + j] = d_o * o_g * (1.0 - o_g);
                }
            }
            let dpre = &dgates[gbase..gbase + b * 4 * h];
            for v in dbias.iter_mut().zip(
                (0..4 * h).map(|g| (0..b).map(|bi| dpre[bi * 4 * h + g]).sum::<f64>()),
            ) {
                *v.0 += v.1;
            }
            let h_prev: &[f64] = if step == 0 {
                self.data(h0)
            } else {
                &hs[(step - 1) * bh..step * bh]
            };
            matmul_tn_acc(h_prev, dpre, b, h, 4 * h, &mut du);
            dh_carry.iter_mut().for_each(|v| *v = 0.0);
            matmul_acc(dpre, &ut, b, 4 * h, h, &mut dh_carry);
        }

        let numel = |v: Var| self.nodes[v.0].value.numel();
        macro_rules! acc {
            ($var:expr, $f:expr) => {{
                let buf = grads[$var.0].get_or_insert_with(|| vec![0.0; numel($var)]);
                let f: &mut dyn FnMut(&mut [f64]) = &mut $f;
                f(buf.as_mut_slice());
            }};
        }
        acc!(x, |buf: &mut [f64]| matmul_acc(
            &dgates,
            &transpose(self.data(w), din, 4 * h),
            t * b,
            4 * h,
            din,
            buf
        ));
        acc!(w, |buf: &mut [f64]| matmul_tn_acc(self.data(x), &dgates, t * b, din, 4 * h, buf));
        acc!(u, |buf: &mut [f64]| for j in 0..buf.len() {
            buf[j] += du[j];
        });
        acc!(bias, |buf: &mut [f64]| for j in 0..buf.len() {
            buf[j] += dbias[j];
        });
        acc!(h0, |buf: &mut [f64]| for j in 0..buf.len() {
            buf[j] += dh_carry[j];
        });
        acc!(c0, |buf: &mut [f64]| for j in 0..buf.len() {
            buf[j] += dc[j];
        });
    }
}
