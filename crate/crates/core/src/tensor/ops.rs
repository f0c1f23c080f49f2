use super::graph::{Graph, Node, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// Recorded operation; the payload names the operand nodes and any state
/// the backward rule needs.
pub(crate) enum Op {
    Leaf,
    Param { store: u64, index: usize },
    /// `cols` holds the unrolled input, `[B, T, C_in * K]`.
    Conv1d { input: Var, kernel: Var, bias: Var, cols: Vec<f64> },
    MaxPool { input: Var, argmax: Vec<usize> },
    Upsample { input: Var },
    Dense { input: Var, weight: Var, bias: Var },
    Elu { input: Var },
    Sigmoid { input: Var },
    Exp { input: Var },
    Ln { input: Var, lo: f64, hi: f64 },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { input: Var, scale: f64 },
    Reshape { input: Var },
    CropTime { input: Var, len: usize },
    ConcatBatch { inputs: Vec<Var> },
    GatherBatch { input: Var, indices: Vec<usize> },
    SliceCols { input: Var, start: usize },
    SqDistRows(Var, Var),
    L1DistRows(Var, Var),
    KlRows { mean: Var, log_var: Var },
    SqL2(Var, Var),
    L1(Var, Var),
    Sum { input: Var },
    Mean { input: Var },
    WeightedSum { input: Var, weights: Vec<f64> },
}

/// `(batch, channels, time)` view of a rank-2 or rank-3 tensor.
fn bct(shape: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, t] => Ok((1, c, t)),
        [b, c, t] => Ok((b, c, t)),
        _ => Err(Error::Shape(format!(
            "{what} expects [C, T] or [B, C, T], got {shape:?}"
        ))),
    }
}

fn with_time(shape: &[usize], t: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    *s.last_mut().expect("rank checked") = t;
    s
}

/// Unrolls same-padded windows: entry `[b, t, ci * k + kk]` is input
/// `[b, ci, t + kk - k / 2]`, or zero outside the signal.
fn unroll(x: &[f64], b: usize, cin: usize, t: usize, k: usize) -> Vec<f64> {
    let pad = k / 2;
    let span = cin * k;
    let mut cols = vec![0.0; b * t * span];
    for bi in 0..b {
        for tt in 0..t {
            let dst = &mut cols[(bi * t + tt) * span..][..span];
            for ci in 0..cin {
                let src = &x[(bi * cin + ci) * t..][..t];
                for kk in 0..k {
                    if let Some(&v) = (tt + kk).checked_sub(pad).and_then(|j| src.get(j)) {
                        dst[ci * k + kk] = v;
                    }
                }
            }
        }
    }
    cols
}

/// Dot product with four independent accumulators.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let (ca, ra) = a.as_chunks::<4>();
    let (cb, rb) = b.as_chunks::<4>();
    for (x, y) in ca.iter().zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (d, &v) in y.iter_mut().zip(x) {
        *d += a * v;
    }
}

/// Leading axis as batch, everything else flattened.
fn rows(shape: &[usize]) -> (usize, usize) {
    match shape.split_first() {
        None => (1, 1),
        Some((&b, rest)) => (b, rest.iter().product()),
    }
}

fn same_shape(g: &Graph, a: Var, b: Var, what: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.requires_grad(v))
    }

    fn unary(
        &mut self,
        input: Var,
        name: &'static str,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(&[input]);
        self.push(value, op, rg, name)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        same_shape(self, a, b, name)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&u, &v)| f(u, v)).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(value, op, rg, name)
    }

    /// Same-padded 1D convolution. `kernel` is `[C_out, C_in, K]` with odd
    /// `K`; the time extent is preserved.
    pub fn conv1d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (b, cin, t) = bct(self.shape(input), "conv1d input")?;
        let (cout, kcin, k) = match *self.shape(kernel) {
            [o, i, k] => (o, i, k),
            ref s => return Err(Error::Shape(format!("conv1d kernel must be rank 3, got {s:?}"))),
        };
        if kcin != cin {
            return Err(Error::Shape(format!(
                "conv1d kernel expects {kcin} input channels, input has {cin}"
            )));
        }
        if k % 2 == 0 {
            return Err(Error::EvenKernel(k));
        }
        if self.shape(bias) != [cout] {
            return Err(Error::Shape(format!(
                "conv1d bias must be [{cout}], got {:?}",
                self.shape(bias)
            )));
        }
        if t == 0 {
            return Err(Error::Shape("conv1d input has zero time extent".into()));
        }
        let x = self.value(input).data();
        let w = self.value(kernel).data();
        let bs = self.value(bias).data();
        let cols = unroll(x, b, cin, t, k);
        let span = cin * k;
        let mut out = vec![0.0; b * cout * t];
        for bi in 0..b {
            let cb = &cols[bi * t * span..][..t * span];
            for co in 0..cout {
                let wr = &w[co * span..][..span];
                let row = &mut out[(bi * cout + co) * t..][..t];
                for (tt, o) in row.iter_mut().enumerate() {
                    *o = bs[co] + dot(wr, &cb[tt * span..][..span]);
                }
            }
        }
        let shape = with_time(&{
            let mut s = self.shape(input).to_vec();
            let n = s.len();
            s[n - 2] = cout;
            s
        }, t);
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[input, kernel, bias]);
        self.push(value, Op::Conv1d { input, kernel, bias, cols }, rg, "conv1d")
    }

    /// Window-2, stride-2 max pooling with ceil semantics: an odd tail
    /// element forms its own window.
    pub fn maxpool1d(&mut self, input: Var) -> Result<Var> {
        let (b, c, t) = bct(self.shape(input), "maxpool1d")?;
        if t == 0 {
            return Err(Error::Shape("maxpool1d input has zero time extent".into()));
        }
        let to = t.div_ceil(2);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(b * c * to);
        let mut argmax = Vec::with_capacity(b * c * to);
        for r in 0..b * c {
            let base = r * t;
            for j in 0..to {
                let i0 = base + 2 * j;
                let mut best = i0;
                if 2 * j + 1 < t && x[i0 + 1] > x[i0] {
                    best = i0 + 1;
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
        let value = Tensor::new(with_time(self.shape(input), to), out)?;
        let rg = self.rg(&[input]);
        self.push(value, Op::MaxPool { input, argmax }, rg, "maxpool1d")
    }

    /// Nearest-neighbour upsampling by two along time.
    pub fn upsample1d(&mut self, input: Var) -> Result<Var> {
        let (_, _, t) = bct(self.shape(input), "upsample1d")?;
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(x.len() * 2);
        for &v in x {
            out.push(v);
            out.push(v);
        }
        let value = Tensor::new(with_time(self.shape(input), 2 * t), out)?;
        let rg = self.rg(&[input]);
        self.push(value, Op::Upsample { input }, rg, "upsample1d")
    }

    /// Affine map `weight · input + bias` over `[N]` or `[B, N]` inputs.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (m, n) = match *self.shape(weight) {
            [m, n] => (m, n),
            ref s => return Err(Error::Shape(format!("dense weight must be rank 2, got {s:?}"))),
        };
        let (b, out_shape) = match *self.shape(input) {
            [k] if k == n => (1, vec![m]),
            [b, k] if k == n => (b, vec![b, m]),
            ref s => {
                return Err(Error::Shape(format!(
                    "dense weight [{m}, {n}] cannot take input {s:?}"
                )))
            }
        };
        if self.shape(bias) != [m] {
            return Err(Error::Shape(format!(
                "dense bias must be [{m}], got {:?}",
                self.shape(bias)
            )));
        }
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let bs = self.value(bias).data();
        let mut out = Vec::with_capacity(b * m);
        for bi in 0..b {
            let xr = &x[bi * n..][..n];
            for mi in 0..m {
                let wr = &w[mi * n..][..n];
                out.push(bs[mi] + dot(wr, xr));
            }
        }
        let value = Tensor::new(out_shape, out)?;
        let rg = self.rg(&[input, weight, bias]);
        self.push(value, Op::Dense { input, weight, bias }, rg, "dense")
    }

    /// ELU with alpha = 1.
    pub fn elu(&mut self, input: Var) -> Result<Var> {
        self.unary(input, "elu", |x| if x > 0.0 { x } else { x.exp_m1() }, Op::Elu { input })
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        self.unary(input, "sigmoid", sigmoid, Op::Sigmoid { input })
    }

    pub fn exp(&mut self, input: Var) -> Result<Var> {
        self.unary(input, "exp", f64::exp, Op::Exp { input })
    }

    /// Natural log of the input clamped to `[lo, hi]`; zero gradient where
    /// the clamp is active.
    pub fn ln_clamped(&mut self, input: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(input, "ln", |x| x.clamp(lo, hi).ln(), Op::Ln { input, lo, hi })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `scale · input + shift`.
    pub fn affine(&mut self, input: Var, scale: f64, shift: f64) -> Result<Var> {
        self.unary(input, "affine", |x| scale * x + shift, Op::Affine { input, scale })
    }

    pub fn scale(&mut self, input: Var, scale: f64) -> Result<Var> {
        self.affine(input, scale, 0.0)
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[input]);
        self.push(value, Op::Reshape { input }, rg, "reshape")
    }

    /// Keeps the first `len` time steps of a `[B, C, T]` tensor.
    pub fn crop_time(&mut self, input: Var, len: usize) -> Result<Var> {
        let (b, c, t) = bct(self.shape(input), "crop_time")?;
        if len > t {
            return Err(Error::Shape(format!("cannot crop {t} steps to {len}")));
        }
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(b * c * len);
        for r in 0..b * c {
            out.extend_from_slice(&x[r * t..r * t + len]);
        }
        let value = Tensor::new(with_time(self.shape(input), len), out)?;
        let rg = self.rg(&[input]);
        self.push(value, Op::CropTime { input, len }, rg, "crop_time")
    }

    /// Concatenates along the leading (batch) axis.
    pub fn concat_batch(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs.first().ok_or(Error::Empty("concat_batch inputs"))?;
        let tail = self.shape(first).get(1..).unwrap_or(&[]).to_vec();
        let mut total = 0;
        let mut data = Vec::new();
        for &v in inputs {
            let s = self.shape(v);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::Shape(format!(
                    "concat_batch: {:?} vs {s:?}",
                    self.shape(first)
                )));
            }
            total += s[0];
            data.extend_from_slice(self.value(v).data());
        }
        let mut shape = vec![total];
        shape.extend(tail);
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(inputs);
        self.push(
            value,
            Op::ConcatBatch {
                inputs: inputs.to_vec(),
            },
            rg,
            "concat_batch",
        )
    }

    /// Selects rows of the leading axis; indices may repeat.
    pub fn gather_batch(&mut self, input: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(input).to_vec();
        let (b, per) = rows(&s);
        if s.is_empty() {
            return Err(Error::Shape("gather_batch on a scalar".into()));
        }
        if let Some(&i) = indices.iter().find(|&&i| i >= b) {
            return Err(Error::Shape(format!("gather index {i} out of {b} rows")));
        }
        let x = self.value(input).data();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&x[i * per..][..per]);
        }
        let mut shape = s;
        shape[0] = indices.len();
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(&[input]);
        self.push(
            value,
            Op::GatherBatch {
                input,
                indices: indices.to_vec(),
            },
            rg,
            "gather_batch",
        )
    }

    /// Columns `start..start+len` of a `[B, F]` tensor.
    pub fn slice_cols(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let (b, f) = match *self.shape(input) {
            [b, f] => (b, f),
            ref s => return Err(Error::Shape(format!("slice_cols expects [B, F], got {s:?}"))),
        };
        if start + len > f {
            return Err(Error::Shape(format!("columns {start}..{} out of {f}", start + len)));
        }
        let x = self.value(input).data();
        let mut data = Vec::with_capacity(b * len);
        for r in 0..b {
            data.extend_from_slice(&x[r * f + start..][..len]);
        }
        let value = Tensor::new(vec![b, len], data)?;
        let rg = self.rg(&[input]);
        self.push(value, Op::SliceCols { input, start }, rg, "slice_cols")
    }

    fn row_reduce(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        same_shape(self, a, b, name)?;
        let (n, per) = rows(self.shape(a));
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let data = (0..n)
            .map(|r| {
                let s = r * per;
                (s..s + per).map(|i| f(x[i], y[i])).sum()
            })
            .collect();
        let value = Tensor::new(vec![n], data)?;
        let rg = self.rg(&[a, b]);
        self.push(value, op, rg, name)
    }

    /// Per-row squared Euclidean distance: `[B, ...] x [B, ...] -> [B]`.
    pub fn sq_dist_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_reduce(a, b, "sq_dist_rows", |x, y| (x - y) * (x - y), Op::SqDistRows(a, b))
    }

    /// Per-row L1 distance: `[B, ...] x [B, ...] -> [B]`.
    pub fn l1_dist_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_reduce(a, b, "l1_dist_rows", |x, y| (x - y).abs(), Op::L1DistRows(a, b))
    }

    /// Per-row KL divergence of `N(mean, exp(log_var))` from `N(0, I)`.
    pub fn kl_rows(&mut self, mean: Var, log_var: Var) -> Result<Var> {
        self.row_reduce(
            mean,
            log_var,
            "kl_rows",
            |m, lv| 0.5 * (lv.exp() + m * m - 1.0 - lv),
            Op::KlRows { mean, log_var },
        )
    }

    fn full_reduce(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        same_shape(self, a, b, name)?;
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let s: f64 = x.iter().zip(y).map(|(&u, &v)| f(u, v)).sum();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::scalar(s), op, rg, name)
    }

    /// `Σ (a - b)²` over all elements.
    pub fn sq_l2(&mut self, a: Var, b: Var) -> Result<Var> {
        self.full_reduce(a, b, "sq_l2", |x, y| (x - y) * (x - y), Op::SqL2(a, b))
    }

    /// `Σ |a - b|` over all elements.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        self.full_reduce(a, b, "l1", |x, y| (x - y).abs(), Op::L1(a, b))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).data().iter().sum();
        let rg = self.rg(&[input]);
        self.push(Tensor::scalar(s), Op::Sum { input }, rg, "sum")
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.is_empty() {
            return Err(Error::Empty("mean input"));
        }
        let s = x.data().iter().sum::<f64>() / x.len() as f64;
        let rg = self.rg(&[input]);
        self.push(Tensor::scalar(s), Op::Mean { input }, rg, "mean")
    }

    /// `Σ wᵢ xᵢ` with constant weights.
    pub fn weighted_sum(&mut self, input: Var, weights: &[f64]) -> Result<Var> {
        let x = self.value(input);
        if x.len() != weights.len() {
            return Err(Error::Shape(format!(
                "weighted_sum: {} values, {} weights",
                x.len(),
                weights.len()
            )));
        }
        let s = x.data().iter().zip(weights).map(|(a, w)| a * w).sum();
        let rg = self.rg(&[input]);
        self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                input,
                weights: weights.to_vec(),
            },
            rg,
            "weighted_sum",
        )
    }
}

/// Accumulation buffer for `v`'s gradient, or `None` if `v` is untracked.
fn slot<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f64>>],
    v: Var,
) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
}

fn add_scaled(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64], s: f64) {
    if let Some(buf) = slot(nodes, grads, v) {
        for (b, &x) in buf.iter_mut().zip(g) {
            *b += s * x;
        }
    }
}

fn add_fn(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, f: impl Fn(usize) -> f64) {
    if let Some(buf) = slot(nodes, grads, v) {
        for (j, b) in buf.iter_mut().enumerate() {
            *b += f(j);
        }
    }
}

fn add_map(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    v: Var,
    g: &[f64],
    f: impl Fn(usize, f64) -> f64,
) {
    if let Some(buf) = slot(nodes, grads, v) {
        for (i, (b, &x)) in buf.iter_mut().zip(g).enumerate() {
            *b += f(i, x);
        }
    }
}

/// Propagates `grad` (gradient of node `i`) into its operands.
pub(crate) fn backprop(nodes: &[Node], i: usize, grad: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| nodes[v.0].value.data();
    let out = nodes[i].value.data();
    match &nodes[i].op {
        Op::Leaf | Op::Param { .. } => {}
        Op::Conv1d { input, kernel, bias, cols } => {
            let (input, kernel, bias) = (*input, *kernel, *bias);
            let (b, cin, t) = bct(nodes[input.0].value.shape(), "").expect("checked in forward");
            let ks = nodes[kernel.0].value.shape();
            let (cout, k) = (ks[0], ks[2]);
            let span = cin * k;
            let w = val(kernel);
            if let Some(gb) = slot(nodes, grads, bias) {
                for bi in 0..b {
                    for (co, g) in gb.iter_mut().enumerate() {
                        *g += grad[(bi * cout + co) * t..][..t].iter().sum::<f64>();
                    }
                }
            }
            if let Some(gw) = slot(nodes, grads, kernel) {
                for bi in 0..b {
                    let cb = &cols[bi * t * span..][..t * span];
                    for co in 0..cout {
                        let go = &grad[(bi * cout + co) * t..][..t];
                        let gr = &mut gw[co * span..][..span];
                        for (tt, &g) in go.iter().enumerate() {
                            if g != 0.0 {
                                axpy(gr, g, &cb[tt * span..][..span]);
                            }
                        }
                    }
                }
            }
            if let Some(gx) = slot(nodes, grads, input) {
                let pad = k / 2;
                let mut gcol = vec![0.0; span];
                for bi in 0..b {
                    for tt in 0..t {
                        gcol.fill(0.0);
                        for co in 0..cout {
                            let g = grad[(bi * cout + co) * t + tt];
                            if g != 0.0 {
                                axpy(&mut gcol, g, &w[co * span..][..span]);
                            }
                        }
                        for ci in 0..cin {
                            let dst = &mut gx[(bi * cin + ci) * t..][..t];
                            for kk in 0..k {
                                if let Some(d) = (tt + kk).checked_sub(pad).and_then(|j| dst.get_mut(j)) {
                                    *d += gcol[ci * k + kk];
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::MaxPool { input, argmax } => {
            if let Some(gx) = slot(nodes, grads, *input) {
                for (&src, &g) in argmax.iter().zip(grad) {
                    gx[src] += g;
                }
            }
        }
        &Op::Upsample { input } => {
            if let Some(gx) = slot(nodes, grads, input) {
                for (j, gv) in gx.iter_mut().enumerate() {
                    *gv += grad[2 * j] + grad[2 * j + 1];
                }
            }
        }
        &Op::Dense { input, weight, bias } => {
            let ws = nodes[weight.0].value.shape();
            let (m, n) = (ws[0], ws[1]);
            let b = nodes[input.0].value.len() / n;
            let x = val(input);
            let w = val(weight);
            if let Some(gb) = slot(nodes, grads, bias) {
                for bi in 0..b {
                    for (g, &go) in gb.iter_mut().zip(&grad[bi * m..][..m]) {
                        *g += go;
                    }
                }
            }
            if let Some(gw) = slot(nodes, grads, weight) {
                for bi in 0..b {
                    let xr = &x[bi * n..][..n];
                    for mi in 0..m {
                        let go = grad[bi * m + mi];
                        for (g, &xv) in gw[mi * n..][..n].iter_mut().zip(xr) {
                            *g += go * xv;
                        }
                    }
                }
            }
            if let Some(gx) = slot(nodes, grads, input) {
                for bi in 0..b {
                    let gr = &mut gx[bi * n..][..n];
                    for mi in 0..m {
                        let go = grad[bi * m + mi];
                        for (g, &wv) in gr.iter_mut().zip(&w[mi * n..][..n]) {
                            *g += go * wv;
                        }
                    }
                }
            }
        }
        &Op::Elu { input } => {
            let x = val(input);
            add_map(nodes, grads, input, grad, |j, g| {
                if x[j] > 0.0 {
                    g
                } else {
                    g * (out[j] + 1.0)
                }
            });
        }
        &Op::Sigmoid { input } => {
            add_map(nodes, grads, input, grad, |j, g| g * out[j] * (1.0 - out[j]));
        }
        &Op::Exp { input } => {
            add_map(nodes, grads, input, grad, |j, g| g * out[j]);
        }
        &Op::Ln { input, lo, hi } => {
            let x = val(input);
            add_map(nodes, grads, input, grad, |j, g| {
                if x[j] < lo || x[j] > hi {
                    0.0
                } else {
                    g / x[j]
                }
            });
        }
        &Op::Add(a, b) => {
            add_scaled(nodes, grads, a, grad, 1.0);
            add_scaled(nodes, grads, b, grad, 1.0);
        }
        &Op::Sub(a, b) => {
            add_scaled(nodes, grads, a, grad, 1.0);
            add_scaled(nodes, grads, b, grad, -1.0);
        }
        &Op::Mul(a, b) => {
            let (x, y) = (val(a), val(b));
            add_map(nodes, grads, a, grad, |j, g| g * y[j]);
            add_map(nodes, grads, b, grad, |j, g| g * x[j]);
        }
        &Op::Affine { input, scale } => add_scaled(nodes, grads, input, grad, scale),
        &Op::Reshape { input } => add_scaled(nodes, grads, input, grad, 1.0),
        &Op::CropTime { input, len } => {
            let t = *nodes[input.0].value.shape().last().expect("rank checked");
            if let Some(gx) = slot(nodes, grads, input) {
                for (r, go) in grad.chunks(len).enumerate() {
                    for (d, &g) in gx[r * t..][..len].iter_mut().zip(go) {
                        *d += g;
                    }
                }
            }
        }
        Op::ConcatBatch { inputs } => {
            let mut offset = 0;
            for &v in inputs {
                let n = nodes[v.0].value.len();
                add_scaled(nodes, grads, v, &grad[offset..offset + n], 1.0);
                offset += n;
            }
        }
        Op::GatherBatch { input, indices } => {
            let (_, per) = rows(nodes[input.0].value.shape());
            if let Some(gx) = slot(nodes, grads, *input) {
                for (r, &src) in indices.iter().enumerate() {
                    for (d, &g) in gx[src * per..][..per].iter_mut().zip(&grad[r * per..][..per]) {
                        *d += g;
                    }
                }
            }
        }
        &Op::SliceCols { input, start } => {
            let f = nodes[input.0].value.shape()[1];
            let len = nodes[i].value.shape()[1];
            if let Some(gx) = slot(nodes, grads, input) {
                for (r, go) in grad.chunks(len).enumerate() {
                    for (d, &g) in gx[r * f + start..][..len].iter_mut().zip(go) {
                        *d += g;
                    }
                }
            }
        }
        &Op::SqDistRows(a, b) => {
            let (_, per) = rows(nodes[a.0].value.shape());
            let (x, y) = (val(a), val(b));
            add_fn(nodes, grads, a, |j| 2.0 * (x[j] - y[j]) * grad[j / per]);
            add_fn(nodes, grads, b, |j| -2.0 * (x[j] - y[j]) * grad[j / per]);
        }
        &Op::L1DistRows(a, b) => {
            let (_, per) = rows(nodes[a.0].value.shape());
            let (x, y) = (val(a), val(b));
            add_fn(nodes, grads, a, |j| sign(x[j] - y[j]) * grad[j / per]);
            add_fn(nodes, grads, b, |j| -sign(x[j] - y[j]) * grad[j / per]);
        }
        &Op::KlRows { mean, log_var } => {
            let (_, per) = rows(nodes[mean.0].value.shape());
            let (m, lv) = (val(mean), val(log_var));
            add_fn(nodes, grads, mean, |j| m[j] * grad[j / per]);
            add_fn(nodes, grads, log_var, |j| {
                0.5 * (lv[j].exp() - 1.0) * grad[j / per]
            });
        }
        &Op::SqL2(a, b) => {
            let (x, y) = (val(a), val(b));
            let g = grad[0];
            add_fn(nodes, grads, a, |j| 2.0 * (x[j] - y[j]) * g);
            add_fn(nodes, grads, b, |j| -2.0 * (x[j] - y[j]) * g);
        }
        &Op::L1(a, b) => {
            let (x, y) = (val(a), val(b));
            let g = grad[0];
            add_fn(nodes, grads, a, |j| sign(x[j] - y[j]) * g);
            add_fn(nodes, grads, b, |j| -sign(x[j] - y[j]) * g);
        }
        &Op::Sum { input } => {
            let g = grad[0];
            add_fn(nodes, grads, input, |_| g);
        }
        &Op::Mean { input } => {
            let n = nodes[input.0].value.len();
            let g = grad[0] / n as f64;
            add_fn(nodes, grads, input, |_| g);
        }
        Op::WeightedSum { input, weights } => {
            let g = grad[0];
            add_map(nodes, grads, *input, weights, |_, w| w * g);
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
