use super::{accumulate, conv, Op, Tape, Var};
use crate::error::{invalid, Error, Result};

/// Splits a channels-last spatial shape into `(batch, height, width, channels)`.
pub(crate) fn spatial_dims(
    op: &'static str,
    shape: &[usize],
) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [h, w, c] => Ok((1, h, w, c)),
        [b, h, w, c] => Ok((b, h, w, c)),
        _ => Err(invalid(
            op,
            format!("expected [H, W, C] or [B, H, W, C], got {shape:?}"),
        )),
    }
}

fn with_spatial(shape: &[usize], h: usize, w: usize, c: usize) -> Vec<usize> {
    let mut out = shape.to_vec();
    let r = out.len();
    out[r - 3] = h;
    out[r - 2] = w;
    out[r - 1] = c;
    out
}

/// Output shape and flat input→output index map for a reduction.
fn reduce_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect();
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        let mut o = 0;
        for (axis, &i) in idx.iter().enumerate() {
            if !axes.contains(&axis) {
                o = o * shape[axis] + i;
            }
        }
        map.push(o);
        for axis in (0..shape.len()).rev() {
            idx[axis] += 1;
            if idx[axis] < shape[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
    (out_shape, map)
}

/// Per output coordinate: (lower source index, upper source index, upper weight).
fn upsample_taps(n_in: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n_in * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let t = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, t)
        })
        .collect()
}

impl Tape {
    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Var {
        let values = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, values, op, &[a, b])
    }

    fn map(&mut self, op: Op, x: Var, f: impl Fn(f64) -> f64) -> Var {
        let values = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, values, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        Ok(self.zip_with(Op::Add(a, b), a, b, |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("sub", a, b)?;
        Ok(self.zip_with(Op::Sub(a, b), a, b, |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mul", a, b)?;
        Ok(self.zip_with(Op::Mul(a, b), a, b, |x, y| x * y))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map(Op::Scale(x, s), x, |v| v * s)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = match (self.shape(a), self.shape(b)) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            (sa, sb) => {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec(),
                })
            }
        };
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                for (o, &y) in row.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                    *o += x * y;
                }
            }
        }
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    /// Same-padded convolution of a `[H, W, Cin]` or `[B, H, W, Cin]` input
    /// with a `[k, k, Cin, Cout]` kernel. Output extents are `ceil(H / stride)`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (b, h, w, cin) = spatial_dims("conv2d", self.shape(input))?;
        let (k, kcin, cout) = match *self.shape(kernel) {
            [k1, k2, ci, co] if k1 == k2 => (k1, ci, co),
            ref s => {
                return Err(invalid(
                    "conv2d",
                    format!("kernel must be [k, k, Cin, Cout], got {s:?}"),
                ))
            }
        };
        if kcin != cin {
            return Err(Error::ShapeMismatch {
                op: "conv2d (input channels vs kernel)",
                lhs: self.shape(input).to_vec(),
                rhs: self.shape(kernel).to_vec(),
            });
        }
        if k % 2 == 0 {
            return Err(invalid(
                "conv2d",
                format!("kernel size must be odd, got {k}"),
            ));
        }
        if stride != 1 && stride != 2 {
            return Err(invalid(
                "conv2d",
                format!("stride must be 1 or 2, got {stride}"),
            ));
        }
        if padding != (k - 1) / 2 {
            return Err(invalid(
                "conv2d",
                format!("padding must be {} for k = {k}", (k - 1) / 2),
            ));
        }
        let geom = conv::Geometry {
            batch: b,
            height: h,
            width: w,
            cin,
            cout,
            k,
            stride,
            padding,
        };
        let out = conv::forward(&geom, self.value(input), self.value(kernel));
        let shape = with_spatial(self.shape(input), geom.out_height(), geom.out_width(), cout);
        Ok(self.push(
            shape,
            out,
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
            &[input, kernel],
        ))
    }

    /// Adds a per-channel bias `[C]` along the last axis.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [c] {
            return Err(Error::ShapeMismatch {
                op: "add_channel_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let bv = self.value(bias);
        let values = self
            .value(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(bv).map(|(a, b)| a + b))
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, values, Op::AddChannelBias(x, bias), &[x, bias]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(Op::Relu(x), x, |v| v.max(0.0))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.map(Op::Log(x), x, f64::ln)
    }

    /// Softmax over the last (channel) axis.
    pub fn channel_softmax(&mut self, x: Var) -> Var {
        let c = *self.shape(x).last().unwrap();
        let mut values = self.value(x).to_vec();
        for row in values.chunks_mut(c) {
            softmax_in_place(row);
        }
        let shape = self.shape(x).to_vec();
        self.push(shape, values, Op::Softmax(x), &[x])
    }

    /// Log-softmax over the last (channel) axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let c = *self.shape(x).last().unwrap();
        let mut values = self.value(x).to_vec();
        for row in values.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let shape = self.shape(x).to_vec();
        self.push(shape, values, Op::LogSoftmax(x), &[x])
    }

    /// Bilinear upsampling of the two spatial axes by an integer factor
    /// (half-pixel centers, edge clamped).
    pub fn bilinear_upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (b, h, w, c) = spatial_dims("bilinear_upsample", self.shape(x))?;
        if factor == 0 {
            return Err(invalid("bilinear_upsample", "factor must be positive"));
        }
        let (ho, wo) = (h * factor, w * factor);
        let ty = upsample_taps(h, factor);
        let tx = upsample_taps(w, factor);
        let xv = self.value(x);
        let mut out = vec![0.0; b * ho * wo * c];
        for bi in 0..b {
            let src = &xv[bi * h * w * c..(bi + 1) * h * w * c];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let o = ((bi * ho + oy) * wo + ox) * c;
                    let dst = &mut out[o..o + c];
                    let taps = [
                        (y0, x0, (1.0 - fy) * (1.0 - fx)),
                        (y0, x1, (1.0 - fy) * fx),
                        (y1, x0, fy * (1.0 - fx)),
                        (y1, x1, fy * fx),
                    ];
                    for (yy, xx, wgt) in taps {
                        let s = &src[(yy * w + xx) * c..(yy * w + xx + 1) * c];
                        for (d, v) in dst.iter_mut().zip(s) {
                            *d += wgt * v;
                        }
                    }
                }
            }
        }
        let shape = with_spatial(self.shape(x), ho, wo, c);
        Ok(self.push(shape, out, Op::Upsample(x, factor), &[x]))
    }

    /// Divides each channel vector by `max(||v||, eps)`; zero vectors stay zero.
    pub fn l2_normalize_channels(&mut self, x: Var, eps: f64) -> Result<Var> {
        if eps.is_nan() || eps <= 0.0 {
            return Err(invalid("l2_normalize_channels", "eps must be positive"));
        }
        let c = *self.shape(x).last().unwrap();
        let mut values = self.value(x).to_vec();
        for row in values.chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            row.iter_mut().for_each(|v| *v /= n);
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, values, Op::L2Normalize(x, eps), &[x]))
    }

    pub fn reduce_sum(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let axes = self.check_axes("reduce_sum", x, axes)?;
        let (shape, map) = reduce_map(self.shape(x), &axes);
        let mut out = vec![0.0; shape.iter().product()];
        for (v, &o) in self.value(x).iter().zip(&map) {
            out[o] += v;
        }
        Ok(self.push(shape, out, Op::Sum(x, axes), &[x]))
    }

    pub fn reduce_mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let axes = self.check_axes("reduce_mean", x, axes)?;
        let (shape, map) = reduce_map(self.shape(x), &axes);
        let n_out: usize = shape.iter().product();
        let count = (self.tensor(x).numel() / n_out.max(1)) as f64;
        let mut out = vec![0.0; n_out];
        for (v, &o) in self.value(x).iter().zip(&map) {
            out[o] += v;
        }
        out.iter_mut().for_each(|v| *v /= count);
        Ok(self.push(shape, out, Op::Mean(x, axes), &[x]))
    }

    /// Sum over every axis, yielding a scalar.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce_sum(x, &axes).expect("all axes are valid")
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce_mean(x, &axes).expect("all axes are valid")
    }

    fn check_axes(&self, op: &'static str, x: Var, axes: &[usize]) -> Result<Vec<usize>> {
        let rank = self.shape(x).len();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.iter().any(|&a| a >= rank) {
            return Err(invalid(
                op,
                format!("axes {axes:?} out of range for rank {rank}"),
            ));
        }
        Ok(sorted)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.tensor(x).numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let values = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), values, Op::Reshape(x), &[x]))
    }

    /// Mean negative log-likelihood over rows of `logp` (last axis = classes)
    /// whose target is `Some`. Rows with `None` contribute nothing; with no
    /// contributing rows the result is exactly zero.
    pub fn nll(&mut self, logp: Var, targets: &[Option<usize>]) -> Result<Var> {
        let c = *self.shape(logp).last().unwrap_or(&0);
        let rows = self.tensor(logp).numel() / c.max(1);
        if targets.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "nll",
                lhs: self.shape(logp).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(t) = targets.iter().flatten().find(|&&t| t >= c) {
            return Err(invalid(
                "nll",
                format!("target {t} out of range for {c} classes"),
            ));
        }
        let lv = self.value(logp);
        let mut total = 0.0;
        let mut count = 0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = t {
                total -= lv[r * c + t];
                count += 1;
            }
        }
        let value = if count == 0 {
            0.0
        } else {
            total / count as f64
        };
        Ok(self.push(
            vec![],
            vec![value],
            Op::Nll {
                logp,
                targets: targets.to_vec(),
                count,
            },
            &[logp],
        ))
    }

    /// Distributes the adjoint `g` of node `id` onto its inputs.
    pub(super) fn backprop(&self, id: usize, g: &[f64], adjoints: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[id].tensor;
        match &nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(nodes, adjoints, *a, || g.to_vec());
                accumulate(nodes, adjoints, *b, || g.to_vec());
            }
            Op::Sub(a, b) => {
                accumulate(nodes, adjoints, *a, || g.to_vec());
                accumulate(nodes, adjoints, *b, || g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                accumulate(nodes, adjoints, *a, || {
                    g.iter().zip(bv).map(|(g, y)| g * y).collect()
                });
                accumulate(nodes, adjoints, *b, || {
                    g.iter().zip(av).map(|(g, x)| g * x).collect()
                });
            }
            Op::Scale(x, s) => {
                accumulate(nodes, adjoints, *x, || g.iter().map(|v| v * s).collect())
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (av, bv) = (self.value(*a), self.value(*b));
                accumulate(nodes, adjoints, *a, || {
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            da[i * k + p] = gi
                                .iter()
                                .zip(&bv[p * n..(p + 1) * n])
                                .map(|(x, y)| x * y)
                                .sum();
                        }
                    }
                    da
                });
                accumulate(nodes, adjoints, *b, || {
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = av[i * k + p];
                            for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(gi) {
                                *d += x * gv;
                            }
                        }
                    }
                    db
                });
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            } => {
                let (b, h, w, cin) = spatial_dims("conv2d", self.shape(*input)).unwrap();
                let ks = self.shape(*kernel);
                let geom = conv::Geometry {
                    batch: b,
                    height: h,
                    width: w,
                    cin,
                    cout: ks[3],
                    k: ks[0],
                    stride: *stride,
                    padding: *padding,
                };
                let (xv, kv) = (self.value(*input), self.value(*kernel));
                accumulate(nodes, adjoints, *input, || {
                    conv::backward_input(&geom, g, kv)
                });
                accumulate(nodes, adjoints, *kernel, || {
                    conv::backward_kernel(&geom, g, xv)
                });
            }
            Op::AddChannelBias(x, bias) => {
                let c = self.tensor(*bias).numel();
                accumulate(nodes, adjoints, *x, || g.to_vec());
                accumulate(nodes, adjoints, *bias, || {
                    let mut db = vec![0.0; c];
                    for row in g.chunks(c) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    db
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                accumulate(nodes, adjoints, *x, || {
                    g.iter()
                        .zip(xv)
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect()
                });
            }
            Op::Log(x) => {
                let xv = self.value(*x);
                accumulate(nodes, adjoints, *x, || {
                    g.iter().zip(xv).map(|(g, v)| g / v).collect()
                });
            }
            Op::Softmax(x) => {
                let c = *out.shape.last().unwrap();
                accumulate(nodes, adjoints, *x, || {
                    let mut dx = vec![0.0; g.len()];
                    for ((d, gr), y) in dx.chunks_mut(c).zip(g.chunks(c)).zip(out.values.chunks(c))
                    {
                        let dot: f64 = gr.iter().zip(y).map(|(a, b)| a * b).sum();
                        for i in 0..c {
                            d[i] = y[i] * (gr[i] - dot);
                        }
                    }
                    dx
                });
            }
            Op::LogSoftmax(x) => {
                let c = *out.shape.last().unwrap();
                accumulate(nodes, adjoints, *x, || {
                    let mut dx = vec![0.0; g.len()];
                    for ((d, gr), y) in dx.chunks_mut(c).zip(g.chunks(c)).zip(out.values.chunks(c))
                    {
                        let total: f64 = gr.iter().sum();
                        for i in 0..c {
                            d[i] = gr[i] - y[i].exp() * total;
                        }
                    }
                    dx
                });
            }
            Op::Upsample(x, factor) => {
                let (b, h, w, c) = spatial_dims("bilinear_upsample", self.shape(*x)).unwrap();
                let (ho, wo) = (h * factor, w * factor);
                accumulate(nodes, adjoints, *x, || {
                    let ty = upsample_taps(h, *factor);
                    let tx = upsample_taps(w, *factor);
                    let mut dx = vec![0.0; b * h * w * c];
                    for bi in 0..b {
                        let dst = &mut dx[bi * h * w * c..(bi + 1) * h * w * c];
                        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                                let o = ((bi * ho + oy) * wo + ox) * c;
                                let go = &g[o..o + c];
                                let taps = [
                                    (y0, x0, (1.0 - fy) * (1.0 - fx)),
                                    (y0, x1, (1.0 - fy) * fx),
                                    (y1, x0, fy * (1.0 - fx)),
                                    (y1, x1, fy * fx),
                                ];
                                for (yy, xx, wgt) in taps {
                                    let d = &mut dst[(yy * w + xx) * c..(yy * w + xx + 1) * c];
                                    for (dv, gv) in d.iter_mut().zip(go) {
                                        *dv += wgt * gv;
                                    }
                                }
                            }
                        }
                    }
                    dx
                });
            }
            Op::L2Normalize(x, eps) => {
                let c = *out.shape.last().unwrap();
                let xv = self.value(*x);
                accumulate(nodes, adjoints, *x, || {
                    let mut dx = vec![0.0; g.len()];
                    for (((d, gr), y), xr) in dx
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(out.values.chunks(c))
                        .zip(xv.chunks(c))
                    {
                        let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if norm > *eps {
                            let dot: f64 = gr.iter().zip(y).map(|(a, b)| a * b).sum();
                            for i in 0..c {
                                d[i] = (gr[i] - y[i] * dot) / norm;
                            }
                        } else {
                            for i in 0..c {
                                d[i] = gr[i] / eps;
                            }
                        }
                    }
                    dx
                });
            }
            Op::Sum(x, axes) | Op::Mean(x, axes) => {
                let (_, map) = reduce_map(self.shape(*x), axes);
                let scale = match &nodes[id].op {
                    Op::Mean(..) => out.numel() as f64 / self.tensor(*x).numel() as f64,
                    _ => 1.0,
                };
                accumulate(nodes, adjoints, *x, || {
                    map.iter().map(|&o| g[o] * scale).collect()
                });
            }
            Op::Reshape(x) => accumulate(nodes, adjoints, *x, || g.to_vec()),
            Op::Nll {
                logp,
                targets,
                count,
            } => {
                let c = *self.shape(*logp).last().unwrap();
                let n = self.tensor(*logp).numel();
                accumulate(nodes, adjoints, *logp, || {
                    let mut d = vec![0.0; n];
                    if *count > 0 {
                        let w = -g[0] / *count as f64;
                        for (r, t) in targets.iter().enumerate() {
                            if let Some(t) = t {
                                d[r * c + t] = w;
                            }
                        }
                    }
                    d
                });
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_by_identity_is_identity() {
        let mut tape = Tape::new();
        let a = tape
            .param(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
            .unwrap();
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 4] = 1.0;
        }
        let i = tape.constant(&[3, 3], eye).unwrap();
        let y = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(y), tape.value(a));
        assert!(tape.matmul(i, a).is_err());
    }

    #[test]
    fn add_zero_passes_value_and_unit_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(&[4], vec![1.0, -1.0, 0.5, 2.0]).unwrap();
        let z = tape.constant(&[4], vec![0.0; 4]).unwrap();
        let y = tape.add(x, z).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let s = tape.sum_all(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut tape = Tape::new();
        let a = tape.param(&[2], vec![0.0; 2]).unwrap();
        let b = tape.param(&[3], vec![0.0; 3]).unwrap();
        let err = tape.add(a, b).unwrap_err();
        assert!(err.to_string().contains("add"));
    }

    #[test]
    fn softmax_of_uniform_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(&[2, 4], vec![0.3; 8]).unwrap();
        let p = tape.channel_softmax(x);
        for v in tape.value(p) {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn normalize_three_four_five() {
        let mut tape = Tape::new();
        let x = tape.constant(&[1, 2], vec![3.0, 4.0]).unwrap();
        let y = tape.l2_normalize_channels(x, 1e-12).unwrap();
        assert!((tape.value(y)[0] - 0.6).abs() < 1e-15);
        assert!((tape.value(y)[1] - 0.8).abs() < 1e-15);
        let z = tape.constant(&[1, 2], vec![0.0, 0.0]).unwrap();
        let zn = tape.l2_normalize_channels(z, 1e-12).unwrap();
        assert_eq!(tape.value(zn), &[0.0, 0.0]);
    }

    #[test]
    fn upsample_preserves_constants() {
        let mut tape = Tape::new();
        let x = tape.constant(&[3, 2, 2], vec![0.7; 12]).unwrap();
        let y = tape.bilinear_upsample(x, 2).unwrap();
        assert_eq!(tape.shape(y), &[6, 4, 2]);
        for v in tape.value(y) {
            assert!((v - 0.7).abs() < 1e-15);
        }
    }

    #[test]
    fn reduce_over_axes() {
        let mut tape = Tape::new();
        let x = tape
            .constant(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
            .unwrap();
        let s0 = tape.reduce_sum(x, &[0]).unwrap();
        assert_eq!(tape.value(s0), &[5.0, 7.0, 9.0]);
        let m1 = tape.reduce_mean(x, &[1]).unwrap();
        assert_eq!(tape.value(m1), &[2.0, 5.0]);
        assert!(tape.reduce_sum(x, &[2]).is_err());
    }

    #[test]
    fn nll_with_all_rows_ignored_is_zero_with_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape
            .param(&[2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6])
            .unwrap();
        let lp = tape.log_softmax(x);
        let l = tape.nll(lp, &[None, None]).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
        tape.backward(l).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_bad_geometry() {
        let mut tape = Tape::new();
        let x = tape.constant(&[4, 4, 3], vec![0.0; 48]).unwrap();
        let k = tape.constant(&[3, 3, 2, 1], vec![0.0; 18]).unwrap();
        assert!(tape.conv2d(x, k, 1, 1).is_err());
        let k = tape.constant(&[3, 3, 3, 1], vec![0.0; 27]).unwrap();
        assert!(tape.conv2d(x, k, 3, 1).is_err());
        assert!(tape.conv2d(x, k, 1, 0).is_err());
        let k2 = tape.constant(&[2, 2, 3, 1], vec![0.0; 12]).unwrap();
        assert!(tape.conv2d(x, k2, 1, 0).is_err());
    }
}
