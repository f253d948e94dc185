//! Dense NCHW tensors and the raw forward/backward kernels used by the graph.
//!
//! Every kernel here is a plain function over [`Tensor`] values. The graph in
//! [`crate::graph`] records which kernels ran and replays their backward
//! counterparts in reverse order.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("graph state error: {0}")]
    State(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn dim_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(TensorError::Dimension { op, detail: detail.into() })
}

/// Row-major array of `f64` values with an explicit shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return dim_err("tensor", format!("zero-sized axis in shape {shape:?}"));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return dim_err(
                "tensor",
                format!("shape {shape:?} holds {expected} values but {} were given", data.len()),
            );
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(f).collect() }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Interprets the tensor as `[N, C, H, W]`.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => dim_err(op, format!("expected rank-4 NCHW tensor, got shape {:?}", self.shape)),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `c = a · b (+ beta · c)` with explicit row/column strides on every operand.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the callers pass slices whose extents cover the strided views.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (n, c, h, w) = match *input {
            [n, c, h, w] => (n, c, h, w),
            _ => return dim_err("conv2d", format!("input must be NCHW, got {input:?}")),
        };
        let (f, wc, kh, kw) = match *weight {
            [f, wc, kh, kw] => (f, wc, kh, kw),
            _ => return dim_err("conv2d", format!("weight must be [F,C,kh,kw], got {weight:?}")),
        };
        if wc != c {
            return dim_err(
                "conv2d",
                format!("weight channel axis (1) is {wc} but input channel axis (1) is {c}"),
            );
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return dim_err("conv2d", format!("kernel axes (2,3) must be odd, got {kh}x{kw}"));
        }
        if stride == 0 {
            return dim_err("conv2d", "stride must be at least 1");
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return dim_err(
                "conv2d",
                format!("spatial axes (2,3) {h}x{w} with pad {pad} smaller than kernel {kh}x{kw}"),
            );
        }
        Ok(Self {
            batch: n,
            in_channels: c,
            height: h,
            width: w,
            filters: f,
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let (hw_out, h, w) = (self.out_pixels(), self.height as isize, self.width as isize);
        for c in 0..self.in_channels {
            let plane = &x[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if iy < 0 || iy >= h {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= w { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], gx: &mut [f64]) {
        let (hw_out, h, w) = (self.out_pixels(), self.height as isize, self.width as isize);
        for c in 0..self.in_channels {
            let plane = &mut gx[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * hw_out..(row + 1) * hw_out];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let line = &src[oy * self.out_w..(oy + 1) * self.out_w];
                        let dst = &mut plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for (ox, v) in line.iter().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < w {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation over an NCHW batch.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, pad)?;
    if bias.shape() != [g.filters] {
        return dim_err("conv2d", format!("bias must be [{}], got {:?}", g.filters, bias.shape()));
    }
    let (rows, hw_out) = (g.col_rows(), g.out_pixels());
    let in_size = g.in_channels * g.height * g.width;
    let out_size = g.filters * hw_out;
    let mut out = vec![0.0; g.batch * out_size];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; rows * hw_out] };
    for n in 0..g.batch {
        let x = &input.data[n * in_size..(n + 1) * in_size];
        let y = &mut out[n * out_size..(n + 1) * out_size];
        for (f, chunk) in y.chunks_mut(hw_out).enumerate() {
            chunk.fill(bias.data[f]);
        }
        let b: &[f64] = if g.is_pointwise() {
            x
        } else {
            g.im2col(x, &mut cols);
            &cols
        };
        gemm(
            g.filters,
            rows,
            hw_out,
            &weight.data,
            (rows as isize, 1),
            b,
            (hw_out as isize, 1),
            1.0,
            y,
        );
    }
    Tensor::new(vec![g.batch, g.filters, g.out_h, g.out_w], out)
}

pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    pad: usize,
    grad_out: &Tensor,
    need_input_grad: bool,
) -> Result<ConvGrads> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, pad)?;
    let (rows, hw_out) = (g.col_rows(), g.out_pixels());
    if grad_out.shape() != [g.batch, g.filters, g.out_h, g.out_w] {
        return dim_err("conv2d", format!("upstream gradient shape {:?} mismatches output", grad_out.shape()));
    }
    let in_size = g.in_channels * g.height * g.width;
    let out_size = g.filters * hw_out;
    let mut gw = vec![0.0; weight.len()];
    let mut gb = vec![0.0; g.filters];
    let mut gx = if need_input_grad { vec![0.0; input.len()] } else { Vec::new() };
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; rows * hw_out] };
    let mut gcols = if need_input_grad && !g.is_pointwise() { vec![0.0; rows * hw_out] } else { Vec::new() };
    for n in 0..g.batch {
        let x = &input.data[n * in_size..(n + 1) * in_size];
        let gy = &grad_out.data[n * out_size..(n + 1) * out_size];
        for (f, chunk) in gy.chunks(hw_out).enumerate() {
            gb[f] += chunk.iter().sum::<f64>();
        }
        let b: &[f64] = if g.is_pointwise() {
            x
        } else {
            g.im2col(x, &mut cols);
            &cols
        };
        // gW[F, rows] += gY[F, hw] · colsᵀ[hw, rows]
        gemm(g.filters, hw_out, rows, gy, (hw_out as isize, 1), b, (1, hw_out as isize), 1.0, &mut gw);
        if need_input_grad {
            // gcols[rows, hw] = Wᵀ[rows, F] · gY[F, hw]
            if g.is_pointwise() {
                let gxn = &mut gx[n * in_size..(n + 1) * in_size];
                gemm(rows, g.filters, hw_out, &weight.data, (1, rows as isize), gy, (hw_out as isize, 1), 0.0, gxn);
            } else {
                gemm(rows, g.filters, hw_out, &weight.data, (1, rows as isize), gy, (hw_out as isize, 1), 0.0, &mut gcols);
                g.col2im(&gcols, &mut gx[n * in_size..(n + 1) * in_size]);
            }
        }
    }
    Ok(ConvGrads {
        input: if need_input_grad { Some(Tensor::new(input.shape.clone(), gx)?) } else { None },
        weight: Tensor::new(weight.shape.clone(), gw)?,
        bias: Tensor::new(vec![g.filters], gb)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Infer,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Values kept from a batch-norm forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct BnCache {
    pub normalized: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub mode: Mode,
}

pub struct BnOutput {
    pub output: Tensor,
    pub cache: BnCache,
    /// Updated `(running_mean, running_var)` in train mode.
    pub running: Option<(Vec<f64>, Vec<f64>)>,
}

fn channel_view(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h * w)),
        [n, c] => Ok((n, c, 1)),
        _ => dim_err(op, format!("expected NCHW or NC tensor, got {shape:?}")),
    }
}

#[allow(clippy::too_many_arguments)]
pub fn batchnorm(
    input: &Tensor,
    scale: &Tensor,
    shift: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    mode: Mode,
    eps: f64,
    momentum: f64,
) -> Result<BnOutput> {
    let (n, c, hw) = channel_view(input.shape(), "batchnorm")?;
    for (name, t) in [("scale", scale), ("shift", shift), ("running_mean", running_mean), ("running_var", running_var)] {
        if t.shape() != [c] {
            return dim_err("batchnorm", format!("{name} must be [{c}] to match channel axis (1), got {:?}", t.shape()));
        }
    }
    if eps <= 0.0 {
        return dim_err("batchnorm", "eps must be positive");
    }
    let count = (n * hw) as f64;
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    let mut normalized = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; c];
    let mut running = None;
    let (mean, var) = match mode {
        Mode::Train => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for b in 0..n {
                    s += x[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
                }
                let m = s / count;
                let mut v = 0.0;
                for b in 0..n {
                    v += x[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().map(|&t| (t - m) * (t - m)).sum::<f64>();
                }
                mean[ch] = m;
                var[ch] = v / count;
            }
            let rm = running_mean.data().iter().zip(&mean).map(|(r, m)| momentum * r + (1.0 - momentum) * m).collect();
            let rv = running_var.data().iter().zip(&var).map(|(r, v)| momentum * r + (1.0 - momentum) * v).collect();
            running = Some((rm, rv));
            (mean, var)
        }
        Mode::Infer => (running_mean.data().to_vec(), running_var.data().to_vec()),
    };
    for ch in 0..c {
        let is = 1.0 / (var[ch] + eps).sqrt();
        inv_std[ch] = is;
        let (g, s, m) = (scale.data()[ch], shift.data()[ch], mean[ch]);
        for b in 0..n {
            let range = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            for i in range {
                let xh = (x[i] - m) * is;
                normalized[i] = xh;
                out[i] = g * xh + s;
            }
        }
    }
    Ok(BnOutput {
        output: Tensor::new(input.shape().to_vec(), out)?,
        cache: BnCache { normalized, inv_std, mode },
        running,
    })
}

/// Returns `(d input, d scale, d shift)`.
pub fn batchnorm_backward(
    scale: &Tensor,
    cache: &BnCache,
    grad_out: &Tensor,
    need_input_grad: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let (n, c, hw) = channel_view(grad_out.shape(), "batchnorm")?;
    let gy = grad_out.data();
    let count = (n * hw) as f64;
    let mut gscale = vec![0.0; c];
    let mut gshift = vec![0.0; c];
    let mut gx = if need_input_grad { vec![0.0; gy.len()] } else { Vec::new() };
    for ch in 0..c {
        let (mut sg, mut sgx) = (0.0, 0.0);
        for b in 0..n {
            for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                sg += gy[i];
                sgx += gy[i] * cache.normalized[i];
            }
        }
        gscale[ch] = sgx;
        gshift[ch] = sg;
        if !need_input_grad {
            continue;
        }
        let k = scale.data()[ch] * cache.inv_std[ch];
        match cache.mode {
            Mode::Train => {
                let (mg, mgx) = (sg / count, sgx / count);
                for b in 0..n {
                    for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                        gx[i] = k * (gy[i] - mg - cache.normalized[i] * mgx);
                    }
                }
            }
            Mode::Infer => {
                for b in 0..n {
                    for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                        gx[i] = k * gy[i];
                    }
                }
            }
        }
    }
    let gx = if need_input_grad { Some(Tensor::new(grad_out.shape().to_vec(), gx)?) } else { None };
    Ok((gx, Tensor::new(vec![c], gscale)?, Tensor::new(vec![c], gshift)?))
}

pub fn relu(input: &Tensor) -> Tensor {
    Tensor { shape: input.shape.clone(), data: input.data.iter().map(|&v| v.max(0.0)).collect() }
}

pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = input.data.iter().zip(&grad_out.data).map(|(&x, &g)| if x > 0.0 { g } else { 0.0 }).collect();
    Tensor { shape: input.shape.clone(), data }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

pub struct PoolOutput {
    pub output: Tensor,
    /// Flat input index chosen by each max-pool output cell; empty for average pooling.
    pub argmax: Vec<usize>,
}

pub fn pool(input: &Tensor, kind: PoolKind, k: usize, stride: usize) -> Result<PoolOutput> {
    let (n, c, h, w) = input.dims4("pool")?;
    if k == 0 || stride == 0 {
        return dim_err("pool", "window and stride must be at least 1");
    }
    if h < k || w < k {
        return dim_err("pool", format!("window {k} larger than spatial axes (2,3) {h}x{w}"));
    }
    let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::new();
    let inv = 1.0 / (k * k) as f64;
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                match kind {
                    PoolKind::Max => {
                        let mut best = base + oy * stride * w + ox * stride;
                        for dy in 0..k {
                            for dx in 0..k {
                                let i = base + (oy * stride + dy) * w + ox * stride + dx;
                                if x[i] > x[best] {
                                    best = i;
                                }
                            }
                        }
                        out.push(x[best]);
                        argmax.push(best);
                    }
                    PoolKind::Avg => {
                        let mut s = 0.0;
                        for dy in 0..k {
                            let row = base + (oy * stride + dy) * w + ox * stride;
                            s += x[row..row + k].iter().sum::<f64>();
                        }
                        out.push(s * inv);
                    }
                }
            }
        }
    }
    Ok(PoolOutput { output: Tensor::new(vec![n, c, oh, ow], out)?, argmax })
}

pub fn pool_backward(
    input_shape: &[usize],
    kind: PoolKind,
    k: usize,
    stride: usize,
    argmax: &[usize],
    grad_out: &Tensor,
) -> Result<Tensor> {
    let (n, c, h, w) = match *input_shape {
        [n, c, h, w] => (n, c, h, w),
        _ => return dim_err("pool", "expected NCHW input"),
    };
    let (_, _, oh, ow) = grad_out.dims4("pool")?;
    let mut gx = vec![0.0; n * c * h * w];
    let gy = grad_out.data();
    match kind {
        PoolKind::Max => {
            for (g, &i) in gy.iter().zip(argmax) {
                gx[i] += g;
            }
        }
        PoolKind::Avg => {
            let inv = 1.0 / (k * k) as f64;
            for plane in 0..n * c {
                let base = plane * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = gy[(plane * oh + oy) * ow + ox] * inv;
                        for dy in 0..k {
                            let row = base + (oy * stride + dy) * w + ox * stride;
                            for v in &mut gx[row..row + k] {
                                *v += g;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), gx)
}

/// Nearest-neighbour 2x upsampling: every pixel becomes a 2x2 block.
pub fn upsample2(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4("upsample2")?;
    let (oh, ow) = (2 * h, 2 * w);
    let x = input.data();
    let mut out = vec![0.0; n * c * oh * ow];
    for plane in 0..n * c {
        for y in 0..oh {
            let src = &x[(plane * h + y / 2) * w..(plane * h + y / 2 + 1) * w];
            let dst = &mut out[(plane * oh + y) * ow..(plane * oh + y + 1) * ow];
            for (xo, v) in dst.iter_mut().enumerate() {
                *v = src[xo / 2];
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn upsample2_backward(grad_out: &Tensor) -> Result<Tensor> {
    let (n, c, oh, ow) = grad_out.dims4("upsample2")?;
    let (h, w) = (oh / 2, ow / 2);
    let gy = grad_out.data();
    let mut gx = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        for y in 0..oh {
            let src = &gy[(plane * oh + y) * ow..(plane * oh + y + 1) * ow];
            let dst = &mut gx[(plane * h + y / 2) * w..(plane * h + y / 2 + 1) * w];
            for (xo, g) in src.iter().enumerate() {
                dst[xo / 2] += g;
            }
        }
    }
    Tensor::new(vec![n, c, h, w], gx)
}

pub fn concat_channels(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs.first().ok_or(TensorError::Dimension { op: "concat", detail: "no inputs".into() })?;
    let (n, _, h, w) = first.dims4("concat")?;
    let mut total_c = 0;
    for t in inputs {
        let (tn, tc, th, tw) = t.dims4("concat")?;
        if (tn, th, tw) != (n, h, w) {
            return dim_err(
                "concat",
                format!("axes (0,2,3) must agree: {:?} vs {:?}", first.shape(), t.shape()),
            );
        }
        total_c += tc;
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(n * total_c * hw);
    for b in 0..n {
        for t in inputs {
            let c = t.shape()[1];
            out.extend_from_slice(&t.data()[b * c * hw..(b + 1) * c * hw]);
        }
    }
    Tensor::new(vec![n, total_c, h, w], out)
}

/// Splits a channel-concatenated gradient back into per-input pieces.
pub fn concat_channels_backward(channels: &[usize], grad_out: &Tensor) -> Result<Vec<Tensor>> {
    let (n, total_c, h, w) = grad_out.dims4("concat")?;
    if channels.iter().sum::<usize>() != total_c {
        return dim_err("concat", "channel split does not match gradient channel axis (1)");
    }
    let hw = h * w;
    let gy = grad_out.data();
    let mut parts: Vec<Vec<f64>> = channels.iter().map(|c| Vec::with_capacity(n * c * hw)).collect();
    for b in 0..n {
        let mut offset = b * total_c * hw;
        for (part, &c) in parts.iter_mut().zip(channels) {
            part.extend_from_slice(&gy[offset..offset + c * hw]);
            offset += c * hw;
        }
    }
    parts.into_iter().zip(channels).map(|(p, &c)| Tensor::new(vec![n, c, h, w], p)).collect()
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return dim_err("add", format!("operand shapes differ: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(Tensor { shape: a.shape.clone(), data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect() })
}

/// Gathers per-head maps `[N, A*D, g, g]` into one anchor-major `[N, total, D]` tensor.
///
/// Anchor order is head-major, then row-major cell, then anchor index.
pub fn linear_heads(inputs: &[&Tensor], depth: usize) -> Result<Tensor> {
    let n = inputs.first().map(|t| t.shape()[0]).unwrap_or(0);
    let mut total = 0;
    for t in inputs {
        let (tn, c, h, w) = t.dims4("linear_heads")?;
        if tn != n || c % depth != 0 {
            return dim_err(
                "linear_heads",
                format!("head shape {:?} incompatible with batch {n} and depth {depth}", t.shape()),
            );
        }
        total += (c / depth) * h * w;
    }
    if inputs.is_empty() {
        return dim_err("linear_heads", "no heads");
    }
    let mut out = vec![0.0; n * total * depth];
    for b in 0..n {
        let mut offset = 0;
        for t in inputs {
            let (_, c, h, w) = t.dims4("linear_heads")?;
            let a = c / depth;
            let src = &t.data()[b * c * h * w..(b + 1) * c * h * w];
            for ch in 0..c {
                let (ai, d) = (ch / depth, ch % depth);
                for cell in 0..h * w {
                    out[(b * total + offset + cell * a + ai) * depth + d] = src[ch * h * w + cell];
                }
            }
            offset += a * h * w;
        }
    }
    Tensor::new(vec![n, total, depth], out)
}

pub fn linear_heads_backward(shapes: &[Vec<usize>], depth: usize, grad_out: &Tensor) -> Result<Vec<Tensor>> {
    let (n, total) = match *grad_out.shape() {
        [n, total, d] if d == depth => (n, total),
        _ => return dim_err("linear_heads", format!("gradient shape {:?} unexpected", grad_out.shape())),
    };
    let gy = grad_out.data();
    let mut grads = Vec::with_capacity(shapes.len());
    let mut offset = 0;
    for shape in shapes {
        let (c, h, w) = (shape[1], shape[2], shape[3]);
        let a = c / depth;
        let mut g = vec![0.0; n * c * h * w];
        for b in 0..n {
            let dst = &mut g[b * c * h * w..(b + 1) * c * h * w];
            for ch in 0..c {
                let (ai, d) = (ch / depth, ch % depth);
                for cell in 0..h * w {
                    dst[ch * h * w + cell] = gy[(b * total + offset + cell * a + ai) * depth + d];
                }
            }
        }
        offset += a * h * w;
        grads.push(Tensor::new(shape.clone(), g)?);
    }
    Ok(grads)
}
