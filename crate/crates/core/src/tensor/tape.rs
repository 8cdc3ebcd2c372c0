use std::cell::RefCell;

use rustfft::num_complex::Complex64;

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{ensure, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Bin {
    Add,
    Sub,
    Mul,
    Div,
}

impl Bin {
    fn name(self) -> &'static str {
        match self {
            Bin::Add => "add",
            Bin::Sub => "sub",
            Bin::Mul => "mul",
            Bin::Div => "div",
        }
    }

    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            Bin::Add => a + b,
            Bin::Sub => a - b,
            Bin::Mul => a * b,
            Bin::Div => a / b,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    Relu,
    LeakyRelu(f64),
    Gelu,
    Sigmoid,
    Exp,
    Log,
    Scale(f64),
    AddScalar(f64),
}

enum Op {
    Leaf,
    Binary(Bin, Var, Var),
    Unary(Unary, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Depthwise {
        x: Var,
        w: Var,
        b: Option<Var>,
        k: usize,
        pad: usize,
    },
    Upsample2x(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    GlobalAvgPool(Var),
    Concat(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    L1Norm(Var),
    L2Norm(Var),
    SumPerSample(Var),
    L1PerSample(Var),
    L2PerSample(Var),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    Fft2Mag {
        x: Var,
        spectrum: Vec<Complex64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Binary(_, a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Conv2d { x, w, b, .. } | Op::Depthwise { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::Concat(vs) => vs.clone(),
            Op::Unary(_, x)
            | Op::Transpose(x)
            | Op::Upsample2x(x)
            | Op::Softmax(x)
            | Op::LayerNorm { x, .. }
            | Op::GlobalAvgPool(x)
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::L1Norm(x)
            | Op::L2Norm(x)
            | Op::SumPerSample(x)
            | Op::L1PerSample(x)
            | Op::L2PerSample(x)
            | Op::NormalizeRows { x, .. }
            | Op::Fft2Mag { x, .. } => vec![*x],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    grads: Option<Vec<Option<Tensor>>>,
}

/// Define-by-run record of executed ops.
///
/// Nodes are appended in execution order, so the record is always in
/// topological order and a reverse sweep visits every node once. A tape is
/// single-threaded; independent tapes share nothing.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

const NORM_EPS: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Register an input. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Result<Var> {
        value.check_finite("leaf")?;
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(inner.nodes.len() - 1))
    }

    pub fn param(&self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.inner.borrow().nodes[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.inner.borrow().nodes[v.0].value.shape().to_vec()
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        self.inner.borrow().nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.inner.borrow().nodes[v.0].requires_grad
    }

    fn push(&self, name: &str, value: Tensor, op: Op) -> Result<Var> {
        value.check_finite(name)?;
        let mut inner = self.inner.borrow_mut();
        let requires_grad = op.inputs().iter().any(|i| inner.nodes[i.0].requires_grad);
        inner.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(inner.nodes.len() - 1))
    }

    fn with<R>(&self, f: impl FnOnce(&[Node]) -> R) -> R {
        f(&self.inner.borrow().nodes)
    }

    // ---- elementwise ---------------------------------------------------

    fn binary(&self, kind: Bin, a: Var, b: Var) -> Result<Var> {
        let out = self.with(|n| -> Result<Tensor> {
            let (x, y) = (&n[a.0].value, &n[b.0].value);
            if x.shape() == y.shape() {
                x.zip_map(y, |p, q| kind.apply(p, q))
            } else if y.rank() == 0 {
                let s = y.data()[0];
                Ok(x.map(|p| kind.apply(p, s)))
            } else if x.rank() == 0 {
                let s = x.data()[0];
                Ok(y.map(|q| kind.apply(s, q)))
            } else {
                Err(Error::contract(format!(
                    "{}: shape mismatch {:?} vs {:?}",
                    kind.name(),
                    x.shape(),
                    y.shape()
                )))
            }
        })?;
        self.push(kind.name(), out, Op::Binary(kind, a, b))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Bin::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Bin::Sub, a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Bin::Mul, a, b)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Bin::Div, a, b)
    }

    fn unary(&self, kind: Unary, x: Var) -> Result<Var> {
        let out = self.with(|n| -> Result<Tensor> {
            let v = &n[x.0].value;
            Ok(match kind {
                Unary::Relu => v.map(|p| p.max(0.0)),
                Unary::LeakyRelu(s) => v.map(|p| if p > 0.0 { p } else { s * p }),
                Unary::Gelu => v.map(|p| 0.5 * p * (1.0 + (GELU_C * (p + GELU_A * p * p * p)).tanh())),
                Unary::Sigmoid => v.map(|p| 1.0 / (1.0 + (-p).exp())),
                Unary::Exp => v.map(f64::exp),
                Unary::Log => {
                    if let Some(bad) = v.data().iter().find(|&&p| p <= 0.0) {
                        return Err(Error::numeric(format!("log of non-positive value {bad}")));
                    }
                    v.map(f64::ln)
                }
                Unary::Scale(c) => v.map(|p| p * c),
                Unary::AddScalar(c) => v.map(|p| p + c),
            })
        })?;
        let name = match kind {
            Unary::Relu => "relu",
            Unary::LeakyRelu(_) => "leaky_relu",
            Unary::Gelu => "gelu",
            Unary::Sigmoid => "sigmoid",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Scale(_) => "scale",
            Unary::AddScalar(_) => "add_scalar",
        };
        self.push(name, out, Op::Unary(kind, x))
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Relu, x)
    }

    pub fn leaky_relu(&self, x: Var, slope: f64) -> Result<Var> {
        self.unary(Unary::LeakyRelu(slope), x)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Gelu, x)
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn exp(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }

    pub fn scale(&self, x: Var, c: f64) -> Result<Var> {
        self.unary(Unary::Scale(c), x)
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Result<Var> {
        self.unary(Unary::AddScalar(c), x)
    }

    // ---- linear algebra ----------------------------------------------

    /// `[m,k] @ [k,n]`, or batched `[b,m,k] @ [b,k,n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.with(|n| -> Result<Tensor> {
            let (x, y) = (&n[a.0].value, &n[b.0].value);
            let (bs, m, k, k2, nn) = match (x.shape(), y.shape()) {
                (&[m, k], &[k2, nn]) => (1, m, k, k2, nn),
                (&[b1, m, k], &[b2, k2, nn]) if b1 == b2 => (b1, m, k, k2, nn),
                _ => (0, 0, 1, 0, 0),
            };
            ensure!(
                bs > 0 && k == k2,
                "matmul: incompatible shapes {:?} and {:?}",
                x.shape(),
                y.shape()
            );
            let mut out = vec![0.0; bs * m * nn];
            for i in 0..bs {
                kernels::gemm(
                    m,
                    k,
                    nn,
                    &x.data()[i * m * k..(i + 1) * m * k],
                    (k, 1),
                    &y.data()[i * k * nn..(i + 1) * k * nn],
                    (nn, 1),
                    0.0,
                    &mut out[i * m * nn..(i + 1) * m * nn],
                    (nn, 1),
                );
            }
            let shape = if x.rank() == 2 { vec![m, nn] } else { vec![bs, m, nn] };
            Tensor::new(shape, out)
        })?;
        self.push("matmul", out, Op::MatMul(a, b))
    }

    /// Swap the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&self, x: Var) -> Result<Var> {
        let out = self.with(|n| transpose_last2(&n[x.0].value))?;
        self.push("transpose", out, Op::Transpose(x))
    }

    // ---- convolution ---------------------------------------------------

    /// NCHW convolution with square kernel `[c_out, c_in, k, k]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (out, geom) = self.with(|n| -> Result<(Tensor, ConvGeom)> {
            let (xv, wv) = (&n[x.0].value, &n[w.0].value);
            let geom = match (xv.shape(), wv.shape()) {
                (&[_, ci, h, wd], &[_, ci2, k, k2]) if ci == ci2 && k == k2 => {
                    ConvGeom::new(ci, h, wd, k, stride, pad)
                }
                _ => None,
            };
            let Some(geom) = geom else {
                return Err(Error::contract(format!(
                    "conv2d: input {:?} incompatible with weight {:?} (stride {stride}, pad {pad})",
                    xv.shape(),
                    wv.shape()
                )));
            };
            let c_out = wv.shape()[0];
            let bias = match b {
                Some(bv) => {
                    let bt = &n[bv.0].value;
                    ensure!(
                        bt.shape() == [c_out],
                        "conv2d: bias shape {:?}, expected [{c_out}]",
                        bt.shape()
                    );
                    Some(bt.data())
                }
                None => None,
            };
            let batch = xv.shape()[0];
            let data = kernels::conv2d_forward(xv.data(), batch, &geom, wv.data(), bias, c_out);
            Ok((
                Tensor::new(vec![batch, c_out, geom.h_out, geom.w_out], data)?,
                geom,
            ))
        })?;
        self.push("conv2d", out, Op::Conv2d { x, w, b, geom })
    }

    /// Per-channel convolution with stride 1, weight `[c, 1, k, k]`.
    pub fn depthwise_conv2d(&self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let (out, k) = self.with(|n| -> Result<(Tensor, usize)> {
            let (xv, wv) = (&n[x.0].value, &n[w.0].value);
            let ok = matches!((xv.shape(), wv.shape()),
                (&[_, c, h, wd], &[c2, 1, k, k2]) if c == c2 && k == k2 && h + 2 * pad >= k && wd + 2 * pad >= k);
            ensure!(
                ok,
                "depthwise_conv2d: input {:?} incompatible with weight {:?}",
                xv.shape(),
                wv.shape()
            );
            let (bs, c, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
            let k = wv.shape()[2];
            let bias = match b {
                Some(bv) => {
                    let bt = &n[bv.0].value;
                    ensure!(bt.shape() == [c], "depthwise_conv2d: bias shape {:?}", bt.shape());
                    Some(bt.data())
                }
                None => None,
            };
            let data = kernels::depthwise_forward(xv.data(), bs, c, h, wd, k, pad, wv.data(), bias);
            let (ho, wo) = (h + 2 * pad - k + 1, wd + 2 * pad - k + 1);
            Ok((Tensor::new(vec![bs, c, ho, wo], data)?, k))
        })?;
        self.push("depthwise_conv2d", out, Op::Depthwise { x, w, b, k, pad })
    }

    /// Nearest-neighbour 2x spatial upsampling of an NCHW tensor.
    pub fn upsample2x(&self, x: Var) -> Result<Var> {
        let out = self.with(|n| -> Result<Tensor> {
            let v = &n[x.0].value;
            let &[b, c, h, w] = v.shape() else {
                return Err(Error::contract(format!("upsample2x: expected NCHW, got {:?}", v.shape())));
            };
            let mut out = vec![0.0; b * c * 4 * h * w];
            for (p, plane) in v.data().chunks(h * w).enumerate() {
                let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        dst[y * 2 * w + xx] = plane[(y / 2) * w + xx / 2];
                    }
                }
            }
            Tensor::new(vec![b, c, 2 * h, 2 * w], out)
        })?;
        self.push("upsample2x", out, Op::Upsample2x(x))
    }

    // ---- normalisation and pooling -----------------------------------

    /// Softmax over the last axis.
    pub fn softmax(&self, x: Var) -> Result<Var> {
        let out = self.with(|n| -> Result<Tensor> {
            let v = &n[x.0].value;
            ensure!(v.rank() >= 1, "softmax: rank-0 input");
            let d = *v.shape().last().unwrap();
            let mut out = v.clone();
            for row in out.data_mut().chunks_mut(d.max(1)) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for e in row.iter_mut() {
                    *e = (*e - m).exp();
                    s += *e;
                }
                for e in row.iter_mut() {
                    *e /= s;
                }
            }
            Ok(out)
        })?;
        self.push("softmax", out, Op::Softmax(x))
    }

    /// Zero-mean, unit-variance normalisation over the last axis (no affine).
    pub fn layer_norm(&self, x: Var, eps: f64) -> Result<Var> {
        let (out, inv_std) = self.with(|n| -> Result<(Tensor, Vec<f64>)> {
            let v = &n[x.0].value;
            ensure!(v.rank() >= 1, "layer_norm: rank-0 input");
            let d = *v.shape().last().unwrap();
            let mut out = v.clone();
            let mut inv = Vec::new();
            for row in out.data_mut().chunks_mut(d.max(1)) {
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / d as f64;
                let is = 1.0 / (var + eps).sqrt();
                for e in row.iter_mut() {
                    *e = (*e - mean) * is;
                }
                inv.push(is);
            }
            Ok((out, inv))
        })?;
        self.push("layer_norm", out, Op::LayerNorm { x, inv_std })
    }

    /// `[B,C,H,W] -> [B,C]` spatial mean.
    pub fn global_avg_pool(&self, x: Var) -> Result<Var> {
        let out = self.with(|n| -> Result<Tensor> {
            let v = &n[x.0].value;
            let &[b, c, h, w] = v.shape() else {
                return Err(Error::contract(format!("global_avg_pool: expected NCHW, got {:?}", v.shape())));
            };
            let data = v.data().chunks(h * w).map(|p| p.iter().sum::<f64>() / (h * w) as f64).collect();
            Tensor::new(vec![b, c], data)
        })?;
        self.push("global_avg_pool", out, Op::GlobalAvgPool(x))
    }

    /// Concatenate NCHW tensors along the channel axis.
    pub fn concat_channels(&self, xs: &[Var]) -> Result<Var> {
        let out = self.with(|n| -> Result<Tensor> {
            ensure!(!xs.is_empty(), "concat_channels: no inputs");
            let first = n[xs[0].0].value.shape().to_vec();
            ensure!(first.len() == 4, "concat_channels: expected NCHW, got {:?}", first);
            let (b, h, w) = (first[0], first[2], first[3]);
            let mut c_total = 0;
            for v in xs {
                let s = n[v.0].value.shape();
                ensure!(
                    s.len() == 4 && s[0] == b && s[2] == h && s[3] == w,
                    "concat_channels: shape {:?} incompatible with {:?}",
                    s,
                    first
                );
                c_total += s[1];
            }
            let mut data = Vec::with_capacity(b * c_total * h * w);
            for bi in 0..b {
                for v in xs {
                    let t = &n[v.0].value;
                    let per = t.shape()[1] * h * w;
                    data.extend_from_slice(&t.data()[bi * per..(bi + 1) * per]);
                }
            }
            Tensor::new(vec![b, c_total, h, w], data)
        })?;
        self.push("concat_channels", out, Op::Concat(xs.to_vec()))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.with(|n| n[x.0].value.clone().reshape(shape))?;
        self.push("reshape", out, Op::Reshape(x))
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum(&self, x: Var) -> Result<Var> {
        let out = self.with(|n| Tensor::scalar(n[x.0].value.sum()));
        self.push("sum", out, Op::Sum(x))
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let out = self.with(|n| -> Result<Tensor> {
            let v = &n[x.0].value;
            ensure!(v.numel() > 0, "mean of empty tensor");
            Ok(Tensor::scalar(v.mean()))
        })?;
        self.push("mean", out, Op::Mean(x))
    }

    /// Sum of absolute values (subgradient 0 at 0).
    pub fn l1_norm(&self, x: Var) -> Result<Var> {
        let out = self.with(|n| Tensor::scalar(n[x.0].value.data().iter().map(|v| v.abs()).sum()));
        self.push("l1_norm", out, Op::L1Norm(x))
    }

    /// Euclidean norm over all entries (gradient 0 at the origin).
    pub fn l2_norm(&self, x: Var) -> Result<Var> {
        let out = self.with(|n| Tensor::scalar(n[x.0].value.data().iter().map(|v| v * v).sum::<f64>().sqrt()));
        self.push("l2_norm", out, Op::L2Norm(x))
    }

    fn per_sample(&self, x: Var, name: &str, f: impl Fn(&[f64]) -> f64) -> Result<Tensor> {
        self.with(|n| -> Result<Tensor> {
            let v = &n[x.0].value;
            ensure!(v.rank() >= 1 && v.shape()[0] > 0, "{name}: needs a leading batch axis, got {:?}", v.shape());
            let b = v.shape()[0];
            let per = v.numel() / b;
            let data = if per == 0 {
                vec![0.0; b]
            } else {
                v.data().chunks(per).map(f).collect()
            };
            Tensor::new(vec![b], data)
        })
    }

    /// `[B, ...] -> [B]` sum over all but the leading axis.
    pub fn sum_per_sample(&self, x: Var) -> Result<Var> {
        let out = self.per_sample(x, "sum_per_sample", |c| c.iter().sum())?;
        self.push("sum_per_sample", out, Op::SumPerSample(x))
    }

    pub fn l1_norm_per_sample(&self, x: Var) -> Result<Var> {
        let out = self.per_sample(x, "l1_norm_per_sample", |c| c.iter().map(|v| v.abs()).sum())?;
        self.push("l1_norm_per_sample", out, Op::L1PerSample(x))
    }

    pub fn l2_norm_per_sample(&self, x: Var) -> Result<Var> {
        let out = self.per_sample(x, "l2_norm_per_sample", |c| c.iter().map(|v| v * v).sum::<f64>().sqrt())?;
        self.push("l2_norm_per_sample", out, Op::L2PerSample(x))
    }

    /// Scale each row (last axis) to unit Euclidean length.
    pub fn normalize_rows(&self, x: Var) -> Result<Var> {
        let (out, norms) = self.with(|n| -> Result<(Tensor, Vec<f64>)> {
            let v = &n[x.0].value;
            ensure!(v.rank() >= 1, "normalize_rows: rank-0 input");
            let d = *v.shape().last().unwrap();
            let mut out = v.clone();
            let mut norms = Vec::new();
            for row in out.data_mut().chunks_mut(d.max(1)) {
                let nrm = row.iter().map(|e| e * e).sum::<f64>().sqrt().max(NORM_EPS);
                for e in row.iter_mut() {
                    *e /= nrm;
                }
                norms.push(nrm);
            }
            Ok((out, norms))
        })?;
        self.push("normalize_rows", out, Op::NormalizeRows { x, norms })
    }

    /// Magnitudes of the unnormalized 2-D DFT of every `H x W` plane
    /// (the last two axes).
    pub fn fft2_magnitudes(&self, x: Var) -> Result<Var> {
        let (out, spectrum) = self.with(|n| -> Result<(Tensor, Vec<Complex64>)> {
            let v = &n[x.0].value;
            ensure!(v.rank() >= 2, "fft2_magnitudes: need at least 2 axes, got {:?}", v.shape());
            let (h, w) = (v.shape()[v.rank() - 2], v.shape()[v.rank() - 1]);
            ensure!(h > 0 && w > 0, "fft2_magnitudes: empty plane {:?}", v.shape());
            let mut spectrum = Vec::with_capacity(v.numel());
            for plane in v.data().chunks(h * w) {
                spectrum.extend(kernels::fft2_real(plane, h, w));
            }
            let mags = spectrum.iter().map(|c| c.norm()).collect();
            Ok((Tensor::new(v.shape().to_vec(), mags)?, spectrum))
        })?;
        self.push("fft2_magnitudes", out, Op::Fft2Mag { x, spectrum })
    }

    // ---- backward ------------------------------------------------------

    /// Reverse sweep from a scalar loss. Fills gradients for every leaf that
    /// requires them; a second call needs [`Tape::reset_grads`] first.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        ensure!(inner.grads.is_none(), "backward called twice without reset_grads");
        let Inner { nodes, grads } = &mut *inner;
        ensure!(loss.0 < nodes.len(), "backward: unknown variable");
        ensure!(
            nodes[loss.0].value.rank() == 0,
            "backward: loss must have shape [], got {:?}",
            nodes[loss.0].value.shape()
        );
        let mut acc: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        acc[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = acc[id].take() else { continue };
            for (input, contrib) in node_backward(nodes, id, &g)? {
                match &mut acc[input.0] {
                    Some(existing) => {
                        for (e, c) in existing.data_mut().iter_mut().zip(contrib.data()) {
                            *e += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        // Only leaf gradients are retained.
        for (i, node) in nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                acc[i] = None;
            }
        }
        *grads = Some(acc);
        Ok(())
    }

    /// Gradient of the last backward pass w.r.t. a leaf. Leaves that require
    /// gradients but were unreachable from the loss get zeros.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let inner = self.inner.borrow();
        let grads = inner.grads.as_ref()?;
        let node = &inner.nodes[v.0];
        if !node.requires_grad || !matches!(node.op, Op::Leaf) {
            return None;
        }
        Some(grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(node.value.shape())))
    }

    pub fn reset_grads(&self) {
        self.inner.borrow_mut().grads = None;
    }
}

fn transpose_last2(v: &Tensor) -> Result<Tensor> {
    let (bs, r, c) = match v.shape() {
        &[r, c] => (1, r, c),
        &[b, r, c] => (b, r, c),
        s => return Err(Error::contract(format!("transpose: expected rank 2 or 3, got {s:?}"))),
    };
    let mut out = vec![0.0; v.numel()];
    for b in 0..bs {
        let src = &v.data()[b * r * c..(b + 1) * r * c];
        let dst = &mut out[b * r * c..(b + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    let shape = if v.rank() == 2 { vec![c, r] } else { vec![bs, c, r] };
    Tensor::new(shape, out)
}

/// Gradient of a broadcast operand: reduce to a scalar when the operand was
/// rank-0 and the output was not.
fn reduce_like(g: Tensor, operand: &Tensor) -> Tensor {
    if operand.rank() == 0 && g.rank() != 0 {
        Tensor::scalar(g.sum())
    } else {
        g
    }
}

fn broadcast_get(t: &Tensor, i: usize) -> f64 {
    if t.rank() == 0 {
        t.data()[0]
    } else {
        t.data()[i]
    }
}

fn node_backward(nodes: &[Node], id: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
    let node = &nodes[id];
    let val = |v: Var| &nodes[v.0].value;
    let needs = |v: Var| nodes[v.0].requires_grad;
    let out = &node.value;
    let mut res = Vec::new();
    match &node.op {
        Op::Leaf => {}
        Op::Binary(kind, a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let n = g.numel();
            let gd = g.data();
            if needs(*a) {
                let ga: Vec<f64> = match kind {
                    Bin::Add | Bin::Sub => gd.to_vec(),
                    Bin::Mul => (0..n).map(|i| gd[i] * broadcast_get(bv, i)).collect(),
                    Bin::Div => (0..n).map(|i| gd[i] / broadcast_get(bv, i)).collect(),
                };
                res.push((*a, reduce_like(Tensor::new(g.shape().to_vec(), ga)?, av)));
            }
            if needs(*b) {
                let gb: Vec<f64> = match kind {
                    Bin::Add => gd.to_vec(),
                    Bin::Sub => gd.iter().map(|v| -v).collect(),
                    Bin::Mul => (0..n).map(|i| gd[i] * broadcast_get(av, i)).collect(),
                    Bin::Div => (0..n)
                        .map(|i| {
                            let d = broadcast_get(bv, i);
                            -gd[i] * broadcast_get(av, i) / (d * d)
                        })
                        .collect(),
                };
                res.push((*b, reduce_like(Tensor::new(g.shape().to_vec(), gb)?, bv)));
            }
        }
        Op::Unary(kind, x) => {
            let xv = val(*x);
            let gx: Vec<f64> = g
                .data()
                .iter()
                .zip(xv.data())
                .zip(out.data())
                .map(|((&gv, &xi), &yi)| match *kind {
                    Unary::Relu => {
                        if xi > 0.0 {
                            gv
                        } else {
                            0.0
                        }
                    }
                    Unary::LeakyRelu(s) => {
                        if xi > 0.0 {
                            gv
                        } else {
                            gv * s
                        }
                    }
                    Unary::Gelu => {
                        let t = (GELU_C * (xi + GELU_A * xi * xi * xi)).tanh();
                        gv * (0.5 * (1.0 + t) + 0.5 * xi * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * xi * xi))
                    }
                    Unary::Sigmoid => gv * yi * (1.0 - yi),
                    Unary::Exp => gv * yi,
                    Unary::Log => gv / xi,
                    Unary::Scale(c) => gv * c,
                    Unary::AddScalar(_) => gv,
                })
                .collect();
            res.push((*x, Tensor::new(xv.shape().to_vec(), gx)?));
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let s = av.shape();
            let (bs, m, k) = if s.len() == 2 { (1, s[0], s[1]) } else { (s[0], s[1], s[2]) };
            let nn = *bv.shape().last().unwrap();
            if needs(*a) {
                // dA = g @ B^T
                let mut ga = vec![0.0; av.numel()];
                for i in 0..bs {
                    kernels::gemm(
                        m,
                        nn,
                        k,
                        &g.data()[i * m * nn..(i + 1) * m * nn],
                        (nn, 1),
                        &bv.data()[i * k * nn..(i + 1) * k * nn],
                        (1, nn),
                        0.0,
                        &mut ga[i * m * k..(i + 1) * m * k],
                        (k, 1),
                    );
                }
                res.push((*a, Tensor::new(s.to_vec(), ga)?));
            }
            if needs(*b) {
                // dB = A^T @ g
                let mut gb = vec![0.0; bv.numel()];
                for i in 0..bs {
                    kernels::gemm(
                        k,
                        m,
                        nn,
                        &av.data()[i * m * k..(i + 1) * m * k],
                        (1, k),
                        &g.data()[i * m * nn..(i + 1) * m * nn],
                        (nn, 1),
                        0.0,
                        &mut gb[i * k * nn..(i + 1) * k * nn],
                        (nn, 1),
                    );
                }
                res.push((*b, Tensor::new(bv.shape().to_vec(), gb)?));
            }
        }
        Op::Transpose(x) => res.push((*x, transpose_last2(g)?)),
        Op::Conv2d { x, w, b, geom } => {
            let (xv, wv) = (val(*x), val(*w));
            let c_out = wv.shape()[0];
            let batch = xv.shape()[0];
            let need_db = b.is_some_and(needs);
            let (dx, dw, db) = kernels::conv2d_backward(
                xv.data(),
                batch,
                geom,
                wv.data(),
                c_out,
                g.data(),
                needs(*x),
                needs(*w),
                need_db,
            );
            if let Some(dx) = dx {
                res.push((*x, Tensor::new(xv.shape().to_vec(), dx)?));
            }
            if let Some(dw) = dw {
                res.push((*w, Tensor::new(wv.shape().to_vec(), dw)?));
            }
            if let (Some(bv), Some(db)) = (b, db) {
                res.push((*bv, Tensor::new(vec![c_out], db)?));
            }
        }
        Op::Depthwise { x, w, b, k, pad } => {
            let (xv, wv) = (val(*x), val(*w));
            let s = xv.shape();
            let (dx, dw, db) =
                kernels::depthwise_backward(xv.data(), s[0], s[1], s[2], s[3], *k, *pad, wv.data(), g.data());
            if needs(*x) {
                res.push((*x, Tensor::new(s.to_vec(), dx)?));
            }
            if needs(*w) {
                res.push((*w, Tensor::new(wv.shape().to_vec(), dw)?));
            }
            if let Some(bv) = b {
                if needs(*bv) {
                    res.push((*bv, Tensor::new(vec![s[1]], db)?));
                }
            }
        }
        Op::Upsample2x(x) => {
            let xv = val(*x);
            let (h, w) = (xv.shape()[2], xv.shape()[3]);
            let mut gx = vec![0.0; xv.numel()];
            for (p, dst) in gx.chunks_mut(h * w).enumerate() {
                let src = &g.data()[p * 4 * h * w..(p + 1) * 4 * h * w];
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                    }
                }
            }
            res.push((*x, Tensor::new(xv.shape().to_vec(), gx)?));
        }
        Op::Softmax(x) => {
            let d = *out.shape().last().unwrap();
            let mut gx = vec![0.0; out.numel()];
            for ((dst, s), gr) in gx.chunks_mut(d).zip(out.data().chunks(d)).zip(g.data().chunks(d)) {
                let dot: f64 = s.iter().zip(gr).map(|(a, b)| a * b).sum();
                for i in 0..d {
                    dst[i] = s[i] * (gr[i] - dot);
                }
            }
            res.push((*x, Tensor::new(out.shape().to_vec(), gx)?));
        }
        Op::LayerNorm { x, inv_std } => {
            let d = *out.shape().last().unwrap();
            let mut gx = vec![0.0; out.numel()];
            for (r, ((dst, y), gr)) in gx
                .chunks_mut(d)
                .zip(out.data().chunks(d))
                .zip(g.data().chunks(d))
                .enumerate()
            {
                let mg = gr.iter().sum::<f64>() / d as f64;
                let mgy = gr.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                for i in 0..d {
                    dst[i] = inv_std[r] * (gr[i] - mg - y[i] * mgy);
                }
            }
            res.push((*x, Tensor::new(out.shape().to_vec(), gx)?));
        }
        Op::GlobalAvgPool(x) => {
            let xv = val(*x);
            let hw = xv.shape()[2] * xv.shape()[3];
            let mut gx = vec![0.0; xv.numel()];
            for (dst, &gv) in gx.chunks_mut(hw).zip(g.data()) {
                dst.fill(gv / hw as f64);
            }
            res.push((*x, Tensor::new(xv.shape().to_vec(), gx)?));
        }
        Op::Concat(xs) => {
            let s = out.shape();
            let (b, c_total, hw) = (s[0], s[1], s[2] * s[3]);
            let mut offset = 0;
            for v in xs {
                let vs = val(*v).shape().to_vec();
                let c = vs[1];
                if needs(*v) {
                    let mut gx = Vec::with_capacity(b * c * hw);
                    for bi in 0..b {
                        let start = (bi * c_total + offset) * hw;
                        gx.extend_from_slice(&g.data()[start..start + c * hw]);
                    }
                    res.push((*v, Tensor::new(vs, gx)?));
                }
                offset += c;
            }
        }
        Op::Reshape(x) => res.push((*x, g.clone().reshape(val(*x).shape())?)),
        Op::Sum(x) => {
            let gv = g.data()[0];
            res.push((*x, Tensor::full(val(*x).shape(), gv)));
        }
        Op::Mean(x) => {
            let xv = val(*x);
            let gv = g.data()[0] / xv.numel() as f64;
            res.push((*x, Tensor::full(xv.shape(), gv)));
        }
        Op::L1Norm(x) => {
            let gv = g.data()[0];
            res.push((*x, val(*x).map(|v| gv * sign(v))));
        }
        Op::L2Norm(x) => {
            let nrm = out.data()[0];
            let gv = g.data()[0];
            let xv = val(*x);
            let gx = if nrm > 0.0 { xv.map(|v| gv * v / nrm) } else { Tensor::zeros(xv.shape()) };
            res.push((*x, gx));
        }
        Op::SumPerSample(x) | Op::L1PerSample(x) | Op::L2PerSample(x) => {
            let xv = val(*x);
            let b = xv.shape()[0];
            let per = xv.numel() / b;
            let mut gx = vec![0.0; xv.numel()];
            for i in 0..b {
                let gv = g.data()[i];
                let src = &xv.data()[i * per..(i + 1) * per];
                let dst = &mut gx[i * per..(i + 1) * per];
                match &node.op {
                    Op::SumPerSample(_) => dst.fill(gv),
                    Op::L1PerSample(_) => {
                        for (d, &v) in dst.iter_mut().zip(src) {
                            *d = gv * sign(v);
                        }
                    }
                    _ => {
                        let nrm = out.data()[i];
                        if nrm > 0.0 {
                            for (d, &v) in dst.iter_mut().zip(src) {
                                *d = gv * v / nrm;
                            }
                        }
                    }
                }
            }
            res.push((*x, Tensor::new(xv.shape().to_vec(), gx)?));
        }
        Op::NormalizeRows { x, norms } => {
            let d = *out.shape().last().unwrap();
            let mut gx = vec![0.0; out.numel()];
            for (r, ((dst, y), gr)) in gx
                .chunks_mut(d)
                .zip(out.data().chunks(d))
                .zip(g.data().chunks(d))
                .enumerate()
            {
                let nrm = norms[r];
                if nrm <= NORM_EPS {
                    for i in 0..d {
                        dst[i] = gr[i] / nrm;
                    }
                } else {
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for i in 0..d {
                        dst[i] = (gr[i] - y[i] * dot) / nrm;
                    }
                }
            }
            res.push((*x, Tensor::new(out.shape().to_vec(), gx)?));
        }
        Op::Fft2Mag { x, spectrum } => {
            let s = out.shape();
            let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
            let mut gx = vec![0.0; out.numel()];
            for (p, dst) in gx.chunks_mut(h * w).enumerate() {
                let range = p * h * w..(p + 1) * h * w;
                let spec = &spectrum[range.clone()];
                let mags = &out.data()[range.clone()];
                let gm = &g.data()[range];
                let peak = mags.iter().cloned().fold(0.0, f64::max);
                let tiny = 1e-13 * peak;
                let mut buf: Vec<Complex64> = spec
                    .iter()
                    .zip(mags)
                    .zip(gm)
                    .map(|((f, &m), &gv)| {
                        if m > tiny && m > 0.0 {
                            f * (gv / m)
                        } else {
                            Complex64::new(0.0, 0.0)
                        }
                    })
                    .collect();
                kernels::fft2_in_place(&mut buf, h, w, true);
                for (d, c) in dst.iter_mut().zip(&buf) {
                    *d = c.re;
                }
            }
            res.push((*x, Tensor::new(s.to_vec(), gx)?));
        }
    }
    Ok(res.into_iter().filter(|(v, _)| needs(*v)).collect())
}
