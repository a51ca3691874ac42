//! Single-pass CPU kernels with analytic backward passes for the hot
//! elementwise, row-wise and spatial ops. The composed versions build long op
//! chains whose temporaries dominate training time.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, DType, Layout, Shape, Tensor, WithDType};
use num_traits::{Float, FromPrimitive};

use crate::error::Result;

type CResult<T> = candle_core::Result<T>;

trait Real: Float + FromPrimitive + WithDType + std::iter::Sum + std::ops::AddAssign {}
impl Real for f32 {}
impl Real for f64 {}

fn cst<T: Real>(v: f64) -> T {
    <T as FromPrimitive>::from_f64(v).unwrap()
}

fn contiguous<'a, T>(v: &'a [T], l: &Layout, op: &str) -> CResult<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => candle_core::bail!("{op} needs a contiguous input"),
    }
}

fn row_len(l: &Layout) -> usize {
    (*l.shape().dims().last().unwrap_or(&1)).max(1)
}

fn host<T: Real>(t: &Tensor) -> CResult<Vec<T>> {
    t.flatten_all()?.to_vec1::<T>()
}

fn tensor<T: Real>(v: Vec<T>, like: &Tensor) -> CResult<Tensor> {
    Tensor::from_vec(v, like.shape(), like.device())
}

macro_rules! dispatch1 {
    ($s:expr, $l:expr, $name:expr, $f:ident $(, $arg:expr)*) => {
        match $s {
            CpuStorage::F32(v) => CpuStorage::F32($f::<f32>(contiguous(v, $l, $name)?, row_len($l) $(, $arg)*)),
            CpuStorage::F64(v) => CpuStorage::F64($f::<f64>(contiguous(v, $l, $name)?, row_len($l) $(, $arg)*)),
            _ => candle_core::bail!("{}: unsupported dtype", $name),
        }
    };
}

macro_rules! dispatch2 {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, $name:expr, $f:ident $(, $arg:expr)*) => {{
        if $l1.shape() != $l2.shape() {
            candle_core::bail!("{}: shape mismatch {:?} vs {:?}", $name, $l1.shape(), $l2.shape());
        }
        match ($s1, $s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => CpuStorage::F32($f::<f32>(
                contiguous(a, $l1, $name)?,
                contiguous(b, $l2, $name)?,
                row_len($l1) $(, $arg)*,
            )),
            (CpuStorage::F64(a), CpuStorage::F64(b)) => CpuStorage::F64($f::<f64>(
                contiguous(a, $l1, $name)?,
                contiguous(b, $l2, $name)?,
                row_len($l1) $(, $arg)*,
            )),
            _ => candle_core::bail!("{}: unsupported dtype", $name),
        }
    }};
}

// GELU, tanh approximation.

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

fn gelu_fwd<T: Real>(x: &[T], _n: usize) -> Vec<T> {
    let (k, c, half, one) = (cst::<T>(GELU_K), cst::<T>(GELU_C), cst::<T>(0.5), T::one());
    x.iter()
        .map(|&v| half * v * (one + (k * (v + c * v * v * v)).tanh()))
        .collect()
}

fn gelu_bwd<T: Real>(x: &[T], g: &[T], _n: usize) -> Vec<T> {
    let (k, c, half, one) = (cst::<T>(GELU_K), cst::<T>(GELU_C), cst::<T>(0.5), T::one());
    let three = cst::<T>(3.0);
    x.iter()
        .zip(g)
        .map(|(&v, &gi)| {
            let t = (k * (v + c * v * v * v)).tanh();
            let dt = (one - t * t) * k * (one + three * c * v * v);
            gi * (half * (one + t) + half * v * dt)
        })
        .collect()
}

struct Gelu;
struct GeluGrad;

impl CustomOp1 for Gelu {
    fn name(&self) -> &'static str {
        "fused-gelu"
    }
    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        Ok((dispatch1!(s, l, self.name(), gelu_fwd), l.shape().clone()))
    }
    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        Ok(Some(arg.contiguous()?.apply_op2_no_bwd(&grad.contiguous()?, &GeluGrad)?))
    }
}

impl CustomOp2 for GeluGrad {
    fn name(&self) -> &'static str {
        "fused-gelu-grad"
    }
    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        Ok((dispatch2!(s1, l1, s2, l2, self.name(), gelu_bwd), l1.shape().clone()))
    }
}

/// Tanh-approximated GELU.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Gelu)?)
}

// Softmax of a scaled input over the last axis.

fn softmax_fwd<T: Real>(x: &[T], n: usize, scale: f64) -> Vec<T> {
    let s = cst::<T>(scale);
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), <T as Float>::max);
        let start = out.len();
        let mut sum = T::zero();
        for &v in row {
            let e = ((v - max) * s).exp();
            sum += e;
            out.push(e);
        }
        let inv = T::one() / sum;
        for o in &mut out[start..] {
            *o = *o * inv;
        }
    }
    out
}

fn softmax_bwd<T: Real>(p: &[T], g: &[T], n: usize, scale: f64) -> Vec<T> {
    let s = cst::<T>(scale);
    let mut out = Vec::with_capacity(p.len());
    for (pr, gr) in p.chunks_exact(n).zip(g.chunks_exact(n)) {
        let dot: T = pr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        out.extend(pr.iter().zip(gr).map(|(&a, &b)| s * a * (b - dot)));
    }
    out
}

struct Softmax(f64);
struct SoftmaxGrad(f64);

impl CustomOp1 for Softmax {
    fn name(&self) -> &'static str {
        "fused-softmax"
    }
    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        Ok((dispatch1!(s, l, self.name(), softmax_fwd, self.0), l.shape().clone()))
    }
    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        Ok(Some(res.contiguous()?.apply_op2_no_bwd(&grad.contiguous()?, &SoftmaxGrad(self.0))?))
    }
}

impl CustomOp2 for SoftmaxGrad {
    fn name(&self) -> &'static str {
        "fused-softmax-grad"
    }
    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        Ok((dispatch2!(s1, l1, s2, l2, self.name(), softmax_bwd, self.0), l1.shape().clone()))
    }
}

/// `softmax(scale * x)` over the last axis.
pub fn softmax_scaled(x: &Tensor, scale: f64) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Softmax(scale))?)
}

pub fn softmax(x: &Tensor) -> Result<Tensor> {
    softmax_scaled(x, 1.0)
}

// Layer normalization with affine parameters over the last axis.

fn ln_moments<T: Real>(row: &[T], eps: T) -> (T, T) {
    let n = T::from_usize(row.len()).unwrap();
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, T::one() / (var + eps).sqrt())
}

fn layer_norm_fwd<T: Real>(x: &[T], gamma: &[T], beta: &[T], eps: f64) -> Vec<T> {
    let n = gamma.len();
    let eps = cst::<T>(eps);
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(n) {
        let (m, inv) = ln_moments(row, eps);
        out.extend(row.iter().zip(gamma).zip(beta).map(|((&v, &g), &b)| (v - m) * inv * g + b));
    }
    out
}

fn layer_norm_bwd<T: Real>(x: &[T], gamma: &[T], g: &[T], eps: f64) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = gamma.len();
    let nt = T::from_usize(n).unwrap();
    let eps = cst::<T>(eps);
    let mut dx = Vec::with_capacity(x.len());
    let mut dgamma = vec![T::zero(); n];
    let mut dbeta = vec![T::zero(); n];
    let mut xh = vec![T::zero(); n];
    for (row, gr) in x.chunks_exact(n).zip(g.chunks_exact(n)) {
        let (m, inv) = ln_moments(row, eps);
        let mut gs = T::zero();
        let mut gxs = T::zero();
        for i in 0..n {
            xh[i] = (row[i] - m) * inv;
            let gh = gr[i] * gamma[i];
            gs += gh;
            gxs += gh * xh[i];
            dgamma[i] += gr[i] * xh[i];
            dbeta[i] += gr[i];
        }
        let (gm, gxm) = (gs / nt, gxs / nt);
        for i in 0..n {
            dx.push(inv * (gr[i] * gamma[i] - gm - xh[i] * gxm));
        }
    }
    (dx, dgamma, dbeta)
}

struct LayerNormOp(f64);

impl CustomOp3 for LayerNormOp {
    fn name(&self) -> &'static str {
        "fused-layer-norm"
    }
    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let name = self.name();
        if l2.shape().dims() != [row_len(l1)] || l3.shape() != l2.shape() {
            candle_core::bail!("{name}: affine parameters do not match the last axis");
        }
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(b)) => CpuStorage::F32(layer_norm_fwd(
                contiguous(x, l1, name)?,
                contiguous(g, l2, name)?,
                contiguous(b, l3, name)?,
                self.0,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(b)) => CpuStorage::F64(layer_norm_fwd(
                contiguous(x, l1, name)?,
                contiguous(g, l2, name)?,
                contiguous(b, l3, name)?,
                self.0,
            )),
            _ => candle_core::bail!("{name}: unsupported dtype"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        fn run<T: Real>(x: &Tensor, gamma: &Tensor, beta: &Tensor, grad: &Tensor, eps: f64) -> CResult<(Tensor, Tensor, Tensor)> {
            let (dx, dg, db) = layer_norm_bwd(&host::<T>(x)?, &host::<T>(gamma)?, &host::<T>(grad)?, eps);
            Ok((tensor(dx, x)?, tensor(dg, gamma)?, tensor(db, beta)?))
        }
        let (dx, dg, db) = match x.dtype() {
            DType::F32 => run::<f32>(x, gamma, beta, grad, self.0)?,
            DType::F64 => run::<f64>(x, gamma, beta, grad, self.0)?,
            d => candle_core::bail!("{}: unsupported dtype {d:?}", self.name()),
        };
        Ok((Some(dx), Some(dg), Some(db)))
    }
}

/// `gamma * (x - mean) / sqrt(var + eps) + beta` over the last axis.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(x.contiguous()?
        .apply_op3(&gamma.contiguous()?, &beta.contiguous()?, LayerNormOp(eps))?)
}

// Depthwise 3x3 convolution with zero padding over (N, H, W, C).

fn dw_fwd<T: Real>(x: &[T], w: &[T], b: &[T], dims: (usize, usize, usize, usize)) -> Vec<T> {
    let (n, h, wd, c) = dims;
    let mut out = Vec::with_capacity(x.len());
    for img in 0..n {
        let base = img * h * wd * c;
        for r in 0..h {
            for col in 0..wd {
                let start = out.len();
                out.extend_from_slice(b);
                for k in 0..9 {
                    let (sr, sc) = (r as isize + k as isize / 3 - 1, col as isize + k as isize % 3 - 1);
                    if sr < 0 || sc < 0 || sr >= h as isize || sc >= wd as isize {
                        continue;
                    }
                    let src = base + (sr as usize * wd + sc as usize) * c;
                    let wk = &w[k * c..(k + 1) * c];
                    for ch in 0..c {
                        out[start + ch] += wk[ch] * x[src + ch];
                    }
                }
            }
        }
    }
    out
}

fn dw_bwd<T: Real>(x: &[T], w: &[T], g: &[T], dims: (usize, usize, usize, usize)) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (n, h, wd, c) = dims;
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); 9 * c];
    let mut db = vec![T::zero(); c];
    for img in 0..n {
        let base = img * h * wd * c;
        for r in 0..h {
            for col in 0..wd {
                let o = base + (r * wd + col) * c;
                for ch in 0..c {
                    db[ch] += g[o + ch];
                }
                for k in 0..9 {
                    let (sr, sc) = (r as isize + k as isize / 3 - 1, col as isize + k as isize % 3 - 1);
                    if sr < 0 || sc < 0 || sr >= h as isize || sc >= wd as isize {
                        continue;
                    }
                    let src = base + (sr as usize * wd + sc as usize) * c;
                    for ch in 0..c {
                        dw[k * c + ch] += g[o + ch] * x[src + ch];
                        dx[src + ch] += g[o + ch] * w[k * c + ch];
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

struct DepthwiseOp;

impl CustomOp3 for DepthwiseOp {
    fn name(&self) -> &'static str {
        "fused-depthwise3x3"
    }
    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let name = self.name();
        let d = l1.shape().dims();
        if d.len() != 4 || l2.shape().dims() != [9, d[3]] || l3.shape().dims() != [d[3]] {
            candle_core::bail!("{name}: expected (N, H, W, C), (9, C), (C)");
        }
        let dims = (d[0], d[1], d[2], d[3]);
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(w), CpuStorage::F32(b)) => CpuStorage::F32(dw_fwd(
                contiguous(x, l1, name)?,
                contiguous(w, l2, name)?,
                contiguous(b, l3, name)?,
                dims,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(w), CpuStorage::F64(b)) => CpuStorage::F64(dw_fwd(
                contiguous(x, l1, name)?,
                contiguous(w, l2, name)?,
                contiguous(b, l3, name)?,
                dims,
            )),
            _ => candle_core::bail!("{name}: unsupported dtype"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        fn run<T: Real>(x: &Tensor, w: &Tensor, b: &Tensor, grad: &Tensor) -> CResult<(Tensor, Tensor, Tensor)> {
            let (n, h, wd, c) = x.dims4()?;
            let (dx, dw, db) = dw_bwd(&host::<T>(x)?, &host::<T>(w)?, &host::<T>(grad)?, (n, h, wd, c));
            Ok((tensor(dx, x)?, tensor(dw, w)?, tensor(db, b)?))
        }
        let (dx, dw, db) = match x.dtype() {
            DType::F32 => run::<f32>(x, w, b, grad)?,
            DType::F64 => run::<f64>(x, w, b, grad)?,
            d => candle_core::bail!("{}: unsupported dtype {d:?}", self.name()),
        };
        Ok((Some(dx), Some(dw), Some(db)))
    }
}

/// Per-channel 3x3 convolution over `(N, H, W, C)` with zero padding:
/// `y[r, c] = b + sum_k w[k] * x[r + k / 3 - 1, c + k % 3 - 1]`.
pub fn depthwise3x3(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op3(&w.contiguous()?, &b.contiguous()?, DepthwiseOp)?)
}
