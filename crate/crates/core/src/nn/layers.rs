use candle_core::{Tensor, Var, D};
use rand::Rng;

use super::{fused, param, ParamStore};
use crate::error::Result;

/// Numerically stable softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    fused::softmax(x)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// `x @ w + b` over the last dimension of an arbitrary-rank input.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Var,
    pub b: Var,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            w: store.xavier(&format!("{name}.w"), fan_in, fan_out, rng)?,
            b: store.zeros(&format!("{name}.b"), fan_out)?,
        })
    }

    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Self {
            w: store.zeros(&format!("{name}.w"), (fan_in, fan_out))?,
            b: store.zeros(&format!("{name}.b"), fan_out)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_t(x, true)
    }

    pub fn forward_t(&self, x: &Tensor, track: bool) -> Result<Tensor> {
        let w = param(&self.w, track);
        let b = param(&self.b, track);
        let dims = x.dims();
        let fan_in = dims[dims.len() - 1];
        let rows = x.elem_count() / fan_in;
        let y = x.reshape((rows, fan_in))?.matmul(&w)?.broadcast_add(&b)?;
        let mut out_dims = dims.to_vec();
        *out_dims.last_mut().unwrap() = w.dim(1)?;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Var,
    pub beta: Var,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.ones(&format!("{name}.g"), dim)?,
            beta: store.zeros(&format!("{name}.b"), dim)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_t(x, true)
    }

    pub fn forward_t(&self, x: &Tensor, track: bool) -> Result<Tensor> {
        fused::layer_norm(x, &param(&self.gamma, track), &param(&self.beta, track), self.eps)
    }
}

/// Two-layer perceptron with GELU.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, out, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_t(x, true)
    }

    pub fn forward_t(&self, x: &Tensor, track: bool) -> Result<Tensor> {
        let h = fused::gelu(&self.fc1.forward_t(x, track)?)?;
        self.fc2.forward_t(&h, track)
    }
}

/// Multi-head scaled dot-product attention over `(B, N, D)` tensors.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng)?,
            o: Linear::new(store, &format!("{name}.o"), dim, dim, rng)?,
            heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        Ok(x
            .reshape((b, n, self.heads, d / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// Queries from `q_in`, keys from `k_in`, values from `v_in`.
    pub fn forward(&self, q_in: &Tensor, k_in: &Tensor, v_in: &Tensor) -> Result<Tensor> {
        let (b, nq, d) = q_in.dims3()?;
        let q = self.split_heads(&self.q.forward(q_in)?)?;
        let k = self.split_heads(&self.k.forward(k_in)?)?;
        let v = self.split_heads(&self.v.forward(v_in)?)?;
        let scale = 1.0 / ((d / self.heads) as f64).sqrt();
        let scores = q.matmul(&k.transpose(2, 3)?.contiguous()?)?;
        let out = fused::softmax_scaled(&scores, scale)?
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, nq, d))?;
        self.o.forward(&out)
    }
}

#[cfg(test)]
mod tests {
    use candle_core::{DType, Device};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0], [1000.0, 1000.0, -5.0]], &Device::Cpu).unwrap();
        let s = softmax_last(&x).unwrap().sum(1).unwrap().to_vec1::<f64>().unwrap();
        for v in s {
            assert!((v - 1.0).abs() < 1e-12);
        }
        let ls = log_softmax_last(&x).unwrap().exp().unwrap();
        let direct = softmax_last(&x).unwrap();
        let diff = (ls - direct).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f64>().unwrap() < 1e-12);
    }

    #[test]
    fn layer_norm_normalizes() {
        let mut store = ParamStore::new(DType::F64);
        let ln = LayerNorm::new(&mut store, "ln", 4).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 4.0]], &Device::Cpu).unwrap();
        let y = ln.forward(&x).unwrap().to_vec2::<f64>().unwrap();
        let mean: f64 = y[0].iter().sum::<f64>() / 4.0;
        let var: f64 = y[0].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn linear_keeps_leading_dims() {
        let mut store = ParamStore::new(DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::new(&mut store, "l", 3, 5, &mut rng).unwrap();
        let x = Tensor::zeros((2, 4, 3), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(lin.forward(&x).unwrap().dims(), &[2, 4, 5]);
    }

    #[test]
    fn attention_is_key_permutation_invariant() {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let attn = Attention::new(&mut store, "a", 8, 2, &mut rng).unwrap();
        let q = Tensor::randn(0.0f64, 1.0, (1, 3, 8), &Device::Cpu).unwrap();
        let kv = Tensor::randn(0.0f64, 1.0, (1, 5, 8), &Device::Cpu).unwrap();
        let perm = Tensor::new(&[4u32, 2, 0, 3, 1], &Device::Cpu).unwrap();
        let kv_p = kv.index_select(&perm, 1).unwrap();
        let a = attn.forward(&q, &kv, &kv).unwrap();
        let b = attn.forward(&q, &kv_p, &kv_p).unwrap();
        let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f64>().unwrap() < 1e-12);
    }
}
