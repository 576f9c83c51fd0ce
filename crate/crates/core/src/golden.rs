//! Functional reference model of one transformer layer with low-rank adapters.
//!
//! This is the correctness oracle for the simulated dataflow: the simulator
//! must reproduce [`attention_forward`] (and [`layer_forward`] when the layer
//! has a feed-forward block) bit-exactly in fixed point.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arith::Arith;
use crate::config::{MatrixId, ModelSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

/// Low-rank factors: `b` is `d_out × r`, `a` is `r × d_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter<W> {
    pub b: Tensor2D<W>,
    pub a: Tensor2D<W>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<W> {
    pub w: Tensor2D<W>,
    pub adapter: Option<Adapter<W>>,
}

impl<W: Copy> Linear<W> {
    pub fn d_out(&self) -> usize {
        self.w.rows()
    }

    pub fn d_in(&self) -> usize {
        self.w.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<W> {
    pub num_heads: usize,
    pub head_dim: usize,
    pub lora_scale: f64,
    pub ffn_gated: bool,
    pub matrices: BTreeMap<MatrixId, Linear<W>>,
}

impl<W: Copy> LayerWeights<W> {
    pub fn hidden_dim(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn matrix(&self, id: MatrixId) -> Result<&Linear<W>> {
        self.matrices
            .get(&id)
            .ok_or_else(|| Error::DimensionMismatch(format!("layer has no `{id}` matrix")))
    }

    pub fn has_ffn(&self) -> bool {
        self.matrices.contains_key(&MatrixId::FfnDown)
    }
}

impl LayerWeights<()> {
    /// Shape-only weights for the timing-only datapath.
    pub fn shapes(model: &ModelSpec) -> Self {
        let r = model.lora.rank as usize;
        let matrices = model
            .layer_matrices()
            .into_iter()
            .map(|shape| {
                let (d_out, d_in) = (shape.d_out as usize, shape.d_in as usize);
                let adapter = model.lora.targets(shape.id).then(|| Adapter {
                    b: Tensor2D::zeros(d_out, r),
                    a: Tensor2D::zeros(r, d_in),
                });
                (shape.id, Linear { w: Tensor2D::zeros(d_out, d_in), adapter })
            })
            .collect();
        Self {
            num_heads: model.num_heads as usize,
            head_dim: model.head_dim as usize,
            lora_scale: model.lora.scale,
            ffn_gated: model.ffn_gated,
            matrices,
        }
    }
}

impl LayerWeights<f64> {
    /// Seeded synthetic weights for one layer of `model`. Frozen weights are
    /// uniform in ±1/√d_in; adapter factors are uniform in ±1/√d_in (A) and
    /// ±1/√r (B).
    pub fn random(model: &ModelSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = model.lora.rank as usize;
        let mut matrices = BTreeMap::new();
        for shape in model.layer_matrices() {
            let (d_out, d_in) = (shape.d_out as usize, shape.d_in as usize);
            let bound = 1.0 / (d_in as f64).sqrt();
            let w = Tensor2D::from_fn(d_out, d_in, |_, _| rng.gen_range(-bound..bound));
            let adapter = model.lora.targets(shape.id).then(|| {
                let rb = 1.0 / (r as f64).sqrt();
                Adapter {
                    b: Tensor2D::from_fn(d_out, r, |_, _| rng.gen_range(-rb..rb)),
                    a: Tensor2D::from_fn(r, d_in, |_, _| rng.gen_range(-bound..bound)),
                }
            });
            matrices.insert(shape.id, Linear { w, adapter });
        }
        Self {
            num_heads: model.num_heads as usize,
            head_dim: model.head_dim as usize,
            lora_scale: model.lora.scale,
            ffn_gated: model.ffn_gated,
            matrices,
        }
    }

    pub fn encode<A: Arith>(&self, arith: &A) -> LayerWeights<A::Word> {
        let enc = |t: &Tensor2D<f64>| t.map(|v| arith.encode(v));
        LayerWeights {
            num_heads: self.num_heads,
            head_dim: self.head_dim,
            lora_scale: self.lora_scale,
            ffn_gated: self.ffn_gated,
            matrices: self
                .matrices
                .iter()
                .map(|(&id, l)| {
                    let adapter = l.adapter.as_ref().map(|ad| Adapter { b: enc(&ad.b), a: enc(&ad.a) });
                    (id, Linear { w: enc(&l.w), adapter })
                })
                .collect(),
        }
    }
}

/// Seeded token-major input activations, uniform in ±1.
pub fn random_input(rows: usize, cols: usize, seed: u64) -> Tensor2D<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1234_abcd_0001);
    Tensor2D::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

/// `W·x + s·B·(A·x)` as unrounded accumulators. The frozen and low-rank
/// paths are evaluated separately and summed.
pub fn lora_smac_acc<A: Arith>(
    arith: &A,
    w: &Tensor2D<A::Word>,
    b: &Tensor2D<A::Word>,
    a: &Tensor2D<A::Word>,
    scale: f64,
    x: &[A::Word],
) -> Result<Vec<A::Acc>> {
    if w.cols() != x.len() {
        return Err(Error::DimensionMismatch(format!(
            "W is {}×{} but x has length {}",
            w.rows(),
            w.cols(),
            x.len()
        )));
    }
    let rank = a.rows();
    if b.cols() != rank || (rank > 0 && (b.rows() != w.rows() || a.cols() != w.cols())) {
        return Err(Error::DimensionMismatch(format!(
            "adapter B {}×{}, A {}×{} do not fit W {}×{}",
            b.rows(),
            b.cols(),
            a.rows(),
            a.cols(),
            w.rows(),
            w.cols()
        )));
    }
    let base = arith.smac(w, x);
    if rank == 0 {
        return Ok(base);
    }
    let low = arith.lora_smac(b, a, scale, x);
    Ok(base.into_iter().zip(low).map(|(p, q)| arith.acc_add(p, q)).collect())
}

/// `W·x + s·B·(A·x)`, rounded to words.
pub fn lora_smac<A: Arith>(
    arith: &A,
    w: &Tensor2D<A::Word>,
    b: &Tensor2D<A::Word>,
    a: &Tensor2D<A::Word>,
    scale: f64,
    x: &[A::Word],
) -> Result<Vec<A::Word>> {
    Ok(lora_smac_acc(arith, w, b, a, scale, x)?
        .into_iter()
        .map(|v| arith.finalize(v))
        .collect())
}

/// Applies a projection with its adapter, if any.
pub fn project<A: Arith>(
    arith: &A,
    lin: &Linear<A::Word>,
    scale: f64,
    x: &[A::Word],
) -> Result<Vec<A::Word>> {
    match &lin.adapter {
        Some(ad) => lora_smac(arith, &lin.w, &ad.b, &ad.a, scale, x),
        None => {
            if lin.w.cols() != x.len() {
                return Err(Error::DimensionMismatch(format!(
                    "W has {} columns but x has length {}",
                    lin.w.cols(),
                    x.len()
                )));
            }
            Ok(arith.smac(&lin.w, x).into_iter().map(|v| arith.finalize(v)).collect())
        }
    }
}

/// Cached key and value rows, one per processed token.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache<W> {
    pub k: Vec<Vec<W>>,
    pub v: Vec<Vec<W>>,
}

impl<W> Default for KvCache<W> {
    fn default() -> Self {
        Self { k: Vec::new(), v: Vec::new() }
    }
}

impl<W> KvCache<W> {
    pub fn len(&self) -> usize {
        self.k.len()
    }

    pub fn is_empty(&self) -> bool {
        self.k.is_empty()
    }
}

fn attend<A: Arith>(
    arith: &A,
    layer: &LayerWeights<A::Word>,
    q: &[A::Word],
    cache: &KvCache<A::Word>,
) -> Vec<A::Word> {
    let hd = layer.head_dim;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut ctx = Vec::with_capacity(layer.hidden_dim());
    for h in 0..layer.num_heads {
        let cols = h * hd..(h + 1) * hd;
        let scores: Vec<A::Word> = cache
            .k
            .iter()
            .map(|k| arith.score(&q[cols.clone()], &k[cols.clone()], scale))
            .collect();
        let probs = arith.softmax(&scores);
        let mut acc = vec![A::Acc::default(); hd];
        for (p, v) in probs.iter().zip(&cache.v) {
            arith.weighted_acc(&mut acc, *p, &v[cols.clone()]);
        }
        ctx.extend(acc.into_iter().map(|a| arith.finalize_weighted(a)));
    }
    ctx
}

/// One decode token: projects `x`, appends its key and value to `cache`, and
/// returns the attention output over all cached rows.
pub fn decode_step<A: Arith>(
    arith: &A,
    layer: &LayerWeights<A::Word>,
    cache: &mut KvCache<A::Word>,
    x: &[A::Word],
) -> Result<Vec<A::Word>> {
    if x.len() != layer.hidden_dim() {
        return Err(Error::DimensionMismatch(format!(
            "token of width {} for hidden size {}",
            x.len(),
            layer.hidden_dim()
        )));
    }
    let s = layer.lora_scale;
    let q = project(arith, layer.matrix(MatrixId::Q)?, s, x)?;
    cache.k.push(project(arith, layer.matrix(MatrixId::K)?, s, x)?);
    cache.v.push(project(arith, layer.matrix(MatrixId::V)?, s, x)?);
    let ctx = attend(arith, layer, &q, cache);
    project(arith, layer.matrix(MatrixId::O)?, s, &ctx)
}

/// Causal multi-head attention over token-major `x`, also returning the KV cache.
pub fn prefill<A: Arith>(
    arith: &A,
    layer: &LayerWeights<A::Word>,
    x: &Tensor2D<A::Word>,
) -> Result<(Tensor2D<A::Word>, KvCache<A::Word>)> {
    let mut cache = KvCache::default();
    let mut rows = Vec::with_capacity(x.rows());
    for t in 0..x.rows() {
        rows.push(decode_step(arith, layer, &mut cache, x.row(t))?);
    }
    Ok((Tensor2D::from_rows(layer.hidden_dim(), &rows)?, cache))
}

/// Causal multi-head attention with `1/√head_dim` scaling; returns
/// `seq_len × hidden_dim`.
pub fn attention_forward<A: Arith>(
    arith: &A,
    layer: &LayerWeights<A::Word>,
    x: &Tensor2D<A::Word>,
) -> Result<Tensor2D<A::Word>> {
    prefill(arith, layer, x).map(|(out, _)| out)
}

/// Feed-forward block on one row: `down(silu(gate·x) ⊙ up·x)` when gated,
/// `down(silu(up·x))` otherwise.
pub fn ffn_forward<A: Arith>(
    arith: &A,
    layer: &LayerWeights<A::Word>,
    x: &[A::Word],
) -> Result<Vec<A::Word>> {
    let s = layer.lora_scale;
    let up = project(arith, layer.matrix(MatrixId::FfnUp)?, s, x)?;
    let hidden: Vec<A::Word> = if layer.ffn_gated {
        let gate = project(arith, layer.matrix(MatrixId::FfnGate)?, s, x)?;
        gate.iter().zip(&up).map(|(&g, &u)| arith.mul(arith.silu(g), u)).collect()
    } else {
        up.iter().map(|&u| arith.silu(u)).collect()
    };
    project(arith, layer.matrix(MatrixId::FfnDown)?, s, &hidden)
}

/// Attention followed by the feed-forward block, without residual paths.
/// This is the computation the mapped dataflow performs.
pub fn layer_forward<A: Arith>(
    arith: &A,
    layer: &LayerWeights<A::Word>,
    x: &Tensor2D<A::Word>,
) -> Result<Tensor2D<A::Word>> {
    let attn = attention_forward(arith, layer, x)?;
    if !layer.has_ffn() {
        return Ok(attn);
    }
    let rows = (0..attn.rows())
        .map(|t| ffn_forward(arith, layer, attn.row(t)))
        .collect::<Result<Vec<_>>>()?;
    Tensor2D::from_rows(layer.hidden_dim(), &rows)
}

/// Full pre-norm-free transformer block with residual adds:
/// `h = x + attn(x)`, `y = h + ffn(h)`. Float only.
pub fn block_forward(layer: &LayerWeights<f64>, x: &Tensor2D<f64>) -> Result<Tensor2D<f64>> {
    let arith = crate::arith::Float;
    let attn = attention_forward(&arith, layer, x)?;
    let h = Tensor2D::from_fn(x.rows(), x.cols(), |r, c| x.get(r, c) + attn.get(r, c));
    if !layer.has_ffn() {
        return Ok(h);
    }
    let mut rows = Vec::with_capacity(h.rows());
    for t in 0..h.rows() {
        let f = ffn_forward(&arith, layer, h.row(t))?;
        rows.push(h.row(t).iter().zip(f).map(|(a, b)| a + b).collect());
    }
    Tensor2D::from_rows(h.cols(), &rows)
}
