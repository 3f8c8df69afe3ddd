//! Flat parameter storage with a named tensor table.

use std::sync::Arc;

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::seed::rng_for;
use crate::Real;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorInfo {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Tensor indices for one decoder block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct BlockIds {
    pub ln1_gain: usize,
    pub ln1_bias: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ln2_gain: usize,
    pub ln2_bias: usize,
    pub w_in: usize,
    pub b_in: usize,
    pub w_out: usize,
    pub b_out: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    tensors: Vec<TensorInfo>,
    total: usize,
    pub(crate) tok_emb: usize,
    pub(crate) blocks: Vec<BlockIds>,
    pub(crate) lnf_gain: usize,
    pub(crate) lnf_bias: usize,
}

impl ParamLayout {
    pub fn for_config(cfg: &ModelConfig) -> Self {
        let mut b = Builder::default();
        let (w, h) = (cfg.width, cfg.hidden());
        let tok_emb = b.add("tok_emb", &[cfg.vocab, w]);
        let blocks = (0..cfg.n_layers)
            .map(|l| {
                let p = format!("layers.{l}");
                BlockIds {
                    ln1_gain: b.add(&format!("{p}.ln1.gain"), &[w]),
                    ln1_bias: b.add(&format!("{p}.ln1.bias"), &[w]),
                    wq: b.add(&format!("{p}.attn.wq"), &[w, w]),
                    wk: b.add(&format!("{p}.attn.wk"), &[w, w]),
                    wv: b.add(&format!("{p}.attn.wv"), &[w, w]),
                    wo: b.add(&format!("{p}.attn.wo"), &[w, w]),
                    ln2_gain: b.add(&format!("{p}.ln2.gain"), &[w]),
                    ln2_bias: b.add(&format!("{p}.ln2.bias"), &[w]),
                    w_in: b.add(&format!("{p}.mlp.w_in"), &[w, h]),
                    b_in: b.add(&format!("{p}.mlp.b_in"), &[h]),
                    w_out: b.add(&format!("{p}.mlp.w_out"), &[h, w]),
                    b_out: b.add(&format!("{p}.mlp.b_out"), &[w]),
                }
            })
            .collect();
        let lnf_gain = b.add("ln_f.gain", &[w]);
        let lnf_bias = b.add("ln_f.bias", &[w]);
        ParamLayout {
            tensors: b.tensors,
            total: b.offset,
            tok_emb,
            blocks,
            lnf_gain,
            lnf_bias,
        }
    }

    pub fn tensors(&self) -> &[TensorInfo] {
        &self.tensors
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }
}

#[derive(Default)]
struct Builder {
    tensors: Vec<TensorInfo>,
    offset: usize,
}

impl Builder {
    fn add(&mut self, name: &str, shape: &[usize]) -> usize {
        let info = TensorInfo {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset: self.offset,
        };
        self.offset += info.numel();
        self.tensors.push(info);
        self.tensors.len() - 1
    }
}

/// All model parameters (or gradients, or optimiser moments) in one buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    layout: Arc<ParamLayout>,
    data: Vec<T>,
}

impl<T: Real> Params<T> {
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let data = vec![T::zero(); layout.total()];
        Self { layout, data }
    }

    pub fn from_vec(layout: Arc<ParamLayout>, data: Vec<T>) -> Option<Self> {
        (data.len() == layout.total()).then_some(Self { layout, data })
    }

    /// Normal(0, std) weights, with residual output projections further
    /// scaled by `1/sqrt(2 * n_layers)`; layer-norm gains 1, biases 0.
    pub fn init(cfg: &ModelConfig) -> Self {
        let layout = Arc::new(ParamLayout::for_config(cfg));
        let mut p = Self::zeros(layout.clone());
        let mut rng = rng_for(cfg.seed, "model");
        let resid_std = cfg.init_std / (2.0 * cfg.n_layers as f64).sqrt();
        let fill = |p: &mut Self, id: usize, std: f64, rng: &mut rand_chacha::ChaCha8Rng| {
            let normal = Normal::new(0.0, std).unwrap();
            for x in p.tensor_mut(id) {
                *x = T::from_f64(normal.sample(rng)).unwrap();
            }
        };
        fill(&mut p, layout.tok_emb, cfg.init_std, &mut rng);
        for blk in &layout.blocks {
            p.tensor_mut(blk.ln1_gain).fill(T::one());
            p.tensor_mut(blk.ln2_gain).fill(T::one());
            for id in [blk.wq, blk.wk, blk.wv, blk.w_in] {
                fill(&mut p, id, cfg.init_std, &mut rng);
            }
            for id in [blk.wo, blk.w_out] {
                fill(&mut p, id, resid_std, &mut rng);
            }
        }
        p.tensor_mut(layout.lnf_gain).fill(T::one());
        p
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn tensor(&self, id: usize) -> &[T] {
        let info = &self.layout.tensors[id];
        &self.data[info.offset..info.offset + info.numel()]
    }

    pub fn tensor_mut(&mut self, id: usize) -> &mut [T] {
        let info = &self.layout.tensors[id];
        let (start, end) = (info.offset, info.offset + info.numel());
        &mut self.data[start..end]
    }

    pub fn view1(&self, id: usize) -> ArrayView1<'_, T> {
        ArrayView1::from(self.tensor(id))
    }

    pub fn view1_mut(&mut self, id: usize) -> ArrayViewMut1<'_, T> {
        ArrayViewMut1::from(self.tensor_mut(id))
    }

    pub fn view2(&self, id: usize) -> ArrayView2<'_, T> {
        let shape = &self.layout.tensors[id].shape;
        ArrayView2::from_shape((shape[0], shape[1]), self.tensor(id)).unwrap()
    }

    pub fn view2_mut(&mut self, id: usize) -> ArrayViewMut2<'_, T> {
        let shape = self.layout.tensors[id].shape.clone();
        ArrayViewMut2::from_shape((shape[0], shape[1]), self.tensor_mut(id)).unwrap()
    }

    pub fn fill_zero(&mut self) {
        self.data.fill(T::zero());
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            layout: self.layout.clone(),
            data: self
                .data
                .iter()
                .map(|x| U::from_f64(x.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|x| {
                let v = x.to_f64().unwrap();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    /// FNV-1a over the little-endian `f32` images of every parameter.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for x in &self.data {
            for b in x.to_f32().unwrap().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}
