//! Full model: embedding → ln0 → blocks → ln_out → head.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blocks::{block_forward, BlockParams, LayerNormParams};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{matmul_bt, Matrix};

/// Vocabulary of the byte-level tokenizer.
pub const BYTE_VOCAB: usize = 256;

/// Vocabulary used by the published model family.
pub const PRESET_VOCAB: usize = 50277;

/// `(name, layers, dim)` of the published model sizes.
pub const PRESETS: [(&str, usize, usize); 6] = [
    ("169m", 12, 768),
    ("430m", 24, 1024),
    ("1.5b", 24, 2048),
    ("3b", 32, 2560),
    ("7b", 32, 4096),
    ("14b", 40, 5120),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub dim: usize,
    pub layers: usize,
    /// Channel-mix hidden width; 0 in a config file means `4 * dim`.
    #[serde(default)]
    pub ffn_dim: usize,
    pub ctx_len: usize,
}

impl ModelConfig {
    pub fn new(vocab: usize, dim: usize, layers: usize, ctx_len: usize) -> Self {
        Self {
            vocab,
            dim,
            layers,
            ffn_dim: 4 * dim,
            ctx_len,
        }
    }

    /// Byte-level model (vocabulary 256).
    pub fn byte_level(dim: usize, layers: usize, ctx_len: usize) -> Self {
        Self::new(BYTE_VOCAB, dim, layers, ctx_len)
    }

    pub fn preset(name: &str) -> Option<Self> {
        let name = name.to_ascii_lowercase();
        PRESETS
            .iter()
            .find(|(n, _, _)| *n == name)
            .map(|&(_, layers, dim)| Self::new(PRESET_VOCAB, dim, layers, 1024))
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("vocab", self.vocab),
            ("dim", self.dim),
            ("layers", self.layers),
            ("ffn_dim", self.ffn_dim),
            ("ctx_len", self.ctx_len),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if self.vocab > 1 << 16 {
            return Err(Error::InvalidConfig(format!(
                "vocab {} exceeds 65536",
                self.vocab
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: ModelConfig =
            serde_json::from_str(text).map_err(|e| Error::Header(e.to_string()))?;
        if cfg.ffn_dim == 0 {
            cfg.ffn_dim = 4 * cfg.dim;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    fn require_standard_ffn(&self) -> Result<()> {
        if self.ffn_dim != 4 * self.dim {
            return Err(Error::UnsupportedFfnDim {
                dim: self.dim,
                ffn_dim: self.ffn_dim,
            });
        }
        Ok(())
    }
}

/// `2VD + 13D²L + D(11L + 4)`.
///
/// Per layer: 4D² time-mix projections, 9D² channel-mix projections, and 11
/// vectors (two layer norms, five interpolation factors, decay, bonus). The
/// `4D` term is ln0 and ln_out; `2VD` is embedding plus head.
pub fn param_count(cfg: &ModelConfig) -> Result<u64> {
    cfg.require_standard_ffn()?;
    let (v, d, l) = (cfg.vocab as u64, cfg.dim as u64, cfg.layers as u64);
    Ok(2 * v * d + 13 * d * d * l + d * (11 * l + 4))
}

/// Forward FLOPs per token, `2(VD + 13D²L)`: two flops per weight of every
/// matrix that is multiplied (all projections plus the head). The embedding
/// is a lookup and costs nothing.
pub fn flops_per_token(cfg: &ModelConfig) -> Result<u64> {
    cfg.require_standard_ffn()?;
    let (v, d, l) = (cfg.vocab as u64, cfg.dim as u64, cfg.layers as u64);
    Ok(2 * (v * d + 13 * d * d * l))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameters<T> {
    pub emb: Matrix<T>,
    pub ln0: LayerNormParams<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub ln_out: LayerNormParams<T>,
    pub head: Matrix<T>,
}

/// A named view of one parameter tensor.
#[derive(Debug)]
pub struct Tensor<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

#[derive(Debug)]
pub struct TensorMut<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [T],
}

fn vector_view<'a, T>(name: String, v: &'a [T]) -> Tensor<'a, T> {
    Tensor {
        name,
        shape: vec![v.len()],
        data: v,
    }
}

fn matrix_view<'a, T>(name: String, m: &'a Matrix<T>) -> Tensor<'a, T> {
    Tensor {
        name,
        shape: vec![m.rows(), m.cols()],
        data: m.as_slice(),
    }
}

impl<T: Scalar> Parameters<T> {
    pub fn zeros_like(&self) -> Self {
        Self {
            emb: Matrix::zeros(self.emb.rows(), self.emb.cols()),
            ln0: self.ln0.zeros_like(),
            blocks: self.blocks.iter().map(BlockParams::zeros_like).collect(),
            ln_out: self.ln_out.zeros_like(),
            head: Matrix::zeros(self.head.rows(), self.head.cols()),
        }
    }

    /// Every tensor with its canonical name, in a fixed order.
    pub fn tensors(&self) -> Vec<Tensor<'_, T>> {
        let mut out = vec![
            matrix_view("emb".into(), &self.emb),
            vector_view("ln0.weight".into(), &self.ln0.weight),
            vector_view("ln0.bias".into(), &self.ln0.bias),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            let n = |f: &str| format!("blocks.{l}.{f}");
            out.extend([
                vector_view(n("ln1.weight"), &b.ln1.weight),
                vector_view(n("ln1.bias"), &b.ln1.bias),
                vector_view(n("ln2.weight"), &b.ln2.weight),
                vector_view(n("ln2.bias"), &b.ln2.bias),
                matrix_view(n("att.receptance"), &b.att.receptance),
                matrix_view(n("att.key"), &b.att.key),
                matrix_view(n("att.value"), &b.att.value),
                matrix_view(n("att.output"), &b.att.output),
                vector_view(n("att.mix_r"), &b.att.mix_r),
                vector_view(n("att.mix_k"), &b.att.mix_k),
                vector_view(n("att.mix_v"), &b.att.mix_v),
                vector_view(n("att.decay"), &b.att.wkv.decay),
                vector_view(n("att.bonus"), &b.att.wkv.bonus),
                matrix_view(n("ffn.receptance"), &b.ffn.receptance),
                matrix_view(n("ffn.key"), &b.ffn.key),
                matrix_view(n("ffn.value"), &b.ffn.value),
                vector_view(n("ffn.mix_r"), &b.ffn.mix_r),
                vector_view(n("ffn.mix_k"), &b.ffn.mix_k),
            ]);
        }
        out.extend([
            vector_view("ln_out.weight".into(), &self.ln_out.weight),
            vector_view("ln_out.bias".into(), &self.ln_out.bias),
            matrix_view("head".into(), &self.head),
        ]);
        out
    }

    /// Mutable views in the same order as [`Parameters::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_, T>> {
        let names = self.tensors().into_iter().map(|t| (t.name, t.shape)).collect::<Vec<_>>();
        let mut slices: Vec<&mut [T]> = Vec::with_capacity(names.len());
        slices.push(self.emb.as_mut_slice());
        slices.push(&mut self.ln0.weight);
        slices.push(&mut self.ln0.bias);
        for b in self.blocks.iter_mut() {
            slices.push(&mut b.ln1.weight);
            slices.push(&mut b.ln1.bias);
            slices.push(&mut b.ln2.weight);
            slices.push(&mut b.ln2.bias);
            slices.push(b.att.receptance.as_mut_slice());
            slices.push(b.att.key.as_mut_slice());
            slices.push(b.att.value.as_mut_slice());
            slices.push(b.att.output.as_mut_slice());
            slices.push(&mut b.att.mix_r);
            slices.push(&mut b.att.mix_k);
            slices.push(&mut b.att.mix_v);
            slices.push(&mut b.att.wkv.decay);
            slices.push(&mut b.att.wkv.bonus);
            slices.push(b.ffn.receptance.as_mut_slice());
            slices.push(b.ffn.key.as_mut_slice());
            slices.push(b.ffn.value.as_mut_slice());
            slices.push(&mut b.ffn.mix_r);
            slices.push(&mut b.ffn.mix_k);
        }
        slices.push(&mut self.ln_out.weight);
        slices.push(&mut self.ln_out.bias);
        slices.push(self.head.as_mut_slice());
        names
            .into_iter()
            .zip(slices)
            .map(|((name, shape), data)| TensorMut { name, shape, data })
            .collect()
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    /// Expected shape of every tensor for `cfg`, in canonical order.
    pub fn expected_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (v, d, h) = (cfg.vocab, cfg.dim, cfg.ffn_dim);
        let mut out = vec![
            ("emb".to_string(), vec![v, d]),
            ("ln0.weight".into(), vec![d]),
            ("ln0.bias".into(), vec![d]),
        ];
        for l in 0..cfg.layers {
            let n = |f: &str| format!("blocks.{l}.{f}");
            for f in ["ln1.weight", "ln1.bias", "ln2.weight", "ln2.bias"] {
                out.push((n(f), vec![d]));
            }
            for f in ["att.receptance", "att.key", "att.value", "att.output"] {
                out.push((n(f), vec![d, d]));
            }
            for f in ["att.mix_r", "att.mix_k", "att.mix_v", "att.decay", "att.bonus"] {
                out.push((n(f), vec![d]));
            }
            out.push((n("ffn.receptance"), vec![d, d]));
            out.push((n("ffn.key"), vec![h, d]));
            out.push((n("ffn.value"), vec![d, h]));
            out.push((n("ffn.mix_r"), vec![d]));
            out.push((n("ffn.mix_k"), vec![d]));
        }
        out.push(("ln_out.weight".into(), vec![d]));
        out.push(("ln_out.bias".into(), vec![d]));
        out.push(("head".into(), vec![v, d]));
        out
    }

    /// Parameters of the right shapes, all zero.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        use crate::blocks::{ChannelMixParams, TimeMixParams};
        use crate::tensor::Vector;
        use crate::wkv::WkvParams;
        let (d, h) = (cfg.dim, cfg.ffn_dim);
        let z = LayerNormParams {
            weight: Vector::zeros(d),
            bias: Vector::zeros(d),
        };
        let block = BlockParams {
            ln1: z.clone(),
            ln2: z.clone(),
            att: TimeMixParams {
                receptance: Matrix::zeros(d, d),
                key: Matrix::zeros(d, d),
                value: Matrix::zeros(d, d),
                output: Matrix::zeros(d, d),
                mix_r: Vector::zeros(d),
                mix_k: Vector::zeros(d),
                mix_v: Vector::zeros(d),
                wkv: WkvParams {
                    decay: Vector::zeros(d),
                    bonus: Vector::zeros(d),
                },
            },
            ffn: ChannelMixParams {
                receptance: Matrix::zeros(d, d),
                key: Matrix::zeros(h, d),
                value: Matrix::zeros(d, h),
                mix_r: Vector::zeros(d),
                mix_k: Vector::zeros(d),
            },
        };
        Self {
            emb: Matrix::zeros(cfg.vocab, d),
            ln0: z.clone(),
            blocks: vec![block; cfg.layers],
            ln_out: z,
            head: Matrix::zeros(cfg.vocab, d),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: Parameters<T>,
}

impl<T: Scalar> Model<T> {
    /// Pairs parameters with a config after checking every tensor shape.
    pub fn new(config: ModelConfig, params: Parameters<T>) -> Result<Self> {
        config.validate()?;
        let expected = Parameters::<T>::expected_shapes(&config);
        let actual = params.tensors();
        if expected.len() != actual.len() {
            return Err(Error::InvalidConfig(format!(
                "{} tensors for a {}-layer config, expected {}",
                actual.len(),
                config.layers,
                expected.len()
            )));
        }
        for ((name, shape), t) in expected.iter().zip(&actual) {
            if *shape != t.shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::WeightShape {
                    name: name.clone(),
                    detail: format!("expected {shape:?}, got {:?}", t.shape),
                });
            }
        }
        Ok(Self { config, params })
    }

    pub fn check_token(&self, token: u32) -> Result<()> {
        if token as usize >= self.config.vocab {
            return Err(Error::TokenOutOfRange {
                token,
                vocab: self.config.vocab,
            });
        }
        Ok(())
    }

    pub(crate) fn check_sequence(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::InvalidConfig("empty token sequence".into()));
        }
        if tokens.len() > self.config.ctx_len {
            return Err(Error::ContextOverflow {
                len: tokens.len(),
                ctx_len: self.config.ctx_len,
            });
        }
        tokens.iter().try_for_each(|&t| self.check_token(t))
    }

    /// Embedding rows for `tokens` (unchecked).
    pub(crate) fn embed(&self, tokens: &[u32]) -> Matrix<T> {
        let d = self.config.dim;
        let mut x = Matrix::zeros(tokens.len(), d);
        for (t, &tok) in tokens.iter().enumerate() {
            x.row_mut(t).copy_from_slice(self.params.emb.row(tok as usize));
        }
        x
    }

    /// Logits for every position, `T × vocab`.
    pub fn forward_parallel(&self, tokens: &[u32]) -> Result<Matrix<T>> {
        self.check_sequence(tokens)?;
        let p = &self.params;
        let mut x = p.ln0.forward_rows(&self.embed(tokens)).0;
        for b in &p.blocks {
            x = block_forward(&x, b)?;
        }
        let x = p.ln_out.forward_rows(&x).0;
        matmul_bt(&x, &p.head)
    }
}
