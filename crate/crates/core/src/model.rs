//! Encoder configuration, weights and quantization parameters.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::{ClusterSpec, ClusteredEmbedding, FactorPair};
use crate::error::{Error, Result};
use crate::qcore::{QTensor, QuantParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ffn: usize,
    pub max_seq: usize,
    pub n_classes: usize,
}

impl EncoderConfig {
    /// v=30522, d=128, h=2, L=2, FFN 512, s_max=512, 3 classes (MNLI-style head).
    pub fn bert_tiny() -> Self {
        Self {
            vocab: 30522,
            d_model: 128,
            heads: 2,
            layers: 2,
            d_ffn: 512,
            max_seq: 512,
            n_classes: 3,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.vocab,
            self.d_model,
            self.heads,
            self.layers,
            self.d_ffn,
            self.max_seq,
            self.n_classes,
        ];
        if fields.contains(&0) {
            return Err(Error::InvalidConfig(format!("all dimensions must be positive: {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

/// `y = x · W + b` with `W` stored `in x out` row-major and the bias at
/// scale `s_x * s_w`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: QTensor,
    pub bias: Vec<i32>,
}

impl Linear {
    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn check(&self, name: &str, in_dim: usize, out_dim: usize) -> Result<()> {
        if self.weight.shape() != [in_dim, out_dim] || self.bias.len() != out_dim {
            return Err(Error::InvariantViolation(format!(
                "{name}: weight {:?} / bias {}, expected [{in_dim}, {out_dim}]",
                self.weight.shape(),
                self.bias.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

impl LayerNormParams {
    fn check(&self, name: &str, d: usize) -> Result<()> {
        if self.gamma.len() != d || self.beta.len() != d {
            return Err(Error::InvariantViolation(format!("{name}: layernorm params not of length {d}")));
        }
        if self.gamma.iter().chain(&self.beta).any(|v| !v.is_finite()) {
            return Err(Error::InvariantViolation(format!("{name}: non-finite layernorm params")));
        }
        Ok(())
    }
}

/// Activation quantization parameters of one encoder layer, in dataflow order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerQuant {
    pub q: QuantParams,
    pub k: QuantParams,
    pub v: QuantParams,
    /// Raw `Q·Kᵀ` products; softmax reads them at `scale / sqrt(d_head)`.
    pub scores: QuantParams,
    pub probs: QuantParams,
    pub ctx: QuantParams,
    pub attn_out: QuantParams,
    pub attn_res: QuantParams,
    pub ln1: QuantParams,
    pub ffn_hidden: QuantParams,
    pub gelu: QuantParams,
    pub ffn_out: QuantParams,
    pub mlp_res: QuantParams,
    pub ln2: QuantParams,
}

impl LayerQuant {
    pub const COUNT: usize = 14;

    pub fn to_array(&self) -> [QuantParams; Self::COUNT] {
        [
            self.q,
            self.k,
            self.v,
            self.scores,
            self.probs,
            self.ctx,
            self.attn_out,
            self.attn_res,
            self.ln1,
            self.ffn_hidden,
            self.gelu,
            self.ffn_out,
            self.mlp_res,
            self.ln2,
        ]
    }

    pub fn from_array(a: [QuantParams; Self::COUNT]) -> Self {
        Self {
            q: a[0],
            k: a[1],
            v: a[2],
            scores: a[3],
            probs: a[4],
            ctx: a[5],
            attn_out: a[6],
            attn_res: a[7],
            ln1: a[8],
            ffn_hidden: a[9],
            gelu: a[10],
            ffn_out: a[11],
            mlp_res: a[12],
            ln2: a[13],
        }
    }

    /// Input parameters softmax uses: the score scale with `1/sqrt(d_head)`
    /// folded in.
    pub fn softmax_input(&self, head_dim: usize) -> QuantParams {
        QuantParams {
            scale: self.scores.scale / (head_dim as f32).sqrt(),
            zero_point: self.scores.zero_point,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln1: LayerNormParams,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub ln2: LayerNormParams,
    pub quant: LayerQuant,
}

impl LayerWeights {
    pub fn param_count(&self) -> usize {
        [&self.wq, &self.wk, &self.wv, &self.wo, &self.ffn1, &self.ffn2]
            .iter()
            .map(|l| l.param_count())
            .sum::<usize>()
            + 2 * (self.ln1.gamma.len() + self.ln2.gamma.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    pub embedding: usize,
    pub embedding_ln: usize,
    pub encoder: usize,
    pub classifier: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    pub embedding: ClusteredEmbedding,
    /// Parameters of the raw lookup rows.
    pub emb_out: QuantParams,
    pub emb_ln: LayerNormParams,
    pub emb_ln_out: QuantParams,
    pub layers: Vec<LayerWeights>,
    /// Reads the first token's final hidden state.
    pub classifier: Linear,
    pub logits: QuantParams,
}

impl EncoderModel {
    pub fn validate(&self) -> Result<()> {
        let cfg = &self.config;
        cfg.validate().map_err(|e| Error::InvariantViolation(e.to_string()))?;
        let d = cfg.d_model;
        if self.embedding.vocab() != cfg.vocab || self.embedding.dim() != d {
            return Err(Error::InvariantViolation(format!(
                "embedding is {}x{}, config expects {}x{d}",
                self.embedding.vocab(),
                self.embedding.dim(),
                cfg.vocab
            )));
        }
        self.embedding.spec().validate(cfg.vocab, d)?;
        self.emb_ln.check("embedding", d)?;
        if self.layers.len() != cfg.layers {
            return Err(Error::InvariantViolation(format!(
                "{} layers, config expects {}",
                self.layers.len(),
                cfg.layers
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            for (name, lin) in [("wq", &l.wq), ("wk", &l.wk), ("wv", &l.wv), ("wo", &l.wo)] {
                lin.check(&format!("layer {i} {name}"), d, d)?;
            }
            l.ffn1.check(&format!("layer {i} ffn1"), d, cfg.d_ffn)?;
            l.ffn2.check(&format!("layer {i} ffn2"), cfg.d_ffn, d)?;
            l.ln1.check(&format!("layer {i} ln1"), d)?;
            l.ln2.check(&format!("layer {i} ln2"), d)?;
            for qp in l.quant.to_array() {
                qp.validate().map_err(|e| Error::InvariantViolation(e.to_string()))?;
            }
        }
        self.classifier.check("classifier", d, cfg.n_classes)?;
        Ok(())
    }

    /// Parameters of the residual stream entering layer `l` (`l == layers`
    /// is the classifier input).
    pub fn stream_qp(&self, l: usize) -> QuantParams {
        if l == 0 {
            self.emb_ln_out
        } else {
            self.layers[l - 1].quant.ln2
        }
    }

    pub fn param_counts(&self) -> ParamCounts {
        let embedding = self.embedding.param_count();
        let embedding_ln = 2 * self.emb_ln.gamma.len();
        let encoder = self.layers.iter().map(LayerWeights::param_count).sum();
        let classifier = self.classifier.param_count();
        ParamCounts {
            embedding,
            embedding_ln,
            encoder,
            classifier,
            total: embedding + embedding_ln + encoder + classifier,
        }
    }

    /// A procedurally generated model whose quantization parameters keep
    /// activations in a non-degenerate range (roughly unit variance on the
    /// residual stream). `token_map` defaults to a seeded shuffle.
    pub fn random(config: EncoderConfig, spec: ClusterSpec, seed: u64) -> Result<Self> {
        config.validate()?;
        spec.validate(config.vocab, config.d_model)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let dh = config.head_dim();
        let act = sym(4.0 / 127.0);

        let mut map = spec.contiguous_map();
        map.shuffle(&mut rng);
        let u0 = rand_weight(&mut rng, spec.sizes[0], d, 1.0);
        let factors = (1..spec.num_clusters())
            .map(|i| {
                let r = spec.ranks[i];
                FactorPair {
                    u: rand_weight(&mut rng, spec.sizes[i], r, 1.0),
                    vt: rand_weight(&mut rng, r, d, (3.0 / r as f32).sqrt()),
                }
            })
            .collect();
        let embedding = ClusteredEmbedding::new(spec, d, map, u0, factors)?;

        let rand_ln = |rng: &mut ChaCha8Rng| LayerNormParams {
            gamma: (0..d).map(|_| rng.gen_range(0.8..1.2)).collect(),
            beta: (0..d).map(|_| rng.gen_range(-0.1..0.1)).collect(),
        };
        let emb_ln = rand_ln(&mut rng);

        let quant = LayerQuant {
            q: act,
            k: act,
            v: act,
            scores: sym(4.0 * (dh as f32).sqrt() / 127.0),
            probs: affine(1.0 / 255.0, -128),
            ctx: act,
            attn_out: act,
            attn_res: sym(6.0 / 127.0),
            ln1: act,
            ffn_hidden: act,
            gelu: affine(4.0 / 255.0, -118),
            ffn_out: act,
            mlp_res: sym(6.0 / 127.0),
            ln2: act,
        };
        let layers = (0..config.layers)
            .map(|_| LayerWeights {
                wq: rand_linear(&mut rng, d, d, act),
                wk: rand_linear(&mut rng, d, d, act),
                wv: rand_linear(&mut rng, d, d, act),
                wo: rand_linear(&mut rng, d, d, quant.ctx),
                ln1: rand_ln(&mut rng),
                ffn1: rand_linear(&mut rng, d, config.d_ffn, act),
                ffn2: rand_linear(&mut rng, config.d_ffn, d, quant.gelu),
                ln2: rand_ln(&mut rng),
                quant,
            })
            .collect();
        let model = Self {
            config,
            embedding,
            emb_out: act,
            emb_ln,
            emb_ln_out: act,
            layers,
            classifier: rand_linear(&mut rng, d, config.n_classes, act),
            logits: sym(8.0 / 127.0),
        };
        model.validate()?;
        Ok(model)
    }
}

fn sym(scale: f32) -> QuantParams {
    QuantParams { scale, zero_point: 0 }
}

fn affine(scale: f32, zero_point: i32) -> QuantParams {
    QuantParams { scale, zero_point }
}

/// Uniform int8 codes whose real values span `[-limit, limit]`.
fn rand_weight(rng: &mut ChaCha8Rng, rows: usize, cols: usize, limit: f32) -> QTensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-127i8..=127)).collect();
    QTensor::new(data, vec![rows, cols], sym(limit / 127.0)).expect("valid random tensor")
}

fn rand_linear(rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize, input: QuantParams) -> Linear {
    let weight = rand_weight(rng, in_dim, out_dim, (3.0 / in_dim as f32).sqrt());
    let bias_scale = input.scale * weight.qp().scale;
    let bias = (0..out_dim)
        .map(|_| (rng.gen_range(-0.1f32..0.1) / bias_scale).round() as i32)
        .collect();
    Linear { weight, bias }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::embedding_param_count;

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::bert_tiny().validate().is_ok());
        let mut c = EncoderConfig::bert_tiny();
        c.heads = 3;
        assert!(c.validate().is_err());
        c.heads = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn random_model_is_valid_and_deterministic() {
        let cfg = EncoderConfig {
            vocab: 40,
            d_model: 16,
            heads: 2,
            layers: 2,
            d_ffn: 64,
            max_seq: 32,
            n_classes: 3,
        };
        let spec = ClusterSpec {
            sizes: vec![10, 10, 20],
            ranks: vec![16, 4, 2],
        };
        let a = EncoderModel::random(cfg, spec.clone(), 5).unwrap();
        let b = EncoderModel::random(cfg, spec.clone(), 5).unwrap();
        assert_eq!(a, b);
        let c = EncoderModel::random(cfg, spec.clone(), 6).unwrap();
        assert_ne!(a, c);
        assert_eq!(a.param_counts().embedding, embedding_param_count(&spec, 16));
    }

    #[test]
    fn bert_tiny_total_params() {
        let cfg = EncoderConfig::bert_tiny();
        let m = EncoderModel::random(cfg, ClusterSpec::full(cfg.vocab, cfg.d_model), 0).unwrap();
        let pc = m.param_counts();
        assert_eq!(pc.embedding, 3_906_816);
        // token table + 2 layers x (4 d^2 + 2 d d_ffn + biases + 2 LN) + LN + head
        assert_eq!(pc.encoder, 2 * (4 * 128 * 128 + 2 * 128 * 512 + 4 * 128 + 512 + 128 + 4 * 128));
        assert_eq!(pc.total, 3_906_816 + 256 + 396_544 + 387);
    }
}
