//! The `.mcub` model file.
//!
//! Little-endian throughout. Every section length follows from the config
//! section alone, so the file is self-describing:
//!
//! ```text
//! header       "MCUB" | u16 version = 1 | u8 endianness = 0 (little) | u8 reserved = 0
//! config       u32 x 8: vocab d_model heads layers d_ffn max_seq n_classes clusters
//!              u32 x c: cluster sizes | u32 x c: cluster ranks
//! quant table  u32 count | count x (f32 scale, i32 zero_point)
//! token_map    u8 x vocab: cluster id per token
//! embedding    i8: U0 (n0 x d), then per cluster i >= 1: U_i (n_i x r_i), V_i^T (r_i x d)
//! embedding_ln f32 x d gamma | f32 x d beta
//! layer{l}     i8 Wq Wk Wv Wo (d x d) | i32 x d bq bk bv bo | f32 ln1 gamma, beta
//!              i8 W1 (d x d_ffn) | i32 x d_ffn b1 | i8 W2 (d_ffn x d) | i32 x d b2
//!              f32 ln2 gamma, beta
//! classifier   i8 Wc (d x n_classes) | i32 x n_classes bc
//! ```
//!
//! Quant-table order: U0, (U_i, V_i^T) for i >= 1, embedding output,
//! embedding LayerNorm output, then per layer the weight parameters of
//! Wq Wk Wv Wo W1 W2 followed by the 14 activation parameters of
//! [`LayerQuant`], then the classifier weight and the logits.

use std::io::{Read, Write};

use crate::embed::{embedding_param_count, ClusterSpec, ClusteredEmbedding, FactorPair};
use crate::error::{Error, Result};
use crate::model::{EncoderConfig, EncoderModel, LayerNormParams, LayerQuant, LayerWeights, Linear};
use crate::qcore::{QTensor, QuantParams};

pub const MAGIC: [u8; 4] = *b"MCUB";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 8;

fn quant_count(cfg: &EncoderConfig, clusters: usize) -> usize {
    1 + 2 * (clusters - 1) + 2 + cfg.layers * (6 + LayerQuant::COUNT) + 2
}

/// Exact encoded length of a model with this config and cluster spec.
pub fn encoded_size(cfg: &EncoderConfig, spec: &ClusterSpec) -> usize {
    let c = spec.num_clusters();
    let (d, f) = (cfg.d_model, cfg.d_ffn);
    let config = 4 * (8 + 2 * c);
    let quant = 4 + 8 * quant_count(cfg, c);
    let layer = 4 * d * d + 4 * 4 * d + 2 * 4 * d + d * f + 4 * f + f * d + 4 * d + 2 * 4 * d;
    let classifier = d * cfg.n_classes + 4 * cfg.n_classes;
    HEADER_LEN
        + config
        + quant
        + cfg.vocab
        + embedding_param_count(spec, d)
        + 2 * 4 * d
        + cfg.layers * layer
        + classifier
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::InvariantViolation(format!("{v} does not fit in u32")))?;
        self.buf.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }

    fn qp(&mut self, qp: QuantParams) {
        self.buf.extend_from_slice(&qp.scale.to_le_bytes());
        self.buf.extend_from_slice(&qp.zero_point.to_le_bytes());
    }

    fn i8s(&mut self, v: &[i8]) {
        self.buf.extend(v.iter().map(|&b| b as u8));
    }

    fn i32s(&mut self, v: &[i32]) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    fn linear(&mut self, l: &Linear) {
        self.i8s(l.weight.data());
    }

    fn ln(&mut self, ln: &LayerNormParams) {
        self.f32s(&ln.gamma);
        self.f32s(&ln.beta);
    }
}

/// Canonical encoding of `model`.
pub fn model_to_bytes(model: &EncoderModel) -> Result<Vec<u8>> {
    model.validate()?;
    let cfg = &model.config;
    let emb = &model.embedding;
    let spec = emb.spec();
    let mut w = Writer {
        buf: Vec::with_capacity(encoded_size(cfg, spec)),
    };
    w.buf.extend_from_slice(&MAGIC);
    w.buf.extend_from_slice(&VERSION.to_le_bytes());
    w.buf.extend_from_slice(&[0, 0]);

    for v in [
        cfg.vocab,
        cfg.d_model,
        cfg.heads,
        cfg.layers,
        cfg.d_ffn,
        cfg.max_seq,
        cfg.n_classes,
        spec.num_clusters(),
    ] {
        w.u32(v)?;
    }
    for &v in spec.sizes.iter().chain(&spec.ranks) {
        w.u32(v)?;
    }

    w.u32(quant_count(cfg, spec.num_clusters()))?;
    w.qp(emb.u0().qp());
    for f in emb.factors() {
        w.qp(f.u.qp());
        w.qp(f.vt.qp());
    }
    w.qp(model.emb_out);
    w.qp(model.emb_ln_out);
    for l in &model.layers {
        for lin in [&l.wq, &l.wk, &l.wv, &l.wo, &l.ffn1, &l.ffn2] {
            w.qp(lin.weight.qp());
        }
        for qp in l.quant.to_array() {
            w.qp(qp);
        }
    }
    w.qp(model.classifier.weight.qp());
    w.qp(model.logits);

    w.buf.extend_from_slice(emb.token_cluster());
    w.i8s(emb.u0().data());
    for f in emb.factors() {
        w.i8s(f.u.data());
        w.i8s(f.vt.data());
    }
    w.ln(&model.emb_ln);
    for l in &model.layers {
        for lin in [&l.wq, &l.wk, &l.wv, &l.wo] {
            w.linear(lin);
        }
        for lin in [&l.wq, &l.wk, &l.wv, &l.wo] {
            w.i32s(&lin.bias);
        }
        w.ln(&l.ln1);
        w.linear(&l.ffn1);
        w.i32s(&l.ffn1.bias);
        w.linear(&l.ffn2);
        w.i32s(&l.ffn2.bias);
        w.ln(&l.ln2);
    }
    w.linear(&model.classifier);
    w.i32s(&model.classifier.bias);
    debug_assert_eq!(w.buf.len(), encoded_size(cfg, spec));
    Ok(w.buf)
}

pub fn write_model<W: Write>(model: &EncoderModel, mut sink: W) -> Result<usize> {
    let bytes = model_to_bytes(model)?;
    sink.write_all(&bytes)?;
    Ok(bytes.len())
}

pub fn write_model_file(model: &EncoderModel, path: &std::path::Path) -> Result<usize> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    let n = write_model(model, &mut w)?;
    w.flush()?;
    Ok(n)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    section: &'static str,
    layer: Option<usize>,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            let name = match self.layer {
                Some(l) => format!("layer{l}"),
                None => self.section.to_string(),
            };
            return Err(Error::TruncatedSection { name });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn enter(&mut self, section: &'static str) {
        self.section = section;
        self.layer = None;
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn qp(&mut self) -> Result<QuantParams> {
        let scale = f32::from_le_bytes(self.take(4)?.try_into().unwrap());
        let zero_point = i32::from_le_bytes(self.take(4)?.try_into().unwrap());
        let qp = QuantParams { scale, zero_point };
        qp.validate().map_err(|e| Error::InvariantViolation(e.to_string()))?;
        Ok(qp)
    }

    fn i8s(&mut self, n: usize) -> Result<Vec<i8>> {
        Ok(self.take(n)?.iter().map(|&b| b as i8).collect())
    }

    fn i32s(&mut self, n: usize) -> Result<Vec<i32>> {
        let raw = self.take(4 * n)?;
        Ok(raw.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(4 * n)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn tensor(&mut self, rows: usize, cols: usize, qp: QuantParams) -> Result<QTensor> {
        let data = self.i8s(rows * cols)?;
        QTensor::new(data, vec![rows, cols], qp).map_err(|e| Error::InvariantViolation(e.to_string()))
    }

    fn ln(&mut self, d: usize) -> Result<LayerNormParams> {
        Ok(LayerNormParams {
            gamma: self.f32s(d)?,
            beta: self.f32s(d)?,
        })
    }
}

const MAX_DIM: usize = 1 << 24;

/// Decodes and re-validates a model.
pub fn model_from_bytes(buf: &[u8]) -> Result<EncoderModel> {
    let mut r = Reader {
        buf,
        pos: 0,
        section: "header",
        layer: None,
    };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let flags = r.take(2)?;
    if flags != [0, 0] {
        return Err(Error::InvariantViolation(format!("unsupported endianness/flags {flags:?}")));
    }

    r.enter("config");
    let mut dims = [0usize; 8];
    for v in &mut dims {
        *v = r.u32()?;
    }
    let [vocab, d_model, heads, layers, d_ffn, max_seq, n_classes, clusters] = dims;
    if dims.iter().any(|&v| v > MAX_DIM) {
        return Err(Error::InvariantViolation(format!("config dimension too large: {dims:?}")));
    }
    let cfg = EncoderConfig {
        vocab,
        d_model,
        heads,
        layers,
        d_ffn,
        max_seq,
        n_classes,
    };
    cfg.validate().map_err(|e| Error::InvariantViolation(e.to_string()))?;
    if clusters == 0 || clusters > 256 {
        return Err(Error::InvariantViolation(format!("{clusters} clusters")));
    }
    let sizes = (0..clusters).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let ranks = (0..clusters).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let spec = ClusterSpec { sizes, ranks };
    spec.validate(vocab, d_model).map_err(|e| Error::InvariantViolation(e.to_string()))?;

    r.enter("quant_table");
    let n_qp = r.u32()?;
    let expected = quant_count(&cfg, clusters);
    if n_qp != expected {
        return Err(Error::InvariantViolation(format!("quant table has {n_qp} entries, expected {expected}")));
    }
    let qps = (0..n_qp).map(|_| r.qp()).collect::<Result<Vec<_>>>()?;
    let mut qi = qps.into_iter();
    let mut next = || qi.next().expect("count checked");

    let u0_qp = next();
    let factor_qps: Vec<(QuantParams, QuantParams)> = (1..clusters).map(|_| (next(), next())).collect();
    let emb_out = next();
    let emb_ln_out = next();
    let layer_qps: Vec<([QuantParams; 6], [QuantParams; LayerQuant::COUNT])> = (0..layers)
        .map(|_| {
            let w = std::array::from_fn(|_| next());
            let a = std::array::from_fn(|_| next());
            (w, a)
        })
        .collect();
    let cls_qp = next();
    let logits = next();

    r.enter("token_map");
    let token_cluster = r.take(vocab)?.to_vec();

    r.enter("embedding");
    let d = d_model;
    let u0 = r.tensor(spec.sizes[0], d, u0_qp)?;
    let mut factors = Vec::with_capacity(clusters - 1);
    for (i, &(uq, vq)) in factor_qps.iter().enumerate() {
        let (n, rank) = (spec.sizes[i + 1], spec.ranks[i + 1]);
        factors.push(FactorPair {
            u: r.tensor(n, rank, uq)?,
            vt: r.tensor(rank, d, vq)?,
        });
    }
    let embedding = ClusteredEmbedding::new(spec, d, token_cluster, u0, factors)
        .map_err(|e| Error::InvariantViolation(e.to_string()))?;

    r.enter("embedding_ln");
    let emb_ln = r.ln(d)?;

    r.enter("layer");
    let mut layer_weights = Vec::with_capacity(layers);
    for (l, (wq, aq)) in layer_qps.into_iter().enumerate() {
        r.layer = Some(l);
        let mats: Vec<QTensor> = (0..4).map(|i| r.tensor(d, d, wq[i])).collect::<Result<_>>()?;
        let biases: Vec<Vec<i32>> = (0..4).map(|_| r.i32s(d)).collect::<Result<_>>()?;
        let ln1 = r.ln(d)?;
        let ffn1 = Linear {
            weight: r.tensor(d, d_ffn, wq[4])?,
            bias: r.i32s(d_ffn)?,
        };
        let ffn2 = Linear {
            weight: r.tensor(d_ffn, d, wq[5])?,
            bias: r.i32s(d)?,
        };
        let ln2 = r.ln(d)?;
        let mut lin = mats.into_iter().zip(biases).map(|(weight, bias)| Linear { weight, bias });
        layer_weights.push(LayerWeights {
            wq: lin.next().unwrap(),
            wk: lin.next().unwrap(),
            wv: lin.next().unwrap(),
            wo: lin.next().unwrap(),
            ln1,
            ffn1,
            ffn2,
            ln2,
            quant: LayerQuant::from_array(aq),
        });
    }

    r.enter("classifier");
    let classifier = Linear {
        weight: r.tensor(d, n_classes, cls_qp)?,
        bias: r.i32s(n_classes)?,
    };
    if r.pos != buf.len() {
        return Err(Error::InvariantViolation(format!("{} trailing bytes", buf.len() - r.pos)));
    }

    let model = EncoderModel {
        config: cfg,
        embedding,
        emb_out,
        emb_ln,
        emb_ln_out,
        layers: layer_weights,
        classifier,
        logits,
    };
    model.validate()?;
    Ok(model)
}

pub fn load_model<R: Read>(mut source: R) -> Result<EncoderModel> {
    let mut buf = Vec::new();
    source.read_to_end(&mut buf)?;
    model_from_bytes(&buf)
}

pub fn load_model_file(path: &std::path::Path) -> Result<EncoderModel> {
    load_model(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Byte offset of the embedding section (header through token map).
pub fn embedding_section_offset(cfg: &EncoderConfig, spec: &ClusterSpec) -> usize {
    HEADER_LEN + 4 * (8 + 2 * spec.num_clusters()) + 4 + 8 * quant_count(cfg, spec.num_clusters()) + cfg.vocab
}
