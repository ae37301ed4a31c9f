//! Arena-resident executors.
//!
//! Buffers are allocated and released in LIFO order within every stage.
//! The tiled and naive paths compute every output code from the same
//! operands with the same reduction order, so their results are
//! bit-identical; only the set of simultaneously live buffers differs.

use serde::Serialize;

use crate::arena::{Arena, Region};
use crate::error::{Error, Result};
use crate::kernels::{
    attention_scores_into, layernorm_rows_inplace, matmul_into, residual_add_inplace, softmax_rows_inplace, Addend,
    Epilogue, GeluLut, MatMut, MatRef, MicroKernelShape, OpCounts,
};
use crate::model::{EncoderModel, LayerNormParams, LayerWeights, Linear};
use crate::qcore::{QTensor, QuantParams};

use super::memory::{Mode, SchedulePlan, StagePeaks};

/// A row-major `rows x cols` activation living in an arena region.
#[derive(Debug)]
pub struct Activation {
    pub region: Region,
    pub rows: usize,
    pub cols: usize,
    pub qp: QuantParams,
}

impl Activation {
    pub fn alloc(arena: &mut Arena, rows: usize, cols: usize, qp: QuantParams, tag: &str) -> Result<Self> {
        Ok(Self {
            region: arena.alloc(rows * cols, tag)?,
            rows,
            cols,
            qp,
        })
    }

    pub fn view(&self) -> Result<MatRef<'_>> {
        MatRef::row_major(self.region.as_slice(), self.rows, self.cols, self.qp)
    }

    pub fn to_tensor(&self) -> Result<QTensor> {
        QTensor::new(self.region.as_slice().to_vec(), vec![self.rows, self.cols], self.qp)
    }
}

/// Allocates every `(bytes, tag)` or none of them.
fn alloc_all<const N: usize>(arena: &mut Arena, req: [(usize, &str); N]) -> Result<[Region; N]> {
    let mut got: Vec<Region> = Vec::with_capacity(N);
    for (bytes, tag) in req {
        match arena.alloc(bytes, tag) {
            Ok(r) => got.push(r),
            Err(e) => {
                for r in got.iter().rev() {
                    arena.release(r)?;
                }
                return Err(e);
            }
        }
    }
    Ok(got.try_into().expect("N regions"))
}

fn free_all<const N: usize>(arena: &mut Arena, regions: [Region; N]) -> Result<()> {
    for r in regions.iter().rev() {
        arena.release(r)?;
    }
    Ok(())
}

fn weight(lin: &Linear) -> Result<MatRef<'_>> {
    MatRef::from_tensor(&lin.weight)
}

/// Embedding lookup followed by the embedding LayerNorm, `t` tokens at a time
/// through a `t x d` scratch tile. Returns the freshly allocated stream `x`.
pub fn run_embedding(tokens: &[usize], model: &EncoderModel, t: usize, arena: &mut Arena, mk: MicroKernelShape) -> Result<(Activation, OpCounts)> {
    let (s, d) = (tokens.len(), model.config.d_model);
    check_tile(s, t)?;
    let mut x = Activation::alloc(arena, s, d, model.emb_ln_out, "x")?;
    let mut scratch = match arena.alloc(t * d, "emb.scratch") {
        Ok(r) => r,
        Err(e) => {
            arena.release(&x.region)?;
            return Err(e);
        }
    };
    let mut ops = OpCounts::default();
    for (tile, ids) in tokens.chunks(t).enumerate() {
        let rows = ids.len();
        let buf = &mut scratch.as_mut_slice()[..rows * d];
        for (row, &id) in buf.chunks_exact_mut(d).zip(ids) {
            ops += model.embedding.lookup_into(id, row, model.emb_out, mk)?;
        }
        layernorm_rows_inplace(buf, d, model.emb_out, &model.emb_ln.gamma, &model.emb_ln.beta, model.emb_ln_out)?;
        let r0 = tile * t;
        x.region.as_mut_slice()[r0 * d..(r0 + rows) * d].copy_from_slice(buf);
    }
    arena.free(scratch)?;
    Ok((x, ops))
}

pub fn run_layernorm(x: &mut Activation, ln: &LayerNormParams, out_qp: QuantParams) -> Result<()> {
    layernorm_rows_inplace(x.region.as_mut_slice(), x.cols, x.qp, &ln.gamma, &ln.beta, out_qp)?;
    x.qp = out_qp;
    Ok(())
}

/// Token-tiled FFN: per tile `linear1 -> GELU -> linear2`, then the residual
/// add overwrites the tile's rows of `x`. Peak `s·d + t·(d_ffn + d)`.
pub fn run_mlp_tiled(x: &mut Activation, layer: &LayerWeights, t: usize, arena: &mut Arena, mk: MicroKernelShape) -> Result<OpCounts> {
    let (s, d) = (x.rows, x.cols);
    check_tile(s, t)?;
    let f = layer.ffn1.out_dim();
    let q = &layer.quant;
    let [mut hidden, mut out] = alloc_all(arena, [(t * f, "mlp.hidden"), (t * d, "mlp.out")])?;
    let lut = GeluLut::new(q.ffn_hidden, q.gelu);
    let (w1, w2) = (weight(&layer.ffn1)?, weight(&layer.ffn2)?);
    let mut ops = OpCounts::default();
    for r0 in (0..s).step_by(t) {
        let rows = t.min(s - r0);
        {
            let xin = MatRef::row_major(&x.region.as_slice()[r0 * d..(r0 + rows) * d], rows, d, x.qp)?;
            let mut h = MatMut::row_major(&mut hidden.as_mut_slice()[..rows * f], rows, f, q.ffn_hidden)?;
            ops += matmul_into(&xin, &w1, Some(&layer.ffn1.bias), &mut h, mk, Epilogue::Store)?;
        }
        lut.apply_inplace(&mut hidden.as_mut_slice()[..rows * f]);
        {
            let h = MatRef::row_major(&hidden.as_slice()[..rows * f], rows, f, q.gelu)?;
            let mut o = MatMut::row_major(&mut out.as_mut_slice()[..rows * d], rows, d, q.ffn_out)?;
            ops += matmul_into(&h, &w2, Some(&layer.ffn2.bias), &mut o, mk, Epilogue::Store)?;
        }
        residual_add_inplace(
            &mut x.region.as_mut_slice()[r0 * d..(r0 + rows) * d],
            x.qp,
            Addend::Other(&out.as_slice()[..rows * d], q.ffn_out),
            q.mlp_res,
        )?;
    }
    free_all(arena, [hidden, out])?;
    x.qp = q.mlp_res;
    Ok(ops)
}

/// Untiled FFN: the full `s x d_ffn` intermediate is live at once.
pub fn run_mlp_naive(x: &mut Activation, layer: &LayerWeights, arena: &mut Arena, mk: MicroKernelShape) -> Result<OpCounts> {
    let s = x.rows;
    run_mlp_tiled(x, layer, s, arena, mk)
}

/// Output projection with the residual add fused into the epilogue: each
/// projected code is added to `x` as it is produced, so no `s x d` product
/// buffer is needed.
fn project_residual(x: &mut Activation, ctx: &Region, layer: &LayerWeights, mk: MicroKernelShape) -> Result<OpCounts> {
    let (s, d) = (x.rows, x.cols);
    let q = &layer.quant;
    let c = MatRef::row_major(ctx.as_slice(), s, d, q.ctx)?;
    let mut dst = MatMut::row_major(x.region.as_mut_slice(), s, d, q.attn_out)?;
    let epi = Epilogue::AddInto {
        residual: x.qp,
        result: q.attn_res,
    };
    let ops = matmul_into(&c, &weight(&layer.wo)?, Some(&layer.wo.bias), &mut dst, mk, epi)?;
    x.qp = q.attn_res;
    Ok(ops)
}

/// Head-then-token tiled attention. Per head, `K_h` and `V_h` (`s x dh`)
/// are materialized; then each tile of `t` queries computes its complete
/// `t x s` score rows, softmax, and `t x dh` context, written back into the
/// head's column slice of the context buffer.
pub fn run_mha_tiled(x: &mut Activation, layer: &LayerWeights, heads: usize, t: usize, arena: &mut Arena, mk: MicroKernelShape) -> Result<OpCounts> {
    let (s, d) = (x.rows, x.cols);
    check_tile(s, t)?;
    let dh = d / heads;
    let q = &layer.quant;
    let sm_in = q.softmax_input(dh);
    let (wq, wk, wv) = (weight(&layer.wq)?, weight(&layer.wk)?, weight(&layer.wv)?);
    let mut ops = OpCounts::default();

    let mut ctx = arena.alloc(s * d, "mha.ctx")?;
    for head in 0..heads {
        let c0 = head * dh;
        let cols = c0..c0 + dh;
        let regions = alloc_all(
            arena,
            [
                (s * dh, "mha.k_head"),
                (s * dh, "mha.v_head"),
                (t * dh, "mha.q_tile"),
                (t * s, "mha.scores"),
                (t * dh, "mha.ctx_tile"),
            ],
        );
        let [mut kh, mut vh, mut qt, mut sc, mut ct] = match regions {
            Ok(r) => r,
            Err(e) => {
                arena.release(&ctx)?;
                return Err(e);
            }
        };
        let xin = x.view()?;
        {
            let mut k = MatMut::row_major(kh.as_mut_slice(), s, dh, q.k)?;
            ops += matmul_into(&xin, &wk.cols_range(c0, dh)?, Some(&layer.wk.bias[cols.clone()]), &mut k, mk, Epilogue::Store)?;
            let mut v = MatMut::row_major(vh.as_mut_slice(), s, dh, q.v)?;
            ops += matmul_into(&xin, &wv.cols_range(c0, dh)?, Some(&layer.wv.bias[cols.clone()]), &mut v, mk, Epilogue::Store)?;
        }
        let k_head = MatRef::row_major(kh.as_slice(), s, dh, q.k)?;
        let v_head = MatRef::row_major(vh.as_slice(), s, dh, q.v)?;
        for r0 in (0..s).step_by(t) {
            let rows = t.min(s - r0);
            {
                let mut qm = MatMut::row_major(&mut qt.as_mut_slice()[..rows * dh], rows, dh, q.q)?;
                let xr = xin.rows_range(r0, rows)?;
                ops += matmul_into(&xr, &wq.cols_range(c0, dh)?, Some(&layer.wq.bias[cols.clone()]), &mut qm, mk, Epilogue::Store)?;
            }
            {
                let qm = MatRef::row_major(&qt.as_slice()[..rows * dh], rows, dh, q.q)?;
                let mut sm = MatMut::row_major(&mut sc.as_mut_slice()[..rows * s], rows, s, q.scores)?;
                ops += attention_scores_into(&qm, &k_head, &mut sm, mk)?;
            }
            softmax_rows_inplace(&mut sc.as_mut_slice()[..rows * s], s, sm_in, q.probs);
            {
                let p = MatRef::row_major(&sc.as_slice()[..rows * s], rows, s, q.probs)?;
                let mut cm = MatMut::row_major(&mut ct.as_mut_slice()[..rows * dh], rows, dh, q.ctx)?;
                ops += matmul_into(&p, &v_head, None, &mut cm, mk, Epilogue::Store)?;
            }
            let dst = ctx.as_mut_slice();
            for (i, src) in ct.as_slice()[..rows * dh].chunks_exact(dh).enumerate() {
                let base = (r0 + i) * d + c0;
                dst[base..base + dh].copy_from_slice(src);
            }
        }
        free_all(arena, [kh, vh, qt, sc, ct])?;
    }
    ops += project_residual(x, &ctx, layer, mk)?;
    arena.free(ctx)?;
    Ok(ops)
}

/// Untiled attention: full `Q`, `K`, `V` and all `h` score matrices live at once.
pub fn run_mha_naive(x: &mut Activation, layer: &LayerWeights, heads: usize, arena: &mut Arena, mk: MicroKernelShape) -> Result<OpCounts> {
    let (s, d) = (x.rows, x.cols);
    let dh = d / heads;
    let q = &layer.quant;
    let sm_in = q.softmax_input(dh);
    let mut ops = OpCounts::default();

    let [mut ctx, mut qb, mut kb, mut vb, mut sc] = alloc_all(
        arena,
        [
            (s * d, "mha.ctx"),
            (s * d, "mha.q"),
            (s * d, "mha.k"),
            (s * d, "mha.v"),
            (heads * s * s, "mha.scores"),
        ],
    )?;
    {
        let xin = x.view()?;
        for (lin, buf, qp) in [(&layer.wq, &mut qb, q.q), (&layer.wk, &mut kb, q.k), (&layer.wv, &mut vb, q.v)] {
            let mut o = MatMut::row_major(buf.as_mut_slice(), s, d, qp)?;
            ops += matmul_into(&xin, &weight(lin)?, Some(&lin.bias), &mut o, mk, Epilogue::Store)?;
        }
    }
    let qm = MatRef::row_major(qb.as_slice(), s, d, q.q)?;
    let km = MatRef::row_major(kb.as_slice(), s, d, q.k)?;
    let vm = MatRef::row_major(vb.as_slice(), s, d, q.v)?;
    for head in 0..heads {
        let c0 = head * dh;
        let scores = &mut sc.as_mut_slice()[head * s * s..(head + 1) * s * s];
        {
            let mut sm = MatMut::row_major(scores, s, s, q.scores)?;
            ops += attention_scores_into(&qm.cols_range(c0, dh)?, &km.cols_range(c0, dh)?, &mut sm, mk)?;
        }
        softmax_rows_inplace(scores, s, sm_in, q.probs);
    }
    for head in 0..heads {
        let c0 = head * dh;
        let p = MatRef::row_major(&sc.as_slice()[head * s * s..(head + 1) * s * s], s, s, q.probs)?;
        let layout = crate::kernels::LayoutDescriptor::row_major(&[s, d]).narrow(1, c0, dh)?;
        let mut cm = MatMut::new(ctx.as_mut_slice(), &layout, q.ctx)?;
        ops += matmul_into(&p, &vm.cols_range(c0, dh)?, None, &mut cm, mk, Epilogue::Store)?;
    }
    for r in [&sc, &vb, &kb, &qb] {
        arena.release(r)?;
    }
    ops += project_residual(x, &ctx, layer, mk)?;
    arena.free(ctx)?;
    Ok(ops)
}

fn run_head(x: &Activation, model: &EncoderModel, arena: &mut Arena, mk: MicroKernelShape) -> Result<(QTensor, OpCounts)> {
    let n = model.config.n_classes;
    let mut logits = arena.alloc(n, "head.logits")?;
    let cls = x.view()?.rows_range(0, 1)?;
    let ops = {
        let mut o = MatMut::row_major(logits.as_mut_slice(), 1, n, model.logits)?;
        matmul_into(&cls, &weight(&model.classifier)?, Some(&model.classifier.bias), &mut o, mk, Epilogue::Store)?
    };
    let out = QTensor::new(logits.as_slice().to_vec(), vec![1, n], model.logits)?;
    arena.free(logits)?;
    Ok((out, ops))
}

fn check_tile(s: usize, t: usize) -> Result<()> {
    if s == 0 || t == 0 || t > s {
        return Err(Error::InvalidTile { t, s });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EncoderOutput {
    pub logits: Vec<i8>,
    pub logits_qp: QuantParams,
    pub logits_f32: Vec<f32>,
    pub predicted: usize,
    /// Measured per-stage peaks (max over layers).
    pub stage_peaks: StagePeaks,
    pub peak_bytes: usize,
    pub ops: OpCounts,
}

fn validate_tokens(tokens: &[usize], model: &EncoderModel) -> Result<()> {
    let cfg = &model.config;
    if tokens.is_empty() || tokens.len() > cfg.max_seq {
        return Err(Error::InvalidSequence {
            s: tokens.len(),
            s_max: cfg.max_seq,
        });
    }
    if let Some(&id) = tokens.iter().find(|&&id| id >= cfg.vocab) {
        return Err(Error::TokenOutOfRange { id, vocab: cfg.vocab });
    }
    Ok(())
}

/// Embedding, `L x [MHA, LN, MLP, LN]`, classifier on the first token.
pub fn run_encoder(tokens: &[usize], model: &EncoderModel, plan: &SchedulePlan, arena: &mut Arena) -> Result<EncoderOutput> {
    validate_tokens(tokens, model)?;
    let s = tokens.len();
    let (t, mk) = (plan.t, plan.kernel);
    if plan.mode == Mode::Tiled {
        check_tile(s, t)?;
    }
    let t_emb = if plan.mode == Mode::Tiled { t } else { s };
    let heads = model.config.heads;
    let mut peaks = StagePeaks::default();
    let mut ops = OpCounts::default();
    let start_live = arena.live_bytes();

    let mut run_peak = start_live;
    let mut stage = |arena: &Arena, slot: &mut usize| {
        *slot = (*slot).max(arena.window_peak() - start_live);
        run_peak = run_peak.max(arena.window_peak());
    };

    arena.begin_window();
    let (mut x, o) = run_embedding(tokens, model, t_emb, arena, mk)?;
    ops += o;
    stage(arena, &mut peaks.embedding);

    for layer in &model.layers {
        arena.begin_window();
        ops += match plan.mode {
            Mode::Tiled => run_mha_tiled(&mut x, layer, heads, t, arena, mk)?,
            Mode::Naive => run_mha_naive(&mut x, layer, heads, arena, mk)?,
        };
        stage(arena, &mut peaks.mha);

        arena.begin_window();
        run_layernorm(&mut x, &layer.ln1, layer.quant.ln1)?;
        stage(arena, &mut peaks.layernorm);

        arena.begin_window();
        ops += match plan.mode {
            Mode::Tiled => run_mlp_tiled(&mut x, layer, t, arena, mk)?,
            Mode::Naive => run_mlp_naive(&mut x, layer, arena, mk)?,
        };
        stage(arena, &mut peaks.mlp);

        arena.begin_window();
        run_layernorm(&mut x, &layer.ln2, layer.quant.ln2)?;
        stage(arena, &mut peaks.layernorm);
    }

    arena.begin_window();
    let (logits, o) = run_head(&x, model, arena, mk)?;
    ops += o;
    stage(arena, &mut peaks.head);
    arena.free(x.region)?;

    let qp = logits.qp();
    let logits_f32: Vec<f32> = logits.data().iter().map(|&q| qp.dequantize_value(q)).collect();
    let predicted = argmax(logits.data());
    Ok(EncoderOutput {
        logits: logits.into_data(),
        logits_qp: qp,
        logits_f32,
        predicted,
        stage_peaks: peaks,
        peak_bytes: run_peak - start_live,
        ops,
    })
}

/// Untiled baseline: full score matrices and the full FFN intermediate.
pub fn run_encoder_naive(tokens: &[usize], model: &EncoderModel, arena: &mut Arena) -> Result<EncoderOutput> {
    let s = tokens.len().max(1);
    let plan = SchedulePlan::naive(&model.config, s)?;
    run_encoder(tokens, model, &plan, arena)
}

/// Lowest index wins ties.
fn argmax(v: &[i8]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
