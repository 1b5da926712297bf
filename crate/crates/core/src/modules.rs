//! The five specialized capsule modules. Each maps a `d×N` capsule matrix to
//! a new `d×N` matrix, optionally conditioned on the question or knowledge.

use crate::error::{Error, Result};
use crate::params::{BoundParams, ModuleKind};
use crate::tape::{Axis, Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Variance floor inside the per-capsule normalization.
pub const NORM_EPS: f64 = 1e-5;

/// `(V − μ) / σ` with per-column statistics.
pub fn normalize_cols<T: Scalar>(tape: &mut Tape<T>, v: Var) -> Result<Var> {
    let d = tape.value(v).rows();
    let mu = tape.col_mean(v)?;
    let sigma = tape.col_std(v, T::from_f64_lossy(NORM_EPS))?;
    let mu_b = tape.broadcast_rows(mu, d)?;
    let sigma_b = tape.broadcast_rows(sigma, d)?;
    let centered = tape.sub(v, mu_b)?;
    Ok(tape.div(centered, sigma_b)?)
}

/// `sigmoid(W · X + b)` with the bias vector broadcast across columns.
fn gate<T: Scalar>(tape: &mut Tape<T>, w: Var, x: Var, bias: Var) -> Result<Var> {
    let n = tape.value(x).cols();
    let wx = tape.matmul(w, x)?;
    let b = tape.broadcast_cols(bias, n)?;
    let pre = tape.add(wx, b)?;
    Ok(tape.sigmoid(pre)?)
}

/// Materializes the capsule-mixing matrix `w[0]·I + w[1]·(1/N)·11ᵀ` from the
/// tied pair stored as `R1.W_3`.
pub fn tied_capsule_mixer<T: Scalar>(tape: &mut Tape<T>, w3: Var, n: usize) -> Result<Var> {
    let eye = tape.constant(Tensor::identity(n));
    let inv_n = T::one() / T::from_usize(n).unwrap();
    let mean = tape.constant(Tensor::filled(&[n, n], inv_n));
    let a = tape.scale_by_entry(eye, w3, 0)?;
    let b = tape.scale_by_entry(mean, w3, 1)?;
    Ok(tape.add(a, b)?)
}

/// Focal context-aware enhancement.
///
/// `D = (W₁V)ᵀ(W₂V)`, `g = σ(W₃·colsum(D))`, output `(V·diag(g))·Aᵀ` with
/// `A` the row-softmax of `D`: capsule `i` gathers gated capsules weighted
/// by its relevance row.
pub fn focal_context<T: Scalar>(tape: &mut Tape<T>, v: Var, w1: Var, w2: Var, w3: Var) -> Result<Var> {
    let n = tape.value(v).cols();
    let left = tape.matmul(w1, v)?;
    let right = tape.matmul(w2, v)?;
    let left_t = tape.transpose(left)?;
    let relevance = tape.matmul(left_t, right)?;

    let col_sums = tape.col_sum(relevance)?;
    let mixer = tied_capsule_mixer(tape, w3, n)?;
    let logits = tape.matmul(mixer, col_sums)?;
    let importance = tape.sigmoid(logits)?;

    let attention = tape.softmax(relevance, Axis::Cols)?;
    let gated = tape.diag_scale_cols(v, importance)?;
    let attention_t = tape.transpose(attention)?;
    Ok(tape.matmul(gated, attention_t)?)
}

/// Identity retainer: returns its input unchanged.
pub fn identity(v: Var) -> Var {
    v
}

/// Global reduction: LayerNorm-style modulation with scale and shift derived
/// from the pooled question.
pub fn global_reduction<T: Scalar>(
    tape: &mut Tape<T>,
    v: Var,
    q: Var,
    w_a: Var,
    w_eta: Var,
    b_a: Var,
    b_eta: Var,
) -> Result<Var> {
    let n = tape.value(v).cols();
    let pooled = tape.avg_pool_cols(q)?;
    let q_b = tape.broadcast_cols(pooled, n)?;
    let scale = gate(tape, w_a, q_b, b_a)?;
    let shift = gate(tape, w_eta, q_b, b_eta)?;
    let normed = normalize_cols(tape, v)?;
    let scaled = tape.mul(scale, normed)?;
    Ok(tape.add(scaled, shift)?)
}

/// Word attention per capsule: `softmax_words((W_q Q)ᵀ(W_v V))`, `L×N`, used
/// to build capsule-specific context `Q·α`.
fn context_attention<T: Scalar>(tape: &mut Tape<T>, ctx: Var, v: Var, w_ctx: Var, w_v: Var) -> Result<Var> {
    let c = tape.matmul(w_ctx, ctx)?;
    let c_t = tape.transpose(c)?;
    let vv = tape.matmul(w_v, v)?;
    let scores = tape.matmul(c_t, vv)?;
    let alpha = tape.softmax(scores, Axis::Rows)?;
    Ok(tape.matmul(ctx, alpha)?)
}

/// Local semantic modulation: like [`global_reduction`] but the scale and
/// shift come from each capsule's own attended question context.
#[allow(clippy::too_many_arguments)]
pub fn local_semantic<T: Scalar>(
    tape: &mut Tape<T>,
    v: Var,
    q: Var,
    w4: Var,
    w5: Var,
    w_a: Var,
    w_eta: Var,
    b_a: Var,
    b_eta: Var,
) -> Result<Var> {
    let q_v = context_attention(tape, q, v, w4, w5)?;
    let scale = gate(tape, w_a, q_v, b_a)?;
    let shift = gate(tape, w_eta, q_v, b_eta)?;
    let normed = normalize_cols(tape, v)?;
    let scaled = tape.mul(scale, normed)?;
    Ok(tape.add(scaled, shift)?)
}

/// Adaptive knowledge augmentation: each capsule attends over the facts and
/// a gate `σ(W₈V − W₉K_v)` blends the attended knowledge with the capsule.
pub fn knowledge_augment<T: Scalar>(
    tape: &mut Tape<T>,
    v: Var,
    k: Var,
    w6: Var,
    w7: Var,
    w8: Var,
    w9: Var,
) -> Result<Var> {
    let k_v = context_attention(tape, k, v, w6, w7)?;
    let from_v = tape.matmul(w8, v)?;
    let from_k = tape.matmul(w9, k_v)?;
    let pre = tape.sub(from_v, from_k)?;
    let g = tape.sigmoid(pre)?;
    let keep = tape.one_minus(g)?;
    let knowledge = tape.mul(g, k_v)?;
    let retained = tape.mul(keep, v)?;
    Ok(tape.add(knowledge, retained)?)
}

/// Auxiliary inputs available to the modules.
#[derive(Clone, Copy, Debug)]
pub struct ModuleContext {
    pub question: Var,
    pub knowledge: Option<Var>,
}

/// Applies module `kind` to `v` with the auxiliary input it needs: none for
/// R1/R2, the question for R3/R4, knowledge for R5.
pub fn dispatch<T: Scalar>(
    tape: &mut Tape<T>,
    kind: ModuleKind,
    v: Var,
    ctx: &ModuleContext,
    params: &BoundParams,
) -> Result<Var> {
    let p = |name: &str| params.get(name);
    match kind {
        ModuleKind::FocalContext => focal_context(tape, v, p("R1.W_1")?, p("R1.W_2")?, p("R1.W_3")?),
        ModuleKind::Identity => Ok(identity(v)),
        ModuleKind::GlobalReduction => global_reduction(
            tape,
            v,
            ctx.question,
            p("R3.W_a")?,
            p("R3.W_eta")?,
            p("R3.b_a")?,
            p("R3.b_eta")?,
        ),
        ModuleKind::LocalSemantic => local_semantic(
            tape,
            v,
            ctx.question,
            p("R4.W_4")?,
            p("R4.W_5")?,
            p("R4.W_a")?,
            p("R4.W_eta")?,
            p("R4.b_a")?,
            p("R4.b_eta")?,
        ),
        ModuleKind::KnowledgeAugment => {
            let k = ctx.knowledge.ok_or(Error::KnowledgeDisabled)?;
            knowledge_augment(tape, v, k, p("R5.W_6")?, p("R5.W_7")?, p("R5.W_8")?, p("R5.W_9")?)
        }
    }
}

/// [`dispatch`] by 1-based module number.
pub fn dispatch_index<T: Scalar>(
    tape: &mut Tape<T>,
    m: usize,
    v: Var,
    ctx: &ModuleContext,
    params: &BoundParams,
) -> Result<Var> {
    dispatch(tape, ModuleKind::from_number(m)?, v, ctx, params)
}
