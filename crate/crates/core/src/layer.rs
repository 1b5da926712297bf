//! One SUPER layer step: modular routing, gating agreements, memory
//! reactivation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modules::{dispatch, ModuleContext};
use crate::params::{Architecture, BoundParams};
use crate::tape::{Axis, Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Where the routing gates come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RouterMode {
    /// `σ(W_g · pool(V_m))`.
    #[default]
    Learned,
    /// Independent `U(0,1)` draws per gate, iteration and instance.
    Random,
    /// No router: every gate is 1.
    None,
}

/// Mechanism switches for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerOptions {
    pub router: RouterMode,
    pub agreements: bool,
    pub memory: bool,
}

impl Default for LayerOptions {
    fn default() -> Self {
        Self {
            router: RouterMode::Learned,
            agreements: true,
            memory: true,
        }
    }
}

/// Source of gate values when the learned router is replaced.
#[derive(Clone, Debug)]
pub struct GateSampler {
    rng: ChaCha8Rng,
}

impl GateSampler {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// One draw from the open interval (0, 1).
    pub fn draw(&mut self) -> f64 {
        loop {
            let u: f64 = self.rng.random();
            if u > 0.0 {
                return u;
            }
        }
    }
}

/// Per-iteration routing state of one instance.
#[derive(Clone, Debug)]
pub struct LayerState {
    /// Capsule inputs of every active module.
    pub v: Vec<Var>,
    /// Memory capsules.
    pub u: Var,
    /// Agreement logits per module, length N each.
    pub b: Vec<Var>,
    /// Overlying capsules.
    pub h: Var,
}

impl LayerState {
    /// Initial state: every module sees `V`, memory is the pooled question
    /// broadcast over capsules, `H = 0`, `b = 0`.
    pub fn init<T: Scalar>(tape: &mut Tape<T>, arch: &Architecture, v: Var, q: Var) -> Result<Self> {
        let (d, n) = (tape.value(v).rows(), tape.value(v).cols());
        let pooled = tape.avg_pool_cols(q)?;
        let u = tape.broadcast_cols(pooled, n)?;
        let h = tape.constant(Tensor::zeros(&[d, n]));
        let b = (0..arch.m()).map(|_| tape.constant(Tensor::zeros(&[n]))).collect();
        Ok(Self {
            v: vec![v; arch.m()],
            u,
            b,
            h,
        })
    }
}

/// Values recorded for one iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct GateSnapshot<T> {
    /// `M×M`; row `m` holds the gates emitted by module `m`.
    pub gates: Tensor<T>,
    /// `M×N` coupling coefficients.
    pub coupling: Tensor<T>,
    /// `M×N` agreement logits.
    pub logits: Tensor<T>,
}

/// Router of module `m`: `σ(W_g · pool(V_m))`, an M-vector.
pub fn route_gates<T: Scalar>(tape: &mut Tape<T>, v_m: Var, w_g: Var) -> Result<Var> {
    let pooled = tape.avg_pool_cols(v_m)?;
    let logits = tape.matmul(w_g, pooled)?;
    Ok(tape.sigmoid(logits)?)
}

/// `V_m ← Σ_{m*} g_{m*→m} · R_{m*}(V_{m*})`. `gates[m*]` is the M-vector
/// emitted by module `m*`.
pub fn dispatch_and_aggregate<T: Scalar>(tape: &mut Tape<T>, outputs: &[Var], gates: &[Var]) -> Result<Vec<Var>> {
    let m_count = outputs.len();
    let mut next = Vec::with_capacity(m_count);
    for target in 0..m_count {
        let mut total = tape.scale_by_entry(outputs[0], gates[0], target)?;
        for source in 1..m_count {
            let part = tape.scale_by_entry(outputs[source], gates[source], target)?;
            total = tape.add(total, part)?;
        }
        next.push(total);
    }
    Ok(next)
}

/// Routing-by-agreement. Returns `(H, b_new, c)` where
/// `b_new[m] = b_prev[m] + squash_rate(V_m ⊙ U_prev)`, `c_m = softmax(b_new[m])`
/// and `H = Σ_m V_m · diag(c_m)`.
pub fn gating_agreements<T: Scalar>(
    tape: &mut Tape<T>,
    v: &[Var],
    u_prev: Var,
    b_prev: &[Var],
) -> Result<(Var, Vec<Var>, Vec<Var>)> {
    let mut b_new = Vec::with_capacity(v.len());
    let mut coupling = Vec::with_capacity(v.len());
    let mut h: Option<Var> = None;
    for (&v_m, &b_m) in v.iter().zip(b_prev) {
        let agreement = tape.mul(v_m, u_prev)?;
        let rate = tape.squash_rate_cols(agreement)?;
        let b = tape.add(b_m, rate)?;
        let c = tape.softmax(b, Axis::Rows)?;
        let weighted = tape.diag_scale_cols(v_m, c)?;
        h = Some(match h {
            Some(acc) => tape.add(acc, weighted)?,
            None => weighted,
        });
        b_new.push(b);
        coupling.push(c);
    }
    Ok((h.expect("at least one module"), b_new, coupling))
}

/// GRU-style memory update:
/// `z_u = σ(W_u(H − U))`, `z_r = σ(W_r(H − U))`, `U* = W_z(z_r ⊙ U) + W_h H`,
/// `U' = (1 − z_u) ⊙ U + z_u ⊙ U*`.
pub fn memory_reactivate<T: Scalar>(
    tape: &mut Tape<T>,
    h: Var,
    u_prev: Var,
    w_z: Var,
    w_h: Var,
    w_u: Var,
    w_r: Var,
) -> Result<Var> {
    let diff = tape.sub(h, u_prev)?;
    let zu_pre = tape.matmul(w_u, diff)?;
    let z_u = tape.sigmoid(zu_pre)?;
    let zr_pre = tape.matmul(w_r, diff)?;
    let z_r = tape.sigmoid(zr_pre)?;
    let reset = tape.mul(z_r, u_prev)?;
    let cand_u = tape.matmul(w_z, reset)?;
    let cand_h = tape.matmul(w_h, h)?;
    let candidate = tape.add(cand_u, cand_h)?;
    let keep = tape.one_minus(z_u)?;
    let kept = tape.mul(keep, u_prev)?;
    let fresh = tape.mul(z_u, candidate)?;
    Ok(tape.add(kept, fresh)?)
}

fn stack_rows<T: Scalar>(tape: &Tape<T>, vars: &[Var]) -> Tensor<T> {
    let rows: Vec<Vec<T>> = vars.iter().map(|&v| tape.value(v).data().to_vec()).collect();
    Tensor::from_rows(&rows).expect("equal-length rows")
}

/// One full layer step with shared parameters. Gates are computed from the
/// pre-update module inputs; modules run in architecture order.
pub fn super_layer_step<T: Scalar>(
    tape: &mut Tape<T>,
    arch: &Architecture,
    state: &LayerState,
    ctx: &ModuleContext,
    params: &BoundParams,
    options: &LayerOptions,
    sampler: &mut Option<GateSampler>,
) -> Result<(LayerState, GateSnapshot<T>)> {
    let m_count = arch.m();
    let (d, n) = (tape.value(state.u).rows(), tape.value(state.u).cols());

    let mut gates = Vec::with_capacity(m_count);
    for (idx, kind) in arch.modules.iter().enumerate() {
        let g = match options.router {
            RouterMode::Learned => {
                let w_g = params.get(&format!("layer.W_g.{}", kind.number()))?;
                route_gates(tape, state.v[idx], w_g)?
            }
            RouterMode::Random => {
                let s = sampler
                    .as_mut()
                    .ok_or_else(|| Error::Config("random router needs a gate sampler".into()))?;
                let draws = (0..m_count).map(|_| T::from_f64_lossy(s.draw())).collect();
                tape.constant(Tensor::vector(draws))
            }
            RouterMode::None => tape.constant(Tensor::filled(&[m_count], T::one())),
        };
        gates.push(g);
    }

    let mut outputs = Vec::with_capacity(m_count);
    for (idx, kind) in arch.modules.iter().enumerate() {
        outputs.push(dispatch(tape, *kind, state.v[idx], ctx, params)?);
    }
    let v_next = dispatch_and_aggregate(tape, &outputs, &gates)?;

    let (h, b_next, coupling) = if options.agreements {
        gating_agreements(tape, &v_next, state.u, &state.b)?
    } else {
        let mut sum = v_next[0];
        for &v in &v_next[1..] {
            sum = tape.add(sum, v)?;
        }
        let inv_m = T::one() / T::from_usize(m_count).unwrap();
        let h = tape.affine(sum, inv_m, T::zero())?;
        let uniform = tape.constant(Tensor::filled(&[n], T::one() / T::from_usize(n).unwrap()));
        (h, state.b.clone(), vec![uniform; m_count])
    };

    let u_next = if options.memory {
        memory_reactivate(
            tape,
            h,
            state.u,
            params.get("mem.W_z")?,
            params.get("mem.W_h")?,
            params.get("mem.W_u")?,
            params.get("mem.W_r")?,
        )?
    } else {
        h
    };

    debug_assert_eq!(tape.value(u_next).shape(), &[d, n]);
    let snapshot = GateSnapshot {
        gates: stack_rows(tape, &gates),
        coupling: stack_rows(tape, &coupling),
        logits: stack_rows(tape, &b_next),
    };
    Ok((
        LayerState {
            v: v_next,
            u: u_next,
            b: b_next,
            h,
        },
        snapshot,
    ))
}
