//! Full network: feature encoding, `T` shared-weight layer iterations, answer
//! head, loss, and route traces.

use serde::{Deserialize, Serialize};

use crate::data::{project_features, project_knowledge, regulate_question, Instance};
use crate::error::{Error, Result};
use crate::layer::{super_layer_step, GateSampler, GateSnapshot, LayerOptions, LayerState};
use crate::modules::ModuleContext;
use crate::params::{Architecture, BoundParams, ModelParams};
use crate::tape::{Tape, Var};
use crate::tensor::{sigmoid_scalar, Scalar, Tensor};

/// Gate threshold used when discretizing routes.
pub const DEFAULT_PATH_THRESHOLD: f64 = 0.6;

/// Layer iterations at desk scale.
pub const DEFAULT_ITERATIONS: usize = 2;

/// Taped result of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward<T> {
    /// Answer logits, length A.
    pub logits: Var,
    /// Final memory capsules.
    pub memory: Var,
    pub snapshots: Vec<GateSnapshot<T>>,
}

/// Answer head: `W_y (W_u · pool(U) + W_q · pool(Q))`, returned as logits.
pub fn answer_logits<T: Scalar>(tape: &mut Tape<T>, u: Var, q: Var, params: &BoundParams) -> Result<Var> {
    let pooled_u = tape.avg_pool_cols(u)?;
    let pooled_q = tape.avg_pool_cols(q)?;
    let from_u = tape.matmul(params.get("head.W_u")?, pooled_u)?;
    let from_q = tape.matmul(params.get("head.W_q")?, pooled_q)?;
    let joint = tape.add(from_u, from_q)?;
    Ok(tape.matmul(params.get("head.W_y")?, joint)?)
}

/// Runs `iterations` layer steps on one instance, starting from its raw
/// features. Inputs are placed on the tape as constants.
pub fn run_network<T: Scalar>(
    tape: &mut Tape<T>,
    arch: &Architecture,
    params: &BoundParams,
    inst: &Instance,
    iterations: usize,
    options: &LayerOptions,
    sampler: &mut Option<GateSampler>,
) -> Result<Forward<T>> {
    if iterations == 0 {
        return Err(Error::Config("at least one iteration is required".into()));
    }
    let visual = tape.constant(inst.visual.cast());
    let question = tape.constant(inst.question.cast());
    let v = project_features(tape, visual, params.get("proj.W_proj")?)?;
    let q = regulate_question(tape, question, params.get("proj.W_qhat")?)?;
    let knowledge = if arch.uses_knowledge() {
        let raw = tape.constant(inst.knowledge.cast());
        Some(project_knowledge(tape, raw, params.get("proj.W_k")?)?)
    } else {
        None
    };
    let ctx = ModuleContext {
        question: q,
        knowledge,
    };
    let mut state = LayerState::init(tape, arch, v, q)?;
    let mut snapshots = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let (next, snap) = super_layer_step(tape, arch, &state, &ctx, params, options, sampler)?;
        state = next;
        snapshots.push(snap);
    }
    let logits = answer_logits(tape, state.u, q, params)?;
    Ok(Forward {
        logits,
        memory: state.u,
        snapshots,
    })
}

/// Exact-match credit against `count` annotators agreeing on an answer.
pub fn vqa_accuracy(count: i64) -> Result<f64> {
    if count < 0 {
        return Err(Error::Config(format!("annotator count must be non-negative, got {count}")));
    }
    Ok((count as f64 / 3.0).min(1.0))
}

/// Thresholds every gate of every iteration: `M²·T` entries, iteration-major,
/// then emitting module, then receiving module.
pub fn discretize_paths<T: Scalar>(snapshots: &[GateSnapshot<T>], threshold: f64) -> Vec<u8> {
    snapshots
        .iter()
        .flat_map(|s| s.gates.data().iter().map(move |g| u8::from(g.to_f64_lossy() > threshold)))
        .collect()
}

/// Everything recorded about one instance's route.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteTrace {
    pub rule: crate::data::Rule,
    pub iterations: Vec<IterationTrace>,
    pub path_vector: Vec<u8>,
    pub prediction: usize,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    /// Row `m` holds the gates emitted by module `m`.
    #[serde(rename = "G")]
    pub gates: Vec<Vec<f64>>,
    /// Coupling coefficients, one row per module.
    pub c: Vec<Vec<f64>>,
    /// Agreement logits, one row per module.
    pub b: Vec<Vec<f64>>,
}

fn rows_f64<T: Scalar>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|i| t.row(i).iter().map(|x| x.to_f64_lossy()).collect())
        .collect()
}

impl IterationTrace {
    pub fn from_snapshot<T: Scalar>(s: &GateSnapshot<T>) -> Self {
        Self {
            gates: rows_f64(&s.gates),
            c: rows_f64(&s.coupling),
            b: rows_f64(&s.logits),
        }
    }
}

/// Forward-pass settings beyond the parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardConfig {
    pub iterations: usize,
    pub layer: LayerOptions,
    /// Mixed with each instance seed to seed random gates.
    pub gate_seed: u64,
}

impl Default for ForwardConfig {
    fn default() -> Self {
        Self {
            iterations: DEFAULT_ITERATIONS,
            layer: LayerOptions::default(),
            gate_seed: 0,
        }
    }
}

impl ForwardConfig {
    /// Gate sampler for one pass over `inst`, if the router is random.
    /// `salt` distinguishes passes over the same instance, e.g. epochs.
    pub fn sampler_for(&self, inst: &Instance, salt: u64) -> Option<GateSampler> {
        use crate::data::mix_seed;
        (self.layer.router == crate::layer::RouterMode::Random)
            .then(|| GateSampler::new(mix_seed(mix_seed(self.gate_seed, inst.seed), salt)))
    }
}

/// Untaped prediction for one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    pub logits: Vec<T>,
    pub loss: T,
    pub snapshots: Vec<GateSnapshot<T>>,
}

impl<T: Scalar> Prediction<T> {
    pub fn probabilities(&self) -> Vec<T> {
        self.logits.iter().map(|&z| sigmoid_scalar(z)).collect()
    }

    pub fn answer(&self) -> usize {
        crate::tensor::argmax(&self.logits)
    }

    pub fn trace(&self, inst: &Instance, threshold: f64) -> RouteTrace {
        RouteTrace {
            rule: inst.rule,
            iterations: self.snapshots.iter().map(IterationTrace::from_snapshot).collect(),
            path_vector: discretize_paths(&self.snapshots, threshold),
            prediction: self.answer(),
            label: inst.answer(),
        }
    }
}

fn labels_as<T: Scalar>(inst: &Instance) -> Vec<T> {
    inst.labels.iter().map(|&l| T::from_f64_lossy(l)).collect()
}

/// Evaluates the network on one instance without tracking gradients.
pub fn predict<T: Scalar>(
    arch: &Architecture,
    params: &ModelParams<T>,
    inst: &Instance,
    config: &ForwardConfig,
    salt: u64,
) -> Result<Prediction<T>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let mut sampler = config.sampler_for(inst, salt);
    let fwd = run_network(&mut tape, arch, &bound, inst, config.iterations, &config.layer, &mut sampler)?;
    let loss = tape.bce_with_logits(fwd.logits, &labels_as(inst))?;
    Ok(Prediction {
        logits: tape.value(fwd.logits).data().to_vec(),
        loss: tape.value(loss).data()[0],
        snapshots: fwd.snapshots,
    })
}

/// Loss and its gradient with respect to every parameter, in canonical order.
pub fn loss_and_grad<T: Scalar>(
    arch: &Architecture,
    params: &ModelParams<T>,
    inst: &Instance,
    config: &ForwardConfig,
    salt: u64,
) -> Result<(T, Vec<Tensor<T>>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let mut sampler = config.sampler_for(inst, salt);
    let fwd = run_network(&mut tape, arch, &bound, inst, config.iterations, &config.layer, &mut sampler)?;
    let loss = tape.bce_with_logits(fwd.logits, &labels_as(inst))?;
    let loss_value = tape.value(loss).data()[0];
    let mut grads = tape.backward(loss)?;
    let out = bound
        .vars()
        .iter()
        .map(|&v| grads.take(v).expect("parameter is tracked"))
        .collect();
    Ok((loss_value, out))
}
