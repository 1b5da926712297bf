//! Learnable parameters, keyed by canonical name.
//!
//! Names carry a module prefix (`proj.`, `R1.`…`R5.`, `layer.`, `mem.`,
//! `head.`) followed by the symbol of the weight they hold.

use std::collections::HashMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Problem dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// Raw visual feature size.
    pub d_v: usize,
    /// Capsule size.
    pub d: usize,
    /// Raw knowledge feature size.
    pub d_k: usize,
    /// Capsules per instance.
    pub n: usize,
    /// Question words.
    pub l: usize,
    /// Knowledge facts.
    pub k: usize,
    /// Candidate answers.
    pub a: usize,
}

impl Dims {
    pub fn desk() -> Self {
        Self {
            d_v: 64,
            d: 32,
            d_k: 24,
            n: 12,
            l: 6,
            k: 8,
            a: 16,
        }
    }

    /// Smallest configuration used for gradient checks.
    pub fn tiny() -> Self {
        Self {
            d_v: 12,
            d: 8,
            d_k: 6,
            n: 5,
            l: 4,
            k: 3,
            a: 6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("d_v", self.d_v),
            ("d", self.d),
            ("d_k", self.d_k),
            ("N", self.n),
            ("L", self.l),
            ("K", self.k),
            ("A", self.a),
        ];
        match all.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(Error::Config(format!("dimension {name} must be at least 1"))),
            None => Ok(()),
        }
    }
}

impl Default for Dims {
    fn default() -> Self {
        Self::desk()
    }
}

/// The five specialized modules.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModuleKind {
    #[serde(rename = "R1")]
    FocalContext,
    #[serde(rename = "R2")]
    Identity,
    #[serde(rename = "R3")]
    GlobalReduction,
    #[serde(rename = "R4")]
    LocalSemantic,
    #[serde(rename = "R5")]
    KnowledgeAugment,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 5] = [
        ModuleKind::FocalContext,
        ModuleKind::Identity,
        ModuleKind::GlobalReduction,
        ModuleKind::LocalSemantic,
        ModuleKind::KnowledgeAugment,
    ];

    /// 1-based module number.
    pub fn number(self) -> usize {
        self as usize + 1
    }

    pub fn from_number(m: usize) -> Result<Self> {
        match m {
            1..=5 => Ok(Self::ALL[m - 1]),
            _ => Err(Error::UnknownModule(m)),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let n = s
            .trim()
            .trim_start_matches(['R', 'r'])
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("unknown module {s:?}")))?;
        Self::from_number(n)
    }
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "R{}", self.number())
    }
}

/// Dimensions plus the ordered list of active modules.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub dims: Dims,
    pub modules: Vec<ModuleKind>,
}

impl Architecture {
    /// All five modules, or four when knowledge is disabled.
    pub fn full(dims: Dims, with_knowledge: bool) -> Self {
        Self::with_disabled(dims, with_knowledge, &[]).expect("at least R1..R4 remain")
    }

    pub fn with_disabled(dims: Dims, with_knowledge: bool, disabled: &[ModuleKind]) -> Result<Self> {
        dims.validate()?;
        let modules: Vec<ModuleKind> = ModuleKind::ALL
            .into_iter()
            .filter(|m| !disabled.contains(m))
            .filter(|m| with_knowledge || *m != ModuleKind::KnowledgeAugment)
            .collect();
        if modules.is_empty() {
            return Err(Error::Config("at least one module must stay enabled".into()));
        }
        Ok(Self { dims, modules })
    }

    /// Number of routed modules M.
    pub fn m(&self) -> usize {
        self.modules.len()
    }

    pub fn has(&self, kind: ModuleKind) -> bool {
        self.modules.contains(&kind)
    }

    pub fn uses_knowledge(&self) -> bool {
        self.has(ModuleKind::KnowledgeAugment)
    }

    /// Every parameter name with its shape, in canonical order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let Dims { d_v, d, d_k, a, .. } = self.dims;
        let sq = vec![d, d];
        let mut out: Vec<(String, Vec<usize>)> = vec![
            ("proj.W_proj".into(), vec![d, d_v]),
            ("proj.W_qhat".into(), vec![1, d]),
        ];
        if self.uses_knowledge() {
            out.push(("proj.W_k".into(), vec![d, d_k]));
        }
        for kind in &self.modules {
            let names: &[(&str, Vec<usize>)] = match kind {
                ModuleKind::FocalContext => &[
                    ("R1.W_1", sq.clone()),
                    ("R1.W_2", sq.clone()),
                    ("R1.W_3", vec![2]),
                ],
                ModuleKind::Identity => &[],
                ModuleKind::GlobalReduction => &[
                    ("R3.W_a", sq.clone()),
                    ("R3.W_eta", sq.clone()),
                    ("R3.b_a", vec![d]),
                    ("R3.b_eta", vec![d]),
                ],
                ModuleKind::LocalSemantic => &[
                    ("R4.W_4", sq.clone()),
                    ("R4.W_5", sq.clone()),
                    ("R4.W_a", sq.clone()),
                    ("R4.W_eta", sq.clone()),
                    ("R4.b_a", vec![d]),
                    ("R4.b_eta", vec![d]),
                ],
                ModuleKind::KnowledgeAugment => &[
                    ("R5.W_6", sq.clone()),
                    ("R5.W_7", sq.clone()),
                    ("R5.W_8", sq.clone()),
                    ("R5.W_9", sq.clone()),
                ],
            };
            out.extend(names.iter().map(|(n, s)| (n.to_string(), s.clone())));
        }
        for kind in &self.modules {
            out.push((format!("layer.W_g.{}", kind.number()), vec![self.m(), d]));
        }
        for name in ["mem.W_z", "mem.W_h", "mem.W_u", "mem.W_r"] {
            out.push((name.into(), sq.clone()));
        }
        out.push(("head.W_y".into(), vec![a, d]));
        out.push(("head.W_u".into(), sq.clone()));
        out.push(("head.W_q".into(), sq.clone()));
        out
    }
}

/// Named parameter tensors in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ModelParams<T> {
    /// Seeded initialization: weights `N(0, 1/fan_in)`, biases zero, the
    /// tied `R1.W_3` pair `N(0, 0.01)`.
    pub fn init(arch: &Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = arch
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let len: usize = shape.iter().product();
                let std = if name.contains(".b_") {
                    0.0
                } else if name == "R1.W_3" {
                    0.1
                } else if name.starts_with("layer.W_g") {
                    0.01
                } else {
                    1.0 / (shape[shape.len() - 1] as f64).sqrt()
                };
                let data = (0..len)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        T::from_f64_lossy(z * std)
                    })
                    .collect();
                let t = Tensor::new(shape, data).expect("declared shape");
                (name, t)
            })
            .collect();
        Self::from_entries(entries)
    }

    pub fn from_entries(entries: Vec<(String, Tensor<T>)>) -> Self {
        let (names, tensors): (Vec<_>, Vec<_>) = entries.into_iter().unzip();
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self { names, tensors, index }
    }

    /// Checks that the parameter set is exactly what `arch` declares.
    pub fn validate(&self, arch: &Architecture) -> Result<()> {
        let expected = arch.param_shapes();
        for (name, shape) in &expected {
            let t = self.get(name).ok_or_else(|| Error::MissingParam(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ParamShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    got: t.shape().to_vec(),
                });
            }
        }
        if let Some(extra) = self.names.iter().find(|n| !expected.iter().any(|(e, _)| e == *n)) {
            return Err(Error::UnexpectedParam(extra.clone()));
        }
        Ok(())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    pub fn with_tensors(&self, tensors: Vec<Tensor<T>>) -> Self {
        assert_eq!(tensors.len(), self.tensors.len());
        Self {
            names: self.names.clone(),
            tensors,
            index: self.index.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Places every parameter on `tape` (tracked or not) in canonical order.
    pub fn bind(&self, tape: &mut Tape<T>, tracked: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if tracked {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        self.bind_vars(vars)
    }

    /// Wraps variables already on a tape, one per parameter in canonical order.
    pub fn bind_vars(&self, vars: Vec<Var>) -> BoundParams {
        assert_eq!(vars.len(), self.tensors.len());
        BoundParams {
            vars,
            index: self.index.clone(),
        }
    }
}

/// Parameters placed on a tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
