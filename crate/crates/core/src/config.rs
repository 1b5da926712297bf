//! Run configuration: one flat JSON object. Every key is optional and
//! falls back to the desk-scale default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{mix_seed, TaskSpec};
use crate::error::{Error, Result};
use crate::layer::{LayerOptions, RouterMode};
use crate::network::ForwardConfig;
use crate::params::{Architecture, Dims, ModuleKind};
use crate::train::{AblationConfig, LrSchedule, TrainSettings};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub d_v: usize,
    pub d: usize,
    pub d_k: usize,
    pub n: usize,
    pub l: usize,
    pub k: usize,
    pub a: usize,
    pub with_knowledge: bool,
    /// Layer iterations T.
    pub iterations: usize,

    pub batch_size: usize,
    pub epochs: usize,
    /// Seeds parameter init, shuffling and random gates.
    pub seed: u64,
    pub lr_warmup_step: f64,
    pub lr_max: f64,
    pub lr_decay_after: usize,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub lr_min: f64,

    pub disabled_modules: Vec<ModuleKind>,
    pub router: RouterMode,
    pub agreements: bool,
    pub memory: bool,

    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    pub rule_mix: [f64; 3],
    pub num_tags: usize,
    pub num_entities: usize,
    pub visual_noise: f64,
    pub question_noise: f64,
    pub knowledge_noise: f64,
    pub data_seed: u64,

    pub data_dir: Option<String>,
    pub out_dir: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let dims = Dims::desk();
        let task = TaskSpec::default();
        let schedule = LrSchedule::default();
        let train = TrainSettings::default();
        Self {
            d_v: dims.d_v,
            d: dims.d,
            d_k: dims.d_k,
            n: dims.n,
            l: dims.l,
            k: dims.k,
            a: dims.a,
            with_knowledge: true,
            iterations: crate::network::DEFAULT_ITERATIONS,
            batch_size: train.batch_size,
            epochs: train.epochs,
            seed: train.seed,
            lr_warmup_step: schedule.warmup_step,
            lr_max: schedule.max_lr,
            lr_decay_after: schedule.decay_after,
            lr_decay_factor: schedule.decay_factor,
            lr_decay_every: schedule.decay_every,
            lr_min: schedule.min_lr,
            disabled_modules: Vec::new(),
            router: RouterMode::Learned,
            agreements: true,
            memory: true,
            train_count: task.train,
            val_count: task.val,
            test_count: task.test,
            rule_mix: task.rule_mix,
            num_tags: task.num_tags,
            num_entities: task.num_entities,
            visual_noise: task.visual_noise,
            question_noise: task.question_noise,
            knowledge_noise: task.knowledge_noise,
            data_seed: task.master_seed,
            data_dir: None,
            out_dir: None,
        }
    }
}

impl RunConfig {
    /// The gradient-check configuration: smallest dims, two iterations.
    pub fn tiny() -> Self {
        let dims = Dims::tiny();
        Self {
            d_v: dims.d_v,
            d: dims.d,
            d_k: dims.d_k,
            n: dims.n,
            l: dims.l,
            k: dims.k,
            a: dims.a,
            iterations: 2,
            num_tags: dims.a,
            num_entities: dims.a,
            train_count: 60,
            val_count: 30,
            test_count: 30,
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let config: Self =
            serde_json::from_str(&text).map_err(|e| Error::json(format!("parsing {}", path.display()), e))?;
        config.validate()?;
        Ok(config)
    }

    pub fn dims(&self) -> Dims {
        Dims {
            d_v: self.d_v,
            d: self.d,
            d_k: self.d_k,
            n: self.n,
            l: self.l,
            k: self.k,
            a: self.a,
        }
    }

    pub fn with_dims(mut self, dims: Dims) -> Self {
        let Dims { d_v, d, d_k, n, l, k, a } = dims;
        (self.d_v, self.d, self.d_k, self.n, self.l, self.k, self.a) = (d_v, d, d_k, n, l, k, a);
        self
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            warmup_step: self.lr_warmup_step,
            max_lr: self.lr_max,
            decay_after: self.lr_decay_after,
            decay_factor: self.lr_decay_factor,
            decay_every: self.lr_decay_every,
            min_lr: self.lr_min,
        }
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            schedule: self.schedule(),
        }
    }

    pub fn ablation(&self) -> AblationConfig {
        AblationConfig {
            disabled_modules: self.disabled_modules.clone(),
            router_mode: self.router,
            agreements_enabled: self.agreements,
            memory_enabled: self.memory,
        }
    }

    pub fn set_ablation(&mut self, ablation: &AblationConfig) {
        self.disabled_modules = ablation.disabled_modules.clone();
        self.router = ablation.router_mode;
        self.agreements = ablation.agreements_enabled;
        self.memory = ablation.memory_enabled;
    }

    pub fn architecture(&self) -> Result<Architecture> {
        Architecture::with_disabled(self.dims(), self.with_knowledge, &self.disabled_modules)
    }

    pub fn forward_config(&self) -> ForwardConfig {
        ForwardConfig {
            iterations: self.iterations,
            layer: LayerOptions {
                router: self.router,
                agreements: self.agreements,
                memory: self.memory,
            },
            gate_seed: mix_seed(self.seed, 0x6761_7465),
        }
    }

    /// Seed for parameter initialization.
    pub fn init_seed(&self) -> u64 {
        mix_seed(self.seed, 0x696e_6974)
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            dims: self.dims(),
            train: self.train_count,
            val: self.val_count,
            test: self.test_count,
            rule_mix: self.rule_mix,
            num_tags: self.num_tags,
            num_entities: self.num_entities,
            visual_noise: self.visual_noise,
            question_noise: self.question_noise,
            knowledge_noise: self.knowledge_noise,
            master_seed: self.data_seed,
            ..TaskSpec::default()
        }
    }

    /// Rejects inconsistent settings before any compute.
    pub fn validate(&self) -> Result<()> {
        self.dims().validate()?;
        if self.iterations == 0 {
            return Err(Error::Config("iterations (T) must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        self.schedule().validate()?;
        self.architecture()?;
        self.task_spec().validate()
    }
}
