//! File-producing workflows shared by the command-line tool and the tests:
//! training runs, route-trace export and the whole-model gradient check.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{Dataset, Instance};
use crate::error::{Error, Result};
use crate::gradcheck::{finite_diff_check, GradCheckError, GradCheckReport, Objective, DEFAULT_STEP};
use crate::network::{loss_and_grad, predict, ForwardConfig};
use crate::params::{Architecture, ModelParams};
use crate::tensor::Tensor;
use crate::train::{train, EpochMetrics, TrainObserver, TrainOutcome};

pub const BEST_CHECKPOINT: &str = "best.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TRACES_FILE: &str = "traces.jsonl";
pub const MASKS_FILE: &str = "masks.jsonl";
pub const PATHS_FILE: &str = "paths.csv";

/// Checks that a dataset was generated for the configured dimensions.
pub fn check_dataset_dims(config: &RunConfig, dataset: &Dataset) -> Result<()> {
    if dataset.spec.dims != config.dims() {
        return Err(Error::Config(format!(
            "dataset dims {:?} do not match configured dims {:?}",
            dataset.spec.dims,
            config.dims()
        )));
    }
    Ok(())
}

struct FileObserver {
    config: RunConfig,
    metrics: BufWriter<fs::File>,
    best_path: PathBuf,
}

impl TrainObserver for FileObserver {
    fn epoch_end(&mut self, metrics: &EpochMetrics, _params: &ModelParams<f32>) -> Result<()> {
        let line = serde_json::to_string(metrics).map_err(|e| Error::json("serializing metrics", e))?;
        writeln!(self.metrics, "{line}")
            .and_then(|_| self.metrics.flush())
            .map_err(|e| Error::io("writing metrics log", e))
    }

    fn new_best(&mut self, _epoch: usize, params: &ModelParams<f32>) -> Result<()> {
        checkpoint::save(&self.best_path, &self.config, params).map(|_| ())
    }
}

/// Trains from the configured seed, writing `best.json`/`best.bin` and
/// `metrics.jsonl` into `out_dir`. The initial parameters are checkpointed
/// before the first epoch, so a numerical failure leaves the last good
/// checkpoint on disk.
pub fn train_to_dir(config: &RunConfig, dataset: &Dataset, out_dir: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    check_dataset_dims(config, dataset)?;
    let arch = config.architecture()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let initial = ModelParams::<f32>::init(&arch, config.init_seed());
    let best_path = out_dir.join(BEST_CHECKPOINT);
    checkpoint::save(&best_path, config, &initial)?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let file =
        fs::File::create(&metrics_path).map_err(|e| Error::io(format!("creating {}", metrics_path.display()), e))?;
    let mut observer = FileObserver {
        config: config.clone(),
        metrics: BufWriter::new(file),
        best_path,
    };
    train(
        &arch,
        initial,
        dataset,
        &config.forward_config(),
        &config.train_settings(),
        &mut observer,
    )
}

/// Writes `traces.jsonl`, `masks.jsonl` and `paths.csv` for `instances`.
pub fn write_traces(
    arch: &Architecture,
    params: &ModelParams<f32>,
    instances: &[Instance],
    forward: &ForwardConfig,
    threshold: f64,
    out_dir: &Path,
) -> Result<()> {
    if !(threshold.is_finite() && (0.0..=1.0).contains(&threshold)) {
        return Err(Error::Config(format!("threshold {threshold} is outside [0, 1]")));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let open = |name: &str| -> Result<BufWriter<fs::File>> {
        let path = out_dir.join(name);
        fs::File::create(&path)
            .map(BufWriter::new)
            .map_err(|e| Error::io(format!("creating {}", path.display()), e))
    };
    let (mut traces, mut masks, mut paths) = (open(TRACES_FILE)?, open(MASKS_FILE)?, open(PATHS_FILE)?);
    let m = arch.m();
    for inst in instances {
        let pred = predict(arch, params, inst, forward, 0)?;
        let trace = pred.trace(inst, threshold);
        let mask: Vec<Vec<Vec<bool>>> = trace
            .path_vector
            .chunks(m * m)
            .map(|it| it.chunks(m).map(|row| row.iter().map(|&b| b == 1).collect()).collect())
            .collect();
        let mut gate_values = Vec::with_capacity(m * m * forward.iterations);
        for it in &trace.iterations {
            gate_values.extend(it.gates.iter().flatten().copied());
        }
        let io = |e| Error::io("writing trace files", e);
        let json = serde_json::to_string(&trace).map_err(|e| Error::json("serializing trace", e))?;
        writeln!(traces, "{json}").map_err(io)?;
        let json = serde_json::to_string(&serde_json::json!({ "rule": inst.rule, "mask": mask }))
            .map_err(|e| Error::json("serializing mask", e))?;
        writeln!(masks, "{json}").map_err(io)?;
        let mut row = inst.rule.id().to_string();
        for g in gate_values {
            row.push(',');
            row.push_str(&g.to_string());
        }
        writeln!(paths, "{row}").map_err(io)?;
    }
    for w in [&mut traces, &mut masks, &mut paths] {
        w.flush().map_err(|e| Error::io("flushing trace files", e))?;
    }
    Ok(())
}

/// Full-model loss as a function of every parameter, in 64-bit.
pub struct ModelObjective<'a> {
    pub arch: &'a Architecture,
    pub template: &'a ModelParams<f64>,
    pub instance: &'a Instance,
    pub forward: ForwardConfig,
    /// Test hook: adds 1.0 to the first entry of this parameter's gradient.
    pub corrupt: Option<usize>,
}

impl Objective for ModelObjective<'_> {
    fn value(&self, params: &[Tensor<f64>]) -> Result<f64> {
        let p = self.template.with_tensors(params.to_vec());
        Ok(predict(self.arch, &p, self.instance, &self.forward, 0)?.loss)
    }

    fn gradient(&self, params: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
        let p = self.template.with_tensors(params.to_vec());
        let (_, mut grads) = loss_and_grad(self.arch, &p, self.instance, &self.forward, 0)?;
        if let Some(i) = self.corrupt {
            if let Some(first) = grads.get_mut(i).and_then(|g| g.data_mut().first_mut()) {
                *first += 1.0;
            }
        }
        Ok(grads)
    }
}

/// Named per-parameter gradient-check results.
pub struct NamedReport {
    pub names: Vec<String>,
    pub report: GradCheckReport,
}

/// Checks the whole-model gradient on the first training instance of the
/// configured task, with parameters drawn from `seed`.
pub fn model_gradcheck(config: &RunConfig, seed: u64, corrupt: Option<&str>) -> Result<NamedReport, GradCheckError> {
    config.validate()?;
    let arch = config.architecture()?;
    let spec = crate::data::TaskSpec {
        train: 1,
        val: 0,
        test: 0,
        ..config.task_spec()
    };
    let instance = crate::data::generate_split(&spec, crate::data::Split::Train)?
        .pop()
        .ok_or_else(|| Error::Config("no instance generated".into()))?;
    let params = ModelParams::<f64>::init(&arch, seed);
    let corrupt = match corrupt {
        Some(name) => Some(params.position(name).ok_or_else(|| Error::MissingParam(name.to_string()))?),
        None => None,
    };
    let objective = ModelObjective {
        arch: &arch,
        template: &params,
        instance: &instance,
        forward: config.forward_config(),
        corrupt,
    };
    let report = finite_diff_check(&objective, params.tensors(), DEFAULT_STEP)?;
    Ok(NamedReport {
        names: params.names().to_vec(),
        report,
    })
}
