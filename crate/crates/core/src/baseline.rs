//! Pooled-linear reference classifier: multinomial logistic regression on
//! the column means of the visual and question features. It never sees the
//! knowledge facts.

use std::collections::BTreeMap;

use crate::data::{Instance, Rule};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::OptimizerState;

/// `[mean_cols(F); mean_cols(Q̂)]`.
pub fn pooled_features(inst: &Instance) -> Vec<f64> {
    let pool = |t: &Tensor<f64>| -> Vec<f64> {
        let n = t.cols() as f64;
        (0..t.rows()).map(|i| t.row(i).iter().sum::<f64>() / n).collect()
    };
    let mut x = pool(&inst.visual);
    x.extend(pool(&inst.question));
    x
}

#[derive(Clone, Debug, PartialEq)]
pub struct PooledLinear {
    /// `A × features`.
    pub weights: Tensor<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct BaselineSettings {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for BaselineSettings {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 0.05,
            l2: 1e-2,
        }
    }
}

fn softmax(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in z.iter_mut() {
        *v /= total;
    }
}

impl PooledLinear {
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.weights.rows())
            .map(|a| {
                let row = self.weights.row(a);
                self.bias[a] + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>()
            })
            .collect()
    }

    pub fn predict(&self, inst: &Instance) -> usize {
        crate::tensor::argmax(&self.logits(&pooled_features(inst)))
    }

    /// Full-batch Adam on mean cross-entropy plus an L2 penalty.
    pub fn fit(instances: &[Instance], answers: usize, settings: &BaselineSettings) -> Result<Self> {
        let first = instances
            .first()
            .ok_or_else(|| Error::Config("baseline needs training instances".into()))?;
        let width = pooled_features(first).len();
        let xs: Vec<Vec<f64>> = instances.iter().map(pooled_features).collect();
        let ys: Vec<usize> = instances.iter().map(Instance::answer).collect();
        let mut model = Self {
            weights: Tensor::zeros(&[answers, width]),
            bias: vec![0.0; answers],
        };
        let mut params = vec![model.weights.clone(), Tensor::vector(model.bias.clone())];
        let mut opt = OptimizerState::new(&params);
        let n = instances.len() as f64;
        for _ in 0..settings.epochs {
            let mut gw = Tensor::zeros(&[answers, width]);
            let mut gb = vec![0.0; answers];
            model.weights = params[0].clone();
            model.bias = params[1].data().to_vec();
            for (x, &y) in xs.iter().zip(&ys) {
                let mut p = model.logits(x);
                softmax(&mut p);
                p[y] -= 1.0;
                for (a, &err) in p.iter().enumerate() {
                    gb[a] += err / n;
                    let row = &mut gw.data_mut()[a * width..(a + 1) * width];
                    for (g, xi) in row.iter_mut().zip(x) {
                        *g += err * xi / n;
                    }
                }
            }
            for (g, w) in gw.data_mut().iter_mut().zip(params[0].data()) {
                *g += settings.l2 * w;
            }
            opt.step(&mut params, &[gw, Tensor::vector(gb)], settings.lr)?;
        }
        model.weights = params[0].clone();
        model.bias = params[1].data().to_vec();
        Ok(model)
    }

    /// Overall and per-rule exact-match accuracy.
    pub fn accuracy(&self, instances: &[Instance]) -> (f64, BTreeMap<Rule, f64>) {
        let mut by_rule: BTreeMap<Rule, (usize, usize)> = BTreeMap::new();
        let mut hits = 0;
        for inst in instances {
            let hit = self.predict(inst) == inst.answer();
            hits += usize::from(hit);
            let slot = by_rule.entry(inst.rule).or_default();
            slot.0 += usize::from(hit);
            slot.1 += 1;
        }
        let per_rule = by_rule
            .into_iter()
            .map(|(r, (h, t))| (r, h as f64 / t as f64))
            .collect();
        (hits as f64 / instances.len().max(1) as f64, per_rule)
    }
}

/// Accuracy of always answering the most frequent label among `instances`.
pub fn chance_level(instances: &[Instance], answers: usize) -> f64 {
    let mut counts = vec![0usize; answers];
    for inst in instances {
        counts[inst.answer()] += 1;
    }
    counts.iter().copied().max().unwrap_or(0) as f64 / instances.len().max(1) as f64
}
