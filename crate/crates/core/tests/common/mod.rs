//! Loop-based 64-bit reference implementation of the whole network, written
//! independently of the tape: plain nested vectors, explicit index loops.

#![allow(dead_code)]

use supernet::data::Instance;
use supernet::{ModelParams, ModuleKind, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor<f64>) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn from_mat(m: &Mat) -> Tensor<f64> {
    Tensor::from_rows(m).unwrap()
}

pub fn col(v: &[f64]) -> Mat {
    v.iter().map(|&x| vec![x]).collect()
}

pub fn zeros(r: usize, c: usize) -> Mat {
    vec![vec![0.0; c]; r]
}

pub fn mm(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    assert_eq!(a[0].len(), k);
    let mut out = zeros(n, m);
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i][p] * b[p][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn tr(a: &Mat) -> Mat {
    let mut out = zeros(a[0].len(), a.len());
    for i in 0..a.len() {
        for j in 0..a[0].len() {
            out[j][i] = a[i][j];
        }
    }
    out
}

pub fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let mx = v.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Softmax of every column over its rows.
pub fn softmax_cols(a: &Mat) -> Mat {
    let t = tr(a);
    tr(&t.iter().map(|r| softmax(r)).collect())
}

pub fn col_mean(a: &Mat) -> Vec<f64> {
    let n = a[0].len() as f64;
    a.iter().map(|r| r.iter().sum::<f64>() / n).collect()
}

pub fn normalize(v: &Mat) -> Mat {
    let (d, n) = (v.len(), v[0].len());
    let mut out = zeros(d, n);
    for j in 0..n {
        let mu: f64 = (0..d).map(|i| v[i][j]).sum::<f64>() / d as f64;
        let var: f64 = (0..d).map(|i| (v[i][j] - mu).powi(2)).sum::<f64>() / d as f64;
        let sd = (var + 1e-5).sqrt();
        for i in 0..d {
            out[i][j] = (v[i][j] - mu) / sd;
        }
    }
    out
}

pub struct Oracle<'a> {
    pub p: &'a ModelParams<f64>,
}

impl Oracle<'_> {
    pub fn w(&self, name: &str) -> Mat {
        to_mat(self.p.get(name).unwrap_or_else(|| panic!("missing {name}")))
    }

    fn bias(&self, name: &str) -> Vec<f64> {
        self.p.get(name).unwrap().data().to_vec()
    }

    pub fn project(&self, inst: &Instance, with_knowledge: bool) -> (Mat, Mat, Option<Mat>) {
        let v = mm(&self.w("proj.W_proj"), &to_mat(&inst.visual));
        let qhat = to_mat(&inst.question);
        let wq = self.w("proj.W_qhat");
        let l = qhat[0].len();
        let logits: Vec<f64> = (0..l)
            .map(|j| (0..qhat.len()).map(|i| wq[0][i] * qhat[i][j]).sum())
            .collect();
        let alpha = softmax(&logits);
        let q = qhat
            .iter()
            .map(|row| row.iter().zip(&alpha).map(|(x, a)| x * a).collect())
            .collect();
        let k = with_knowledge.then(|| mm(&self.w("proj.W_k"), &to_mat(&inst.knowledge)));
        (v, q, k)
    }

    pub fn focal(&self, v: &Mat) -> Mat {
        let (d, n) = (v.len(), v[0].len());
        let left = mm(&self.w("R1.W_1"), v);
        let right = mm(&self.w("R1.W_2"), v);
        let mut rel = zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                rel[i][j] = (0..d).map(|r| left[r][i] * right[r][j]).sum();
            }
        }
        let s: Vec<f64> = (0..n).map(|j| (0..n).map(|i| rel[i][j]).sum()).collect();
        let w3 = self.p.get("R1.W_3").unwrap().data().to_vec();
        let g: Vec<f64> = (0..n)
            .map(|i| {
                let z: f64 = (0..n)
                    .map(|j| (if i == j { w3[0] } else { 0.0 } + w3[1] / n as f64) * s[j])
                    .sum();
                sig(z)
            })
            .collect();
        let att: Mat = rel.iter().map(|row| softmax(row)).collect();
        let mut out = zeros(d, n);
        for r in 0..d {
            for i in 0..n {
                out[r][i] = (0..n).map(|j| v[r][j] * g[j] * att[i][j]).sum();
            }
        }
        out
    }

    fn modulate(&self, v: &Mat, ctx: &Mat, wa: &str, weta: &str, ba: &str, beta: &str) -> Mat {
        let (d, n) = (v.len(), v[0].len());
        let a = mm(&self.w(wa), ctx);
        let e = mm(&self.w(weta), ctx);
        let (ba, be) = (self.bias(ba), self.bias(beta));
        let norm = normalize(v);
        let mut out = zeros(d, n);
        for r in 0..d {
            for j in 0..n {
                let cj = if ctx[0].len() == 1 { 0 } else { j };
                out[r][j] = sig(a[r][cj] + ba[r]) * norm[r][j] + sig(e[r][cj] + be[r]);
            }
        }
        out
    }

    pub fn global(&self, v: &Mat, q: &Mat) -> Mat {
        let pooled = col(&col_mean(q));
        self.modulate(v, &pooled, "R3.W_a", "R3.W_eta", "R3.b_a", "R3.b_eta")
    }

    fn attend(&self, ctx: &Mat, v: &Mat, wc: &str, wv: &str) -> Mat {
        let c = mm(&self.w(wc), ctx);
        let vv = mm(&self.w(wv), v);
        let scores = mm(&tr(&c), &vv);
        mm(ctx, &softmax_cols(&scores))
    }

    pub fn local(&self, v: &Mat, q: &Mat) -> Mat {
        let qv = self.attend(q, v, "R4.W_4", "R4.W_5");
        self.modulate(v, &qv, "R4.W_a", "R4.W_eta", "R4.b_a", "R4.b_eta")
    }

    pub fn knowledge(&self, v: &Mat, k: &Mat) -> Mat {
        let kv = self.attend(k, v, "R5.W_6", "R5.W_7");
        let a = mm(&self.w("R5.W_8"), v);
        let b = mm(&self.w("R5.W_9"), &kv);
        let mut out = zeros(v.len(), v[0].len());
        for r in 0..v.len() {
            for j in 0..v[0].len() {
                let g = sig(a[r][j] - b[r][j]);
                out[r][j] = g * kv[r][j] + (1.0 - g) * v[r][j];
            }
        }
        out
    }

    pub fn module(&self, kind: ModuleKind, v: &Mat, q: &Mat, k: Option<&Mat>) -> Mat {
        match kind {
            ModuleKind::FocalContext => self.focal(v),
            ModuleKind::Identity => v.clone(),
            ModuleKind::GlobalReduction => self.global(v, q),
            ModuleKind::LocalSemantic => self.local(v, q),
            ModuleKind::KnowledgeAugment => self.knowledge(v, k.unwrap()),
        }
    }
}

/// State of the loop oracle between iterations.
#[derive(Clone, Debug)]
pub struct OracleState {
    pub v: Vec<Mat>,
    pub u: Mat,
    pub b: Vec<Vec<f64>>,
    pub h: Mat,
}

/// Per-iteration record: gates (row = emitting module), coupling, logits.
#[derive(Clone, Debug)]
pub struct OracleStep {
    pub gates: Mat,
    pub coupling: Mat,
    pub logits: Mat,
}

pub fn oracle_init(v: &Mat, q: &Mat, m: usize) -> OracleState {
    let (d, n) = (v.len(), v[0].len());
    let pooled = col_mean(q);
    OracleState {
        v: vec![v.clone(); m],
        u: (0..d).map(|i| vec![pooled[i]; n]).collect(),
        b: vec![vec![0.0; n]; m],
        h: zeros(d, n),
    }
}

pub fn oracle_step(
    o: &Oracle,
    modules: &[ModuleKind],
    s: &OracleState,
    q: &Mat,
    k: Option<&Mat>,
) -> (OracleState, OracleStep) {
    let m = modules.len();
    let (d, n) = (s.u.len(), s.u[0].len());
    let mut gates = zeros(m, m);
    for (src, kind) in modules.iter().enumerate() {
        let w = o.w(&format!("layer.W_g.{}", kind.number()));
        let pooled = col_mean(&s.v[src]);
        for dst in 0..m {
            gates[src][dst] = sig((0..d).map(|c| w[dst][c] * pooled[c]).sum());
        }
    }
    let outs: Vec<Mat> = modules
        .iter()
        .enumerate()
        .map(|(i, kind)| o.module(*kind, &s.v[i], q, k))
        .collect();
    let mut v_next = vec![zeros(d, n); m];
    for dst in 0..m {
        for src in 0..m {
            for r in 0..d {
                for j in 0..n {
                    v_next[dst][r][j] += gates[src][dst] * outs[src][r][j];
                }
            }
        }
    }
    let mut b = s.b.clone();
    let mut coupling = zeros(m, n);
    let mut h = zeros(d, n);
    for mi in 0..m {
        for j in 0..n {
            let sq: f64 = (0..d).map(|r| (v_next[mi][r][j] * s.u[r][j]).powi(2)).sum();
            b[mi][j] += sq / (1.0 + sq);
        }
        coupling[mi] = softmax(&b[mi]);
        for r in 0..d {
            for j in 0..n {
                h[r][j] += v_next[mi][r][j] * coupling[mi][j];
            }
        }
    }
    let diff: Mat = (0..d).map(|r| (0..n).map(|j| h[r][j] - s.u[r][j]).collect()).collect();
    let zu = mm(&o.w("mem.W_u"), &diff);
    let zr = mm(&o.w("mem.W_r"), &diff);
    let reset: Mat = (0..d)
        .map(|r| (0..n).map(|j| sig(zr[r][j]) * s.u[r][j]).collect())
        .collect();
    let cand_a = mm(&o.w("mem.W_z"), &reset);
    let cand_b = mm(&o.w("mem.W_h"), &h);
    let mut u = zeros(d, n);
    for r in 0..d {
        for j in 0..n {
            let z = sig(zu[r][j]);
            u[r][j] = (1.0 - z) * s.u[r][j] + z * (cand_a[r][j] + cand_b[r][j]);
        }
    }
    let step = OracleStep {
        gates,
        coupling,
        logits: b.clone(),
    };
    (OracleState { v: v_next, u, b, h }, step)
}

/// Logits and per-iteration records of the full network.
pub fn oracle_network(
    p: &ModelParams<f64>,
    modules: &[ModuleKind],
    inst: &Instance,
    iterations: usize,
) -> (Vec<f64>, Vec<OracleStep>) {
    let o = Oracle { p };
    let with_k = modules.contains(&ModuleKind::KnowledgeAugment);
    let (v, q, k) = o.project(inst, with_k);
    let mut s = oracle_init(&v, &q, modules.len());
    let mut steps = Vec::new();
    for _ in 0..iterations {
        let (next, rec) = oracle_step(&o, modules, &s, &q, k.as_ref());
        s = next;
        steps.push(rec);
    }
    let joint: Vec<f64> = {
        let a = mm(&o.w("head.W_u"), &col(&col_mean(&s.u)));
        let b = mm(&o.w("head.W_q"), &col(&col_mean(&q)));
        (0..a.len()).map(|i| a[i][0] + b[i][0]).collect()
    };
    let logits = mm(&o.w("head.W_y"), &col(&joint)).iter().map(|r| r[0]).collect();
    (logits, steps)
}

/// Norm-wise relative difference: `max|a−b| / max(max|b|, 1e-300)`.
pub fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let num = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let den = b.iter().map(|y| y.abs()).fold(0.0, f64::max).max(1e-300);
    num / den
}

pub fn flat(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}
