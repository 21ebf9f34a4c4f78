//! Multinomial logistic regression trained by full-batch gradient descent.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierConfig {
    pub steps: usize,
    pub lr: f32,
    /// L2 penalty `½·l2·‖W‖²` on the weights (not the biases).
    pub l2: f32,
    /// Training stops once the gradient norm falls below this.
    pub tol: f32,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 0.01,
            l2: 0.001,
            tol: 1e-5,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.l2 >= 0.0) || !(self.tol >= 0.0) {
            return Err(Error::config(format!(
                "classifier needs lr > 0, l2 ≥ 0 and tol ≥ 0, got {} / {} / {}",
                self.lr, self.l2, self.tol
            )));
        }
        Ok(())
    }
}

/// `logits = W·x + b` over `classes` outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    classes: usize,
    dim: usize,
    /// Row-major `classes × dim`.
    w: Vec<f32>,
    b: Vec<f32>,
    steps_run: usize,
}

impl LinearClassifier {
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn steps_run(&self) -> usize {
        self.steps_run
    }

    pub fn logits(&self, x: &[f32]) -> Vec<f32> {
        self.w
            .chunks(self.dim)
            .zip(&self.b)
            .map(|(row, &b)| b + dot(row, x))
            .collect()
    }

    pub fn probabilities(&self, x: &[f32]) -> Vec<f32> {
        let mut l = self.logits(x);
        softmax(&mut l);
        l
    }

    /// Arg-max class; ties go to the lowest index.
    pub fn predict(&self, x: &[f32]) -> usize {
        argmax(&self.logits(x))
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}

pub(crate) fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Trains from zero weights on `(label, feature)` pairs.
pub fn train_online_classifier(
    features: &[(usize, Vec<f32>)],
    classes: usize,
    cfg: &ClassifierConfig,
) -> Result<LinearClassifier> {
    cfg.validate()?;
    let dim = features.first().map(|(_, f)| f.len()).unwrap_or(0);
    if dim == 0 {
        return Err(Error::contract("classifier needs at least one non-empty feature"));
    }
    let mut counts = vec![0usize; classes];
    for (c, f) in features {
        if *c >= classes || f.len() != dim {
            return Err(Error::shape(format!(
                "feature of class {c} and width {} does not fit {classes} classes of width {dim}",
                f.len()
            )));
        }
        counts[*c] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::contract(format!("class {c} has no training features")));
    }

    let n = features.len();
    let inv_n = 1.0 / n as f32;
    let mut w = vec![0.0f32; classes * dim];
    let mut b = vec![0.0f32; classes];
    let mut gw = vec![0.0f32; classes * dim];
    let mut gb = vec![0.0f32; classes];
    let mut p = vec![0.0f32; classes];
    let mut steps_run = 0;
    for _ in 0..cfg.steps {
        gw.iter_mut().zip(&w).for_each(|(g, &wi)| *g = cfg.l2 * wi);
        gb.fill(0.0);
        for (label, x) in features {
            for (c, pc) in p.iter_mut().enumerate() {
                *pc = b[c] + dot(&w[c * dim..(c + 1) * dim], x);
            }
            softmax(&mut p);
            p[*label] -= 1.0;
            for (c, &err) in p.iter().enumerate() {
                let e = err * inv_n;
                gb[c] += e;
                for (g, &xi) in gw[c * dim..(c + 1) * dim].iter_mut().zip(x) {
                    *g += e * xi;
                }
            }
        }
        let norm = gw.iter().chain(&gb).map(|g| g * g).sum::<f32>().sqrt();
        if norm < cfg.tol {
            break;
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= cfg.lr * g;
        }
        for (bi, g) in b.iter_mut().zip(&gb) {
            *bi -= cfg.lr * g;
        }
        steps_run += 1;
    }
    Ok(LinearClassifier {
        classes,
        dim,
        w,
        b,
        steps_run,
    })
}
