use crate::config::OptimConfig;
use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::{Tape, Tensor};
use crate::train::AdamW;

use super::{accuracy, argmax};

/// Multinomial logistic regression trained full-batch with AdamW.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    /// Learning rates swept; the best held-out accuracy is reported.
    pub lrs: Vec<f64>,
    pub steps: usize,
    pub weight_decay: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lrs: vec![1e-3, 1e-2, 1e-1],
            steps: 300,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub best_lr: f64,
    /// `(lr, held-out accuracy)` for every swept rate.
    pub sweep: Vec<(f64, f64)>,
}

/// Shifts and scales every column to zero mean and unit variance using the
/// statistics of `train`.
pub fn standardize(train: &Tensor<f64>, test: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
    let (n, d) = (train.rows(), train.cols());
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(train.row(r)) {
            *m += v / n as f64;
        }
    }
    for r in 0..n {
        for ((s, v), m) in var.iter_mut().zip(train.row(r)).zip(&mean) {
            *s += (v - m) * (v - m) / n as f64;
        }
    }
    let apply = |t: &Tensor<f64>| {
        let data = t
            .data()
            .chunks(d)
            .flat_map(|row| {
                row.iter()
                    .zip(&mean)
                    .zip(&var)
                    .map(|((v, m), s)| (v - m) / (s.sqrt() + 1e-8))
                    .collect::<Vec<_>>()
            })
            .collect();
        Tensor::new(t.shape().to_vec(), data).expect("same shape")
    };
    (apply(train), apply(test))
}

fn fit(x: &Tensor<f64>, y: &[usize], k: usize, lr: f64, cfg: &ProbeConfig) -> Result<ParamStore<f64>> {
    let d = x.cols();
    let mut params = ParamStore::default();
    params.push("probe.w", Tensor::zeros(&[d, k]), true);
    params.push("probe.b", Tensor::zeros(&[k]), false);
    let mut opt = AdamW::new(
        &params,
        &OptimConfig {
            beta2: 0.999,
            weight_decay: cfg.weight_decay,
            ..OptimConfig::default()
        },
    );
    let n = x.rows();
    let picks: Vec<usize> = y.iter().enumerate().map(|(i, &c)| i * k + c).collect();
    for _ in 0..cfg.steps {
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let w = t.param(params.by_index(0).value.clone());
        let b = t.param(params.by_index(1).value.clone());
        let z = t.matmul(xv, w)?;
        let z = t.add_row(z, b)?;
        let lp = t.log_softmax(z);
        let flat = t.reshape(lp, &[n * k, 1])?;
        let chosen = t.gather_rows(flat, &picks)?;
        let s = t.sum(chosen);
        let loss = t.scale(s, -1.0 / n as f64);
        let g = t.backward(loss)?;
        opt.step(&mut params, &[Some(g.tensor(w)), Some(g.tensor(b))], lr)?;
    }
    Ok(params)
}

fn classify(params: &ParamStore<f64>, x: &Tensor<f64>) -> Vec<usize> {
    let w = &params.by_index(0).value;
    let b = &params.by_index(1).value;
    let k = w.cols();
    (0..x.rows())
        .map(|i| {
            let row = x.row(i);
            let logits: Vec<f64> = (0..k)
                .map(|c| b.data()[c] + row.iter().enumerate().map(|(j, v)| v * w.at(j, c)).sum::<f64>())
                .collect();
            argmax(&logits)
        })
        .collect()
}

/// Trains a linear classifier on frozen features for each learning rate in
/// the sweep and reports the best held-out accuracy.
pub fn linear_probe(
    train_x: &Tensor<f64>,
    train_y: &[usize],
    test_x: &Tensor<f64>,
    test_y: &[usize],
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    if train_x.rows() != train_y.len() || test_x.rows() != test_y.len() {
        return Err(Error::Contract("feature and label counts differ".into()));
    }
    let mut classes: Vec<usize> = train_y.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Contract(format!(
            "a linear probe needs at least two classes, training labels have {}",
            classes.len()
        )));
    }
    if cfg.lrs.is_empty() {
        return Err(Error::config("probe.lrs", "learning-rate grid is empty"));
    }
    let k = train_y.iter().chain(test_y).max().copied().unwrap_or(0) + 1;
    let (xtr, xte) = standardize(train_x, test_x);
    let mut sweep = Vec::with_capacity(cfg.lrs.len());
    for &lr in &cfg.lrs {
        let params = fit(&xtr, train_y, k, lr, cfg)?;
        sweep.push((lr, accuracy(&classify(&params, &xte), test_y)));
    }
    let &(best_lr, acc) = sweep
        .iter()
        .reduce(|a, b| if b.1 > a.1 { b } else { a })
        .expect("non-empty sweep");
    Ok(ProbeResult {
        accuracy: acc,
        best_lr,
        sweep,
    })
}
