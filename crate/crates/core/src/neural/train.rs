//! Mini-batch Adam training on the RMSE loss with hidden-layer L2 penalty.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mlp::{Dense, Mlp};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_floor: f64,
    pub lr_halving_patience: usize,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub l2_factor: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden_width: 130,
            hidden_layers: 4,
            batch_size: 64,
            lr_init: 1.5e-4,
            lr_floor: 1.5e-5,
            lr_halving_patience: 15,
            early_stop_patience: 50,
            max_epochs: 1000,
            l2_factor: 1e-6,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [self.hidden_width, self.hidden_layers, self.batch_size, self.lr_halving_patience, self.early_stop_patience, self.max_epochs];
        if counts.contains(&0) || !(self.lr_init > 0.0) || !(self.lr_floor > 0.0) || self.lr_floor > self.lr_init || !(self.l2_factor >= 0.0) {
            return Err(Error::Config(format!("invalid training configuration {self:?}")));
        }
        Ok(())
    }
}

/// Row-major network inputs (whitened coordinates plus the scaled departure value) and targets.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleSet {
    pub n_in: usize,
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
}

impl SampleSet {
    pub fn new(n_in: usize, inputs: Vec<f64>, targets: Vec<f64>) -> Result<Self> {
        if n_in < 2 || inputs.len() != n_in * targets.len() {
            return Err(Error::Dimension(format!("{} inputs for {} targets of width {n_in}", inputs.len(), targets.len())));
        }
        Ok(Self { n_in, inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.n_in..(i + 1) * self.n_in]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mae: f64,
    pub linf: f64,
    pub rmse: f64,
}

/// Error statistics of arbitrary predictions against targets.
pub fn error_stats(pred: &[f64], targets: &[f64]) -> EvalReport {
    let n = targets.len() as f64;
    let (mut sa, mut sq, mut mx) = (0.0, 0.0, 0.0_f64);
    for (p, t) in pred.iter().zip(targets) {
        let e = (p - t).abs();
        sa += e;
        sq += e * e;
        mx = mx.max(e);
    }
    EvalReport { mae: sa / n, linf: mx, rmse: (sq / n).sqrt() }
}

pub fn evaluate(model: &Mlp<f64>, split: &SampleSet) -> Result<EvalReport> {
    if split.is_empty() {
        return Err(Error::EmptySplit("evaluation"));
    }
    Ok(error_stats(&model.forward(&split.inputs)?, &split.targets))
}

/// Metrics of the purely numerical prediction (the skip input itself).
pub fn evaluate_numerical(split: &SampleSet) -> Result<EvalReport> {
    if split.is_empty() {
        return Err(Error::EmptySplit("evaluation"));
    }
    let pred: Vec<f64> = (0..split.len()).map(|i| split.row(i)[split.n_in - 1]).collect();
    Ok(error_stats(&pred, &split.targets))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_rmse: f64,
    pub val_mae: f64,
}

pub fn write_training_log(log: &[EpochLog], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "lr", "train_rmse", "val_mae"])?;
    for e in log {
        w.write_record([e.epoch.to_string(), format!("{:.16e}", e.lr), format!("{:.16e}", e.train_rmse), format!("{:.16e}", e.val_mae)])?;
    }
    w.flush()?;
    Ok(())
}

/// Trainable parameters with transposed (`n_in x n_out`) weights.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Params {
    pub wt: Vec<DMatrix<f64>>,
    pub b: Vec<Vec<f64>>,
}

impl Params {
    pub fn from_mlp(m: &Mlp<f64>) -> Self {
        Self {
            wt: m.layers.iter().map(|l| DMatrix::from_fn(l.n_in, l.n_out, |i, o| l.weights[o * l.n_in + i])).collect(),
            b: m.layers.iter().map(|l| l.biases.clone()).collect(),
        }
    }

    pub fn to_mlp(&self, n_components: usize) -> Mlp<f64> {
        let layers = self
            .wt
            .iter()
            .zip(&self.b)
            .map(|(wt, b)| {
                let (n_in, n_out) = wt.shape();
                let mut weights = Vec::with_capacity(n_in * n_out);
                for o in 0..n_out {
                    for i in 0..n_in {
                        weights.push(wt[(i, o)]);
                    }
                }
                Dense { n_in, n_out, weights, biases: b.clone() }
            })
            .collect();
        Mlp { n_components, layers }
    }

    fn zeros_like(&self) -> Self {
        Self { wt: self.wt.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(), b: self.b.iter().map(|b| vec![0.0; b.len()]).collect() }
    }
}

/// Per-batch loss `RMSE + l2 * sum |W_hidden|^2`, its RMSE part and the gradient.
pub(crate) fn loss_and_grad(p: &Params, x: &DMatrix<f64>, skip: &[f64], t: &[f64], l2: f64) -> (f64, f64, Params) {
    let nl = p.wt.len();
    let mut acts = vec![x.clone()];
    let mut pre = Vec::with_capacity(nl);
    for k in 0..nl {
        let mut z = &acts[k] * &p.wt[k];
        for (j, &bj) in p.b[k].iter().enumerate() {
            z.column_mut(j).add_scalar_mut(bj);
        }
        pre.push(z.clone());
        if k < nl - 1 {
            z.apply(|v| *v = v.max(0.0));
        }
        acts.push(z);
    }
    let bsz = t.len() as f64;
    let r: Vec<f64> = (0..t.len()).map(|i| acts[nl][(i, 0)] + skip[i] - t[i]).collect();
    let rmse = (r.iter().map(|v| v * v).sum::<f64>() / bsz).sqrt();
    let scale = if rmse > 0.0 { 1.0 / (bsz * rmse) } else { 0.0 };
    let mut dz = DMatrix::from_fn(t.len(), 1, |i, _| r[i] * scale);
    let mut g = p.zeros_like();
    let mut penalty = 0.0;
    for k in (0..nl).rev() {
        g.wt[k] = acts[k].tr_mul(&dz);
        g.b[k] = dz.column_iter().map(|c| c.sum()).collect();
        if k < nl - 1 {
            penalty += p.wt[k].norm_squared();
            g.wt[k] += &p.wt[k] * (2.0 * l2);
        }
        if k > 0 {
            let mut da = &dz * p.wt[k].transpose();
            da.zip_apply(&pre[k - 1], |d, z| {
                if z <= 0.0 {
                    *d = 0.0
                }
            });
            dz = da;
        }
    }
    (rmse + l2 * penalty, rmse, g)
}

/// Training loss over a whole sample set and its gradient, laid out like the model.
pub fn loss_and_gradient(model: &Mlp<f64>, set: &SampleSet, l2: f64) -> Result<(f64, Mlp<f64>)> {
    if set.n_in != model.n_inputs() {
        return Err(Error::Dimension(format!("sample width {} does not match model input width {}", set.n_in, model.n_inputs())));
    }
    let idx: Vec<usize> = (0..set.len()).collect();
    let (x, skip, t) = batch(set, &idx);
    let (loss, _, g) = loss_and_grad(&Params::from_mlp(model), &x, &skip, &t, l2);
    Ok((loss, g.to_mlp(model.n_components)))
}

struct Adam {
    m: Params,
    v: Params,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-7;

    fn new(p: &Params) -> Self {
        Self { m: p.zeros_like(), v: p.zeros_like(), t: 0 }
    }

    fn step(&mut self, p: &mut Params, g: &Params, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let upd = |th: &mut f64, m: &mut f64, v: &mut f64, gr: f64| {
            *m = Self::B1 * *m + (1.0 - Self::B1) * gr;
            *v = Self::B2 * *v + (1.0 - Self::B2) * gr * gr;
            *th -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        };
        for k in 0..p.wt.len() {
            for (((th, m), v), gr) in p.wt[k].iter_mut().zip(self.m.wt[k].iter_mut()).zip(self.v.wt[k].iter_mut()).zip(g.wt[k].iter()) {
                upd(th, m, v, *gr);
            }
            for (((th, m), v), gr) in p.b[k].iter_mut().zip(self.m.b[k].iter_mut()).zip(self.v.b[k].iter_mut()).zip(g.b[k].iter()) {
                upd(th, m, v, *gr);
            }
        }
    }
}

fn batch(split: &SampleSet, idx: &[usize]) -> (DMatrix<f64>, Vec<f64>, Vec<f64>) {
    let nc = split.n_in - 1;
    let x = DMatrix::from_fn(idx.len(), nc, |r, c| split.row(idx[r])[c]);
    let skip = idx.iter().map(|&i| split.row(i)[nc]).collect();
    let t = idx.iter().map(|&i| split.targets[i]).collect();
    (x, skip, t)
}

/// Trains from a fresh seeded initialization; returns the best-validation checkpoint and the log.
pub fn train(train_set: &SampleSet, val_set: &SampleSet, cfg: &TrainConfig) -> Result<(Mlp<f64>, Vec<EpochLog>)> {
    cfg.validate()?;
    let init = Mlp::initial(train_set.n_in - 1, &vec![cfg.hidden_width; cfg.hidden_layers], cfg.seed);
    train_from(init, train_set, val_set, cfg)
}

pub fn train_from(init: Mlp<f64>, train_set: &SampleSet, val_set: &SampleSet, cfg: &TrainConfig) -> Result<(Mlp<f64>, Vec<EpochLog>)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    if val_set.is_empty() {
        return Err(Error::EmptySplit("validation"));
    }
    if train_set.n_in != init.n_inputs() || val_set.n_in != init.n_inputs() {
        return Err(Error::Dimension(format!("sample width {} / {} does not match model input {}", train_set.n_in, val_set.n_in, init.n_inputs())));
    }
    let nc = init.n_components;
    let mut params = Params::from_mlp(&init);
    let mut adam = Adam::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_5a3e);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut lr = cfg.lr_init;
    let mut best = (f64::INFINITY, init);
    let (mut since_best, mut since_lr) = (0, 0);
    let mut log = Vec::new();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut sq = 0.0;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (x, skip, t) = batch(train_set, idx);
            let (loss, rmse, g) = loss_and_grad(&params, &x, &skip, &t, cfg.l2_factor);
            if !loss.is_finite() {
                return Err(Error::NonFiniteValue(format!("training loss at epoch {epoch}, batch {bi}")));
            }
            sq += rmse * rmse * idx.len() as f64;
            adam.step(&mut params, &g, lr);
        }
        let model = params.to_mlp(nc);
        let val = evaluate(&model, val_set)?;
        if !val.mae.is_finite() {
            return Err(Error::NonFiniteValue(format!("validation error at epoch {epoch}")));
        }
        log.push(EpochLog { epoch, lr, train_rmse: (sq / train_set.len() as f64).sqrt(), val_mae: val.mae });
        log::debug!("epoch {epoch}: lr {lr:.3e}, val MAE {:.4e}", val.mae);
        if val.mae < best.0 {
            best = (val.mae, model);
            since_best = 0;
            since_lr = 0;
        } else {
            since_best += 1;
            since_lr += 1;
            if since_best >= cfg.early_stop_patience {
                break;
            }
            if since_lr >= cfg.lr_halving_patience {
                lr = (lr * 0.5).max(cfg.lr_floor);
                since_lr = 0;
            }
        }
    }
    Ok((best.1, log))
}
