use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::StiffnessDataset;
use super::mlp::{MlpModel, Standardizer};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2500,
            batch_size: 64,
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            train_fraction: 0.75,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_rows: usize) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must be in (0, 1)".into()));
        }
        if self.batch_size == 0 || self.batch_size > n_rows {
            return Err(Error::Config(format!("batch_size {} vs {n_rows} rows", self.batch_size)));
        }
        if !(self.learning_rate >= 0.0) || !(self.eps > 0.0) {
            return Err(Error::Config("learning_rate must be >= 0 and eps > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub train: Vec<f64>,
    pub validation: Vec<f64>,
}

/// Parameter gradients, laid out like [`MlpModel::layers`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl Gradients {
    fn zeros_like(model: &MlpModel) -> Self {
        Self {
            weights: model.layers.iter().map(|l| DMatrix::zeros(l.weights.nrows(), l.weights.ncols())).collect(),
            biases: model.layers.iter().map(|l| DVector::zeros(l.biases.len())).collect(),
        }
    }
}

/// Mean squared error over all samples and outputs, and its gradient.
///
/// `x` and `y` are standardized, one column per sample.
pub fn loss_and_gradient(model: &MlpModel, x: &DMatrix<f64>, y: &DMatrix<f64>) -> (f64, Gradients) {
    let acts = model.forward_batch(x.clone());
    let out = acts.last().unwrap();
    let count = (y.nrows() * y.ncols()) as f64;
    let diff = out - y;
    let loss = diff.norm_squared() / count;

    let mut grads = Gradients::zeros_like(model);
    let mut delta = diff * (2.0 / count);
    for l in (0..model.layers.len()).rev() {
        grads.weights[l] = &delta * acts[l].transpose();
        grads.biases[l] = delta.column_sum();
        if l > 0 {
            let mut back = model.layers[l].weights.transpose() * &delta;
            back.zip_apply(&acts[l], |d, a| *d *= a * (1.0 - a));
            delta = back;
        }
    }
    (loss, grads)
}

pub fn mse(model: &MlpModel, x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    if y.ncols() == 0 {
        return 0.0;
    }
    let acts = model.forward_batch(x.clone());
    (acts.last().unwrap() - y).norm_squared() / (y.nrows() * y.ncols()) as f64
}

struct Adam {
    m: Gradients,
    v: Gradients,
    t: i32,
}

impl Adam {
    fn new(model: &MlpModel) -> Self {
        Self { m: Gradients::zeros_like(model), v: Gradients::zeros_like(model), t: 0 }
    }

    fn step(&mut self, model: &mut MlpModel, g: &Gradients, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let lr = cfg.learning_rate;
        let eps = cfg.eps;
        let update = |p: &mut f64, m: &mut f64, v: &mut f64, gi: f64| {
            *m = b1 * *m + (1.0 - b1) * gi;
            *v = b2 * *v + (1.0 - b2) * gi * gi;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        for (l, layer) in model.layers.iter_mut().enumerate() {
            for (((p, m), v), gi) in layer
                .weights
                .iter_mut()
                .zip(self.m.weights[l].iter_mut())
                .zip(self.v.weights[l].iter_mut())
                .zip(g.weights[l].iter())
            {
                update(p, m, v, *gi);
            }
            for (((p, m), v), gi) in layer
                .biases
                .iter_mut()
                .zip(self.m.biases[l].iter_mut())
                .zip(self.v.biases[l].iter_mut())
                .zip(g.biases[l].iter())
            {
                update(p, m, v, *gi);
            }
        }
    }
}

/// Deterministic train/validation split of row indices.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64) * train_fraction).round().clamp(1.0, (n.max(2) - 1) as f64) as usize;
    let val = idx.split_off(n_train.min(n));
    (idx, val)
}

fn columns(rows: &[Vec<f64>], idx: &[usize], scaler: &Standardizer) -> DMatrix<f64> {
    let dim = rows.first().map_or(0, Vec::len);
    let mut m = DMatrix::zeros(dim, idx.len());
    for (c, &i) in idx.iter().enumerate() {
        m.set_column(c, &DVector::from_vec(scaler.apply(&rows[i])));
    }
    m
}

/// Standardized train/validation matrices plus the fitted scalers.
pub struct PreparedData {
    pub x_train: DMatrix<f64>,
    pub y_train: DMatrix<f64>,
    pub x_val: DMatrix<f64>,
    pub y_val: DMatrix<f64>,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub input_scaling: Standardizer,
    pub target_scaling: Standardizer,
}

pub fn prepare(data: &StiffnessDataset, train_fraction: f64, seed: u64) -> PreparedData {
    let feats = data.feature_rows();
    let targs = data.target_rows();
    let (train_idx, val_idx) = split_indices(data.len(), train_fraction, seed);
    let tr_feats: Vec<Vec<f64>> = train_idx.iter().map(|&i| feats[i].clone()).collect();
    let tr_targs: Vec<Vec<f64>> = train_idx.iter().map(|&i| targs[i].clone()).collect();
    let input_scaling = Standardizer::fit(&tr_feats);
    let target_scaling = Standardizer::fit(&tr_targs);
    PreparedData {
        x_train: columns(&feats, &train_idx, &input_scaling),
        y_train: columns(&targs, &train_idx, &target_scaling),
        x_val: columns(&feats, &val_idx, &input_scaling),
        y_val: columns(&targs, &val_idx, &target_scaling),
        train_idx,
        val_idx,
        input_scaling,
        target_scaling,
    }
}

/// Mini-batch Adam on standardized MSE.
///
/// The scalers are fitted on the training split and stored in the returned
/// model. On a non-finite loss training stops with
/// [`Error::DivergenceDetected`].
pub fn train(model: MlpModel, data: &StiffnessDataset, cfg: &TrainConfig) -> Result<(MlpModel, LossHistory)> {
    let (model, history, _) = train_with_split(model, data, cfg)?;
    Ok((model, history))
}

/// As [`train`], also returning the prepared split for evaluation.
pub fn train_with_split(
    mut model: MlpModel,
    data: &StiffnessDataset,
    cfg: &TrainConfig,
) -> Result<(MlpModel, LossHistory, PreparedData)> {
    data.validate()?;
    cfg.validate(data.len())?;
    if model.n_inputs() != super::N_FEATURES || model.n_outputs() != super::N_OUTPUTS {
        return Err(Error::DimensionMismatch(format!("model is {:?}", model.layer_sizes)));
    }
    let prep = prepare(data, cfg.train_fraction, cfg.seed);
    model.input_scaling = prep.input_scaling.clone();
    model.target_scaling = prep.target_scaling.clone();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut adam = Adam::new(&model);
    let mut history = LossHistory::default();
    let n_train = prep.x_train.ncols();
    let mut order: Vec<usize> = (0..n_train).collect();
    let bs = cfg.batch_size.min(n_train);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut running = 0.0;
        for chunk in order.chunks(bs) {
            let xb = prep.x_train.select_columns(chunk);
            let yb = prep.y_train.select_columns(chunk);
            let (loss, grads) = loss_and_gradient(&model, &xb, &yb);
            if !loss.is_finite() {
                log::error!("training diverged at epoch {epoch}");
                return Err(Error::DivergenceDetected { epoch });
            }
            running += loss * chunk.len() as f64;
            adam.step(&mut model, &grads, cfg);
        }
        history.train.push(running / n_train as f64);
        let val = mse(&model, &prep.x_val, &prep.y_val);
        if !val.is_finite() {
            return Err(Error::DivergenceDetected { epoch });
        }
        history.validation.push(val);
        if epoch % 250 == 0 {
            log::debug!("epoch {epoch}: train {:.5} val {:.5}", history.train[epoch], val);
        }
    }
    Ok((model, history, prep))
}

/// Coefficient of determination, averaged over output columns.
pub fn r2_score(predictions: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::DimensionMismatch("predictions vs targets".into()));
    }
    if targets.len() < 2 {
        return Err(Error::DegenerateTargets);
    }
    let dim = targets[0].len();
    let mut total = 0.0;
    for j in 0..dim {
        let mean = targets.iter().map(|t| t[j]).sum::<f64>() / targets.len() as f64;
        let ss_tot: f64 = targets.iter().map(|t| (t[j] - mean).powi(2)).sum();
        if ss_tot <= 0.0 {
            return Err(Error::DegenerateTargets);
        }
        let ss_res: f64 = predictions.iter().zip(targets).map(|(p, t)| (t[j] - p[j]).powi(2)).sum();
        total += 1.0 - ss_res / ss_tot;
    }
    Ok(total / dim as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::dataset::DatasetRow;
    use crate::nn::mlp::FeatureVector;

    fn toy(n: usize) -> StiffnessDataset {
        let rows = (0..n)
            .map(|i| {
                let t = i as f64 / n as f64;
                DatasetRow {
                    features: FeatureVector { vx: 5.0 + 20.0 * t, vy: (7.0 * t).sin(), delta: 0.1 * t, ax: 1.0, omega: t * t },
                    cf: 5e4 + 1e5 * (3.0 * t).cos().abs(),
                    cr: 4e4 + 9e4 * t,
                }
            })
            .collect();
        StiffnessDataset::from_rows(rows)
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = MlpModel::new(&[5, 4, 3, 2], &mut rng).unwrap();
        let x = DMatrix::from_fn(5, 5, |r, c| ((r * 7 + c * 3) as f64 * 0.37).sin());
        let y = DMatrix::from_fn(2, 5, |r, c| ((r + 2 * c) as f64 * 0.5).cos());
        let (_, g) = loss_and_gradient(&model, &x, &y);
        let h = 1e-5;
        let check = |analytic: f64, plus: f64, minus: f64| {
            let fd = (plus - minus) / (2.0 * h);
            let scale = analytic.abs().max(fd.abs());
            assert!((analytic - fd).abs() <= 1e-6 * scale + 1e-10, "{analytic} vs {fd}");
        };
        for l in 0..model.layers.len() {
            for idx in 0..model.layers[l].weights.len() {
                let mut p = model.clone();
                p.layers[l].weights[idx] += h;
                let mut m = model.clone();
                m.layers[l].weights[idx] -= h;
                check(g.weights[l][idx], mse(&p, &x, &y), mse(&m, &x, &y));
            }
            for idx in 0..model.layers[l].biases.len() {
                let mut p = model.clone();
                p.layers[l].biases[idx] += h;
                let mut m = model.clone();
                m.layers[l].biases[idx] -= h;
                check(g.biases[l][idx], mse(&p, &x, &y), mse(&m, &x, &y));
            }
        }
    }

    #[test]
    fn memorizes_ten_points() {
        let data = toy(10);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = MlpModel::new(&[5, 32, 32, 2], &mut rng).unwrap();
        let cfg = TrainConfig { epochs: 2000, batch_size: 7, learning_rate: 1e-2, train_fraction: 0.7, ..Default::default() };
        let (_, hist) = train(model, &data, &cfg).unwrap();
        assert!(*hist.train.last().unwrap() < 1e-3, "{}", hist.train.last().unwrap());
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let data = toy(40);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = MlpModel::new(&[5, 6, 2], &mut rng).unwrap();
        let cfg = TrainConfig { epochs: 5, batch_size: 8, learning_rate: 0.0, ..Default::default() };
        let (trained, hist) = train(model.clone(), &data, &cfg).unwrap();
        assert_eq!(trained.layers, model.layers);
        assert_eq!(hist.train.len(), 5);
    }

    #[test]
    fn training_is_deterministic() {
        let data = toy(60);
        let cfg = TrainConfig { epochs: 20, batch_size: 16, learning_rate: 1e-3, seed: 4, ..Default::default() };
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            train(MlpModel::new(&[5, 8, 2], &mut rng).unwrap(), &data, &cfg).unwrap()
        };
        let (m1, h1) = run();
        let (m2, h2) = run();
        assert_eq!(h1, h2);
        assert_eq!(m1, m2);
    }

    #[test]
    fn divergence_is_detected() {
        let data = toy(40);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = MlpModel::new(&[5, 4, 2], &mut rng).unwrap();
        model.layers[1].weights.fill(f64::NAN);
        let cfg = TrainConfig { epochs: 3, batch_size: 8, ..Default::default() };
        assert!(matches!(train(model, &data, &cfg), Err(Error::DivergenceDetected { epoch: 0 })));
    }

    #[test]
    fn r2_reference_cases() {
        let t = vec![vec![1.0, 2.0], vec![2.0, 4.0], vec![4.0, 0.0]];
        assert_eq!(r2_score(&t, &t).unwrap(), 1.0);
        let mean = vec![vec![7.0 / 3.0, 2.0]; 3];
        assert!(r2_score(&mean, &t).unwrap().abs() < 1e-15);
        let flat = vec![vec![1.0, 1.0]; 3];
        assert!(matches!(r2_score(&flat, &flat), Err(Error::DegenerateTargets)));
        assert!(matches!(r2_score(&t[..1], &t[..1]), Err(Error::DegenerateTargets)));
    }

    #[test]
    fn split_is_disjoint_and_complete() {
        let (tr, va) = split_indices(100, 0.75, 3);
        assert_eq!(tr.len(), 75);
        assert_eq!(va.len(), 25);
        let mut all: Vec<usize> = tr.iter().chain(&va).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }
}
