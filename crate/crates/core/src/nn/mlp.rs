use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lpv::{StiffnessPair, STIFFNESS_MAX, STIFFNESS_MIN};

pub const N_FEATURES: usize = 5;
pub const N_OUTPUTS: usize = 2;

/// Default layer widths: 5 inputs, hidden 16-28-16-9, outputs (Cf, Cr).
pub const DEFAULT_LAYERS: [usize; 6] = [N_FEATURES, 16, 28, 16, 9, N_OUTPUTS];

/// Measurable signals fed to the estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub vx: f64,
    pub vy: f64,
    pub delta: f64,
    pub ax: f64,
    pub omega: f64,
}

impl FeatureVector {
    pub fn as_array(&self) -> [f64; N_FEATURES] {
        [self.vx, self.vy, self.delta, self.ax, self.omega]
    }
}

/// Per-column mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(n: usize) -> Self {
        Self { mean: vec![0.0; n], std: vec![1.0; n] }
    }

    /// Fits on the rows of `data`; a zero-variance column gets `std = 1`.
    pub fn fit(data: &[Vec<f64>]) -> Self {
        let n = data.first().map_or(0, Vec::len);
        let count = data.len().max(1) as f64;
        let mut mean = vec![0.0; n];
        for row in data {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; n];
        for row in data {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.iter().map(|s| (s / count).sqrt()).map(|s| if s > 0.0 { s } else { 1.0 }).collect();
        Self { mean, std }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| v * s + m).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `outputs x inputs`, stored row-major in JSON.
    #[serde(with = "row_major")]
    pub weights: DMatrix<f64>,
    #[serde(with = "column")]
    pub biases: DVector<f64>,
}

mod column {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::deserialize(d)?))
    }
}

mod row_major {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(serde::de::Error::custom("ragged weight matrix"));
        }
        Ok(DMatrix::from_row_iterator(nrows, ncols, rows.into_iter().flatten()))
    }
}

/// Feedforward network: sigmoid hidden layers, identity output, with
/// input/target standardization and an output clamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub layer_sizes: Vec<usize>,
    pub layers: Vec<Layer>,
    pub input_scaling: Standardizer,
    pub target_scaling: Standardizer,
    pub clamp: [f64; 2],
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl MlpModel {
    /// Glorot-uniform weights, zero biases, identity scaling.
    pub fn new<R: Rng>(layer_sizes: &[usize], rng: &mut R) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.iter().any(|&n| n == 0) {
            return Err(Error::Config(format!("bad layer sizes {layer_sizes:?}")));
        }
        let layers = layer_sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Layer {
                    weights: DMatrix::from_fn(fan_out, fan_in, |_, _| rng.gen_range(-limit..limit)),
                    biases: DVector::zeros(fan_out),
                }
            })
            .collect();
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            layers,
            input_scaling: Standardizer::identity(layer_sizes[0]),
            target_scaling: Standardizer::identity(*layer_sizes.last().unwrap()),
            clamp: [STIFFNESS_MIN, STIFFNESS_MAX],
        })
    }

    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        let mut m = Self::new(layer_sizes, &mut rand::rngs::mock::StepRng::new(0, 0))?;
        m.layers.iter_mut().for_each(|l| l.weights.fill(0.0));
        Ok(m)
    }

    pub fn n_inputs(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn n_outputs(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let shapes_ok = self.layers.len() + 1 == self.layer_sizes.len()
            && self.layers.iter().zip(self.layer_sizes.windows(2)).all(|(l, w)| {
                l.weights.nrows() == w[1] && l.weights.ncols() == w[0] && l.biases.len() == w[1]
            })
            && self.input_scaling.mean.len() == self.n_inputs()
            && self.input_scaling.std.len() == self.n_inputs()
            && self.target_scaling.mean.len() == self.n_outputs()
            && self.target_scaling.std.len() == self.n_outputs();
        if !shapes_ok {
            return Err(Error::Config("model shapes do not match layer sizes".into()));
        }
        let finite = self.layers.iter().all(|l| l.weights.iter().chain(l.biases.iter()).all(|v| v.is_finite()));
        if !finite {
            return Err(Error::Config("model has non-finite parameters".into()));
        }
        if self.input_scaling.std.iter().chain(&self.target_scaling.std).any(|s| !(*s > 0.0)) {
            return Err(Error::Config("standardization std must be positive".into()));
        }
        Ok(())
    }

    /// Forward pass on a batch of standardized inputs (one column per
    /// sample). Returns the activations of every layer, input first.
    pub(crate) fn forward_batch(&self, x: DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = &layer.weights * acts.last().unwrap();
            for mut col in z.column_iter_mut() {
                col += &layer.biases;
            }
            if i < last {
                z.apply(|v| *v = sigmoid(*v));
            }
            acts.push(z);
        }
        acts
    }

    /// Standardized-space output for a standardized input.
    pub fn forward_standardized(&self, x: &[f64]) -> Vec<f64> {
        let acts = self.forward_batch(DMatrix::from_column_slice(x.len(), 1, x));
        acts.last().unwrap().iter().copied().collect()
    }

    /// Physical-unit prediction, unclamped.
    pub fn predict_raw(&self, x: &[f64]) -> Vec<f64> {
        let z = self.input_scaling.apply(x);
        self.target_scaling.invert(&self.forward_standardized(&z))
    }

    /// Clamped `(Cf, Cr)` for the adaptation interface.
    pub fn predict(&self, f: &FeatureVector) -> StiffnessPair {
        let raw = self.predict_raw(&f.as_array());
        StiffnessPair {
            cf: clamp_to(raw[0], self.clamp),
            cr: clamp_to(raw[1], self.clamp),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn clamp_to(v: f64, [lo, hi]: [f64; 2]) -> f64 {
    if v.is_nan() {
        lo
    } else {
        v.clamp(lo, hi)
    }
}
