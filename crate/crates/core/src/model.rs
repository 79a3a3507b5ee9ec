//! Small classifiers with exact per-example gradients of the cross-entropy
//! loss: multinomial logistic regression and a one-hidden-layer tanh MLP.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::rng::{Stream, StreamRng};
use crate::{Error, Result};

pub const DEFAULT_HIDDEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelKind {
    Logistic,
    Mlp { hidden: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    #[serde(flatten)]
    pub kind: ModelKind,
    pub input_dim: usize,
    pub classes: usize,
}

impl Architecture {
    pub fn logistic(input_dim: usize, classes: usize) -> Self {
        Architecture {
            kind: ModelKind::Logistic,
            input_dim,
            classes,
        }
    }

    pub fn mlp(input_dim: usize, hidden: usize, classes: usize) -> Self {
        Architecture {
            kind: ModelKind::Mlp { hidden },
            input_dim,
            classes,
        }
    }

    pub fn num_params(&self) -> usize {
        let (d, k) = (self.input_dim, self.classes);
        match self.kind {
            ModelKind::Logistic => k * d + k,
            ModelKind::Mlp { hidden: h } => h * d + h + k * h + k,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.classes < 2 {
            return Err(Error::Validation(format!(
                "model needs input_dim >= 1 and classes >= 2, got {} and {}",
                self.input_dim, self.classes
            )));
        }
        if let ModelKind::Mlp { hidden: 0 } = self.kind {
            return Err(Error::Validation("hidden width must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    arch: Architecture,
    params: Vec<f64>,
}

fn log_softmax_in_place(z: &mut [f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for v in z.iter_mut() {
        *v -= lse;
    }
    lse
}

impl Model {
    /// Zero-initialized for logistic regression; uniform(±1/√fan_in) layers
    /// drawn from the seed's init stream for the MLP.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut params = vec![0.0; arch.num_params()];
        if let ModelKind::Mlp { hidden } = arch.kind {
            let mut rng = StreamRng::new(seed, Stream::Init);
            let d = arch.input_dim;
            let first = hidden * d + hidden;
            let b1 = 1.0 / (d as f64).sqrt();
            let b2 = 1.0 / (hidden as f64).sqrt();
            for (i, p) in params.iter_mut().enumerate() {
                let bound = if i < first { b1 } else { b2 };
                *p = (2.0 * rng.uniform() - 1.0) * bound;
            }
        }
        Ok(Model { arch, params })
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.num_params() {
            return Err(Error::Validation(format!(
                "expected {} parameters, got {}",
                arch.num_params(),
                params.len()
            )));
        }
        Ok(Model { arch, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn check_input(&self, x: &[f64], y: usize) -> Result<()> {
        if x.len() != self.arch.input_dim {
            return Err(Error::Domain(format!(
                "input has dimension {}, model expects {}",
                x.len(),
                self.arch.input_dim
            )));
        }
        if y >= self.arch.classes {
            return Err(Error::Domain(format!(
                "label {y} out of range for {} classes",
                self.arch.classes
            )));
        }
        Ok(())
    }

    fn hidden_layer(&self, x: &[f64], hidden: usize) -> Vec<f64> {
        let d = self.arch.input_dim;
        let (w1, rest) = self.params.split_at(hidden * d);
        let b1 = &rest[..hidden];
        (0..hidden)
            .map(|j| {
                let row = &w1[j * d..(j + 1) * d];
                (row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b1[j]).tanh()
            })
            .collect()
    }

    fn affine(w: &[f64], b: &[f64], input: &[f64]) -> Vec<f64> {
        let n = input.len();
        b.iter()
            .enumerate()
            .map(|(k, bk)| w[k * n..(k + 1) * n].iter().zip(input).map(|(a, v)| a * v).sum::<f64>() + bk)
            .collect()
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let k = self.arch.classes;
        match self.arch.kind {
            ModelKind::Logistic => {
                let d = self.arch.input_dim;
                let (w, b) = self.params.split_at(k * d);
                Self::affine(w, b, x)
            }
            ModelKind::Mlp { hidden } => {
                let h = self.hidden_layer(x, hidden);
                let off = hidden * self.arch.input_dim + hidden;
                let (w2, b2) = self.params[off..].split_at(k * hidden);
                Self::affine(w2, b2, &h)
            }
        }
    }

    pub fn loss(&self, x: &[f64], y: usize) -> Result<f64> {
        self.check_input(x, y)?;
        let mut z = self.logits(x);
        log_softmax_in_place(&mut z);
        Ok(-z[y])
    }

    /// Cross-entropy loss at `(x, y)`; its gradient w.r.t. the parameters is
    /// written to `grad` (overwritten, length [`Model::num_params`]).
    pub fn loss_and_gradient(&self, x: &[f64], y: usize, grad: &mut [f64]) -> Result<f64> {
        self.check_input(x, y)?;
        if grad.len() != self.params.len() {
            return Err(Error::Domain("gradient buffer has wrong length".into()));
        }
        let (d, k) = (self.arch.input_dim, self.arch.classes);
        match self.arch.kind {
            ModelKind::Logistic => {
                let mut z = self.logits(x);
                log_softmax_in_place(&mut z);
                let loss = -z[y];
                let (gw, gb) = grad.split_at_mut(k * d);
                for c in 0..k {
                    let dz = z[c].exp() - if c == y { 1.0 } else { 0.0 };
                    gb[c] = dz;
                    for (g, xv) in gw[c * d..(c + 1) * d].iter_mut().zip(x) {
                        *g = dz * xv;
                    }
                }
                Ok(loss)
            }
            ModelKind::Mlp { hidden } => {
                let h = self.hidden_layer(x, hidden);
                let off = hidden * d + hidden;
                let w2 = &self.params[off..off + k * hidden];
                let mut z = Self::affine(w2, &self.params[off + k * hidden..], &h);
                log_softmax_in_place(&mut z);
                let loss = -z[y];

                let dz: Vec<f64> = (0..k)
                    .map(|c| z[c].exp() - if c == y { 1.0 } else { 0.0 })
                    .collect();
                let (g1, g2) = grad.split_at_mut(off);
                let (gw2, gb2) = g2.split_at_mut(k * hidden);
                for c in 0..k {
                    gb2[c] = dz[c];
                    for j in 0..hidden {
                        gw2[c * hidden + j] = dz[c] * h[j];
                    }
                }
                let (gw1, gb1) = g1.split_at_mut(hidden * d);
                for j in 0..hidden {
                    let dh: f64 = (0..k).map(|c| w2[c * hidden + j] * dz[c]).sum();
                    let da = dh * (1.0 - h[j] * h[j]);
                    gb1[j] = da;
                    for (g, xv) in gw1[j * d..(j + 1) * d].iter_mut().zip(x) {
                        *g = da * xv;
                    }
                }
                Ok(loss)
            }
        }
    }

    pub fn per_example_gradient(&self, x: &[f64], y: usize) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.params.len()];
        self.loss_and_gradient(x, y, &mut grad)?;
        Ok(grad)
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let z = self.logits(x);
        z.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, v)| if *v > best.1 { (i, *v) } else { best })
            .0
    }

    pub fn accuracy(&self, data: &Dataset) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        let correct = (0..data.len())
            .filter(|&i| self.predict(data.row(i)) == data.label(i))
            .count();
        correct as f64 / data.len() as f64
    }

    pub fn mean_loss(&self, data: &Dataset) -> Result<f64> {
        let mut total = 0.0;
        for i in 0..data.len() {
            total += self.loss(data.row(i), data.label(i))?;
        }
        Ok(total / data.len().max(1) as f64)
    }

    /// JSON header line with the architecture, then the parameters as
    /// little-endian f64.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let header = ModelHeader {
            arch: self.arch,
            num_params: self.params.len(),
            dtype: "f64le".into(),
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for p in &self.params {
            out.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        let nl = bytes
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| Error::Schema("model file has no header line".into()))?;
        let header: ModelHeader = serde_json::from_slice(&bytes[..nl])?;
        let body = &bytes[nl + 1..];
        if body.len() != header.num_params * 8 {
            return Err(Error::Schema(format!(
                "model body has {} bytes, header announces {} parameters",
                body.len(),
                header.num_params
            )));
        }
        let params = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Model::from_params(header.arch, params)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    #[serde(flatten)]
    arch: Architecture,
    num_params: usize,
    dtype: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logistic_gradient_at_zero() {
        let model = Model::init(Architecture::logistic(3, 4), 0).unwrap();
        let x = [0.5, -1.0, 2.0];
        let g = model.per_example_gradient(&x, 2).unwrap();
        for c in 0..4 {
            let dz = 0.25 - if c == 2 { 1.0 } else { 0.0 };
            for j in 0..3 {
                assert!((g[c * 3 + j] - dz * x[j]).abs() < 1e-15);
            }
            assert!((g[12 + c] - dz).abs() < 1e-15);
        }
        assert!((model.loss(&x, 2).unwrap() - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn dimension_and_label_checks() {
        let model = Model::init(Architecture::mlp(2, 4, 3), 1).unwrap();
        assert!(model.per_example_gradient(&[1.0], 0).is_err());
        assert!(model.per_example_gradient(&[1.0, 2.0], 3).is_err());
        assert!(Model::init(Architecture::logistic(0, 2), 0).is_err());
        assert!(Model::init(Architecture::mlp(2, 0, 2), 0).is_err());
    }

    #[test]
    fn mlp_init_bounds_and_determinism() {
        let arch = Architecture::mlp(4, 8, 2);
        let a = Model::init(arch, 5).unwrap();
        let b = Model::init(arch, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.num_params(), 8 * 4 + 8 + 2 * 8 + 2);
        let first = 8 * 4 + 8;
        assert!(a.params()[..first].iter().all(|p| p.abs() <= 0.5));
        assert!(a.params()[first..].iter().all(|p| p.abs() <= 1.0 / 8f64.sqrt()));
        assert_ne!(a, Model::init(arch, 6).unwrap());
    }

    #[test]
    fn binary_round_trip() {
        let model = Model::init(Architecture::mlp(3, 5, 2), 9).unwrap();
        let mut buf = Vec::new();
        model.write_to(&mut buf).unwrap();
        let header_end = buf.iter().position(|b| *b == b'\n').unwrap();
        let header = std::str::from_utf8(&buf[..header_end]).unwrap();
        assert!(header.contains("\"kind\":\"mlp\""), "{header}");
        assert_eq!(buf.len() - header_end - 1, model.num_params() * 8);
        assert_eq!(Model::read_from(buf.as_slice()).unwrap(), model);
        assert!(Model::read_from(&buf[..buf.len() - 3]).is_err());
    }
}
