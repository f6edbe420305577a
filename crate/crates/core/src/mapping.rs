//! Feature-to-parameter regressions: ordinary least squares for DRR and a
//! normal-family GLM with logarithmic link, fitted by iteratively reweighted
//! least squares, for RT60. Models persist as JSON.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Variant;

pub const MODEL_VERSION: u32 = 1;

const MAX_IRLS_ITERATIONS: usize = 100;
const IRLS_TOLERANCE: f64 = 1e-8;
const MAX_STEP_HALVINGS: usize = 30;
const MAX_FAILED_STEPS: usize = 3;
const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// `b0 + b.x`, for DRR in dB.
    Linear,
    /// `exp(b0 + b.x)`, for RT60 in seconds.
    GlmLog,
}

/// Result of one regression fit. `coeffs[0]` is the intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct Fit {
    pub coeffs: Vec<f64>,
    /// Residual sum of squares on the training data.
    pub deviance: f64,
    /// Deviance after initialization and after every accepted IRLS step.
    pub deviance_history: Vec<f64>,
    pub iterations: usize,
}

fn design(x: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let dim = x.first().map_or(0, Vec::len);
    if let Some(row) = x.iter().find(|r| r.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: row.len(),
        });
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidData("non-finite feature value".into()));
    }
    if x.len() < dim + 1 {
        return Err(Error::InvalidData(format!(
            "{} samples cannot determine {} coefficients",
            x.len(),
            dim + 1
        )));
    }
    Ok(DMatrix::from_fn(x.len(), dim + 1, |i, j| if j == 0 { 1.0 } else { x[i][j - 1] }))
}

/// Least-squares solution via thin QR; rejects rank-deficient designs.
fn least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let qr = a.clone().qr();
    let r = qr.r();
    let diag: Vec<f64> = (0..r.ncols()).map(|i| r[(i, i)].abs()).collect();
    let largest = diag.iter().copied().fold(0.0, f64::max);
    if largest == 0.0 || diag.iter().any(|d| *d <= RANK_TOLERANCE * largest) {
        return Err(Error::SingularDesign);
    }
    let qtb = qr.q().transpose() * b;
    r.solve_upper_triangular(&qtb).ok_or(Error::SingularDesign)
}

fn check_targets(x: &[Vec<f64>], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(x.len(), y.len()));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidData("non-finite target".into()));
    }
    Ok(())
}

/// Ordinary least squares `y ~ b0 + b.x`.
pub fn fit_linear(x: &[Vec<f64>], y: &[f64]) -> Result<Fit> {
    check_targets(x, y)?;
    let a = design(x)?;
    let b = DVector::from_column_slice(y);
    let beta = least_squares(&a, &b)?;
    let deviance = (&b - &a * &beta).norm_squared();
    Ok(Fit {
        coeffs: beta.iter().copied().collect(),
        deviance,
        deviance_history: vec![deviance],
        iterations: 1,
    })
}

fn glm_deviance(a: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>) -> f64 {
    let eta = a * beta;
    let d: f64 = eta
        .iter()
        .zip(y.iter())
        .map(|(e, yi)| (yi - e.exp()).powi(2))
        .sum();
    if d.is_finite() {
        d
    } else {
        f64::INFINITY
    }
}

/// Normal-family GLM with log link, `E[y] = exp(b0 + b.x)`.
///
/// Starts from least squares on `ln y`, then iterates weighted least squares
/// with weights `mu^2` and working response `eta + (y - mu) / mu`, halving
/// any step that would raise the deviance.
pub fn fit_glm_log(x: &[Vec<f64>], y: &[f64]) -> Result<Fit> {
    check_targets(x, y)?;
    if y.iter().any(|v| *v <= 0.0) {
        return Err(Error::InvalidData("log-link targets must be positive".into()));
    }
    let a = design(x)?;
    let yv = DVector::from_column_slice(y);
    let log_y = yv.map(f64::ln);
    let mut beta = least_squares(&a, &log_y)?;
    let mut dev = glm_deviance(&a, &yv, &beta);
    let mut history = vec![dev];
    let floor = 1e-30 * yv.norm_squared();
    let mut failed = 0;
    let mut iterations = 0;

    while iterations < MAX_IRLS_ITERATIONS && dev > floor {
        iterations += 1;
        let eta = &a * &beta;
        let mu = eta.map(f64::exp);
        // Rows scaled by sqrt(w) = mu.
        let mut aw = a.clone();
        for (i, mut row) in aw.row_iter_mut().enumerate() {
            row *= mu[i];
        }
        let zw = DVector::from_fn(y.len(), |i, _| mu[i] * (eta[i] + (yv[i] - mu[i]) / mu[i]));
        let proposal = least_squares(&aw, &zw)?;

        let mut step = &proposal - &beta;
        let mut candidate = proposal;
        let mut cand_dev = glm_deviance(&a, &yv, &candidate);
        let mut halvings = 0;
        while cand_dev > dev && halvings < MAX_STEP_HALVINGS {
            step *= 0.5;
            candidate = &beta + &step;
            cand_dev = glm_deviance(&a, &yv, &candidate);
            halvings += 1;
        }
        let change = dev - cand_dev;
        if change.abs() <= IRLS_TOLERANCE * dev {
            if cand_dev <= dev {
                beta = candidate;
                dev = cand_dev;
                history.push(dev);
            }
            break;
        }
        if cand_dev > dev {
            failed += 1;
            if failed >= MAX_FAILED_STEPS {
                return Err(Error::NoConvergence(format!(
                    "deviance rose on {failed} consecutive iterations"
                )));
            }
            continue;
        }
        failed = 0;
        beta = candidate;
        dev = cand_dev;
        history.push(dev);
    }
    if beta.iter().any(|b| !b.is_finite()) || !dev.is_finite() {
        return Err(Error::NoConvergence("coefficients diverged".into()));
    }
    Ok(Fit {
        coeffs: beta.iter().copied().collect(),
        deviance: dev,
        deviance_history: history,
        iterations,
    })
}

/// A feature-to-parameter input/output pair stored with a model so a loaded
/// file can verify it predicts what it predicted when saved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfTest {
    pub x: Vec<f64>,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingModel {
    pub version: u32,
    pub kind: ModelKind,
    pub variant: Variant,
    pub k: Option<usize>,
    /// Intercept followed by one weight per feature dimension.
    pub coeffs: Vec<f64>,
    pub n_train: usize,
    pub deviance: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub self_test: Vec<SelfTest>,
}

impl MappingModel {
    pub fn from_coeffs(kind: ModelKind, variant: Variant, coeffs: Vec<f64>) -> Result<Self> {
        let model = MappingModel {
            version: MODEL_VERSION,
            kind,
            variant,
            k: (variant == Variant::NsrmrStar).then_some(crate::metrics::DEFAULT_STAR_BAND),
            coeffs,
            n_train: 0,
            deviance: 0.0,
            self_test: Vec::new(),
        };
        model.validate()?;
        Ok(model)
    }

    /// Trains a model of `kind` on feature rows `x` of `variant`.
    pub fn train(kind: ModelKind, variant: Variant, x: &[Vec<f64>], y: &[f64]) -> Result<Self> {
        if let Some(row) = x.iter().find(|r| r.len() != variant.dimension()) {
            return Err(Error::DimensionMismatch {
                expected: variant.dimension(),
                got: row.len(),
            });
        }
        let fit = match kind {
            ModelKind::Linear => fit_linear(x, y)?,
            ModelKind::GlmLog => fit_glm_log(x, y)?,
        };
        let mut model = Self::from_coeffs(kind, variant, fit.coeffs)?;
        model.n_train = x.len();
        model.deviance = fit.deviance;
        let picks = [0, x.len() / 2, x.len() - 1];
        model.self_test = picks
            .iter()
            .map(|&i| {
                let xi = x[i].clone();
                let y = model.predict(&xi).expect("dimension checked");
                SelfTest { x: xi, y }
            })
            .collect();
        Ok(model)
    }

    pub fn dimension(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn linear_predictor(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dimension() {
            return Err(Error::DimensionMismatch {
                expected: self.dimension(),
                got: x.len(),
            });
        }
        Ok(self.coeffs[0] + self.coeffs[1..].iter().zip(x).map(|(b, v)| b * v).sum::<f64>())
    }

    /// dB for linear models, seconds (strictly positive) for log-link models.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        let eta = self.linear_predictor(x)?;
        Ok(match self.kind {
            ModelKind::Linear => eta,
            ModelKind::GlmLog => eta.exp(),
        })
    }

    fn validate(&self) -> Result<()> {
        if self.version != MODEL_VERSION {
            return Err(Error::VersionMismatch {
                found: self.version,
                expected: MODEL_VERSION,
            });
        }
        if self.coeffs.len() != self.variant.dimension() + 1 {
            return Err(Error::MalformedModel(format!(
                "{} expects {} coefficients, file has {}",
                self.variant,
                self.variant.dimension() + 1,
                self.coeffs.len()
            )));
        }
        if self.coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::MalformedModel("non-finite coefficient".into()));
        }
        for t in &self.self_test {
            let got = self
                .predict(&t.x)
                .map_err(|e| Error::MalformedModel(format!("self-test: {e}")))?;
            if (got - t.y).abs() > 1e-12 * t.y.abs().max(1.0) {
                return Err(Error::MalformedModel(format!(
                    "self-test prediction {got} differs from stored {}",
                    t.y
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::MalformedModel(e.to_string()))?;
        if let Some(found) = value.get("version").and_then(|v| v.as_u64()) {
            if found != MODEL_VERSION as u64 {
                return Err(Error::VersionMismatch {
                    found: found as u32,
                    expected: MODEL_VERSION,
                });
            }
        }
        let model: MappingModel =
            serde_json::from_value(value).map_err(|e| Error::MalformedModel(e.to_string()))?;
        model.validate()?;
        Ok(model)
    }
}

pub fn save_model(model: &MappingModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, model.to_json() + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<MappingModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    MappingModel::from_json(&text)
}
