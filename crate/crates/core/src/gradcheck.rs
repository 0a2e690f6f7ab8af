//! Central finite-difference gradient checker.
//!
//! The function under test is projected to a scalar with a fixed random
//! weight vector, differentiated once with [`Graph::backward`], and compared
//! against `(L(x + h e_j) - L(x - h e_j)) / 2h` at randomly drawn coordinates.
//!
//! Piecewise-linear operations (ReLU, max-pooling, sorting) report their
//! selection pattern to the graph; a probe whose perturbed evaluations land on
//! a different piece than the base point straddles a kink and is redrawn.
//!
//! Relative error is `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.

use std::sync::Arc;

use rand::Rng;

use crate::tensor::{DenseTensor, Graph, TensorError};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub probes: usize,
    pub max_redraws: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            probes: 50,
            max_redraws: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
    pub redraws: usize,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn passes(&self, tol: f64, min_probes: usize) -> bool {
        self.probes.len() >= min_probes && self.max_rel_error() < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

type Projected = (f64, Option<u64>);

fn evaluate<F>(f: &F, inputs: &[DenseTensor<f64>], weights: &Arc<Vec<f64>>) -> Result<Projected, TensorError>
where
    F: Fn(&Graph<f64>, &[DenseTensor<f64>]) -> Result<DenseTensor<f64>, TensorError>,
{
    let g = Graph::inference().with_pattern_tracking();
    let out = f(&g, inputs)?;
    let v = out
        .values()
        .iter()
        .zip(weights.iter())
        .map(|(a, w)| a * w)
        .sum();
    Ok((v, g.pattern_fingerprint()))
}

/// Checks `f` at `inputs`. Probes cycle over the inputs so every operand is
/// exercised; the element within an input is drawn uniformly.
pub fn check_gradients<F, R>(
    inputs: &[DenseTensor<f64>],
    f: F,
    config: &GradCheckConfig,
    rng: &mut R,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&Graph<f64>, &[DenseTensor<f64>]) -> Result<DenseTensor<f64>, TensorError>,
    R: Rng,
{
    let g = Graph::new().with_pattern_tracking();
    let leaves: Vec<DenseTensor<f64>> = inputs.iter().map(|t| g.leaf(t)).collect();
    let out = f(&g, &leaves)?;
    let weights: Arc<Vec<f64>> = Arc::new((0..out.len()).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let loss = g.dot_const(&out, Arc::clone(&weights))?;
    let base_pattern = g.pattern_fingerprint();
    let grads = g.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| grads.wrt(l).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; l.len()]))
        .collect();

    let candidates: Vec<usize> = (0..inputs.len()).filter(|&i| !inputs[i].is_empty()).collect();
    let mut report = GradCheckReport::default();
    if candidates.is_empty() {
        return Ok(report);
    }
    let mut attempt = 0usize;
    while report.probes.len() < config.probes {
        if report.redraws > config.max_redraws {
            break;
        }
        let input = candidates[attempt % candidates.len()];
        attempt += 1;
        let element = rng.gen_range(0..inputs[input].len());
        let mut shifted = inputs.to_vec();
        let base = inputs[input].values().to_vec();

        let mut plus = base.clone();
        plus[element] += config.step;
        shifted[input] = DenseTensor::from_values(inputs[input].shape(), plus)?;
        let (lp, pp) = evaluate(&f, &shifted, &weights)?;

        let mut minus = base;
        minus[element] -= config.step;
        shifted[input] = DenseTensor::from_values(inputs[input].shape(), minus)?;
        let (lm, pm) = evaluate(&f, &shifted, &weights)?;

        if pp != base_pattern || pm != base_pattern {
            report.redraws += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * config.step);
        let a = analytic[input][element];
        report.probes.push(Probe {
            input,
            element,
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric),
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn smooth_chain_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = DenseTensor::from_values(&[3, 4], (0..12).map(|i| (i as f64 * 0.3).sin()).collect()).unwrap();
        let b = DenseTensor::from_values(&[4, 2], (0..8).map(|i| (i as f64 * 0.7).cos()).collect()).unwrap();
        let report = check_gradients(
            &[a, b],
            |g, x| {
                let m = g.matmul(&x[0], &x[1])?;
                let s = g.sigmoid(&m);
                g.mul(&s, &m)
            },
            &GradCheckConfig::default(),
            &mut rng,
        )
        .unwrap();
        assert!(report.passes(1e-4, 50), "{:?}", report.worst());
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = DenseTensor::from_values(&[4], vec![0.5, -0.2, 0.9, 1.3]).unwrap();
        let report = check_gradients(
            &[a],
            |g, x| {
                let xs = Arc::new(x[0].values().to_vec());
                let data = xs.iter().map(|v| v * v).collect();
                // deliberately wrong: claims d(x^2)/dx = x
                Ok(g.record(vec![4], data, &[&x[0]], move |go, _| {
                    vec![Some(go.iter().zip(xs.iter()).map(|(g, v)| g * v).collect())]
                }))
            },
            &GradCheckConfig::default(),
            &mut rng,
        )
        .unwrap();
        assert!(report.max_rel_error() > 0.1);
    }
}
