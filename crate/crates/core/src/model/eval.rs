use super::NextScaleModel;
use crate::autodiff::neg_log_softmax;
use crate::dynrouter::{Gating, GatingTrace};
use crate::error::{invalid, Result};
use crate::pyramid::Sample;
use crate::tensor::Tensor;

/// Mean over rows of `-log softmax(logits)[target]`.
pub fn cross_entropy(logits: &Tensor, targets: &[u16]) -> Result<f64> {
    if logits.rank() != 2 || logits.rows() != targets.len() || targets.is_empty() {
        return Err(invalid(format!(
            "cross_entropy: {} targets for logits {:?}",
            targets.len(),
            logits.shape()
        )));
    }
    let v = logits.cols();
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if t as usize >= v {
            return Err(invalid(format!("target {t} outside [0, {v})")));
        }
        total += neg_log_softmax(logits.row(r), t as usize);
    }
    Ok(total / targets.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Mean NLL per token over the whole dataset.
    pub nll: f64,
    /// Mean NLL per token of each scale.
    pub per_scale_nll: Vec<f64>,
    /// One trace per sequence when requested.
    pub traces: Vec<GatingTrace>,
}

impl NextScaleModel {
    /// Held-out teacher-forced evaluation under an optional gating
    /// configuration.
    pub fn evaluate(&self, data: &[Sample], gating: Option<&Gating>, keep_traces: bool) -> Result<EvalReport> {
        if data.is_empty() {
            return Err(invalid("evaluation needs a non-empty dataset"));
        }
        let bounds = self.config.boundaries();
        let mut per_scale = vec![0.0; bounds.len()];
        let mut traces = Vec::new();
        for s in data {
            let (logits, trace) = if keep_traces {
                let (l, t) = self.forward_traced(&s.hierarchy, s.class_id, gating)?;
                (l, Some(t))
            } else {
                (self.forward_logits(&s.hierarchy, s.class_id, gating)?, None)
            };
            let (targets, _) = s.hierarchy.flatten();
            for (k, b) in bounds.iter().enumerate() {
                for p in b.clone() {
                    per_scale[k] += neg_log_softmax(logits.row(p), targets[p] as usize);
                }
            }
            traces.extend(trace);
        }
        let tokens = (self.config.seq_len() * data.len()) as f64;
        let nll = per_scale.iter().sum::<f64>() / tokens;
        let per_scale_nll = per_scale
            .iter()
            .zip(&bounds)
            .map(|(t, b)| t / (b.len() * data.len()) as f64)
            .collect();
        Ok(EvalReport {
            nll,
            per_scale_nll,
            traces,
        })
    }
}

/// Mean held-out NLL per token.
pub fn nll_eval(model: &NextScaleModel, data: &[Sample], gating: Option<&Gating>) -> Result<f64> {
    Ok(model.evaluate(data, gating, false)?.nll)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_logits_give_log_v() {
        let logits = Tensor::zeros(&[5, 16]);
        let ce = cross_entropy(&logits, &[0, 3, 7, 15, 9]).unwrap();
        assert!((ce - 16f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_give_tiny_loss() {
        let mut logits = Tensor::zeros(&[3, 16]);
        for (r, t) in [2usize, 5, 11].iter().enumerate() {
            logits.row_mut(r)[*t] = 30.0;
        }
        assert!(cross_entropy(&logits, &[2, 5, 11]).unwrap() < 1e-9);
    }

    #[test]
    fn matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = Tensor::randn(&[7, 16], 2.0, &mut rng);
        let targets = [1u16, 0, 15, 4, 4, 9, 12];
        let mut expect = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = logits.row(r);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            expect += z.ln() - row[t as usize];
        }
        expect /= 7.0;
        assert!((cross_entropy(&logits, &targets).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn target_out_of_range_is_an_error() {
        assert!(cross_entropy(&Tensor::zeros(&[1, 4]), &[4]).is_err());
    }
}
