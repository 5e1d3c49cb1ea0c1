//! Central-difference gradient checking in float64.

use super::network::{Mode, NetworkSpec};
use super::rng::Rng;
use super::tensor::{ParamStore, Tensor};
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Largest per-tensor relative error `|a - n| / max(|a|, |n|)` (L2 norms).
    pub max_rel_error: f64,
    pub worst_param: String,
    pub elements_checked: usize,
}

/// Compares backprop against central differences of `L = Σ w·y` with random
/// weights `w`. Every forward pass reuses the same dropout stream. At most
/// `max_per_tensor` randomly chosen elements are perturbed per parameter.
pub fn check_gradients(
    net: &NetworkSpec,
    params: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    h: f64,
    max_per_tensor: usize,
    seed: u64,
) -> Result<GradCheck> {
    let mut rng = Rng::new(seed);
    let out_len: usize = net.output_shape().iter().product();
    let w: Vec<f64> = (0..out_len).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let dropout_seed = rng.next_u64();
    let objective = |p: &ParamStore<f64>| -> Result<f64> {
        let (y, _) = net.forward(p, inputs, Mode::Train, &mut Rng::new(dropout_seed))?;
        Ok(y.data().iter().zip(&w).map(|(a, b)| a * b).sum())
    };
    let (_, cache) = net.forward(params, inputs, Mode::Train, &mut Rng::new(dropout_seed))?;
    let mut grads = net.zero_grads::<f64>();
    let gout = Tensor::new(net.output_shape().to_vec(), w.clone())?;
    net.backward(params, &cache, &gout, &mut grads)?;

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_param: String::new(),
        elements_checked: 0,
    };
    let mut probe = params.clone();
    let names: Vec<String> = grads.names().map(str::to_string).collect();
    for name in names {
        let analytic = grads.require(&name)?.data().to_vec();
        let mut idx: Vec<usize> = (0..analytic.len()).collect();
        rng.shuffle(&mut idx);
        idx.truncate(max_per_tensor);
        idx.sort_unstable();
        let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
        for &i in &idx {
            let orig = probe.require(&name)?.data()[i];
            probe.get_mut(&name).expect("param").data_mut()[i] = orig + h;
            let up = objective(&probe)?;
            probe.get_mut(&name).expect("param").data_mut()[i] = orig - h;
            let down = objective(&probe)?;
            probe.get_mut(&name).expect("param").data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            diff += (analytic[i] - numeric).powi(2);
            na += analytic[i].powi(2);
            nn += numeric.powi(2);
        }
        report.elements_checked += idx.len();
        let scale = na.sqrt().max(nn.sqrt());
        let rel = if scale > 0.0 { diff.sqrt() / scale } else { 0.0 };
        if rel > report.max_rel_error || report.worst_param.is_empty() {
            report.max_rel_error = rel.max(report.max_rel_error);
            report.worst_param = name;
        }
    }
    Ok(report)
}
