//! Finite-difference verification of the manual backward pass.
//!
//! The check compares every analytic parameter gradient and every analytic
//! input gradient against central differences of the full training loss
//! (data term plus L2 penalty). Points too close to a ReLU or max-pool
//! decision boundary are rejected rather than checked: a kink within `h` of
//! the evaluation point makes the finite difference meaningless, not wrong.

use ndarray::Array3;

use crate::error::Result;
use crate::neural::net::{binary_cross_entropy, cross_entropy, Network};

/// Loss under which gradients are verified.
#[derive(Debug, Clone, Copy)]
pub enum CheckLoss {
    /// Multi-class cross-entropy against this label.
    CrossEntropy(usize),
    /// Binary cross-entropy of a single-logit output against this target.
    BinaryCrossEntropy(f64),
}

/// Result of one finite-difference comparison.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    /// Largest guarded relative error over all parameters.
    pub max_param_rel: f64,
    /// Largest guarded relative error over all input pixels.
    pub max_input_rel: f64,
    /// Distance of the evaluation point to the nearest kink.
    pub kink_margin: f64,
}

/// Guarded relative error: relative where the scale is meaningful, absolute
/// (scaled by the guard) where both values are negligible.
fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-6);
    (a - b).abs() / denom
}

fn loss_of(net: &Network, x: &Array3<f64>, loss: CheckLoss, lambda: f64) -> Result<f64> {
    let logits = net.forward(x)?;
    let data = match loss {
        CheckLoss::CrossEntropy(target) => cross_entropy(&logits, target).0,
        CheckLoss::BinaryCrossEntropy(target) => binary_cross_entropy(logits[0], target).0,
    };
    Ok(data + net.l2_penalty(lambda))
}

/// Compare analytic gradients with central differences of step `h`.
///
/// Returns `None` when the trace passes within `min_margin` of a kink; the
/// caller should resample rather than interpret the comparison.
pub fn finite_difference_check(
    net: &Network,
    x: &Array3<f64>,
    loss: CheckLoss,
    lambda: f64,
    h: f64,
    min_margin: f64,
) -> Result<Option<GradCheckReport>> {
    let kink_margin = net.kink_margin(x)?;
    if kink_margin < min_margin {
        return Ok(None);
    }

    let (logits, trace) = net.forward_trace(x)?;
    let dlogits = match loss {
        CheckLoss::CrossEntropy(target) => cross_entropy(&logits, target).1,
        CheckLoss::BinaryCrossEntropy(target) => {
            let (_, g) = binary_cross_entropy(logits[0], target);
            ndarray::Array1::from_vec(vec![g])
        }
    };
    let (mut dtheta, dinput) = net.backward(&trace, &dlogits);
    net.add_l2_gradient(lambda, &mut dtheta);

    let mut probe = net.clone();
    let mut max_param_rel: f64 = 0.0;
    for i in 0..probe.theta.len() {
        let orig = probe.theta[i];
        probe.theta[i] = orig + h;
        let up = loss_of(&probe, x, loss, lambda)?;
        probe.theta[i] = orig - h;
        let down = loss_of(&probe, x, loss, lambda)?;
        probe.theta[i] = orig;
        let fd = (up - down) / (2.0 * h);
        max_param_rel = max_param_rel.max(rel_err(dtheta[i], fd));
    }

    let mut xp = x.clone();
    let mut max_input_rel: f64 = 0.0;
    let dim = x.dim();
    for c in 0..dim.0 {
        for r in 0..dim.1 {
            for col in 0..dim.2 {
                let orig = xp[[c, r, col]];
                xp[[c, r, col]] = orig + h;
                let up = loss_of(net, &xp, loss, lambda)?;
                xp[[c, r, col]] = orig - h;
                let down = loss_of(net, &xp, loss, lambda)?;
                xp[[c, r, col]] = orig;
                let fd = (up - down) / (2.0 * h);
                max_input_rel = max_input_rel.max(rel_err(dinput[[c, r, col]], fd));
            }
        }
    }

    Ok(Some(GradCheckReport {
        max_param_rel,
        max_input_rel,
        kink_margin,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::net::{LayerSpec, NetworkSpec};
    use crate::rng::RngState;

    fn sample_net_and_input(
        rng: &mut RngState,
        classes: usize,
    ) -> (Network, Array3<f64>) {
        let spec = NetworkSpec {
            input: (1, 6, 6),
            layers: vec![
                LayerSpec::Conv {
                    out_channels: 3,
                    kernel: 3,
                    padding: 1,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense { out_dim: 5 },
                LayerSpec::Relu,
                LayerSpec::Dense { out_dim: classes },
            ],
        };
        let net = Network::new(spec, rng).unwrap();
        let x = Array3::from_shape_fn((1, 6, 6), |_| rng.uniform(0.0, 1.0));
        (net, x)
    }

    #[test]
    fn analytic_gradients_match_central_differences() {
        let mut rng = RngState::new(31);
        let mut checked = 0;
        while checked < 3 {
            let (net, x) = sample_net_and_input(&mut rng, 4);
            let target = rng.uniform_usize(4);
            match finite_difference_check(
                &net,
                &x,
                CheckLoss::CrossEntropy(target),
                5e-3,
                1e-3,
                1e-2,
            )
            .unwrap()
            {
                Some(report) => {
                    assert!(
                        report.max_param_rel <= 1e-4,
                        "param rel err {}",
                        report.max_param_rel
                    );
                    assert!(
                        report.max_input_rel <= 1e-4,
                        "input rel err {}",
                        report.max_input_rel
                    );
                    checked += 1;
                }
                None => continue,
            }
        }
    }

    #[test]
    fn binary_loss_gradients_match_too() {
        let mut rng = RngState::new(32);
        let mut checked = 0;
        while checked < 2 {
            let (net, x) = sample_net_and_input(&mut rng, 1);
            let target = if rng.next_f64() < 0.5 { 0.0 } else { 1.0 };
            match finite_difference_check(
                &net,
                &x,
                CheckLoss::BinaryCrossEntropy(target),
                5e-3,
                1e-3,
                1e-2,
            )
            .unwrap()
            {
                Some(report) => {
                    assert!(report.max_param_rel <= 1e-4);
                    assert!(report.max_input_rel <= 1e-4);
                    checked += 1;
                }
                None => continue,
            }
        }
    }

    #[test]
    fn near_kink_points_are_rejected_not_checked() {
        let mut rng = RngState::new(33);
        let (mut net, x) = sample_net_and_input(&mut rng, 3);
        // Zero parameters put every ReLU pre-activation exactly at the kink.
        net.theta.iter_mut().for_each(|v| *v = 0.0);
        let out = finite_difference_check(
            &net,
            &x,
            CheckLoss::CrossEntropy(0),
            0.0,
            1e-3,
            1e-2,
        )
        .unwrap();
        assert!(out.is_none());
    }
}
