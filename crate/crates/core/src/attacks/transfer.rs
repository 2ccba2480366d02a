//! Transfer attacks: craft on a substitute model the attacker trained from
//! query access, then evaluate against the real pipeline.
//!
//! The substitute sees only the victim classifier's hard labels during its
//! own training (see the training module); here it stands in for the victim
//! during white-box crafting. Transfer quality is then measured exactly on
//! the victim: did the class flip, was the input flagged, and did the attack
//! beat classifier and detector together.

use crate::data::{ImageTensor, PatchMask};
use crate::error::Result;
use crate::neural::{argmax, Network};
use crate::pipeline::Pipeline;
use crate::rng::RngState;

use super::pgd::{masked_pgd, PgdConfig};
use super::AttackOutcome;

/// How an attack crafted elsewhere fares against the real pipeline.
#[derive(Debug, Clone)]
pub struct TransferReport {
    /// The crafting-side result (success = substitute was fooled).
    pub outcome: AttackOutcome,
    /// The victim classifier predicts something other than the true label.
    pub victim_fooled: bool,
    /// The two-stage rule flags the transferred input.
    pub victim_flagged: bool,
    /// Fooled the victim classifier without being flagged.
    pub evaded_ensemble: bool,
}

/// Evaluate an already-crafted input against the victim pipeline.
pub fn evaluate_transfer(
    victim: &Pipeline,
    x_adv: &ImageTensor,
    y_true: usize,
    outcome: AttackOutcome,
) -> Result<TransferReport> {
    let z = victim.class_logits(x_adv)?;
    let victim_fooled = argmax(z.as_slice().expect("contiguous logits")) != y_true;
    let decision = victim.decide(x_adv)?;
    Ok(TransferReport {
        outcome,
        victim_fooled,
        victim_flagged: decision.flagged,
        evaded_ensemble: victim_fooled && !decision.flagged,
    })
}

/// Craft a masked PGD attack on the substitute, score it on the victim.
pub fn transfer_pgd(
    substitute: &Network,
    victim: &Pipeline,
    x: &ImageTensor,
    y_true: usize,
    mask: &PatchMask,
    cfg: &PgdConfig,
    rng: &mut RngState,
) -> Result<TransferReport> {
    let outcome = masked_pgd(substitute, x, y_true, mask, cfg, rng)?;
    let x_adv = outcome.x_adv.clone();
    evaluate_transfer(victim, &x_adv, y_true, outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;
    use crate::denoise::DenoiseParams;
    use crate::neural::net::{desk_classifier_spec, desk_detector_spec};
    use crate::pipeline::DetectorInput;

    /// When the substitute IS the victim classifier, crafting success and
    /// victim fooling coincide by construction.
    #[test]
    fn perfect_substitute_transfers_perfectly() {
        let mut rng = RngState::new(31);
        let classifier = Network::new(desk_classifier_spec(3, 32, 4), &mut rng).unwrap();
        let substitute = classifier.clone();
        let detector = Network::new(desk_detector_spec(3, 32), &mut rng).unwrap();
        let victim = Pipeline::new(
            classifier,
            detector,
            DetectorInput::Residual(DenoiseParams::default()),
            0.0,
        )
        .unwrap();
        let data = synth_dataset(&mut rng, 4, 4);
        let mask = PatchMask::new_uncapped(0, 0, 32, 32, 32, 32).unwrap();
        let cfg = PgdConfig::new(1.0, 15);
        for (x, &y) in data.images.iter().zip(&data.labels) {
            // Only attack correctly-classified inputs; an untrained network
            // may misclassify, in which case the premise does not hold.
            let z = victim.class_logits(x).unwrap();
            if argmax(z.as_slice().unwrap()) != y {
                continue;
            }
            let report =
                transfer_pgd(&substitute, &victim, x, y, &mask, &cfg, &mut rng).unwrap();
            assert_eq!(report.outcome.success, report.victim_fooled);
            assert_eq!(
                report.evaded_ensemble,
                report.victim_fooled && !report.victim_flagged
            );
        }
    }

    #[test]
    fn evaluate_transfer_reports_exact_decision() {
        let mut rng = RngState::new(32);
        let classifier = Network::new(desk_classifier_spec(3, 32, 4), &mut rng).unwrap();
        let detector = Network::new(desk_detector_spec(3, 32), &mut rng).unwrap();
        let victim = Pipeline::new(
            classifier,
            detector,
            DetectorInput::Residual(DenoiseParams::default()),
            3.0,
        )
        .unwrap();
        let data = synth_dataset(&mut rng, 2, 2);
        let x = &data.images[0];
        let outcome = AttackOutcome::measured(x, x.clone(), false, 0, None);
        let report = evaluate_transfer(&victim, x, data.labels[0], outcome).unwrap();
        let decision = victim.decide(x).unwrap();
        assert_eq!(report.victim_flagged, decision.flagged);
        let z = victim.class_logits(x).unwrap();
        let fooled = argmax(z.as_slice().unwrap()) != data.labels[0];
        assert_eq!(report.victim_fooled, fooled);
    }
}
