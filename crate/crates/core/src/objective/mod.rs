//! Hybrid loss: next-token prediction inside permuted clean slots plus
//! denoising at masked slots, both read off one forward pass.

use crate::backbone::{log_softmax, weighted_nll, LossFn, LossReport, Logits, NllTerm};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::slotting::{Role, TrainingInstance};

/// Loss weights derived from a training instance.
///
/// Each side is a mean over its own non-pad terms. `parts` of the reported
/// loss are `[arm, mdm]`; the total is `arm + lambda · mdm`.
#[derive(Clone, Debug, PartialEq)]
pub struct HybridObjective {
    pub arm_terms: Vec<NllTerm>,
    pub mdm_terms: Vec<NllTerm>,
    pub lambda: f64,
}

impl HybridObjective {
    pub fn new(instance: &TrainingInstance, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Argument(format!("lambda must be a finite value >= 0, got {lambda}")));
        }
        Ok(Self {
            arm_terms: arm_terms(instance)?,
            mdm_terms: mdm_terms(instance)?,
            lambda,
        })
    }
}

fn check_roles(instance: &TrainingInstance) -> Result<()> {
    if instance.roles.len() != instance.buffer.len() {
        return Err(Error::Integrity(format!(
            "{} roles for a buffer of {} tokens",
            instance.roles.len(),
            instance.buffer.len()
        )));
    }
    Ok(())
}

fn normalized(mut terms: Vec<NllTerm>) -> Vec<NllTerm> {
    let w = 1.0 / terms.len().max(1) as f64;
    for t in &mut terms {
        t.weight = w;
    }
    terms
}

/// Row `r - 1` predicts the clean token at row `r` for every in-slot index ≥ 1.
pub fn arm_terms(instance: &TrainingInstance) -> Result<Vec<NllTerm>> {
    check_roles(instance)?;
    let tokens = instance.buffer.tokens();
    let terms = (0..instance.roles.len())
        .filter(|&r| instance.roles[r] == Role::Arm)
        .map(|r| NllTerm {
            row: r - 1,
            target: tokens[r],
            weight: 1.0,
        })
        .collect();
    Ok(normalized(terms))
}

/// Each masked row predicts its own ground-truth token.
pub fn mdm_terms(instance: &TrainingInstance) -> Result<Vec<NllTerm>> {
    check_roles(instance)?;
    let terms = instance
        .roles
        .iter()
        .enumerate()
        .filter_map(|(row, role)| match *role {
            Role::Masked { truth } => Some(NllTerm {
                row,
                target: truth,
                weight: 1.0,
            }),
            _ => None,
        })
        .collect();
    Ok(normalized(terms))
}

fn eval_terms<T: Scalar>(logits: &Logits<T>, instance: &TrainingInstance, terms: &[NllTerm]) -> Result<f64> {
    if logits.rows() != instance.buffer.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for a buffer of {} tokens",
            logits.rows(),
            instance.buffer.len()
        )));
    }
    let mut total = 0.0;
    for t in terms {
        total -= t.weight * log_softmax(logits.row(t.row))[t.target as usize];
    }
    Ok(total)
}

/// Mean next-token NLL over clean slot tokens after each slot's first; 0 when
/// there are none.
pub fn arm_loss<T: Scalar>(logits: &Logits<T>, instance: &TrainingInstance) -> Result<f64> {
    eval_terms(logits, instance, &arm_terms(instance)?)
}

/// Mean NLL of the ground truth at masked positions; 0 when there are none.
pub fn mdm_loss<T: Scalar>(logits: &Logits<T>, instance: &TrainingInstance) -> Result<f64> {
    eval_terms(logits, instance, &mdm_terms(instance)?)
}

pub fn hybrid_loss<T: Scalar>(logits: &Logits<T>, instance: &TrainingInstance, lambda: f64) -> Result<f64> {
    Ok(arm_loss(logits, instance)? + lambda * mdm_loss(logits, instance)?)
}

impl LossFn for HybridObjective {
    fn evaluate<T: Scalar>(
        &self,
        logits: &[T],
        vocab: usize,
        mut grad: Option<&mut [T]>,
        scale: f64,
    ) -> Result<LossReport> {
        let arm = weighted_nll(&self.arm_terms, logits, vocab, grad.as_deref_mut(), scale)?;
        // With lambda = 0 the denoising loss is still reported but adds no gradient.
        let mdm = if self.lambda > 0.0 {
            weighted_nll(&self.mdm_terms, logits, vocab, grad, scale * self.lambda)?
        } else {
            weighted_nll(&self.mdm_terms, logits, vocab, None, scale)?
        };
        Ok(LossReport {
            total: arm + self.lambda * mdm,
            parts: vec![arm, mdm],
        })
    }
}
