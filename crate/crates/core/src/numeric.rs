//! Multi-task soft-prompt composition and masked language-modeling losses.
//!
//! A shared prompt `P*` (L×d) is specialised per task by a rank-one
//! Hadamard transform: `P_task = P* ∘ (u vᵀ)`. Losses are negative
//! log-likelihoods restricted to a supervised span of target positions.
//! The frozen language model only enters through externally supplied logits.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("target {target} at position {position} is outside vocabulary of size {vocab}")]
    IndexOutOfVocab {
        position: usize,
        target: usize,
        vocab: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Plan,
    Ans,
}

/// Shared prompt plus one task's rank-one modulation vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptComposition {
    pub shared_prompt: DMatrix<f64>,
    /// Length L (prompt positions).
    pub u_task: DVector<f64>,
    /// Length d (embedding width).
    pub v_task: DVector<f64>,
    pub task: TaskKind,
}

impl PromptComposition {
    pub fn new(
        shared_prompt: DMatrix<f64>,
        u_task: DVector<f64>,
        v_task: DVector<f64>,
        task: TaskKind,
    ) -> Result<Self, NumericError> {
        let c = PromptComposition {
            shared_prompt,
            u_task,
            v_task,
            task,
        };
        c.check()?;
        Ok(c)
    }

    fn check(&self) -> Result<(), NumericError> {
        let (l, d) = self.shared_prompt.shape();
        if self.u_task.len() != l || self.v_task.len() != d {
            return Err(NumericError::DimensionMismatch(format!(
                "P* is {l}x{d}, u has {} entries, v has {}",
                self.u_task.len(),
                self.v_task.len()
            )));
        }
        if !self.shared_prompt.iter().all(|x| x.is_finite()) {
            return Err(NumericError::NonFinite("shared prompt"));
        }
        if !self.u_task.iter().chain(self.v_task.iter()).all(|x| x.is_finite()) {
            return Err(NumericError::NonFinite("task vectors"));
        }
        Ok(())
    }

    /// `W_task = u vᵀ`.
    pub fn task_weight(&self) -> DMatrix<f64> {
        &self.u_task * self.v_task.transpose()
    }
}

/// `out[i][j] = P*[i][j] · u[i] · v[j]`.
pub fn compose_task_prompt(c: &PromptComposition) -> Result<DMatrix<f64>, NumericError> {
    c.check()?;
    let (l, d) = c.shared_prompt.shape();
    Ok(DMatrix::from_fn(l, d, |i, j| {
        c.shared_prompt[(i, j)] * c.u_task[i] * c.v_task[j]
    }))
}

/// Gradients of a scalar objective with respect to the composition inputs,
/// given the upstream gradient `∂f/∂P_task`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposeGrad {
    pub shared_prompt: DMatrix<f64>,
    pub u_task: DVector<f64>,
    pub v_task: DVector<f64>,
}

pub fn grad_compose(
    c: &PromptComposition,
    upstream: &DMatrix<f64>,
) -> Result<ComposeGrad, NumericError> {
    c.check()?;
    let (l, d) = c.shared_prompt.shape();
    if upstream.shape() != (l, d) {
        return Err(NumericError::DimensionMismatch(format!(
            "upstream is {}x{}, P* is {l}x{d}",
            upstream.nrows(),
            upstream.ncols()
        )));
    }
    let p = &c.shared_prompt;
    let (u, v) = (&c.u_task, &c.v_task);
    let shared_prompt = DMatrix::from_fn(l, d, |i, j| upstream[(i, j)] * u[i] * v[j]);
    let u_grad = DVector::from_fn(l, |i, _| {
        (0..d).map(|j| upstream[(i, j)] * p[(i, j)] * v[j]).sum()
    });
    let v_grad = DVector::from_fn(d, |j, _| {
        (0..l).map(|i| upstream[(i, j)] * p[(i, j)] * u[i]).sum()
    });
    Ok(ComposeGrad {
        shared_prompt,
        u_task: u_grad,
        v_task: v_grad,
    })
}

/// Numerical rank: singular values above `1e-10 · σ_max`.
pub fn rank_of(m: &DMatrix<f64>) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().singular_values();
    let max = sv.iter().cloned().fold(0.0_f64, f64::max);
    if max == 0.0 {
        return 0;
    }
    let threshold = 1e-10 * max;
    sv.iter().filter(|&&s| s > threshold).count()
}

/// Per-position logits with targets and a supervision mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    /// T×V.
    pub logits: DMatrix<f64>,
    pub targets: Vec<usize>,
    /// `true` marks positions inside the supervised span.
    pub mask: Vec<bool>,
}

impl MaskedBatch {
    pub fn new(
        logits: DMatrix<f64>,
        targets: Vec<usize>,
        mask: Vec<bool>,
    ) -> Result<Self, NumericError> {
        let b = MaskedBatch {
            logits,
            targets,
            mask,
        };
        b.check()?;
        Ok(b)
    }

    fn check(&self) -> Result<(), NumericError> {
        let (t, vocab) = self.logits.shape();
        if self.targets.len() != t || self.mask.len() != t {
            return Err(NumericError::DimensionMismatch(format!(
                "{t} logit rows, {} targets, {} mask entries",
                self.targets.len(),
                self.mask.len()
            )));
        }
        if let Some((position, &target)) =
            self.targets.iter().enumerate().find(|(_, &y)| y >= vocab)
        {
            return Err(NumericError::IndexOutOfVocab {
                position,
                target,
                vocab,
            });
        }
        Ok(())
    }
}

fn log_softmax_at(row: impl Iterator<Item = f64> + Clone, index: usize) -> f64 {
    let max = row.clone().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.clone().map(|x| (x - max).exp()).sum();
    let target = row.clone().nth(index).expect("index checked against vocab");
    target - max - sum.ln()
}

/// `−Σ_{i: mask[i]} log softmax(logits[i])[targets[i]]`, summed left to right.
pub fn masked_nll(b: &MaskedBatch) -> Result<f64, NumericError> {
    b.check()?;
    let mut total = 0.0;
    for (i, (&on, &target)) in b.mask.iter().zip(&b.targets).enumerate() {
        if on {
            total -= log_softmax_at(b.logits.row(i).iter().copied(), target);
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub plan: f64,
    pub answer: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            plan: 1.0,
            answer: 1.0,
        }
    }
}

/// `ℒ_plan + ℒ_ans` with unit weights.
pub fn joint_loss(plan: &MaskedBatch, answer: &MaskedBatch) -> Result<f64, NumericError> {
    joint_loss_weighted(plan, answer, LossWeights::default())
}

pub fn joint_loss_weighted(
    plan: &MaskedBatch,
    answer: &MaskedBatch,
    w: LossWeights,
) -> Result<f64, NumericError> {
    Ok(w.plan * masked_nll(plan)? + w.answer * masked_nll(answer)?)
}

/// Shared prompt with both task modulations, sized by configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiTaskPrompt {
    pub shared_prompt: DMatrix<f64>,
    pub plan: (DVector<f64>, DVector<f64>),
    pub answer: (DVector<f64>, DVector<f64>),
}

impl MultiTaskPrompt {
    pub const DEFAULT_LENGTH: usize = 8;
    pub const DEFAULT_WIDTH: usize = 16;

    pub fn composition(&self, task: TaskKind) -> PromptComposition {
        let (u, v) = match task {
            TaskKind::Plan => &self.plan,
            TaskKind::Ans => &self.answer,
        };
        PromptComposition {
            shared_prompt: self.shared_prompt.clone(),
            u_task: u.clone(),
            v_task: v.clone(),
            task,
        }
    }

    pub fn task_prompt(&self, task: TaskKind) -> Result<DMatrix<f64>, NumericError> {
        compose_task_prompt(&self.composition(task))
    }
}
