//! Exact-match QA accuracy, teacher agreement and held-out loss.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{QuestionFamily, Vocabulary, DEFAULT_MAX_ANSWER_TOKENS, EOS};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::losses::autoregressive_ce;
use crate::model::{Generation, ModelSpec, TransformerLM};
use crate::train::PreparedSample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyAccuracy {
    pub family: QuestionFamily,
    pub correct: usize,
    pub total: usize,
    /// Percent.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Exact-match accuracy in percent.
    pub accuracy: f64,
    pub per_family: Vec<FamilyAccuracy>,
    /// Percent of questions decoded exactly as the teacher decodes them.
    pub agreement: Option<f64>,
    /// Mean answer-token cross entropy.
    pub heldout_loss: f64,
    pub samples: usize,
}

fn percent(k: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        100.0 * k as f64 / n as f64
    }
}

/// Greedy decodes of every prompt.
pub fn predict<E: Executor>(exec: &E, model: &TransformerLM, data: &[PreparedSample]) -> Result<Vec<Generation>> {
    exec.map(data.len(), |i| {
        let s = &data[i];
        let z = model.encode_visual(&s.image)?;
        model.generate_from_features(&z, s.sample.prompt(), DEFAULT_MAX_ANSWER_TOKENS, EOS)
    })
    .into_iter()
    .collect()
}

/// Whether a decode spells the oracle answer.
pub fn is_correct(vocab: &Vocabulary, g: &Generation, s: &PreparedSample) -> bool {
    g.finished && vocab.decode(&g.tokens) == s.answer
}

/// Percent of exactly matching decodes; both decodes must also agree on
/// termination.
pub fn agreement_rate(a: &[Generation], b: &[Generation]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!("{} vs {} decodes", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Contract("empty evaluation set".into()));
    }
    Ok(percent(a.iter().zip(b).filter(|(x, y)| x == y).count(), a.len()))
}

/// Mean answer-token cross entropy.
pub fn heldout_loss<E: Executor>(exec: &E, model: &TransformerLM, data: &[PreparedSample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Contract("empty evaluation set".into()));
    }
    let v = exec.map(data.len(), |i| -> Result<f64> {
        let s = &data[i];
        let mut g = Graph::new();
        let vars = model.bind(&mut g, |_| false);
        let z = g.constant(model.encode_visual(&s.image)?);
        let hv = model.project_visual(&mut g, &vars, z)?;
        let out = model.forward(&mut g, &vars, hv, &s.sample.ids)?;
        let l = autoregressive_ce(&mut g, out.logits, &s.sample.ids, &s.sample.answer_only)?;
        Ok(g.item(l))
    });
    let mut sum = 0.0;
    for x in v {
        sum += x?;
    }
    Ok(sum / data.len() as f64)
}

/// Accuracy, per-family accuracy and held-out loss; agreement when the
/// teacher's decodes are supplied.
pub fn evaluate<E: Executor>(
    exec: &E,
    model: &TransformerLM,
    vocab: &Vocabulary,
    data: &[PreparedSample],
    teacher_predictions: Option<&[Generation]>,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Contract("empty evaluation set".into()));
    }
    let preds = predict(exec, model, data)?;
    let mut per_family = Vec::new();
    let mut correct = 0;
    for fam in QuestionFamily::ALL {
        let mut k = 0;
        let mut n = 0;
        for (g, s) in preds.iter().zip(data) {
            if s.family == fam {
                n += 1;
                k += usize::from(is_correct(vocab, g, s));
            }
        }
        correct += k;
        if n > 0 {
            per_family.push(FamilyAccuracy {
                family: fam,
                correct: k,
                total: n,
                accuracy: percent(k, n),
            });
        }
    }
    let agreement = teacher_predictions.map(|t| agreement_rate(&preds, t)).transpose()?;
    Ok(EvalReport {
        accuracy: percent(correct, data.len()),
        per_family,
        agreement,
        heldout_loss: heldout_loss(exec, model, data)?,
        samples: data.len(),
    })
}

/// Exact-match accuracy report without agreement.
pub fn eval_qa_accuracy<E: Executor>(
    exec: &E,
    model: &TransformerLM,
    vocab: &Vocabulary,
    data: &[PreparedSample],
) -> Result<EvalReport> {
    evaluate(exec, model, vocab, data, None)
}

/// Percent of questions where the two models' greedy decodes match.
pub fn teacher_agreement<E: Executor>(
    exec: &E,
    student: &TransformerLM,
    teacher: &TransformerLM,
    data: &[PreparedSample],
) -> Result<f64> {
    ModelSpec::check_pair(&teacher.spec, &student.spec)?;
    let a = predict(exec, student, data)?;
    let b = predict(exec, teacher, data)?;
    agreement_rate(&a, &b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn gen(tokens: &[usize], finished: bool) -> Generation {
        Generation {
            tokens: tokens.to_vec(),
            finished,
        }
    }

    #[test]
    fn agreement_needs_identical_decodes() {
        let a = vec![gen(&[5], true), gen(&[6], true), gen(&[7], false), gen(&[8], true)];
        let b = vec![gen(&[5], true), gen(&[6, 6], true), gen(&[7], true), gen(&[8], true)];
        assert_eq!(agreement_rate(&a, &b).unwrap(), 50.0);
        assert!(agreement_rate(&a, &b[..2]).is_err());
    }

    #[test]
    fn percent_of_nothing_is_zero() {
        assert_eq!(percent(0, 0), 0.0);
        assert_eq!(percent(1, 4), 25.0);
    }
}
