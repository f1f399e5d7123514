use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::conversation::{Conversation, Provenance};
use super::tokenize::prompt_ids;
use super::vocab::{Vocabulary, EOS};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::math;
use crate::model::TransformerLM;

/// Default share of samples the student regenerates.
pub const STUDENT_REGEN_FRACTION: f64 = 0.5;

/// Answer budget for regeneration and evaluation decoding.
pub const DEFAULT_MAX_ANSWER_TOKENS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RegenReport {
    pub regenerated: usize,
    /// Samples whose generation did not terminate in budget or produced
    /// unusable text; they keep their original answer.
    pub kept_original: usize,
}

/// Greedy answer for the sample's image and question, or `None` when the
/// model fails to close the answer within `max_new` tokens.
pub fn generate_answer(
    model: &TransformerLM,
    vocab: &Vocabulary,
    conv: &Conversation,
    max_new: usize,
) -> Result<Option<alloc::string::String>> {
    let image = conv.image.render(&model.spec.visual)?;
    let prompt = prompt_ids(vocab, conv.instruction(), model.spec.visual.num_tokens())?;
    let out = model.generate(&image, &prompt, max_new, EOS)?;
    if !out.finished || out.tokens.is_empty() || out.tokens.iter().any(|&t| Vocabulary::is_special(t)) {
        return Ok(None);
    }
    Ok(Some(vocab.decode(&out.tokens)))
}

fn regenerate_indices<E: Executor>(
    exec: &E,
    dataset: &[Conversation],
    indices: &[usize],
    model: &TransformerLM,
    vocab: &Vocabulary,
    max_new: usize,
    provenance: Provenance,
) -> Result<(Vec<Conversation>, RegenReport)> {
    let answers = exec.map(indices.len(), |k| generate_answer(model, vocab, &dataset[indices[k]], max_new));
    let mut out = dataset.to_vec();
    let mut report = RegenReport::default();
    for (&i, ans) in indices.iter().zip(answers) {
        match ans? {
            Some(text) => {
                out[i].set_answer(text, provenance);
                report.regenerated += 1;
            }
            None => report.kept_original += 1,
        }
    }
    Ok((out, report))
}

/// Replaces every answer with the teacher's greedy answer; images and
/// questions are unchanged.
pub fn regenerate_with_teacher<E: Executor>(
    exec: &E,
    dataset: &[Conversation],
    teacher: &TransformerLM,
    vocab: &Vocabulary,
    max_new: usize,
) -> Result<(Vec<Conversation>, RegenReport)> {
    let all: Vec<usize> = (0..dataset.len()).collect();
    regenerate_indices(exec, dataset, &all, teacher, vocab, max_new, Provenance::TeacherRegenerated)
}

/// The `floor(rho * N)` samples the student regenerates, sorted.
pub fn student_subset(n: usize, rho: f64, seed: u64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Parameter(format!("regeneration fraction {rho} outside [0, 1]")));
    }
    let k = math::floor(rho * n as f64) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Replaces a seeded random `rho` share of answers with the student's own
/// greedy answers. Those samples are supervised by teacher logits during
/// distillation.
pub fn regenerate_with_student<E: Executor>(
    exec: &E,
    dataset: &[Conversation],
    student: &TransformerLM,
    vocab: &Vocabulary,
    rho: f64,
    seed: u64,
    max_new: usize,
) -> Result<(Vec<Conversation>, RegenReport)> {
    let idx = student_subset(dataset.len(), rho, seed)?;
    regenerate_indices(exec, dataset, &idx, student, vocab, max_new, Provenance::StudentRegenerated)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subset_sizes_and_determinism() {
        assert!(student_subset(100, 0.0, 1).unwrap().is_empty());
        assert_eq!(student_subset(100, 1.0, 1).unwrap().len(), 100);
        let a = student_subset(1000, 0.5, 7).unwrap();
        assert_eq!(a.len(), 500);
        assert_eq!(a, student_subset(1000, 0.5, 7).unwrap());
        assert_ne!(a, student_subset(1000, 0.5, 8).unwrap());
        assert!(matches!(student_subset(10, 1.5, 0), Err(Error::Parameter(_))));
        assert!(matches!(student_subset(10, -0.1, 0), Err(Error::Parameter(_))));
    }
}
