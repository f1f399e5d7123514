use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::conversation::Conversation;
use super::vocab::{Vocabulary, BOS, EOS, IMG, SEP};
use crate::error::{Error, Result};

/// Which positions a masked loss reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPolicy {
    #[default]
    AnswerOnly,
    AllTokens,
}

/// Boolean selection over sequence positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenMask(pub Vec<bool>);

impl TokenMask {
    pub fn all(len: usize) -> Self {
        Self(vec![true; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn positions(&self) -> Vec<usize> {
        self.0.iter().enumerate().filter_map(|(i, &b)| b.then_some(i)).collect()
    }

    /// Logit rows that predict a selected token: `p - 1` for each selected `p >= 1`.
    pub fn prediction_rows(&self) -> Vec<usize> {
        self.positions().into_iter().filter(|&p| p > 0).map(|p| p - 1).collect()
    }

    pub fn is_subset_of(&self, other: &TokenMask) -> bool {
        self.0.len() == other.0.len() && self.0.iter().zip(&other.0).all(|(&a, &b)| !a || b)
    }
}

/// Token ids for `[BOS, IMG x n, instruction, SEP, answer, EOS]` with role masks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedSample {
    pub ids: Vec<usize>,
    /// Answer tokens and the closing EOS.
    pub answer_only: TokenMask,
    pub all_tokens: TokenMask,
    pub instruction: TokenMask,
    /// Number of leading tokens fed as the generation prompt (through SEP).
    pub prompt_len: usize,
}

impl TokenizedSample {
    pub fn mask(&self, policy: MaskPolicy) -> &TokenMask {
        match policy {
            MaskPolicy::AnswerOnly => &self.answer_only,
            MaskPolicy::AllTokens => &self.all_tokens,
        }
    }

    pub fn prompt(&self) -> &[usize] {
        &self.ids[..self.prompt_len]
    }

    /// Answer ids, without EOS.
    pub fn answer_ids(&self) -> &[usize] {
        &self.ids[self.prompt_len..self.ids.len() - 1]
    }
}

/// Prompt `[BOS, IMG x n, instruction, SEP]`.
pub fn prompt_ids(vocab: &Vocabulary, instruction: &str, num_visual: usize) -> Result<Vec<usize>> {
    let mut ids = Vec::with_capacity(num_visual + 16);
    ids.push(BOS);
    ids.extend(std::iter::repeat_n(IMG, num_visual));
    ids.extend(vocab.encode(instruction)?);
    ids.push(SEP);
    Ok(ids)
}

pub fn tokenize(vocab: &Vocabulary, conv: &Conversation, num_visual: usize) -> Result<TokenizedSample> {
    conv.validate()?;
    let mut ids = prompt_ids(vocab, conv.instruction(), num_visual)?;
    let prompt_len = ids.len();
    let answer = vocab.encode(conv.answer())?;
    if answer.iter().any(|&t| Vocabulary::is_special(t)) {
        return Err(Error::Contract("special token in answer text".into()));
    }
    ids.extend(answer);
    ids.push(EOS);
    let n = ids.len();
    let answer_only = TokenMask((0..n).map(|i| i >= prompt_len).collect());
    let instruction = TokenMask((0..n).map(|i| i > num_visual && i + 1 < prompt_len).collect());
    Ok(TokenizedSample {
        ids,
        answer_only,
        all_tokens: TokenMask::all(n),
        instruction,
        prompt_len,
    })
}

/// Instruction and answer text recovered from a tokenized sample.
pub fn detokenize(vocab: &Vocabulary, sample: &TokenizedSample) -> (String, String) {
    let instr: Vec<usize> = sample
        .ids
        .iter()
        .zip(&sample.instruction.0)
        .filter_map(|(&t, &m)| m.then_some(t))
        .collect();
    (vocab.decode(&instr), vocab.decode(sample.answer_ids()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_split, DataConfig, Split};

    #[test]
    fn layout_and_round_trip() {
        let vocab = Vocabulary::new(512).unwrap();
        let convs = generate_split(&DataConfig::default(), Split::Train, 200).unwrap();
        for c in &convs {
            let s = tokenize(&vocab, c, 16).unwrap();
            assert_eq!(s.ids[0], BOS);
            assert!(s.ids[1..17].iter().all(|&t| t == IMG));
            assert_eq!(s.ids[s.prompt_len - 1], SEP);
            assert_eq!(*s.ids.last().unwrap(), EOS);
            let (q, a) = detokenize(&vocab, &s);
            assert_eq!(q, c.instruction());
            assert_eq!(a, c.answer());
            // masks partition
            assert!(s.answer_only.is_subset_of(&s.all_tokens));
            assert!(s.answer_only.0.iter().zip(&s.instruction.0).all(|(&a, &i)| !(a && i)));
        }
    }

    #[test]
    fn single_token_answer_selects_two_positions() {
        let vocab = Vocabulary::new(512).unwrap();
        let (img, _) = crate::data::make_world(0, &Default::default()).unwrap();
        let c = Conversation::new(
            img,
            crate::data::QuestionFamily::Count,
            "how many red objects are there".into(),
            "3".into(),
        );
        let s = tokenize(&vocab, &c, 16).unwrap();
        assert_eq!(s.answer_only.count(), 2);
        assert_eq!(s.answer_only.prediction_rows(), vec![s.prompt_len - 1, s.prompt_len]);
    }

    #[test]
    fn unknown_word_errors() {
        let vocab = Vocabulary::new(512).unwrap();
        let (img, _) = crate::data::make_world(0, &Default::default()).unwrap();
        let c = Conversation::new(img, crate::data::QuestionFamily::Count, "how many zebras".into(), "3".into());
        assert!(matches!(tokenize(&vocab, &c, 16), Err(Error::Tokenize(w)) if w == "zebras"));
    }
}
