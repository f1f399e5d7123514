use alloc::vec::Vec;

use crate::data::{tokenize, Conversation, Provenance, QuestionFamily, TokenizedSample, Vocabulary};
use crate::error::Result;
use crate::exec::Executor;
use crate::losses::SequenceLayout;
use crate::model::{VisualEncoderSpec, VisualInput};

/// A conversation tokenized and rendered once, ready for training or scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub sample: TokenizedSample,
    pub image: VisualInput,
    pub family: QuestionFamily,
    pub provenance: Provenance,
    pub layout: SequenceLayout,
    /// Positions after the image tokens.
    pub text: Vec<usize>,
    pub answer: alloc::string::String,
}

pub fn prepare_sample(vocab: &Vocabulary, conv: &Conversation, visual: &VisualEncoderSpec) -> Result<PreparedSample> {
    let n = visual.num_tokens();
    let sample = tokenize(vocab, conv, n)?;
    let image = conv.image.render(visual)?;
    let layout = SequenceLayout {
        image: (1, 1 + n),
        answer: sample.answer_only.positions(),
    };
    let text = (1 + n..sample.ids.len()).collect();
    Ok(PreparedSample {
        sample,
        image,
        family: conv.family,
        provenance: conv.provenance,
        layout,
        text,
        answer: conv.answer().into(),
    })
}

pub fn prepare<E: Executor>(
    exec: &E,
    vocab: &Vocabulary,
    convs: &[Conversation],
    visual: &VisualEncoderSpec,
) -> Result<Vec<PreparedSample>> {
    exec.map(convs.len(), |i| prepare_sample(vocab, &convs[i], visual))
        .into_iter()
        .collect()
}
