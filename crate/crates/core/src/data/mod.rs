//! Procedural grid-world QA data, tokenization and answer regeneration.

mod conversation;
mod regen;
mod tokenize;
mod vocab;
mod world;

pub use conversation::{
    generate_split, make_conversation, sample_seed, Conversation, DataConfig, Provenance, QuestionFamily, Split,
    TemplateSet, Turn, TurnRole,
};
pub use regen::{
    generate_answer, regenerate_with_student, regenerate_with_teacher, student_subset, RegenReport,
    DEFAULT_MAX_ANSWER_TOKENS, STUDENT_REGEN_FRACTION,
};
pub use tokenize::{detokenize, prompt_ids, tokenize, MaskPolicy, TokenMask, TokenizedSample};
pub use vocab::{Vocabulary, BOS, EOS, IMG, MAX_COUNT, PAD, SEP};
pub use world::{all_objects, make_world, Cell, Color, Facts, GridConfig, Object, Shape, ToyImage};
