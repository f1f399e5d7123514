use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::world::{make_world, Color, Facts, GridConfig, Shape, ToyImage};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionFamily {
    Count,
    Presence,
    Position,
    Describe,
}

impl QuestionFamily {
    pub const ALL: [QuestionFamily; 4] = [
        QuestionFamily::Count,
        QuestionFamily::Presence,
        QuestionFamily::Position,
        QuestionFamily::Describe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            QuestionFamily::Count => "count",
            QuestionFamily::Presence => "presence",
            QuestionFamily::Position => "position",
            QuestionFamily::Describe => "describe",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnRole {
    Instruction,
    Answer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: TurnRole,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Original,
    TeacherRegenerated,
    StudentRegenerated,
}

/// One image with a single instruction/answer exchange.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub image: ToyImage,
    pub family: QuestionFamily,
    pub turns: Vec<Turn>,
    pub provenance: Provenance,
}

impl Conversation {
    pub fn new(image: ToyImage, family: QuestionFamily, instruction: String, answer: String) -> Self {
        Self {
            image,
            family,
            turns: vec![
                Turn {
                    role: TurnRole::Instruction,
                    text: instruction,
                },
                Turn {
                    role: TurnRole::Answer,
                    text: answer,
                },
            ],
            provenance: Provenance::Original,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.image.validate()?;
        if self.turns.is_empty() || !self.turns.len().is_multiple_of(2) {
            return Err(Error::Contract("conversation needs instruction/answer pairs".into()));
        }
        for (i, t) in self.turns.iter().enumerate() {
            let want = if i % 2 == 0 { TurnRole::Instruction } else { TurnRole::Answer };
            if t.role != want {
                return Err(Error::Contract("turn roles must alternate starting with an instruction".into()));
            }
            if t.role == TurnRole::Answer && t.text.split_whitespace().next().is_none() {
                return Err(Error::Contract("empty answer".into()));
            }
        }
        Ok(())
    }

    pub fn instruction(&self) -> &str {
        &self.turns[0].text
    }

    pub fn answer(&self) -> &str {
        &self.turns[1].text
    }

    pub fn set_answer(&mut self, text: String, provenance: Provenance) {
        self.turns[1].text = text;
        self.provenance = provenance;
    }
}

/// Question families that may be sampled.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSet(pub Vec<QuestionFamily>);

impl TemplateSet {
    pub fn all() -> Self {
        Self(QuestionFamily::ALL.to_vec())
    }

    /// Caption-style samples for projector pretraining.
    pub fn captions() -> Self {
        Self(vec![QuestionFamily::Describe])
    }
}

/// Oracle answer for a question family and its sampled arguments.
fn describe(facts: &Facts) -> String {
    let colors = facts.colors_present();
    if colors.is_empty() {
        return "nothing".to_string();
    }
    let words: Vec<&str> = colors.iter().map(|c| c.word()).collect();
    words.join(" ")
}

/// Samples a question from `templates` and answers it from `facts`.
pub fn make_conversation(image: &ToyImage, facts: &Facts, seed: u64, templates: &TemplateSet) -> Result<Conversation> {
    if templates.0.is_empty() {
        return Err(Error::Config("empty template set".into()));
    }
    if facts.cells.is_empty() {
        return Err(Error::Contract("no facts to ask about".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let family = templates.0[rng.random_range(0..templates.0.len())];
    let (q, a) = match family {
        QuestionFamily::Count => {
            let color = Color::ALL[rng.random_range(0..Color::ALL.len())];
            (
                format!("how many {} objects are there", color.word()),
                facts.count(color).to_string(),
            )
        }
        QuestionFamily::Presence => {
            let shape = Shape::ALL[rng.random_range(0..Shape::ALL.len())];
            let ans = if facts.shape_present(shape) { "yes" } else { "no" };
            (format!("is there a {}", shape.word()), ans.to_string())
        }
        QuestionFamily::Position => {
            let r = rng.random_range(0..facts.rows);
            let c = rng.random_range(0..facts.cols);
            let ans = facts.cell(r, c).map_or("nothing", |o| o.color.word());
            (format!("what color is at row {} column {}", r + 1, c + 1), ans.to_string())
        }
        QuestionFamily::Describe => ("describe the image".to_string(), describe(facts)),
    };
    Ok(Conversation::new(image.clone(), family, q, a))
}

/// Which half of the seed space a split draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Pretrain,
    Train,
    Eval,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Pretrain => 0x5052,
            Split::Train => 0x5452,
            Split::Eval => 0x4556,
        }
    }
}

/// Per-sample seed; disjoint streams for each split.
pub fn sample_seed(base: u64, split: Split, index: u64) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ split.tag().wrapping_mul(0xBF58_476D_1CE4_E5B9)
        ^ index.wrapping_mul(0x94D0_49BB_1331_11EB)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub grid: GridConfig,
    pub pretrain_size: usize,
    pub train_size: usize,
    pub eval_size: usize,
    pub families: Vec<QuestionFamily>,
    /// Thousandths of answers replaced by a wrong answer of the same family.
    pub answer_noise_permille: u32,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            grid: GridConfig::default(),
            pretrain_size: 2000,
            train_size: 8000,
            eval_size: 1000,
            families: QuestionFamily::ALL.to_vec(),
            answer_noise_permille: 0,
        }
    }
}

fn corrupt(conv: &mut Conversation, rng: &mut ChaCha8Rng) {
    let options: Vec<String> = match conv.family {
        QuestionFamily::Count => (0..=6).map(|n: usize| n.to_string()).collect(),
        QuestionFamily::Presence => vec!["yes".into(), "no".into()],
        QuestionFamily::Position => core::iter::once("nothing".to_string())
            .chain(Color::ALL.iter().map(|c| c.word().to_string()))
            .collect(),
        QuestionFamily::Describe => Color::ALL.iter().map(|c| c.word().to_string()).collect(),
    };
    let wrong: Vec<&String> = options.iter().filter(|o| o.as_str() != conv.answer()).collect();
    if !wrong.is_empty() {
        let pick = wrong[rng.random_range(0..wrong.len())].clone();
        conv.turns[1].text = pick;
    }
}

/// Generates `n` conversations for one split.
pub fn generate_split(cfg: &DataConfig, split: Split, n: usize) -> Result<Vec<Conversation>> {
    let templates = match split {
        Split::Pretrain => TemplateSet::captions(),
        _ => TemplateSet(cfg.families.clone()),
    };
    (0..n as u64)
        .map(|i| {
            let seed = sample_seed(cfg.seed, split, i);
            let (img, facts) = make_world(seed, &cfg.grid)?;
            let mut conv = make_conversation(&img, &facts, seed ^ 0xA5A5, &templates)?;
            if cfg.answer_noise_permille > 0 && split != Split::Eval {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5A5A);
                if rng.random_range(0..1000u32) < cfg.answer_noise_permille {
                    corrupt(&mut conv, &mut rng);
                }
            }
            Ok(conv)
        })
        .collect()
}
