use alloc::format;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Frozen patch featurizer geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisualEncoderSpec {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub visual_dim: usize,
}

impl Default for VisualEncoderSpec {
    fn default() -> Self {
        Self {
            image_height: 12,
            image_width: 12,
            patch_size: 4,
            channels: 4,
            visual_dim: 32,
        }
    }
}

impl VisualEncoderSpec {
    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || self.image_height == 0 || self.image_width == 0 || self.channels == 0 || self.visual_dim == 0 {
            return Err(Error::Config("visual encoder sizes must be positive".into()));
        }
        if !self.image_height.is_multiple_of(p) || !self.image_width.is_multiple_of(p) {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by patch size {p}",
                self.image_height, self.image_width
            )));
        }
        Ok(())
    }

    /// `H * W / P^2`.
    pub fn num_tokens(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Teacher,
    Student,
}

/// Shape of a visual-prefix decoder-only language model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub vocab_size: usize,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    /// Token id whose positions receive the projected visual features.
    pub image_token: usize,
    pub role: Role,
    pub visual: VisualEncoderSpec,
}

impl ModelSpec {
    pub fn teacher() -> Self {
        Self {
            vocab_size: 512,
            num_layers: 4,
            hidden_dim: 128,
            num_heads: 4,
            ffn_dim: 512,
            max_seq_len: 128,
            image_token: crate::data::IMG,
            role: Role::Teacher,
            visual: VisualEncoderSpec::default(),
        }
    }

    pub fn student() -> Self {
        Self {
            num_layers: 2,
            hidden_dim: 64,
            num_heads: 2,
            ffn_dim: 256,
            role: Role::Student,
            ..Self::teacher()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        self.visual.validate()?;
        if self.vocab_size == 0 || self.num_layers == 0 || self.hidden_dim == 0 || self.num_heads == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.image_token >= self.vocab_size {
            return Err(Error::Config("image token outside vocabulary".into()));
        }
        if self.max_seq_len < self.visual.num_tokens() + 2 {
            return Err(Error::Config("context too short for the visual prefix".into()));
        }
        Ok(())
    }

    /// Checks that `student` can be distilled from `teacher`.
    pub fn check_pair(teacher: &ModelSpec, student: &ModelSpec) -> Result<()> {
        if teacher.vocab_size != student.vocab_size {
            return Err(Error::Config(format!(
                "teacher vocabulary {} differs from student vocabulary {}",
                teacher.vocab_size, student.vocab_size
            )));
        }
        if teacher.visual != student.visual || teacher.image_token != student.image_token {
            return Err(Error::Config("teacher and student must share the visual encoder".into()));
        }
        if student.num_layers > teacher.num_layers || student.hidden_dim > teacher.hidden_dim {
            return Err(Error::Config("student must not be deeper or wider than the teacher".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_pair() {
        let t = ModelSpec::teacher();
        let s = ModelSpec::student();
        t.validate().unwrap();
        s.validate().unwrap();
        ModelSpec::check_pair(&t, &s).unwrap();
        assert_eq!(t.visual.num_tokens(), 9);
    }

    #[test]
    fn rejects_bad_geometry() {
        let mut s = ModelSpec::student();
        s.num_heads = 3;
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        let mut v = VisualEncoderSpec::default();
        v.image_width = 18;
        assert!(v.validate().is_err());
        let mut s = ModelSpec::student();
        s.vocab_size = 511;
        assert!(ModelSpec::check_pair(&ModelSpec::teacher(), &s).is_err());
    }
}
