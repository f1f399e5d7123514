use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::model::{LmParams, ParamGroup, TransformerLM};

pub type Fingerprint = [u8; 32];

/// SHA-256 over shapes and raw bits of `tensors`.
pub fn fingerprint<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> Fingerprint {
    let mut h = Sha256::new();
    for t in tensors {
        h.update((t.shape().len() as u64).to_le_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    h.finalize().into()
}

/// Fingerprints of the separately frozen blocks of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelFingerprint {
    pub encoder: Fingerprint,
    pub projector: Fingerprint,
    pub language: Fingerprint,
}

impl ModelFingerprint {
    pub fn of(model: &TransformerLM) -> Self {
        let entries = model.params.entries();
        let group = |g: ParamGroup| {
            fingerprint(
                entries
                    .iter()
                    .filter(|(n, _)| LmParams::<Tensor>::group_of(n) == g)
                    .map(|(_, t)| *t),
            )
        };
        Self {
            encoder: fingerprint([&model.encoder.weight, &model.encoder.bias]),
            projector: group(ParamGroup::Projector),
            language: group(ParamGroup::Language),
        }
    }

    pub fn whole(&self) -> Fingerprint {
        let mut h = Sha256::new();
        h.update(self.encoder);
        h.update(self.projector);
        h.update(self.language);
        h.finalize().into()
    }
}
