use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

/// One optimizer step, averaged over the batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub components: BTreeMap<String, f64>,
}

/// Held-out metrics after `epoch` epochs (`0` is before training).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub heldout_ce: f64,
    pub heldout_forward_kl: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub checkpoint: Option<String>,
}

impl RunLog {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    /// Trailing moving average of the step losses with window `w`.
    pub fn moving_average(&self, w: usize) -> Vec<f64> {
        let l = self.losses();
        if w == 0 || l.len() < w {
            return Vec::new();
        }
        l.windows(w).map(|x| x.iter().sum::<f64>() / w as f64).collect()
    }
}
