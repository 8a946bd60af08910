//! Architecture logits, their softmax relaxation and the discrete derivation.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NasError, Result};
use crate::ops::OpKind;

/// Softmax with max subtraction.
pub fn softmax_weights(alpha: &[f64]) -> Vec<f64> {
    let max = alpha.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = alpha.iter().map(|a| (a - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-block architecture logits, keyed by block id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ArchParams {
    pub alpha: BTreeMap<String, [f64; 6]>,
}

impl ArchParams {
    pub fn uniform(blocks: impl IntoIterator<Item = String>) -> Self {
        Self {
            alpha: blocks.into_iter().map(|b| (b, [0.0; 6])).collect(),
        }
    }

    pub fn gamma(&self, block: &str) -> Option<[f64; 6]> {
        self.alpha.get(block).map(|a| {
            let g = softmax_weights(a);
            [g[0], g[1], g[2], g[3], g[4], g[5]]
        })
    }
}

/// The discrete architecture: one op per searchable block.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DerivedArch {
    pub chosen: BTreeMap<String, OpKind>,
}

impl DerivedArch {
    pub fn uniform_op(blocks: impl IntoIterator<Item = String>, op: OpKind) -> Self {
        Self {
            chosen: blocks.into_iter().map(|b| (b, op)).collect(),
        }
    }
}

/// Keeps the op with the top softmax weight in every block.
pub fn derive_architecture(arch: &ArchParams) -> DerivedArch {
    DerivedArch {
        chosen: arch
            .alpha
            .iter()
            .map(|(b, a)| {
                let gamma = softmax_weights(a);
                (b.clone(), OpKind::from_index(argmax_lowest(&gamma)).expect("six ops"))
            })
            .collect(),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ArchEntry {
    alpha: Vec<f64>,
    chosen: OpKind,
}

/// Writes `arch.json`: `{block_id: {"alpha": [6 floats], "chosen": "Conv3D_k3"}}`.
pub fn save_arch_json(path: &Path, arch: &ArchParams) -> Result<()> {
    let derived = derive_architecture(arch);
    let doc: BTreeMap<&String, ArchEntry> = arch
        .alpha
        .iter()
        .map(|(b, a)| {
            (
                b,
                ArchEntry {
                    alpha: a.to_vec(),
                    chosen: derived.chosen[b],
                },
            )
        })
        .collect();
    let text = serde_json::to_string_pretty(&doc).map_err(|e| NasError::Format(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| NasError::io(path, e))
}

/// Reads `arch.json`. The stored `chosen` op must agree with the logits.
pub fn load_arch_json(path: &Path) -> Result<(ArchParams, DerivedArch)> {
    let text = std::fs::read_to_string(path).map_err(|e| NasError::io(path, e))?;
    let doc: BTreeMap<String, ArchEntry> =
        serde_json::from_str(&text).map_err(|e| NasError::Format(format!("{}: {e}", path.display())))?;
    let mut arch = ArchParams::default();
    let mut derived = DerivedArch::default();
    for (b, e) in doc {
        let alpha: [f64; 6] = e
            .alpha
            .as_slice()
            .try_into()
            .map_err(|_| NasError::Format(format!("block {b}: expected 6 logits, got {}", e.alpha.len())))?;
        if alpha.iter().any(|a| !a.is_finite()) {
            return Err(NasError::Format(format!("block {b}: non-finite logit")));
        }
        arch.alpha.insert(b.clone(), alpha);
        derived.chosen.insert(b, e.chosen);
    }
    if derive_architecture(&arch) != derived {
        return Err(NasError::Format(format!(
            "{}: chosen ops disagree with the stored logits",
            path.display()
        )));
    }
    Ok((arch, derived))
}
