//! The 42-organ label table and its three strata.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stratum {
    Anchor,
    MidLevel,
    SmallHard,
}

impl Stratum {
    pub const ALL: [Stratum; 3] = [Stratum::Anchor, Stratum::MidLevel, Stratum::SmallHard];

    pub fn name(self) -> &'static str {
        match self {
            Stratum::Anchor => "anchor",
            Stratum::MidLevel => "mid_level",
            Stratum::SmallHard => "small_hard",
        }
    }
}

impl std::fmt::Display for Stratum {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrganEntry {
    pub label: u16,
    pub name: String,
    pub stratum: Stratum,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OrganRegistry {
    entries: Vec<OrganEntry>,
}

const ANCHOR: [&str; 9] = [
    "BrainStem", "Cerebellum", "Eye_Lt", "Eye_Rt", "Mandible_Lt", "Mandible_Rt", "SpinalCord", "TMJ_Lt", "TMJ_Rt",
];

const MID_LEVEL: [&str; 19] = [
    "BasalGanglia_Lt", "BasalGanglia_Rt", "Brachial_Lt", "Brachial_Rt", "Const_Inf", "Const_Mid", "Const_Sup",
    "Epiglottis", "Esophagus", "GSL", "OralCavity", "Parotid_Lt", "Parotid_Rt", "SMG_Lt", "SMG_Rt",
    "TempLobe_Lt", "TempLobe_Rt", "Thyroid_Lt", "Thyroid_Rt",
];

const SMALL_HARD: [&str; 14] = [
    "Cochlea_Lt", "Cochlea_Rt", "Hypothalamus", "InnerEar_Lt", "InnerEar_Rt", "LacrimalGland_Lt",
    "LacrimalGland_Rt", "Lens_Lt", "Lens_Rt", "OpticChiasm", "OpticNerve_Lt", "OpticNerve_Rt", "PinealGland",
    "Pituitary",
];

impl OrganRegistry {
    pub fn new(entries: Vec<OrganEntry>) -> Result<Self> {
        let mut labels: Vec<u16> = entries.iter().map(|e| e.label).collect();
        let mut names: Vec<&str> = entries.iter().map(|e| e.name.as_str()).collect();
        labels.sort_unstable();
        names.sort_unstable();
        if labels.first() == Some(&0) {
            return Err(CoreError::Format("label 0 is reserved for background".into()));
        }
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(CoreError::Format("duplicate label id in registry".into()));
        }
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(CoreError::Format("duplicate organ name in registry".into()));
        }
        Ok(Self { entries })
    }

    /// Labels 1..=42: anchor, then mid-level, then small & hard organs.
    pub fn canonical() -> Self {
        let strata = [(Stratum::Anchor, &ANCHOR[..]), (Stratum::MidLevel, &MID_LEVEL[..]), (Stratum::SmallHard, &SMALL_HARD[..])];
        let mut entries = Vec::new();
        for (stratum, names) in strata {
            for name in names {
                entries.push(OrganEntry { label: entries.len() as u16 + 1, name: name.to_string(), stratum });
            }
        }
        Self { entries }
    }

    pub fn entries(&self) -> &[OrganEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, label: u16) -> Option<&OrganEntry> {
        self.entries.iter().find(|e| e.label == label)
    }

    pub fn by_name(&self, name: &str) -> Option<&OrganEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn contains(&self, label: u16) -> bool {
        self.get(label).is_some()
    }

    pub fn stratum(&self, s: Stratum) -> Vec<&OrganEntry> {
        self.entries.iter().filter(|e| e.stratum == s).collect()
    }

    pub fn labels(&self, s: Stratum) -> Vec<u16> {
        self.stratum(s).iter().map(|e| e.label).collect()
    }

    pub fn max_label(&self) -> u16 {
        self.entries.iter().map(|e| e.label).max().unwrap_or(0)
    }

    /// Bilateral partner: `X_Lt` ↔ `X_Rt`.
    pub fn mirror_of(&self, label: u16) -> Option<&OrganEntry> {
        let name = &self.get(label)?.name;
        let other = if let Some(base) = name.strip_suffix("_Lt") {
            format!("{base}_Rt")
        } else {
            format!("{}_Lt", name.strip_suffix("_Rt")?)
        };
        self.by_name(&other)
    }
}
