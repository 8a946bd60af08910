//! The `<name>.json` sidecar + `<name>.raw` payload pair.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::registry::{OrganEntry, OrganRegistry, Stratum};
use crate::volume::{voxel_count, LabelMask, Volume3D, VolumeKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U8,
    U16,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
            Dtype::U16 => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum SidecarKind {
    Intensity,
    DoseGy,
    Label,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LabelInfo {
    name: String,
    stratum: Stratum,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    shape: [usize; 3],
    spacing_mm: [f64; 3],
    dtype: Dtype,
    order: String,
    endianness: String,
    kind: SidecarKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    origin_mm: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label_table: Option<BTreeMap<String, LabelInfo>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Grid {
    Volume(Volume3D),
    Mask(LabelMask),
}

/// `base.json` / `base.raw`; any extension on `base` is replaced.
pub fn sidecar_paths(base: &Path) -> (PathBuf, PathBuf) {
    (base.with_extension("json"), base.with_extension("raw"))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
}

fn save(base: &Path, sidecar: &Sidecar, payload: Vec<u8>) -> Result<()> {
    let (json, raw) = sidecar_paths(base);
    let text = serde_json::to_string_pretty(sidecar).map_err(|e| CoreError::Format(e.to_string()))?;
    write(&raw, &payload)?;
    write(&json, text.as_bytes())
}

pub fn save_volume(v: &Volume3D, base: &Path) -> Result<()> {
    let origin = v.origin_mm();
    let sidecar = Sidecar {
        shape: v.shape(),
        spacing_mm: v.spacing_mm(),
        dtype: Dtype::F32,
        order: "C".into(),
        endianness: "little".into(),
        kind: match v.kind() {
            VolumeKind::Intensity => SidecarKind::Intensity,
            VolumeKind::DoseGy => SidecarKind::DoseGy,
        },
        origin_mm: (origin != [0.0; 3]).then_some(origin),
        label_table: None,
    };
    save(base, &sidecar, v.values().iter().flat_map(|x| x.to_le_bytes()).collect())
}

pub fn save_mask(m: &LabelMask, base: &Path) -> Result<()> {
    let table = m
        .registry()
        .entries()
        .iter()
        .map(|e| (e.label.to_string(), LabelInfo { name: e.name.clone(), stratum: e.stratum }))
        .collect();
    let dtype = if m.registry().max_label() <= u8::MAX as u16 { Dtype::U8 } else { Dtype::U16 };
    let payload = match dtype {
        Dtype::U8 => m.labels().iter().map(|l| *l as u8).collect(),
        _ => m.labels().iter().flat_map(|l| l.to_le_bytes()).collect(),
    };
    let sidecar = Sidecar {
        shape: m.shape(),
        spacing_mm: m.spacing_mm(),
        dtype,
        order: "C".into(),
        endianness: "little".into(),
        kind: SidecarKind::Label,
        origin_mm: None,
        label_table: Some(table),
    };
    save(base, &sidecar, payload)
}

pub fn save_grid(g: &Grid, base: &Path) -> Result<()> {
    match g {
        Grid::Volume(v) => save_volume(v, base),
        Grid::Mask(m) => save_mask(m, base),
    }
}

pub fn load_grid(base: &Path) -> Result<Grid> {
    let (json, raw) = sidecar_paths(base);
    let text = std::fs::read_to_string(&json).map_err(|e| CoreError::io(&json, e))?;
    let bad = |msg: String| CoreError::Format(format!("{}: {msg}", json.display()));
    let sc: Sidecar = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if sc.order != "C" || sc.endianness != "little" {
        return Err(bad(format!("unsupported layout {} / {}", sc.order, sc.endianness)));
    }
    let payload = std::fs::read(&raw).map_err(|e| CoreError::io(&raw, e))?;
    let n = voxel_count(sc.shape);
    if payload.len() != n * sc.dtype.width() {
        return Err(bad(format!(
            "raw file has {} bytes, expected {} for shape {:?} {:?}",
            payload.len(),
            n * sc.dtype.width(),
            sc.shape,
            sc.dtype
        )));
    }
    let remap = |e: CoreError| match e {
        CoreError::Invalid(msg) => bad(msg),
        other => other,
    };
    match sc.kind {
        SidecarKind::Intensity | SidecarKind::DoseGy => {
            if sc.dtype != Dtype::F32 {
                return Err(bad("scalar volumes must be f32".into()));
            }
            let values = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            let kind = if sc.kind == SidecarKind::DoseGy { VolumeKind::DoseGy } else { VolumeKind::Intensity };
            Volume3D::with_origin(sc.shape, sc.spacing_mm, sc.origin_mm.unwrap_or([0.0; 3]), values, kind)
                .map(Grid::Volume)
                .map_err(remap)
        }
        SidecarKind::Label => {
            let labels: Vec<u16> = match sc.dtype {
                Dtype::U8 => payload.iter().map(|b| *b as u16).collect(),
                Dtype::U16 => payload.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect(),
                Dtype::F32 => return Err(bad("label masks must be u8 or u16".into())),
            };
            let mut entries = Vec::new();
            for (id, info) in sc.label_table.unwrap_or_default() {
                let label = id.parse().map_err(|_| bad(format!("bad label id {id:?}")))?;
                entries.push(OrganEntry { label, name: info.name, stratum: info.stratum });
            }
            entries.sort_by_key(|e| e.label);
            let registry = OrganRegistry::new(entries).map_err(remap)?;
            LabelMask::new(sc.shape, sc.spacing_mm, labels, registry).map(Grid::Mask).map_err(remap)
        }
    }
}

pub fn load_volume(base: &Path) -> Result<Volume3D> {
    match load_grid(base)? {
        Grid::Volume(v) => Ok(v),
        Grid::Mask(_) => Err(CoreError::Format(format!("{} holds a label mask", base.display()))),
    }
}

pub fn load_mask(base: &Path) -> Result<LabelMask> {
    match load_grid(base)? {
        Grid::Mask(m) => Ok(m),
        Grid::Volume(_) => Err(CoreError::Format(format!("{} holds a scalar volume", base.display()))),
    }
}
