//! Preset screens ship as JSON data files so curators can correct the
//! geometry without touching code.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Cell, ColorClass, DyeSet, ProcessId, RegistrationMarkSpec, ScreenError, ScreenPattern};

const PAGET: &str = include_str!("../../data/presets/paget.json");
const FINLAY: &str = include_str!("../../data/presets/finlay.json");
const THAMES: &str = include_str!("../../data/presets/thames.json");
const JOLY: &str = include_str!("../../data/presets/joly.json");
const DUFAY: &str = include_str!("../../data/presets/dufay.json");

/// On-disk pattern description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternFile {
    pub process_id: ProcessId,
    #[serde(default)]
    pub provenance: String,
    pub patch_pitch_mm: f64,
    pub tile_period_mm: f64,
    pub cells: Vec<Cell>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub design_fractions: Option<BTreeMap<ColorClass, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub marks: Option<RegistrationMarkSpec>,
    #[serde(default = "DyeSet::ideal_blocks")]
    pub dyes: DyeSet,
}

impl PatternFile {
    pub fn into_pattern(self) -> Result<ScreenPattern, ScreenError> {
        let fractions = self.design_fractions.map(|m| {
            let mut f = [0.0; 3];
            for (c, v) in m {
                f[c.index()] = v;
            }
            f
        });
        ScreenPattern::new(
            self.process_id,
            self.cells,
            self.patch_pitch_mm,
            self.tile_period_mm,
            self.marks,
            fractions,
            self.dyes,
            self.provenance,
        )
    }
}

impl From<&ScreenPattern> for PatternFile {
    fn from(p: &ScreenPattern) -> Self {
        PatternFile {
            process_id: p.process_id,
            provenance: p.provenance.clone(),
            patch_pitch_mm: p.patch_pitch_mm,
            tile_period_mm: p.tile_period_mm,
            cells: p.cells.clone(),
            design_fractions: p
                .design_fractions
                .map(|f| ColorClass::ALL.iter().map(|&c| (c, f[c.index()])).collect()),
            marks: p.marks,
            dyes: p.dyes.clone(),
        }
    }
}

pub fn parse_pattern(text: &str) -> Result<ScreenPattern, ScreenError> {
    let file: PatternFile = serde_json::from_str(text)?;
    file.into_pattern()
}

pub fn pattern_preset(id: ProcessId) -> Result<ScreenPattern, ScreenError> {
    let text = match id {
        ProcessId::Paget => PAGET,
        ProcessId::Finlay => FINLAY,
        ProcessId::Thames => THAMES,
        ProcessId::Joly => JOLY,
        ProcessId::Dufay => DUFAY,
        ProcessId::Custom => return Err(ScreenError::UnknownProcess(id)),
    };
    parse_pattern(text)
}
