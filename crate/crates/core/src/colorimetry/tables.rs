//! Bundled reference tables on the 380–730 nm, 5 nm grid.

use crate::screen::{GRID_LEN, GRID_START_NM, GRID_STEP_NM};

const CIE1931: &str = include_str!("../../data/cie1931_2deg_5nm.csv");
const D50: &str = include_str!("../../data/illuminant_d50_5nm.csv");
const D65: &str = include_str!("../../data/illuminant_d65_5nm.csv");

fn parse<const N: usize>(text: &str) -> [[f64; GRID_LEN]; N] {
    let mut out = [[0.0; GRID_LEN]; N];
    let mut row = 0;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split(',').map(|f| f.trim().parse::<f64>().expect("numeric table field"));
        let wl = fields.next().expect("wavelength column");
        assert_eq!(wl, GRID_START_NM + GRID_STEP_NM * row as f64, "table off the 5 nm grid");
        for col in out.iter_mut() {
            col[row] = fields.next().expect("table column");
        }
        row += 1;
    }
    assert_eq!(row, GRID_LEN, "table must cover 380-730 nm");
    out
}

pub(super) fn cie1931() -> [[f64; GRID_LEN]; 3] {
    parse::<3>(CIE1931)
}

pub(super) fn d50() -> [f64; GRID_LEN] {
    parse::<1>(D50)[0]
}

pub(super) fn d65() -> [f64; GRID_LEN] {
    parse::<1>(D65)[0]
}
