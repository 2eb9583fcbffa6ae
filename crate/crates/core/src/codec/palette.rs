use std::collections::BTreeMap;

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{PanopticMap, VideoTensor};

/// Precomputed colors on the `{0, ½, 1}³` lattice, black excluded. Any two are
/// at least 0.5 apart.
pub const PALETTE_COLORS: [[f32; 3]; 24] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [1.0, 1.0, 1.0],
    [1.0, 0.5, 0.0],
    [0.5, 0.0, 1.0],
    [0.0, 0.5, 0.5],
    [0.5, 1.0, 0.0],
    [1.0, 0.0, 0.5],
    [0.0, 1.0, 0.5],
    [0.5, 0.5, 1.0],
    [1.0, 1.0, 0.5],
    [0.5, 0.0, 0.0],
    [0.0, 0.5, 0.0],
    [0.0, 0.0, 0.5],
    [1.0, 0.5, 1.0],
    [0.5, 1.0, 1.0],
    [1.0, 0.5, 0.5],
    [0.5, 0.5, 0.0],
    [0.5, 0.0, 0.5],
    [0.0, 0.5, 1.0],
];

pub const MIN_SEPARATION: f32 = 0.3;

/// Entity id → RGB color.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Palette {
    entries: BTreeMap<u16, [f32; 3]>,
}

impl Palette {
    pub fn new() -> Self {
        Self::default()
    }

    /// Background plus one lattice color per id, assigned by `(id − 1) mod 24`.
    pub fn for_ids(ids: impl IntoIterator<Item = u16>) -> Result<Self> {
        let mut p = Palette::new();
        p.insert(0, [0.0; 3]);
        for id in ids {
            if id == 0 {
                continue;
            }
            let idx = (id as usize - 1) % PALETTE_COLORS.len();
            p.insert(id, PALETTE_COLORS[idx]);
        }
        p.validate()?;
        Ok(p)
    }

    pub fn insert(&mut self, id: u16, color: [f32; 3]) {
        self.entries.insert(id, color);
    }

    pub fn get(&self, id: u16) -> Option<[f32; 3]> {
        self.entries.get(&id).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u16, [f32; 3])> + '_ {
        self.entries.iter().map(|(&id, &c)| (id, c))
    }

    /// Checks the separation and background invariants of a seg palette.
    pub fn validate(&self) -> Result<()> {
        if let Some(bg) = self.get(0) {
            if bg != [0.0; 3] {
                return Err(Error::Parameter("background must be black".into()));
            }
        }
        let items: Vec<_> = self.iter().collect();
        for (i, (a, ca)) in items.iter().enumerate() {
            for (b, cb) in &items[i + 1..] {
                if color_dist2(ca, cb).sqrt() < MIN_SEPARATION {
                    return Err(Error::Parameter(format!(
                        "colors of ids {a} and {b} closer than {MIN_SEPARATION}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Id whose color is nearest (ties to the smaller id).
    pub fn nearest_id(&self, color: [f32; 3]) -> Option<u16> {
        self.iter()
            .map(|(id, c)| (color_dist2(&c, &color), id))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .map(|(_, id)| id)
    }

    /// Pixelwise palette lookup.
    pub fn colorize(&self, seg: &PanopticMap) -> Result<VideoTensor> {
        let (f, h, w) = seg.dim();
        let mut out = VideoTensor::zeros((f, h, w, 3));
        for ((fi, i, j), &id) in seg.indexed_iter() {
            let c = self
                .get(id)
                .ok_or_else(|| Error::Lookup(format!("id {id} has no palette entry")))?;
            for ch in 0..3 {
                out[[fi, i, j, ch]] = c[ch];
            }
        }
        Ok(out)
    }

    /// Nearest-color decoding back to ids.
    pub fn nearest_map(&self, colors: &VideoTensor) -> Result<PanopticMap> {
        if self.is_empty() {
            return Err(Error::Lookup("empty palette".into()));
        }
        let (f, h, w, _) = colors.dim();
        let mut out = PanopticMap::zeros((f, h, w));
        Zip::indexed(&mut out).for_each(|(fi, i, j), v| {
            let c = [colors[[fi, i, j, 0]], colors[[fi, i, j, 1]], colors[[fi, i, j, 2]]];
            *v = self.nearest_id(c).expect("non-empty palette");
        });
        Ok(out)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let rows: Vec<PaletteRow> = self
            .iter()
            .map(|(id, c)| PaletteRow(id, c[0], c[1], c[2]))
            .collect();
        serde_json::to_value(rows).expect("palette rows serialize")
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let rows: Vec<PaletteRow> = serde_json::from_value(value.clone())?;
        let mut p = Palette::new();
        for PaletteRow(id, r, g, b) in rows {
            if p.get(id).is_some() {
                return Err(Error::Parameter(format!("duplicate palette id {id}")));
            }
            p.insert(id, [r, g, b]);
        }
        Ok(p)
    }
}

/// One `[id, r, g, b]` record.
#[derive(Serialize, Deserialize)]
struct PaletteRow(u16, f32, f32, f32);

pub(crate) fn color_dist2(a: &[f32; 3], b: &[f32; 3]) -> f32 {
    (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum()
}
