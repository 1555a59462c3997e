//! Procedural furniture built from axis-aligned boxes on a 16³ grid.

use serde::{Deserialize, Serialize};

use super::voxel::VoxelGrid;
use crate::error::{CoreError, Result};

pub const RESOLUTION: usize = 16;
const SLAB: usize = 2;
const LEG: usize = 2;
const BACK_DEPTH: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeClass {
    Chair,
    Table,
    Stool,
    Shelf,
    Bench,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 5] = [Self::Chair, Self::Table, Self::Stool, Self::Shelf, Self::Bench];

    pub fn name(self) -> &'static str {
        match self {
            Self::Chair => "chair",
            Self::Table => "table",
            Self::Stool => "stool",
            Self::Shelf => "shelf",
            Self::Bench => "bench",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn has_back(self) -> bool {
        matches!(self, Self::Chair | Self::Bench)
    }

    /// Word used for the primary-coloured part in captions.
    pub fn part_word(self) -> &'static str {
        match self {
            Self::Table => "top",
            Self::Shelf => "frame",
            _ => "seat",
        }
    }

    /// Footprint `(width along x, depth along z)`.
    fn footprint(self) -> (usize, usize) {
        match self {
            Self::Table => (12, 10),
            Self::Chair => (8, 8),
            Self::Stool => (6, 6),
            Self::Shelf => (12, 6),
            Self::Bench => (14, 6),
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeightTier {
    Short,
    Medium,
    Tall,
}

impl HeightTier {
    pub const ALL: [HeightTier; 3] = [Self::Short, Self::Medium, Self::Tall];

    pub fn name(self) -> &'static str {
        match self {
            Self::Short => "short",
            Self::Medium => "medium",
            Self::Tall => "tall",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackStyle {
    None,
    Low,
    High,
}

impl BackStyle {
    pub const ALL: [BackStyle; 3] = [Self::None, Self::Low, Self::High];

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "no",
            Self::Low => "low",
            Self::High => "high",
        }
    }

    fn height(self) -> usize {
        match self {
            Self::None => 0,
            Self::Low => 3,
            Self::High => 6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Black,
    White,
    Brown,
    Gray,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Self::Red,
        Self::Green,
        Self::Blue,
        Self::Yellow,
        Self::Black,
        Self::White,
        Self::Brown,
        Self::Gray,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Red => "red",
            Self::Green => "green",
            Self::Blue => "blue",
            Self::Yellow => "yellow",
            Self::Black => "black",
            Self::White => "white",
            Self::Brown => "brown",
            Self::Gray => "gray",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Self::Red => [220, 40, 40],
            Self::Green => [40, 170, 60],
            Self::Blue => [40, 80, 220],
            Self::Yellow => [235, 210, 40],
            Self::Black => [25, 25, 25],
            Self::White => [240, 240, 240],
            Self::Brown => [130, 80, 40],
            Self::Gray => [128, 128, 128],
        }
    }

    /// Palette entry closest to `rgb` in Euclidean distance.
    pub fn nearest(rgb: [f64; 3]) -> Self {
        let d = |c: Color| {
            let p = c.rgb();
            (0..3).map(|i| (f64::from(p[i]) - rgb[i]).powi(2)).sum::<f64>()
        };
        Self::ALL
            .into_iter()
            .min_by(|a, b| d(*a).total_cmp(&d(*b)))
            .expect("palette is nonempty")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub class: ShapeClass,
    pub leg_count: u8,
    pub height: HeightTier,
    pub back: BackStyle,
    pub primary: Color,
    pub secondary: Color,
    pub seed: u64,
}

impl ShapeSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=6).contains(&self.leg_count) {
            return Err(CoreError::Invalid(format!(
                "leg count {} outside 2..=6",
                self.leg_count
            )));
        }
        if !self.class.has_back() && self.back != BackStyle::None {
            return Err(CoreError::Invalid(format!("a {} has no backrest", self.class.name())));
        }
        if self.primary == self.secondary {
            return Err(CoreError::Invalid("primary and secondary colours coincide".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PartKind {
    Top,
    Leg,
    Back,
    Board,
}

/// Half-open box `[lo, hi)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Part {
    pub kind: PartKind,
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl Part {
    pub fn volume(&self) -> usize {
        (0..3).map(|a| self.hi[a] - self.lo[a]).product()
    }

    pub fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        let p = [x, y, z];
        (0..3).all(|a| self.lo[a] <= p[a] && p[a] < self.hi[a])
    }
}

/// Leg (or post) height for tables and seats, total height for shelves.
pub fn tier_height(class: ShapeClass, tier: HeightTier) -> usize {
    let i = tier as usize;
    match class {
        ShapeClass::Table => [5, 7, 9][i],
        ShapeClass::Shelf => [8, 11, 14][i],
        _ => [4, 6, 8][i],
    }
}

/// Leg origins `(x, z)` relative to the footprint corner. Fixed per count.
fn leg_offsets(n: u8, w: usize, d: usize) -> Vec<(usize, usize)> {
    let (l, r) = (0, w - LEG);
    let (f, b) = (0, d - LEG);
    let (mx, mz) = ((w - LEG) / 2, (d - LEG) / 2);
    match n {
        2 => vec![(l, mz), (r, mz)],
        3 => vec![(l, f), (r, f), (mx, b)],
        4 => vec![(l, f), (r, f), (l, b), (r, b)],
        5 => vec![(l, f), (r, f), (l, b), (r, b), (mx, mz)],
        _ => vec![(l, f), (r, f), (l, b), (r, b), (mx, f), (mx, b)],
    }
}

/// The primitives a spec assembles into, in paint order.
pub fn parts(spec: &ShapeSpec) -> Vec<Part> {
    let (w, d) = spec.class.footprint();
    let x0 = (RESOLUTION - w) / 2;
    let z0 = (RESOLUTION - d) / 2;
    let h = tier_height(spec.class, spec.height);
    let mut out = Vec::new();
    let leg_top = h;
    for (lx, lz) in leg_offsets(spec.leg_count, w, d) {
        out.push(Part {
            kind: PartKind::Leg,
            lo: [x0 + lx, 0, z0 + lz],
            hi: [x0 + lx + LEG, leg_top, z0 + lz + LEG],
        });
    }
    if spec.class == ShapeClass::Shelf {
        for y in [0, (h - 1) / 2, h - 1] {
            out.push(Part {
                kind: PartKind::Board,
                lo: [x0, y, z0],
                hi: [x0 + w, y + 1, z0 + d],
            });
        }
        return out;
    }
    out.push(Part {
        kind: PartKind::Top,
        lo: [x0, h, z0],
        hi: [x0 + w, h + SLAB, z0 + d],
    });
    if spec.back != BackStyle::None {
        let top = h + SLAB;
        out.push(Part {
            kind: PartKind::Back,
            lo: [x0, top, z0 + d - BACK_DEPTH],
            hi: [x0 + w, top + spec.back.height(), z0 + d],
        });
    }
    out
}

pub fn generate_shape(spec: &ShapeSpec) -> Result<VoxelGrid> {
    spec.validate()?;
    let mut g = VoxelGrid::empty(RESOLUTION);
    for p in parts(spec) {
        let color = match p.kind {
            PartKind::Leg => spec.secondary.rgb(),
            _ => spec.primary.rgb(),
        };
        g.fill_box(p.lo, p.hi, color);
    }
    Ok(g)
}
