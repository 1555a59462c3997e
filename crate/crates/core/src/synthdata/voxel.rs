//! Dense RGB occupancy grids and the `.vox` container.

use std::path::Path;

use t2td_numcore::Tensor;

use crate::error::{format_err, io_err, CoreError, Result};

pub const VOX_MAGIC: &[u8; 8] = b"T2TDVOX1";

/// `r³` occupancy with per-cell colour, indexed `x + r·(y + r·z)` (x fastest, y up).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct VoxelGrid {
    r: usize,
    occ: Vec<u8>,
    rgb: Vec<[u8; 3]>,
}

impl VoxelGrid {
    pub fn empty(r: usize) -> Self {
        let n = r * r * r;
        Self {
            r,
            occ: vec![0; n],
            rgb: vec![[0; 3]; n],
        }
    }

    pub fn resolution(&self) -> usize {
        self.r
    }

    pub fn len(&self) -> usize {
        self.occ.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occ.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.r * (y + self.r * z)
    }

    /// Inverse of [`VoxelGrid::index`].
    pub fn coords(&self, i: usize) -> (usize, usize, usize) {
        (i % self.r, (i / self.r) % self.r, i / (self.r * self.r))
    }

    pub fn occ(&self) -> &[u8] {
        &self.occ
    }

    pub fn rgb(&self) -> &[[u8; 3]] {
        &self.rgb
    }

    pub fn is_occupied(&self, i: usize) -> bool {
        self.occ[i] != 0
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, color: [u8; 3]) {
        let i = self.index(x, y, z);
        self.occ[i] = 1;
        self.rgb[i] = color;
    }

    /// Fills the half-open box `[lo, hi)` on each axis.
    pub fn fill_box(&mut self, lo: [usize; 3], hi: [usize; 3], color: [u8; 3]) {
        for z in lo[2]..hi[2] {
            for y in lo[1]..hi[1] {
                for x in lo[0]..hi[0] {
                    self.set(x, y, z, color);
                }
            }
        }
    }

    pub fn occupied_count(&self) -> usize {
        self.occ.iter().filter(|&&o| o != 0).count()
    }

    /// Occupancy as a 0/1 float vector in grid order.
    pub fn occupancy_f64(&self) -> Vec<f64> {
        self.occ.iter().map(|&o| f64::from(o)).collect()
    }

    /// Encoder input, shape `4 x r x r x r`: occupancy in `{0, 1}`, then colour
    /// scaled to `[-1, 1]` in occupied cells and 0 in empty ones.
    /// The channel-major layout keeps x fastest, matching the grid order.
    pub fn to_input(&self) -> Tensor {
        let n = self.len();
        let mut data = Vec::with_capacity(4 * n);
        data.extend(self.occ.iter().map(|&o| f64::from(o)));
        for c in 0..3 {
            data.extend(self.occ.iter().zip(&self.rgb).map(|(&o, p)| {
                if o == 0 {
                    0.0
                } else {
                    2.0 * f64::from(p[c]) / 255.0 - 1.0
                }
            }));
        }
        Tensor::new(vec![4, self.r, self.r, self.r], data).expect("grid dims are positive")
    }

    /// Thresholds occupancy probabilities and quantizes colours; unoccupied
    /// cells get zero colour.
    pub fn from_predictions(r: usize, occ_prob: &[f64], rgb: &[f64], threshold: f64) -> Result<Self> {
        let n = r * r * r;
        if occ_prob.len() != n || rgb.len() != 3 * n {
            return Err(CoreError::Invalid(format!(
                "prediction lengths {} / {} do not match a {r}^3 grid",
                occ_prob.len(),
                rgb.len()
            )));
        }
        let mut g = Self::empty(r);
        for i in 0..n {
            if occ_prob[i] >= threshold {
                g.occ[i] = 1;
                for c in 0..3 {
                    g.rgb[i][c] = (rgb[3 * i + c].clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
        Ok(g)
    }

    /// Per-point colour targets in `[0, 1]`, zero where unoccupied.
    pub fn color_targets(&self) -> Vec<f64> {
        self.rgb
            .iter()
            .flat_map(|p| p.iter().map(|&c| f64::from(c) / 255.0))
            .collect()
    }

    /// Mean colour over occupied cells, or `None` if the grid is empty.
    pub fn mean_color(&self) -> Option<[f64; 3]> {
        let mut acc = [0.0; 3];
        let mut count = 0usize;
        for (o, p) in self.occ.iter().zip(&self.rgb) {
            if *o != 0 {
                count += 1;
                for c in 0..3 {
                    acc[c] += f64::from(p[c]);
                }
            }
        }
        (count > 0).then(|| acc.map(|a| a / count as f64))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(9 + 4 * self.len());
        out.extend_from_slice(VOX_MAGIC);
        out.push(self.r as u8);
        for (o, p) in self.occ.iter().zip(&self.rgb) {
            out.push(*o);
            out.extend_from_slice(p);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 9 || &bytes[..8] != VOX_MAGIC {
            return Err(format_err("voxel file", "bad magic"));
        }
        let r = bytes[8] as usize;
        if r == 0 {
            return Err(format_err("voxel file", "zero resolution"));
        }
        let n = r * r * r;
        let body = &bytes[9..];
        if body.len() != 4 * n {
            return Err(format_err(
                "voxel file",
                format!("expected {} payload bytes for r={r}, found {}", 4 * n, body.len()),
            ));
        }
        let mut g = Self::empty(r);
        for (i, rec) in body.chunks_exact(4).enumerate() {
            match rec[0] {
                0 if rec[1..] != [0, 0, 0] => {
                    return Err(format_err("voxel file", format!("colour on empty cell {i}")))
                }
                0 | 1 => {}
                v => return Err(format_err("voxel file", format!("occupancy byte {v} at cell {i}"))),
            }
            g.occ[i] = rec[0];
            g.rgb[i] = [rec[1], rec[2], rec[3]];
        }
        Ok(g)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::decode(&bytes)
    }

    /// Cube-per-voxel Wavefront OBJ with one material per distinct colour and
    /// shared corner vertices.
    pub fn to_obj(&self, mtl_name: &str) -> (String, String) {
        use std::collections::BTreeMap;
        use std::fmt::Write;

        let r = self.r;
        let mut vert_ids: BTreeMap<(usize, usize, usize), usize> = BTreeMap::new();
        let mut verts = Vec::new();
        let mut faces: BTreeMap<[u8; 3], Vec<[usize; 3]>> = BTreeMap::new();
        // Corner order: bit 0 = x, bit 1 = y, bit 2 = z.
        const TRIS: [[usize; 3]; 12] = [
            [0, 2, 3],
            [0, 3, 1], // -z
            [4, 5, 7],
            [4, 7, 6], // +z
            [0, 4, 6],
            [0, 6, 2], // -x
            [1, 3, 7],
            [1, 7, 5], // +x
            [0, 1, 5],
            [0, 5, 4], // -y
            [2, 6, 7],
            [2, 7, 3], // +y
        ];
        for i in 0..self.len() {
            if self.occ[i] == 0 {
                continue;
            }
            let (x, y, z) = self.coords(i);
            let mut corner = [0usize; 8];
            for (b, c) in corner.iter_mut().enumerate() {
                let key = (x + (b & 1), y + ((b >> 1) & 1), z + ((b >> 2) & 1));
                *c = *vert_ids.entry(key).or_insert_with(|| {
                    verts.push(key);
                    verts.len()
                });
            }
            let list = faces.entry(self.rgb[i]).or_default();
            for t in TRIS {
                list.push([corner[t[0]], corner[t[1]], corner[t[2]]]);
            }
        }
        let mut obj = String::new();
        let mut mtl = String::new();
        let _ = writeln!(obj, "mtllib {mtl_name}");
        let scale = 1.0 / r as f64;
        for (x, y, z) in &verts {
            let _ = writeln!(
                obj,
                "v {:.6} {:.6} {:.6}",
                *x as f64 * scale,
                *y as f64 * scale,
                *z as f64 * scale
            );
        }
        for (color, tris) in &faces {
            let name = format!("c{:02x}{:02x}{:02x}", color[0], color[1], color[2]);
            let _ = writeln!(
                mtl,
                "newmtl {name}\nKd {:.4} {:.4} {:.4}\n",
                f64::from(color[0]) / 255.0,
                f64::from(color[1]) / 255.0,
                f64::from(color[2]) / 255.0
            );
            let _ = writeln!(obj, "usemtl {name}");
            for t in tris {
                let _ = writeln!(obj, "f {} {} {}", t[0], t[1], t[2]);
            }
        }
        (obj, mtl)
    }
}

/// Cell-centre coordinates in `[-1, 1]³`, one row per cell in grid order.
pub fn grid_points(r: usize) -> Vec<[f64; 3]> {
    let c = |i: usize| (2 * i + 1) as f64 / r as f64 - 1.0;
    let mut pts = Vec::with_capacity(r * r * r);
    for z in 0..r {
        for y in 0..r {
            for x in 0..r {
                pts.push([c(x), c(y), c(z)]);
            }
        }
    }
    pts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_round_trip() {
        let mut g = VoxelGrid::empty(4);
        g.fill_box([0, 0, 0], [2, 1, 3], [10, 20, 30]);
        let bytes = g.encode();
        assert_eq!(bytes.len(), 9 + 4 * 64);
        assert_eq!(VoxelGrid::decode(&bytes).unwrap(), g);
    }

    #[test]
    fn decode_rejects_colour_on_empty_cell() {
        let mut bytes = VoxelGrid::empty(2).encode();
        bytes[10] = 5;
        assert!(VoxelGrid::decode(&bytes).is_err());
    }

    #[test]
    fn index_is_x_fastest() {
        let g = VoxelGrid::empty(16);
        assert_eq!(g.index(1, 0, 0), 1);
        assert_eq!(g.index(0, 1, 0), 16);
        assert_eq!(g.index(0, 0, 1), 256);
        assert_eq!(g.coords(g.index(3, 7, 11)), (3, 7, 11));
    }

    #[test]
    fn grid_points_are_cell_centres() {
        let p = grid_points(2);
        assert_eq!(p.len(), 8);
        assert_eq!(p[0], [-0.5, -0.5, -0.5]);
        assert_eq!(p[1], [0.5, -0.5, -0.5]);
        assert_eq!(p[7], [0.5, 0.5, 0.5]);
    }

    #[test]
    fn predictions_zero_colour_below_threshold() {
        let g = VoxelGrid::from_predictions(1, &[0.4], &[1.0, 1.0, 1.0], 0.5).unwrap();
        assert_eq!(g.occupied_count(), 0);
        assert_eq!(g.rgb()[0], [0, 0, 0]);
    }

    #[test]
    fn obj_shares_vertices_between_adjacent_cubes() {
        let mut g = VoxelGrid::empty(4);
        g.fill_box([0, 0, 0], [2, 1, 1], [255, 0, 0]);
        let (obj, mtl) = g.to_obj("m.mtl");
        assert_eq!(obj.lines().filter(|l| l.starts_with("v ")).count(), 12);
        assert_eq!(obj.lines().filter(|l| l.starts_with("f ")).count(), 24);
        assert!(mtl.contains("Kd 1.0000 0.0000 0.0000"));
    }
}
