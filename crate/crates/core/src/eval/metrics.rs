//! Shape and retrieval metrics.

use crate::error::{CoreError, Result};
use crate::kgraph::cosine;
use crate::synthdata::{Color, ShapeClass, VoxelGrid};

/// `|a ∧ b| / |a ∨ b|` over occupancy; 1 when both grids are empty.
pub fn iou(a: &VoxelGrid, b: &VoxelGrid) -> Result<f64> {
    if a.resolution() != b.resolution() {
        return Err(CoreError::Invalid(format!(
            "cannot compare {}^3 and {}^3 grids",
            a.resolution(),
            b.resolution()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.occ().iter().zip(b.occ()) {
        inter += usize::from(x != 0 && y != 0);
        union += usize::from(x != 0 || y != 0);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Mean IOU over all unordered pairs; 1 for fewer than two grids.
pub fn mean_pairwise_iou(grids: &[VoxelGrid]) -> Result<f64> {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..grids.len() {
        for j in 0..i {
            total += iou(&grids[i], &grids[j])?;
            pairs += 1;
        }
    }
    Ok(if pairs == 0 { 1.0 } else { total / pairs as f64 })
}

/// Nearest class mean of the occupancy vector under Euclidean distance.
#[derive(Clone, Debug, PartialEq)]
pub struct NearestCentroid {
    pub centroids: Vec<(ShapeClass, Vec<f64>)>,
}

impl NearestCentroid {
    pub fn fit<'a, I>(labelled: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a VoxelGrid, ShapeClass)>,
    {
        let mut sums: Vec<(ShapeClass, Vec<f64>, usize)> = Vec::new();
        for (grid, class) in labelled {
            let occ = grid.occupancy_f64();
            match sums.iter_mut().find(|(c, _, _)| *c == class) {
                Some((_, s, n)) => {
                    if s.len() != occ.len() {
                        return Err(CoreError::Invalid("classifier inputs differ in resolution".into()));
                    }
                    s.iter_mut().zip(&occ).for_each(|(a, b)| *a += b);
                    *n += 1;
                }
                None => sums.push((class, occ, 1)),
            }
        }
        if sums.is_empty() {
            return Err(CoreError::Invalid(
                "nearest-centroid classifier fit on no shapes".into(),
            ));
        }
        sums.sort_by_key(|(c, _, _)| c.index());
        Ok(Self {
            centroids: sums
                .into_iter()
                .map(|(c, s, n)| (c, s.into_iter().map(|v| v / n as f64).collect()))
                .collect(),
        })
    }

    pub fn classify(&self, grid: &VoxelGrid) -> Result<ShapeClass> {
        let occ = grid.occupancy_f64();
        let mut best: Option<(f64, ShapeClass)> = None;
        for (c, centroid) in &self.centroids {
            if centroid.len() != occ.len() {
                return Err(CoreError::Invalid(
                    "grid resolution differs from the classifier's".into(),
                ));
            }
            let d: f64 = centroid.iter().zip(&occ).map(|(a, b)| (a - b) * (a - b)).sum();
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, *c));
            }
        }
        best.map(|(_, c)| c)
            .ok_or_else(|| CoreError::Invalid("classifier has no centroids".into()))
    }
}

/// Percentage of `grids` classified as their label.
pub fn class_accuracy(classifier: &NearestCentroid, grids: &[VoxelGrid], labels: &[ShapeClass]) -> Result<f64> {
    if grids.is_empty() || grids.len() != labels.len() {
        return Err(CoreError::Invalid(format!(
            "class accuracy needs matching nonempty inputs, got {} grids and {} labels",
            grids.len(),
            labels.len()
        )));
    }
    let mut hits = 0usize;
    for (g, &l) in grids.iter().zip(labels) {
        hits += usize::from(classifier.classify(g)? == l);
    }
    Ok(100.0 * hits as f64 / grids.len() as f64)
}

/// Palette colour that most occupied cells are nearest to; ties go to palette order.
pub fn dominant_color(grid: &VoxelGrid) -> Option<Color> {
    let mut counts = [0usize; Color::ALL.len()];
    for (o, rgb) in grid.occ().iter().zip(grid.rgb()) {
        if *o != 0 {
            let c = Color::nearest(rgb.map(f64::from));
            counts[Color::ALL.iter().position(|&p| p == c).expect("palette colour")] += 1;
        }
    }
    let (i, &n) = counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))?;
    (n > 0).then_some(Color::ALL[i])
}

/// Whether the true gallery item ranks within `top` by cosine. Only strictly
/// better items count against it, so the result ignores gallery order.
pub fn ranks_within(query: &[f64], gallery: &[Vec<f64>], truth: usize, top: usize) -> bool {
    let s = cosine(query, &gallery[truth]);
    gallery.iter().filter(|g| cosine(query, g) > s).count() < top
}

/// Percentage of generated shapes whose own caption ranks in the top `top` of
/// the text gallery. `truth[i]` indexes the gallery caption of shape `i`.
pub fn r_precision(shape_feats: &[Vec<f64>], truth: &[usize], gallery: &[Vec<f64>], top: usize) -> Result<f64> {
    if gallery.len() < top {
        return Err(CoreError::Invalid(format!(
            "a gallery of {} texts is smaller than top-{top}",
            gallery.len()
        )));
    }
    if shape_feats.is_empty() || shape_feats.len() != truth.len() || truth.iter().any(|&t| t >= gallery.len()) {
        return Err(CoreError::Invalid(
            "r-precision needs one valid gallery index per shape".into(),
        ));
    }
    let hits = shape_feats
        .iter()
        .zip(truth)
        .filter(|(f, &t)| ranks_within(f, gallery, t, top))
        .count();
    Ok(100.0 * hits as f64 / shape_feats.len() as f64)
}
