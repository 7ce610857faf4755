use std::cell::Cell;
use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::{FusionOp, ImageTensor};
use crate::tensor::{Result, Tensor, TensorError};

thread_local! {
    static EXTRACT_CALLS: Cell<usize> = const { Cell::new(0) };
}

/// Number of [`extract_region`] calls made on this thread.
pub fn extract_region_calls() -> usize {
    EXTRACT_CALLS.with(Cell::get)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionConfig {
    /// Heat values strictly above `tau` are candidates.
    pub tau: f64,
    pub fusion_op: FusionOp,
}

impl Default for RegionConfig {
    fn default() -> Self {
        Self {
            tau: 0.7,
            fusion_op: FusionOp::Add,
        }
    }
}

impl RegionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau > 0.0 && self.tau < 1.0 {
            Ok(())
        } else {
            Err(TensorError::Contract(format!("tau must lie in (0, 1), got {}", self.tau)))
        }
    }
}

/// Min-max normalised saliency over the spatial grid of `f_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatMap {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl HeatMap {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || values.len() != rows * cols {
            return Err(TensorError::Shape {
                op: "heatmap",
                lhs: vec![rows, cols],
                rhs: vec![values.len()],
            });
        }
        Ok(Self { rows, cols, values })
    }

    pub fn square(size: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(size, size, values)
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }
}

/// Channel-wise max of `|f_c|`, normalised to `[0, 1]`. A constant map
/// normalises to all zeros.
pub fn heatmap(f_c: &Tensor) -> Result<HeatMap> {
    let (rows, cols, c) = match f_c.dims() {
        [a, b, c] => (*a, *b, *c),
        d => {
            return Err(TensorError::Shape {
                op: "heatmap",
                lhs: d.to_vec(),
                rhs: vec![0, 0, 0],
            })
        }
    };
    let raw: Vec<f64> = f_c
        .data()
        .chunks(c)
        .map(|px| px.iter().fold(0.0f64, |m, v| m.max(v.abs())))
        .collect();
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let values = if span > 0.0 {
        raw.iter().map(|v| (v - lo) / span).collect()
    } else {
        vec![0.0; raw.len()]
    };
    HeatMap::new(rows, cols, values)
}

/// Selected component of the thresholded heat map. `bbox` is
/// `(row0, col0, row1, col1)`, inclusive, in heat-map cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub rows: usize,
    pub cols: usize,
    pub mask: Vec<bool>,
    pub bbox: (usize, usize, usize, usize),
    pub area: usize,
    pub fallback: bool,
}

impl Region {
    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            mask: vec![true; rows * cols],
            bbox: (0, 0, rows - 1, cols - 1),
            area: rows * cols,
            fallback: true,
        }
    }

    /// Row-major run-length encoding of the mask as `(start, length)` pairs.
    pub fn mask_rle(&self) -> Vec<(usize, usize)> {
        let mut runs = Vec::new();
        let mut i = 0;
        while i < self.mask.len() {
            if self.mask[i] {
                let start = i;
                while i < self.mask.len() && self.mask[i] {
                    i += 1;
                }
                runs.push((start, i - start));
            } else {
                i += 1;
            }
        }
        runs
    }
}

/// Largest 4-connected component of `{H > τ}`. Equal areas resolve to the
/// component whose first cell comes first in row-major order. With no cell
/// above the threshold the whole grid is returned and `fallback` is set.
pub fn extract_region(heat: &HeatMap, config: &RegionConfig) -> Region {
    EXTRACT_CALLS.with(|c| c.set(c.get() + 1));
    let (rows, s) = (heat.rows, heat.cols);
    let above: Vec<bool> = heat.values.iter().map(|&v| v > config.tau).collect();
    let mut seen = vec![false; rows * s];
    let mut best: Option<Vec<usize>> = None;
    let mut queue = VecDeque::new();
    for start in 0..rows * s {
        if !above[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut cells = Vec::new();
        while let Some(p) = queue.pop_front() {
            cells.push(p);
            let (r, c) = (p / s, p % s);
            let mut visit = |q: usize| {
                if above[q] && !seen[q] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if r > 0 {
                visit(p - s);
            }
            if r + 1 < rows {
                visit(p + s);
            }
            if c > 0 {
                visit(p - 1);
            }
            if c + 1 < s {
                visit(p + 1);
            }
        }
        if best.as_ref().is_none_or(|b| cells.len() > b.len()) {
            best = Some(cells);
        }
    }
    let Some(cells) = best else {
        return Region::full(rows, s);
    };
    let mut mask = vec![false; rows * s];
    let (mut r0, mut c0, mut r1, mut c1) = (rows, s, 0, 0);
    for &p in &cells {
        mask[p] = true;
        let (r, c) = (p / s, p % s);
        r0 = r0.min(r);
        c0 = c0.min(c);
        r1 = r1.max(r);
        c1 = c1.max(c);
    }
    Region {
        rows,
        cols: s,
        mask,
        bbox: (r0, c0, r1, c1),
        area: cells.len(),
        fallback: false,
    }
}

/// Crops the image rectangle covered by `region.bbox` (heat-map cells scaled
/// by `image / S`) and resizes it bilinearly back to the full image size.
pub fn crop_resize(image: &ImageTensor, region: &Region) -> Result<ImageTensor> {
    let (h, w) = (image.height(), image.width());
    let (gr, gc) = (region.rows, region.cols);
    let (r0, c0, r1, c1) = region.bbox;
    if r1 >= gr || c1 >= gc || r0 > r1 || c0 > c1 {
        return Err(TensorError::Contract(format!("bbox {:?} outside a {gr}×{gc} map", region.bbox)));
    }
    let y0 = r0 * h / gr;
    let y1 = ((r1 + 1) * h).div_ceil(gr);
    let x0 = c0 * w / gc;
    let x1 = ((c1 + 1) * w).div_ceil(gc);
    let (ch, cw) = (y1 - y0, x1 - x0);
    let crop: Vec<f64> = (y0..y1)
        .flat_map(|y| (x0..x1).map(move |x| (y, x)))
        .map(|(y, x)| image.get(y, x))
        .collect();
    ImageTensor::new(h, w, resize_bilinear(&crop, ch, cw, h, w))
}

/// Bilinear resampling with half-pixel centres and edge clamping.
pub(crate) fn resize_bilinear(src: &[f64], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f64> {
    let axis = |out: usize, src_len: usize, dst_len: usize| {
        let pos = ((out as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).clamp(0.0, (src_len - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(src_len - 1);
        (lo, hi, pos - lo as f64)
    };
    let mut out = Vec::with_capacity(dh * dw);
    for y in 0..dh {
        let (ya, yb, fy) = axis(y, sh, dh);
        for x in 0..dw {
            let (xa, xb, fx) = axis(x, sw, dw);
            let top = src[ya * sw + xa] * (1.0 - fx) + src[ya * sw + xb] * fx;
            let bottom = src[yb * sw + xa] * (1.0 - fx) + src[yb * sw + xb] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::SeededRng;
    use proptest::prelude::*;

    /// Component labels by repeated min-propagation until nothing changes.
    fn label_oracle(above: &[bool], s: usize) -> Vec<Option<usize>> {
        let mut label: Vec<Option<usize>> = (0..s * s).map(|p| above[p].then_some(p)).collect();
        loop {
            let mut changed = false;
            for p in 0..s * s {
                let Some(mut l) = label[p] else { continue };
                let (r, c) = (p / s, p % s);
                let mut nbrs = vec![];
                if r > 0 {
                    nbrs.push(p - s);
                }
                if r + 1 < s {
                    nbrs.push(p + s);
                }
                if c > 0 {
                    nbrs.push(p - 1);
                }
                if c + 1 < s {
                    nbrs.push(p + 1);
                }
                for q in nbrs {
                    if let Some(m) = label[q] {
                        l = l.min(m);
                    }
                }
                if Some(l) != label[p] {
                    label[p] = Some(l);
                    changed = true;
                }
            }
            if !changed {
                return label;
            }
        }
    }

    fn oracle_region(heat: &HeatMap, tau: f64) -> Option<(Vec<bool>, usize)> {
        let s = heat.rows;
        let above: Vec<bool> = heat.values.iter().map(|&v| v > tau).collect();
        let labels = label_oracle(&above, s);
        // label == smallest member index, so ties resolve to the smaller label
        let mut counts = std::collections::BTreeMap::new();
        for l in labels.iter().flatten() {
            *counts.entry(*l).or_insert(0usize) += 1;
        }
        let (&winner, &area) = counts.iter().fold(None, |acc: Option<(&usize, &usize)>, (l, n)| match acc {
            Some((_, bn)) if bn >= n => acc,
            _ => Some((l, n)),
        })?;
        Some((labels.iter().map(|l| *l == Some(winner)).collect(), area))
    }

    fn heat(size: usize, cells: &[(usize, usize, f64)]) -> HeatMap {
        let mut v = vec![0.0; size * size];
        for &(r, c, x) in cells {
            v[r * size + c] = x;
        }
        HeatMap::square(size, v).unwrap()
    }

    #[test]
    fn single_hot_cell() {
        let r = extract_region(&heat(8, &[(3, 5, 1.0)]), &RegionConfig::default());
        assert_eq!(r.bbox, (3, 5, 3, 5));
        assert_eq!(r.area, 1);
        assert!(!r.fallback);
    }

    #[test]
    fn diagonal_cells_are_not_connected() {
        let r = extract_region(&heat(4, &[(0, 0, 0.9), (1, 1, 0.9), (2, 2, 0.9), (2, 3, 0.9)]), &RegionConfig::default());
        assert_eq!(r.area, 2);
        assert_eq!(r.bbox, (2, 2, 2, 3));
    }

    #[test]
    fn equal_areas_pick_first_in_row_major_order() {
        let r = extract_region(&heat(4, &[(3, 0, 0.9), (3, 1, 0.9), (0, 3, 0.9), (1, 3, 0.9)]), &RegionConfig::default());
        assert_eq!(r.bbox, (0, 3, 1, 3));
    }

    #[test]
    fn threshold_is_strict() {
        let r = extract_region(&heat(4, &[(1, 1, 0.7)]), &RegionConfig::default());
        assert!(r.fallback);
        assert_eq!(r.area, 16);
        assert_eq!(r.bbox, (0, 0, 3, 3));
    }

    #[test]
    fn constant_feature_map_has_zero_heat_and_falls_back() {
        let fc = Tensor::full(&[4, 4, 3], -2.0);
        let h = heatmap(&fc).unwrap();
        assert!(h.values.iter().all(|&v| v == 0.0));
        assert!(extract_region(&h, &RegionConfig::default()).fallback);
    }

    #[test]
    fn heat_uses_absolute_channel_max() {
        let fc = Tensor::new(&[1, 2, 2], vec![-5.0, 2.0, 1.0, -1.0]).unwrap();
        assert_eq!(heatmap(&fc).unwrap().values, vec![1.0, 0.0]);
        let fc = Tensor::new(&[2, 2, 2], vec![0.5, -3.0, 1.0, 2.0, 0.0, 0.0, 1.0, -1.0]).unwrap();
        let h = heatmap(&fc).unwrap();
        assert_eq!(h.values, vec![1.0, 2.0 / 3.0, 0.0, 1.0 / 3.0]);
    }

    #[test]
    fn rle_round_trips_mask() {
        let r = extract_region(&heat(4, &[(0, 2, 0.9), (0, 3, 0.9), (1, 3, 0.9)]), &RegionConfig::default());
        assert_eq!(r.mask_rle(), vec![(2, 2), (7, 1)]);
    }

    #[test]
    fn full_region_crop_is_identity() {
        let mut rng = SeededRng::new(3);
        let img = ImageTensor::new(16, 16, (0..256).map(|_| rng.uniform()).collect()).unwrap();
        let out = crop_resize(&img, &Region::full(4, 4)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn one_cell_crop_upsamples_its_patch() {
        let mut rng = SeededRng::new(4);
        let img = ImageTensor::new(64, 64, (0..4096).map(|_| rng.uniform()).collect()).unwrap();
        let region = extract_region(&heat(8, &[(2, 5, 1.0)]), &RegionConfig::default());
        let out = crop_resize(&img, &region).unwrap();
        // patch rows 16..24, cols 40..48, each source pixel spans 8 output pixels;
        // output pixel (y, x) samples source coordinate (y + 0.5) / 8 − 0.5
        for y in 0..64 {
            for x in 0..64 {
                let sy = ((y as f64 + 0.5) / 8.0 - 0.5).max(0.0).min(7.0);
                let sx = ((x as f64 + 0.5) / 8.0 - 0.5).max(0.0).min(7.0);
                let (iy, ix) = (sy as usize, sx as usize);
                let (jy, jx) = ((iy + 1).min(7), (ix + 1).min(7));
                let p = |a: usize, b: usize| img.get(16 + a, 40 + b);
                let (ty, tx) = (sy - iy as f64, sx - ix as f64);
                let want = p(iy, ix) * (1.0 - ty) * (1.0 - tx)
                    + p(iy, jx) * (1.0 - ty) * tx
                    + p(jy, ix) * ty * (1.0 - tx)
                    + p(jy, jx) * ty * tx;
                assert!((out.get(y, x) - want).abs() < 1e-12);
            }
        }
        // corners reproduce the patch corners exactly
        assert_eq!(out.get(0, 0), img.get(16, 40));
        assert_eq!(out.get(63, 63), img.get(23, 47));
    }

    proptest! {
        #[test]
        fn matches_label_propagation_oracle(
            density in 0.0f64..0.6,
            cells in proptest::collection::vec(0.0f64..1.0, 256),
        ) {
            // density shifts how many cells clear the threshold, reaching the fallback case too
            let h = HeatMap::square(16, cells.iter().map(|v| v * (0.3 + density)).collect()).unwrap();
            let got = extract_region(&h, &RegionConfig::default());
            match oracle_region(&h, 0.7) {
                None => prop_assert!(got.fallback && got.area == 256),
                Some((mask, area)) => {
                    prop_assert!(!got.fallback);
                    prop_assert_eq!(got.area, area);
                    prop_assert_eq!(got.mask, mask);
                }
            }
        }

        #[test]
        fn region_cells_all_exceed_threshold_and_fit_bbox(cells in proptest::collection::vec(0.0f64..1.0, 64)) {
            let h = HeatMap::square(8, cells).unwrap();
            let r = extract_region(&h, &RegionConfig::default());
            if !r.fallback {
                let (r0, c0, r1, c1) = r.bbox;
                for p in 0..64 {
                    if r.mask[p] {
                        prop_assert!(h.values[p] > 0.7);
                        let (y, x) = (p / 8, p % 8);
                        prop_assert!(y >= r0 && y <= r1 && x >= c0 && x <= c1);
                    }
                }
            }
        }
    }
}
