//! Axis-aligned box arithmetic, proposal matching, delta coding, and
//! mask-grid overlap.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

pub type CategoryId = u32;

/// Axis-aligned box with strictly positive width and height.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x1 < x2 && y1 < y2) {
            return Err(Error::Domain(format!(
                "degenerate box ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }
}

/// Center-offset / log-size parameterization of a target box relative to a
/// proposal box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxDelta {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl BoxDelta {
    pub const ZERO: BoxDelta = BoxDelta {
        dx: 0.0,
        dy: 0.0,
        dw: 0.0,
        dh: 0.0,
    };

    pub fn to_array(self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        BoxDelta {
            dx: v[0],
            dy: v[1],
            dw: v[2],
            dh: v[3],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.dx.is_finite() && self.dy.is_finite() && self.dw.is_finite() && self.dh.is_finite()
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Argmax-IoU ground truth for a proposal; ties break toward the lowest
/// list index.
pub fn match_proposal(p: &BBox, gts: &[(BBox, CategoryId)]) -> Result<(BBox, CategoryId, f64)> {
    if gts.is_empty() {
        return Err(Error::EmptyMatch);
    }
    let mut best = 0usize;
    let mut best_iou = iou(p, &gts[0].0);
    for (idx, (gt, _)) in gts.iter().enumerate().skip(1) {
        let v = iou(p, gt);
        if v > best_iou {
            best = idx;
            best_iou = v;
        }
    }
    Ok((gts[best].0, gts[best].1, best_iou))
}

/// Encode the regression target of `b` relative to proposal `p`.
pub fn encode_deltas(p: &BBox, b: &BBox) -> BoxDelta {
    let (pcx, pcy) = p.center();
    let (bcx, bcy) = b.center();
    BoxDelta {
        dx: (bcx - pcx) / p.width(),
        dy: (bcy - pcy) / p.height(),
        dw: (b.width() / p.width()).ln(),
        dh: (b.height() / p.height()).ln(),
    }
}

/// Exact algebraic inverse of [`encode_deltas`].
pub fn decode_deltas(p: &BBox, d: &BoxDelta) -> BBox {
    let (pcx, pcy) = p.center();
    let cx = pcx + d.dx * p.width();
    let cy = pcy + d.dy * p.height();
    let w = p.width() * d.dw.exp();
    let h = p.height() * d.dh.exp();
    BBox {
        x1: cx - w / 2.0,
        y1: cy - h / 2.0,
        x2: cx + w / 2.0,
        y2: cy + h / 2.0,
    }
}

/// Square binary occupancy grid (mask targets and thresholded predictions).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskGrid {
    size: usize,
    cells: Vec<bool>,
}

impl MaskGrid {
    pub fn new(size: usize, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != size * size {
            return Err(dim_err("mask grid", &[size, size], &[cells.len()]));
        }
        Ok(MaskGrid { size, cells })
    }

    pub fn empty(size: usize) -> Self {
        MaskGrid {
            size,
            cells: vec![false; size * size],
        }
    }

    /// Threshold real-valued logits at 0: a cell is on iff its logit is
    /// strictly positive.
    pub fn from_logits(size: usize, logits: &[f64]) -> Result<Self> {
        if logits.len() != size * size {
            return Err(dim_err("mask logits", &[size, size], &[logits.len()]));
        }
        Ok(MaskGrid {
            size,
            cells: logits.iter().map(|&z| z > 0.0).collect(),
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.size + col]
    }

    pub fn count_on(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    /// Targets for the pixel-wise loss: on-cells as 1.0, off-cells as 0.0.
    pub fn to_f64(&self) -> Vec<f64> {
        self.cells.iter().map(|&c| f64::from(c)).collect()
    }
}

/// Cell-level IoU of two binary grids; vacuously 1.0 when both are empty.
pub fn mask_iou(pred: &MaskGrid, target: &MaskGrid) -> Result<f64> {
    if pred.size != target.size {
        return Err(dim_err(
            "mask_iou",
            &[pred.size, pred.size],
            &[target.size, target.size],
        ));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&a, &b) in pred.cells.iter().zip(target.cells.iter()) {
        inter += usize::from(a && b);
        union += usize::from(a || b);
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_box(rng: &mut ChaCha8Rng) -> BBox {
        let x1 = rng.gen_range(-5.0..5.0);
        let y1 = rng.gen_range(-5.0..5.0);
        BBox::new(
            x1,
            y1,
            x1 + rng.gen_range(0.1..4.0),
            y1 + rng.gen_range(0.1..4.0),
        )
        .unwrap()
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let b = BBox::new(0.0, 0.0, 2.0, 3.0).unwrap();
        assert_eq!(iou(&b, &b), 1.0);
        let far = BBox::new(10.0, 10.0, 11.0, 11.0).unwrap();
        assert_eq!(iou(&b, &far), 0.0);
    }

    #[test]
    fn iou_area_arithmetic() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let b = BBox::new(5.0, 0.0, 15.0, 10.0).unwrap();
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn iou_symmetric_fuzzed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let a = rand_box(&mut rng);
            let b = rand_box(&mut rng);
            assert_eq!(iou(&a, &b), iou(&b, &a));
            let v = iou(&a, &b);
            if a == b {
                assert_eq!(v, 1.0);
            } else {
                assert!((0.0..1.0).contains(&v) || (v - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn match_single_and_ordering() {
        let p = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let far = BBox::new(100.0, 100.0, 101.0, 101.0).unwrap();
        let (m, c, v) = match_proposal(&p, &[(far, 7)]).unwrap();
        assert_eq!((m, c), (far, 7));
        assert_eq!(v, 0.0);

        // IoU 0.6-ish GT beats IoU 0.3-ish GT (exhaustive comparison)
        let g1 = BBox::new(0.0, 0.0, 9.0, 10.0).unwrap();
        let g2 = BBox::new(5.0, 0.0, 15.0, 10.0).unwrap();
        let gts = [(g2, 2), (g1, 1)];
        let expect = if iou(&p, &g1) > iou(&p, &g2) { 1 } else { 2 };
        let (_, c, best) = match_proposal(&p, &gts).unwrap();
        assert_eq!(c, expect);
        assert!(gts.iter().all(|(g, _)| iou(&p, g) <= best));
    }

    #[test]
    fn match_tie_breaks_to_first_listed() {
        let p = BBox::new(0.0, 0.0, 4.0, 4.0).unwrap();
        let g = BBox::new(1.0, 1.0, 3.0, 3.0).unwrap();
        let (_, c, _) = match_proposal(&p, &[(g, 9), (g, 1)]).unwrap();
        assert_eq!(c, 9);
    }

    #[test]
    fn match_empty_is_error() {
        let p = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        assert!(matches!(match_proposal(&p, &[]), Err(Error::EmptyMatch)));
    }

    #[test]
    fn encode_identity_and_scalar_formula() {
        let p = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        assert_eq!(encode_deltas(&p, &p), BoxDelta::ZERO);
        let b = BBox::new(0.0, 0.0, 20.0, 10.0).unwrap();
        let d = encode_deltas(&p, &b);
        assert!((d.dx - 0.5).abs() < 1e-15);
        assert_eq!(d.dy, 0.0);
        assert!((d.dw - 2.0_f64.ln()).abs() < 1e-15);
        assert_eq!(d.dh, 0.0);
    }

    #[test]
    fn decode_identity_and_scalar_formula() {
        let p = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        assert_eq!(decode_deltas(&p, &BoxDelta::ZERO), p);
        let d = BoxDelta {
            dx: 0.5,
            dy: 0.0,
            dw: 2.0_f64.ln(),
            dh: 0.0,
        };
        let b = decode_deltas(&p, &d);
        assert!((b.x1 - 0.0).abs() < 1e-12);
        assert!((b.x2 - 20.0).abs() < 1e-12);
        assert!((b.y1 - 0.0).abs() < 1e-12);
        assert!((b.y2 - 10.0).abs() < 1e-12);
    }

    #[test]
    fn encode_decode_mutual_inverses_fuzzed() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let p = rand_box(&mut rng);
            let b = rand_box(&mut rng);
            let rt = decode_deltas(&p, &encode_deltas(&p, &b));
            assert!((rt.x1 - b.x1).abs() < 1e-9);
            assert!((rt.y1 - b.y1).abs() < 1e-9);
            assert!((rt.x2 - b.x2).abs() < 1e-9);
            assert!((rt.y2 - b.y2).abs() < 1e-9);

            let d = BoxDelta {
                dx: rng.gen_range(-1.0..1.0),
                dy: rng.gen_range(-1.0..1.0),
                dw: rng.gen_range(-3.0..3.0),
                dh: rng.gen_range(-3.0..3.0),
            };
            let rd = encode_deltas(&p, &decode_deltas(&p, &d));
            assert!((rd.dx - d.dx).abs() < 1e-9);
            assert!((rd.dy - d.dy).abs() < 1e-9);
            assert!((rd.dw - d.dw).abs() < 1e-9);
            assert!((rd.dh - d.dh).abs() < 1e-9);
        }
    }

    #[test]
    fn mask_iou_cases() {
        let full = MaskGrid::new(4, vec![true; 16]).unwrap();
        assert_eq!(mask_iou(&full, &full).unwrap(), 1.0);

        let mut a = vec![false; 16];
        let mut b = vec![false; 16];
        a[0] = true;
        b[15] = true;
        let ga = MaskGrid::new(4, a).unwrap();
        let gb = MaskGrid::new(4, b).unwrap();
        assert_eq!(mask_iou(&ga, &gb).unwrap(), 0.0);

        let empty = MaskGrid::empty(4);
        assert_eq!(mask_iou(&empty, &empty).unwrap(), 1.0);

        assert!(mask_iou(&empty, &MaskGrid::empty(5)).is_err());
    }

    #[test]
    fn mask_iou_cell_counting() {
        // two 147-cell masks on a 14×14 grid overlapping in 98 cells
        let mut a = vec![false; 196];
        let mut b = vec![false; 196];
        for cell in a.iter_mut().take(147) {
            *cell = true;
        }
        for (i, cell) in b.iter_mut().enumerate().skip(49) {
            if i < 49 + 147 {
                *cell = true;
            }
        }
        let ga = MaskGrid::new(14, a).unwrap();
        let gb = MaskGrid::new(14, b).unwrap();
        assert_eq!(ga.count_on(), 147);
        assert_eq!(gb.count_on(), 147);
        assert_eq!(mask_iou(&ga, &gb).unwrap(), 98.0 / 196.0);
    }
}
