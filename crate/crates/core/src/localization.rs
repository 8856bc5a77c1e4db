//! From a fused localization map to a bounding box, and box-level scoring.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::BoolGrid;
use crate::locmaps::LocalizationMap;
use crate::tensor::Scalar;

/// Half-open pixel rectangle: `x0..x1` columns, `y0..y1` rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BBox {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::InvalidArgument(format!(
                "degenerate box ({x0}, {y0})-({x1}, {y1})"
            )));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn intersection_area(&self, other: &BBox) -> u64 {
        let w = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let h = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        w as u64 * h as u64
    }

    /// Smallest box containing both.
    pub fn union_hull(&self, other: &BBox) -> BBox {
        BBox {
            x0: self.x0.min(other.x0),
            y0: self.y0.min(other.y0),
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
        }
    }

    pub fn fits_within(&self, width: u32, height: u32) -> bool {
        self.x1 <= width && self.y1 <= height
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

/// Intersection over union by pixel area, exact as a ratio of integers.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// Cells with `value > tau_rel · max(map)`.
pub fn segment_foreground<T: Scalar>(map: &LocalizationMap<T>, tau_rel: f64) -> Result<BoolGrid> {
    map.grid.expect_rank("segment_foreground", 2)?;
    if !(tau_rel > 0.0 && tau_rel < 1.0) {
        return Err(Error::InvalidArgument(format!("foreground threshold must lie in (0, 1), got {tau_rel}")));
    }
    let (h, w) = (map.grid.shape()[0], map.grid.shape()[1]);
    let peak = map.grid.data().iter().copied().fold(T::neg_infinity(), T::max);
    let thr = T::from_f64(tau_rel) * peak;
    Ok(BoolGrid::from_fn(h, w, |r, c| map.grid.data()[r * w + c] > thr))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Connectivity {
    #[serde(rename = "4")]
    Four,
    #[default]
    #[serde(rename = "8")]
    Eight,
}

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (0, -1), (0, 1), (1, 0)],
            Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
        }
    }
}

/// `(row, col)` pixels of one connected component, in discovery order.
pub type Component = Vec<(usize, usize)>;

/// Largest connected set of true cells. Ties go to the component whose first
/// pixel in row-major order comes earliest. An empty mask gives an empty set.
pub fn largest_connected_component(mask: &BoolGrid, connectivity: Connectivity) -> Component {
    let (h, w) = (mask.height, mask.width);
    let mut seen = vec![false; h * w];
    let mut best: Component = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask.cells[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(idx) = queue.pop_front() {
            let (r, c) = (idx / w, idx % w);
            comp.push((r, c));
            for &(dr, dc) in connectivity.offsets() {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    continue;
                }
                let n = nr as usize * w + nc as usize;
                if mask.cells[n] && !seen[n] {
                    seen[n] = true;
                    queue.push_back(n);
                }
            }
        }
        if comp.len() > best.len() {
            best = comp;
        }
    }
    best
}

/// Tight box of `component` on a `map_h × map_w` grid, scaled to image
/// pixels with mins floored and maxes ceiled. `None` for an empty component.
pub fn tight_bbox(component: &[(usize, usize)], map_size: (usize, usize), image_size: (usize, usize)) -> Option<BBox> {
    let (&(r0, c0), rest) = component.split_first()?;
    let (mut rmin, mut rmax, mut cmin, mut cmax) = (r0, r0, c0, c0);
    for &(r, c) in rest {
        rmin = rmin.min(r);
        rmax = rmax.max(r);
        cmin = cmin.min(c);
        cmax = cmax.max(c);
    }
    let (mh, mw) = map_size;
    let (ih, iw) = image_size;
    let lo = |v: usize, img: usize, map: usize| (v * img / map) as u32;
    let hi = |v: usize, img: usize, map: usize| ((v + 1) * img).div_ceil(map) as u32;
    Some(BBox {
        x0: lo(cmin, iw, mw),
        y0: lo(rmin, ih, mh),
        x1: hi(cmax, iw, mw),
        y1: hi(rmax, ih, mh),
    })
}

/// Foreground → largest component → tight box, in one step.
pub fn box_from_map<T: Scalar>(
    map: &LocalizationMap<T>,
    tau_rel: f64,
    connectivity: Connectivity,
    image_size: (usize, usize),
) -> Result<Option<BBox>> {
    let fg = segment_foreground(map, tau_rel)?;
    let comp = largest_connected_component(&fg, connectivity);
    Ok(tight_bbox(&comp, (fg.height, fg.width), image_size))
}

/// One ranked category guess and the box extracted for it (if any).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Guess {
    pub category: usize,
    pub bbox: Option<BBox>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplePrediction {
    /// Guesses in descending confidence.
    pub guesses: Vec<Guess>,
    /// Box extracted from the ground-truth category's map.
    pub gt_known_box: Option<BBox>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub label: usize,
    pub bbox: BBox,
}

/// Localization and classification error rates over a set of samples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocMetrics {
    pub top1_loc_err: f64,
    /// Top-k error; serialized under the conventional top-5 key with `k`
    /// recorded alongside.
    #[serde(rename = "top5_loc_err")]
    pub topk_loc_err: f64,
    pub gt_known_loc_err: f64,
    pub cls_err: f64,
    pub n: usize,
    pub k: usize,
}

/// Localization hit: IoU strictly above one half.
pub const IOU_THRESHOLD: f64 = 0.5;

fn hit(b: Option<&BBox>, gt: &BBox) -> bool {
    b.is_some_and(|b| iou(b, gt) > IOU_THRESHOLD)
}

/// Scores predictions against ground truth. A sample is a top-k hit when one
/// of its first `k` guesses names the right category and, being among the
/// first `k_box` guesses, carries a box with IoU > 0.5.
pub fn evaluate(predictions: &[SamplePrediction], ground_truth: &[GroundTruth], k: usize, k_box: usize) -> Result<LocMetrics> {
    if predictions.len() != ground_truth.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions but {} ground-truth records",
            predictions.len(),
            ground_truth.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let (mut top1, mut topk, mut gt_known, mut cls) = (0usize, 0usize, 0usize, 0usize);
    for (i, (p, gt)) in predictions.iter().zip(ground_truth).enumerate() {
        if p.guesses.len() < k {
            return Err(Error::InvalidArgument(format!(
                "sample {i} has {} guesses, fewer than k = {k}",
                p.guesses.len()
            )));
        }
        let correct_box = |rank: usize, g: &Guess| g.category == gt.label && rank < k_box && hit(g.bbox.as_ref(), &gt.bbox);
        if p.guesses[0].category == gt.label {
            cls += 1;
        }
        if correct_box(0, &p.guesses[0]) {
            top1 += 1;
        }
        if p.guesses[..k].iter().enumerate().any(|(r, g)| correct_box(r, g)) {
            topk += 1;
        }
        if hit(p.gt_known_box.as_ref(), &gt.bbox) {
            gt_known += 1;
        }
    }
    let n = predictions.len();
    let err = |ok: usize| 1.0 - ok as f64 / n as f64;
    Ok(LocMetrics {
        top1_loc_err: err(top1),
        topk_loc_err: err(topk),
        gt_known_loc_err: err(gt_known),
        cls_err: err(cls),
        n,
        k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn b(x0: u32, y0: u32, x1: u32, y1: u32) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    fn grid(rows: &[&str]) -> BoolGrid {
        BoolGrid::from_fn(rows.len(), rows[0].len(), |r, c| rows[r].as_bytes()[c] == b'#')
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&b(3, 4, 9, 9), &b(3, 4, 9, 9)), 1.0);
        assert_eq!(iou(&b(0, 0, 2, 2), &b(2, 2, 4, 4)), 0.0);
        assert_eq!(iou(&b(0, 0, 2, 2), &b(1, 1, 3, 3)), 1.0 / 7.0);
        assert!(BBox::new(2, 0, 2, 1).is_err());
    }

    #[test]
    fn foreground_threshold() {
        let m = LocalizationMap { grid: Tensor::<f64>::from_vec(vec![1, 2], vec![0.1, 0.9]).unwrap(), category: 0, normalized: true };
        assert_eq!(segment_foreground(&m, 0.2).unwrap().cells, vec![false, true]);
        let z = LocalizationMap { grid: Tensor::<f64>::zeros(&[3, 3]), category: 0, normalized: true };
        assert!(segment_foreground(&z, 0.2).unwrap().is_empty());
        assert!(segment_foreground(&m, 1.0).is_err());
    }

    #[test]
    fn largest_component_examples() {
        let two_blobs = grid(&["##...", ".....", "...##", "....#"]);
        let comp = largest_connected_component(&two_blobs, Connectivity::Eight);
        assert_eq!(comp.len(), 3);
        assert!(comp.contains(&(3, 4)));

        let diagonal = grid(&["#..", ".#.", "..#"]);
        assert_eq!(largest_connected_component(&diagonal, Connectivity::Eight).len(), 3);
        assert_eq!(largest_connected_component(&diagonal, Connectivity::Four).len(), 1);

        let full = BoolGrid::from_fn(4, 5, |_, _| true);
        assert_eq!(largest_connected_component(&full, Connectivity::Eight).len(), 20);
        assert!(largest_connected_component(&BoolGrid::new(3, 3), Connectivity::Eight).is_empty());

        let tie = grid(&["..#", "...", "#.."]);
        assert_eq!(largest_connected_component(&tie, Connectivity::Eight), vec![(0, 2)]);
    }

    #[test]
    fn tight_box_scaling() {
        assert_eq!(tight_bbox(&[(2, 3)], (8, 8), (64, 64)), Some(b(24, 16, 32, 24)));
        let all: Vec<_> = (0..8).flat_map(|r| (0..8).map(move |c| (r, c))).collect();
        assert_eq!(tight_bbox(&all, (8, 8), (64, 64)), Some(b(0, 0, 64, 64)));
        let l_shape = [(1, 1), (2, 1), (3, 1), (3, 2), (3, 3)];
        assert_eq!(tight_bbox(&l_shape, (5, 5), (5, 5)), Some(b(1, 1, 4, 4)));
        assert_eq!(tight_bbox(&[], (5, 5), (5, 5)), None);
        // Non-integer scale rounds outward.
        assert_eq!(tight_bbox(&[(1, 1)], (3, 3), (10, 10)), Some(b(3, 3, 7, 7)));
    }

    fn gt(label: usize, bbox: BBox) -> GroundTruth {
        GroundTruth { label, bbox }
    }

    fn pred(cats: &[usize], boxes: &[Option<BBox>], gt_known: Option<BBox>) -> SamplePrediction {
        SamplePrediction {
            guesses: cats.iter().zip(boxes).map(|(&category, &bbox)| Guess { category, bbox }).collect(),
            gt_known_box: gt_known,
        }
    }

    #[test]
    fn evaluate_counting_rules() {
        let g = b(0, 0, 10, 10);
        let exact = pred(&[1, 0], &[Some(g), Some(g)], Some(g));
        let m = evaluate(std::slice::from_ref(&exact), &[gt(1, g)], 2, 2).unwrap();
        assert_eq!((m.top1_loc_err, m.topk_loc_err, m.gt_known_loc_err, m.cls_err), (0.0, 0.0, 0.0, 0.0));

        // IoU 0.4 is a miss.
        let loose = b(0, 0, 10, 4);
        assert!((iou(&loose, &g) - 0.4).abs() < 1e-12);
        let m = evaluate(&[pred(&[1, 0], &[Some(loose), None], Some(loose))], &[gt(1, g)], 1, 1).unwrap();
        assert_eq!((m.top1_loc_err, m.cls_err, m.gt_known_loc_err), (1.0, 0.0, 1.0));

        let wrong = pred(&[0, 1], &[Some(g), Some(g)], Some(g));
        let m = evaluate(&[exact, wrong], &[gt(1, g), gt(1, g)], 2, 2).unwrap();
        assert_eq!((m.top1_loc_err, m.cls_err, m.topk_loc_err, m.gt_known_loc_err), (0.5, 0.5, 0.0, 0.0));
    }

    #[test]
    fn k_box_limits_boxed_guesses() {
        let g = b(0, 0, 10, 10);
        let second = pred(&[0, 1], &[Some(g), Some(g)], Some(g));
        assert_eq!(evaluate(std::slice::from_ref(&second), &[gt(1, g)], 2, 2).unwrap().topk_loc_err, 0.0);
        assert_eq!(evaluate(&[second], &[gt(1, g)], 2, 1).unwrap().topk_loc_err, 1.0);
    }

    #[test]
    fn evaluate_rejects_bad_input() {
        let g = b(0, 0, 4, 4);
        let p = pred(&[0], &[Some(g)], None);
        assert!(evaluate(std::slice::from_ref(&p), &[], 1, 1).is_err());
        assert!(evaluate(&[p], &[gt(0, g)], 2, 2).is_err());
    }

    #[test]
    fn metrics_json_keys() {
        let m = LocMetrics { top1_loc_err: 0.5, topk_loc_err: 0.25, gt_known_loc_err: 0.2, cls_err: 0.1, n: 4, k: 4 };
        let v = serde_json::to_value(m).unwrap();
        for key in ["top1_loc_err", "top5_loc_err", "gt_known_loc_err", "cls_err", "n"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0u32..63, 0u32..63, 1u32..64, 1u32..64).prop_map(|(x, y, w, h)| {
            BBox::new(x, y, (x + w).min(64).max(x + 1), (y + h).min(64).max(y + 1)).unwrap()
        })
    }

    proptest! {
        #[test]
        fn iou_symmetric_bounded_and_exact_only_when_equal(a in arb_box(), b2 in arb_box()) {
            let v = iou(&a, &b2);
            prop_assert_eq!(v, iou(&b2, &a));
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v == 1.0, a == b2);
        }

        #[test]
        fn larger_k_never_hurts(
            labels in proptest::collection::vec(0usize..4, 1..12),
            perm_seed in any::<u64>(),
        ) {
            let g = BBox::new(0, 0, 8, 8).unwrap();
            let preds: Vec<_> = labels.iter().enumerate().map(|(i, _)| {
                let mut cats = vec![0, 1, 2, 3];
                cats.rotate_left(((perm_seed >> (i % 32)) % 4) as usize);
                let boxes = vec![Some(g); 4];
                pred(&cats, &boxes, Some(g))
            }).collect();
            let gts: Vec<_> = labels.iter().map(|&l| gt(l, g)).collect();
            let mut prev = 1.0;
            for k in 1..=4 {
                let m = evaluate(&preds, &gts, k, k).unwrap();
                prop_assert!(m.topk_loc_err <= prev);
                prop_assert!(m.topk_loc_err <= m.top1_loc_err);
                prop_assert!(m.gt_known_loc_err <= m.top1_loc_err);
                prev = m.topk_loc_err;
            }
        }
    }
}
