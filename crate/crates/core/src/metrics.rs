//! Two-level evaluation: threshold-swept pixel metrics (dice / IoU averaged
//! over 18 binarization thresholds) and the coarse 3x3 patch-grading
//! protocol with its 4-class confusion matrix.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::param::Real;

/// The fixed sweep 0.10, 0.15, ..., 0.95.
pub fn sweep_thresholds() -> Vec<f64> {
    (0..18).map(|i| (10 + 5 * i) as f64 / 100.0).collect()
}

/// Binarize a probability map at `t` (pixels >= t become 1).
pub fn binarize<F: Real>(prob: &Array2<F>, t: f64) -> Result<Array2<u8>> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::domain(format!("threshold {t} outside (0, 1)")));
    }
    let tf = F::from_f64c(t);
    Ok(prob.mapv(|p| u8::from(p >= tf)))
}

fn overlap_counts(pred: &Array2<u8>, gt: &Array2<u8>) -> Result<(u64, u64, u64)> {
    if pred.dim() != gt.dim() {
        return Err(Error::shape(format!(
            "mask dims differ: {:?} vs {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let mut a = 0u64;
    let mut b = 0u64;
    let mut inter = 0u64;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        if p != 0 {
            a += 1;
        }
        if g != 0 {
            b += 1;
        }
        if p != 0 && g != 0 {
            inter += 1;
        }
    }
    Ok((a, b, inter))
}

/// `2|A n B| / (|A| + |B|)`; 1.0 when both masks are empty.
pub fn dice_coefficient(pred: &Array2<u8>, gt: &Array2<u8>) -> Result<f64> {
    let (a, b, inter) = overlap_counts(pred, gt)?;
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// `|A n B| / |A u B|`; 1.0 when both masks are empty.
pub fn iou(pred: &Array2<u8>, gt: &Array2<u8>) -> Result<f64> {
    let (a, b, inter) = overlap_counts(pred, gt)?;
    let union = a + b - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Per-threshold averages plus the overall mean over thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdSweepResult {
    /// `(threshold, mean dice, mean IoU)`, one row per threshold.
    pub rows: Vec<(f64, f64, f64)>,
    pub overall_dice: f64,
    pub overall_iou: f64,
}

/// Binarize every probability map at all 18 thresholds, average dice / IoU
/// over images per threshold, then average over thresholds.
pub fn threshold_sweep<F: Real>(
    probs: &[Array2<F>],
    gts: &[Array2<u8>],
) -> Result<ThresholdSweepResult> {
    if probs.is_empty() || probs.len() != gts.len() {
        return Err(Error::domain(format!(
            "sweep needs matching nonempty lists, got {} vs {}",
            probs.len(),
            gts.len()
        )));
    }
    let mut rows = Vec::with_capacity(18);
    for t in sweep_thresholds() {
        let mut dice_sum = 0.0;
        let mut iou_sum = 0.0;
        for (p, g) in probs.iter().zip(gts.iter()) {
            let bin = binarize(p, t)?;
            dice_sum += dice_coefficient(&bin, g)?;
            iou_sum += iou(&bin, g)?;
        }
        let n = probs.len() as f64;
        rows.push((t, dice_sum / n, iou_sum / n));
    }
    let k = rows.len() as f64;
    let overall_dice = rows.iter().map(|r| r.1).sum::<f64>() / k;
    let overall_iou = rows.iter().map(|r| r.2).sum::<f64>() / k;
    Ok(ThresholdSweepResult {
        rows,
        overall_dice,
        overall_iou,
    })
}

/// Band sizes of the 3-way split of `n`: ceil(n/3) first, remainder
/// balanced (256 -> 86, 85, 85).
pub fn band_sizes(n: usize) -> [usize; 3] {
    let b0 = n.div_ceil(3);
    let b1 = (n - b0).div_ceil(2);
    [b0, b1, n - b0 - b1]
}

/// 3x3 downscale of a binary mask: positive-pixel counts and cell areas.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grid3 {
    pub counts: [[u64; 3]; 3],
    pub areas: [[u64; 3]; 3],
}

impl Grid3 {
    pub fn fractions(&self) -> [[f64; 3]; 3] {
        let mut out = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                out[r][c] = self.counts[r][c] as f64 / self.areas[r][c] as f64;
            }
        }
        out
    }

    pub fn total_positives(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

/// Partition the mask into 3x3 contiguous bands and count positives per
/// cell.
pub fn downscale_to_grid(mask: &Array2<u8>) -> Result<Grid3> {
    let (h, w) = mask.dim();
    if h < 3 || w < 3 {
        return Err(Error::domain(format!("mask {h}x{w} too small for a 3x3 grid")));
    }
    let rb = band_sizes(h);
    let cb = band_sizes(w);
    let row_edges = [0, rb[0], rb[0] + rb[1], h];
    let col_edges = [0, cb[0], cb[0] + cb[1], w];
    let mut counts = [[0u64; 3]; 3];
    let mut areas = [[0u64; 3]; 3];
    for gr in 0..3 {
        for gc in 0..3 {
            let mut count = 0u64;
            for r in row_edges[gr]..row_edges[gr + 1] {
                for c in col_edges[gc]..col_edges[gc + 1] {
                    if mask[[r, c]] != 0 {
                        count += 1;
                    }
                }
            }
            counts[gr][gc] = count;
            areas[gr][gc] = (rb[gr] * cb[gc]) as u64;
        }
    }
    Ok(Grid3 { counts, areas })
}

/// Drainage amount of a 3x3 patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Grade {
    None,
    Low,
    Middle,
    High,
}

pub const GRADES: [Grade; 4] = [Grade::None, Grade::Low, Grade::Middle, Grade::High];

impl Grade {
    pub fn index(self) -> usize {
        match self {
            Grade::None => 0,
            Grade::Low => 1,
            Grade::Middle => 2,
            Grade::High => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Grade::None => "none",
            Grade::Low => "low",
            Grade::Middle => "middle",
            Grade::High => "high",
        }
    }

    /// Export level for the 2-bit grayscale grid images.
    pub fn gray_level(self) -> u8 {
        match self {
            Grade::None => 0,
            Grade::Low => 85,
            Grade::Middle => 170,
            Grade::High => 255,
        }
    }
}

/// Grade boundaries on the positive-pixel fraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradeThresholds {
    pub t1: f64,
    pub t2: f64,
    /// Probability threshold that binarizes predictions upstream.
    pub pixel_positive_threshold: f64,
}

impl GradeThresholds {
    pub fn new(t1: f64, t2: f64) -> Result<Self> {
        let th = GradeThresholds {
            t1,
            t2,
            pixel_positive_threshold: 0.5,
        };
        th.validate()?;
        Ok(th)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t1 > 0.0 && self.t1 < self.t2 && self.t2 <= 1.0) {
            return Err(Error::config(format!(
                "grade thresholds must satisfy 0 < t1 < t2 <= 1, got ({}, {})",
                self.t1, self.t2
            )));
        }
        if !(self.pixel_positive_threshold > 0.0 && self.pixel_positive_threshold < 1.0) {
            return Err(Error::config(
                "pixel_positive_threshold must lie in (0, 1)".to_string(),
            ));
        }
        Ok(())
    }
}

/// Derive `(t1, t2)` from the ground truth: mean +- std of the nonzero 3x3
/// cell fractions over all masks containing at least one positive pixel.
/// Degenerate spread falls back to `t1 = mean / 2`.
pub fn derive_grade_thresholds(gt_masks: &[Array2<u8>]) -> Result<GradeThresholds> {
    let mut fractions = Vec::new();
    for mask in gt_masks {
        if mask.iter().all(|&v| v == 0) {
            continue;
        }
        let grid = downscale_to_grid(mask)?;
        for (count, area) in grid.counts.iter().flatten().zip(grid.areas.iter().flatten()) {
            if *count > 0 {
                fractions.push(*count as f64 / *area as f64);
            }
        }
    }
    if fractions.is_empty() {
        return Err(Error::domain(
            "no positive pixels in any ground-truth mask".to_string(),
        ));
    }
    let n = fractions.len() as f64;
    let mean = fractions.iter().sum::<f64>() / n;
    let var = fractions.iter().map(|f| (f - mean) * (f - mean)).sum::<f64>() / n;
    let mut std = var.sqrt();
    if std <= 1e-12 {
        std = 0.0; // identical fractions up to accumulated rounding
    }

    let t2 = (mean + std).min(1.0);
    let mut t1 = mean - std;
    if t1 <= 0.0 || t1 >= t2 {
        t1 = mean / 2.0;
    }
    GradeThresholds::new(t1, t2)
}

/// 3x3 grid of grades.
pub type PatchGrid = [[Grade; 3]; 3];

/// Classify each cell fraction: 0 -> none, (0, t1] -> low, (t1, t2] ->
/// middle, above -> high.
pub fn grade_patches(fractions: &[[f64; 3]; 3], th: &GradeThresholds) -> Result<PatchGrid> {
    th.validate()?;
    let mut out = [[Grade::None; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            let f = fractions[r][c];
            out[r][c] = if f == 0.0 {
                Grade::None
            } else if f <= th.t1 {
                Grade::Low
            } else if f <= th.t2 {
                Grade::Middle
            } else {
                Grade::High
            };
        }
    }
    Ok(out)
}

/// 4x4 confusion counts; rows are ground truth, columns predictions.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfusionMatrix4 {
    pub counts: [[u64; 4]; 4],
}

impl ConfusionMatrix4 {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// One-vs-rest precision; `None` when the class was never predicted.
    pub fn precision(&self, class: usize) -> Option<f64> {
        let col: u64 = (0..4).map(|r| self.counts[r][class]).sum();
        (col > 0).then(|| self.counts[class][class] as f64 / col as f64)
    }

    /// One-vs-rest recall; `None` when the class never occurs in the ground
    /// truth.
    pub fn recall(&self, class: usize) -> Option<f64> {
        let row: u64 = self.counts[class].iter().sum();
        (row > 0).then(|| self.counts[class][class] as f64 / row as f64)
    }
}

/// Tally patch-level agreement over aligned grids.
pub fn patch_confusion(pred_grids: &[PatchGrid], gt_grids: &[PatchGrid]) -> Result<ConfusionMatrix4> {
    if pred_grids.len() != gt_grids.len() {
        return Err(Error::domain(format!(
            "grid lists differ: {} vs {}",
            pred_grids.len(),
            gt_grids.len()
        )));
    }
    let mut cm = ConfusionMatrix4::default();
    for (p, g) in pred_grids.iter().zip(gt_grids.iter()) {
        for r in 0..3 {
            for c in 0..3 {
                cm.counts[g[r][c].index()][p[r][c].index()] += 1;
            }
        }
    }
    Ok(cm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sweep_has_exactly_18_thresholds() {
        let t = sweep_thresholds();
        assert_eq!(t.len(), 18);
        assert_eq!(t[0], 0.10);
        assert_eq!(t[17], 0.95);
        for w in t.windows(2) {
            assert!((w[1] - w[0] - 0.05).abs() < 1e-12);
        }
    }

    #[test]
    fn binarize_boundary_uses_geq() {
        let prob = Array2::<f64>::from_elem((2, 2), 0.5);
        let bin = binarize(&prob, 0.5).unwrap();
        assert!(bin.iter().all(|&v| v == 1));
        assert!(binarize(&prob, 0.0).is_err());
        assert!(binarize(&prob, 1.0).is_err());
        let mixed = array![[0.2, 0.6], [0.5, 0.9]];
        assert_eq!(binarize(&mixed, 0.5).unwrap(), array![[0u8, 1], [1, 1]]);
    }

    #[test]
    fn dice_and_iou_basic_values() {
        let mut pred = Array2::<u8>::zeros((4, 4));
        let mut gt = Array2::<u8>::zeros((4, 4));
        for i in 0..4 {
            pred[[0, i]] = 1;
        }
        gt[[0, 2]] = 1;
        gt[[0, 3]] = 1;
        gt[[1, 0]] = 1;
        gt[[1, 1]] = 1;
        assert_eq!(dice_coefficient(&pred, &gt).unwrap(), 0.5);
        assert!((iou(&pred, &gt).unwrap() - 1.0 / 3.0).abs() < 1e-15);

        let empty = Array2::<u8>::zeros((4, 4));
        assert_eq!(dice_coefficient(&empty, &empty).unwrap(), 1.0);
        assert_eq!(iou(&empty, &empty).unwrap(), 1.0);

        assert_eq!(dice_coefficient(&gt, &gt).unwrap(), 1.0);

        let mut disjoint = Array2::<u8>::zeros((4, 4));
        disjoint[[3, 3]] = 1;
        assert_eq!(dice_coefficient(&disjoint, &gt).unwrap(), 0.0);
    }

    #[test]
    fn iou_dice_set_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let pred =
                Array2::<u8>::from_shape_simple_fn((8, 8), || u8::from(rng.random::<f64>() > 0.5));
            let gt =
                Array2::<u8>::from_shape_simple_fn((8, 8), || u8::from(rng.random::<f64>() > 0.5));
            let d = dice_coefficient(&pred, &gt).unwrap();
            let j = iou(&pred, &gt).unwrap();
            assert!((j - d / (2.0 - d)).abs() < 1e-12);
            assert!((d - 2.0 * j / (1.0 + j)).abs() < 1e-12);
        }
    }

    #[test]
    fn band_partition_balances() {
        assert_eq!(band_sizes(256), [86, 85, 85]);
        assert_eq!(band_sizes(3), [1, 1, 1]);
        assert_eq!(band_sizes(16), [6, 5, 5]);
        assert_eq!(band_sizes(5), [2, 2, 1]);
    }

    #[test]
    fn downscale_conserves_positive_totals() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (h, w) in [(256, 256), (17, 9), (64, 48)] {
            let mask =
                Array2::<u8>::from_shape_simple_fn((h, w), || u8::from(rng.random::<f64>() > 0.7));
            let total: u64 = mask.iter().map(|&v| v as u64).sum();
            let grid = downscale_to_grid(&mask).unwrap();
            assert_eq!(grid.total_positives(), total);
            let area_total: u64 = grid.areas.iter().flatten().sum();
            assert_eq!(area_total, (h * w) as u64);
        }
    }

    #[test]
    fn downscale_band_oracle_256() {
        // top-left 86x86 band all ones -> cell (0,0) = 1.0, everything else 0
        let mut mask = Array2::<u8>::zeros((256, 256));
        for r in 0..86 {
            for c in 0..86 {
                mask[[r, c]] = 1;
            }
        }
        let grid = downscale_to_grid(&mask).unwrap();
        let f = grid.fractions();
        assert_eq!(f[0][0], 1.0);
        for r in 0..3 {
            for c in 0..3 {
                if (r, c) != (0, 0) {
                    assert_eq!(f[r][c], 0.0);
                }
            }
        }
    }

    #[test]
    fn grade_threshold_derivation() {
        // one nonzero cell per mask with fractions {0.2, 0.4, 0.6}:
        // mean 0.4, population std sqrt(0.08 / 3)
        let mut masks = Vec::new();
        for target in [0.2f64, 0.4, 0.6] {
            // 30x30 mask: every cell is 10x10, fill the top-left one
            let mut mask = Array2::<u8>::zeros((30, 30));
            let positives = (target * 100.0).round() as usize;
            let mut placed = 0;
            'outer: for r in 0..10 {
                for c in 0..10 {
                    if placed == positives {
                        break 'outer;
                    }
                    mask[[r, c]] = 1;
                    placed += 1;
                }
            }
            masks.push(mask);
        }
        let th = derive_grade_thresholds(&masks).unwrap();
        let mean = 0.4;
        let std = (0.08f64 / 3.0).sqrt();
        assert!((th.t1 - (mean - std)).abs() < 1e-9, "t1 {}", th.t1);
        assert!((th.t2 - (mean + std)).abs() < 1e-9, "t2 {}", th.t2);
        assert!((th.t1 - 0.2367).abs() < 1e-3);
        assert!((th.t2 - 0.5633).abs() < 1e-3);
    }

    #[test]
    fn degenerate_spread_falls_back_to_half_mean() {
        // every nonzero cell fraction identical -> sigma = 0
        let mut mask = Array2::<u8>::zeros((30, 30));
        for r in 0..30 {
            for c in 0..30 {
                // 40 positives per 100-pixel cell, uniformly in each cell
                if r % 10 < 4 {
                    mask[[r, c]] = 1;
                }
            }
        }
        let th = derive_grade_thresholds(&[mask]).unwrap();
        assert!((th.t1 - 0.2).abs() < 1e-12);
        assert!((th.t2 - 0.4).abs() < 1e-12);
    }

    #[test]
    fn no_positives_is_a_domain_error() {
        let masks = vec![Array2::<u8>::zeros((9, 9))];
        assert!(matches!(
            derive_grade_thresholds(&masks),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn grading_is_total_and_respects_boundaries() {
        let th = GradeThresholds::new(0.2, 0.5).unwrap();
        let f = [[0.0, 0.2, 0.5], [0.7, 0.200000001, 1.0], [0.01, 0.3, 0.0]];
        let g = grade_patches(&f, &th).unwrap();
        assert_eq!(g[0][0], Grade::None);
        assert_eq!(g[0][1], Grade::Low); // boundary inclusive-left
        assert_eq!(g[0][2], Grade::Middle);
        assert_eq!(g[1][0], Grade::High);
        assert_eq!(g[1][1], Grade::Middle);
        assert_eq!(g[1][2], Grade::High);
        assert_eq!(g[2][0], Grade::Low);
        assert_eq!(g[2][1], Grade::Middle);
        assert_eq!(g[2][2], Grade::None);
    }

    #[test]
    fn confusion_diagonal_for_equal_grids() {
        let grid: PatchGrid = [
            [Grade::None, Grade::Low, Grade::Middle],
            [Grade::High, Grade::None, Grade::Low],
            [Grade::Middle, Grade::High, Grade::None],
        ];
        let cm = patch_confusion(&[grid, grid], &[grid, grid]).unwrap();
        assert_eq!(cm.total(), 18);
        let mut diag = 0;
        for i in 0..4 {
            diag += cm.counts[i][i];
        }
        assert_eq!(diag, 18);
        for class in 0..4 {
            assert_eq!(cm.precision(class), Some(1.0));
            assert_eq!(cm.recall(class), Some(1.0));
        }
    }

    #[test]
    fn confusion_all_middle_predicted_high() {
        let gt: PatchGrid = [[Grade::Middle; 3]; 3];
        let pred: PatchGrid = [[Grade::High; 3]; 3];
        let cm = patch_confusion(&[pred], &[gt]).unwrap();
        assert_eq!(cm.counts[Grade::Middle.index()][Grade::High.index()], 9);
        assert_eq!(cm.recall(Grade::Middle.index()), Some(0.0));
        assert_eq!(cm.precision(Grade::High.index()), Some(0.0));
        assert_eq!(cm.precision(Grade::None.index()), None);
        assert_eq!(cm.recall(Grade::None.index()), None);
    }

    #[test]
    fn confusion_matches_brute_force_tally() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rand_grid = |rng: &mut ChaCha8Rng| -> PatchGrid {
            let mut g = [[Grade::None; 3]; 3];
            for r in 0..3 {
                for c in 0..3 {
                    g[r][c] = GRADES[rng.random_range(0..4usize)];
                }
            }
            g
        };
        let preds: Vec<PatchGrid> = (0..20).map(|_| rand_grid(&mut rng)).collect();
        let gts: Vec<PatchGrid> = (0..20).map(|_| rand_grid(&mut rng)).collect();
        let cm = patch_confusion(&preds, &gts).unwrap();
        // independent counting pass
        let mut manual = [[0u64; 4]; 4];
        for k in 0..20 {
            for r in 0..3 {
                for c in 0..3 {
                    manual[gts[k][r][c].index()][preds[k][r][c].index()] += 1;
                }
            }
        }
        assert_eq!(cm.counts, manual);
        assert_eq!(cm.total(), 9 * 20);
    }

    #[test]
    fn threshold_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let prob = Array2::<f64>::from_shape_simple_fn((16, 16), || rng.random::<f64>());
        let mut prev = u64::MAX;
        for t in sweep_thresholds() {
            let count: u64 = binarize(&prob, t)
                .unwrap()
                .iter()
                .map(|&v| v as u64)
                .sum();
            assert!(count <= prev);
            prev = count;
        }
    }

    #[test]
    fn sweep_perfect_prediction_is_all_ones() {
        let gt = Array2::<u8>::from_shape_fn((8, 8), |(r, c)| u8::from((r + c) % 3 == 0));
        let prob = gt.mapv(|v| v as f64);
        let res = threshold_sweep(&[prob], &[gt]).unwrap();
        for (_, d, i) in &res.rows {
            assert_eq!(*d, 1.0);
            assert_eq!(*i, 1.0);
        }
        assert_eq!(res.overall_dice, 1.0);
        assert_eq!(res.overall_iou, 1.0);
    }
}
