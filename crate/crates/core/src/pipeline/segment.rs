//! Poster segmentation by recursive whitespace-gutter splitting.
//!
//! Conference posters arrange content blocks separated by low-ink gutters.
//! Intensity-variance projection profiles find those gutters: a row (or
//! column) crossing only background has near-zero variance, one crossing
//! content does not. Each region is split at the center of its widest
//! qualifying gutter, recursing until regions are gutter-free or too small.
//! Resulting regions are returned in reading order.

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentParams {
    /// Posters with a smaller minimum side are rejected outright.
    pub min_poster_side: u32,
    /// Regions below this pixel count are never subdivided further.
    pub min_region_pixels: u64,
    /// Hard cap on emitted regions.
    pub max_regions: usize,
    /// A gutter must span at least this fraction of the region side.
    pub gutter_min_frac: f64,
    /// Rows/columns with intensity variance below this are background.
    pub variance_threshold: f64,
}

impl Default for SegmentParams {
    fn default() -> Self {
        SegmentParams {
            min_poster_side: 1000,
            min_region_pixels: 250_000,
            max_regions: 12,
            gutter_min_frac: 0.02,
            variance_threshold: 25.0,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SegmentError {
    #[error("poster min side {side} is below the {required} px minimum")]
    TooSmall { side: u32, required: u32 },
    #[error("poster is blank (no content rows or columns)")]
    Blank,
    #[error("poster has a single content block; not a multi-region layout")]
    SingleRegion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CutAxis {
    /// Cut runs left-right at `position` = y; splits top from bottom.
    Horizontal,
    /// Cut runs top-bottom at `position` = x; splits left from right.
    Vertical,
}

/// One split the recursion made, in full-poster coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CutLine {
    pub axis: CutAxis,
    pub position: u32,
}

/// A content region: its bounds in poster coordinates and the cropped image.
#[derive(Debug, Clone, PartialEq)]
pub struct PosterRegion {
    pub bounds: BBox,
    pub image: RgbImage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    /// 2..=max_regions regions in reading order (top-to-bottom, then
    /// left-to-right).
    pub regions: Vec<PosterRegion>,
    /// Every cut made, in the order the recursion made them.
    pub cuts: Vec<CutLine>,
}

/// Grayscale plane with O(1) variance queries over sub-rectangle rows and
/// columns, via summed-area tables of intensity and squared intensity.
struct LumaPlane {
    width: usize,
    height: usize,
    /// (width+1) x (height+1) prefix sums.
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl LumaPlane {
    fn new(image: &RgbImage) -> Self {
        let width = image.width() as usize;
        let height = image.height() as usize;
        let stride = width + 1;
        let mut sum = vec![0.0; stride * (height + 1)];
        let mut sum_sq = vec![0.0; stride * (height + 1)];
        for y in 0..height {
            for x in 0..width {
                let p = image.get_pixel(x as u32, y as u32);
                let luma = 0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2]);
                let idx = (y + 1) * stride + (x + 1);
                sum[idx] = luma + sum[idx - 1] + sum[idx - stride] - sum[idx - stride - 1];
                sum_sq[idx] =
                    luma * luma + sum_sq[idx - 1] + sum_sq[idx - stride] - sum_sq[idx - stride - 1];
            }
        }
        LumaPlane {
            width,
            height,
            sum,
            sum_sq,
        }
    }

    fn rect(&self, table: &[f64], x1: usize, y1: usize, x2: usize, y2: usize) -> f64 {
        let stride = self.width + 1;
        table[y2 * stride + x2] - table[y1 * stride + x2] - table[y2 * stride + x1]
            + table[y1 * stride + x1]
    }

    /// Intensity variance over one row span `[x1, x2) x [y, y+1)`.
    fn row_variance(&self, y: usize, x1: usize, x2: usize) -> f64 {
        self.rect_variance(x1, y, x2, y + 1)
    }

    fn col_variance(&self, x: usize, y1: usize, y2: usize) -> f64 {
        self.rect_variance(x, y1, x + 1, y2)
    }

    fn rect_variance(&self, x1: usize, y1: usize, x2: usize, y2: usize) -> f64 {
        let n = ((x2 - x1) * (y2 - y1)) as f64;
        let s = self.rect(&self.sum, x1, y1, x2, y2);
        let s2 = self.rect(&self.sum_sq, x1, y1, x2, y2);
        (s2 / n - (s / n).powi(2)).max(0.0)
    }
}

/// Half-open region `[x1, x2) x [y1, y2)`.
#[derive(Debug, Clone, Copy)]
struct Rect {
    x1: usize,
    y1: usize,
    x2: usize,
    y2: usize,
}

impl Rect {
    fn width(&self) -> usize {
        self.x2 - self.x1
    }

    fn height(&self) -> usize {
        self.y2 - self.y1
    }

    fn pixels(&self) -> u64 {
        (self.width() * self.height()) as u64
    }
}

/// A maximal run of consecutive background rows or columns.
#[derive(Debug, Clone, Copy)]
struct Run {
    start: usize,
    end: usize,
}

impl Run {
    fn len(&self) -> usize {
        self.end - self.start
    }

    fn center(&self) -> usize {
        (self.start + self.end) / 2
    }
}

fn background_runs(flags: &[bool]) -> Vec<Run> {
    let mut runs = Vec::new();
    let mut start = None;
    for (i, &bg) in flags.iter().enumerate() {
        match (bg, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                runs.push(Run { start: s, end: i });
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push(Run {
            start: s,
            end: flags.len(),
        });
    }
    runs
}

/// Shrink a region to its content bounds by dropping background margins.
/// `None` when the region is entirely background.
fn trim_margins(plane: &LumaPlane, rect: Rect, threshold: f64) -> Option<Rect> {
    let row_bg: Vec<bool> = (rect.y1..rect.y2)
        .map(|y| plane.row_variance(y, rect.x1, rect.x2) < threshold)
        .collect();
    let first_row = row_bg.iter().position(|&bg| !bg)?;
    let last_row = row_bg.iter().rposition(|&bg| !bg).unwrap();
    let y1 = rect.y1 + first_row;
    let y2 = rect.y1 + last_row + 1;

    let col_bg: Vec<bool> = (rect.x1..rect.x2)
        .map(|x| plane.col_variance(x, y1, y2) < threshold)
        .collect();
    let first_col = col_bg.iter().position(|&bg| !bg)?;
    let last_col = col_bg.iter().rposition(|&bg| !bg).unwrap();
    Some(Rect {
        x1: rect.x1 + first_col,
        y1,
        x2: rect.x1 + last_col + 1,
        y2,
    })
}

/// The widest qualifying internal gutter of a trimmed region, if any.
fn widest_gutter(plane: &LumaPlane, rect: Rect, params: &SegmentParams) -> Option<CutLine> {
    let mut best: Option<(usize, CutLine)> = None;

    let min_h_gutter = ((rect.height() as f64) * params.gutter_min_frac).ceil() as usize;
    let row_bg: Vec<bool> = (rect.y1..rect.y2)
        .map(|y| plane.row_variance(y, rect.x1, rect.x2) < params.variance_threshold)
        .collect();
    for run in background_runs(&row_bg) {
        // Internal runs only; margins are handled by trimming.
        if run.start == 0 || run.end == row_bg.len() {
            continue;
        }
        if run.len() >= min_h_gutter.max(1) && best.map_or(true, |(len, _)| run.len() > len) {
            best = Some((
                run.len(),
                CutLine {
                    axis: CutAxis::Horizontal,
                    position: (rect.y1 + run.center()) as u32,
                },
            ));
        }
    }

    let min_v_gutter = ((rect.width() as f64) * params.gutter_min_frac).ceil() as usize;
    let col_bg: Vec<bool> = (rect.x1..rect.x2)
        .map(|x| plane.col_variance(x, rect.y1, rect.y2) < params.variance_threshold)
        .collect();
    for run in background_runs(&col_bg) {
        if run.start == 0 || run.end == col_bg.len() {
            continue;
        }
        if run.len() >= min_v_gutter.max(1) && best.map_or(true, |(len, _)| run.len() > len) {
            best = Some((
                run.len(),
                CutLine {
                    axis: CutAxis::Vertical,
                    position: (rect.x1 + run.center()) as u32,
                },
            ));
        }
    }

    best.map(|(_, cut)| cut)
}

/// Segment a poster into 2..=max_regions content regions. Blank and
/// single-block posters are rejected.
pub fn segment_poster(
    poster: &RgbImage,
    params: &SegmentParams,
) -> Result<Segmentation, SegmentError> {
    let side = poster.width().min(poster.height());
    if side < params.min_poster_side {
        return Err(SegmentError::TooSmall {
            side,
            required: params.min_poster_side,
        });
    }

    let plane = LumaPlane::new(poster);
    let full = Rect {
        x1: 0,
        y1: 0,
        x2: plane.width,
        y2: plane.height,
    };
    let root = trim_margins(&plane, full, params.variance_threshold).ok_or(SegmentError::Blank)?;

    let mut cuts = Vec::new();
    let mut leaves: Vec<Rect> = Vec::new();
    let mut queue = std::collections::VecDeque::from([root]);
    while let Some(rect) = queue.pop_front() {
        let splittable = rect.pixels() >= params.min_region_pixels
            && leaves.len() + queue.len() + 1 < params.max_regions;
        let cut = if splittable {
            widest_gutter(&plane, rect, params)
        } else {
            None
        };
        match cut {
            Some(line) => {
                cuts.push(line);
                let (a, b) = match line.axis {
                    CutAxis::Horizontal => {
                        let y = line.position as usize;
                        (Rect { y2: y, ..rect }, Rect { y1: y, ..rect })
                    }
                    CutAxis::Vertical => {
                        let x = line.position as usize;
                        (Rect { x2: x, ..rect }, Rect { x1: x, ..rect })
                    }
                };
                for half in [a, b] {
                    match trim_margins(&plane, half, params.variance_threshold) {
                        Some(trimmed) => queue.push_back(trimmed),
                        None => log::warn!("discarding blank half after cut at {line:?}"),
                    }
                }
            }
            None => leaves.push(rect),
        }
    }

    if leaves.len() < 2 {
        return Err(SegmentError::SingleRegion);
    }

    leaves.sort_by_key(|r| (r.y1, r.x1));
    let regions = leaves
        .into_iter()
        .map(|r| PosterRegion {
            bounds: BBox::new(r.x1 as i64, r.y1 as i64, r.x2 as i64, r.y2 as i64),
            image: image::imageops::crop_imm(
                poster,
                r.x1 as u32,
                r.y1 as u32,
                r.width() as u32,
                r.height() as u32,
            )
            .to_image(),
        })
        .collect();

    Ok(Segmentation { regions, cuts })
}


#[cfg(test)]
mod tests {
    use super::test_posters::*;
    use super::*;

    #[test]
    fn two_block_poster_splits_at_the_gutter_center() {
        let seg = segment_poster(&two_block_poster(), &SegmentParams::default()).unwrap();
        assert_eq!(seg.regions.len(), 2);
        assert_eq!(seg.cuts.len(), 1);
        let cut = seg.cuts[0];
        assert_eq!(cut.axis, CutAxis::Horizontal);
        assert!(
            (i64::from(cut.position) - 1200).abs() <= 5,
            "cut at {} expected near 1200",
            cut.position
        );
        // Reading order: top block first.
        assert!(seg.regions[0].bounds.y1 < seg.regions[1].bounds.y1);
        // Regions hug the content blocks.
        assert_eq!(seg.regions[0].bounds, BBox::new(50, 50, 1150, 1150));
        assert_eq!(seg.regions[1].bounds, BBox::new(50, 1250, 1150, 2350));
    }

    #[test]
    fn grid_poster_yields_four_regions_in_reading_order() {
        let seg = segment_poster(&grid_poster(), &SegmentParams::default()).unwrap();
        assert_eq!(seg.regions.len(), 4);
        let expected = [
            BBox::new(50, 50, 950, 700),
            BBox::new(1050, 50, 1950, 700),
            BBox::new(50, 800, 950, 1450),
            BBox::new(1050, 800, 1950, 1450),
        ];
        for (region, want) in seg.regions.iter().zip(expected) {
            assert_eq!(region.bounds, want);
        }
        for cut in &seg.cuts {
            match cut.axis {
                CutAxis::Horizontal => {
                    assert!((i64::from(cut.position) - 750).abs() <= 5, "{cut:?}")
                }
                CutAxis::Vertical => {
                    assert!((i64::from(cut.position) - 1000).abs() <= 5, "{cut:?}")
                }
            }
        }
    }

    #[test]
    fn blank_poster_is_rejected() {
        let img = RgbImage::from_pixel(1200, 1200, WHITE);
        assert_eq!(
            segment_poster(&img, &SegmentParams::default()),
            Err(SegmentError::Blank)
        );
    }

    #[test]
    fn single_block_poster_is_rejected() {
        let mut img = RgbImage::from_pixel(1200, 1200, WHITE);
        fill_block(&mut img, 100, 100, 1100, 1100);
        assert_eq!(
            segment_poster(&img, &SegmentParams::default()),
            Err(SegmentError::SingleRegion)
        );
    }

    #[test]
    fn small_poster_is_rejected() {
        let img = RgbImage::from_pixel(800, 2000, WHITE);
        assert_eq!(
            segment_poster(&img, &SegmentParams::default()),
            Err(SegmentError::TooSmall {
                side: 800,
                required: 1000
            })
        );
    }

    #[test]
    fn region_cap_limits_splitting() {
        let params = SegmentParams {
            max_regions: 3,
            ..SegmentParams::default()
        };
        let seg = segment_poster(&grid_poster(), &params).unwrap();
        assert!(seg.regions.len() <= 3);
        assert!(seg.regions.len() >= 2);
    }

    #[test]
    fn regions_cover_all_content_pixels() {
        let poster = grid_poster();
        let seg = segment_poster(&poster, &SegmentParams::default()).unwrap();
        let mut content = 0u64;
        let mut covered = 0u64;
        for (x, y, p) in poster.enumerate_pixels() {
            if *p != WHITE {
                content += 1;
                let inside = seg.regions.iter().any(|r| {
                    let b = r.bounds;
                    i64::from(x) >= b.x1
                        && i64::from(x) < b.x2
                        && i64::from(y) >= b.y1
                        && i64::from(y) < b.y2
                });
                if inside {
                    covered += 1;
                }
            }
        }
        assert!(covered as f64 >= 0.9 * content as f64);
    }

    #[test]
    fn tiny_regions_are_not_subdivided() {
        let params = SegmentParams {
            min_region_pixels: 10_000_000,
            ..SegmentParams::default()
        };
        // Every region is below the subdivision floor, so the root is never
        // split and the poster reads as a single block.
        assert_eq!(
            segment_poster(&grid_poster(), &params),
            Err(SegmentError::SingleRegion)
        );
    }
}
