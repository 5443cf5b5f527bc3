//! Foreground extraction: locates the largest bright-bordered axis-aligned
//! rectangle (the scan area frame in exported ultrasound captures) and
//! crops to its interior. Degenerate inputs fall back to the original image.

use crate::raster::Raster;

/// Candidate bright runs must span at least this many pixels.
const MIN_RUN: usize = 16;
/// Minimum rectangle side so the cropped interior stays >= 32 px.
const MIN_RECT_SIDE: usize = 34;
/// Fraction of perimeter pixels that must be bright to accept a rectangle.
const COVERAGE_THRESHOLD: f64 = 0.8;
/// Minimum intensity spread for detection to be attempted at all.
const MIN_CONTRAST: f64 = 16.0;
/// At most this many candidate rows/columns are paired up.
const MAX_CANDIDATES: usize = 64;

/// Result of [`extract_foreground`]. `fallback` is set when no confident
/// rectangle was found and the input is returned unchanged.
#[derive(Debug, Clone)]
pub struct Foreground {
    pub image: Raster,
    pub fallback: bool,
    /// Interior crop bounds `(y0, x0, y1, x1)` in the source image
    /// (exclusive ends), when a rectangle was detected.
    pub rect: Option<(usize, usize, usize, usize)>,
}

/// Crops the interior of the largest high-intensity-boundary rectangle.
/// Confidence is the fraction of the rectangle perimeter covered by bright
/// pixels; below [`COVERAGE_THRESHOLD`] the input is returned unchanged
/// with the fallback flag set.
pub fn extract_foreground(image: &Raster) -> Foreground {
    let fallback = || Foreground {
        image: image.clone(),
        fallback: true,
        rect: None,
    };
    let (h, w) = (image.height(), image.width());
    if h < MIN_RECT_SIDE || w < MIN_RECT_SIDE {
        return fallback();
    }

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut lum = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let v = image.luminance(y, x);
            lum[y * w + x] = v;
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if hi - lo < MIN_CONTRAST {
        return fallback();
    }
    let threshold = lo + 0.75 * (hi - lo);
    let bright: Vec<bool> = lum.iter().map(|&v| v >= threshold).collect();
    let at = |y: usize, x: usize| bright[y * w + x];

    let rows = candidate_lines(h, w, |i, j| at(i, j));
    let cols = candidate_lines(w, h, |i, j| at(j, i));
    if rows.len() < 2 || cols.len() < 2 {
        return fallback();
    }

    let mut best: Option<(usize, (usize, usize, usize, usize))> = None;
    for (ri, &r1) in rows.iter().enumerate() {
        for &r2 in &rows[ri + 1..] {
            if r2 - r1 + 1 < MIN_RECT_SIDE {
                continue;
            }
            for (ci, &c1) in cols.iter().enumerate() {
                for &c2 in &cols[ci + 1..] {
                    if c2 - c1 + 1 < MIN_RECT_SIDE {
                        continue;
                    }
                    if !(at(r1, c1) && at(r1, c2) && at(r2, c1) && at(r2, c2)) {
                        continue;
                    }
                    let area = (r2 - r1 + 1) * (c2 - c1 + 1);
                    if best.is_some_and(|(a, _)| a >= area) {
                        continue;
                    }
                    if perimeter_coverage(&bright, w, r1, c1, r2, c2) >= COVERAGE_THRESHOLD {
                        best = Some((area, (r1, c1, r2, c2)));
                    }
                }
            }
        }
    }

    match best {
        Some((_, (r1, c1, r2, c2))) => {
            let (y0, y1, x0, x1) = (r1 + 1, r2, c1 + 1, c2);
            Foreground {
                image: image.crop(y0, y1, x0, x1),
                fallback: false,
                rect: Some((y0, x0, y1, x1)),
            }
        }
        None => fallback(),
    }
}

/// Lines (rows or columns) containing a bright run of at least [`MIN_RUN`].
/// Returned with the longest runs first when over the candidate budget,
/// then restored to positional order.
fn candidate_lines(lines: usize, span: usize, bright: impl Fn(usize, usize) -> bool) -> Vec<usize> {
    let mut with_runs: Vec<(usize, usize)> = Vec::new();
    for i in 0..lines {
        let mut run = 0usize;
        let mut longest = 0usize;
        for j in 0..span {
            if bright(i, j) {
                run += 1;
                longest = longest.max(run);
            } else {
                run = 0;
            }
        }
        if longest >= MIN_RUN {
            with_runs.push((i, longest));
        }
    }
    if with_runs.len() > MAX_CANDIDATES {
        with_runs.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        with_runs.truncate(MAX_CANDIDATES);
        with_runs.sort_by_key(|&(i, _)| i);
    }
    with_runs.into_iter().map(|(i, _)| i).collect()
}

fn perimeter_coverage(
    bright: &[bool],
    w: usize,
    r1: usize,
    c1: usize,
    r2: usize,
    c2: usize,
) -> f64 {
    let mut covered = 0usize;
    let mut total = 0usize;
    for c in c1..=c2 {
        total += 2;
        covered += bright[r1 * w + c] as usize + bright[r2 * w + c] as usize;
    }
    for r in r1 + 1..r2 {
        total += 2;
        covered += bright[r * w + c1] as usize + bright[r * w + c2] as usize;
    }
    covered as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Draws a 1-px bright rectangle border with top-left corner (x, y).
    fn draw_border(img: &mut Raster, y: usize, x: usize, height: usize, width: usize, v: u8) {
        for xx in x..x + width {
            img.set(y, xx, 0, v);
            img.set(y + height - 1, xx, 0, v);
        }
        for yy in y..y + height {
            img.set(yy, x, 0, v);
            img.set(yy, x + width - 1, 0, v);
        }
    }

    #[test]
    fn crops_exactly_the_interior_of_a_bordered_rectangle() {
        // 300x300 black canvas, white-bordered 200x150 rectangle at (40, 60):
        // width 200 along x starting at column 40, height 150 along y at row 60.
        let mut img = Raster::filled(300, 300, 1, 0);
        draw_border(&mut img, 60, 40, 150, 200, 255);
        // distinctive interior so the crop can be checked against construction
        for y in 61..209 {
            for x in 41..239 {
                img.set(y, x, 0, ((y * 3 + x) % 200) as u8);
            }
        }
        let fg = extract_foreground(&img);
        assert!(!fg.fallback);
        assert_eq!(fg.rect, Some((61, 41, 209, 239)));
        assert_eq!(fg.image.height(), 148);
        assert_eq!(fg.image.width(), 198);
        for y in 0..148 {
            for x in 0..198 {
                assert_eq!(fg.image.get(y, x, 0), img.get(61 + y, 41 + x, 0));
            }
        }
    }

    #[test]
    fn uniform_image_falls_back_unchanged() {
        let img = Raster::filled(128, 128, 1, 97);
        let fg = extract_foreground(&img);
        assert!(fg.fallback);
        assert_eq!(fg.image, img);
    }

    #[test]
    fn larger_of_two_candidates_wins() {
        let mut img = Raster::filled(300, 300, 1, 0);
        draw_border(&mut img, 20, 20, 100, 100, 255);
        draw_border(&mut img, 180, 180, 50, 50, 255);
        let fg = extract_foreground(&img);
        assert!(!fg.fallback);
        assert_eq!(fg.rect, Some((21, 21, 119, 119)));
    }

    #[test]
    fn idempotent_on_own_output() {
        let mut img = Raster::filled(200, 200, 1, 30);
        draw_border(&mut img, 10, 10, 150, 170, 250);
        let once = extract_foreground(&img);
        assert!(!once.fallback);
        let twice = extract_foreground(&once.image);
        assert!(twice.fallback);
        assert_eq!(once.image, twice.image);
    }

    #[test]
    fn striped_layers_are_not_mistaken_for_frames() {
        // Horizontal bands (like tissue layers) must not trigger a crop:
        // bright rows exist but no bright columns.
        let mut img = Raster::filled(128, 128, 1, 40);
        for y in 30..40 {
            for x in 0..128 {
                img.set(y, x, 0, 220);
            }
        }
        let fg = extract_foreground(&img);
        assert!(fg.fallback);
    }
}
