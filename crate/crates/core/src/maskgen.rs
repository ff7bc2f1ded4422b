//! Free-form brush-stroke masks with a controlled masked-area ratio.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::image::{Mask, MIN_EDGE};
use crate::rng::SeededRng;

/// Diagonal of a 512x512 image; stroke sizes are given at this scale.
const REFERENCE_DIAGONAL: f64 = 724.077;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskSpec {
    pub ratio_min: f64,
    pub ratio_max: f64,
    /// Strokes drawn into one attempt before it is abandoned and restarted.
    pub max_strokes: usize,
    /// Brush width in pixels at the 512x512 reference scale.
    pub brush_width_range: (f64, f64),
    /// Segments per stroke.
    pub vertex_count_range: (usize, usize),
    /// Segment length in pixels at the reference scale.
    pub segment_length_range: (f64, f64),
    /// Largest turn between consecutive segments, radians.
    pub max_turn: f64,
    /// Rejected strokes and abandoned attempts allowed before giving up.
    pub budget: usize,
    pub seed: u64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            ratio_min: 0.2,
            ratio_max: 0.3,
            max_strokes: 64,
            brush_width_range: (12.0, 40.0),
            vertex_count_range: (1, 12),
            segment_length_range: (20.0, 100.0),
            max_turn: std::f64::consts::FRAC_PI_2,
            budget: 100,
            seed: 0,
        }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            0.0 < self.ratio_min && self.ratio_min <= self.ratio_max && self.ratio_max < 1.0,
            "mask ratio window [{}, {}] must satisfy 0 < min <= max < 1",
            self.ratio_min,
            self.ratio_max
        );
        let (w0, w1) = self.brush_width_range;
        ensure!(0.0 < w0 && w0 <= w1, "brush width range must be positive and ordered");
        let (v0, v1) = self.vertex_count_range;
        ensure!(1 <= v0 && v0 <= v1, "vertex count range must be at least 1 and ordered");
        let (l0, l1) = self.segment_length_range;
        ensure!(0.0 < l0 && l0 <= l1, "segment length range must be positive and ordered");
        ensure!(self.max_strokes >= 1, "max_strokes must be at least 1");
        Ok(())
    }
}

pub fn mask_ratio(m: &Mask) -> f64 {
    m.count() as f64 / (m.height() * m.width()) as f64
}

/// A polyline brush stroke in pixel coordinates.
#[derive(Clone, Debug)]
struct Stroke {
    points: Vec<(f64, f64)>,
    radius: f64,
}

impl Stroke {
    fn sample(h: usize, w: usize, spec: &MaskSpec, rng: &mut SeededRng) -> Self {
        let scale = ((h * h + w * w) as f64).sqrt() / REFERENCE_DIAGONAL;
        let width = rng.range_f64(spec.brush_width_range.0, spec.brush_width_range.1) * scale;
        let radius = (width / 2.0).max(1.0);
        let segments = rng.range_usize(spec.vertex_count_range.0, spec.vertex_count_range.1);
        let (xmax, ymax) = (w as f64, h as f64);
        let mut p = (rng.range_f64(0.0, xmax), rng.range_f64(0.0, ymax));
        let mut angle = rng.range_f64(0.0, std::f64::consts::TAU);
        let mut points = vec![p];
        for _ in 0..segments {
            angle += rng.range_f64(-spec.max_turn, spec.max_turn);
            let len = (rng.range_f64(spec.segment_length_range.0, spec.segment_length_range.1)
                * scale)
                .max(1.0);
            // Clamping keeps the stroke inside the frame, so it stays connected.
            p = (
                (p.0 + len * angle.cos()).clamp(0.0, xmax),
                (p.1 + len * angle.sin()).clamp(0.0, ymax),
            );
            points.push(p);
        }
        Self { points, radius }
    }

    /// Stamps the first `segments` segments as overlapping disks.
    fn render(&self, segments: usize, target: &mut Mask) {
        let pts = &self.points[..=segments.min(self.points.len() - 1)];
        stamp(target, pts[0], self.radius);
        for pair in pts.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let dist = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
            let steps = (dist / 0.5).ceil().max(1.0) as usize;
            for s in 1..=steps {
                let t = s as f64 / steps as f64;
                stamp(target, (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1)), self.radius);
            }
        }
    }

    fn segments(&self) -> usize {
        self.points.len() - 1
    }
}

/// Sets every pixel whose center lies within `r` of `c = (x, y)`.
fn stamp(m: &mut Mask, c: (f64, f64), r: f64) {
    let (h, w) = m.dims();
    let y0 = (c.1 - r - 0.5).floor().max(0.0) as usize;
    let y1 = ((c.1 + r - 0.5).ceil().max(0.0) as usize).min(h - 1);
    let x0 = (c.0 - r - 0.5).floor().max(0.0) as usize;
    let x1 = ((c.0 + r - 0.5).ceil().max(0.0) as usize).min(w - 1);
    for y in y0..=y1 {
        let dy = y as f64 + 0.5 - c.1;
        for x in x0..=x1 {
            let dx = x as f64 + 0.5 - c.0;
            if dx * dx + dy * dy <= r * r {
                m.set(y, x, true);
            }
        }
    }
}

/// Draws strokes until the masked fraction enters `[ratio_min, ratio_max]`.
///
/// A stroke that would overshoot is shortened to its longest in-window prefix;
/// if even one segment overshoots, the stroke is rejected and a new one drawn.
pub fn generate_freeform_mask(
    h: usize,
    w: usize,
    spec: &MaskSpec,
    rng: &mut SeededRng,
) -> Result<Mask> {
    ensure!(h >= MIN_EDGE && w >= MIN_EDGE, "mask dims {h}x{w} below {MIN_EDGE}");
    spec.validate()?;
    let total = (h * w) as f64;
    let lo = (spec.ratio_min * total).ceil() as usize;
    let hi = (spec.ratio_max * total).floor() as usize;
    ensure!(lo <= hi, "no pixel count at {h}x{w} falls inside the ratio window");

    let mut failures = 0;
    let mut mask = Mask::zeros(h, w);
    let mut strokes = 0;
    while failures <= spec.budget {
        if strokes == spec.max_strokes {
            mask = Mask::zeros(h, w);
            strokes = 0;
            failures += 1;
            continue;
        }
        let stroke = Stroke::sample(h, w, spec, rng);
        let mut accepted = None;
        for segs in (0..=stroke.segments()).rev() {
            let mut trial = mask.clone();
            stroke.render(segs, &mut trial);
            if trial.count() <= hi {
                accepted = Some(trial);
                break;
            }
        }
        match accepted {
            Some(next) => {
                mask = next;
                strokes += 1;
                if mask.count() >= lo {
                    return Ok(mask);
                }
            }
            None => failures += 1,
        }
    }
    Err(Error::MaskBudget {
        budget: spec.budget,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Counts 4-connected components of set pixels.
    fn components(m: &Mask) -> usize {
        let (h, w) = m.dims();
        let mut seen = vec![false; h * w];
        let mut count = 0;
        for start in 0..h * w {
            if m.data()[start] == 0 || seen[start] {
                continue;
            }
            count += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(i) = stack.pop() {
                let (y, x) = (i / w, i % w);
                let mut push = |j: usize| {
                    if m.data()[j] == 1 && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                };
                if y > 0 {
                    push(i - w);
                }
                if y + 1 < h {
                    push(i + w);
                }
                if x > 0 {
                    push(i - 1);
                }
                if x + 1 < w {
                    push(i + 1);
                }
            }
        }
        count
    }

    #[test]
    fn ratio_of_simple_masks() {
        assert_eq!(mask_ratio(&Mask::zeros(4, 4)), 0.0);
        assert_eq!(mask_ratio(&Mask::ones(4, 4)), 1.0);
        let mut m = Mask::zeros(4, 4);
        for i in 0..4 {
            m.set(i, i, true);
        }
        assert_eq!(mask_ratio(&m), 0.25);
    }

    #[test]
    fn single_strokes_are_four_connected() {
        for seed in 0..200 {
            let mut rng = SeededRng::new(seed);
            let (h, w) = [(128, 128), (37, 61), (8, 8), (256, 96)][seed as usize % 4];
            let stroke = Stroke::sample(h, w, &MaskSpec::default(), &mut rng);
            let mut m = Mask::zeros(h, w);
            stroke.render(stroke.segments(), &mut m);
            assert_eq!(components(&m), 1, "seed {seed}");
        }
    }

    #[test]
    fn generated_masks_land_in_the_window() {
        let spec = MaskSpec::default();
        for seed in 0..50 {
            for &(h, w) in &[(256, 256), (37, 61), (8, 8), (64, 200)] {
                let m = generate_freeform_mask(h, w, &spec, &mut SeededRng::new(seed)).unwrap();
                let r = mask_ratio(&m);
                assert!((0.2..=0.3).contains(&r), "{h}x{w} seed {seed}: {r}");
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = MaskSpec::default();
        let a = generate_freeform_mask(96, 64, &spec, &mut SeededRng::new(9)).unwrap();
        let b = generate_freeform_mask(96, 64, &spec, &mut SeededRng::new(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unreachable_window_reports_budget() {
        let spec = MaskSpec {
            ratio_min: 0.001,
            ratio_max: 0.0011,
            brush_width_range: (200.0, 200.0),
            budget: 5,
            ..MaskSpec::default()
        };
        let err = generate_freeform_mask(128, 128, &spec, &mut SeededRng::new(1)).unwrap_err();
        assert!(matches!(err, Error::MaskBudget { budget: 5 }));
        assert!(err.to_string().contains('5'));
    }

    #[test]
    fn invalid_windows_are_rejected() {
        let bad = MaskSpec {
            ratio_min: 0.4,
            ratio_max: 0.3,
            ..MaskSpec::default()
        };
        assert!(generate_freeform_mask(64, 64, &bad, &mut SeededRng::new(0)).is_err());
    }
}
