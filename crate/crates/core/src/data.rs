//! Ground-truth data model, the synthetic scale-variation generator and
//! dataset scale statistics.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boxes::{intersection, BBox};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    /// Record id as found in (or written to) annotation files.
    pub id: u64,
    pub bbox: BBox,
    /// Index into [`Dataset::categories`].
    pub category_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: u64,
    pub width: usize,
    pub height: usize,
    pub file_name: String,
    /// `[3, height, width]` in `[0, 1]`; empty when loaded without pixels.
    pub pixels: Tensor<f32>,
    pub annotations: Vec<Annotation>,
}

impl ImageSample {
    pub fn has_pixels(&self) -> bool {
        self.pixels.shape() == [3, self.height, self.width]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Category {
    /// Id used in annotation files.
    pub id: i64,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<ImageSample>,
    pub categories: Vec<Category>,
}

impl Dataset {
    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.categories.is_empty() {
            return Err(Error::Invalid("dataset needs at least one category".into()));
        }
        let mut ids: Vec<u64> = self.samples.iter().map(|s| s.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Invalid("duplicate image ids".into()));
        }
        for s in &self.samples {
            for a in &s.annotations {
                if a.category_id >= self.categories.len() {
                    return Err(Error::Invalid(format!(
                        "annotation {} has category index {} outside [0, {})",
                        a.id,
                        a.category_id,
                        self.categories.len()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Synthetic dataset description.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_images: usize,
    pub width: usize,
    pub height: usize,
    pub num_categories: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    /// Linear object size range in pixels, sampled log-uniformly.
    pub scale_min: f64,
    pub scale_max: f64,
    /// Largest aspect ratio (w/h or h/w) of sampled objects.
    pub max_aspect: f64,
    /// When non-empty, every image gets exactly one square object per entry
    /// with this side length, ignoring the count and scale ranges.
    pub forced_scales: Vec<f64>,
    /// Amplitude of background clutter.
    pub background_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_images: 64,
            width: 128,
            height: 128,
            num_categories: 10,
            objects_min: 2,
            objects_max: 8,
            scale_min: 8.0,
            scale_max: 64.0,
            max_aspect: 1.5,
            forced_scales: Vec::new(),
            background_noise: 0.08,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.height == 0 {
            return err("image size must be positive".into());
        }
        if self.num_categories == 0 {
            return err("need at least one category".into());
        }
        if self.objects_min > self.objects_max {
            return err(format!("objects_min {} > objects_max {}", self.objects_min, self.objects_max));
        }
        if !(self.scale_min > 0.0) || self.scale_min > self.scale_max {
            return err(format!("invalid scale range [{}, {}]", self.scale_min, self.scale_max));
        }
        let side = self.width.min(self.height) as f64;
        if self.scale_max * libm::sqrt(self.max_aspect) > side {
            return err(format!("scale_max {} does not fit a {}x{} image", self.scale_max, self.width, self.height));
        }
        if !(self.max_aspect >= 1.0) {
            return err(format!("max_aspect {} must be >= 1", self.max_aspect));
        }
        if let Some(&s) = self.forced_scales.iter().find(|&&s| !(s >= 1.0) || s > side) {
            return err(format!("forced scale {s} does not fit the image"));
        }
        let row: f64 = self.forced_scales.iter().map(|s| s + 2.0).sum::<f64>() - 2.0;
        if row > self.width as f64 {
            return err(format!("forced scales need a {row}-pixel row, image is {} wide", self.width));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Rect,
    Ellipse,
    Diamond,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Pattern {
    Solid,
    Stripes,
    Checker,
    Rings,
}

// Category-specific palette; the second colour fills the pattern's odd cells.
const PALETTE: [([f32; 3], [f32; 3]); 10] = [
    ([0.90, 0.15, 0.15], [0.95, 0.85, 0.20]),
    ([0.15, 0.35, 0.90], [0.85, 0.90, 0.95]),
    ([0.10, 0.75, 0.25], [0.05, 0.20, 0.05]),
    ([0.95, 0.55, 0.05], [0.20, 0.10, 0.05]),
    ([0.65, 0.20, 0.80], [0.95, 0.95, 0.95]),
    ([0.05, 0.80, 0.80], [0.80, 0.10, 0.40]),
    ([0.95, 0.95, 0.95], [0.10, 0.10, 0.10]),
    ([0.55, 0.35, 0.15], [0.95, 0.75, 0.45]),
    ([0.95, 0.40, 0.70], [0.30, 0.05, 0.20]),
    ([0.20, 0.20, 0.25], [0.90, 0.90, 0.30]),
];

fn category_style(c: usize) -> (Shape, Pattern, [f32; 3], [f32; 3], f64) {
    let shape = [Shape::Rect, Shape::Ellipse, Shape::Diamond][c % 3];
    let pattern = [Pattern::Stripes, Pattern::Checker, Pattern::Solid, Pattern::Rings][c % 4];
    let (a, b) = PALETTE[c % PALETTE.len()];
    // cycles across the object, in normalised coordinates
    let freq = 2.0 + (c / 4) as f64;
    (shape, pattern, a, b, freq)
}

pub fn category_name(c: usize) -> String {
    let (shape, pattern, ..) = category_style(c);
    format!("{shape:?}-{pattern:?}-{c}").to_lowercase()
}

fn inside(shape: Shape, u: f64, v: f64) -> bool {
    let (du, dv) = (u - 0.5, v - 0.5);
    match shape {
        Shape::Rect => true,
        Shape::Ellipse => du * du + dv * dv <= 0.25,
        Shape::Diamond => du.abs() + dv.abs() <= 0.5,
    }
}

fn pattern_odd(pattern: Pattern, u: f64, v: f64, freq: f64) -> bool {
    let fl = |x: f64| libm::floor(x) as i64;
    match pattern {
        Pattern::Solid => false,
        Pattern::Stripes => fl((u + v) * freq) % 2 != 0,
        Pattern::Checker => (fl(u * freq) + fl(v * freq)) % 2 != 0,
        Pattern::Rings => {
            let r = libm::sqrt((u - 0.5) * (u - 0.5) + (v - 0.5) * (v - 0.5));
            fl(r * 2.0 * freq) % 2 != 0
        }
    }
}

fn render_background(rng: &mut ChaCha8Rng, cfg: &SynthConfig, px: &mut [f32]) {
    let (w, h) = (cfg.width, cfg.height);
    let base: [f32; 3] = [rng.gen_range(0.3..0.6), rng.gen_range(0.3..0.6), rng.gen_range(0.3..0.6)];
    let gx: f32 = rng.gen_range(-0.15..0.15);
    let gy: f32 = rng.gen_range(-0.15..0.15);
    let amp = cfg.background_noise as f32;
    for y in 0..h {
        for x in 0..w {
            let ramp = gx * (x as f32 / w as f32 - 0.5) + gy * (y as f32 / h as f32 - 0.5);
            let n: f32 = if amp > 0.0 { rng.gen_range(-amp..=amp) } else { 0.0 };
            for c in 0..3 {
                px[(c * h + y) * w + x] = (base[c] + ramp + n).clamp(0.0, 1.0);
            }
        }
    }
}

fn render_object(px: &mut [f32], w: usize, h: usize, b: &BBox, category: usize) {
    let (shape, pattern, ca, cb, freq) = category_style(category);
    let (x1, y1) = (b.x1(), b.y1());
    let x_lo = libm::floor(x1).max(0.0) as usize;
    let y_lo = libm::floor(y1).max(0.0) as usize;
    let x_hi = (libm::ceil(b.x2()) as usize).min(w);
    let y_hi = (libm::ceil(b.y2()) as usize).min(h);
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let u = (x as f64 + 0.5 - x1) / b.width;
            let v = (y as f64 + 0.5 - y1) / b.height;
            if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) || !inside(shape, u, v) {
                continue;
            }
            let col = if pattern_odd(pattern, u, v, freq) { cb } else { ca };
            for c in 0..3 {
                px[(c * h + y) * w + x] = col[c];
            }
        }
    }
}

fn sample_size(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> (f64, f64) {
    let ls = rng.gen_range(libm::log(cfg.scale_min)..=libm::log(cfg.scale_max));
    let s = libm::exp(ls);
    let la = libm::log(cfg.max_aspect);
    let a = if la > 0.0 { libm::exp(rng.gen_range(-la..=la)) } else { 1.0 };
    let w = libm::round(s * libm::sqrt(a)).max(2.0);
    let h = libm::round(s / libm::sqrt(a)).max(2.0);
    (w, h)
}

fn place(rng: &mut ChaCha8Rng, cfg: &SynthConfig, w: f64, h: f64, placed: &[BBox]) -> Option<BBox> {
    let max_x = cfg.width as f64 - w;
    let max_y = cfg.height as f64 - h;
    if max_x < 0.0 || max_y < 0.0 {
        return None;
    }
    for _ in 0..64 {
        let x = libm::floor(rng.gen_range(0.0..=max_x));
        let y = libm::floor(rng.gen_range(0.0..=max_y));
        let b = BBox::from_xywh(x, y, w, h).ok()?;
        // one pixel of clearance keeps rendered shapes disjoint
        let grown = BBox { width: b.width + 2.0, height: b.height + 2.0, ..b };
        if placed.iter().all(|p| intersection(&grown, p) == 0.0) {
            return Some(b);
        }
    }
    None
}

/// Every forced object, always: random placement with restarts, else a
/// left-to-right row, which validation guarantees to fit.
fn forced_layout(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Vec<BBox> {
    for _ in 0..16 {
        let mut placed: Vec<BBox> = Vec::new();
        for &s in &cfg.forced_scales {
            match place(rng, cfg, s, s, &placed) {
                Some(b) => placed.push(b),
                None => break,
            }
        }
        if placed.len() == cfg.forced_scales.len() {
            return placed;
        }
    }
    let mut x = 0.0;
    cfg.forced_scales
        .iter()
        .map(|&s| {
            let b = BBox::from_xywh(x, 0.0, s, s).expect("validated forced scale");
            x += s + 2.0;
            b
        })
        .collect()
}

fn generate_image(cfg: &SynthConfig, seed: u64, index: usize, next_ann_id: &mut u64) -> ImageSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    let (w, h) = (cfg.width, cfg.height);
    let mut px = alloc::vec![0f32; 3 * w * h];
    render_background(&mut rng, cfg, &mut px);

    let mut annotations = Vec::new();
    let mut add = |b: BBox, category: usize, px: &mut [f32]| {
        render_object(px, w, h, &b, category);
        annotations.push(Annotation { id: *next_ann_id, bbox: b, category_id: category });
        *next_ann_id += 1;
    };
    if cfg.forced_scales.is_empty() {
        let n = rng.gen_range(cfg.objects_min..=cfg.objects_max);
        let sizes: Vec<(f64, f64)> = (0..n).map(|_| sample_size(&mut rng, cfg)).collect();
        let mut placed: Vec<BBox> = Vec::new();
        for (bw, bh) in sizes {
            let category = rng.gen_range(0..cfg.num_categories);
            if let Some(b) = place(&mut rng, cfg, bw, bh, &placed) {
                add(b, category, &mut px);
                placed.push(b);
            } else {
                log::debug!("image {index}: could not place a {bw}x{bh} object");
            }
        }
    } else {
        let cats: Vec<usize> = cfg.forced_scales.iter().map(|_| rng.gen_range(0..cfg.num_categories)).collect();
        for (b, c) in forced_layout(&mut rng, cfg).into_iter().zip(cats) {
            add(b, c, &mut px);
        }
    }
    ImageSample {
        id: index as u64 + 1,
        width: w,
        height: h,
        file_name: format!("{:06}.png", index + 1),
        pixels: Tensor::from_vec(&[3, h, w], px).expect("pixel buffer"),
        annotations,
    }
}

/// Deterministic synthetic dataset: a pure function of `(cfg, seed)`.
///
/// Objects are filled shapes whose pattern is defined in object-normalised
/// coordinates, so a category looks the same at every scale. Annotation
/// boxes are exactly the rendered shapes' bounding rectangles, on integer
/// pixel boundaries, and never overlap.
pub fn generate_synthetic(cfg: &SynthConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut next_ann_id = 1;
    let samples = (0..cfg.num_images).map(|i| generate_image(cfg, seed, i, &mut next_ann_id)).collect();
    let categories =
        (0..cfg.num_categories).map(|c| Category { id: c as i64, name: category_name(c) }).collect();
    Ok(Dataset { samples, categories })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ScaleGrouping {
    /// Ratio over all annotated objects of an image.
    #[default]
    AllObjects,
    /// Largest within-category ratio of an image.
    PerCategory,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaleStats {
    pub fraction_gt_2x: f64,
    /// One entry per counted image, in dataset order.
    pub per_image_ratio: Vec<f64>,
}

fn ratio_of(boxes: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut lo, mut hi, mut n) = (f64::INFINITY, 0.0f64, 0);
    for a in boxes {
        lo = lo.min(a);
        hi = hi.max(a);
        n += 1;
    }
    (n >= 2).then(|| libm::sqrt(hi) / libm::sqrt(lo))
}

/// Share of images whose largest/smallest object scale ratio exceeds 2.
pub fn scale_variation_stats(dataset: &Dataset) -> ScaleStats {
    scale_variation_stats_by(dataset, ScaleGrouping::AllObjects)
}

pub fn scale_variation_stats_by(dataset: &Dataset, grouping: ScaleGrouping) -> ScaleStats {
    let mut ratios = Vec::new();
    for s in &dataset.samples {
        let r = match grouping {
            ScaleGrouping::AllObjects => ratio_of(s.annotations.iter().map(|a| a.bbox.area())),
            ScaleGrouping::PerCategory => {
                let mut cats: Vec<usize> = s.annotations.iter().map(|a| a.category_id).collect();
                cats.sort_unstable();
                cats.dedup();
                cats.into_iter()
                    .filter_map(|c| {
                        ratio_of(s.annotations.iter().filter(|a| a.category_id == c).map(|a| a.bbox.area()))
                    })
                    .reduce(f64::max)
            }
        };
        ratios.extend(r);
    }
    let over = ratios.iter().filter(|&&r| r > 2.0).count();
    let fraction_gt_2x = if ratios.is_empty() { 0.0 } else { over as f64 / ratios.len() as f64 };
    ScaleStats { fraction_gt_2x, per_image_ratio: ratios }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn sample_with(areas: &[(f64, usize)]) -> ImageSample {
        ImageSample {
            id: 0,
            width: 100,
            height: 100,
            file_name: String::new(),
            pixels: Tensor::zeros(&[0]),
            annotations: areas
                .iter()
                .enumerate()
                .map(|(i, &(s, c))| Annotation {
                    id: i as u64,
                    bbox: BBox::new(50.0, 50.0, s, s).unwrap(),
                    category_id: c,
                })
                .collect(),
        }
    }

    fn ds(samples: Vec<ImageSample>) -> Dataset {
        let mut samples = samples;
        for (i, s) in samples.iter_mut().enumerate() {
            s.id = i as u64;
        }
        Dataset { samples, categories: (0..3).map(|c| Category { id: c, name: String::new() }).collect() }
    }

    #[test]
    fn stats_count_ratios() {
        let d = ds(vec![sample_with(&[(3.0, 0), (9.0, 0)]), sample_with(&[(2.0, 0), (3.0, 1)])]);
        let st = scale_variation_stats(&d);
        assert_eq!(st.per_image_ratio, vec![3.0, 1.5]);
        assert_eq!(st.fraction_gt_2x, 0.5);
    }

    #[test]
    fn stats_exclude_single_object_images() {
        let d = ds(vec![sample_with(&[(3.0, 0)]), sample_with(&[]), sample_with(&[(5.0, 1)])]);
        let st = scale_variation_stats(&d);
        assert_eq!(st.fraction_gt_2x, 0.0);
        assert!(st.per_image_ratio.is_empty());
        assert_eq!(scale_variation_stats(&ds(vec![])).fraction_gt_2x, 0.0);
    }

    #[test]
    fn per_category_grouping_ignores_cross_category_spread() {
        let d = ds(vec![sample_with(&[(2.0, 0), (20.0, 1), (3.0, 0)])]);
        assert_eq!(scale_variation_stats(&d).per_image_ratio, vec![10.0]);
        let pc = scale_variation_stats_by(&d, ScaleGrouping::PerCategory);
        assert_eq!(pc.per_image_ratio, vec![1.5]);
        assert_eq!(pc.fraction_gt_2x, 0.0);
    }

    #[test]
    fn invalid_ranges_rejected() {
        let cfg = SynthConfig { objects_min: 5, objects_max: 2, ..Default::default() };
        assert!(matches!(generate_synthetic(&cfg, 1), Err(Error::Config(_))));
        let cfg = SynthConfig { scale_min: 30.0, scale_max: 10.0, ..Default::default() };
        assert!(matches!(generate_synthetic(&cfg, 1), Err(Error::Config(_))));
    }

    #[test]
    fn zero_objects_gives_empty_annotations() {
        let cfg = SynthConfig { num_images: 4, objects_min: 0, objects_max: 0, ..Default::default() };
        let d = generate_synthetic(&cfg, 3).unwrap();
        assert_eq!(d.samples.len(), 4);
        assert!(d.samples.iter().all(|s| s.annotations.is_empty()));
    }

    #[test]
    fn forced_geometry_ratio() {
        let cfg = SynthConfig { num_images: 6, forced_scales: vec![8.0, 40.0], ..Default::default() };
        let d = generate_synthetic(&cfg, 11).unwrap();
        let st = scale_variation_stats(&d);
        assert_eq!(st.per_image_ratio, vec![5.0; 6]);
        assert_eq!(st.fraction_gt_2x, 1.0);
    }

    #[test]
    fn rendered_pixels_match_annotation_boxes() {
        // Rectangles fill their box exactly: every pixel inside differs from
        // the background pattern only through object colours.
        let cfg = SynthConfig { num_images: 8, num_categories: 1, background_noise: 0.0, ..Default::default() };
        let d = generate_synthetic(&cfg, 5).unwrap();
        for s in &d.samples {
            for a in &s.annotations {
                let b = a.bbox;
                assert_eq!(b.x1().fract(), 0.0);
                assert!(b.x1() >= 0.0 && b.y1() >= 0.0 && b.x2() <= 128.0 && b.y2() <= 128.0);
                let (ca, cb) = PALETTE[0];
                for y in b.y1() as usize..b.y2() as usize {
                    for x in b.x1() as usize..b.x2() as usize {
                        let r = s.pixels.data()[y * s.width + x];
                        assert!(r == ca[0] || r == cb[0], "pixel ({x},{y}) not object-coloured");
                    }
                }
            }
        }
    }
}
