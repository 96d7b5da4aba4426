//! Text-to-pixel rendering, question/page fusion and patch extraction.
//!
//! Everything the encoder sees passes through here: the question is drawn
//! with a fixed bitmap font, stacked on top of the page, shrunk until its
//! patch grid fits the budget and finally cut into square patches.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

pub const WHITE: u8 = 255;
pub const BLACK: u8 = 0;

/// 8-bit grayscale image, row-major, 0 = black and 255 = white.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RasterImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl std::fmt::Debug for RasterImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RasterImage")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl RasterImage {
    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        assert!(width >= 1 && height >= 1, "images must be at least 1x1");
        RasterImage {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn blank(width: usize, height: usize) -> Self {
        Self::filled(width, height, WHITE)
    }

    /// Wraps raw row-major pixels; `None` when the buffer does not match the size.
    pub fn from_pixels(width: usize, height: usize, pixels: Vec<u8>) -> Option<Self> {
        (width >= 1 && height >= 1 && pixels.len() == width * height).then_some(RasterImage {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: u8) {
        self.pixels[y * self.width + x] = value;
    }

    pub fn row(&self, y: usize) -> &[u8] {
        &self.pixels[y * self.width..(y + 1) * self.width]
    }

    /// Copies `src` with its top-left corner at `(x0, y0)`, clipping at the borders.
    pub fn blit(&mut self, src: &RasterImage, x0: usize, y0: usize) {
        if x0 >= self.width || y0 >= self.height {
            return;
        }
        let w = src.width.min(self.width - x0);
        let h = src.height.min(self.height - y0);
        for y in 0..h {
            let dst = (y0 + y) * self.width + x0;
            self.pixels[dst..dst + w].copy_from_slice(&src.row(y)[..w]);
        }
    }

    /// Number of patches in the grid covering this image.
    pub fn grid_len(&self, patch_size: usize) -> usize {
        grid_len(self.width, self.height, patch_size)
    }
}

fn grid_len(width: usize, height: usize, patch_size: usize) -> usize {
    width.div_ceil(patch_size) * height.div_ceil(patch_size)
}

/// Fixed-size monochrome bitmap font.
#[derive(Debug, Clone)]
pub struct GlyphFont {
    glyph_width: usize,
    glyph_height: usize,
    bitmaps: BTreeMap<char, Vec<bool>>,
    fallback: Vec<bool>,
}

impl GlyphFont {
    /// The embedded 8x16 font: the public-domain 8x8 basic Latin set with
    /// every row doubled. Covers all printable 7-bit characters.
    pub fn embedded() -> Self {
        const W: usize = 8;
        const H: usize = 16;
        let mut bitmaps = BTreeMap::new();
        for code in 0x20u8..=0x7e {
            let rows = font8x8::legacy::BASIC_LEGACY[code as usize];
            let mut mask = vec![false; W * H];
            for (r, bits) in rows.iter().enumerate() {
                for x in 0..W {
                    let on = bits & (1 << x) != 0;
                    mask[(2 * r) * W + x] = on;
                    mask[(2 * r + 1) * W + x] = on;
                }
            }
            bitmaps.insert(code as char, mask);
        }
        // Hollow box with a one-pixel inset.
        let mut fallback = vec![false; W * H];
        for y in 1..H - 1 {
            for x in 1..W - 1 {
                if y == 1 || y == H - 2 || x == 1 || x == W - 2 {
                    fallback[y * W + x] = true;
                }
            }
        }
        GlyphFont {
            glyph_width: W,
            glyph_height: H,
            bitmaps,
            fallback,
        }
    }

    pub fn glyph_width(&self) -> usize {
        self.glyph_width
    }

    pub fn glyph_height(&self) -> usize {
        self.glyph_height
    }

    /// Bit mask for `c`, or the fallback glyph if the font has none.
    pub fn glyph(&self, c: char) -> &[bool] {
        self.bitmaps.get(&c).unwrap_or(&self.fallback)
    }

    pub fn has_glyph(&self, c: char) -> bool {
        self.bitmaps.contains_key(&c)
    }
}

impl Default for GlyphFont {
    fn default() -> Self {
        Self::embedded()
    }
}

/// Renders `text` black-on-white, wrapping at character granularity whenever
/// the next glyph would cross `line_width`. `'\n'` forces a line break.
///
/// Empty input produces one blank line. Panics if `line_width` is narrower
/// than a single glyph.
pub fn render_text(text: &str, font: &GlyphFont, line_width: usize) -> RasterImage {
    let (gw, gh) = (font.glyph_width, font.glyph_height);
    assert!(
        line_width >= gw,
        "line width {line_width} is narrower than one glyph ({gw})"
    );

    let mut placements = Vec::with_capacity(text.len());
    let (mut x, mut line) = (0usize, 0usize);
    for c in text.chars() {
        if c == '\n' {
            x = 0;
            line += 1;
            continue;
        }
        if x + gw > line_width {
            x = 0;
            line += 1;
        }
        placements.push((c, x, line));
        x += gw;
    }

    let mut img = RasterImage::blank(line_width, (line + 1) * gh);
    for (c, x0, line) in placements {
        let mask = font.glyph(c);
        let y0 = line * gh;
        for gy in 0..gh {
            for gx in 0..gw {
                if mask[gy * gw + gx] {
                    img.set(x0 + gx, y0 + gy, BLACK);
                }
            }
        }
    }
    img
}

/// Stacks the question strip on top of the page. The narrower of the two is
/// right-padded with white.
pub fn concat_question_page(question: &RasterImage, page: &RasterImage) -> RasterImage {
    let width = question.width.max(page.width);
    let mut out = RasterImage::blank(width, question.height + page.height);
    out.blit(question, 0, 0);
    out.blit(page, 0, question.height);
    out
}

/// Scales `img` uniformly so that its patch grid holds at most `max_patches`
/// patches, picking the largest output size that fits.
///
/// The longer side is searched over integer lengths; the shorter one follows
/// by rounding to preserve the aspect ratio and is clamped to one pixel.
/// Images already within budget are returned unchanged (never upscaled).
pub fn resize_to_patch_budget(img: &RasterImage, patch_size: usize, max_patches: usize) -> RasterImage {
    assert!(max_patches >= 1, "patch budget must be at least 1");
    assert!(patch_size >= 1, "patch size must be at least 1");
    if img.grid_len(patch_size) <= max_patches {
        return img.clone();
    }
    let (w, h) = budget_dims(img.width, img.height, patch_size, max_patches);
    resize_bilinear(img, w, h)
}

/// Output dimensions chosen by [`resize_to_patch_budget`] for an image that
/// exceeds its budget.
pub fn budget_dims(width: usize, height: usize, patch_size: usize, max_patches: usize) -> (usize, usize) {
    let landscape = width >= height;
    let (long, short) = if landscape { (width, height) } else { (height, width) };
    let dims = |l: usize| -> (usize, usize) {
        let s = ((l as f64) * (short as f64) / (long as f64)).round().max(1.0) as usize;
        if landscape {
            (l, s)
        } else {
            (s, l)
        }
    };
    let fits = |l: usize| {
        let (w, h) = dims(l);
        grid_len(w, h, patch_size) <= max_patches
    };

    let area_scale = ((max_patches * patch_size * patch_size) as f64 / (width as f64 * height as f64)).sqrt();
    let upper = ((long as f64 * area_scale) as usize + patch_size).clamp(1, long);
    // The grid size is monotone in the long side, so bisect for the last fit.
    // A single-pixel long side always fits (grid 1x1).
    let (mut lo, mut hi) = (1usize, upper);
    if fits(hi) {
        return dims(hi);
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if fits(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    dims(lo)
}

/// Bilinear resampling with pixel-center alignment.
pub fn resize_bilinear(img: &RasterImage, width: usize, height: usize) -> RasterImage {
    let width = width.max(1);
    let height = height.max(1);
    if width == img.width && height == img.height {
        return img.clone();
    }
    let sx = img.width as f64 / width as f64;
    let sy = img.height as f64 / height as f64;
    let max_x = (img.width - 1) as f64;
    let max_y = (img.height - 1) as f64;

    let mut out = RasterImage::blank(width, height);
    for y in 0..height {
        let fy = (((y as f64) + 0.5) * sy - 0.5).clamp(0.0, max_y);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(img.height - 1);
        let ty = fy - y0 as f64;
        for x in 0..width {
            let fx = (((x as f64) + 0.5) * sx - 0.5).clamp(0.0, max_x);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(img.width - 1);
            let tx = fx - x0 as f64;
            let top = img.get(x0, y0) as f64 * (1.0 - tx) + img.get(x1, y0) as f64 * tx;
            let bottom = img.get(x0, y1) as f64 * (1.0 - tx) + img.get(x1, y1) as f64 * tx;
            let v = top * (1.0 - ty) + bottom * ty;
            out.set(x, y, v.round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

/// Square patches of an image, row-major, with intensities scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid<T> {
    rows: usize,
    cols: usize,
    patch_size: usize,
    values: Vec<T>,
}

impl<T: Scalar> PatchGrid<T> {
    /// Builds a grid from flattened patches (`rows * cols * patch_size^2` values).
    pub fn from_values(rows: usize, cols: usize, patch_size: usize, values: Vec<T>) -> Option<Self> {
        (values.len() == rows * cols * patch_size * patch_size).then_some(PatchGrid {
            rows,
            cols,
            patch_size,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn patch(&self, index: usize) -> &[T] {
        let d = self.patch_dim();
        &self.values[index * d..(index + 1) * d]
    }

    pub fn patches(&self) -> impl Iterator<Item = &[T]> {
        self.values.chunks_exact(self.patch_dim())
    }

    /// All patches back to back, `len() x patch_dim()` row-major.
    pub fn values(&self) -> &[T] {
        &self.values
    }

    /// `(row, col)` of the patch at `index`.
    pub fn position(&self, index: usize) -> (usize, usize) {
        (index / self.cols, index % self.cols)
    }
}

/// Pads `img` with white to a multiple of `patch_size` and cuts it into
/// row-major patches, each flattened row-major.
pub fn patchify<T: Scalar>(img: &RasterImage, patch_size: usize) -> PatchGrid<T> {
    assert!(patch_size >= 1, "patch size must be at least 1");
    let rows = img.height.div_ceil(patch_size);
    let cols = img.width.div_ceil(patch_size);
    let scale = T::lit(1.0 / 255.0);
    let white = T::one();
    let mut values = Vec::with_capacity(rows * cols * patch_size * patch_size);
    for pr in 0..rows {
        for pc in 0..cols {
            for dy in 0..patch_size {
                let y = pr * patch_size + dy;
                for dx in 0..patch_size {
                    let x = pc * patch_size + dx;
                    let v = if x < img.width && y < img.height {
                        T::lit(img.get(x, y) as f64) * scale
                    } else {
                        white
                    };
                    values.push(v);
                }
            }
        }
    }
    PatchGrid {
        rows,
        cols,
        patch_size,
        values,
    }
}

/// Settings for the full question + page to patches chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputLayout {
    pub patch_size: usize,
    pub max_patches: usize,
}

/// Renders the question at the page's width, stacks it on the page, fits the
/// result into the patch budget and cuts it into patches.
pub fn question_page_patches<T: Scalar>(
    question: &str,
    page: &RasterImage,
    font: &GlyphFont,
    layout: InputLayout,
) -> PatchGrid<T> {
    let strip = render_text(question, font, page.width.max(font.glyph_width));
    let fused = concat_question_page(&strip, page);
    let fitted = resize_to_patch_budget(&fused, layout.patch_size, layout.max_patches);
    patchify(&fitted, layout.patch_size)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count_text_lines(img: &RasterImage, gh: usize) -> usize {
        (0..img.height() / gh)
            .filter(|line| (line * gh..(line + 1) * gh).any(|y| img.row(y).contains(&BLACK)))
            .count()
    }

    #[test]
    fn empty_text_is_one_blank_line() {
        let font = GlyphFont::embedded();
        let img = render_text("", &font, 256);
        assert_eq!((img.width(), img.height()), (256, 16));
        assert!(img.pixels().iter().all(|&p| p == WHITE));
    }

    #[test]
    fn single_glyph_sits_at_origin() {
        let font = GlyphFont::embedded();
        let img = render_text("A", &font, 256);
        assert_eq!((img.width(), img.height()), (256, 16));
        let mask = font.glyph('A');
        for y in 0..16 {
            for x in 0..256 {
                let expect = if x < 8 && mask[y * 8 + x] { BLACK } else { WHITE };
                assert_eq!(img.get(x, y), expect, "pixel ({x},{y})");
            }
        }
        assert!(mask.iter().any(|&b| b));
    }

    #[test]
    fn long_text_wraps_onto_second_line() {
        let font = GlyphFont::embedded();
        let text: String = std::iter::repeat_n("Ab3#", 16).collect();
        assert_eq!(text.len(), 64);
        let img = render_text(&text, &font, 256);
        let expected_lines = (64usize * 8).div_ceil(256);
        assert_eq!(img.height(), expected_lines * 16);
        assert_eq!(count_text_lines(&img, 16), 2);
    }

    #[test]
    fn unmapped_characters_use_fallback() {
        let font = GlyphFont::embedded();
        assert!(!font.has_glyph('é'));
        let a = render_text("é", &font, 8);
        let b = render_text("\u{7f}", &font, 8);
        assert_eq!(a, b);
        assert!(a.pixels().contains(&BLACK));
    }

    #[test]
    fn every_printable_ascii_has_a_glyph() {
        let font = GlyphFont::embedded();
        for c in (0x20u8..=0x7e).map(char::from) {
            assert!(font.has_glyph(c), "{c:?}");
            assert_eq!(font.glyph(c).len(), 8 * 16);
        }
    }

    #[test]
    fn concat_equal_widths() {
        let q = RasterImage::filled(100, 32, 7);
        let p = RasterImage::filled(100, 200, 200);
        let out = concat_question_page(&q, &p);
        assert_eq!((out.width(), out.height()), (100, 232));
        for y in 0..32 {
            assert_eq!(out.row(y), q.row(y));
        }
        for y in 32..232 {
            assert_eq!(out.row(y), p.row(y - 32));
        }
    }

    #[test]
    fn concat_pads_narrow_question() {
        let q = RasterImage::filled(80, 32, 0);
        let p = RasterImage::filled(100, 200, 0);
        let out = concat_question_page(&q, &p);
        assert_eq!((out.width(), out.height()), (100, 232));
        for y in 0..32 {
            assert!(out.row(y)[..80].iter().all(|&v| v == 0));
            assert!(out.row(y)[80..].iter().all(|&v| v == WHITE));
        }
    }

    #[test]
    fn concat_keeps_white_page_white() {
        let font = GlyphFont::embedded();
        let q = render_text("what?", &font, 64);
        let p = RasterImage::blank(64, 48);
        let out = concat_question_page(&q, &p);
        assert!(out.pixels()[q.height() * 64..].iter().all(|&v| v == WHITE));
    }

    #[test]
    fn within_budget_is_unchanged() {
        let img = RasterImage::filled(160, 160, 3);
        assert_eq!(resize_to_patch_budget(&img, 16, 2048), img);
    }

    /// Exhaustive oracle: scan every integer output width from `W` down and
    /// return the first one (largest) whose derived grid fits.
    fn scan_widths(w: usize, h: usize, p: usize, b: usize) -> (usize, usize) {
        for cand in (1..=w).rev() {
            let ch = ((cand as f64) * (h as f64) / (w as f64)).round().max(1.0) as usize;
            if grid_len(cand, ch, p) <= b {
                return (cand, ch);
            }
        }
        unreachable!()
    }

    #[test]
    fn naive_scale_overshoot_is_corrected() {
        assert_eq!(scan_widths(64, 32, 16, 4), (32, 16));
        let img = RasterImage::filled(64, 32, 0);
        let out = resize_to_patch_budget(&img, 16, 4);
        assert_eq!((out.width(), out.height()), (32, 16));
        // naive continuous scale sqrt(4/8) overshoots
        assert_eq!(grid_len(45, 22, 16), 6);
    }

    #[test]
    fn square_page_fits_default_budget() {
        let img = RasterImage::filled(1024, 1024, 128);
        let out = resize_to_patch_budget(&img, 16, 2048);
        let (w, h) = (out.width(), out.height());
        assert!(out.grid_len(16) <= 2048);
        assert!(((w as f64 / h as f64) - 1.0).abs() <= 2.0 / w.min(h) as f64);
        assert_eq!((w, h), scan_widths(1024, 1024, 16, 2048));
    }

    #[test]
    fn bisection_agrees_with_scan_on_landscape_inputs() {
        for &(w, h, b) in &[(300, 200, 17), (999, 31, 5), (257, 256, 100), (64, 64, 3), (5000, 40, 9)] {
            assert_eq!(budget_dims(w, h, 16, b), scan_widths(w, h, 16, b), "{w}x{h} b={b}");
        }
    }

    #[test]
    fn very_tall_image_fits_budget_of_one() {
        let img = RasterImage::filled(3, 5000, 0);
        let out = resize_to_patch_budget(&img, 16, 1);
        assert_eq!(out.grid_len(16), 1);
    }

    #[test]
    fn exact_tiling() {
        let img = RasterImage::filled(32, 32, 51);
        let grid: PatchGrid<f64> = patchify(&img, 16);
        assert_eq!((grid.rows(), grid.cols(), grid.len()), (2, 2, 4));
        assert!(grid.patches().all(|p| p.len() == 256));
        assert!(grid.values().iter().all(|&v| (v - 0.2).abs() < 1e-12));
    }

    #[test]
    fn padding_is_white() {
        let img = RasterImage::filled(33, 17, 0);
        let grid: PatchGrid<f64> = patchify(&img, 16);
        assert_eq!((grid.rows(), grid.cols()), (2, 3));
        // top-right patch: only column 32 is real
        let p = grid.patch(2);
        for dy in 0..16 {
            for dx in 0..16 {
                let expect = if dx == 0 { 0.0 } else { 1.0 };
                assert_eq!(p[dy * 16 + dx], expect);
            }
        }
        // bottom-left patch: only row 16 is real
        let p = grid.patch(3);
        assert!(p[..16].iter().all(|&v| v == 0.0));
        assert!(p[16..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn constant_image_gives_identical_patches() {
        let img = RasterImage::filled(64, 48, 90);
        let grid: PatchGrid<f32> = patchify(&img, 16);
        let first = grid.patch(0).to_vec();
        assert!(grid.patches().all(|p| p == first.as_slice()));
    }

    #[test]
    fn row_major_patch_order() {
        let mut img = RasterImage::blank(32, 32);
        img.set(16, 0, 0); // top-right patch
        img.set(0, 16, 0); // bottom-left patch
        let grid: PatchGrid<f64> = patchify(&img, 16);
        assert_eq!(grid.patch(1)[0], 0.0);
        assert_eq!(grid.patch(2)[0], 0.0);
        assert_eq!(grid.position(2), (1, 0));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn render_is_deterministic(text in "[ -~]{0,40}", width in 8usize..200) {
                let font = GlyphFont::embedded();
                prop_assert_eq!(render_text(&text, &font, width), render_text(&text, &font, width));
            }

            #[test]
            fn concat_heights_add(qw in 1usize..60, qh in 1usize..40, pw in 1usize..60, ph in 1usize..40) {
                let out = concat_question_page(&RasterImage::blank(qw, qh), &RasterImage::blank(pw, ph));
                prop_assert_eq!(out.height(), qh + ph);
                prop_assert_eq!(out.width(), qw.max(pw));
            }

            #[test]
            fn patch_values_in_unit_interval(w in 1usize..50, h in 1usize..50, seed in any::<u64>()) {
                let pixels: Vec<u8> = (0..w * h).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 7) as u8).collect();
                let img = RasterImage::from_pixels(w, h, pixels).unwrap();
                let grid: PatchGrid<f64> = patchify(&img, 16);
                prop_assert!(grid.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }
}
