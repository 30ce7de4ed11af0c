//! Procedural nuisance datasets: rotated stroke glyphs (a self-contained
//! stand-in for rotated-digit corpora) and dilated/eroded variants, plus an
//! IDX-format parser for real MNIST files when they are available.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{self, TensorRecord};
use crate::error::{DsfError, Result};

/// Canvas edge length for procedural glyphs.
pub const CANVAS: usize = 28;
/// Number of glyph classes.
pub const CLASS_COUNT: usize = 10;

/// The five-angle training protocol; index into this array is the nuisance
/// label `s`. Chance level for an s-probe is 1/5 = 0.20.
pub const TRAIN_ANGLES: [f64; 5] = [-45.0, -22.5, 0.0, 22.5, 45.0];
/// Held-out rotation angles never seen during training.
pub const UNSEEN_55: [f64; 2] = [-55.0, 55.0];
/// Held-out rotation angles, larger extrapolation.
pub const UNSEEN_65: [f64; 2] = [-65.0, 65.0];

/// A batch of labeled images. `images` is row-major `n × height × width` with
/// pixels in [0,1]; `y` is the class label; `s` indexes into `angle_values`
/// (empty when the batch carries no nuisance labels).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageBatch {
    pub images: Vec<f64>,
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub y: Vec<usize>,
    pub s: Vec<usize>,
    pub angle_values: Vec<f64>,
}

impl LabeledImageBatch {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn pixels_per_image(&self) -> usize {
        self.height * self.width
    }

    /// Pixel slice of sample `i`.
    pub fn image(&self, i: usize) -> &[f64] {
        let p = self.pixels_per_image();
        &self.images[i * p..(i + 1) * p]
    }

    /// Validates the batch invariants: pixel range, label ranges, lengths.
    pub fn validate(&self) -> Result<()> {
        let p = self.pixels_per_image();
        if self.images.len() != self.n * p || self.y.len() != self.n {
            return Err(DsfError::Data(format!(
                "batch shape mismatch: {} pixels, {} labels for n={}",
                self.images.len(),
                self.y.len(),
                self.n
            )));
        }
        if !self.s.is_empty() && self.s.len() != self.n {
            return Err(DsfError::Data(format!(
                "nuisance labels length {} != n={}",
                self.s.len(),
                self.n
            )));
        }
        if let Some(&bad) = self
            .images
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(DsfError::Data(format!("pixel {bad} outside [0,1]")));
        }
        if let Some(&bad) = self.y.iter().find(|&&c| c >= CLASS_COUNT) {
            return Err(DsfError::Data(format!("class label {bad} out of range")));
        }
        if let Some(&bad) = self.s.iter().find(|&&c| c >= self.angle_values.len()) {
            return Err(DsfError::Data(format!("nuisance label {bad} out of range")));
        }
        Ok(())
    }

    /// Gathers the listed sample indices into a new batch.
    pub fn select(&self, indices: &[usize]) -> LabeledImageBatch {
        let p = self.pixels_per_image();
        let mut images = Vec::with_capacity(indices.len() * p);
        let mut y = Vec::with_capacity(indices.len());
        let mut s = Vec::with_capacity(if self.s.is_empty() { 0 } else { indices.len() });
        for &i in indices {
            images.extend_from_slice(self.image(i));
            y.push(self.y[i]);
            if !self.s.is_empty() {
                s.push(self.s[i]);
            }
        }
        LabeledImageBatch {
            images,
            n: indices.len(),
            height: self.height,
            width: self.width,
            y,
            s,
            angle_values: self.angle_values.clone(),
        }
    }

    /// Serializes the batch into the binary tensor container.
    pub fn save(&self, path: &Path) -> Result<()> {
        let records = vec![
            TensorRecord::new(
                "images",
                vec![self.n, self.height, self.width],
                self.images.clone(),
            ),
            TensorRecord::new("y", vec![self.n], self.y.iter().map(|&v| v as f64).collect()),
            TensorRecord::new("s", vec![self.s.len()], self.s.iter().map(|&v| v as f64).collect()),
            TensorRecord::new(
                "angle_values",
                vec![self.angle_values.len()],
                self.angle_values.clone(),
            ),
        ];
        checkpoint::write_records(path, &records)
    }

    /// Loads a batch previously written with [`LabeledImageBatch::save`].
    pub fn load(path: &Path) -> Result<LabeledImageBatch> {
        let records = checkpoint::read_records(path)?;
        let find = |name: &str| -> Result<&TensorRecord> {
            records
                .iter()
                .find(|r| r.name == name)
                .ok_or_else(|| DsfError::Data(format!("dataset file missing tensor '{name}'")))
        };
        let images = find("images")?;
        if images.dims.len() != 3 {
            return Err(DsfError::Data("images tensor must be rank 3".into()));
        }
        let (n, height, width) = (images.dims[0], images.dims[1], images.dims[2]);
        let to_labels = |r: &TensorRecord| r.values.iter().map(|&v| v as usize).collect();
        let batch = LabeledImageBatch {
            images: images.values.clone(),
            n,
            height,
            width,
            y: to_labels(find("y")?),
            s: to_labels(find("s")?),
            angle_values: find("angle_values")?.values.clone(),
        };
        batch.validate()?;
        Ok(batch)
    }
}

/// Parameters for procedural glyph rendering. Rendering is a pure function of
/// (spec, class, seed): each sample draws its class's fixed stroke template
/// with seeded sub-pixel translation jitter and a seeded stroke width.
#[derive(Debug, Clone, PartialEq)]
pub struct GlyphSpec {
    pub canvas: usize,
    /// Maximum |translation| in pixels applied to the template, per axis.
    pub jitter_px: f64,
    /// Inclusive range of stroke widths in pixels.
    pub width_range: (f64, f64),
}

impl Default for GlyphSpec {
    fn default() -> Self {
        GlyphSpec {
            canvas: CANVAS,
            jitter_px: 2.0,
            width_range: (1.0, 2.0),
        }
    }
}

impl GlyphSpec {
    /// Spec with all randomness disabled; rendering yields the exact class
    /// template. Useful for identity tests.
    pub fn no_jitter() -> Self {
        GlyphSpec {
            canvas: CANVAS,
            jitter_px: 0.0,
            width_range: (1.5, 1.5),
        }
    }
}

/// A line segment in canvas coordinates (x right, y down).
type Segment = ([f64; 2], [f64; 2]);

fn ring(cx: f64, cy: f64, rx: f64, ry: f64, k: usize) -> Vec<Segment> {
    let mut segs = Vec::with_capacity(k);
    for i in 0..k {
        let a0 = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
        let a1 = 2.0 * std::f64::consts::PI * (i + 1) as f64 / k as f64;
        segs.push((
            [cx + rx * a0.cos(), cy + ry * a0.sin()],
            [cx + rx * a1.cos(), cy + ry * a1.sin()],
        ));
    }
    segs
}

/// Fixed vector-stroke templates for the ten glyph classes, loosely shaped
/// like the digits 0–9 so the classes are visually distinct.
fn class_segments(class: usize) -> Vec<Segment> {
    assert!(class < CLASS_COUNT, "glyph class out of range");
    let seg = |x1: f64, y1: f64, x2: f64, y2: f64| -> Segment { ([x1, y1], [x2, y2]) };
    match class {
        0 => ring(14.0, 14.0, 5.0, 8.5, 10),
        1 => vec![seg(14.0, 5.0, 14.0, 23.0), seg(14.0, 5.0, 11.0, 9.0)],
        2 => vec![
            seg(9.0, 8.0, 14.0, 4.0),
            seg(14.0, 4.0, 19.0, 8.0),
            seg(19.0, 8.0, 9.0, 23.0),
            seg(9.0, 23.0, 19.0, 23.0),
        ],
        3 => vec![
            seg(9.0, 5.0, 18.0, 5.0),
            seg(18.0, 5.0, 18.0, 13.0),
            seg(12.0, 13.0, 18.0, 13.0),
            seg(18.0, 13.0, 18.0, 23.0),
            seg(9.0, 23.0, 18.0, 23.0),
        ],
        4 => vec![
            seg(16.0, 4.0, 9.0, 16.0),
            seg(9.0, 16.0, 20.0, 16.0),
            seg(16.0, 4.0, 16.0, 24.0),
        ],
        5 => vec![
            seg(19.0, 4.0, 9.0, 4.0),
            seg(9.0, 4.0, 9.0, 13.0),
            seg(9.0, 13.0, 17.0, 13.0),
            seg(17.0, 13.0, 17.0, 23.0),
            seg(9.0, 23.0, 17.0, 23.0),
        ],
        6 => {
            let mut segs = vec![seg(17.0, 4.0, 10.0, 13.0)];
            segs.extend(ring(13.5, 18.0, 4.5, 5.0, 8));
            segs
        }
        7 => vec![seg(9.0, 4.0, 19.0, 4.0), seg(19.0, 4.0, 12.0, 24.0)],
        8 => {
            let mut segs = ring(14.0, 9.0, 4.0, 4.5, 8);
            segs.extend(ring(14.0, 19.0, 5.0, 5.0, 8));
            segs
        }
        9 => {
            let mut segs = ring(14.5, 10.0, 4.5, 5.0, 8);
            segs.push(seg(18.5, 10.0, 16.0, 24.0));
            segs
        }
        _ => unreachable!(),
    }
}

fn point_segment_distance(px: f64, py: f64, s: &Segment) -> f64 {
    let (a, b) = (s.0, s.1);
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - a[0]) * dx + (py - a[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a[0] + t * dx, a[1] + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// Renders one glyph: strokes of the class template, translated by `(dx, dy)`
/// pixels and drawn with the given width, antialiased by signed distance.
pub fn render_glyph(class: usize, width: f64, dx: f64, dy: f64, canvas: usize) -> Vec<f64> {
    let segs = class_segments(class);
    let mut img = vec![0.0; canvas * canvas];
    for r in 0..canvas {
        for c in 0..canvas {
            let (px, py) = (c as f64 - dx, r as f64 - dy);
            let dist = segs
                .iter()
                .map(|s| point_segment_distance(px, py, s))
                .fold(f64::INFINITY, f64::min);
            img[r * canvas + c] = (0.5 + (width / 2.0 - dist)).clamp(0.0, 1.0);
        }
    }
    img
}

/// The jitter-free reference image for a class (stroke width 1.5, centered).
pub fn class_template(class: usize, canvas: usize) -> Vec<f64> {
    render_glyph(class, 1.5, 0.0, 0.0, canvas)
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    // Independent stream per sample so generation is order-independent.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Generates `n_per_class` jittered glyphs per class, each rotated by an angle
/// drawn uniformly from `angles`; `s` records the angle index.
pub fn generate_glyphs(
    spec: &GlyphSpec,
    n_per_class: usize,
    angles: &[f64],
    seed: u64,
) -> Result<LabeledImageBatch> {
    if angles.is_empty() {
        return Err(DsfError::Config("angle list must be non-empty".into()));
    }
    if n_per_class == 0 {
        return Err(DsfError::Config("n_per_class must be >= 1".into()));
    }
    let canvas = spec.canvas;
    let n = n_per_class * CLASS_COUNT;
    let mut images = Vec::with_capacity(n * canvas * canvas);
    let mut y = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    for class in 0..CLASS_COUNT {
        for k in 0..n_per_class {
            let index = class * n_per_class + k;
            let mut rng = sample_rng(seed, index);
            let width = rng.gen_range(spec.width_range.0..=spec.width_range.1);
            let (dx, dy) = if spec.jitter_px > 0.0 {
                (
                    rng.gen_range(-spec.jitter_px..=spec.jitter_px),
                    rng.gen_range(-spec.jitter_px..=spec.jitter_px),
                )
            } else {
                (0.0, 0.0)
            };
            let angle_idx = rng.gen_range(0..angles.len());
            let glyph = render_glyph(class, width, dx, dy, canvas);
            let rotated = rotate_image(&glyph, canvas, canvas, angles[angle_idx]);
            images.extend_from_slice(&rotated);
            y.push(class);
            s.push(angle_idx);
        }
    }
    let batch = LabeledImageBatch {
        images,
        n,
        height: canvas,
        width: canvas,
        y,
        s,
        angle_values: angles.to_vec(),
    };
    batch.validate()?;
    Ok(batch)
}

/// Rotates an image by `theta` degrees counterclockwise about the canvas
/// center via inverse mapping with bilinear interpolation and zero padding.
/// A source offset (dr, dc) from the center maps to (−dc, dr) at 90°.
pub fn rotate_image(img: &[f64], h: usize, w: usize, theta_deg: f64) -> Vec<f64> {
    if theta_deg == 0.0 {
        return img.to_vec();
    }
    let theta = theta_deg.to_radians();
    let (cos_t, sin_t) = (theta.cos(), theta.sin());
    let (cr, cc) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let (dr, dc) = (r as f64 - cr, c as f64 - cc);
            // Inverse rotation: where did this destination pixel come from?
            let sr = cr + dr * cos_t + dc * sin_t;
            let sc = cc - dr * sin_t + dc * cos_t;
            let (r0, c0) = (sr.floor(), sc.floor());
            let (fr, fc) = (sr - r0, sc - c0);
            let mut acc = 0.0;
            for (ro, co, wgt) in [
                (0.0, 0.0, (1.0 - fr) * (1.0 - fc)),
                (0.0, 1.0, (1.0 - fr) * fc),
                (1.0, 0.0, fr * (1.0 - fc)),
                (1.0, 1.0, fr * fc),
            ] {
                let (rr, cc2) = (r0 + ro, c0 + co);
                if rr >= 0.0 && rr < h as f64 && cc2 >= 0.0 && cc2 < w as f64 {
                    acc += wgt * img[rr as usize * w + cc2 as usize];
                }
            }
            out[r * w + c] = acc.clamp(0.0, 1.0);
        }
    }
    out
}

/// Grayscale morphology with a k×k square structuring element and zero
/// padding: `kappa > 0` dilates (windowed max), `kappa < 0` erodes (windowed
/// min). Any `k >= 1` is accepted here; the public protocol restricts to the
/// evaluation set via [`morph`].
fn morph_with_size(img: &[f64], h: usize, w: usize, k: usize, dilate: bool) -> Vec<f64> {
    // For even k the window is asymmetric: offsets lo..=hi around the center.
    let lo = -((k as isize - 1) / 2);
    let hi = k as isize / 2;
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut best = if dilate { f64::NEG_INFINITY } else { f64::INFINITY };
            for dr in lo..=hi {
                for dc in lo..=hi {
                    let (rr, cc) = (r as isize + dr, c as isize + dc);
                    let v = if rr >= 0 && rr < h as isize && cc >= 0 && cc < w as isize {
                        img[rr as usize * w + cc as usize]
                    } else {
                        0.0
                    };
                    best = if dilate { best.max(v) } else { best.min(v) };
                }
            }
            out[r * w + c] = best;
        }
    }
    out
}

/// Morphological transfer corruption: |kappa| ∈ {2,3,4}, positive dilates,
/// negative erodes.
pub fn morph(img: &[f64], h: usize, w: usize, kappa: i32) -> Result<Vec<f64>> {
    let k = kappa.unsigned_abs() as usize;
    if !(2..=4).contains(&k) {
        return Err(DsfError::Config(format!(
            "morph kappa {kappa} invalid: |kappa| must be in {{2,3,4}}"
        )));
    }
    Ok(morph_with_size(img, h, w, k, kappa > 0))
}

/// Applies [`morph`] to every image in a batch.
pub fn morph_batch(batch: &LabeledImageBatch, kappa: i32) -> Result<LabeledImageBatch> {
    let p = batch.pixels_per_image();
    let mut images = Vec::with_capacity(batch.images.len());
    for i in 0..batch.n {
        images.extend_from_slice(&morph(batch.image(i), batch.height, batch.width, kappa)?);
    }
    debug_assert_eq!(images.len(), batch.n * p);
    Ok(LabeledImageBatch {
        images,
        ..batch.clone()
    })
}

fn read_be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    if offset + 4 > bytes.len() {
        return Err(DsfError::Parse {
            offset,
            message: format!("truncated while reading {what}"),
        });
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Parses a big-endian IDX image/label file pair (the MNIST distribution
/// format). Pixels are scaled to [0,1]; the returned batch has `s` empty.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledImageBatch> {
    let ibytes = std::fs::read(images_path)?;
    let magic = read_be_u32(&ibytes, 0, "image magic")?;
    if magic != 0x0000_0803 {
        return Err(DsfError::Parse {
            offset: 0,
            message: format!("bad image magic 0x{magic:08x}, expected 0x00000803"),
        });
    }
    let count = read_be_u32(&ibytes, 4, "image count")? as usize;
    let rows = read_be_u32(&ibytes, 8, "row count")? as usize;
    let cols = read_be_u32(&ibytes, 12, "column count")? as usize;
    let pixel_bytes = count * rows * cols;
    if ibytes.len() < 16 + pixel_bytes {
        return Err(DsfError::Parse {
            offset: ibytes.len(),
            message: format!(
                "truncated pixel section: need {} bytes, have {}",
                16 + pixel_bytes,
                ibytes.len()
            ),
        });
    }
    let images: Vec<f64> = ibytes[16..16 + pixel_bytes]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();

    let lbytes = std::fs::read(labels_path)?;
    let lmagic = read_be_u32(&lbytes, 0, "label magic")?;
    if lmagic != 0x0000_0801 {
        return Err(DsfError::Parse {
            offset: 0,
            message: format!("bad label magic 0x{lmagic:08x}, expected 0x00000801"),
        });
    }
    let lcount = read_be_u32(&lbytes, 4, "label count")? as usize;
    if lcount != count {
        return Err(DsfError::Parse {
            offset: 4,
            message: format!("label count {lcount} != image count {count}"),
        });
    }
    if lbytes.len() < 8 + lcount {
        return Err(DsfError::Parse {
            offset: lbytes.len(),
            message: format!(
                "truncated label section: need {} bytes, have {}",
                8 + lcount,
                lbytes.len()
            ),
        });
    }
    let y: Vec<usize> = lbytes[8..8 + lcount].iter().map(|&b| b as usize).collect();
    let batch = LabeledImageBatch {
        images,
        n: count,
        height: rows,
        width: cols,
        y,
        s: Vec::new(),
        angle_values: Vec::new(),
    };
    batch.validate()?;
    Ok(batch)
}

/// Number of samples requested for each protocol split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProtocolSizes {
    pub train: usize,
    pub eval_seen: usize,
    pub unseen: usize,
    pub dil_transfer: usize,
}

impl Default for ProtocolSizes {
    fn default() -> Self {
        ProtocolSizes {
            train: 10_000,
            eval_seen: 2_000,
            unseen: 1_000,
            dil_transfer: 1_000,
        }
    }
}

/// The rotation evaluation protocol: disjoint splits of an unrotated base
/// corpus, each rotated by angles from its slice of the protocol.
#[derive(Debug, Clone)]
pub struct RotProtocol {
    /// Training split, angles drawn from [`TRAIN_ANGLES`].
    pub train: LabeledImageBatch,
    /// Held-out evaluation split over the same five angles.
    pub eval_seen: LabeledImageBatch,
    /// Extrapolation split at ±55°.
    pub unseen_55: LabeledImageBatch,
    /// Extrapolation split at ±65°.
    pub unseen_65: LabeledImageBatch,
    /// Unrotated split reserved for morphological transfer evaluation.
    pub dil_transfer: LabeledImageBatch,
}

fn rotate_split(base: &LabeledImageBatch, indices: &[usize], angles: &[f64], seed: u64) -> LabeledImageBatch {
    let mut out = base.select(indices);
    let mut s = Vec::with_capacity(indices.len());
    let p = out.pixels_per_image();
    for (k, &orig) in indices.iter().enumerate() {
        let mut rng = sample_rng(seed, orig);
        let angle_idx = rng.gen_range(0..angles.len());
        let rotated = rotate_image(out.image(k), out.height, out.width, angles[angle_idx]);
        out.images[k * p..(k + 1) * p].copy_from_slice(&rotated);
        s.push(angle_idx);
    }
    out.s = s;
    out.angle_values = angles.to_vec();
    out
}

/// Splits an unrotated base corpus into the disjoint protocol splits and
/// rotates each per its angle slice. Deterministic in `seed`.
pub fn make_rot_protocol(
    base: &LabeledImageBatch,
    sizes: &ProtocolSizes,
    seed: u64,
) -> Result<RotProtocol> {
    if !base.s.is_empty() {
        return Err(DsfError::Contract(
            "protocol base must be unrotated (s empty)".into(),
        ));
    }
    let need = sizes.train + sizes.eval_seen + 2 * sizes.unseen + sizes.dil_transfer;
    if base.n < need {
        return Err(DsfError::Data(format!(
            "base corpus has {} samples but the protocol needs {need}",
            base.n
        )));
    }
    let mut order: Vec<usize> = (0..base.n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let mut take = |count: usize| -> Vec<usize> {
        let part = order[cursor..cursor + count].to_vec();
        cursor += count;
        part
    };
    let train_idx = take(sizes.train);
    let seen_idx = take(sizes.eval_seen);
    let u55_idx = take(sizes.unseen);
    let u65_idx = take(sizes.unseen);
    let dil_idx = take(sizes.dil_transfer);

    let mut dil_transfer = base.select(&dil_idx);
    dil_transfer.s = vec![0; dil_transfer.n];
    dil_transfer.angle_values = vec![0.0];

    Ok(RotProtocol {
        train: rotate_split(base, &train_idx, &TRAIN_ANGLES, seed ^ 0x7261_696e),
        eval_seen: rotate_split(base, &seen_idx, &TRAIN_ANGLES, seed ^ 0x7365_656e),
        unseen_55: rotate_split(base, &u55_idx, &UNSEEN_55, seed ^ 0x3535),
        unseen_65: rotate_split(base, &u65_idx, &UNSEEN_65, seed ^ 0x3635),
        dil_transfer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn no_jitter_zero_angle_equals_template() {
        let spec = GlyphSpec::no_jitter();
        let batch = generate_glyphs(&spec, 2, &[0.0], 7).unwrap();
        for i in 0..batch.n {
            let template = class_template(batch.y[i], spec.canvas);
            assert_eq!(batch.image(i), &template[..], "sample {i}");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = GlyphSpec::default();
        let a = generate_glyphs(&spec, 5, &TRAIN_ANGLES, 42).unwrap();
        let b = generate_glyphs(&spec, 5, &TRAIN_ANGLES, 42).unwrap();
        assert_eq!(a, b);
        let c = generate_glyphs(&spec, 5, &TRAIN_ANGLES, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn angle_frequencies_are_multinomial() {
        // 1000 samples over 5 angles: each count within 3σ of 200,
        // σ = sqrt(1000 · 0.2 · 0.8) ≈ 12.65.
        let batch = generate_glyphs(&GlyphSpec::default(), 100, &TRAIN_ANGLES, 9).unwrap();
        let mut counts = [0usize; 5];
        for &si in &batch.s {
            counts[si] += 1;
        }
        let sigma = (1000.0_f64 * 0.2 * 0.8).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            let dev = (c as f64 - 200.0).abs();
            assert!(dev <= 3.0 * sigma, "angle {i} count {c} deviates {dev:.1}");
        }
    }

    #[test]
    fn rotation_by_zero_is_identity() {
        let img = class_template(3, CANVAS);
        assert_eq!(rotate_image(&img, CANVAS, CANVAS, 0.0), img);
    }

    #[test]
    fn rotation_by_90_maps_offsets() {
        // Single bright pixel at center offset (dr, dc) = (3, 5) must land at
        // (−dc, dr) = (−5, 3); 28 is even so the center falls between pixels
        // and bilinear interpolation spreads the mass over a neighborhood.
        let mut img = vec![0.0; CANVAS * CANVAS];
        let (cr, cc) = ((CANVAS as f64 - 1.0) / 2.0, (CANVAS as f64 - 1.0) / 2.0);
        let (src_r, src_c) = ((cr + 3.0).round() as usize, (cc + 5.0).round() as usize);
        img[src_r * CANVAS + src_c] = 1.0;
        let (dr, dc) = (src_r as f64 - cr, src_c as f64 - cc);
        let rot = rotate_image(&img, CANVAS, CANVAS, 90.0);
        let total: f64 = rot.iter().sum();
        assert!((total - 1.0).abs() < 0.02, "mass {total} not conserved");
        // Center of mass of the rotated image.
        let (mut mr, mut mc) = (0.0, 0.0);
        for r in 0..CANVAS {
            for c in 0..CANVAS {
                mr += rot[r * CANVAS + c] * r as f64;
                mc += rot[r * CANVAS + c] * c as f64;
            }
        }
        let (mr, mc) = (mr / total - cr, mc / total - cc);
        assert!((mr - (-dc)).abs() < 0.02, "row offset {mr} vs {}", -dc);
        assert!((mc - dr).abs() < 0.02, "col offset {mc} vs {dr}");
    }

    #[test]
    fn rotation_round_trip_on_smooth_blob() {
        // Gaussian blob centered off-center; rotate +30° then −30°.
        let mut img = vec![0.0; CANVAS * CANVAS];
        for r in 0..CANVAS {
            for c in 0..CANVAS {
                let d2 = (r as f64 - 12.0).powi(2) + (c as f64 - 16.0).powi(2);
                img[r * CANVAS + c] = (-d2 / 18.0).exp();
            }
        }
        let back = rotate_image(
            &rotate_image(&img, CANVAS, CANVAS, 30.0),
            CANVAS,
            CANVAS,
            -30.0,
        );
        let norm: f64 = img.iter().map(|v| v * v).sum::<f64>().sqrt();
        let err: f64 = img
            .iter()
            .zip(&back)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(err < 0.05 * norm, "round-trip L2 error {err} vs norm {norm}");
    }

    #[test]
    fn dilation_of_point_gives_block() {
        let mut img = vec![0.0; 49];
        img[3 * 7 + 3] = 1.0;
        let out = morph(&img, 7, 7, 3).unwrap();
        for r in 0..7 {
            for c in 0..7 {
                let expect = if (2..=4).contains(&r) && (2..=4).contains(&c) {
                    1.0
                } else {
                    0.0
                };
                assert_eq!(out[r * 7 + c], expect, "pixel ({r},{c})");
            }
        }
    }

    #[test]
    fn erosion_of_block_leaves_center() {
        let mut img = vec![0.0; 49];
        for r in 2..=4 {
            for c in 2..=4 {
                img[r * 7 + c] = 1.0;
            }
        }
        let out = morph(&img, 7, 7, -3).unwrap();
        for r in 0..7 {
            for c in 0..7 {
                let expect = if r == 3 && c == 3 { 1.0 } else { 0.0 };
                assert_eq!(out[r * 7 + c], expect, "pixel ({r},{c})");
            }
        }
    }

    #[test]
    fn dilation_is_extensive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
        for k in [2, 3, 4] {
            let out = morph(&img, 8, 8, k).unwrap();
            assert!(
                img.iter().zip(&out).all(|(a, b)| b >= a),
                "dilation k={k} not extensive"
            );
        }
    }

    #[test]
    fn morph_size_one_is_identity() {
        let img = class_template(5, CANVAS);
        assert_eq!(morph_with_size(&img, CANVAS, CANVAS, 1, true), img);
        assert_eq!(morph_with_size(&img, CANVAS, CANVAS, 1, false), img);
    }

    #[test]
    fn morph_rejects_bad_kappa() {
        let img = vec![0.0; 4];
        for kappa in [0, 1, -1, 5, -7] {
            assert!(matches!(morph(&img, 2, 2, kappa), Err(DsfError::Config(_))));
        }
    }

    fn write_idx_fixture(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
        // Two 2×2 images and two labels.
        let mut ibytes = Vec::new();
        ibytes.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        ibytes.extend_from_slice(&2u32.to_be_bytes());
        ibytes.extend_from_slice(&2u32.to_be_bytes());
        ibytes.extend_from_slice(&2u32.to_be_bytes());
        ibytes.extend_from_slice(&[0, 1, 128, 255, 10, 20, 30, 40]);
        let mut lbytes = Vec::new();
        lbytes.extend_from_slice(&0x0000_0801u32.to_be_bytes());
        lbytes.extend_from_slice(&2u32.to_be_bytes());
        lbytes.extend_from_slice(&[7, 3]);
        let ipath = dir.join("imgs.idx");
        let lpath = dir.join("lbls.idx");
        std::fs::write(&ipath, &ibytes).unwrap();
        std::fs::write(&lpath, &lbytes).unwrap();
        (ipath, lpath)
    }

    #[test]
    fn idx_fixture_parses_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let (ipath, lpath) = write_idx_fixture(dir.path());
        let batch = load_idx(&ipath, &lpath).unwrap();
        assert_eq!(batch.n, 2);
        assert_eq!((batch.height, batch.width), (2, 2));
        assert!(close(
            batch.image(0),
            &[0.0, 1.0 / 255.0, 128.0 / 255.0, 1.0],
            0.0
        ));
        assert!(close(
            batch.image(1),
            &[10.0 / 255.0, 20.0 / 255.0, 30.0 / 255.0, 40.0 / 255.0],
            0.0
        ));
        assert_eq!(batch.y, vec![7, 3]);
        assert!(batch.s.is_empty());
    }

    #[test]
    fn idx_wrong_magic_errors_at_offset_zero() {
        let dir = tempfile::tempdir().unwrap();
        let (ipath, lpath) = write_idx_fixture(dir.path());
        let mut bytes = std::fs::read(&ipath).unwrap();
        bytes[3] = 0x99;
        std::fs::write(&ipath, &bytes).unwrap();
        match load_idx(&ipath, &lpath) {
            Err(DsfError::Parse { offset: 0, .. }) => {}
            other => panic!("expected parse error at offset 0, got {other:?}"),
        }
    }

    #[test]
    fn idx_truncated_pixels_errors_at_file_length() {
        let dir = tempfile::tempdir().unwrap();
        let (ipath, lpath) = write_idx_fixture(dir.path());
        let bytes = std::fs::read(&ipath).unwrap();
        std::fs::write(&ipath, &bytes[..bytes.len() - 3]).unwrap();
        match load_idx(&ipath, &lpath) {
            // The error names the actual file length as the offending offset.
            Err(DsfError::Parse { offset, .. }) => assert_eq!(offset, bytes.len() - 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn idx_count_mismatch_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (ipath, lpath) = write_idx_fixture(dir.path());
        let mut lbytes = std::fs::read(&lpath).unwrap();
        lbytes[7] = 3; // claim 3 labels
        lbytes.push(1);
        std::fs::write(&lpath, &lbytes).unwrap();
        assert!(matches!(
            load_idx(&ipath, &lpath),
            Err(DsfError::Parse { offset: 4, .. })
        ));
    }

    fn tiny_base(n_per_class: usize) -> LabeledImageBatch {
        let mut batch =
            generate_glyphs(&GlyphSpec::default(), n_per_class, &[0.0], 11).unwrap();
        batch.s = Vec::new();
        batch.angle_values = Vec::new();
        batch
    }

    #[test]
    fn protocol_splits_are_disjoint_and_sized() {
        let base = tiny_base(20); // 200 samples
        let sizes = ProtocolSizes {
            train: 100,
            eval_seen: 40,
            unseen: 20,
            dil_transfer: 20,
        };
        let proto = make_rot_protocol(&base, &sizes, 5).unwrap();
        assert_eq!(proto.train.n, 100);
        assert_eq!(proto.eval_seen.n, 40);
        assert_eq!(proto.unseen_55.n, 20);
        assert_eq!(proto.unseen_65.n, 20);
        assert_eq!(proto.dil_transfer.n, 20);
        // Train carries exactly 5 distinct s values.
        let mut seen: Vec<usize> = proto.train.s.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        // Unseen-55 angle values share nothing with the training set.
        for a in &proto.unseen_55.angle_values {
            assert!(!TRAIN_ANGLES.contains(a));
        }
        for batch in [
            &proto.train,
            &proto.eval_seen,
            &proto.unseen_55,
            &proto.unseen_65,
            &proto.dil_transfer,
        ] {
            batch.validate().unwrap();
        }
    }

    #[test]
    fn protocol_is_deterministic() {
        let base = tiny_base(20);
        let sizes = ProtocolSizes {
            train: 100,
            eval_seen: 40,
            unseen: 20,
            dil_transfer: 20,
        };
        let a = make_rot_protocol(&base, &sizes, 5).unwrap();
        let b = make_rot_protocol(&base, &sizes, 5).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.unseen_65, b.unseen_65);
        let c = make_rot_protocol(&base, &sizes, 6).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn protocol_rejects_small_base_and_labeled_base() {
        let base = tiny_base(2); // 20 samples
        let sizes = ProtocolSizes::default();
        assert!(matches!(
            make_rot_protocol(&base, &sizes, 1),
            Err(DsfError::Data(_))
        ));
        let labeled = generate_glyphs(&GlyphSpec::default(), 2, &[0.0], 1).unwrap();
        assert!(matches!(
            make_rot_protocol(&labeled, &sizes, 1),
            Err(DsfError::Contract(_))
        ));
    }

    #[test]
    fn batch_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.dsf");
        let batch = generate_glyphs(&GlyphSpec::default(), 3, &TRAIN_ANGLES, 8).unwrap();
        batch.save(&path).unwrap();
        let back = LabeledImageBatch::load(&path).unwrap();
        assert_eq!(back, batch);
    }
}
