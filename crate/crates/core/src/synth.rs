//! Synthetic occluded-pedestrian scenes.
//!
//! A pedestrian is a box split into a K×K part grid and rendered as three
//! vertical bands — head, torso, legs — each with its own mean and stripe
//! texture. Occluders are rectangles with background statistics laid over
//! whole part cells, so the visibility mask is exact and the occlusion
//! fraction can be counted from pixels.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::annotation::{Annotation, VisibilityMask};
use crate::config::{join, KeyValues};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::{Real, Tensor};

/// Width-to-height ratio of rendered pedestrians.
pub const PEDESTRIAN_ASPECT: Real = 0.41;

/// Occlusion windows used to draw each class.
pub const PARTIAL_WINDOW: (Real, Real) = (0.01, 0.35);
pub const HEAVY_WINDOW: (Real, Real) = (0.35, 0.80);

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub image_height: usize,
    pub image_width: usize,
    /// Inclusive range of pedestrians per image.
    pub instances_per_image: (usize, usize),
    /// Inclusive range of pedestrian heights in pixels.
    pub height_range: (usize, usize),
    /// Fractions of unoccluded, partially and heavily occluded instances.
    pub occlusion_mix: [Real; 3],
    /// Seeds the band textures, i.e. what a pedestrian looks like.
    pub texture_seed: u64,
    pub part_grid: usize,
    /// Pedestrian-sized clutter patches per image that copy one or two
    /// part bands but never the full three-band layout.
    pub decoys_per_image: (usize, usize),
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            image_height: 96,
            image_width: 160,
            instances_per_image: (1, 3),
            height_range: (44, 88),
            occlusion_mix: [0.4, 0.3, 0.3],
            texture_seed: 0,
            part_grid: 3,
            decoys_per_image: (0, 2),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let (h0, h1) = self.height_range;
        let (n0, n1) = self.instances_per_image;
        let mix_sum: Real = self.occlusion_mix.iter().sum();
        if self.image_height < 8 || self.image_width < 8 {
            return bad(format!("image size {}×{} is too small", self.image_height, self.image_width));
        }
        if h0 < 2 * self.part_grid || h0 > h1 || h1 > self.image_height {
            return bad(format!("height range {h0}..={h1} must lie within the image height {}", self.image_height));
        }
        if ((h1 as Real) * PEDESTRIAN_ASPECT).round() as usize > self.image_width {
            return bad("pedestrians would be wider than the image".into());
        }
        if n0 > n1 || self.decoys_per_image.0 > self.decoys_per_image.1 {
            return bad("count ranges must be ordered".into());
        }
        if self.occlusion_mix.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (mix_sum - 1.0).abs() > 1e-9 {
            return bad(format!("occlusion mix {:?} must be non-negative and sum to 1", self.occlusion_mix));
        }
        if self.part_grid == 0 {
            return bad("part grid must be at least 1".into());
        }
        if self.occlusion_mix[1] > 0.0 && self.part_grid < 2 {
            return bad("partial occlusion needs a part grid of at least 2".into());
        }
        Ok(())
    }

    /// Reads scene keys. The part grid is shared with the model and is
    /// set by the caller.
    pub fn apply(&mut self, kv: &mut KeyValues) -> Result<()> {
        kv.set("image_height", &mut self.image_height)?;
        kv.set("image_width", &mut self.image_width)?;
        kv.set_range("instances_per_image", &mut self.instances_per_image)?;
        kv.set_range("height_range", &mut self.height_range)?;
        kv.set_array("occlusion_mix", &mut self.occlusion_mix)?;
        kv.set("texture_seed", &mut self.texture_seed)?;
        kv.set_range("decoys_per_image", &mut self.decoys_per_image)?;
        Ok(())
    }

    pub fn write_kv(&self, out: &mut String) {
        let _ = writeln!(out, "image_height={}", self.image_height);
        let _ = writeln!(out, "image_width={}", self.image_width);
        let _ = writeln!(out, "instances_per_image={},{}", self.instances_per_image.0, self.instances_per_image.1);
        let _ = writeln!(out, "height_range={},{}", self.height_range.0, self.height_range.1);
        let _ = writeln!(out, "occlusion_mix={}", join(&self.occlusion_mix));
        let _ = writeln!(out, "texture_seed={}", self.texture_seed);
        let _ = writeln!(out, "decoys_per_image={},{}", self.decoys_per_image.0, self.decoys_per_image.1);
    }
}

/// 8-bit grayscale image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    /// `[1×H×W]` tensor with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.pixels.iter().map(|&p| p as Real / 255.0).collect();
        Tensor::new(vec![1, self.height, self.width], data).expect("pixel count matches size")
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_pgm(bytes: &[u8], origin: &str) -> Result<Self> {
        let err = |m: &str| Error::Parse {
            path: origin.to_string(),
            line: 1,
            msg: m.to_string(),
        };
        // header: magic, width, height, maxval, each separated by whitespace
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(err("truncated PGM header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| err("non-ASCII PGM header"))?);
        }
        if fields[0] != "P5" {
            return Err(err("not a binary PGM (P5) file"));
        }
        let dim = |s: &str| s.parse::<usize>().map_err(|_| err("bad PGM dimension"));
        let (width, height) = (dim(fields[1])?, dim(fields[2])?);
        if fields[3] != "255" {
            return Err(err("only 8-bit PGM is supported"));
        }
        let pixels = bytes.get(pos + 1..).unwrap_or(&[]).to_vec();
        if pixels.len() != width * height {
            return Err(err("PGM payload size does not match its header"));
        }
        Ok(GrayImage { width, height, pixels })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<GrayImage>,
    /// Ground truth of every image; `image_id` indexes `images`.
    pub annotations: Vec<Annotation>,
}

impl Dataset {
    pub fn annotations_of(&self, image_id: usize) -> impl Iterator<Item = &Annotation> {
        self.annotations.iter().filter(move |a| a.image_id == image_id)
    }

    /// Ground truth grouped per image, one (possibly empty) entry per image.
    pub fn grouped(&self) -> Vec<Vec<Annotation>> {
        let mut out = vec![Vec::new(); self.images.len()];
        for a in &self.annotations {
            out[a.image_id].push(a.clone());
        }
        out
    }

    /// Writes `images/NNNNN.pgm` and `annotations.txt` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let img_dir = dir.join("images");
        fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        for (i, img) in self.images.iter().enumerate() {
            let p = img_dir.join(image_file_name(i));
            fs::write(&p, img.to_pgm()).map_err(|e| Error::io(&p, e))?;
        }
        crate::annotation::write_annotations(&dir.join("annotations.txt"), &self.annotations)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let annotations = crate::annotation::read_annotations(&dir.join("annotations.txt"))?;
        let img_dir = dir.join("images");
        let mut names: Vec<String> = fs::read_dir(&img_dir)
            .map_err(|e| Error::io(&img_dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.ends_with(".pgm"))
            .collect();
        names.sort();
        let mut images = Vec::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if *n != image_file_name(i) {
                return Err(Error::Invalid(format!("{}: expected {}", img_dir.join(n).display(), image_file_name(i))));
            }
            let p = img_dir.join(n);
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            images.push(GrayImage::from_pgm(&bytes, &p.display().to_string())?);
        }
        if let Some(a) = annotations.iter().find(|a| a.image_id >= images.len()) {
            return Err(Error::ImageSetMismatch(format!(
                "annotation references image {} but the dataset has {} images",
                a.image_id,
                images.len()
            )));
        }
        Ok(Dataset { images, annotations })
    }

    /// The images at `ids`, renumbered from 0 in that order.
    pub fn subset(&self, ids: &[usize]) -> Dataset {
        let mut annotations = Vec::new();
        for (new, &old) in ids.iter().enumerate() {
            annotations.extend(self.annotations_of(old).map(|a| Annotation {
                image_id: new,
                ..a.clone()
            }));
        }
        Dataset {
            images: ids.iter().map(|&i| self.images[i].clone()).collect(),
            annotations,
        }
    }
}

pub fn image_file_name(i: usize) -> String {
    format!("{i:05}.pgm")
}

/// Appearance of one part band.
#[derive(Clone, Copy, Debug)]
struct Band {
    mean: Real,
    stripe_amp: Real,
    stripe_period: usize,
    horizontal: bool,
    /// Fraction of the box width the band occupies, centred.
    fill: Real,
}

fn palette(texture_seed: u64) -> [Band; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(texture_seed ^ 0x7e47_u64);
    let head = Band {
        mean: rng.random_range(0.80..0.90),
        stripe_amp: 0.0,
        stripe_period: 1,
        horizontal: true,
        fill: 0.45,
    };
    let torso = Band {
        mean: rng.random_range(0.12..0.22),
        stripe_amp: rng.random_range(0.08..0.12),
        stripe_period: rng.random_range(3..5),
        horizontal: true,
        fill: 1.0,
    };
    let legs = Band {
        mean: rng.random_range(0.62..0.72),
        stripe_amp: rng.random_range(0.10..0.15),
        stripe_period: rng.random_range(2..4),
        horizontal: false,
        fill: 0.8,
    };
    [head, torso, legs]
}

struct Canvas {
    w: usize,
    h: usize,
    px: Vec<Real>,
}

impl Canvas {
    fn fill_background(&mut self, rng: &mut ChaCha8Rng, x0: usize, y0: usize, x1: usize, y1: usize, level: Real) {
        let noise = Normal::new(0.0, 0.06).expect("valid std");
        for y in y0..y1 {
            for x in x0..x1 {
                self.px[y * self.w + x] = level + noise.sample(rng);
            }
        }
    }

    fn to_image(&self) -> GrayImage {
        let pixels = self
            .px
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        GrayImage {
            width: self.w,
            height: self.h,
            pixels,
        }
    }
}

/// Cell edges along one side of a box: `n + 1` integer offsets.
pub fn cell_edges(extent: usize, n: usize) -> Vec<usize> {
    (0..=n).map(|i| (i * extent + n / 2) / n).collect()
}

fn render_band(canvas: &mut Canvas, rng: &mut ChaCha8Rng, band: &Band, x0: usize, w: usize, y0: usize, y1: usize) {
    let noise = Normal::new(0.0, 0.05).expect("valid std");
    let inner = ((w as Real * band.fill).round() as usize).clamp(1, w);
    let off = (w - inner) / 2;
    for y in y0..y1 {
        for x in x0 + off..x0 + off + inner {
            let phase = if band.horizontal { y - y0 } else { x - x0 };
            let stripe = if (phase / band.stripe_period) % 2 == 0 { band.stripe_amp } else { -band.stripe_amp };
            canvas.px[y * canvas.w + x] = band.mean + stripe + noise.sample(rng);
        }
    }
}

/// Bands are assigned to rows of the part grid top to bottom.
fn band_rows(k: usize) -> Vec<usize> {
    (0..k).map(|r| (r * 3) / k).collect()
}

fn render_pedestrian(canvas: &mut Canvas, rng: &mut ChaCha8Rng, bands: &[Band; 3], b: (usize, usize, usize, usize), k: usize) {
    let (x0, y0, w, h) = b;
    let rows = cell_edges(h, k);
    for (r, &band) in band_rows(k).iter().enumerate() {
        render_band(canvas, rng, &bands[band], x0, w, y0 + rows[r], y0 + rows[r + 1]);
    }
}

/// A patch that shares one or two part bands with pedestrians.
fn render_decoy(canvas: &mut Canvas, rng: &mut ChaCha8Rng, bands: &[Band; 3], b: (usize, usize, usize, usize)) {
    let (x0, y0, w, h) = b;
    let layouts: [&[usize]; 5] = [&[1, 1, 1], &[2, 2, 2], &[1, 2, 1], &[0, 2, 1], &[2, 1, 2]];
    let layout = layouts[rng.random_range(0..layouts.len())];
    let rows = cell_edges(h, 3);
    for (r, &band) in layout.iter().enumerate() {
        render_band(canvas, rng, &bands[band], x0, w, y0 + rows[r], y0 + rows[r + 1]);
    }
}

/// Chooses which part cells an occluder covers.
fn choose_cells(rng: &mut ChaCha8Rng, k: usize, n: usize) -> Vec<bool> {
    let mut hidden = vec![false; k * k];
    match rng.random_range(0..3) {
        // bottom-up, as behind a car or a fence
        0 => {
            let left_first = rng.random_bool(0.5);
            let mut order = Vec::with_capacity(k * k);
            for r in (0..k).rev() {
                for c in 0..k {
                    order.push(r * k + if left_first { c } else { k - 1 - c });
                }
            }
            for &i in order.iter().take(n) {
                hidden[i] = true;
            }
        }
        // one side first, as behind another object
        1 => {
            let left = rng.random_bool(0.5);
            let mut order = Vec::with_capacity(k * k);
            for c in 0..k {
                let c = if left { c } else { k - 1 - c };
                for r in (0..k).rev() {
                    order.push(r * k + c);
                }
            }
            for &i in order.iter().take(n) {
                hidden[i] = true;
            }
        }
        _ => {
            let mut idx: Vec<usize> = (0..k * k).collect();
            idx.shuffle(rng);
            for &i in idx.iter().take(n) {
                hidden[i] = true;
            }
        }
    }
    hidden
}

/// Pixel fraction of a `w×h` box covered by the hidden cells.
pub fn hidden_fraction(w: usize, h: usize, k: usize, hidden: &[bool]) -> Real {
    let rows = cell_edges(h, k);
    let cols = cell_edges(w, k);
    let mut covered = 0;
    for r in 0..k {
        for c in 0..k {
            if hidden[r * k + c] {
                covered += (rows[r + 1] - rows[r]) * (cols[c + 1] - cols[c]);
            }
        }
    }
    covered as Real / (w * h) as Real
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OcclusionClass {
    None,
    Partial,
    Heavy,
}

fn draw_occlusion(rng: &mut ChaCha8Rng, k: usize, w: usize, h: usize, class: OcclusionClass) -> Vec<bool> {
    let (range, window) = match class {
        OcclusionClass::None => return vec![false; k * k],
        OcclusionClass::Partial => ((1, (k * k * 35) / 100), PARTIAL_WINDOW),
        OcclusionClass::Heavy => (((k * k * 35).div_ceil(100), (k * k * 80) / 100), HEAVY_WINDOW),
    };
    let (lo, hi) = (range.0.max(1), range.1.max(range.0.max(1)));
    for _ in 0..64 {
        let n = rng.random_range(lo..=hi);
        let hidden = choose_cells(rng, k, n);
        let f = hidden_fraction(w, h, k, &hidden);
        let ok = match class {
            OcclusionClass::Partial => f > window.0 && f <= window.1,
            _ => f >= window.0 && f <= window.1,
        };
        if ok {
            return hidden;
        }
    }
    vec![false; k * k]
}

fn disjoint(a: (usize, usize, usize, usize), b: (usize, usize, usize, usize), gap: usize) -> bool {
    a.0 + a.2 + gap <= b.0 || b.0 + b.2 + gap <= a.0 || a.1 + a.3 + gap <= b.1 || b.1 + b.3 + gap <= a.1
}

fn place(rng: &mut ChaCha8Rng, cfg: &SceneConfig, taken: &[(usize, usize, usize, usize)], h: usize, w: usize) -> Option<(usize, usize, usize, usize)> {
    for _ in 0..40 {
        let x = rng.random_range(0..=cfg.image_width - w);
        let y = rng.random_range(0..=cfg.image_height - h);
        let b = (x, y, w, h);
        if taken.iter().all(|&t| disjoint(t, b, 2)) {
            return Some(b);
        }
    }
    None
}

fn generate_image(cfg: &SceneConfig, bands: &[Band; 3], image_id: usize, rng: &mut ChaCha8Rng) -> (GrayImage, Vec<Annotation>) {
    let (iw, ih, k) = (cfg.image_width, cfg.image_height, cfg.part_grid);
    let mut canvas = Canvas {
        w: iw,
        h: ih,
        px: vec![0.0; iw * ih],
    };
    let level = rng.random_range(0.38..0.58);
    canvas.fill_background(rng, 0, 0, iw, ih, level);
    // clutter blocks
    for _ in 0..rng.random_range(4..10) {
        let bw = rng.random_range(3..24).min(iw);
        let bh = rng.random_range(3..30).min(ih);
        let x = rng.random_range(0..=iw - bw);
        let y = rng.random_range(0..=ih - bh);
        let v = rng.random_range(0.1..0.9);
        canvas.fill_background(rng, x, y, x + bw, y + bh, v);
    }

    let mut taken = Vec::new();
    let n_decoys = rng.random_range(cfg.decoys_per_image.0..=cfg.decoys_per_image.1);
    let n_peds = rng.random_range(cfg.instances_per_image.0..=cfg.instances_per_image.1);
    let mut anns = Vec::new();
    for _ in 0..n_peds {
        let h = rng.random_range(cfg.height_range.0..=cfg.height_range.1);
        let w = ((h as Real * PEDESTRIAN_ASPECT).round() as usize).max(k);
        let Some(b) = place(rng, cfg, &taken, h, w) else { continue };
        taken.push(b);
        let u: Real = rng.random();
        let class = if u < cfg.occlusion_mix[0] {
            OcclusionClass::None
        } else if u < cfg.occlusion_mix[0] + cfg.occlusion_mix[1] {
            OcclusionClass::Partial
        } else {
            OcclusionClass::Heavy
        };
        render_pedestrian(&mut canvas, rng, bands, b, k);
        let hidden = draw_occlusion(rng, k, w, h, class);
        let rows = cell_edges(h, k);
        let cols = cell_edges(w, k);
        let occ_level = rng.random_range(0.3..0.7);
        for r in 0..k {
            for c in 0..k {
                if hidden[r * k + c] {
                    let (x0, y0) = (b.0 + cols[c], b.1 + rows[r]);
                    canvas.fill_background(rng, x0, y0, b.0 + cols[c + 1], b.1 + rows[r + 1], occ_level);
                }
            }
        }
        let visibility = VisibilityMask::from_cells(k, hidden.iter().map(|&v| !v).collect()).expect("k² cells");
        anns.push(Annotation {
            image_id,
            bbox: BBox::new(b.0 as Real, b.1 as Real, w as Real, h as Real).expect("positive size"),
            occlusion_fraction: hidden_fraction(w, h, k, &hidden),
            visibility,
        });
    }
    for _ in 0..n_decoys {
        let h = rng.random_range(cfg.height_range.0..=cfg.height_range.1);
        let w = ((h as Real * PEDESTRIAN_ASPECT).round() as usize).max(3);
        let Some(b) = place(rng, cfg, &taken, h, w) else { continue };
        taken.push(b);
        render_decoy(&mut canvas, rng, bands, b);
    }
    (canvas.to_image(), anns)
}

/// Renders `n_images` scenes. The same `(cfg, seed)` always gives the same
/// dataset; each image draws from its own stream derived from `seed`.
pub fn generate_dataset(cfg: &SceneConfig, n_images: usize, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    if n_images == 0 {
        return Err(Error::Config("n_images must be at least 1".into()));
    }
    let bands = palette(cfg.texture_seed);
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n_images);
    let mut annotations = Vec::new();
    for id in 0..n_images {
        let mut rng = ChaCha8Rng::seed_from_u64(master.random());
        let (img, anns) = generate_image(cfg, &bands, id, &mut rng);
        images.push(img);
        annotations.extend(anns);
    }
    Ok(Dataset { images, annotations })
}

/// Partitions `0..n` into consecutive groups sized by `fractions` after a
/// seeded shuffle. Sizes are rounded cumulatively, so each is within one
/// image of its exact share.
pub fn split(n: usize, fractions: &[Real], seed: u64) -> Result<Vec<Vec<usize>>> {
    let total: Real = fractions.iter().sum();
    if fractions.is_empty() || fractions.iter().any(|&f| !(f >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be non-negative and sum to 1")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = Vec::with_capacity(fractions.len());
    let mut acc = 0.0;
    let mut start = 0;
    for (i, &f) in fractions.iter().enumerate() {
        acc += f;
        let end = if i + 1 == fractions.len() { n } else { ((acc * n as Real).round() as usize).min(n) };
        out.push(idx[start..end.max(start)].to_vec());
        start = end.max(start);
    }
    Ok(out)
}
