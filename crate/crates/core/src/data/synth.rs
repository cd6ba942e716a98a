//! Synthetic exposure-distortion corpus.
//!
//! Every pristine scene is a linear colour gradient overlaid with a few flat
//! rectangles and per-pixel noise, all in mid-range intensities. Its
//! distorted twin is the same scene after an exposure-value shift
//! `v' = clamp(round(v * 2^ev), 0, 255)` with `|ev|` in `[1.5, 3.0]` and a
//! random sign, so half the twins are over- and half under-exposed.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ppm::{encode_ppm, RgbImage};
use super::LabelClass;
use crate::error::{Error, Result};

pub const MIN_SIZE: usize = 8;
pub const EV_RANGE: (f64, f64) = (1.5, 3.0);
pub const MANIFEST: &str = "manifest.tsv";

/// Pristine colours are drawn from this range so that a shift of at least
/// 1.5 EV moves most of the image out of it.
const COLOR_RANGE: (u8, u8) = (70, 190);
const NOISE: i32 = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub label: LabelClass,
    /// Zero for pristine images; rounded to 6 decimals otherwise.
    pub ev: f64,
}

pub fn file_name(label: LabelClass, index: usize) -> String {
    format!("{}.{index:04}.ppm", label.prefix())
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    std::array::from_fn(|_| rng.gen_range(COLOR_RANGE.0..=COLOR_RANGE.1) as f64)
}

/// Renders one pristine scene.
pub fn render_scene(rng: &mut ChaCha8Rng, size: usize) -> RgbImage {
    let from = random_color(rng);
    let to = random_color(rng);
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    // projection of the four corners bounds the gradient parameter
    let span = (size - 1) as f64 * (dx.abs() + dy.abs());
    let offset = (size - 1) as f64 * (dx.min(0.0) + dy.min(0.0));

    let mut canvas = vec![[0.0f64; 3]; size * size];
    for y in 0..size {
        for x in 0..size {
            let t = if span > 0.0 {
                ((x as f64 * dx + y as f64 * dy - offset) / span).clamp(0.0, 1.0)
            } else {
                0.0
            };
            canvas[y * size + x] = std::array::from_fn(|c| from[c] + (to[c] - from[c]) * t);
        }
    }

    let rects = rng.gen_range(1..=4);
    for _ in 0..rects {
        let w = rng.gen_range(2..=size / 2);
        let h = rng.gen_range(2..=size / 2);
        let x0 = rng.gen_range(0..=size - w);
        let y0 = rng.gen_range(0..=size - h);
        let color = random_color(rng);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                canvas[y * size + x] = color;
            }
        }
    }

    let mut data = Vec::with_capacity(size * size * 3);
    for px in &canvas {
        for &v in px {
            let noisy = v.round() as i32 + rng.gen_range(-NOISE..=NOISE);
            data.push(noisy.clamp(0, 255) as u8);
        }
    }
    RgbImage {
        width: size,
        height: size,
        data,
    }
}

/// Multiplies linear intensity by `2^ev` and clips to the 8-bit range.
pub fn apply_ev(image: &RgbImage, ev: f64) -> RgbImage {
    let gain = ev.exp2();
    RgbImage {
        width: image.width,
        height: image.height,
        data: image
            .data
            .iter()
            .map(|&v| (v as f64 * gain).round().clamp(0.0, 255.0) as u8)
            .collect(),
    }
}

/// Signed exposure shift rounded to the precision written in the manifest.
fn draw_ev(rng: &mut ChaCha8Rng) -> f64 {
    let magnitude = rng.gen_range(EV_RANGE.0..=EV_RANGE.1);
    let ev = if rng.gen::<bool>() { magnitude } else { -magnitude };
    (ev * 1e6).round() / 1e6
}

/// Writes `count` pristine scenes and their distorted twins to `out_dir`,
/// plus a `manifest.tsv`. Output depends only on `seed`, `count` and `size`.
pub fn synth_generate(
    out_dir: &Path,
    count: usize,
    seed: u64,
    size: usize,
) -> Result<Vec<ManifestEntry>> {
    if size < MIN_SIZE {
        return Err(Error::usage(format!(
            "image size must be at least {MIN_SIZE}, got {size}"
        )));
    }
    if count == 0 {
        return Err(Error::usage("count must be positive"));
    }
    fs::create_dir_all(out_dir)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut manifest = Vec::with_capacity(2 * count);
    for i in 0..count {
        let pristine = render_scene(&mut rng, size);
        let ev = draw_ev(&mut rng);
        let distorted = apply_ev(&pristine, ev);

        for (label, image, ev) in [
            (LabelClass::Pristine, &pristine, 0.0),
            (LabelClass::Exposure, &distorted, ev),
        ] {
            let name = file_name(label, i);
            fs::write(out_dir.join(&name), encode_ppm(image))?;
            manifest.push(ManifestEntry { name, label, ev });
        }
    }

    let mut out = fs::File::create(out_dir.join(MANIFEST))?;
    let mut text = String::from("name\tclass\tev\n");
    for e in &manifest {
        text.push_str(&format!("{}\t{}\t{:.6}\n", e.name, e.label, e.ev));
    }
    out.write_all(text.as_bytes())?;
    Ok(manifest)
}

/// Parses a manifest written by [`synth_generate`].
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some("name\tclass\tev") {
        return Err(Error::format(0, "manifest header must be name, class, ev"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = || Error::format(i + 1, format!("malformed manifest row {line:?}"));
            let mut cols = line.split('\t');
            let (Some(name), Some(class), Some(ev), None) =
                (cols.next(), cols.next(), cols.next(), cols.next())
            else {
                return Err(bad());
            };
            let label = LabelClass::ALL
                .into_iter()
                .find(|c| c.prefix() == class)
                .ok_or_else(bad)?;
            Ok(ManifestEntry {
                name: name.to_string(),
                label,
                ev: ev.parse().map_err(|_| bad())?,
            })
        })
        .collect()
}
