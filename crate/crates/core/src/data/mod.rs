//! Image ingestion and preprocessing.
//!
//! Files are named `<cls>.<number>[.ppm]` with `cls` one of `exp` (exposure
//! distorted) or `pri` (pristine). Each file is decoded, resized, scaled to
//! `[0, 1]` and labeled from its name.

mod ppm;
mod resize;
pub mod synth;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use ppm::{decode_ppm, encode_ppm, RgbImage};
pub use resize::resize_bilinear;
pub use synth::{apply_ev, synth_generate, ManifestEntry};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LabelClass {
    Exposure,
    Pristine,
}

impl LabelClass {
    pub const ALL: [LabelClass; 2] = [LabelClass::Exposure, LabelClass::Pristine];

    /// Position of the class in one-hot vectors: `exp` is 0, `pri` is 1.
    pub fn index(self) -> usize {
        match self {
            LabelClass::Exposure => 0,
            LabelClass::Pristine => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn prefix(self) -> &'static str {
        match self {
            LabelClass::Exposure => "exp",
            LabelClass::Pristine => "pri",
        }
    }
}

impl fmt::Display for LabelClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix())
    }
}

pub fn one_hot(label: LabelClass) -> [f32; 2] {
    let mut v = [0.0; 2];
    v[label.index()] = 1.0;
    v
}

/// Reads the class from the first three letters of the file's base name,
/// which must be followed by a dot. Matching ignores case.
pub fn label_from_filename(name: &str) -> Result<LabelClass> {
    let base = Path::new(name)
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or(name);
    let err = |message: &str| Error::Labeling {
        file: name.to_string(),
        message: message.to_string(),
    };
    let (prefix, rest) = match (base.get(..3), base.get(3..)) {
        (Some(p), Some(r)) => (p, r),
        _ => return Err(err("name is shorter than a class prefix")),
    };
    if !rest.starts_with('.') {
        return Err(err("class prefix must be followed by a dot"));
    }
    LabelClass::ALL
        .into_iter()
        .find(|c| prefix.eq_ignore_ascii_case(c.prefix()))
        .ok_or_else(|| err("class prefix must be \"exp\" or \"pri\""))
}

/// Converts 8-bit samples to `v / 255` in an `(h, w, 3)` tensor.
pub fn to_float_scaled<T: Scalar>(image: &RgbImage) -> Tensor<T> {
    let scale = T::one() / T::of(255.0);
    Tensor::new(
        &[image.height, image.width, 3],
        image.data.iter().map(|&v| T::of(v as f64) * scale).collect(),
    )
    .expect("RgbImage invariants guarantee a valid shape")
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    /// `(h, w, 3)`, values in `[0, 1]`.
    pub pixels: Tensor<f32>,
    pub label: LabelClass,
    pub source_name: String,
}

impl ImageSample {
    pub fn target(&self) -> [f32; 2] {
        one_hot(self.label)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<ImageSample>,
}

impl Dataset {
    pub fn new(samples: Vec<ImageSample>) -> Result<Self> {
        if let Some(first) = samples.first() {
            let dims = first.pixels.dims();
            if dims.len() != 3 || dims[2] != 3 {
                return Err(Error::shape(format!(
                    "{}: samples must be (h,w,3), got {}",
                    first.source_name,
                    first.pixels.shape()
                )));
            }
            if let Some(odd) = samples.iter().find(|s| s.pixels.dims() != dims) {
                return Err(Error::shape(format!(
                    "{} is {} but {} is {}",
                    odd.source_name,
                    odd.pixels.shape(),
                    first.source_name,
                    first.pixels.shape()
                )));
            }
        }
        Ok(Dataset { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample counts indexed by [`LabelClass::index`].
    pub fn class_counts(&self) -> [usize; 2] {
        let mut counts = [0; 2];
        for s in &self.samples {
            counts[s.label.index()] += 1;
        }
        counts
    }

    /// `(height, width)` shared by every sample.
    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.samples
            .first()
            .map(|s| (s.pixels.dims()[0], s.pixels.dims()[1]))
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }
}

fn is_image_candidate(path: &Path) -> bool {
    let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
        return true;
    };
    let is_manifest = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("tsv"));
    !name.starts_with('.') && !is_manifest
}

/// Decodes one file through the full preprocessing chain.
pub fn load_sample(path: &Path, target: (usize, usize)) -> Result<ImageSample> {
    let wrap = |e: Error| Error::Input {
        path: path.to_path_buf(),
        source: Box::new(e),
    };
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| {
            wrap(Error::Labeling {
                file: path.display().to_string(),
                message: "file name is not valid UTF-8".into(),
            })
        })?
        .to_string();
    let label = label_from_filename(&name).map_err(wrap)?;
    let bytes = fs::read(path).map_err(|e| wrap(e.into()))?;
    let raw = decode_ppm(&bytes).map_err(wrap)?;
    let resized = resize_bilinear(&raw, target.0, target.1);
    Ok(ImageSample {
        pixels: to_float_scaled(&resized),
        label,
        source_name: name,
    })
}

/// Loads every image in `dir`, ordered by file name. Hidden files and `.tsv`
/// manifests are skipped; any other file must be a correctly named PPM.
pub fn load_directory(dir: &Path, target: (usize, usize)) -> Result<Dataset> {
    if target.0 == 0 || target.1 == 0 {
        return Err(Error::usage("target image size must be positive"));
    }
    let mut paths: Vec<PathBuf> = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::Input {
        path: dir.to_path_buf(),
        source: Box::new(e.into()),
    })? {
        let entry = entry?;
        if entry.file_type()?.is_file() && is_image_candidate(&entry.path()) {
            paths.push(entry.path());
        }
    }
    if paths.is_empty() {
        return Err(Error::usage(format!(
            "no image files found in {}",
            dir.display()
        )));
    }
    paths.sort_by(|a, b| a.file_name().cmp(&b.file_name()));

    let samples = paths
        .par_iter()
        .map(|p| load_sample(p, target))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_from_names() {
        assert_eq!(label_from_filename("pri.234").unwrap(), LabelClass::Pristine);
        assert_eq!(label_from_filename("exp.0001.ppm").unwrap(), LabelClass::Exposure);
        assert_eq!(label_from_filename("EXP.7.PPM").unwrap(), LabelClass::Exposure);
        assert_eq!(label_from_filename("some/dir/Pri.1.ppm").unwrap(), LabelClass::Pristine);
        match label_from_filename("img.001") {
            Err(Error::Labeling { file, .. }) => assert_eq!(file, "img.001"),
            other => panic!("expected labeling error, got {other:?}"),
        }
        assert!(label_from_filename("pristine.1").is_err());
        assert!(label_from_filename("ex").is_err());
    }

    #[test]
    fn one_hot_encoding() {
        assert_eq!(one_hot(LabelClass::Exposure), [1.0, 0.0]);
        assert_eq!(one_hot(LabelClass::Pristine), [0.0, 1.0]);
        for c in LabelClass::ALL {
            assert_eq!(one_hot(c).iter().sum::<f32>(), 1.0);
            assert_eq!(LabelClass::from_index(c.index()), Some(c));
        }
    }

    #[test]
    fn float_scaling() {
        let img = RgbImage::new(3, 1, vec![255, 0, 128, 1, 2, 3, 254, 255, 0]).unwrap();
        let t = to_float_scaled::<f32>(&img);
        assert_eq!(t.dims(), &[1, 3, 3]);
        assert_eq!(t.data()[0], 1.0);
        assert_eq!(t.data()[1], 0.0);
        assert!((t.data()[2] as f64 - 0.501961).abs() < 1e-6);
        assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let all = RgbImage::new(16, 16, (0..=255).flat_map(|v| [v, v, v]).collect()).unwrap();
        assert!(to_float_scaled::<f64>(&all)
            .data()
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn dataset_rejects_mixed_sizes() {
        let mk = |h, name: &str| ImageSample {
            pixels: Tensor::zeros(&[h, 2, 3]).unwrap(),
            label: LabelClass::Pristine,
            source_name: name.into(),
        };
        assert!(Dataset::new(vec![mk(2, "a"), mk(3, "b")]).is_err());
        let ok = Dataset::new(vec![mk(2, "a"), mk(2, "b")]).unwrap();
        assert_eq!(ok.class_counts(), [0, 2]);
        assert_eq!(ok.image_size(), Some((2, 2)));
    }
}
