//! Depth-map I/O, synthetic sample generation, and error metrics.
//!
//! Depth maps follow the 16-bit single-channel convention of the completion
//! benchmark: stored value / 256 is meters, stored 0 means unobserved.

mod metrics;
mod png_io;
mod synth;

pub use metrics::{evaluate, MetricsReport};
pub use png_io::{read_depth_png, read_image_png, write_depth_png, write_image_png, write_mask_png};
pub use synth::{shaded_image, synth_scanlines, DepthModel};

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::layers::ValidityMask;
use crate::tensor::{Scalar, Shape, Tensor};
use crate::training::{Dataset, TrainSample};

/// Largest depth representable in the 16-bit / 256 encoding.
pub const MAX_DEPTH_M: f64 = u16::MAX as f64 / 256.0;

/// Metric depth image; 0 marks unobserved pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    depth_m: Vec<f64>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, depth_m: Vec<f64>) -> Result<Self> {
        if depth_m.len() != height * width {
            return Err(Error::shape(
                "depth map",
                format!("{}x{} needs {} values, got {}", height, width, height * width, depth_m.len()),
            ));
        }
        if let Some(v) = depth_m.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::invalid(format!("depth values must be finite and non-negative, got {v}")));
        }
        Ok(DepthMap {
            height,
            width,
            depth_m,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        DepthMap {
            height,
            width,
            depth_m: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.depth_m
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.depth_m
    }

    pub fn at(&self, h: usize, w: usize) -> f64 {
        self.depth_m[h * self.width + w]
    }

    pub fn set(&mut self, h: usize, w: usize, v: f64) {
        self.depth_m[h * self.width + w] = v;
    }

    /// Fraction of observed pixels.
    pub fn density(&self) -> f64 {
        if self.depth_m.is_empty() {
            return 0.0;
        }
        let observed = self.depth_m.iter().filter(|&&v| v > 0.0).count();
        observed as f64 / self.depth_m.len() as f64
    }

    /// Depth plane as a `(1, 1, H, W)` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(Shape::new(1, 1, self.height, self.width), |_, _, h, w| {
            T::of_f64(self.at(h, w))
        })
    }

    /// Validity mask of observed pixels.
    pub fn mask<T: Scalar>(&self) -> ValidityMask<T> {
        ValidityMask::from_nonzero(&self.to_tensor::<T>()).expect("depth plane is single channel")
    }

    /// A `(1, 1, H, W)` prediction tensor back into a map, clamping to the
    /// representable range so the result is always writable.
    pub fn from_prediction<T: Scalar>(pred: &Tensor<T>) -> Result<Self> {
        let s = pred.shape();
        if s.batch != 1 || s.channels != 1 {
            return Err(Error::shape("prediction to depth map", format!("{s}")));
        }
        let depth_m = pred
            .data()
            .iter()
            .map(|v| v.as_f64().clamp(1.0 / 256.0, MAX_DEPTH_M))
            .collect();
        DepthMap::new(s.height, s.width, depth_m)
    }
}

/// One line of a dataset manifest: paths to the three planes of a sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub sparse: PathBuf,
    pub image: PathBuf,
    pub gt: PathBuf,
}

/// Write a tab-separated manifest. Paths are stored as given.
pub fn write_manifest(entries: &[ManifestEntry], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("# id\tsparse\timage\tgt\n");
    for e in entries {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            e.id,
            e.sparse.display(),
            e.image.display(),
            e.gt.display()
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read a manifest written by [`write_manifest`]. Relative paths resolve
/// against the manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &str| {
        let pb = PathBuf::from(p);
        if pb.is_absolute() {
            pb
        } else {
            base.join(pb)
        }
    };
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Config {
                line: lineno + 1,
                field: "manifest".into(),
                message: format!("expected 4 tab-separated fields, got {}", fields.len()),
            });
        }
        entries.push(ManifestEntry {
            id: fields[0].to_string(),
            sparse: resolve(fields[1]),
            image: resolve(fields[2]),
            gt: resolve(fields[3]),
        });
    }
    Ok(entries)
}

/// Load a manifest into training samples.
pub fn load_samples<T: Scalar>(entries: &[ManifestEntry]) -> Result<Vec<TrainSample<T>>> {
    entries
        .iter()
        .map(|e| {
            let sparse = read_depth_png(&e.sparse)?;
            let gt = read_depth_png(&e.gt)?;
            let image = read_image_png::<T>(&e.image)?;
            Ok(TrainSample {
                depth: sparse.to_tensor(),
                mask: sparse.mask(),
                image,
                gt: gt.to_tensor(),
                gt_mask: gt.mask(),
            })
        })
        .collect()
}

/// Load a training manifest and an optional validation manifest into a
/// dataset. Without a validation manifest the training set doubles as the
/// validation set.
pub fn load_dataset_split<T: Scalar>(
    train_manifest: &Path,
    val_manifest: Option<&Path>,
) -> Result<Dataset<T>> {
    let train = load_samples(&read_manifest(train_manifest)?)?;
    let val = match val_manifest {
        Some(path) => load_samples(&read_manifest(path)?)?,
        None => Vec::new(),
    };
    Ok(Dataset { train, val })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn density_counts_observed_pixels() {
        let mut m = DepthMap::zeros(2, 2);
        m.set(0, 0, 1.5);
        assert_eq!(m.density(), 0.25);
    }

    #[test]
    fn negative_depth_is_rejected() {
        assert!(DepthMap::new(1, 2, vec![0.0, -1.0]).is_err());
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = std::env::temp_dir().join("sparseconv-manifest-test");
        std::fs::create_dir_all(&dir).unwrap();
        let entries = vec![ManifestEntry {
            id: "0000".into(),
            sparse: dir.join("s.png"),
            image: dir.join("i.png"),
            gt: dir.join("g.png"),
        }];
        let path = dir.join("manifest.tsv");
        write_manifest(&entries, &path).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), entries);
    }
}
