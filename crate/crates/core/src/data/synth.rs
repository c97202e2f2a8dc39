//! Synthetic scan-line samples.
//!
//! A dense analytic scene provides ground truth; the sparse input keeps a
//! fixed number of equally spaced rows with per-pixel dropout, mimicking
//! the horizontal striping of a rotating LiDAR. A shaded rendering of the
//! ground-truth surface stands in for the camera image so guided completion
//! works without any real dataset.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::DepthMap;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Analytic scene used for the dense ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DepthModel {
    /// Road-like ground plane: near at the bottom, far toward the horizon,
    /// with mild lateral undulation.
    PlanarGround,
    /// Uniform 10 m.
    Constant,
    /// Left-to-right ramp from 3 m to 30 m.
    Ramp,
}

impl DepthModel {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "planar_ground" => Ok(DepthModel::PlanarGround),
            "constant" => Ok(DepthModel::Constant),
            "ramp" => Ok(DepthModel::Ramp),
            other => Err(Error::invalid(format!(
                "unknown depth model {other:?}; expected planar_ground, constant or ramp"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DepthModel::PlanarGround => "planar_ground",
            DepthModel::Constant => "constant",
            DepthModel::Ramp => "ramp",
        }
    }

    fn depth_at(&self, h: usize, w: usize, height: usize, width: usize) -> f64 {
        match self {
            DepthModel::PlanarGround => {
                // Horizon slightly above the frame; depth falls off as the
                // inverse row distance like a camera looking along a plane.
                let horizon = -0.15 * height as f64;
                let t = h as f64 - horizon;
                let base = (4.5 * height as f64 / t).clamp(3.0, 30.0);
                let sway = 1.0 + 0.05 * (w as f64 / width as f64 * std::f64::consts::TAU).sin();
                base * sway
            }
            DepthModel::Constant => 10.0,
            DepthModel::Ramp => {
                let t = if width > 1 {
                    w as f64 / (width - 1) as f64
                } else {
                    0.0
                };
                3.0 + 27.0 * t
            }
        }
    }
}

/// Generate a `(sparse, dense ground truth)` pair.
///
/// The sparse map keeps `n_lines` equally spaced rows, with each kept pixel
/// surviving per-pixel dropout; everything else is unobserved.
pub fn synth_scanlines(
    height: usize,
    width: usize,
    n_lines: usize,
    dropout: f64,
    model: DepthModel,
    seed: u64,
) -> Result<(DepthMap, DepthMap)> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("synthetic maps need positive extents"));
    }
    if n_lines > height {
        return Err(Error::invalid(format!(
            "{n_lines} scan lines do not fit {height} rows"
        )));
    }
    if !(0.0..1.0).contains(&dropout) {
        return Err(Error::invalid("dropout must lie in [0, 1)"));
    }

    let mut gt = DepthMap::zeros(height, width);
    for h in 0..height {
        for w in 0..width {
            gt.set(h, w, model.depth_at(h, w, height, width));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sparse = DepthMap::zeros(height, width);
    for line in 0..n_lines {
        // Rows centered within equal bands.
        let h = (2 * line + 1) * height / (2 * n_lines);
        for w in 0..width {
            if rng.random_bool(1.0 - dropout) {
                sparse.set(h, w, gt.at(h, w));
            }
        }
    }
    Ok((sparse, gt))
}

/// Normals-based grayscale shading of a dense depth map, replicated to
/// three channels.
pub fn shaded_image<T: Scalar>(gt: &DepthMap) -> Tensor<T> {
    let (h, w) = (gt.height(), gt.width());
    let light = {
        let (lx, ly, lz) = (0.3f64, -0.5, 0.8);
        let n = (lx * lx + ly * ly + lz * lz).sqrt();
        (lx / n, ly / n, lz / n)
    };
    let gray = Tensor::<T>::from_fn(Shape::new(1, 1, h, w), |_, _, hh, ww| {
        let center = gt.at(hh, ww);
        let right = gt.at(hh, (ww + 1).min(w - 1));
        let down = gt.at((hh + 1).min(h - 1), ww);
        let (dx, dy) = (right - center, down - center);
        let (nx, ny, nz) = (-dx, -dy, 1.0);
        let norm = (nx * nx + ny * ny + nz * nz).sqrt();
        let shade = (nx / norm * light.0 + ny / norm * light.1 + nz / norm * light.2)
            .clamp(0.0, 1.0);
        T::of_f64(shade)
    });
    Tensor::from_fn(Shape::new(1, 3, h, w), |_, _, hh, ww| gray.at(0, 0, hh, ww))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_lines_means_empty_sparse_map() {
        let (sparse, gt) =
            synth_scanlines(16, 16, 0, 0.5, DepthModel::Constant, 1).unwrap();
        assert_eq!(sparse.density(), 0.0);
        assert_eq!(gt.density(), 1.0);
    }

    #[test]
    fn ground_truth_is_dense_and_sparse_is_a_masked_copy() {
        let (sparse, gt) =
            synth_scanlines(32, 64, 5, 0.4, DepthModel::PlanarGround, 2).unwrap();
        assert_eq!(gt.density(), 1.0);
        for h in 0..32 {
            for w in 0..64 {
                let s = sparse.at(h, w);
                assert!(s == 0.0 || s == gt.at(h, w));
            }
        }
    }

    #[test]
    fn kitti_like_density_on_the_reference_extent() {
        // 8 rows of 64 at 60% dropout target 5% observed pixels.
        let mut densities = Vec::new();
        for seed in 0..10 {
            let (sparse, _) =
                synth_scanlines(64, 256, 8, 0.6, DepthModel::PlanarGround, seed).unwrap();
            densities.push(sparse.density());
        }
        let mean = densities.iter().sum::<f64>() / densities.len() as f64;
        assert!((mean - 0.05).abs() < 0.01, "mean density {mean}");
    }

    #[test]
    fn same_seed_reproduces_the_maps() {
        let a = synth_scanlines(24, 48, 4, 0.5, DepthModel::Ramp, 77).unwrap();
        let b = synth_scanlines(24, 48, 4, 0.5, DepthModel::Ramp, 77).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn depth_models_stay_in_metric_range() {
        for model in [DepthModel::PlanarGround, DepthModel::Constant, DepthModel::Ramp] {
            let (_, gt) = synth_scanlines(40, 80, 4, 0.5, model, 3).unwrap();
            for &v in gt.values() {
                assert!((1.0..=40.0).contains(&v), "{model:?} produced {v}");
            }
        }
    }

    #[test]
    fn shaded_image_is_normalized() {
        let (_, gt) = synth_scanlines(16, 32, 3, 0.5, DepthModel::PlanarGround, 4).unwrap();
        let img = shaded_image::<f32>(&gt);
        assert_eq!(img.shape(), Shape::new(1, 3, 16, 32));
        assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
