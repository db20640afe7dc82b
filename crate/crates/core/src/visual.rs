//! Three-level grid features from grayscale images.
//!
//! Each level cuts the image into `G×G` patches, average-pools every patch to
//! a `pool×pool` window and applies that level's linear projection. Rows are
//! row-major over the grid.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::io::{load_container, save_container};
use crate::numerics::kernels::{add_row, matmul, matmul_tn};
use crate::numerics::{Rng, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Image> {
        if pixels.len() != height * width || height == 0 || width == 0 {
            return Err(Error::Dimension(format!(
                "{} pixels for a {height}x{width} image",
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Format("pixel values must lie in [0, 1]".into()));
        }
        Ok(Image { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Image {
        Image { height, width, pixels: vec![value; height * width] }
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width], self.pixels.clone()).expect("shape")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Image> {
        if t.ndim() != 2 {
            return Err(Error::Format(format!("image tensor has rank {}", t.ndim())));
        }
        Image::new(t.shape()[0], t.shape()[1], t.data().to_vec())
    }
}

/// Grid sizes (finest first) and pooled window side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub grids: [usize; 3],
    pub pool: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { grids: [8, 4, 2], pool: 4 }
    }
}

impl GridSpec {
    pub fn patch_dim(&self) -> usize {
        self.pool * self.pool
    }

    pub fn validate(&self) -> Result<()> {
        let [s, m, h] = self.grids;
        if !(s > m && m > h && h >= 1) || self.pool == 0 {
            return Err(Error::Config(format!("grid sizes {:?} must be strictly decreasing", self.grids)));
        }
        Ok(())
    }

    pub fn check_image(&self, height: usize, width: usize) -> Result<()> {
        for &g in &self.grids {
            let ok = height % g == 0
                && width % g == 0
                && (height / g) % self.pool == 0
                && (width / g) % self.pool == 0;
            if !ok {
                return Err(Error::Dimension(format!(
                    "{height}x{width} image does not split into {g}x{g} patches of {p}x{p} pooled windows",
                    p = self.pool
                )));
            }
        }
        Ok(())
    }
}

/// Pooled patch vectors per level, before projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Patches {
    pub levels: [Tensor; 3],
}

pub fn extract_patches(img: &Image, spec: &GridSpec) -> Result<Patches> {
    spec.validate()?;
    spec.check_image(img.height, img.width)?;
    let p = spec.pool;
    let level = |g: usize| {
        let (ph, pw) = (img.height / g, img.width / g);
        let (wh, ww) = (ph / p, pw / p);
        let norm = 1.0 / (wh * ww) as f64;
        let mut out = Tensor::zeros(&[g * g, p * p]);
        for gy in 0..g {
            for gx in 0..g {
                let row = out.row_mut(gy * g + gx);
                for py in 0..p {
                    for px in 0..p {
                        let mut acc = 0.0;
                        for y in 0..wh {
                            for x in 0..ww {
                                acc += img.get(gy * ph + py * wh + y, gx * pw + px * ww + x);
                            }
                        }
                        row[py * p + px] = acc * norm;
                    }
                }
            }
        }
        out
    };
    Ok(Patches { levels: spec.grids.map(level) })
}

/// Per-level projection `patch_dim × D` and bias `D`.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidParams {
    pub proj: [Tensor; 3],
    pub bias: [Tensor; 3],
}

impl PyramidParams {
    pub fn new(spec: &GridSpec, dim: usize, std: f64, rng: &mut Rng) -> PyramidParams {
        let k = spec.patch_dim();
        PyramidParams {
            proj: std::array::from_fn(|_| {
                Tensor::new(vec![k, dim], rng.normal_vec(k * dim, std)).expect("shape")
            }),
            bias: std::array::from_fn(|_| Tensor::zeros(&[dim])),
        }
    }

    pub fn project(&self, patches: &Patches) -> Result<FeaturePyramid> {
        project_with(patches, [&self.proj[0], &self.proj[1], &self.proj[2]], [
            &self.bias[0],
            &self.bias[1],
            &self.bias[2],
        ])
    }
}

pub fn project_with(patches: &Patches, proj: [&Tensor; 3], bias: [&Tensor; 3]) -> Result<FeaturePyramid> {
    let mut out = Vec::with_capacity(3);
    for l in 0..3 {
        out.push(add_row(&matmul(&patches.levels[l], proj[l])?, bias[l]));
    }
    let [v_s, v_m, v_h]: [Tensor; 3] = out.try_into().expect("three levels");
    FeaturePyramid::new(v_s, v_m, v_h)
}

/// Gradients of the per-level projections and biases.
pub fn project_backward(patches: &Patches, grads: &FeaturePyramid) -> Result<([Tensor; 3], [Tensor; 3])> {
    let g = grads.levels();
    let mut dproj = Vec::with_capacity(3);
    let mut dbias = Vec::with_capacity(3);
    for l in 0..3 {
        dproj.push(matmul_tn(&patches.levels[l], g[l])?);
        dbias.push(Tensor::vector(g[l].col_sums())?);
    }
    Ok((dproj.try_into().expect("3"), dbias.try_into().expect("3")))
}

pub fn extract_pyramid(img: &Image, spec: &GridSpec, params: &PyramidParams) -> Result<FeaturePyramid> {
    params.project(&extract_patches(img, spec)?)
}

/// Shallow (finest), middle and high (coarsest) grid features, each flattened row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub v_s: Tensor,
    pub v_m: Tensor,
    pub v_h: Tensor,
}

fn grid_side(level: &Tensor, name: &str) -> Result<usize> {
    let n = level.rows();
    let g = (n as f64).sqrt().round() as usize;
    if level.ndim() != 2 || g * g != n || n == 0 {
        return Err(Error::Format(format!("{name} with shape {:?} is not a square grid", level.shape())));
    }
    Ok(g)
}

impl FeaturePyramid {
    pub fn new(v_s: Tensor, v_m: Tensor, v_h: Tensor) -> Result<FeaturePyramid> {
        let (gs, gm, gh) = (grid_side(&v_s, "v_s")?, grid_side(&v_m, "v_m")?, grid_side(&v_h, "v_h")?);
        if !(gs > gm && gm > gh) {
            return Err(Error::Format(format!("grid sizes {gs}/{gm}/{gh} must be strictly decreasing")));
        }
        if v_s.cols() != v_m.cols() || v_m.cols() != v_h.cols() {
            return Err(Error::Format("levels disagree on feature dimension".into()));
        }
        Ok(FeaturePyramid { v_s, v_m, v_h })
    }

    pub fn dim(&self) -> usize {
        self.v_s.cols()
    }

    pub fn grids(&self) -> [usize; 3] {
        self.levels().map(|l| (l.rows() as f64).sqrt().round() as usize)
    }

    pub fn levels(&self) -> [&Tensor; 3] {
        [&self.v_s, &self.v_m, &self.v_h]
    }

    pub fn zeros_like(&self) -> FeaturePyramid {
        FeaturePyramid {
            v_s: Tensor::zeros(self.v_s.shape()),
            v_m: Tensor::zeros(self.v_m.shape()),
            v_h: Tensor::zeros(self.v_h.shape()),
        }
    }
}

pub const LEVEL_NAMES: [&str; 3] = ["v_s", "v_m", "v_h"];

pub fn save_features(path: impl AsRef<Path>, pyr: &FeaturePyramid) -> Result<()> {
    let entries: Vec<(String, Tensor)> = LEVEL_NAMES
        .iter()
        .zip(pyr.levels())
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    save_container(path, &entries)
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeaturePyramid> {
    let entries = load_container(path)?;
    if entries.len() != 3 {
        return Err(Error::Format(format!("feature file has {} levels, expected 3", entries.len())));
    }
    let mut levels: Vec<Tensor> = Vec::with_capacity(3);
    for name in LEVEL_NAMES {
        let t = entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::Format(format!("feature file lacks {name}")))?;
        levels.push(t);
    }
    let [v_s, v_m, v_h]: [Tensor; 3] = levels.try_into().expect("3");
    FeaturePyramid::new(v_s, v_m, v_h)
}

/// `G×G×D` grid to a row-major `G²×D` token sequence.
pub fn flatten(grid: &Tensor) -> Result<Tensor> {
    if grid.ndim() != 3 {
        return Err(Error::Dimension(format!("grid of rank {}", grid.ndim())));
    }
    let s = grid.shape();
    grid.reshape(&[s[0] * s[1], s[2]])
}

/// Inverse of [`flatten`] for a square grid.
pub fn unflatten(tokens: &Tensor) -> Result<Tensor> {
    let g = grid_side(tokens, "tokens")?;
    tokens.reshape(&[g, g, tokens.cols()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck;

    fn params(seed: u64) -> PyramidParams {
        PyramidParams::new(&GridSpec::default(), 5, 0.5, &mut Rng::new(seed))
    }

    #[test]
    fn constant_image_gives_constant_levels() {
        let pyr = extract_pyramid(&Image::filled(32, 32, 0.3), &GridSpec::default(), &params(1)).unwrap();
        for l in pyr.levels() {
            for r in 1..l.rows() {
                assert_eq!(l.row(r), l.row(0));
            }
        }
        assert_eq!(pyr.grids(), [8, 4, 2]);
    }

    #[test]
    fn zero_image_zero_bias_is_zero() {
        let pyr = extract_pyramid(&Image::filled(32, 32, 0.0), &GridSpec::default(), &params(2)).unwrap();
        assert!(pyr.levels().iter().all(|l| l.max_abs() == 0.0));
    }

    #[test]
    fn bright_patch_changes_one_row_per_level() {
        let spec = GridSpec::default();
        let p = params(3);
        let base = extract_pyramid(&Image::filled(32, 32, 0.1), &spec, &p).unwrap();
        let mut img = Image::filled(32, 32, 0.1);
        // finest cell (row 2, col 5) covers pixels 8..12 × 20..24
        for y in 8..12 {
            for x in 20..24 {
                img.set(y, x, 0.9);
            }
        }
        let lit = extract_pyramid(&img, &spec, &p).unwrap();
        let changed = |a: &Tensor, b: &Tensor| (0..a.rows()).filter(|&r| a.row(r) != b.row(r)).collect::<Vec<_>>();
        assert_eq!(changed(&base.v_s, &lit.v_s), vec![2 * 8 + 5]);
        assert_eq!(changed(&base.v_m, &lit.v_m), vec![4 + 2]);
        assert_eq!(changed(&base.v_h, &lit.v_h), vec![1]);
    }

    #[test]
    fn coarse_pool_is_cell_mean() {
        let mut img = Image::filled(32, 32, 0.0);
        for y in 0..4 {
            for x in 0..4 {
                img.set(y, x, 0.8);
            }
        }
        let p = extract_patches(&img, &GridSpec::default()).unwrap();
        assert!((p.levels[2].get(0, 0) - 0.8).abs() < 1e-15);
        assert!((p.levels[1].get(0, 0) - 0.8).abs() < 1e-15);
        assert!((p.levels[1].get(0, 1) - 0.8).abs() < 1e-15);
        assert_eq!(p.levels[1].get(0, 2), 0.0);
    }

    #[test]
    fn indivisible_image_rejected() {
        let r = extract_pyramid(&Image::filled(30, 32, 0.0), &GridSpec::default(), &params(4));
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn out_of_range_pixels_rejected() {
        assert!(Image::new(1, 2, vec![0.5, 1.5]).is_err());
    }

    #[test]
    fn deterministic() {
        let mut rng = Rng::new(9);
        let img = Image::new(32, 32, (0..1024).map(|_| rng.uniform()).collect()).unwrap();
        let spec = GridSpec::default();
        assert_eq!(extract_pyramid(&img, &spec, &params(5)).unwrap(), extract_pyramid(&img, &spec, &params(5)).unwrap());
    }

    #[test]
    fn projection_gradcheck() {
        let spec = GridSpec::default();
        let mut rng = Rng::new(6);
        let img = Image::new(32, 32, (0..1024).map(|_| rng.uniform()).collect()).unwrap();
        let patches = extract_patches(&img, &spec).unwrap();
        let p = params(7);
        let w = p.project(&patches).unwrap();
        let w = FeaturePyramid {
            v_s: Tensor::new(w.v_s.shape().to_vec(), rng.normal_vec(w.v_s.len(), 1.0)).unwrap(),
            v_m: Tensor::new(w.v_m.shape().to_vec(), rng.normal_vec(w.v_m.len(), 1.0)).unwrap(),
            v_h: Tensor::new(w.v_h.shape().to_vec(), rng.normal_vec(w.v_h.len(), 1.0)).unwrap(),
        };
        for l in 0..3 {
            let err = gradcheck(
                |proj| {
                    let mut q = p.clone();
                    q.proj[l] = proj.clone();
                    let f = q.project(&patches)?;
                    let v: f64 = f.levels().iter().zip(w.levels()).map(|(a, b)| a.dot(b)).sum();
                    let (dp, _) = project_backward(&patches, &w)?;
                    Ok((v, dp[l].clone()))
                },
                &p.proj[l],
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-5, "level {l}: {err}");
            let err = gradcheck(
                |b| {
                    let mut q = p.clone();
                    q.bias[l] = b.clone();
                    let f = q.project(&patches)?;
                    let v: f64 = f.levels().iter().zip(w.levels()).map(|(a, b)| a.dot(b)).sum();
                    let (_, db) = project_backward(&patches, &w)?;
                    Ok((v, db[l].clone()))
                },
                &p.bias[l],
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-5, "bias {l}: {err}");
        }
    }

    #[test]
    fn feature_file_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.rihm");
        let mut rng = Rng::new(8);
        let img = Image::new(32, 32, (0..1024).map(|_| rng.uniform()).collect()).unwrap();
        let pyr = extract_pyramid(&img, &GridSpec::default(), &params(8)).unwrap();
        save_features(&path, &pyr).unwrap();
        assert_eq!(load_features(&path).unwrap(), pyr);

        let swapped = vec![
            ("v_s".to_string(), pyr.v_m.clone()),
            ("v_m".to_string(), pyr.v_s.clone()),
            ("v_h".to_string(), pyr.v_h.clone()),
        ];
        save_container(&path, &swapped).unwrap();
        assert!(matches!(load_features(&path), Err(Error::Format(_))));

        save_container(&path, &swapped[..2]).unwrap();
        assert!(matches!(load_features(&path), Err(Error::Format(_))));
    }

    #[test]
    fn flatten_is_row_major() {
        let grid = Tensor::new(vec![2, 2, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let toks = flatten(&grid).unwrap();
        assert_eq!(toks.shape(), &[4, 1]);
        assert_eq!(toks.data(), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(unflatten(&toks).unwrap(), grid);
    }
}
