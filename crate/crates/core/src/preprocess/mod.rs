//! From co-registered rasters to patch samples: band normalization, PCA, patch
//! extraction with reflect padding, and train/test splits.

pub mod raster;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::tensor::Tensor;

/// `height x width x channels` values, stored band-interleaved by pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneCube {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl SceneCube {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height * width * channels == 0 {
            return Err(Error::Data(format!(
                "empty cube {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Data(format!(
                "cube {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let i = (row * self.width + col) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn get(&self, row: usize, col: usize, band: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + band]
    }

    pub fn band(&self, band: usize) -> Vec<f64> {
        self.data
            .iter()
            .skip(band)
            .step_by(self.channels)
            .copied()
            .collect()
    }
}

/// Ground truth as stored on disk: 0 = unlabeled, `1..=classes` otherwise.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub raw: Vec<u16>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, raw: Vec<u16>) -> Result<Self> {
        if raw.len() != height * width || raw.is_empty() {
            return Err(Error::Data(format!(
                "label map {height}x{width} has {} entries",
                raw.len()
            )));
        }
        Ok(Self { height, width, raw })
    }

    /// 0-indexed class at a pixel, `None` if unlabeled.
    pub fn class_at(&self, row: usize, col: usize) -> Option<usize> {
        match self.raw[row * self.width + col] {
            0 => None,
            c => Some(c as usize - 1),
        }
    }

    pub fn classes(&self) -> usize {
        self.raw.iter().copied().max().unwrap_or(0) as usize
    }

    pub fn labeled(&self) -> Vec<Pixel> {
        let mut out = Vec::new();
        for row in 0..self.height {
            for col in 0..self.width {
                if let Some(label) = self.class_at(row, col) {
                    out.push(Pixel { row, col, label });
                }
            }
        }
        out
    }
}

pub fn check_coregistered(hsi: &SceneCube, aux: &SceneCube, labels: &LabelMap) -> Result<()> {
    if (hsi.height, hsi.width) != (aux.height, aux.width)
        || (hsi.height, hsi.width) != (labels.height, labels.width)
    {
        return Err(Error::Data(format!(
            "rasters are not co-registered: hsi {}x{}, aux {}x{}, labels {}x{}",
            hsi.height, hsi.width, aux.height, aux.width, labels.height, labels.width
        )));
    }
    Ok(())
}

/// Per-band min-max scaling to `[0, 1]`; constant bands become 0.
pub fn normalize(cube: &SceneCube) -> SceneCube {
    let c = cube.channels;
    let mut lo = vec![f64::INFINITY; c];
    let mut hi = vec![f64::NEG_INFINITY; c];
    for px in cube.data.chunks(c) {
        for (b, &v) in px.iter().enumerate() {
            lo[b] = lo[b].min(v);
            hi[b] = hi[b].max(v);
        }
    }
    let mut out = cube.clone();
    for px in out.data.chunks_mut(c) {
        for (b, v) in px.iter_mut().enumerate() {
            let range = hi[b] - lo[b];
            *v = if range > 0.0 {
                (*v - lo[b]) / range
            } else {
                0.0
            };
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Row `i` is the `i`-th component, unit length.
    pub components: Vec<Vec<f64>>,
    /// Every covariance eigenvalue, descending.
    pub eigenvalues: Vec<f64>,
}

impl Pca {
    /// Fits on every pixel of `cube` and keeps `p` components.
    pub fn fit(cube: &SceneCube, p: usize) -> Result<Self> {
        let (n, c) = (cube.pixels(), cube.channels);
        if p == 0 || p > c {
            return Err(Error::Param(format!(
                "cannot keep {p} components of {c} bands"
            )));
        }
        if n < p + 1 {
            return Err(Error::Param(format!(
                "{n} pixels are too few for {p} components"
            )));
        }
        let mut mean = vec![0.0; c];
        for px in cube.data.chunks(c) {
            for (m, v) in mean.iter_mut().zip(px) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = DMatrix::<f64>::zeros(c, c);
        for px in cube.data.chunks(c) {
            let centered: Vec<f64> = px.iter().zip(&mean).map(|(v, m)| v - m).collect();
            for i in 0..c {
                for j in i..c {
                    cov[(i, j)] += centered[i] * centered[j];
                }
            }
        }
        for i in 0..c {
            for j in i..c {
                cov[(i, j)] /= (n - 1) as f64;
                cov[(j, i)] = cov[(i, j)];
            }
        }
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..c).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .total_cmp(&eig.eigenvalues[a])
                .then(a.cmp(&b))
        });
        let eigenvalues = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
        let components = order[..p]
            .iter()
            .map(|&i| {
                let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
                let lead = v
                    .iter()
                    .copied()
                    .fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
                if lead < 0.0 {
                    v.iter_mut().for_each(|x| *x = -*x);
                }
                v
            })
            .collect();
        Ok(Self {
            mean,
            components,
            eigenvalues,
        })
    }

    pub fn transform(&self, cube: &SceneCube) -> Result<SceneCube> {
        if cube.channels != self.mean.len() {
            return Err(Error::shape(
                "pca_reduce",
                &[cube.channels],
                &[self.mean.len()],
            ));
        }
        let p = self.components.len();
        let mut data = Vec::with_capacity(cube.pixels() * p);
        for px in cube.data.chunks(cube.channels) {
            for comp in &self.components {
                data.push(
                    comp.iter()
                        .zip(px)
                        .zip(&self.mean)
                        .map(|((w, v), m)| w * (v - m))
                        .sum(),
                );
            }
        }
        SceneCube::new(cube.height, cube.width, p, data)
    }

    /// Share of total variance carried by each kept component.
    pub fn explained_ratio(&self) -> Vec<f64> {
        let total: f64 = self.eigenvalues.iter().sum();
        self.eigenvalues[..self.components.len()]
            .iter()
            .map(|&l| if total > 0.0 { l / total } else { 0.0 })
            .collect()
    }

    /// Maps reduced pixels back to band space.
    pub fn inverse(&self, reduced: &SceneCube) -> SceneCube {
        let c = self.mean.len();
        let mut data = Vec::with_capacity(reduced.pixels() * c);
        for z in reduced.data.chunks(reduced.channels) {
            for b in 0..c {
                data.push(
                    self.mean[b]
                        + z.iter()
                            .zip(&self.components)
                            .map(|(zi, comp)| zi * comp[b])
                            .sum::<f64>(),
                );
            }
        }
        SceneCube {
            height: reduced.height,
            width: reduced.width,
            channels: c,
            data,
        }
    }
}

pub fn pca_reduce(cube: &SceneCube, p: usize) -> Result<SceneCube> {
    Pca::fit(cube, p)?.transform(cube)
}

/// Channel mean of a `[k, k, C]` patch when `C > 1`; identity for a single channel.
pub fn lidar_preprocess(patch: &Tensor) -> Result<Tensor> {
    let s = patch.shape();
    if s.len() != 3 {
        return Err(Error::shape("lidar_preprocess", s, &[0, 0, 0]));
    }
    if s[2] == 1 {
        return Ok(patch.clone());
    }
    let data = patch
        .data()
        .chunks(s[2])
        .map(|px| px.iter().sum::<f64>() / s[2] as f64)
        .collect();
    Tensor::new(&[s[0], s[1], 1], data)
}

/// Mirror index without repeating the edge: `-1 -> 1`, `n -> n - 2`.
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// `k x k x C` neighborhood centered at `(row, col)` with reflect padding.
pub fn extract_patch(cube: &SceneCube, row: usize, col: usize, k: usize) -> Result<Tensor> {
    if k.is_multiple_of(2) || k == 0 {
        return Err(Error::Param(format!("patch size must be odd, got {k}")));
    }
    if row >= cube.height || col >= cube.width {
        return Err(Error::Param(format!(
            "pixel ({row}, {col}) outside {}x{} cube",
            cube.height, cube.width
        )));
    }
    let r = (k / 2) as isize;
    let mut data = Vec::with_capacity(k * k * cube.channels);
    for dr in -r..=r {
        let rr = reflect(row as isize + dr, cube.height);
        for dc in -r..=r {
            let cc = reflect(col as isize + dc, cube.width);
            data.extend_from_slice(cube.pixel(rr, cc));
        }
    }
    Tensor::new(&[k, k, cube.channels], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Pixel {
    pub row: usize,
    pub col: usize,
    /// 0-indexed class.
    pub label: usize,
}

/// Both modality patches for one labeled pixel.
#[derive(Clone, Debug)]
pub struct ModalSample {
    /// `[k, k, C_p]`
    pub hsi: Tensor,
    /// `[k, k, C_L]`
    pub aux: Tensor,
    pub label: usize,
    pub row: usize,
    pub col: usize,
}

pub fn extract_samples(
    hsi: &SceneCube,
    aux: &SceneCube,
    pixels: &[Pixel],
    k: usize,
) -> Result<Vec<ModalSample>> {
    pixels
        .par_iter()
        .map(|p| {
            Ok(ModalSample {
                hsi: extract_patch(hsi, p.row, p.col, k)?,
                aux: extract_patch(aux, p.row, p.col, k)?,
                label: p.label,
                row: p.row,
                col: p.col,
            })
        })
        .collect()
}

/// Stacks samples into channel-first model input: hsi `[B, 1, C_p, k, k]`, aux `[B, C_L, k, k]`.
pub fn to_batch(samples: &[&ModalSample]) -> Result<(Batch, Vec<usize>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Data("empty batch".into()))?;
    let (k, cp, cl) = (
        first.hsi.shape()[0],
        first.hsi.shape()[2],
        first.aux.shape()[2],
    );
    let b = samples.len();
    let mut hsi = vec![0.0; b * cp * k * k];
    let mut aux = vec![0.0; b * cl * k * k];
    for (i, s) in samples.iter().enumerate() {
        if s.hsi.shape() != [k, k, cp] || s.aux.shape() != [k, k, cl] {
            return Err(Error::shape("to_batch", s.hsi.shape(), &[k, k, cp]));
        }
        channel_first(
            s.hsi.data(),
            k,
            cp,
            &mut hsi[i * cp * k * k..(i + 1) * cp * k * k],
        );
        channel_first(
            s.aux.data(),
            k,
            cl,
            &mut aux[i * cl * k * k..(i + 1) * cl * k * k],
        );
    }
    let labels = samples.iter().map(|s| s.label).collect();
    Ok((
        Batch {
            hsi: Tensor::new(&[b, 1, cp, k, k], hsi)?,
            aux: Tensor::new(&[b, cl, k, k], aux)?,
        },
        labels,
    ))
}

fn channel_first(src: &[f64], k: usize, c: usize, dst: &mut [f64]) {
    for p in 0..k * k {
        for ch in 0..c {
            dst[ch * k * k + p] = src[p * c + ch];
        }
    }
}

/// Axis-aligned block of pixels, `row0..row1` by `col0..col1` (end-exclusive).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

impl Rect {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row0..self.row1).contains(&row) && (self.col0..self.col1).contains(&col)
    }

    /// Chebyshev distance from a pixel to the rectangle, 0 inside.
    pub fn distance(&self, row: usize, col: usize) -> usize {
        let gap = |v: usize, lo: usize, hi: usize| {
            if v < lo {
                lo - v
            } else if v >= hi {
                v + 1 - hi
            } else {
                0
            }
        };
        gap(row, self.row0, self.row1).max(gap(col, self.col0, self.col1))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SplitMode {
    /// `per_class` random training pixels per class, the rest for testing.
    Random { per_class: usize },
    /// Test pixels lie inside the rectangles; training pixels lie more than `margin`
    /// pixels away from all of them.
    Spatial {
        test_regions: Vec<Rect>,
        margin: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<Pixel>,
    pub test: Vec<Pixel>,
}

/// Partitions labeled pixels. Both lists come back in raster order.
pub fn make_split(labels: &LabelMap, spec: &SplitSpec) -> Result<Split> {
    let labeled = labels.labeled();
    let (mut train, mut test) = match &spec.mode {
        SplitMode::Random { per_class } => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let (mut train, mut test) = (Vec::new(), Vec::new());
            for class in 0..labels.classes() {
                let mut members: Vec<Pixel> = labeled
                    .iter()
                    .copied()
                    .filter(|p| p.label == class)
                    .collect();
                if members.is_empty() {
                    continue;
                }
                if members.len() < *per_class {
                    return Err(Error::Data(format!(
                        "class {} has {} labeled pixels, fewer than the {per_class} requested",
                        class + 1,
                        members.len()
                    )));
                }
                members.shuffle(&mut rng);
                test.extend_from_slice(&members[*per_class..]);
                members.truncate(*per_class);
                train.extend(members);
            }
            (train, test)
        }
        SplitMode::Spatial {
            test_regions,
            margin,
        } => {
            if test_regions.is_empty() {
                return Err(Error::config(
                    "test_regions",
                    "spatial split needs at least one region",
                ));
            }
            let near = |p: &Pixel| {
                test_regions
                    .iter()
                    .map(|r| r.distance(p.row, p.col))
                    .min()
                    .unwrap()
            };
            let test = labeled.iter().copied().filter(|p| near(p) == 0).collect();
            let train = labeled
                .iter()
                .copied()
                .filter(|p| near(p) > *margin)
                .collect();
            (train, test)
        }
    };
    if train.is_empty() || test.is_empty() {
        return Err(Error::Data(format!(
            "split leaves {} training and {} test pixels",
            train.len(),
            test.len()
        )));
    }
    train.sort();
    test.sort();
    Ok(Split { train, test })
}
