//! Datasets: MNIST from IDX files and two synthetic 2-D problems.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labelled examples with values in `[0, 1]`, stored in `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub x: Vec<f32>,
    pub y: Vec<usize>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, input_shape: Vec<usize>, classes: usize, x: Vec<f32>, y: Vec<usize>) -> Result<Self> {
        let dim: usize = input_shape.iter().product();
        if dim == 0 || x.len() != dim * y.len() {
            return Err(Error::Dataset(format!(
                "{} values for {} examples of size {dim}",
                x.len(),
                y.len()
            )));
        }
        if let Some(bad) = y.iter().find(|&&l| l >= classes) {
            return Err(Error::Dataset(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self {
            name: name.into(),
            input_shape,
            classes,
            x,
            y,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn example(&self, i: usize) -> &[f32] {
        let d = self.dim();
        &self.x[i * d..(i + 1) * d]
    }

    /// Inputs `[B, input_shape...]` and labels for the given indices.
    pub fn batch<T: Real>(&self, idx: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend(self.example(i).iter().map(|&v| T::of(v as f64)));
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(&self.input_shape);
        let x = Tensor::new(shape, data).expect("batch shape");
        (x, idx.iter().map(|&i| self.y[i]).collect())
    }

    /// The first `n` examples (or all of them).
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            name: self.name.clone(),
            input_shape: self.input_shape.clone(),
            classes: self.classes,
            x: self.x[..n * self.dim()].to_vec(),
            y: self.y[..n].to_vec(),
        }
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        let mut x = Vec::with_capacity(idx.len() * self.dim());
        for &i in idx {
            x.extend_from_slice(self.example(i));
        }
        Self {
            name: self.name.clone(),
            input_shape: self.input_shape.clone(),
            classes: self.classes,
            x,
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }

    /// Minibatch index lists for one epoch, shuffled by `rng`. The last
    /// partial batch is kept.
    pub fn epoch_batches(&self, batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

/// Parses an IDX3 image file, scaling bytes to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    if bytes.len() < 16 {
        return Err(Error::Truncated {
            path: path.into(),
            detail: format!("{} bytes, header needs 16", bytes.len()),
        });
    }
    let magic = be_u32(bytes, 0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: IDX_IMAGES_MAGIC,
            actual: magic,
        });
    }
    let (n, rows, cols) = (be_u32(bytes, 4) as usize, be_u32(bytes, 8) as usize, be_u32(bytes, 12) as usize);
    let need = n * rows * cols;
    if bytes.len() - 16 < need {
        return Err(Error::Truncated {
            path: path.into(),
            detail: format!("{} pixel bytes, header promises {need}", bytes.len() - 16),
        });
    }
    let pixels = bytes[16..16 + need].iter().map(|&b| b as f32 / 255.0).collect();
    Ok((n, rows, cols, pixels))
}

/// Parses an IDX1 label file.
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    if bytes.len() < 8 {
        return Err(Error::Truncated {
            path: path.into(),
            detail: format!("{} bytes, header needs 8", bytes.len()),
        });
    }
    let magic = be_u32(bytes, 0);
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: IDX_LABELS_MAGIC,
            actual: magic,
        });
    }
    let n = be_u32(bytes, 4) as usize;
    if bytes.len() - 8 < n {
        return Err(Error::Truncated {
            path: path.into(),
            detail: format!("{} label bytes, header promises {n}", bytes.len() - 8),
        });
    }
    Ok(bytes[8..8 + n].iter().map(|&b| b as usize).collect())
}

fn load_idx_pair(dir: &Path, images: &str, labels: &str, name: &str) -> Result<Dataset> {
    let ip = dir.join(images);
    let lp = dir.join(labels);
    let ib = std::fs::read(&ip).map_err(|e| Error::io(&ip, e))?;
    let lb = std::fs::read(&lp).map_err(|e| Error::io(&lp, e))?;
    let (n, rows, cols, x) = parse_idx_images(&ib, &ip)?;
    let y = parse_idx_labels(&lb, &lp)?;
    if y.len() != n {
        return Err(Error::Dataset(format!(
            "{} has {n} images but {} has {} labels",
            ip.display(),
            lp.display(),
            y.len()
        )));
    }
    Dataset::new(name, vec![1, rows, cols], 10, x, y)
}

/// Loads the standard MNIST train/test IDX files from `dir`.
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<Split> {
    let dir = dir.as_ref();
    Ok(Split {
        train: load_idx_pair(dir, "train-images-idx3-ubyte", "train-labels-idx1-ubyte", "mnist")?,
        test: load_idx_pair(dir, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", "mnist")?,
    })
}

/// A line `w . x + b = 0` in the unit square.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Separator {
    pub w: [f64; 2],
    pub b: f64,
}

impl Separator {
    pub fn signed_value(&self, p: &[f32]) -> f64 {
        self.w[0] * p[0] as f64 + self.w[1] * p[1] as f64 + self.b
    }

    /// l-infinity distance from `p` to the line: `|w . p + b| / ||w||_1`.
    pub fn linf_distance(&self, p: &[f32]) -> f64 {
        self.signed_value(p).abs() / (self.w[0].abs() + self.w[1].abs())
    }

    pub fn label(&self, p: &[f32]) -> usize {
        usize::from(self.signed_value(p) > 0.0)
    }
}

fn random_separator(rng: &mut impl Rng) -> Separator {
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let w = [angle.cos(), angle.sin()];
    Separator {
        w,
        b: -0.5 * (w[0] + w[1]),
    }
}

/// `n` points on alternating sides of `sep`, none closer than `margin / 2`.
fn sample_margin(sep: &Separator, n: usize, margin: f64, rng: &mut impl Rng) -> Result<Dataset> {
    let mut x = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    while y.len() < n {
        let want = y.len() % 2;
        let p = [rng.gen::<f32>(), rng.gen::<f32>()];
        if sep.linf_distance(&p) >= margin / 2.0 && sep.label(&p) == want {
            x.extend_from_slice(&p);
            y.push(want);
        }
    }
    Dataset::new("synthetic-margin", vec![2], 2, x, y)
}

fn check_margin(margin: f64) -> Result<()> {
    if margin.is_nan() || margin <= 0.0 || margin >= 1.0 {
        return Err(Error::InvalidArgument(format!("margin must be in (0, 1), got {margin}")));
    }
    Ok(())
}

/// Two-class points in `[0, 1]^2` separated by a random line through the
/// centre, with no point closer than `margin / 2` (in l-infinity distance)
/// to the line. Classes alternate so the split is exactly balanced.
pub fn make_synthetic_margin(n: usize, margin: f64, seed: u64) -> Result<(Dataset, Separator)> {
    check_margin(margin)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sep = random_separator(&mut rng);
    Ok((sample_margin(&sep, n, margin, &mut rng)?, sep))
}

/// Train and test sets drawn independently around one shared separator.
pub fn make_synthetic_margin_split(n_train: usize, n_test: usize, margin: f64, seed: u64) -> Result<(Split, Separator)> {
    let (train, sep) = make_synthetic_margin(n_train, margin, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7465_7374);
    let test = sample_margin(&sep, n_test, margin, &mut rng)?;
    Ok((Split { train, test }, sep))
}

/// Two interleaving half circles scaled into `[0, 1]^2`, with Gaussian-like
/// noise of scale `noise` before clamping.
pub fn make_synthetic_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let t: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let (px, py) = if label == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        // sum of uniforms approximates a normal with unit variance
        let mut jitter = || (0..12).map(|_| rng.gen::<f64>()).sum::<f64>() - 6.0;
        let (px, py) = (px + noise * jitter(), py + noise * jitter());
        // raw range is about [-1, 2] x [-0.5, 1]
        x.push((((px + 1.0) / 3.0).clamp(0.0, 1.0)) as f32);
        x.push((((py + 0.5) / 1.5).clamp(0.0, 1.0)) as f32);
        y.push(label);
    }
    Dataset::new("synthetic-moons", vec![2], 2, x, y)
}
