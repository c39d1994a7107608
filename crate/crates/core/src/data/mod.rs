//! Synthetic vessel-segmentation data, the tensor container format and the
//! on-disk dataset layout.
//!
//! A dataset directory holds `index.txt` (one `image-file mask-file` line
//! per sample, paths relative to the directory), `images/` and `masks/`.

mod container;
mod synthetic;

pub use container::{
    load_container, save_container, Container, ContainerError, Dtype, Payload, MAGIC, VERSION,
};
pub use synthetic::{generate_synthetic, render_sample, SyntheticConfig, IMAGE_SIZES};

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::seed::rng_for;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("image size {0} not in {{16, 32, 64}}")]
    BadImageSize(usize),
    #[error("{0} must be at least 1")]
    ZeroCount(&'static str),
    #[error("invalid range {name}: [{lo}, {hi}]")]
    BadRange { name: &'static str, lo: f64, hi: f64 },
    #[error("noise sigma {0} must be finite and >= 0")]
    BadNoise(f64),
    #[error("fractions must be non-negative and sum to 1, got {0:?}")]
    BadFractions(Vec<f64>),
    #[error("partition {index} would be empty ({len} samples, fraction {fraction})")]
    EmptyPartition {
        index: usize,
        len: usize,
        fraction: f64,
    },
    #[error("dataset is empty")]
    Empty,
    #[error("sample {index}: {detail}")]
    BadSample { index: usize, detail: String },
    #[error("{path}:{line}: {detail}")]
    BadIndex {
        path: PathBuf,
        line: usize,
        detail: String,
    },
    #[error("{path}: {source}")]
    Container {
        path: PathBuf,
        #[source]
        source: ContainerError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One image with its per-pixel labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Shape (1, 3, H, W), values in [0, 1].
    pub image: Tensor<f32>,
    /// H*W labels, row-major.
    pub mask: Vec<u8>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape().h
    }

    pub fn width(&self) -> usize {
        self.image.shape().w
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&m| m == 1).count() as f64 / self.mask.len().max(1) as f64
    }
}

/// An ordered list of equally sized samples.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self, DataError> {
        if let Some(first) = samples.first() {
            let s = first.image.shape();
            for (index, x) in samples.iter().enumerate() {
                let xs = x.image.shape();
                if xs.n != 1 || xs.c != 3 || xs.h != s.h || xs.w != s.w {
                    return Err(DataError::BadSample {
                        index,
                        detail: format!("image shape {xs}, expected (1,3,{},{})", s.h, s.w),
                    });
                }
                if x.mask.len() != xs.plane() {
                    return Err(DataError::BadSample {
                        index,
                        detail: format!("mask has {} labels for {} pixels", x.mask.len(), xs.plane()),
                    });
                }
            }
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// (H, W) of every sample, or `None` when empty.
    pub fn image_hw(&self) -> Option<(usize, usize)> {
        self.samples.first().map(|s| (s.height(), s.width()))
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Stacks the given samples into an (N,3,H,W) batch plus N*H*W labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<u8>) {
        let (h, w) = self.image_hw().expect("non-empty dataset");
        let mut data = Vec::with_capacity(indices.len() * 3 * h * w);
        let mut labels = Vec::with_capacity(indices.len() * h * w);
        for &i in indices {
            data.extend_from_slice(self.samples[i].image.data());
            labels.extend_from_slice(&self.samples[i].mask);
        }
        let t = Tensor::from_vec(Shape::new(indices.len(), 3, h, w), data).expect("consistent sizes");
        (t, labels)
    }

    /// Consecutive batches of at most `size` samples, in dataset order.
    pub fn batches(&self, size: usize) -> impl Iterator<Item = (Tensor<f32>, Vec<u8>)> + '_ {
        let idx: Vec<usize> = (0..self.len()).collect();
        let size = size.max(1);
        (0..self.len().div_ceil(size)).map(move |b| self.batch(&idx[b * size..((b + 1) * size).min(idx.len())]))
    }

    /// Writes the dataset in directory layout (see module docs).
    pub fn save_dir(&self, dir: &Path) -> Result<(), DataError> {
        let images = dir.join("images");
        let masks = dir.join("masks");
        fs::create_dir_all(&images).map_err(io_err(&images))?;
        fs::create_dir_all(&masks).map_err(io_err(&masks))?;
        let mut index = String::new();
        for (i, s) in self.samples.iter().enumerate() {
            let name = format!("{i:05}.lpnt");
            let (ip, mp) = (images.join(&name), masks.join(&name));
            let img = Container::new(s.image.shape().dims().to_vec(), Payload::F32(s.image.data().to_vec()))
                .expect("shape matches data");
            let mask = Container::new(vec![s.height(), s.width()], Payload::U8(s.mask.clone()))
                .expect("shape matches data");
            save_container(&ip, &img).map_err(|source| DataError::Container { path: ip, source })?;
            save_container(&mp, &mask).map_err(|source| DataError::Container { path: mp, source })?;
            index.push_str(&format!("images/{name} masks/{name}\n"));
        }
        let p = dir.join("index.txt");
        fs::write(&p, index).map_err(io_err(&p))
    }

    pub fn load_dir(dir: &Path) -> Result<Self, DataError> {
        let p = dir.join("index.txt");
        let text = fs::read_to_string(&p).map_err(io_err(&p))?;
        let bad = |line: usize, detail: String| DataError::BadIndex {
            path: p.clone(),
            line,
            detail,
        };
        let mut samples = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(img), Some(mask), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(bad(n + 1, format!("expected two paths, got {line:?}")));
            };
            let load = |rel: &str| {
                let path = dir.join(rel);
                load_container(&path).map_err(|source| DataError::Container { path, source })
            };
            let cont_err = |rel: &str, source| DataError::Container {
                path: dir.join(rel),
                source,
            };
            let (dims, data) = load(img)?.into_f32().map_err(|e| cont_err(img, e))?;
            let shape = Shape::from_dims(&dims)
                .filter(|s| s.n == 1 && s.c == 3)
                .ok_or_else(|| bad(n + 1, format!("image dims {dims:?}, expected [1,3,H,W]")))?;
            let (mdims, labels) = load(mask)?.into_u8().map_err(|e| cont_err(mask, e))?;
            if mdims != [shape.h, shape.w] {
                return Err(bad(n + 1, format!("mask dims {mdims:?} do not match image {shape}")));
            }
            samples.push(Sample {
                image: Tensor::from_vec(shape, data).expect("dims checked"),
                mask: labels,
            });
        }
        Self::new(samples)
    }
}

/// Shuffles `0..len` with `seed` and cuts it into consecutive partitions
/// whose sizes follow `fractions` (largest remainder rounding). Each
/// partition lists its indices in ascending order.
pub fn split_indices(len: usize, fractions: &[f64], seed: u64) -> Result<Vec<Vec<usize>>, DataError> {
    let sum: f64 = fractions.iter().sum();
    if fractions.is_empty()
        || fractions.iter().any(|f| !(f.is_finite() && *f >= 0.0))
        || (sum - 1.0).abs() > 1e-9
    {
        return Err(DataError::BadFractions(fractions.to_vec()));
    }
    let exact: Vec<f64> = fractions.iter().map(|f| f * len as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|e| (e + 1e-9).floor() as usize).collect();
    let mut left = len - sizes.iter().sum::<usize>().min(len);
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - sizes[a] as f64;
        let rb = exact[b] - sizes[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    if let Some(index) = sizes.iter().position(|&s| s == 0) {
        return Err(DataError::EmptyPartition {
            index,
            len,
            fraction: fractions[index],
        });
    }
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut rng_for(&[seed, 0x5350_4c49_54]));
    let mut out = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for s in sizes {
        let mut part = idx[start..start + s].to_vec();
        part.sort_unstable();
        out.push(part);
        start += s;
    }
    Ok(out)
}

/// Seeded disjoint partition of `dataset` (see [`split_indices`]).
pub fn split(dataset: &Dataset, fractions: &[f64], seed: u64) -> Result<Vec<Dataset>, DataError> {
    Ok(split_indices(dataset.len(), fractions, seed)?
        .iter()
        .map(|ix| dataset.subset(ix))
        .collect())
}
