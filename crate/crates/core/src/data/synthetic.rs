//! Sea-like backgrounds with elongated bright or low-contrast "vessels".

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, Dataset, Sample};
use crate::seed::rng_for;
use crate::tensor::{Shape, Tensor};

pub const IMAGE_SIZES: [usize; 3] = [16, 32, 64];

const TRAIN_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub image_size: usize,
    pub n_train: usize,
    pub n_eval: usize,
    /// Inclusive vessel-count range per image.
    pub vessels_per_image: (usize, usize),
    /// Inclusive length/width ratio range.
    pub vessel_aspect: (f64, f64),
    /// Vessel length as a fraction of the image side.
    pub vessel_length: (f64, f64),
    /// When the count range starts at 0, probability of a vessel-free image;
    /// otherwise counts are drawn uniformly from the range minus zero.
    pub empty_prob: f64,
    /// Probability that a vessel is only slightly brighter than the sea.
    pub low_contrast_prob: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            n_train: 200,
            n_eval: 50,
            vessels_per_image: (0, 3),
            vessel_aspect: (2.0, 6.0),
            vessel_length: (0.25, 0.5),
            empty_prob: 0.05,
            low_contrast_prob: 0.2,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn check(&self) -> Result<(), DataError> {
        if !IMAGE_SIZES.contains(&self.image_size) {
            return Err(DataError::BadImageSize(self.image_size));
        }
        if self.n_train == 0 {
            return Err(DataError::ZeroCount("n_train"));
        }
        if self.n_eval == 0 {
            return Err(DataError::ZeroCount("n_eval"));
        }
        let range = |name, lo: f64, hi: f64, ok: bool| {
            if ok && lo <= hi {
                Ok(())
            } else {
                Err(DataError::BadRange { name, lo, hi })
            }
        };
        let (vlo, vhi) = self.vessels_per_image;
        range("vessels_per_image", vlo as f64, vhi as f64, true)?;
        let (alo, ahi) = self.vessel_aspect;
        range("vessel_aspect", alo, ahi, alo >= 1.0 && ahi.is_finite())?;
        let (llo, lhi) = self.vessel_length;
        range("vessel_length", llo, lhi, llo > 0.0 && lhi <= 1.0)?;
        for (name, p) in [("empty_prob", self.empty_prob), ("low_contrast_prob", self.low_contrast_prob)] {
            range(name, p, p, (0.0..=1.0).contains(&p))?;
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(DataError::BadNoise(self.noise_sigma));
        }
        Ok(())
    }
}

/// Box-Muller standard normal.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

struct Vessel {
    cx: f64,
    cy: f64,
    cos: f64,
    sin: f64,
    half_len: f64,
    half_wid: f64,
    contrast: f64,
}

impl Vessel {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        u.abs() <= self.half_len && v.abs() <= self.half_wid
    }
}

/// Renders one sample from its own random stream.
pub fn render_sample(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Sample {
    let n = cfg.image_size;
    let size = n as f64;
    let (vlo, vhi) = cfg.vessels_per_image;
    let count = if vhi == 0 {
        0
    } else if vlo == 0 {
        if rng.gen_bool(cfg.empty_prob) {
            0
        } else {
            rng.gen_range(1..=vhi)
        }
    } else {
        rng.gen_range(vlo..=vhi)
    };

    // Low-frequency sea: per-channel base colour plus one slow plane wave.
    let base = [
        rng.gen_range(0.10..0.30),
        rng.gen_range(0.20..0.40),
        rng.gen_range(0.30..0.50),
    ];
    let amp = rng.gen_range(0.02..0.08);
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let freq = std::f64::consts::TAU * rng.gen_range(0.5..1.5) / size;
    let (kx, ky) = (freq * theta.cos(), freq * theta.sin());
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);

    let vessels: Vec<Vessel> = (0..count)
        .map(|_| {
            let len = rng.gen_range(cfg.vessel_length.0..=cfg.vessel_length.1) * size;
            let aspect = rng.gen_range(cfg.vessel_aspect.0..=cfg.vessel_aspect.1);
            let angle = rng.gen_range(0.0..std::f64::consts::PI);
            let contrast = if rng.gen_bool(cfg.low_contrast_prob) {
                rng.gen_range(0.12..0.2)
            } else {
                rng.gen_range(0.35..0.6)
            };
            Vessel {
                cx: rng.gen_range(0.0..size),
                cy: rng.gen_range(0.0..size),
                cos: angle.cos(),
                sin: angle.sin(),
                half_len: len / 2.0,
                half_wid: (len / aspect).max(1.0) / 2.0,
                contrast,
            }
        })
        .collect();

    let mut mask = vec![0u8; n * n];
    let mut image = vec![0f32; 3 * n * n];
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let wave = amp * (kx * px + ky * py + phase).sin();
            let hit = vessels.iter().find(|v| v.contains(px, py));
            if hit.is_some() {
                mask[y * n + x] = 1;
            }
            for (c, b) in base.iter().enumerate() {
                let mut v = b + wave;
                if let Some(vs) = hit {
                    v += vs.contrast;
                }
                v += cfg.noise_sigma * normal(rng);
                image[(c * n + y) * n + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Sample {
        image: Tensor::from_vec(Shape::new(1, 3, n, n), image).expect("sized above"),
        mask,
    }
}

fn render_set(cfg: &SyntheticConfig, stream: u64, count: usize) -> Dataset {
    let samples = (0..count)
        .map(|i| render_sample(cfg, &mut rng_for(&[cfg.seed, stream, i as u64])))
        .collect();
    Dataset::new(samples).expect("uniform sizes")
}

/// Generates `(train, eval)`. Every image has its own seed-derived stream,
/// so changing one count leaves the other set and earlier images intact.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<(Dataset, Dataset), DataError> {
    cfg.check()?;
    Ok((
        render_set(cfg, TRAIN_STREAM, cfg.n_train),
        render_set(cfg, EVAL_STREAM, cfg.n_eval),
    ))
}
