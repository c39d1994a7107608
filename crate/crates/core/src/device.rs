//! Simulated edge accelerator: an additive roofline latency model plus
//! FP16 deploy-mode accuracy.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::data::Dataset;
use crate::metrics::{MiouAccumulator, IGNORE_LABEL};
use crate::network::{argmax_labels, Network};
use crate::precision::OverflowPolicy;
use crate::tensor::{Scalar, Shape, Tensor, TensorError};

/// Samples per deploy-mode forward inside [`measure`]. Deploy inference is
/// per-sample independent, so this only affects speed.
const EVAL_BATCH: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum DeviceError {
    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("{key} must be positive and finite, got {value}")]
    NonPositive { key: &'static str, value: f64 },
    #[error("missing key {0}")]
    MissingKey(&'static str),
    #[error("evaluation dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Throughput characteristics of the simulated target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviceProfile {
    /// Multiply-accumulates per second.
    pub mac_rate: f64,
    /// Bytes per second.
    pub mem_bandwidth: f64,
    /// Seconds of fixed cost per operator.
    pub per_op_overhead: f64,
    pub weight_byte_width: u32,
    pub activation_byte_width: u32,
    pub overflow_policy: OverflowPolicy,
}

impl Default for DeviceProfile {
    fn default() -> Self {
        Self {
            mac_rate: 2.0e9,
            mem_bandwidth: 1.0e9,
            per_op_overhead: 5.0e-4,
            weight_byte_width: 2,
            activation_byte_width: 2,
            overflow_policy: OverflowPolicy::Saturate,
        }
    }
}

const KEYS: [&str; 6] = [
    "mac_rate",
    "mem_bandwidth",
    "per_op_overhead",
    "weight_byte_width",
    "activation_byte_width",
    "overflow_policy",
];

impl DeviceProfile {
    pub fn check(&self) -> Result<(), DeviceError> {
        for (key, value) in [
            ("mac_rate", self.mac_rate),
            ("mem_bandwidth", self.mem_bandwidth),
            ("per_op_overhead", self.per_op_overhead),
            ("weight_byte_width", self.weight_byte_width as f64),
            ("activation_byte_width", self.activation_byte_width as f64),
        ] {
            if !(value.is_finite() && value > 0.0) {
                return Err(DeviceError::NonPositive { key, value });
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DeviceError> {
        let text = std::fs::read_to_string(path).map_err(|source| DeviceError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        text.parse()
    }

    /// Same profile with every rate multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            mac_rate: self.mac_rate * k,
            mem_bandwidth: self.mem_bandwidth * k,
            ..*self
        }
    }
}

/// `key=value` lines; `#` starts a comment. Keys absent from the text keep
/// their default values.
impl FromStr for DeviceProfile {
    type Err = DeviceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut p = Self::default();
        for (i, raw) in s.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |detail: String| DeviceError::Parse { line: i + 1, detail };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            let num = || v.parse::<f64>().map_err(|_| err(format!("{k}: bad number {v:?}")));
            let width = || v.parse::<u32>().map_err(|_| err(format!("{k}: bad byte width {v:?}")));
            match k {
                "mac_rate" => p.mac_rate = num()?,
                "mem_bandwidth" => p.mem_bandwidth = num()?,
                "per_op_overhead" => p.per_op_overhead = num()?,
                "weight_byte_width" => p.weight_byte_width = width()?,
                "activation_byte_width" => p.activation_byte_width = width()?,
                "overflow_policy" => {
                    p.overflow_policy = OverflowPolicy::parse(v)
                        .ok_or_else(|| err(format!("unknown overflow policy {v:?}")))?
                }
                _ => return Err(err(format!("unknown key {k:?} (known: {})", KEYS.join(", ")))),
            }
        }
        p.check()?;
        Ok(p)
    }
}

impl fmt::Display for DeviceProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "mac_rate={:e}", self.mac_rate)?;
        writeln!(f, "mem_bandwidth={:e}", self.mem_bandwidth)?;
        writeln!(f, "per_op_overhead={:e}", self.per_op_overhead)?;
        writeln!(f, "weight_byte_width={}", self.weight_byte_width)?;
        writeln!(f, "activation_byte_width={}", self.activation_byte_width)?;
        writeln!(f, "overflow_policy={}", self.overflow_policy.as_str())
    }
}

/// Device-side numbers for one network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub fps: f64,
    pub latency_ms: f64,
    pub miou_device: f64,
    pub param_count: usize,
    pub macs: u64,
}

/// Modelled single-image latency in milliseconds.
pub fn estimate_latency<T: Scalar>(network: &Network<T>, input: Shape, profile: &DeviceProfile) -> f64 {
    let ab = profile.activation_byte_width as f64;
    let wb = profile.weight_byte_width as f64;
    let seconds: f64 = network
        .op_costs(input)
        .iter()
        .map(|op| {
            let bytes = (op.in_elems + op.out_elems) as f64 * ab + op.weight_elems as f64 * wb;
            op.macs as f64 / profile.mac_rate + bytes / profile.mem_bandwidth + profile.per_op_overhead
        })
        .sum();
    seconds * 1e3
}

/// Mean per-image mIoU of `logits_fn` predictions over `data`.
pub fn dataset_miou<T, F>(data: &Dataset, num_classes: usize, mut logits_fn: F) -> Result<f64, DeviceError>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<Tensor<T>, TensorError>,
{
    let (h, w) = data.image_hw().ok_or(DeviceError::EmptyDataset)?;
    let mut acc = MiouAccumulator::new(num_classes, IGNORE_LABEL);
    for (x, labels) in data.batches(EVAL_BATCH) {
        let logits = logits_fn(&x.cast())?;
        acc.add_batch(&argmax_labels(&logits), &labels, h * w)?;
    }
    acc.finalize().ok_or(DeviceError::EmptyDataset)
}

/// Deploy-mode mIoU and modelled speed of `network` on `data`.
pub fn measure<T: Scalar>(
    network: &Network<T>,
    data: &Dataset,
    profile: &DeviceProfile,
) -> Result<Measurement, DeviceError> {
    let (h, w) = data.image_hw().ok_or(DeviceError::EmptyDataset)?;
    let table = network.deploy_table(profile.overflow_policy);
    let miou_device = dataset_miou(data, network.num_classes(), |x| network.forward_deployed(&table, x))?;
    let input = Shape::new(1, network.in_channels(), h, w);
    let latency_ms = estimate_latency(network, input, profile);
    Ok(Measurement {
        fps: 1e3 / latency_ms,
        latency_ms,
        miou_device,
        param_count: network.param_count(),
        macs: network.mac_count(input),
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};
    use crate::genotype::{parse, sample_random, SearchSpaceConfig};

    fn profile() -> DeviceProfile {
        DeviceProfile {
            mac_rate: 1e9,
            mem_bandwidth: 1e9,
            per_op_overhead: 1e-4,
            ..Default::default()
        }
    }

    #[test]
    fn head_only_latency() {
        let net = Network::<f32>::build(&[], 3, 2, 0).unwrap();
        let s = Shape::new(1, 3, 32, 32);
        // 1x1 conv 3 -> 2 on 1024 pixels.
        let macs = 3.0 * 2.0 * 1024.0;
        let bytes = (3.0 * 1024.0 + 2.0 * 1024.0) * 2.0 + (6.0 + 2.0) * 2.0;
        let expect = (macs / 1e9 + bytes / 1e9 + 1e-4) * 1e3;
        assert!((estimate_latency(&net, s, &profile()) - expect).abs() < 1e-12);
    }

    #[test]
    fn conv_block_closed_form() {
        let net = parse("B:CA,k3,c8,aR;H").unwrap().build_network::<f32>(3, 2, 0).unwrap();
        let s = Shape::new(1, 3, 32, 32);
        let px = 1024.0;
        let conv = 221_184.0 / 1e9 + ((3.0 + 8.0) * px * 2.0 + (216.0 + 8.0) * 2.0) / 1e9 + 1e-4;
        let act = (8.0 * px * 2.0 * 2.0) / 1e9 + 1e-4;
        let head = 16.0 * px / 1e9 + ((8.0 + 2.0) * px * 2.0 + 18.0 * 2.0) / 1e9 + 1e-4;
        let got = estimate_latency(&net, s, &profile());
        assert!((got - (conv + act + head) * 1e3).abs() < 1e-12, "{got}");
    }

    #[test]
    fn shape_preserving_block_increases_latency() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = SearchSpaceConfig::default();
        let s = Shape::new(1, 3, 32, 32);
        for _ in 0..100 {
            let g = sample_random(&cfg, &mut rng);
            if g.block_count() >= 6 {
                continue;
            }
            let net = g.build_network::<f32>(3, 2, 0).unwrap();
            let c = net.layer_shapes(&Tensor::zeros(Shape::new(1, 3, 4, 4))).unwrap();
            let last = c[c.len() - 2].c;
            let extra = format!("{};B:CBA,k1,c{last},aR;H", &g.to_string()[..g.to_string().len() - 2]);
            let Ok(g2) = parse(&extra) else { continue };
            let net2 = g2.build_network::<f32>(3, 2, 0).unwrap();
            let (a, b) = (estimate_latency(&net, s, &profile()), estimate_latency(&net2, s, &profile()));
            assert!(b > a, "{g} -> {g2}");
        }
    }

    #[test]
    fn scale_equivariance() {
        let net = parse("B:MB,e4,c16,aR;P:max;B:CBA,k5,c24,aG;H")
            .unwrap()
            .build_network::<f32>(3, 2, 0)
            .unwrap();
        let s = Shape::new(1, 3, 32, 32);
        let p = DeviceProfile {
            per_op_overhead: 0.0,
            ..profile()
        };
        let full = estimate_latency(&net, s, &p);
        let half = estimate_latency(&net, s, &p.scaled(2.0));
        assert!((full - 2.0 * half).abs() <= 1e-12 * full);
    }

    #[test]
    fn default_profile_lands_in_plotted_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = SearchSpaceConfig::default();
        let s = Shape::new(1, 3, 32, 32);
        let n = 500;
        let inside = (0..n)
            .filter(|_| {
                let net = sample_random(&cfg, &mut rng).build_network::<f32>(3, 2, 0).unwrap();
                let fps = 1e3 / estimate_latency(&net, s, &DeviceProfile::default());
                (10.0..=200.0).contains(&fps)
            })
            .count();
        assert!(inside * 10 >= n * 8, "{inside}/{n} within 10..200 fps");
    }

    #[test]
    fn profile_text_round_trip() {
        let p = DeviceProfile::default();
        let back: DeviceProfile = p.to_string().parse().unwrap();
        assert_eq!(back, p);
        let q: DeviceProfile = "# comment\nmac_rate = 5e8\n\noverflow_policy=infinity\n".parse().unwrap();
        assert_eq!(q.mac_rate, 5e8);
        assert_eq!(q.overflow_policy, OverflowPolicy::Infinity);
        assert!(matches!("mac_rate=0".parse::<DeviceProfile>(), Err(DeviceError::NonPositive { .. })));
        assert!(matches!("speed=3".parse::<DeviceProfile>(), Err(DeviceError::Parse { line: 1, .. })));
        assert!(matches!("\nmac_rate".parse::<DeviceProfile>(), Err(DeviceError::Parse { line: 2, .. })));
        assert!(matches!("weight_byte_width=1.5".parse::<DeviceProfile>(), Err(DeviceError::Parse { .. })));
    }

    #[test]
    fn measure_is_deterministic_and_bounded() {
        let (_, eval) = generate_synthetic(&SyntheticConfig {
            image_size: 16,
            n_train: 1,
            n_eval: 20,
            ..Default::default()
        })
        .unwrap();
        let net = parse("B:CBA,k3,c8,aR;P:max;B:CA,k3,c8,aG;H")
            .unwrap()
            .build_network::<f32>(3, 2, 5)
            .unwrap();
        let a = measure(&net, &eval, &DeviceProfile::default()).unwrap();
        let b = measure(&net, &eval, &DeviceProfile::default()).unwrap();
        assert_eq!(a, b);
        assert!((0.0..=1.0).contains(&a.miou_device));
        assert!((a.fps * a.latency_ms - 1e3).abs() < 1e-9);
        assert_eq!(a.param_count, net.param_count());
        assert!(matches!(
            measure(&net, &Dataset::default(), &DeviceProfile::default()),
            Err(DeviceError::EmptyDataset)
        ));
    }
}
