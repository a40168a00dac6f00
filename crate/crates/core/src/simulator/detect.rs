//! Synthetic open-vocabulary detector driven by the renderer's masks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Observation;
use crate::geometry::BinaryMask;
use crate::state::{BBox, Detection};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorNoise {
    /// Probability that a visible object is not reported.
    #[serde(default)]
    pub miss_rate: f64,
    /// Standard deviation of per-corner jitter, pixels.
    #[serde(default)]
    pub bbox_jitter: f64,
    /// `[lo, hi]` confidence range. Exact boxes score `hi`.
    #[serde(default = "default_conf_range")]
    pub conf_range: [f64; 2],
    /// Probability that the box of some other visible object is reported
    /// under the requested label.
    #[serde(default)]
    pub confusion_rate: f64,
}

fn default_conf_range() -> [f64; 2] {
    [0.5, 0.95]
}

impl Default for DetectorNoise {
    fn default() -> Self {
        Self {
            miss_rate: 0.0,
            bbox_jitter: 0.0,
            conf_range: default_conf_range(),
            confusion_rate: 0.0,
        }
    }
}

impl DetectorNoise {
    pub fn validate(&self) -> Result<(), String> {
        let [lo, hi] = self.conf_range;
        if !(0.0..=1.0).contains(&self.miss_rate) || !(0.0..=1.0).contains(&self.confusion_rate) {
            return Err("detector rates must lie in [0, 1]".into());
        }
        if !(self.bbox_jitter >= 0.0) || !self.bbox_jitter.is_finite() {
            return Err("bbox_jitter must be finite and >= 0".into());
        }
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(format!("bad confidence range {:?}", self.conf_range));
        }
        Ok(())
    }
}

/// Exact box of a mask: pixel centres sit on integer coordinates, so each
/// set pixel covers `±0.5` around its index.
pub fn mask_bbox(mask: &BinaryMask) -> Option<BBox> {
    let (x0, y0, x1, y1) = mask.bounds()?;
    Some(BBox {
        u_min: x0 as f64 - 0.5,
        v_min: y0 as f64 - 0.5,
        u_max: x1 as f64 + 0.5,
        v_max: y1 as f64 + 0.5,
    })
}

/// Clamps a box to the image extent `[-0.5, W - 0.5] × [-0.5, H - 0.5]`.
pub fn clamp_to_image(b: BBox, width: usize, height: usize) -> BBox {
    let (wu, hv) = (width as f64 - 0.5, height as f64 - 0.5);
    BBox {
        u_min: b.u_min.clamp(-0.5, wu),
        v_min: b.v_min.clamp(-0.5, hv),
        u_max: b.u_max.clamp(-0.5, wu),
        v_max: b.v_max.clamp(-0.5, hv),
    }
}

/// Mixes several words into one RNG seed (splitmix64 finalizer).
pub fn mix_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x9E37_79B9_7F4A_7C15u64, |acc, &p| {
        let mut z = acc
            ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(acc << 6)
                .wrapping_add(acc >> 2);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    })
}

fn label_hash(label: &str) -> u64 {
    label.bytes().fold(0xCBF2_9CE4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01B3)
    })
}

/// Ground-truth detections with seeded dropouts, confusions and corner jitter.
///
/// Each label draws from its own stream derived from `seed`, so results do not
/// depend on label order.
pub fn oracle_detect(
    obs: &Observation,
    labels: &[String],
    noise: &DetectorNoise,
    source_id: &str,
    seed: u64,
) -> Vec<Detection> {
    let (w, h) = (obs.depth.width(), obs.depth.height());
    let visible: Vec<(&str, BBox)> = obs
        .objects
        .iter()
        .filter_map(|o| {
            obs.masks
                .get(&o.id)
                .and_then(mask_bbox)
                .map(|b| (o.label.as_str(), b))
        })
        .collect();
    let [lo, hi] = noise.conf_range;
    let mut out = Vec::new();
    for label in labels {
        let want = label.trim().to_lowercase();
        let Some(idx) = visible.iter().position(|(l, _)| l.to_lowercase() == want) else {
            continue;
        };
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, label_hash(&want)]));
        if rng.random::<f64>() < noise.miss_rate {
            continue;
        }
        let mut truth = visible[idx].1;
        if visible.len() > 1 && rng.random::<f64>() < noise.confusion_rate {
            let k = rng.random_range(0..visible.len() - 1);
            truth = visible[if k >= idx { k + 1 } else { k }].1;
        }
        let (bbox, confidence) = if noise.bbox_jitter > 0.0 {
            let n = Normal::new(0.0, noise.bbox_jitter).expect("validated jitter");
            let e: [f64; 4] = std::array::from_fn(|_| n.sample(&mut rng));
            let jittered = BBox {
                u_min: truth.u_min + e[0],
                v_min: truth.v_min + e[1],
                u_max: truth.u_max + e[2],
                v_max: truth.v_max + e[3],
            };
            let b = clamp_to_image(jittered, w, h);
            let b = if b.validate().is_ok() {
                b
            } else {
                clamp_to_image(truth, w, h)
            };
            let mse = e.iter().map(|x| x * x).sum::<f64>() / 4.0;
            let sigma2 = noise.bbox_jitter * noise.bbox_jitter;
            (b, lo + (hi - lo) * (-mse / (2.0 * sigma2)).exp())
        } else {
            (clamp_to_image(truth, w, h), hi)
        };
        if let Ok(d) = Detection::new(label.clone(), bbox, confidence, source_id) {
            out.push(d);
        }
    }
    out
}
