use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::{local_variance, GrayImage};
use crate::error::{Error, Result};
use crate::rng::{fnv1a, rng_for, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbedKind {
    /// Flips the least significant bit at uniformly random positions.
    LsbReplace,
    /// ±1 at uniformly random positions.
    Pm1Uniform,
    /// ±1 at positions drawn with probability proportional to local variance.
    Pm1Adaptive,
    /// `s · (−1)^(y+x)` with one random sign `s` per image, at positions
    /// biased toward smooth regions.
    HfNoise,
}

impl std::fmt::Display for EmbedKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            EmbedKind::LsbReplace => "lsb-replace",
            EmbedKind::Pm1Uniform => "pm1-uniform",
            EmbedKind::Pm1Adaptive => "pm1-adaptive",
            EmbedKind::HfNoise => "hf-noise",
        };
        f.write_str(s)
    }
}

fn default_window() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedScheme {
    pub kind: EmbedKind,
    /// Changed pixels per pixel.
    pub rate: f64,
    pub scheme_seed: u64,
    /// Side of the variance window used by `pm1-adaptive`; ignored otherwise.
    #[serde(default = "default_window")]
    pub variance_window: usize,
}

/// Added to every selection weight so zero-variance pixels stay reachable.
const WEIGHT_FLOOR: f64 = 1e-3;

/// `hf-noise` weights positions by `1 / (var + 1)^HF_FLATNESS_POWER`.
const HF_FLATNESS_POWER: i32 = 2;

impl EmbedScheme {
    pub fn new(kind: EmbedKind, rate: f64, scheme_seed: u64) -> Self {
        Self { kind, rate, scheme_seed, variance_window: 3 }
    }

    pub fn with_window(mut self, window: usize) -> Self {
        self.variance_window = window;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rate > 0.0 && self.rate <= 1.0) {
            return Err(Error::Task(format!("embedding rate must lie in (0, 1], got {}", self.rate)));
        }
        if self.kind == EmbedKind::Pm1Adaptive && (self.variance_window < 3 || self.variance_window.is_multiple_of(2)) {
            return Err(Error::Task(format!(
                "variance window must be odd and >= 3, got {}",
                self.variance_window
            )));
        }
        Ok(())
    }

    /// Name used in manifests and logs, e.g. `pm1-adaptive/5`.
    pub fn label(&self) -> String {
        match self.kind {
            EmbedKind::Pm1Adaptive => format!("{}/{}", self.kind, self.variance_window),
            k => k.to_string(),
        }
    }

    /// Pixels a full payload changes on an `h x w` image.
    pub fn payload(&self, h: usize, w: usize) -> usize {
        let n = h * w;
        ((self.rate * n as f64).round().max(0.0) as usize).min(n)
    }
}

/// What one embedding did.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedReport {
    pub selected: usize,
    pub changed: usize,
    /// Selected positions left unchanged because the change would leave [0, 255].
    pub clamped: usize,
}

impl EmbedReport {
    pub fn add(&mut self, other: &EmbedReport) {
        self.selected += other.selected;
        self.changed += other.changed;
        self.clamped += other.clamped;
    }
}

pub fn embed(cover: &GrayImage, scheme: &EmbedScheme) -> GrayImage {
    embed_with_report(cover, scheme).0
}

/// Embeds a full payload. The random stream depends only on the cover
/// content and `scheme_seed`.
pub fn embed_with_report(cover: &GrayImage, scheme: &EmbedScheme) -> (GrayImage, EmbedReport) {
    let (h, w) = (cover.height(), cover.width());
    let n = h * w;
    let amount = scheme.payload(h, w);
    let mut rng = rng_for(scheme.scheme_seed, &[stream::EMBED, fnv1a(cover.pixels())]);
    let mut stego = cover.clone();
    let mut report = EmbedReport { selected: amount, ..Default::default() };
    if amount == 0 {
        return (stego, report);
    }

    let positions: Vec<usize> = match scheme.kind {
        EmbedKind::LsbReplace | EmbedKind::Pm1Uniform => index::sample(&mut rng, n, amount).into_vec(),
        EmbedKind::Pm1Adaptive => {
            let var = local_variance(cover, scheme.variance_window);
            weighted(&mut rng, &var, amount, |v| v + WEIGHT_FLOOR)
        }
        EmbedKind::HfNoise => {
            let var = local_variance(cover, 3);
            weighted(&mut rng, &var, amount, |v| (v + 1.0).powi(-HF_FLATNESS_POWER))
        }
    };
    let sign: i16 = if rng.gen::<bool>() { 1 } else { -1 };

    let px = stego.pixels_mut();
    for &p in &positions {
        let old = px[p] as i16;
        let new = match scheme.kind {
            EmbedKind::LsbReplace => old ^ 1,
            EmbedKind::Pm1Uniform | EmbedKind::Pm1Adaptive => old + if rng.gen::<bool>() { 1 } else { -1 },
            EmbedKind::HfNoise => {
                let (y, x) = (p / w, p % w);
                old + if (y + x) % 2 == 0 { sign } else { -sign }
            }
        };
        if (0..=255).contains(&new) {
            px[p] = new as u8;
            report.changed += 1;
        } else {
            report.clamped += 1;
        }
    }
    (stego, report)
}

fn weighted<R: Rng>(rng: &mut R, base: &[f64], amount: usize, f: impl Fn(f64) -> f64) -> Vec<usize> {
    // Weights are strictly positive and finite, so sampling cannot fail.
    index::sample_weighted(rng, base.len(), |i| f(base[i]), amount)
        .expect("positive finite selection weights")
        .into_vec()
}
