use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{PlacementSeries, SensorSeries};
use crate::encoder::PlacementSpec;
use crate::{Error, Result, Rng};

/// Parameters of the synthetic multi-placement activity generator.
///
/// Every class owns, per placement and channel, a fundamental sinusoid at
/// `base_freq_hz · (class + 1)` (shifted slightly per placement) plus a weaker
/// second harmonic. A subject is a sequence of class segments. Phases,
/// amplitudes, segment order and channel offsets are shared by all subjects;
/// only the gain (drawn from `subject_scale`) and the noise differ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub classes: usize,
    pub placements: Vec<PlacementSpec>,
    pub subjects: usize,
    /// Timesteps of one contiguous activity segment.
    pub segment_len: usize,
    pub segments_per_class: usize,
    pub sampling_rate_hz: f64,
    pub base_freq_hz: f64,
    /// Signal-to-noise ratio in dB; `None` gives noiseless signals.
    pub snr_db: Option<f64>,
    /// Range of the per-subject gain.
    pub subject_scale: (f64, f64),
    /// Each channel gets a constant offset drawn from `[-channel_offset, channel_offset]`.
    pub channel_offset: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            placements: ["wrist", "chest", "ankle"].iter().map(|n| PlacementSpec { name: String::from(*n), channels: 3 }).collect(),
            subjects: 5,
            segment_len: 256,
            segments_per_class: 2,
            sampling_rate_hz: 50.0,
            base_freq_hz: 1.5,
            snr_db: Some(10.0),
            subject_scale: (1.0, 1.0),
            channel_offset: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("synthetic data needs at least 2 classes, got {}", self.classes)));
        }
        if self.placements.is_empty() || self.placements.iter().any(|p| p.channels == 0) {
            return Err(Error::Config("synthetic data needs at least one placement with channels".into()));
        }
        if self.subjects == 0 || self.segment_len == 0 || self.segments_per_class == 0 {
            return Err(Error::Config("subjects, segment_len and segments_per_class must be ≥ 1".into()));
        }
        let (lo, hi) = self.subject_scale;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("subject_scale ({lo}, {hi}) must satisfy 0 < lo ≤ hi")));
        }
        if !(self.sampling_rate_hz > 0.0 && self.base_freq_hz > 0.0 && self.channel_offset >= 0.0) {
            return Err(Error::Config("sampling rate and base frequency must be positive, channel_offset ≥ 0".into()));
        }
        Ok(())
    }

    /// Fundamental frequency of `class` at placement index `placement`.
    pub fn frequency(&self, class: usize, placement: usize) -> f64 {
        self.base_freq_hz * (class + 1) as f64 * (1.0 + 0.1 * placement as f64)
    }

    pub fn timesteps_per_subject(&self) -> usize {
        self.classes * self.segments_per_class * self.segment_len
    }
}

struct Motif {
    amp: f64,
    harmonic: f64,
    phase: f64,
}

/// Generates `config.subjects` series with ids `s01`, `s02`, … Identical
/// inputs give bit-identical output.
pub fn synth_generate(config: &SynthConfig, seed: u64) -> Result<Vec<SensorSeries>> {
    config.validate()?;
    let mut rng = Rng::seed_from_u64(seed);
    let channels: usize = config.placements.iter().map(|p| p.channels).sum();

    // motifs[class][global channel]
    let motifs: Vec<Vec<Motif>> = (0..config.classes)
        .map(|_| {
            (0..channels)
                .map(|_| Motif { amp: rng.random_range(0.6..1.4), harmonic: rng.random_range(0.1..0.4), phase: rng.random_range(0.0..2.0 * PI) })
                .collect()
        })
        .collect();
    let offsets: Vec<f64> =
        (0..channels).map(|_| if config.channel_offset > 0.0 { rng.random_range(-config.channel_offset..=config.channel_offset) } else { 0.0 }).collect();
    let mut order: Vec<usize> = (0..config.classes).flat_map(|c| core::iter::repeat_n(c, config.segments_per_class)).collect();
    order.shuffle(&mut rng);
    let segment_phase: Vec<f64> = order.iter().map(|_| rng.random_range(0.0..2.0 * PI)).collect();

    let noise_ratio = config.snr_db.map(|db| libm::sqrt(1.0 / libm::pow(10.0, db / 10.0)));
    let len = config.timesteps_per_subject();
    let mut out = Vec::with_capacity(config.subjects);
    for s in 0..config.subjects {
        let mut srng = Rng::seed_from_u64(seed);
        srng.set_stream(s as u64 + 1);
        let (lo, hi) = config.subject_scale;
        let gain = if hi > lo { srng.random_range(lo..hi) } else { lo };

        let mut values: Vec<Vec<f64>> = config.placements.iter().map(|p| Vec::with_capacity(len * p.channels)).collect();
        let mut labels = Vec::with_capacity(len);
        for (seg, &class) in order.iter().enumerate() {
            for i in 0..config.segment_len {
                let t = (seg * config.segment_len + i) as f64 / config.sampling_rate_hz;
                let mut g = 0;
                for (pi, p) in config.placements.iter().enumerate() {
                    let w = 2.0 * PI * config.frequency(class, pi);
                    for _ in 0..p.channels {
                        let m = &motifs[class][g];
                        let phase = m.phase + segment_phase[seg];
                        let clean = m.amp * (libm::sin(w * t + phase) + m.harmonic * libm::sin(2.0 * w * t + 2.0 * phase));
                        let noise = match noise_ratio {
                            Some(r) => {
                                let power = 0.5 * m.amp * m.amp * (1.0 + m.harmonic * m.harmonic);
                                let z: f64 = StandardNormal.sample(&mut srng);
                                r * libm::sqrt(power) * z
                            }
                            None => 0.0,
                        };
                        values[pi].push(gain * (clean + noise + offsets[g]));
                        g += 1;
                    }
                }
            }
            labels.extend(core::iter::repeat_n(class as u32, config.segment_len));
        }
        let placements = config
            .placements
            .iter()
            .zip(values)
            .map(|(p, values)| PlacementSeries { name: p.name.clone(), channels: (0..p.channels).map(|c| format!("ch{c}")).collect(), values })
            .collect();
        out.push(SensorSeries::new(format!("s{:02}", s + 1), config.sampling_rate_hz, placements, labels)?);
    }
    Ok(out)
}
