//! Training-time augmentations that counter prediction drift.
//!
//! Autoregressive regression models tend to drift toward the mean pose
//! because teacher forcing always hands them perfect inputs. Three remedies
//! are provided here: future prediction (each step regresses toward the next
//! `horizon` frames, not just one), counter-only decoding (the model cannot
//! lean on ground-truth joints at all), and Gaussian noise injected into the
//! decoder's joint inputs, scaled per channel by the statistics of the
//! previous epoch's prediction errors.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::progressive::PoseSequence;
use crate::tensor::TensorError;

/// Which signal the per-channel noise deviations are derived from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseSource {
    /// Standard deviation of prediction residuals (prediction minus target)
    /// from the previous epoch.
    #[default]
    Residual,
    /// Standard deviation of the ground-truth joint positions themselves.
    Positional,
}

impl FromStr for NoiseSource {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "residual" => Ok(NoiseSource::Residual),
            "positional" => Ok(NoiseSource::Positional),
            other => Err(TensorError::InvalidParameter(format!(
                "unknown noise source {other:?} (expected \"residual\" or \"positional\")"
            ))),
        }
    }
}

impl fmt::Display for NoiseSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseSource::Residual => "residual",
            NoiseSource::Positional => "positional",
        })
    }
}

/// Augmentation regime for progressive training.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationConfig {
    /// Frames stacked into each regression target; 1 disables future
    /// prediction.
    pub future_horizon: usize,
    /// Zero out the joint content of decoder inputs.
    pub just_counter: bool,
    /// Multiplier on the per-channel deviation; 0 disables noise.
    pub noise_factor: f64,
    pub noise_source: NoiseSource,
    /// Fixed deviation of Gaussian jitter on decoder counter inputs; 0
    /// disables it. Free-running production feeds predicted counters back
    /// in, so training on jittered counters teaches the correction that
    /// keeps the progress estimate (and hence termination) on pace.
    pub counter_noise: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            future_horizon: 10,
            just_counter: false,
            noise_factor: 5.0,
            noise_source: NoiseSource::Residual,
            counter_noise: 0.0,
        }
    }
}

impl AugmentationConfig {
    /// No augmentation at all: plain next-frame teacher forcing.
    pub fn baseline() -> Self {
        AugmentationConfig {
            future_horizon: 1,
            just_counter: false,
            noise_factor: 0.0,
            noise_source: NoiseSource::Residual,
            counter_noise: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if self.future_horizon == 0 {
            return Err(TensorError::InvalidParameter(
                "future_horizon must be positive".into(),
            ));
        }
        if !self.noise_factor.is_finite() || self.noise_factor < 0.0 {
            return Err(TensorError::InvalidParameter(format!(
                "noise_factor {} must be finite and non-negative",
                self.noise_factor
            )));
        }
        if !self.counter_noise.is_finite() || self.counter_noise < 0.0 {
            return Err(TensorError::InvalidParameter(format!(
                "counter_noise {} must be finite and non-negative",
                self.counter_noise
            )));
        }
        Ok(())
    }
}

/// Stacked regression targets for one pose sequence: row `i` (the decoder
/// step whose immediate target is frame `i`) holds frames
/// `i ..= i + horizon - 1` with their counters, clamping at the final frame
/// (whose counter is exactly 1). The result is
/// `frames x (horizon * (channels + 1))`, row-major.
pub fn future_prediction_targets(
    pose: &PoseSequence,
    horizon: usize,
) -> Result<Vec<f32>, TensorError> {
    if horizon == 0 {
        return Err(TensorError::InvalidParameter("horizon must be positive".into()));
    }
    let frames = pose.frames();
    let channels = pose.channels();
    let width = horizon * (channels + 1);
    let mut out = Vec::with_capacity(frames * width);
    for i in 0..frames {
        for delta in 0..horizon {
            let target = (i + delta).min(frames - 1);
            out.extend_from_slice(pose.frame(target));
            out.push(pose.counters()[target]);
        }
    }
    Ok(out)
}

/// Per-channel first and second moments of the frames observed during one
/// epoch, used to scale next-epoch noise.
#[derive(Debug, Clone, PartialEq)]
pub struct JointStats {
    /// Epoch the statistics were gathered in (the following epoch consumes
    /// them).
    pub epoch_index: usize,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl JointStats {
    /// All-zero statistics, producing zero noise; used before any epoch has
    /// completed.
    pub fn silent(channels: usize, epoch_index: usize) -> Self {
        JointStats {
            epoch_index,
            mean: vec![0.0; channels],
            std: vec![0.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Streaming accumulator of per-channel frame statistics.
#[derive(Debug, Clone)]
pub struct StatsAccumulator {
    channels: usize,
    count: u64,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl StatsAccumulator {
    pub fn new(channels: usize) -> Self {
        StatsAccumulator {
            channels,
            count: 0,
            sum: vec![0.0; channels],
            sum_sq: vec![0.0; channels],
        }
    }

    pub fn add_frame(&mut self, frame: &[f32]) -> Result<(), TensorError> {
        if frame.len() != self.channels {
            return Err(TensorError::ShapeMismatch {
                op: "stats_add_frame",
                lhs: vec![self.channels],
                rhs: vec![frame.len()],
            });
        }
        self.count += 1;
        for (c, &v) in frame.iter().enumerate() {
            let v = v as f64;
            self.sum[c] += v;
            self.sum_sq[c] += v * v;
        }
        Ok(())
    }

    pub fn frame_count(&self) -> u64 {
        self.count
    }

    /// Population mean and standard deviation per channel.
    pub fn finish(&self, epoch_index: usize) -> Result<JointStats, TensorError> {
        if self.count == 0 {
            return Err(TensorError::ContractViolation(
                "cannot derive statistics from zero frames".into(),
            ));
        }
        let n = self.count as f64;
        let mut mean = Vec::with_capacity(self.channels);
        let mut std = Vec::with_capacity(self.channels);
        for c in 0..self.channels {
            let m = self.sum[c] / n;
            let var = (self.sum_sq[c] / n - m * m).max(0.0);
            mean.push(m as f32);
            std.push(var.sqrt() as f32);
        }
        Ok(JointStats {
            epoch_index,
            mean,
            std,
        })
    }
}

/// One-shot statistics over an iterator of channel frames.
pub fn collect_joint_stats<'a>(
    frames: impl IntoIterator<Item = &'a [f32]>,
    channels: usize,
    epoch_index: usize,
) -> Result<JointStats, TensorError> {
    let mut acc = StatsAccumulator::new(channels);
    for frame in frames {
        acc.add_frame(frame)?;
    }
    acc.finish(epoch_index)
}

/// Adds zero-mean Gaussian noise to `data` (whole frames of `channels`
/// values), with per-channel deviation `noise_factor * stats.std[c]`.
/// Channels with zero deviation are left bitwise untouched, and a zero
/// factor leaves the data and the generator untouched entirely.
pub fn gaussian_noise(
    data: &mut [f32],
    channels: usize,
    stats: &JointStats,
    noise_factor: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(), TensorError> {
    if channels == 0 || !data.len().is_multiple_of(channels) {
        return Err(TensorError::InvalidParameter(format!(
            "{} values do not form whole {channels}-channel frames",
            data.len()
        )));
    }
    if stats.channels() != channels {
        return Err(TensorError::ShapeMismatch {
            op: "gaussian_noise",
            lhs: vec![channels],
            rhs: vec![stats.channels()],
        });
    }
    if !noise_factor.is_finite() || noise_factor < 0.0 {
        return Err(TensorError::InvalidParameter(format!(
            "noise_factor {noise_factor} must be finite and non-negative"
        )));
    }
    if noise_factor == 0.0 {
        return Ok(());
    }
    let sigmas: Vec<f64> = stats
        .std
        .iter()
        .map(|&s| noise_factor * s as f64)
        .collect();
    let normals: Vec<Option<Normal<f64>>> = sigmas
        .iter()
        .map(|&s| {
            if s > 0.0 {
                Normal::new(0.0, s).ok()
            } else {
                None
            }
        })
        .collect();
    for frame in data.chunks_mut(channels) {
        for (value, normal) in frame.iter_mut().zip(&normals) {
            if let Some(normal) = normal {
                *value += normal.sample(rng) as f32;
            }
        }
    }
    Ok(())
}

/// Adds zero-mean Gaussian jitter with fixed deviation `sigma` to counter
/// values, clamping each back into [0, 1]. A zero `sigma` leaves the data
/// and the generator untouched.
pub fn counter_noise(
    counters: &mut [f32],
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(), TensorError> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(TensorError::InvalidParameter(format!(
            "counter noise deviation {sigma} must be finite and non-negative"
        )));
    }
    if sigma == 0.0 {
        return Ok(());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| {
        TensorError::InvalidParameter(format!("counter noise deviation {sigma}: {e}"))
    })?;
    for value in counters {
        *value = (*value + normal.sample(rng) as f32).clamp(0.0, 1.0);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn pose(joints: usize, frames: usize) -> PoseSequence {
        let channels = 3 * joints;
        let data: Vec<f32> = (0..frames * channels).map(|i| i as f32).collect();
        PoseSequence::new(joints, data).unwrap()
    }

    #[test]
    fn default_and_baseline_configs() {
        let d = AugmentationConfig::default();
        assert_eq!(d.future_horizon, 10);
        assert!(!d.just_counter);
        assert_eq!(d.noise_factor, 5.0);
        assert_eq!(d.noise_source, NoiseSource::Residual);
        let b = AugmentationConfig::baseline();
        assert_eq!(b.future_horizon, 1);
        assert_eq!(b.noise_factor, 0.0);
        assert!(d.validate().is_ok() && b.validate().is_ok());
        assert!(AugmentationConfig {
            future_horizon: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn noise_source_parses_and_prints() {
        assert_eq!("residual".parse::<NoiseSource>().unwrap(), NoiseSource::Residual);
        assert_eq!(
            "positional".parse::<NoiseSource>().unwrap(),
            NoiseSource::Positional
        );
        assert!("banana".parse::<NoiseSource>().is_err());
        assert_eq!(NoiseSource::Residual.to_string(), "residual");
        assert_eq!(NoiseSource::Positional.to_string(), "positional");
    }

    #[test]
    fn horizon_one_targets_are_plain_next_frames() {
        let p = pose(1, 3);
        let t = future_prediction_targets(&p, 1).unwrap();
        assert_eq!(t.len(), 3 * 4);
        assert_eq!(&t[..3], p.frame(0));
        assert_eq!(t[3], p.counters()[0]);
        assert_eq!(&t[4..7], p.frame(1));
        assert_eq!(t[7], p.counters()[1]);
        assert_eq!(&t[8..11], p.frame(2));
        assert_eq!(t[11], 1.0);
    }

    #[test]
    fn future_targets_clamp_at_the_final_frame() {
        let p = pose(1, 3);
        let h = 10;
        let t = future_prediction_targets(&p, h).unwrap();
        let width = h * 4;
        assert_eq!(t.len(), 3 * width);
        // Row 0: frame 0, frame 1, then eight copies of the final frame.
        let row0 = &t[..width];
        assert_eq!(&row0[..3], p.frame(0));
        assert_eq!(row0[3], p.counters()[0]);
        assert_eq!(&row0[4..7], p.frame(1));
        assert_eq!(row0[7], p.counters()[1]);
        for d in 2..h {
            assert_eq!(&row0[d * 4..d * 4 + 3], p.frame(2));
            assert_eq!(row0[d * 4 + 3], 1.0);
        }
        assert!(future_prediction_targets(&p, 0).is_err());
    }

    #[test]
    fn stats_match_a_hand_computation() {
        let frames: Vec<&[f32]> = vec![&[1.0, -2.0], &[3.0, -2.0]];
        let s = collect_joint_stats(frames, 2, 4).unwrap();
        assert_eq!(s.epoch_index, 4);
        assert_eq!(s.mean, vec![2.0, -2.0]);
        // Population std of {1, 3} is 1; constant channel has std 0.
        assert_eq!(s.std, vec![1.0, 0.0]);
    }

    #[test]
    fn stats_require_at_least_one_frame() {
        assert!(collect_joint_stats(std::iter::empty(), 3, 0).is_err());
        let mut acc = StatsAccumulator::new(2);
        assert!(acc.add_frame(&[1.0]).is_err());
        assert_eq!(acc.frame_count(), 0);
    }

    #[test]
    fn zero_factor_leaves_data_and_rng_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let stats = collect_joint_stats([[0.0f32, 1.0].as_slice(), &[2.0, 3.0]], 2, 0).unwrap();
        let mut data = vec![1.0f32, 2.0, 3.0, 4.0];
        let before = data.clone();
        gaussian_noise(&mut data, 2, &stats, 0.0, &mut rng).unwrap();
        assert_eq!(data, before);
        let mut reference = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(rand::Rng::random::<u64>(&mut rng), rand::Rng::random::<u64>(&mut reference));
    }

    #[test]
    fn noise_is_seeded_and_skips_static_channels() {
        let stats = JointStats {
            epoch_index: 0,
            mean: vec![0.0, 0.0],
            std: vec![1.0, 0.0],
        };
        let base = vec![1.0f32, 2.0, 3.0, 4.0];
        let mut a = base.clone();
        let mut b = base.clone();
        gaussian_noise(&mut a, 2, &stats, 0.5, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        gaussian_noise(&mut b, 2, &stats, 0.5, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0], base[0]);
        assert_ne!(a[2], base[2]);
        // The zero-deviation channel is untouched.
        assert_eq!(a[1], base[1]);
        assert_eq!(a[3], base[3]);
        let mut c = base.clone();
        gaussian_noise(&mut c, 2, &stats, 0.5, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_ne!(a[0], c[0]);
    }

    #[test]
    fn silent_stats_add_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let stats = JointStats::silent(3, 0);
        let mut data = vec![0.5f32; 9];
        gaussian_noise(&mut data, 3, &stats, 5.0, &mut rng).unwrap();
        assert_eq!(data, vec![0.5f32; 9]);
    }

    #[test]
    fn counter_jitter_stays_in_range_and_is_seeded() {
        let base: Vec<f32> = (0..32).map(|i| i as f32 / 31.0).collect();
        let mut a = base.clone();
        let mut b = base.clone();
        counter_noise(&mut a, 0.3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        counter_noise(&mut b, 0.3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, base);
        assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));

        let mut untouched = base.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        counter_noise(&mut untouched, 0.0, &mut rng).unwrap();
        assert_eq!(untouched, base);
        let mut reference = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(
            rand::Rng::random::<u64>(&mut rng),
            rand::Rng::random::<u64>(&mut reference)
        );
        assert!(counter_noise(&mut untouched, -0.5, &mut rng).is_err());
    }

    #[test]
    fn noise_rejects_mismatched_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let stats = JointStats::silent(2, 0);
        let mut data = vec![0.0f32; 5];
        assert!(gaussian_noise(&mut data, 2, &stats, 1.0, &mut rng).is_err());
        let mut data = vec![0.0f32; 4];
        assert!(gaussian_noise(&mut data, 3, &stats, 1.0, &mut rng).is_err());
        assert!(gaussian_noise(&mut data, 2, &stats, -1.0, &mut rng).is_err());
    }
}
