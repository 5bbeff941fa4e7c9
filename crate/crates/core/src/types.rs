//! Shared domain types for the prediction pipeline.
//!
//! Everything here is immutable after construction and safe to share
//! across threads.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::f64::consts::PI;

/// Wrap an angle into the principal range `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut a = theta % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}

/// One observed sample in the intersection frame: position in meters,
/// speed in m/s, heading in radians within `(-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObsPoint {
    pub x: f64,
    pub y: f64,
    pub v: f64,
    pub theta: f64,
}

impl ObsPoint {
    pub fn new(x: f64, y: f64, v: f64, theta: f64) -> Self {
        Self { x, y, v, theta }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x, self.y, self.v, self.theta]
    }
}

/// One ground-truth future sample. Padded steps repeat the last real
/// position with `is_pad` set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FuturePoint {
    pub x: f64,
    pub y: f64,
    pub is_pad: bool,
}

/// Destination class of a track through the intersection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClassLabel {
    Left,
    Straight,
    Right,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 3] = [ClassLabel::Left, ClassLabel::Straight, ClassLabel::Right];
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClassLabel::Left => write!(f, "left"),
            ClassLabel::Straight => write!(f, "straight"),
            ClassLabel::Right => write!(f, "right"),
        }
    }
}

/// Decoder feedback regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Feed-forward: one sample drawn from each output step becomes the
    /// next input.
    Ff,
    /// Zero-feed: the decoder input is always the zero vector.
    Zf,
    /// First-loss: the decoder runs a single step.
    Fl,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Ff => "ff",
            Variant::Zf => "zf",
            Variant::Fl => "fl",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        match s.to_ascii_lowercase().as_str() {
            "ff" => Some(Variant::Ff),
            "zf" => Some(Variant::Zf),
            "fl" => Some(Variant::Fl),
            _ => None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One observation window plus its ground-truth future, in the
/// intersection frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackSnippet {
    /// Observations, exactly `h` points, time ordered.
    pub obs: Vec<ObsPoint>,
    /// Future ground truth, exactly `p` points; pad flags form a suffix.
    pub future: Vec<FuturePoint>,
    pub class_label: ClassLabel,
    pub track_id: String,
    /// Index of the final observation within the source track.
    pub t_index: usize,
}

impl TrackSnippet {
    /// Position of the final observation.
    pub fn last_obs(&self) -> &ObsPoint {
        self.obs.last().expect("snippet obs never empty")
    }

    /// Number of non-pad future points.
    pub fn real_future_len(&self) -> usize {
        self.future.iter().take_while(|f| !f.is_pad).count()
    }
}

/// One component of a bivariate Gaussian mixture, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixComponent {
    pub weight: f64,
    pub mean: (f64, f64),
    pub stdev: (f64, f64),
    pub corr: f64,
}

/// The per-timestep mixture output: a padding probability plus `M`
/// weighted bivariate Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct MdnStep {
    pub pad_prob: f64,
    pub components: Vec<MixComponent>,
}

impl MdnStep {
    /// Checks the mixture invariants: weights on the simplex within
    /// 1e-6, strictly positive deviations, correlation inside (-1, 1).
    pub fn check_invariants(&self) -> Result<(), String> {
        if !(self.pad_prob > 0.0 && self.pad_prob < 1.0) {
            return Err(format!("pad_prob: {} outside (0,1)", self.pad_prob));
        }
        let sum: f64 = self.components.iter().map(|c| c.weight).sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(format!("components.weight: sum {} not within 1e-6 of 1", sum));
        }
        for (j, c) in self.components.iter().enumerate() {
            if !(c.stdev.0 > 0.0 && c.stdev.1 > 0.0) {
                return Err(format!("components[{j}].stdev: not strictly positive"));
            }
            if c.corr.abs() >= 1.0 {
                return Err(format!("components[{j}].corr: |{}| not < 1", c.corr));
            }
            if !(c.mean.0.is_finite() && c.mean.1.is_finite()) {
                return Err(format!("components[{j}].mean: not finite"));
            }
        }
        Ok(())
    }
}

/// A full decoder rollout: one `MdnStep` per future timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSequence {
    pub steps: Vec<MdnStep>,
    pub source_variant: Variant,
}

/// One clustered mode: an ordered polyline of weighted centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct PathProposal {
    /// Polyline points `(x, y, t_index)` with strictly increasing `t_index`.
    pub points: Vec<(f64, f64, usize)>,
    /// Accumulated mixture weight along the path.
    pub weight: f64,
}

impl PathProposal {
    /// The point whose `t_index` equals `t`, if present.
    pub fn point_at(&self, t: usize) -> Option<(f64, f64)> {
        self.points
            .iter()
            .find(|p| p.2 == t)
            .map(|p| (p.0, p.1))
    }
}

/// Per-channel normalization statistics over `(x, y, v, theta)`,
/// computed from training data only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; 4],
    pub stdev: [f64; 4],
}

impl NormStats {
    /// Identity statistics; useful for tests.
    pub fn identity() -> Self {
        Self { mean: [0.0; 4], stdev: [1.0; 4] }
    }
}

/// Model hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Mixture component count M.
    pub mixtures: usize,
    /// Encoder steps h.
    pub encoder_steps: usize,
    /// Decoder steps p.
    pub decoder_steps: usize,
    pub lstm_width: usize,
    pub lstm_layers: usize,
    /// Weight on the padding cross-entropy term.
    pub alpha: f64,
    /// Weight on the likelihood term at padded steps.
    pub beta: f64,
    /// Sample rate of the snippet data in Hz.
    pub sample_rate_hz: f64,
}

impl ModelConfig {
    /// Full-scale configuration.
    pub fn paper() -> Self {
        Self {
            mixtures: 6,
            encoder_steps: 7,
            decoder_steps: 60,
            lstm_width: 256,
            lstm_layers: 3,
            alpha: 1.0,
            beta: 10.0,
            sample_rate_hz: 12.5,
        }
    }

    /// Small configuration that trains in minutes on one core.
    pub fn desk() -> Self {
        Self {
            mixtures: 3,
            encoder_steps: 7,
            decoder_steps: 45,
            lstm_width: 32,
            lstm_layers: 2,
            alpha: 1.0,
            beta: 10.0,
            sample_rate_hz: 12.5,
        }
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.sample_rate_hz
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.mixtures == 0
            || self.encoder_steps == 0
            || self.decoder_steps == 0
            || self.lstm_width == 0
            || self.lstm_layers == 0
        {
            return Err("model config: all counts must be positive".into());
        }
        if !(self.sample_rate_hz > 0.0) {
            return Err("model config: sample_rate_hz must be positive".into());
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err("model config: alpha and beta must be non-negative".into());
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::paper()
    }
}

/// Validates every snippet invariant against a model configuration.
/// Reports the first violation with its field path.
pub fn validate_snippet(s: &TrackSnippet, cfg: &ModelConfig) -> Result<(), String> {
    if s.obs.len() != cfg.encoder_steps {
        return Err(format!(
            "obs: obs length mismatch, got {} want {}",
            s.obs.len(),
            cfg.encoder_steps
        ));
    }
    if s.future.len() != cfg.decoder_steps {
        return Err(format!(
            "future: future length mismatch, got {} want {}",
            s.future.len(),
            cfg.decoder_steps
        ));
    }
    for (i, o) in s.obs.iter().enumerate() {
        if !(o.x.is_finite() && o.y.is_finite()) {
            return Err(format!("obs[{i}]: position not finite"));
        }
        if !(o.v >= 0.0) {
            return Err(format!("obs[{i}].v: negative speed {}", o.v));
        }
        if !(o.theta > -PI && o.theta <= PI) {
            return Err(format!("obs[{i}].theta: {} outside (-pi, pi]", o.theta));
        }
    }
    let mut seen_pad = false;
    let mut last_real: Option<(f64, f64)> = None;
    for (i, fpt) in s.future.iter().enumerate() {
        if !(fpt.x.is_finite() && fpt.y.is_finite()) {
            return Err(format!("future[{i}]: position not finite"));
        }
        if fpt.is_pad {
            seen_pad = true;
            match last_real {
                Some((lx, ly)) => {
                    if fpt.x != lx || fpt.y != ly {
                        return Err(format!(
                            "future[{i}]: pad point does not repeat last real position"
                        ));
                    }
                }
                None => {
                    return Err(format!("future[{i}]: pad with no preceding real point"));
                }
            }
        } else {
            if seen_pad {
                return Err(format!("future[{i}].is_pad: pad suffix violated"));
            }
            last_real = Some((fpt.x, fpt.y));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn snippet(h: usize, p: usize) -> TrackSnippet {
        let obs = (0..h)
            .map(|i| ObsPoint::new(0.0, i as f64, 1.0, PI / 2.0))
            .collect();
        let future = (0..p)
            .map(|i| FuturePoint { x: 0.0, y: (h + i) as f64, is_pad: false })
            .collect();
        TrackSnippet {
            obs,
            future,
            class_label: ClassLabel::Straight,
            track_id: "t0".into(),
            t_index: h - 1,
        }
    }

    fn cfg(h: usize, p: usize) -> ModelConfig {
        ModelConfig { encoder_steps: h, decoder_steps: p, ..ModelConfig::paper() }
    }

    #[test]
    fn well_formed_snippet_passes() {
        let s = snippet(7, 60);
        assert!(validate_snippet(&s, &cfg(7, 60)).is_ok());
    }

    #[test]
    fn pad_followed_by_real_is_rejected() {
        let mut s = snippet(7, 60);
        s.future[10] = FuturePoint { x: s.future[9].x, y: s.future[9].y, is_pad: true };
        let err = validate_snippet(&s, &cfg(7, 60)).unwrap_err();
        assert!(err.contains("pad suffix violated"), "{err}");
    }

    #[test]
    fn obs_length_mismatch_is_reported() {
        let s = snippet(6, 60);
        let err = validate_snippet(&s, &cfg(7, 60)).unwrap_err();
        assert!(err.contains("obs length mismatch"), "{err}");
    }

    #[test]
    fn pad_suffix_must_repeat_last_position() {
        let mut s = snippet(7, 60);
        for i in 30..60 {
            s.future[i] = FuturePoint { x: 99.0, y: 99.0, is_pad: true };
        }
        assert!(validate_snippet(&s, &cfg(7, 60)).is_err());
        for i in 30..60 {
            s.future[i] = FuturePoint { x: s.future[29].x, y: s.future[29].y, is_pad: true };
        }
        assert!(validate_snippet(&s, &cfg(7, 60)).is_ok());
    }

    #[test]
    fn wrap_angle_principal_range() {
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(0.3) - 0.3).abs() < 1e-15);
        for k in -8..8 {
            let a = wrap_angle(0.7 + k as f64 * 2.0 * PI);
            assert!((a - 0.7).abs() < 1e-9);
        }
    }

    #[test]
    fn mdn_step_invariants() {
        let good = MdnStep {
            pad_prob: 0.2,
            components: vec![
                MixComponent { weight: 0.5, mean: (0.0, 0.0), stdev: (1.0, 1.0), corr: 0.0 },
                MixComponent { weight: 0.5, mean: (1.0, 1.0), stdev: (2.0, 0.5), corr: -0.3 },
            ],
        };
        assert!(good.check_invariants().is_ok());

        let mut bad = good.clone();
        bad.components[0].weight = 0.6;
        assert!(bad.check_invariants().is_err());

        let mut bad = good.clone();
        bad.components[1].stdev.0 = 0.0;
        assert!(bad.check_invariants().is_err());

        let mut bad = good;
        bad.components[1].corr = 1.0;
        assert!(bad.check_invariants().is_err());
    }
}
