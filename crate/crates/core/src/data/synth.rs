//! Synthetic head-worn IMU recordings with a strong label (walking) and a
//! weak label (head gestures).
//!
//! Walking adds a large periodic component to every channel, gestures add a
//! short half-sine pulse on a few channels. With the default amplitudes the
//! walking component is four times stronger than any gesture, so gestures
//! performed while walking are partly masked by the gait signal.

use serde::{Deserialize, Serialize};

use super::{Dataset, SampleSequence};
use crate::engine::SeededRng;
use crate::error::{Error, Result};
use crate::model::LabelSpec;

pub const CHANNEL_NAMES: [&str; 6] = ["acc_x", "acc_y", "acc_z", "gyro_x", "gyro_y", "gyro_z"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WalkConfig {
    pub amplitude: f64,
    pub frequency_hz: f64,
    /// Per-segment relative jitter of the step frequency.
    pub frequency_jitter: f64,
    /// Relative amplitude of the second harmonic.
    pub harmonic: f64,
    /// Range of walk and rest segment durations in seconds.
    pub segment_s: [f64; 2],
    pub channel_weights: [f64; 6],
}

impl Default for WalkConfig {
    fn default() -> Self {
        Self {
            amplitude: 4.0,
            frequency_hz: 2.0,
            frequency_jitter: 0.1,
            harmonic: 0.5,
            segment_s: [8.0, 20.0],
            channel_weights: [0.5, 0.4, 1.0, 0.6, 0.7, 0.5],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GestureClass {
    pub name: String,
    pub duration_s: [f64; 2],
    pub channel_weights: [f64; 6],
}

fn class(name: &str, lo: f64, hi: f64, w: [f64; 6]) -> GestureClass {
    GestureClass {
        name: name.to_string(),
        duration_s: [lo, hi],
        channel_weights: w,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GestureConfig {
    pub amplitude: f64,
    /// Gestures per minute of recording.
    pub per_minute: f64,
    /// Minimum idle time between consecutive gestures in seconds.
    pub min_gap_s: f64,
    /// Non-null classes; class id `i + 1` is `classes[i]`.
    pub classes: Vec<GestureClass>,
}

impl Default for GestureConfig {
    fn default() -> Self {
        //                             acc_x acc_y acc_z gyr_x gyr_y gyr_z
        Self {
            amplitude: 1.0,
            per_minute: 10.0,
            min_gap_s: 1.0,
            classes: vec![
                class("left_roll", 1.9, 2.1, [0.0, -0.3, 0.0, -1.0, 0.0, 0.0]),
                class("right_roll", 1.9, 2.1, [0.0, 0.3, 0.0, 1.0, 0.0, 0.0]),
                class("head_right", 1.5, 1.7, [0.2, 0.0, 0.0, 0.0, 0.0, 1.0]),
                class("head_left", 1.5, 1.8, [-0.2, 0.0, 0.0, 0.0, 0.0, -1.0]),
                class("right_lean", 1.5, 1.7, [0.0, 1.0, -0.3, 0.4, 0.0, 0.0]),
                class("left_lean", 1.5, 1.7, [0.0, -1.0, -0.3, -0.4, 0.0, 0.0]),
                class("head_up", 1.5, 1.8, [-0.5, 0.0, 0.0, 0.0, -1.0, 0.0]),
                class("head_down", 1.5, 1.8, [0.5, 0.0, 0.0, 0.0, 1.0, 0.0]),
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_sequences: usize,
    pub duration_s: f64,
    pub sample_rate_hz: f64,
    pub noise_std: f64,
    pub walk: WalkConfig,
    pub gesture: GestureConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_sequences: 20,
            duration_s: 60.0,
            sample_rate_hz: 12.5,
            noise_std: 0.2,
            walk: WalkConfig::default(),
            gesture: GestureConfig::default(),
        }
    }
}

impl SynthConfig {
    pub fn gestures_per_sequence(&self) -> usize {
        (self.gesture.per_minute * self.duration_s / 60.0).round().max(0.0) as usize
    }

    pub fn steps(&self) -> usize {
        duration_samples(self.duration_s, self.sample_rate_hz)
    }

    /// Ratio of walking to gesture amplitude.
    pub fn dominance_ratio(&self) -> f64 {
        self.walk.amplitude / self.gesture.amplitude
    }

    pub fn labels(&self) -> Vec<LabelSpec> {
        let mut walk = LabelSpec::new("walk", 2);
        walk.class_names = vec!["rest".into(), "walk".into()];
        let mut gesture = LabelSpec::new("gesture", self.gesture.classes.len() + 1);
        gesture.class_names = std::iter::once("null".to_string())
            .chain(self.gesture.classes.iter().map(|c| c.name.clone()))
            .collect();
        vec![walk, gesture]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_sequences == 0 {
            return bad("num_sequences must be at least 1".into());
        }
        if !(self.sample_rate_hz > 0.0 && self.sample_rate_hz.is_finite()) {
            return bad(format!("sample_rate_hz must be positive, got {}", self.sample_rate_hz));
        }
        if !(self.duration_s > 0.0) || self.steps() == 0 {
            return bad(format!("duration_s {} yields no samples", self.duration_s));
        }
        if !(self.noise_std >= 0.0) {
            return bad(format!("noise_std must be non-negative, got {}", self.noise_std));
        }
        let w = &self.walk;
        if !(w.amplitude >= 0.0 && w.frequency_hz > 0.0 && w.frequency_jitter >= 0.0 && w.frequency_jitter < 1.0) {
            return bad("walk amplitude, frequency or jitter out of range".into());
        }
        if !(w.segment_s[0] > 0.0 && w.segment_s[0] <= w.segment_s[1]) {
            return bad(format!("walk segment range {:?} is invalid", w.segment_s));
        }
        let g = &self.gesture;
        if !(g.amplitude >= 0.0) || !(g.min_gap_s >= 0.0) || !(g.per_minute >= 0.0) {
            return bad("gesture amplitude, min_gap_s and per_minute must be non-negative".into());
        }
        if g.classes.is_empty() {
            return bad("need at least one gesture class".into());
        }
        for c in &g.classes {
            let [lo, hi] = c.duration_s;
            if !(lo > 0.0 && lo <= hi) || duration_samples(lo, self.sample_rate_hz) == 0 {
                return bad(format!("gesture {}: duration range {:?} is invalid", c.name, c.duration_s));
            }
        }
        // worst case: every gesture at its longest duration
        let longest = g
            .classes
            .iter()
            .map(|c| duration_samples(c.duration_s[1], self.sample_rate_hz))
            .max()
            .unwrap_or(0);
        let gap = duration_samples(g.min_gap_s, self.sample_rate_hz);
        let count = self.gestures_per_sequence();
        let need = count * (longest + gap);
        if need > self.steps() {
            return bad(format!(
                "{} gestures of up to {longest} samples plus gaps need {need} samples, sequence has {}",
                count,
                self.steps()
            ));
        }
        Ok(())
    }
}

/// Number of samples spanned by `seconds` at `rate_hz`.
pub fn duration_samples(seconds: f64, rate_hz: f64) -> usize {
    (seconds * rate_hz).round().max(0.0) as usize
}

#[derive(Clone, Debug, PartialEq)]
pub struct GestureEvent {
    /// Gesture class id (never the null class).
    pub class: usize,
    pub start: usize,
    pub len: usize,
    pub duration_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WalkSegment {
    pub start: usize,
    pub len: usize,
    pub walking: bool,
}

pub fn generate_synthetic(config: &SynthConfig) -> Result<Dataset> {
    generate_with_events(config).map(|(ds, _, _)| ds)
}

/// Also returns the ground-truth gesture events and walk segments of each sequence.
#[allow(clippy::type_complexity)]
pub fn generate_with_events(config: &SynthConfig) -> Result<(Dataset, Vec<Vec<GestureEvent>>, Vec<Vec<WalkSegment>>)> {
    config.validate()?;
    let root = SeededRng::new(config.seed);
    let mut sequences = Vec::with_capacity(config.num_sequences);
    let mut all_events = Vec::with_capacity(config.num_sequences);
    let mut all_segments = Vec::with_capacity(config.num_sequences);
    for i in 0..config.num_sequences {
        let mut rng = root.stream(&format!("sequence-{i}"));
        let (seq, events, segments) = one_sequence(config, i, &mut rng);
        sequences.push(seq);
        all_events.push(events);
        all_segments.push(segments);
    }
    let ds = Dataset {
        sequences,
        labels: config.labels(),
        channel_names: CHANNEL_NAMES.iter().map(|s| s.to_string()).collect(),
        sample_rate_hz: config.sample_rate_hz,
        normalized: false,
    };
    ds.validate()?;
    Ok((ds, all_events, all_segments))
}

fn one_sequence(
    config: &SynthConfig,
    index: usize,
    rng: &mut SeededRng,
) -> (SampleSequence, Vec<GestureEvent>, Vec<WalkSegment>) {
    let t_len = config.steps();
    let fs = config.sample_rate_hz;
    let k = CHANNEL_NAMES.len();
    let mut x = vec![0.0; k * t_len];
    let mut walk_y = vec![0usize; t_len];
    let mut gesture_y = vec![0usize; t_len];

    // walk / rest segments, alternating from a random initial state
    let w = &config.walk;
    let mut segments = Vec::new();
    let mut walking = rng.below(2) == 1;
    let mut t0 = 0;
    while t0 < t_len {
        let len = duration_samples(rng.uniform(w.segment_s[0], w.segment_s[1]), fs)
            .max(1)
            .min(t_len - t0);
        if walking {
            let f = w.frequency_hz * (1.0 + rng.uniform(-w.frequency_jitter, w.frequency_jitter));
            let phase = rng.uniform(0.0, std::f64::consts::TAU);
            let harmonic_phase: Vec<f64> = (0..k).map(|_| rng.uniform(0.0, std::f64::consts::TAU)).collect();
            for t in t0..t0 + len {
                let theta = std::f64::consts::TAU * f * (t - t0) as f64 / fs + phase;
                for c in 0..k {
                    let v = theta.sin() + w.harmonic * (2.0 * theta + harmonic_phase[c]).sin();
                    x[c * t_len + t] += w.amplitude * w.channel_weights[c] * v;
                }
                walk_y[t] = 1;
            }
        }
        segments.push(WalkSegment { start: t0, len, walking });
        t0 += len;
        walking = !walking;
    }

    // gestures: draw classes and durations, then spread the slack randomly
    let g = &config.gesture;
    let gap = duration_samples(g.min_gap_s, fs);
    let mut drawn: Vec<(usize, f64, usize)> = (0..config.gestures_per_sequence())
        .map(|_| {
            let class = rng.below(g.classes.len());
            let [lo, hi] = g.classes[class].duration_s;
            let d = rng.uniform(lo, hi);
            (class + 1, d, duration_samples(d, fs).max(1))
        })
        .collect();
    rng.shuffle(&mut drawn);
    let used: usize = drawn.iter().map(|&(_, _, len)| len + gap).sum();
    let slack = t_len - used;
    let mut offsets: Vec<usize> = (0..drawn.len()).map(|_| rng.below(slack + 1)).collect();
    offsets.sort_unstable();
    let mut events = Vec::with_capacity(drawn.len());
    let mut cursor = 0;
    for ((class, d, len), off) in drawn.into_iter().zip(offsets) {
        let start = cursor + off + gap / 2;
        let weights = &g.classes[class - 1].channel_weights;
        for s in 0..len {
            let pulse = g.amplitude * (std::f64::consts::PI * (s as f64 + 0.5) / len as f64).sin();
            for c in 0..k {
                x[c * t_len + start + s] += pulse * weights[c];
            }
            gesture_y[start + s] = class;
        }
        events.push(GestureEvent {
            class,
            start,
            len,
            duration_s: d,
        });
        cursor += len + gap;
    }

    if config.noise_std > 0.0 {
        for v in &mut x {
            *v += config.noise_std * rng.normal();
        }
    }

    let seq = SampleSequence {
        id: format!("seq{index:03}"),
        x,
        y: vec![walk_y, gesture_y],
        sample_rate_hz: fs,
    };
    (seq, events, segments)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duration_to_samples() {
        assert_eq!(duration_samples(1.6, 12.5), 20);
        assert_eq!(duration_samples(2.0, 12.5), 25);
    }

    #[test]
    fn defaults_shape() {
        let c = SynthConfig::default();
        assert_eq!(c.dominance_ratio(), 4.0);
        let ds = generate_synthetic(&c).unwrap();
        assert_eq!(ds.sequences.len(), 20);
        assert_eq!(ds.channels(), 6);
        assert_eq!(ds.labels[0].num_classes, 2);
        assert_eq!(ds.labels[1].num_classes, 9);
        assert_eq!(ds.labels[1].class_name(0), "null");
        assert!(ds.sequences.iter().all(|s| s.len() == 750));
    }

    #[test]
    fn deterministic_per_seed() {
        let c = SynthConfig {
            num_sequences: 3,
            ..SynthConfig::default()
        };
        let a = generate_synthetic(&c).unwrap();
        assert_eq!(a, generate_synthetic(&c).unwrap());
        let b = generate_synthetic(&SynthConfig { seed: 1, ..c }).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn event_durations_within_class_ranges() {
        let c = SynthConfig::default();
        let (ds, events, _) = generate_with_events(&c).unwrap();
        let mut rolls = 0;
        for (seq, evs) in ds.sequences.iter().zip(&events) {
            assert_eq!(evs.len(), c.gestures_per_sequence());
            for e in evs {
                let [lo, hi] = c.gesture.classes[e.class - 1].duration_s;
                assert!(e.duration_s >= lo && e.duration_s <= hi);
                assert_eq!(e.len, duration_samples(e.duration_s, 12.5));
                assert!(seq.y[1][e.start..e.start + e.len].iter().all(|&y| y == e.class));
                if e.class <= 2 {
                    rolls += 1;
                    assert!((24..=26).contains(&e.len));
                }
            }
            // no overlap, labels outside events are null
            let labelled: usize = evs.iter().map(|e| e.len).sum();
            assert_eq!(seq.y[1].iter().filter(|&&y| y != 0).count(), labelled);
        }
        assert!(rolls > 0);
    }

    #[test]
    fn gesture_energy_exceeds_null_on_dominant_channel() {
        // walking masks gestures by design, so look at the gesture signal alone
        let mut c = SynthConfig::default();
        c.walk.amplitude = 0.0;
        let (ds, events, _) = generate_with_events(&c).unwrap();
        for class in 1..=c.gesture.classes.len() {
            let w = &c.gesture.classes[class - 1].channel_weights;
            let dom = (0..6).max_by(|&a, &b| w[a].abs().total_cmp(&w[b].abs())).unwrap();
            let (mut on, mut n_on, mut off, mut n_off) = (0.0, 0usize, 0.0, 0usize);
            for (seq, evs) in ds.sequences.iter().zip(&events) {
                let ch = seq.channel(dom);
                for e in evs.iter().filter(|e| e.class == class) {
                    on += ch[e.start..e.start + e.len].iter().map(|v| v * v).sum::<f64>();
                    n_on += e.len;
                    // null spans right after the event, same walk state
                    let end = (e.start + e.len + 10).min(seq.len());
                    for t in e.start + e.len..end {
                        if seq.y[1][t] == 0 && seq.y[0][t] == seq.y[0][e.start] {
                            off += ch[t] * ch[t];
                            n_off += 1;
                        }
                    }
                }
            }
            assert!(n_on > 0 && n_off > 0);
            assert!(on / n_on as f64 > off / n_off as f64, "class {class}");
        }
    }

    #[test]
    fn walk_segments_tile_sequence() {
        let (ds, _, segs) = generate_with_events(&SynthConfig::default()).unwrap();
        for (seq, ss) in ds.sequences.iter().zip(&segs) {
            assert_eq!(ss.iter().map(|s| s.len).sum::<usize>(), seq.len());
            for s in ss {
                assert!(seq.y[0][s.start..s.start + s.len].iter().all(|&y| (y == 1) == s.walking));
            }
        }
        let prevalence = ds.class_prevalence(0);
        assert!(prevalence[1] > 0.2 && prevalence[1] < 0.8, "{prevalence:?}");
    }

    #[test]
    fn config_errors() {
        let too_many = SynthConfig {
            gesture: GestureConfig {
                per_minute: 100.0,
                ..GestureConfig::default()
            },
            ..SynthConfig::default()
        };
        assert!(matches!(generate_synthetic(&too_many), Err(Error::Config(_))));
        let zero_rate = SynthConfig {
            sample_rate_hz: 0.0,
            ..SynthConfig::default()
        };
        assert!(matches!(zero_rate.validate(), Err(Error::Config(_))));
        let none = SynthConfig {
            num_sequences: 0,
            ..SynthConfig::default()
        };
        assert!(none.validate().is_err());
    }
}
