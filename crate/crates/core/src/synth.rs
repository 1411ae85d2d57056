//! Deterministic synthetic 8-gesture recordings.
//!
//! Each gesture is a plane wave over the electrode x time grid with its own
//! temporal frequency and spatial wavenumber, under a broad amplitude
//! envelope. The pattern is visible in every sensor row and every time
//! slice, so it survives per-sensor standardisation and any single masking
//! strategy. Every recording has its own phase, gain and envelope offset,
//! plus white noise.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataio::{
    ingest_trial, make_trial, window_count, Database, DatasetManifest, TrialMeta, TrialRecording, CHANNELS,
    SAMPLE_RATE_HZ, WINDOW, WINDOW_STEP,
};
use crate::error::{Error, Result};

pub const NUM_GESTURES: usize = 8;
/// Carrier frequency of each gesture. All lie below 125 Hz (so they stay
/// distinct after 4x time downsampling) and away from the 45-55 Hz stop band.
pub const GESTURE_FREQS_HZ: [f64; NUM_GESTURES] = [12.0, 20.0, 30.0, 40.0, 62.0, 75.0, 90.0, 105.0];
/// Length of one recording: four windows at the standard stride.
pub const TRIAL_SAMPLES: usize = 212;
/// Spatial cycles of each gesture's wave across the 128 electrodes; low
/// enough to survive 4x electrode downsampling.
pub const GESTURE_WAVENUMBERS: [f64; NUM_GESTURES] = [2.0, -2.0, 3.0, -3.0, 4.0, -4.0, 5.0, -5.0];
/// Default white-noise level.
pub const NOISE_MV: f64 = 0.3;
pub const PEAK_MV: f64 = 1.5;
const ENVELOPE_WIDTH: f64 = 48.0;
/// Electrode offset of the envelope in each later session (array shift).
const SESSION_SHIFT: f64 = 8.0;

/// Size and layout of a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    /// Windows per (subject, session); rounded up to whole repetitions of
    /// every gesture, with an even repetition count.
    pub windows: usize,
    pub seed: u64,
    pub db: Database,
    pub subjects: u32,
    pub sessions: u32,
    /// Standard deviation of the additive white noise, in millivolts.
    pub noise_mv: f64,
}

impl SynthSpec {
    pub fn new(windows: usize, seed: u64) -> SynthSpec {
        SynthSpec {
            windows,
            seed,
            db: Database::Dba,
            subjects: 1,
            sessions: 1,
            noise_mv: NOISE_MV,
        }
    }

    /// Repetitions recorded for each gesture.
    pub fn repetitions(&self) -> u32 {
        let per_trial = window_count(TRIAL_SAMPLES, WINDOW, WINDOW_STEP);
        let trials = self.windows.div_ceil(per_trial * NUM_GESTURES).max(1);
        (trials + trials % 2) as u32
    }

    fn validate(&self) -> Result<()> {
        if self.windows == 0 || self.subjects == 0 || self.sessions == 0 {
            return Err(Error::Config("synthetic dataset needs windows, subjects and sessions > 0".into()));
        }
        if !(self.noise_mv >= 0.0 && self.noise_mv.is_finite()) {
            return Err(Error::Config(format!("noise level {} must be finite and >= 0", self.noise_mv)));
        }
        if self.db.num_classes() < NUM_GESTURES {
            return Err(Error::Config(format!("{:?} has fewer than {NUM_GESTURES} gestures", self.db)));
        }
        Ok(())
    }

    fn metas(&self) -> Vec<TrialMeta> {
        let mut out = Vec::new();
        for subject in 1..=self.subjects {
            for session in 1..=self.sessions {
                for gesture in 1..=NUM_GESTURES as u32 {
                    for trial in 1..=self.repetitions() {
                        out.push(TrialMeta {
                            db: self.db,
                            subject,
                            gesture,
                            session,
                            trial,
                            fs: SAMPLE_RATE_HZ,
                        });
                    }
                }
            }
        }
        out
    }
}

fn trial_seed(seed: u64, m: &TrialMeta) -> u64 {
    let parts = [m.subject as u64, m.session as u64, m.gesture as u64, m.trial as u64];
    parts
        .iter()
        .fold(seed ^ 0x5EED_0F5E_4D47_A11D, |h, &p| (h ^ p).wrapping_mul(0x100_0000_01B3).rotate_left(17))
}

/// Raw `128 x TRIAL_SAMPLES` signal of one recording, in millivolts.
pub fn synth_signal(meta: &TrialMeta, seed: u64, noise_mv: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(seed, meta));
    let g = (meta.gesture as usize - 1) % NUM_GESTURES;
    let (freq, wavenumber) = (GESTURE_FREQS_HZ[g], GESTURE_WAVENUMBERS[g]);
    let phase = rng.random_range(0.0..2.0 * PI);
    let gain = rng.random_range(0.8..1.2);
    let centre = CHANNELS as f64 / 2.0 + rng.random_range(-4.0..4.0) + SESSION_SHIFT * (meta.session as f64 - 1.0);
    let noise = Normal::new(0.0, noise_mv).expect("valid noise scale");
    let mut out = Vec::with_capacity(CHANNELS * TRIAL_SAMPLES);
    for c in 0..CHANNELS {
        let d = c as f64 - centre;
        let amp = PEAK_MV * gain * (-d * d / (2.0 * ENVELOPE_WIDTH * ENVELOPE_WIDTH)).exp();
        let spatial = 2.0 * PI * wavenumber * c as f64 / CHANNELS as f64;
        for t in 0..TRIAL_SAMPLES {
            let s = amp * (2.0 * PI * freq * t as f64 / SAMPLE_RATE_HZ + spatial + phase).sin();
            out.push(s + noise.sample(&mut rng));
        }
    }
    out
}

/// All recordings of `spec`, in memory.
pub fn synth_recordings(spec: &SynthSpec) -> Result<Vec<TrialRecording>> {
    spec.validate()?;
    spec.metas()
        .into_iter()
        .map(|m| make_trial(&synth_signal(&m, spec.seed, spec.noise_mv), CHANNELS, m))
        .collect()
}

/// Writes the dataset in canonical layout under `root` and indexes it.
pub fn write_dataset(root: &Path, spec: &SynthSpec) -> Result<DatasetManifest> {
    spec.validate()?;
    for m in spec.metas() {
        ingest_trial(root, &synth_signal(&m, spec.seed, spec.noise_mv), CHANNELS, m)?;
    }
    DatasetManifest::scan(root)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::preprocess_trial;

    #[test]
    fn layout_and_window_counts() {
        let spec = SynthSpec::new(128, 7);
        assert_eq!(spec.repetitions(), 4);
        let recs = synth_recordings(&spec).unwrap();
        assert_eq!(recs.len(), 32);
        let windows: usize = recs.iter().map(|r| preprocess_trial(r).unwrap().len()).sum();
        assert_eq!(windows, 128);
        // odd repetition counts round up to even
        assert_eq!(SynthSpec::new(8, 0).repetitions(), 2);
    }

    #[test]
    fn deterministic_and_seed_dependent() {
        let m = TrialMeta {
            db: Database::Dba,
            subject: 1,
            gesture: 3,
            session: 1,
            trial: 2,
            fs: SAMPLE_RATE_HZ,
        };
        assert_eq!(synth_signal(&m, 7, NOISE_MV), synth_signal(&m, 7, NOISE_MV));
        assert_ne!(synth_signal(&m, 7, NOISE_MV), synth_signal(&m, 8, NOISE_MV));
        let other = TrialMeta { trial: 3, ..m };
        assert_ne!(synth_signal(&m, 7, NOISE_MV), synth_signal(&other, 7, NOISE_MV));
    }

    #[test]
    fn each_gesture_peaks_at_its_own_wave() {
        let project = |s: &[f64], f: f64, k: f64| {
            let (mut re, mut im) = (0.0, 0.0);
            for c in 0..CHANNELS {
                for t in 0..TRIAL_SAMPLES {
                    let a = 2.0 * PI * (f * t as f64 / SAMPLE_RATE_HZ + k * c as f64 / CHANNELS as f64);
                    re += s[c * TRIAL_SAMPLES + t] * a.cos();
                    im += s[c * TRIAL_SAMPLES + t] * a.sin();
                }
            }
            re.hypot(im)
        };
        for gesture in 1..=8u32 {
            let m = TrialMeta {
                db: Database::Dba,
                subject: 1,
                gesture,
                session: 1,
                trial: 1,
                fs: SAMPLE_RATE_HZ,
            };
            let s = synth_signal(&m, 1, NOISE_MV);
            let scores: Vec<f64> = (0..NUM_GESTURES)
                .map(|k| project(&s, GESTURE_FREQS_HZ[k], GESTURE_WAVENUMBERS[k]))
                .collect();
            let best = (0..NUM_GESTURES).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
            assert_eq!(best, gesture as usize - 1, "{scores:?}");
        }
    }
}
