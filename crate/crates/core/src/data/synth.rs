//! Synthetic accelerometer data built from sinusoidal atomic motifs.
//!
//! A motif renders one 3 s atomic window per axis as
//! `offset + amplitude * (1 + drift * (t / 3 - 1/2)) * sin(2 pi f t + phase) + noise`.
//! A class lists five motif ids. Classes may replace some slots with
//! fillers drawn from a pool and may rotate the whole sequence by a random
//! cyclic shift; two classes whose sequences are mirror images under those
//! rotations share every per-slot distribution and differ only in the
//! order of their motifs.

use std::collections::HashSet;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::csv_io::SAMPLE_RATE_HZ;
use super::{activity_index, SampleWindow, SubjectDataset};
use crate::error::{Error, Result};
use crate::model::{ATOMIC_LEN, CHANNELS, SEGMENTS, WINDOW_LEN};
use crate::tensor::{mix_seed, Rng, Tensor};

pub const DEFAULT_SPEC_JSON: &str = include_str!("../../specs/default_motifs.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotifDef {
    pub name: String,
    /// Hz; must be below the 10 Hz Nyquist limit.
    pub frequency: f64,
    pub amplitude: [f64; 3],
    pub offset: [f64; 3],
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    /// Relative amplitude change across the 3 s window.
    #[serde(default)]
    pub amplitude_drift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FillerSpec {
    pub slots: Vec<usize>,
    pub pool: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    /// Activity name; fixes the label.
    pub name: String,
    pub sequence: [usize; SEGMENTS],
    #[serde(default)]
    pub cyclic_shift: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filler: Option<FillerSpec>,
}

/// Per-subject perturbation applied identically to every window of that subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SubjectVariation {
    /// Amplitudes are scaled by `1 + u`, `u` uniform in `[-amplitude, amplitude]`.
    pub amplitude: f64,
    /// Offsets are shifted by `u` uniform in `[-offset, offset]`.
    pub offset: f64,
    /// Draws a phase per (subject, motif, axis); zero phase otherwise.
    pub random_phase: bool,
    /// Every motif occurrence gets a phase shift uniform in
    /// `[-occurrence_phase, occurrence_phase]` radians, shared by its axes.
    pub occurrence_phase: f64,
}

impl Default for SubjectVariation {
    fn default() -> Self {
        SubjectVariation {
            amplitude: 0.0,
            offset: 0.0,
            random_phase: false,
            occurrence_phase: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotifSpec {
    pub motifs: Vec<MotifDef>,
    pub classes: Vec<ClassSpec>,
    #[serde(default)]
    pub order_swapped_pairs: Vec<[String; 2]>,
    #[serde(default)]
    pub subject_variation: SubjectVariation,
}

fn invalid(pointer: String, msg: impl std::fmt::Display) -> Error {
    Error::Argument(format!("{pointer}: {msg}"))
}

impl MotifSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: MotifSpec = serde_json::from_str(text).map_err(|e| Error::Config(format!("motif spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn default_spec() -> Self {
        Self::from_json(DEFAULT_SPEC_JSON).expect("shipped motif spec is valid")
    }

    /// Checks ranges and references. Errors carry a JSON pointer to the
    /// offending value.
    pub fn validate(&self) -> Result<()> {
        if self.motifs.is_empty() {
            return Err(invalid("/motifs".into(), "at least one motif is required"));
        }
        let nyquist = SAMPLE_RATE_HZ / 2.0;
        for (i, m) in self.motifs.iter().enumerate() {
            if !(m.frequency > 0.0 && m.frequency < nyquist) {
                return Err(invalid(
                    format!("/motifs/{i}/frequency"),
                    format!("{} Hz is outside (0, {nyquist})", m.frequency),
                ));
            }
            if !(m.noise >= 0.0 && m.noise.is_finite()) {
                return Err(invalid(format!("/motifs/{i}/noise"), "must be finite and >= 0"));
            }
            if !m.amplitude_drift.is_finite() {
                return Err(invalid(format!("/motifs/{i}/amplitude_drift"), "must be finite"));
            }
            if m.amplitude.iter().chain(&m.offset).any(|v| !v.is_finite()) {
                return Err(invalid(format!("/motifs/{i}"), "amplitude and offset must be finite"));
            }
        }
        let motif_ok = |id: usize| id < self.motifs.len();
        let mut seen = HashSet::new();
        for (c, class) in self.classes.iter().enumerate() {
            if activity_index(&class.name).is_none() {
                return Err(invalid(format!("/classes/{c}/name"), format!("unknown activity `{}`", class.name)));
            }
            if !seen.insert(class.name.as_str()) {
                return Err(invalid(format!("/classes/{c}/name"), format!("duplicate class `{}`", class.name)));
            }
            if let Some(k) = class.sequence.iter().position(|&id| !motif_ok(id)) {
                return Err(invalid(format!("/classes/{c}/sequence/{k}"), "unknown motif id"));
            }
            if let Some(f) = &class.filler {
                if let Some(k) = f.slots.iter().position(|&s| s >= SEGMENTS) {
                    return Err(invalid(format!("/classes/{c}/filler/slots/{k}"), "slot out of range"));
                }
                if f.pool.is_empty() {
                    return Err(invalid(format!("/classes/{c}/filler/pool"), "pool is empty"));
                }
                if let Some(k) = f.pool.iter().position(|&id| !motif_ok(id)) {
                    return Err(invalid(format!("/classes/{c}/filler/pool/{k}"), "unknown motif id"));
                }
            }
        }
        for (p, [a, b]) in self.order_swapped_pairs.iter().enumerate() {
            let find = |name: &str, k: usize| {
                self.classes
                    .iter()
                    .find(|c| c.name == name)
                    .ok_or_else(|| invalid(format!("/order_swapped_pairs/{p}/{k}"), format!("unknown class `{name}`")))
            };
            let (ca, cb) = (find(a, 0)?, find(b, 1)?);
            if ca.fixed_multiset() != cb.fixed_multiset() || ca.filler != cb.filler {
                return Err(invalid(
                    format!("/order_swapped_pairs/{p}"),
                    "paired classes must share their motif multiset and filler rule",
                ));
            }
        }
        let v = &self.subject_variation;
        if !(v.amplitude >= 0.0 && v.amplitude < 1.0 && v.offset >= 0.0 && v.offset.is_finite()) {
            return Err(invalid("/subject_variation".into(), "amplitude must be in [0, 1), offset >= 0"));
        }
        if !(v.occurrence_phase >= 0.0 && v.occurrence_phase <= PI) {
            return Err(invalid("/subject_variation/occurrence_phase".into(), "must be in [0, pi]"));
        }
        Ok(())
    }

    /// Labels of each declared order-swapped pair.
    pub fn pair_labels(&self) -> Vec<(usize, usize)> {
        self.order_swapped_pairs
            .iter()
            .filter_map(|[a, b]| Some((activity_index(a)?, activity_index(b)?)))
            .collect()
    }

    /// Motif ids of one window of `class`, after fillers and rotation.
    pub fn arrange(class: &ClassSpec, rng: &mut Rng) -> [usize; SEGMENTS] {
        let mut seq = class.sequence;
        if let Some(f) = &class.filler {
            for &slot in &f.slots {
                seq[slot] = f.pool[rng.below(f.pool.len())];
            }
        }
        if class.cyclic_shift {
            seq.rotate_left(rng.below(SEGMENTS));
        }
        seq
    }
}

impl ClassSpec {
    /// Sorted motif ids outside the filler slots.
    fn fixed_multiset(&self) -> Vec<usize> {
        let skip: Vec<usize> = self.filler.as_ref().map(|f| f.slots.clone()).unwrap_or_default();
        let mut v: Vec<usize> = (0..SEGMENTS).filter(|k| !skip.contains(k)).map(|k| self.sequence[k]).collect();
        v.sort_unstable();
        v
    }
}

/// Subject-specific rendering parameters per (motif, axis).
struct SubjectStyle {
    amplitude: Vec<[f64; 3]>,
    offset: Vec<[f64; 3]>,
    phase: Vec<[f64; 3]>,
}

impl SubjectStyle {
    fn draw(spec: &MotifSpec, rng: &mut Rng) -> Self {
        let v = &spec.subject_variation;
        let mut style = SubjectStyle {
            amplitude: Vec::new(),
            offset: Vec::new(),
            phase: Vec::new(),
        };
        for m in &spec.motifs {
            let mut a = [0.0; 3];
            let mut o = [0.0; 3];
            let mut p = [0.0; 3];
            for ax in 0..CHANNELS {
                a[ax] = m.amplitude[ax] * (1.0 + v.amplitude * rng.uniform(-1.0, 1.0));
                o[ax] = m.offset[ax] + v.offset * rng.uniform(-1.0, 1.0);
                p[ax] = if v.random_phase { rng.uniform(0.0, 2.0 * PI) } else { 0.0 };
            }
            style.amplitude.push(a);
            style.offset.push(o);
            style.phase.push(p);
        }
        style
    }
}

fn render(spec: &MotifSpec, style: &SubjectStyle, seq: &[usize; SEGMENTS], rng: &mut Rng) -> Tensor {
    let mut d = vec![0.0; CHANNELS * WINDOW_LEN];
    let span = ATOMIC_LEN as f64 / SAMPLE_RATE_HZ;
    for (k, &id) in seq.iter().enumerate() {
        let m = &spec.motifs[id];
        let jitter = spec.subject_variation.occurrence_phase;
        let shift = if jitter > 0.0 { rng.uniform(-jitter, jitter) } else { 0.0 };
        for ax in 0..CHANNELS {
            for n in 0..ATOMIC_LEN {
                let t = n as f64 / SAMPLE_RATE_HZ;
                let envelope = 1.0 + m.amplitude_drift * (t / span - 0.5);
                let clean = style.offset[id][ax]
                    + style.amplitude[id][ax] * envelope * (2.0 * PI * m.frequency * t + style.phase[id][ax] + shift).sin();
                let noise = if m.noise > 0.0 { m.noise * rng.normal() } else { 0.0 };
                d[ax * WINDOW_LEN + k * ATOMIC_LEN + n] = clean + noise;
            }
        }
    }
    Tensor::new(vec![CHANNELS, WINDOW_LEN], d).expect("window size")
}

/// Generates subjects `1..=n_subjects`, each with `windows_per_class`
/// chronological windows of every class in `spec`.
pub fn synth_generate(
    spec: &MotifSpec,
    n_subjects: usize,
    windows_per_class: usize,
    rng: &mut Rng,
) -> Result<Vec<SubjectDataset>> {
    spec.validate()?;
    let base = rng.next_u64();
    (1..=n_subjects as u32)
        .map(|subject| {
            let mut srng = Rng::new(mix_seed(&[base, subject as u64]));
            let style = SubjectStyle::draw(spec, &mut srng);
            let mut ds = SubjectDataset::new(subject);
            for class in &spec.classes {
                let label = activity_index(&class.name).expect("validated");
                for _ in 0..windows_per_class {
                    let seq = MotifSpec::arrange(class, &mut srng);
                    ds.streams[label].push(SampleWindow {
                        readings: render(spec, &style, &seq, &mut srng),
                        label,
                        subject,
                    });
                }
            }
            Ok(ds)
        })
        .collect()
}
