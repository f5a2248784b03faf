//! Accelerometer windows, ingestion, synthetic generation and the two
//! evaluation split protocols.

mod csv_io;
mod synth;

pub use csv_io::{ingest_csv, ingest_reader, write_csv, write_csv_to, SAMPLE_RATE_HZ};
pub use synth::{synth_generate, ClassSpec, FillerSpec, MotifDef, MotifSpec, SubjectVariation, DEFAULT_SPEC_JSON};

use crate::error::{Error, Result};
use crate::model::{ATOMIC_LEN, CHANNELS, SEGMENTS, WINDOW_LEN};
use crate::tensor::Tensor;

/// Activity names; a label is an index into this list.
pub const ACTIVITIES: [&str; 8] = [
    "walking",
    "Nordic walking",
    "running",
    "soccer",
    "rowing",
    "bicycling",
    "exercise bicycling",
    "lying down",
];

pub fn activity_index(name: &str) -> Option<usize> {
    ACTIVITIES.iter().position(|a| *a == name)
}

pub fn activity_name(label: usize) -> Result<&'static str> {
    ACTIVITIES
        .get(label)
        .copied()
        .ok_or_else(|| Error::Argument(format!("label {label} is not an activity index (0..8)")))
}

/// One 15 s tri-axial window.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleWindow {
    /// `[3 x 300]`, units g.
    pub readings: Tensor,
    pub label: usize,
    pub subject: u32,
}

/// All windows of one subject, per activity in chronological order.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectDataset {
    pub subject: u32,
    /// Indexed by label.
    pub streams: Vec<Vec<SampleWindow>>,
}

impl SubjectDataset {
    pub fn new(subject: u32) -> Self {
        SubjectDataset {
            subject,
            streams: vec![Vec::new(); ACTIVITIES.len()],
        }
    }

    pub fn windows(&self) -> impl Iterator<Item = &SampleWindow> {
        self.streams.iter().flatten()
    }

    pub fn window_count(&self) -> usize {
        self.streams.iter().map(Vec::len).sum()
    }
}

/// Cuts a `[3 x 300]` window into five contiguous `[3 x 60]` pieces.
pub fn split_atomic(w: &Tensor) -> Result<Vec<Tensor>> {
    if w.shape() != [CHANNELS, WINDOW_LEN] {
        return Err(Error::Dimension(format!(
            "split_atomic: expected {CHANNELS}x{WINDOW_LEN}, got {:?}",
            w.shape()
        )));
    }
    Ok((0..SEGMENTS)
        .map(|k| {
            let mut d = Vec::with_capacity(CHANNELS * ATOMIC_LEN);
            for ch in 0..CHANNELS {
                let start = ch * WINDOW_LEN + k * ATOMIC_LEN;
                d.extend_from_slice(&w.data()[start..start + ATOMIC_LEN]);
            }
            Tensor::new(vec![CHANNELS, ATOMIC_LEN], d).expect("piece size")
        })
        .collect())
}

/// Inverse of [`split_atomic`].
pub fn join_atomic(pieces: &[Tensor]) -> Result<Tensor> {
    if pieces.len() != SEGMENTS || pieces.iter().any(|p| p.shape() != [CHANNELS, ATOMIC_LEN]) {
        return Err(Error::Dimension(format!(
            "join_atomic: expected {SEGMENTS} pieces of {CHANNELS}x{ATOMIC_LEN}"
        )));
    }
    let mut d = Vec::with_capacity(CHANNELS * WINDOW_LEN);
    for ch in 0..CHANNELS {
        for p in pieces {
            d.extend_from_slice(&p.data()[ch * ATOMIC_LEN..(ch + 1) * ATOMIC_LEN]);
        }
    }
    Tensor::new(vec![CHANNELS, WINDOW_LEN], d)
}

#[derive(Debug, Clone, Default)]
pub struct Split<'a> {
    pub train: Vec<&'a SampleWindow>,
    pub test: Vec<&'a SampleWindow>,
}

/// Leave-one-subject-out: train on every other subject, test on `held_out`.
pub fn population_split(datasets: &[SubjectDataset], held_out: u32) -> Result<Split<'_>> {
    if datasets.len() < 2 {
        return Err(Error::Argument(format!(
            "population split needs at least 2 subjects, got {}",
            datasets.len()
        )));
    }
    if !datasets.iter().any(|d| d.subject == held_out) {
        return Err(Error::Argument(format!("unknown subject id {held_out}")));
    }
    let mut split = Split::default();
    for d in datasets {
        let side = if d.subject == held_out { &mut split.test } else { &mut split.train };
        side.extend(d.windows());
    }
    Ok(split)
}

/// Windows per minute of signal.
const WINDOWS_PER_MINUTE: usize = 60 * crate::data::SAMPLE_RATE_HZ as usize / WINDOW_LEN;

/// Per activity, the first `train_minutes` of windows train and the rest of
/// the first `total_minutes` test.
pub fn personalized_split(d: &SubjectDataset, train_minutes: usize, total_minutes: usize) -> Result<Split<'_>> {
    if train_minutes == 0 || train_minutes >= total_minutes {
        return Err(Error::Argument(format!(
            "need 0 < train_minutes < total_minutes, got {train_minutes} and {total_minutes}"
        )));
    }
    let n_train = train_minutes * WINDOWS_PER_MINUTE;
    let n_total = total_minutes * WINDOWS_PER_MINUTE;
    let mut split = Split::default();
    for (label, stream) in d.streams.iter().enumerate() {
        if stream.is_empty() {
            continue;
        }
        if stream.len() < n_total {
            return Err(Error::Argument(format!(
                "subject {}: activity `{}` has {} windows, {total_minutes} minutes need {n_total}",
                d.subject,
                ACTIVITIES[label],
                stream.len()
            )));
        }
        split.train.extend(&stream[..n_train]);
        split.test.extend(&stream[n_train..n_total]);
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn dataset(subject: u32, per_class: usize) -> SubjectDataset {
        let mut d = SubjectDataset::new(subject);
        for (label, stream) in d.streams.iter_mut().enumerate() {
            for i in 0..per_class {
                stream.push(SampleWindow {
                    readings: Tensor::filled(&[3, 300], (label * 1000 + i) as f64),
                    label,
                    subject,
                });
            }
        }
        d
    }

    #[test]
    fn split_atomic_partition() {
        let x = Tensor::rand_uniform(&mut Rng::new(0), &[3, 300], -1.0, 1.0).unwrap();
        let pieces = split_atomic(&x).unwrap();
        assert_eq!(pieces.len(), 5);
        assert!(pieces.iter().all(|p| p.shape() == [3, 60]));
        assert_eq!(join_atomic(&pieces).unwrap(), x);

        let idx: Vec<f64> = (0..3).flat_map(|_| (0..300).map(|i| i as f64)).collect();
        let pieces = split_atomic(&Tensor::new(vec![3, 300], idx).unwrap()).unwrap();
        for (k, p) in pieces.iter().enumerate() {
            for ch in 0..3 {
                assert_eq!(p.data()[ch * 60], (60 * k) as f64);
            }
        }
        assert!(split_atomic(&Tensor::zeros(&[3, 240])).is_err());
    }

    #[test]
    fn population_split_counts() {
        let ds: Vec<_> = (0..9).map(|s| dataset(s, 20)).collect();
        let split = population_split(&ds, 4).unwrap();
        assert_eq!(split.test.len(), 160);
        assert_eq!(split.train.len(), 8 * 160);
        assert!(split.test.iter().all(|w| w.subject == 4));
        assert!(split.train.iter().all(|w| w.subject != 4));

        let two = vec![dataset(1, 2), dataset(2, 2)];
        let split = population_split(&two, 1).unwrap();
        assert!(split.train.iter().all(|w| w.subject == 2));
        assert_eq!(split.train.len(), two[1].window_count());

        assert!(population_split(&ds, 99).is_err());
        assert!(population_split(&ds[..1], 0).is_err());
    }

    #[test]
    fn personalized_split_counts_and_chronology() {
        let d = dataset(3, 20);
        let split = personalized_split(&d, 2, 5).unwrap();
        assert_eq!(split.train.len(), 8 * 8);
        assert_eq!(split.test.len(), 8 * 12);
        for label in 0..8 {
            let tr: Vec<f64> = split.train.iter().filter(|w| w.label == label).map(|w| w.readings.data()[0]).collect();
            let te: Vec<f64> = split.test.iter().filter(|w| w.label == label).map(|w| w.readings.data()[0]).collect();
            assert_eq!(tr.len(), 8);
            assert_eq!(te.len(), 12);
            assert!(tr.iter().all(|a| te.iter().all(|b| a < b)));
        }
    }

    #[test]
    fn personalized_split_names_short_activity() {
        let mut d = dataset(0, 20);
        d.streams[6].truncate(19);
        let err = personalized_split(&d, 2, 5).unwrap_err().to_string();
        assert!(err.contains("exercise bicycling"), "{err}");
    }

    #[test]
    fn activity_lookup() {
        assert_eq!(activity_index("Nordic walking"), Some(1));
        assert_eq!(activity_index("swimming"), None);
        assert_eq!(activity_name(7).unwrap(), "lying down");
        assert!(activity_name(8).is_err());
    }
}
