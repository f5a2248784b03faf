//! Experiment harness for the population and personalized protocols.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{personalized_split, population_split, Split, SubjectDataset};
use crate::error::{Error, Result};
use crate::model::{argmax, ArchConfig, Model, ModelKind, Network};
use crate::optim::{train, TrainConfig};
use crate::tensor::{mix_seed, Rng};

/// Fraction of positions where `preds` and `labels` agree.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::Argument(format!(
            "accuracy needs equal non-empty lists, got {} predictions and {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Population,
    Personalized,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Population => "population",
            Protocol::Personalized => "personalized",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub protocol: Protocol,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub repetitions: usize,
    pub base_seed: u64,
    /// Minutes per activity used for training in the personalized protocol.
    #[serde(default = "default_train_minutes")]
    pub train_minutes: usize,
    #[serde(default = "default_total_minutes")]
    pub total_minutes: usize,
    /// Class pairs scored by a two-way decision between their logits.
    #[serde(default)]
    pub pairs: Vec<[usize; 2]>,
}

fn default_train_minutes() -> usize {
    2
}

fn default_total_minutes() -> usize {
    5
}

impl ExperimentConfig {
    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    /// Seed of the run for `user` and repetition `rep`.
    pub fn run_seed(&self, user: u32, rep: usize) -> u64 {
        mix_seed(&[self.base_seed, user as u64, rep as u64])
    }
}

/// Correct and total two-way decisions for one class pair.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairScore {
    pub correct: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub rep: usize,
    pub seed: u64,
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub pair_scores: Vec<PairScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserResult {
    pub user: u32,
    pub runs: Vec<RunResult>,
    pub mean: f64,
}

impl UserResult {
    pub fn accuracies(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.accuracy).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub protocol: Protocol,
    pub model: ModelKind,
    pub repetitions: usize,
    pub config_hash: String,
    pub users: Vec<UserResult>,
    /// Unweighted mean of the per-user means.
    pub overall_mean: f64,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

impl ExperimentReport {
    /// Pooled two-way accuracy of pair `index` over every run.
    pub fn pair_accuracy(&self, index: usize) -> Option<f64> {
        let (mut c, mut t) = (0, 0);
        for r in self.users.iter().flat_map(|u| &u.runs) {
            let s = r.pair_scores.get(index)?;
            c += s.correct;
            t += s.total;
        }
        (t > 0).then(|| c as f64 / t as f64)
    }

    pub fn seeds(&self) -> Vec<Vec<u64>> {
        self.users.iter().map(|u| u.runs.iter().map(|r| r.seed).collect()).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("report JSON: {e}")))
    }

    /// Rows `model,protocol,user,rep,accuracy`, then one `mean` row per
    /// user and a final `all,mean` row.
    pub fn to_csv(&self) -> String {
        let (m, p) = (self.model.name(), self.protocol.name());
        let mut out = String::from("model,protocol,user,rep,accuracy\n");
        for u in &self.users {
            for r in &u.runs {
                let _ = writeln!(out, "{m},{p},{},{},{}", u.user, r.rep, r.accuracy);
            }
        }
        for u in &self.users {
            let _ = writeln!(out, "{m},{p},{},mean,{}", u.user, u.mean);
        }
        let _ = writeln!(out, "{m},{p},all,mean,{}", self.overall_mean);
        out
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        for (ext, body) in [("csv", self.to_csv()), ("json", self.to_json())] {
            let path = dir.join(format!("{stem}.{ext}"));
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Evaluates `model` on `windows`, returning accuracy, confusion matrix and
/// pair scores.
pub fn evaluate(model: &Model, test: &Split<'_>, pairs: &[[usize; 2]]) -> Result<(f64, Vec<Vec<usize>>, Vec<PairScore>)> {
    let k = model.num_classes();
    let mut confusion = vec![vec![0; k]; k];
    let mut scores = vec![PairScore::default(); pairs.len()];
    let mut preds = Vec::with_capacity(test.test.len());
    let mut labels = Vec::with_capacity(test.test.len());
    for w in &test.test {
        let z = model.logits(&w.readings)?;
        let pred = argmax(z.data());
        confusion[w.label][pred] += 1;
        for (s, &[a, b]) in scores.iter_mut().zip(pairs) {
            if w.label == a || w.label == b {
                let two_way = if z.data()[b] > z.data()[a] { b } else { a };
                s.total += 1;
                s.correct += usize::from(two_way == w.label);
            }
        }
        preds.push(pred);
        labels.push(w.label);
    }
    Ok((accuracy(&preds, &labels)?, confusion, scores))
}

fn run_one(cfg: &ExperimentConfig, datasets: &[SubjectDataset], user_idx: usize, rep: usize) -> Result<RunResult> {
    let user = datasets[user_idx].subject;
    let split = match cfg.protocol {
        Protocol::Population => {
            let s = population_split(datasets, user)?;
            if let Some(w) = s.train.iter().find(|w| w.subject == user) {
                return Err(Error::State(format!(
                    "population split leaked a window of held-out subject {} into training",
                    w.subject
                )));
            }
            s
        }
        Protocol::Personalized => personalized_split(&datasets[user_idx], cfg.train_minutes, cfg.total_minutes)?,
    };
    if split.test.is_empty() {
        return Err(Error::Argument(format!("subject {user} has no test windows")));
    }
    let seed = cfg.run_seed(user, rep);
    let mut rng = Rng::new(seed);
    let mut model = Model::build(&cfg.arch, &mut rng)?;
    let data: Vec<_> = split.train.iter().map(|w| (&w.readings, w.label)).collect();
    let train_cfg = TrainConfig { seed, ..cfg.train.clone() };
    train(&mut model, &data, &train_cfg, &mut rng)?;
    let (accuracy, confusion, pair_scores) = evaluate(&model, &split, &cfg.pairs)?;
    log::info!(
        "{} {} user {user} rep {rep}: accuracy {accuracy:.4}",
        cfg.arch.kind.name(),
        cfg.protocol.name()
    );
    Ok(RunResult {
        rep,
        seed,
        accuracy,
        confusion,
        pair_scores,
    })
}

/// Trains and evaluates one fresh model per (user, repetition). Runs execute
/// in parallel on the current rayon pool; results are assembled in
/// (user, repetition) order so the report does not depend on scheduling.
pub fn run_experiment(cfg: &ExperimentConfig, datasets: &[SubjectDataset]) -> Result<ExperimentReport> {
    if cfg.repetitions == 0 {
        return Err(Error::Argument("repetitions must be >= 1".into()));
    }
    if datasets.is_empty() {
        return Err(Error::Argument("no subjects to evaluate".into()));
    }
    cfg.arch.validate()?;
    cfg.train.validate()?;
    if let Some(p) = cfg.pairs.iter().flatten().find(|&&c| c >= cfg.arch.classes) {
        return Err(Error::Argument(format!("pair class {p} exceeds class count {}", cfg.arch.classes)));
    }
    let jobs: Vec<(usize, usize)> = (0..datasets.len())
        .flat_map(|u| (0..cfg.repetitions).map(move |r| (u, r)))
        .collect();
    let results: Vec<Result<RunResult>> = jobs
        .par_iter()
        .map(|&(u, r)| {
            run_one(cfg, datasets, u, r)
                .map_err(|e| e.context(format!("user {} repetition {r}", datasets[u].subject)))
        })
        .collect();
    let mut results = results.into_iter();
    let mut users = Vec::with_capacity(datasets.len());
    for d in datasets {
        let runs = (0..cfg.repetitions)
            .map(|_| results.next().expect("one result per job"))
            .collect::<Result<Vec<_>>>()?;
        let m = mean(&runs.iter().map(|r| r.accuracy).collect::<Vec<_>>());
        users.push(UserResult {
            user: d.subject,
            runs,
            mean: m,
        });
    }
    let overall_mean = mean(&users.iter().map(|u| u.mean).collect::<Vec<_>>());
    Ok(ExperimentReport {
        protocol: cfg.protocol,
        model: cfg.arch.kind,
        repetitions: cfg.repetitions,
        config_hash: cfg.hash(),
        users,
        overall_mean,
    })
}
