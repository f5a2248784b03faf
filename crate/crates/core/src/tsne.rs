//! Exact t-SNE for projecting LSTM internal states to two dimensions.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{activity_name, SampleWindow};
use crate::error::{Error, Result};
use crate::model::{CompositeModel, SEGMENTS};
use crate::tensor::{Rng, Tensor};

pub const PERPLEXITY_TOLERANCE: f64 = 1e-3;
pub const MAX_BISECTION_STEPS: usize = 100;
/// Iteration interval at which the KL divergence is recorded.
pub const KL_RECORD_EVERY: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingSettings {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub momentum_switch: usize,
    pub exaggeration: f64,
    pub exaggeration_iterations: usize,
    /// Rescale each input dimension to zero mean and unit variance.
    pub standardize: bool,
    pub seed: u64,
}

impl Default for EmbeddingSettings {
    fn default() -> Self {
        EmbeddingSettings {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 100.0,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            momentum_switch: 250,
            exaggeration: 4.0,
            exaggeration_iterations: 100,
            standardize: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingJob {
    /// `N` points of dimension `D`.
    pub points: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub settings: EmbeddingSettings,
}

impl EmbeddingJob {
    pub fn validate(&self) -> Result<()> {
        let n = self.points.len();
        let s = &self.settings;
        if !(s.perplexity >= 1.0) || (n as f64) <= 3.0 * s.perplexity {
            return Err(Error::Argument(format!(
                "t-SNE needs N > 3 * perplexity, got N = {n} and perplexity {}",
                s.perplexity
            )));
        }
        let d = self.points[0].len();
        if d < 2 {
            return Err(Error::Argument(format!("t-SNE needs points of dimension >= 2, got {d}")));
        }
        if let Some(i) = self.points.iter().position(|p| p.len() != d || p.iter().any(|v| !v.is_finite())) {
            return Err(Error::Argument(format!("point {i} is not a finite vector of dimension {d}")));
        }
        if self.labels.len() != n {
            return Err(Error::Argument(format!("{} labels for {n} points", self.labels.len())));
        }
        if !(s.learning_rate > 0.0) || s.iterations == 0 {
            return Err(Error::Argument("learning rate and iteration count must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub sigma: f64,
    pub perplexity: f64,
    /// Conditional neighbor distribution over the given distances.
    pub probabilities: Vec<f64>,
}

/// Conditional distribution `exp(-beta d_j) / Z` and its perplexity.
fn conditional(distances: &[f64], beta: f64) -> (Vec<f64>, f64) {
    let d_min = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = distances.iter().map(|&d| (-(d - d_min) * beta).exp()).collect();
    let z: f64 = w.iter().sum();
    let mean_d: f64 = w.iter().zip(distances).map(|(wi, &d)| wi * (d - d_min)).sum::<f64>() / z;
    let entropy = z.ln() + beta * mean_d;
    (w.into_iter().map(|wi| wi / z).collect(), entropy.exp())
}

/// Finds the Gaussian width whose conditional distribution over one row of
/// squared distances has the target perplexity.
pub fn perplexity_calibrate(distances: &[f64], target: f64) -> Result<Calibration> {
    let n = distances.len() + 1;
    if distances.is_empty() || distances.iter().any(|d| !(*d >= 0.0) || !d.is_finite()) {
        return Err(Error::Argument("distances must be a non-empty row of finite non-negative values".into()));
    }
    if !(target >= 1.0) || target >= n as f64 {
        return Err(Error::Argument(format!("target perplexity {target} must be in [1, {n})")));
    }
    let (mut lo, mut hi) = (0.0_f64, f64::INFINITY);
    let mut beta = 1.0;
    let (mut probs, mut perp) = conditional(distances, beta);
    for _ in 0..MAX_BISECTION_STEPS {
        if (perp - target).abs() <= PERPLEXITY_TOLERANCE {
            return Ok(Calibration {
                sigma: (0.5 / beta).sqrt(),
                perplexity: perp,
                probabilities: probs,
            });
        }
        if perp > target {
            lo = beta;
            beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = (beta + lo) / 2.0;
        }
        (probs, perp) = conditional(distances, beta);
    }
    if (perp - target).abs() <= PERPLEXITY_TOLERANCE {
        return Ok(Calibration {
            sigma: (0.5 / beta).sqrt(),
            perplexity: perp,
            probabilities: probs,
        });
    }
    Err(Error::Calibration { achieved: perp, target })
}

fn squared_distances(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = points[i].iter().zip(&points[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    d
}

/// Per-dimension zero mean and unit variance; constant dimensions are only
/// centered.
pub fn standardize(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = points.len() as f64;
    let d = points.first().map_or(0, Vec::len);
    let mut out = points.to_vec();
    for k in 0..d {
        let mean = points.iter().map(|p| p[k]).sum::<f64>() / n;
        let var = points.iter().map(|p| (p[k] - mean).powi(2)).sum::<f64>() / n;
        let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
        for p in &mut out {
            p[k] = (p[k] - mean) / scale;
        }
    }
    out
}

/// Symmetrized joint affinities `p_ij = (p_j|i + p_i|j) / 2N`, `N x N`.
pub fn joint_probabilities(points: &[Vec<f64>], perplexity: f64) -> Result<Tensor> {
    let n = points.len();
    let dist = squared_distances(points);
    let mut cond = vec![0.0; n * n];
    for i in 0..n {
        let row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist[i][j]).collect();
        let cal = perplexity_calibrate(&row, perplexity).map_err(|e| e.context(format!("point {i}")))?;
        for (j, p) in (0..n).filter(|&j| j != i).zip(cal.probabilities) {
            cond[i * n + j] = p;
        }
    }
    let mut joint = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            joint[i * n + j] = (cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64);
        }
    }
    Tensor::new(vec![n, n], joint)
}

/// Unnormalized Student-t kernel `1 / (1 + |y_i - y_j|^2)` and its sum.
fn student_kernel(y: &[[f64; 2]]) -> (Vec<f64>, f64) {
    let n = y.len();
    let mut k = vec![0.0; n * n];
    let mut z = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let dx = y[i][0] - y[j][0];
            let dy = y[i][1] - y[j][1];
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            k[i * n + j] = v;
            k[j * n + i] = v;
            z += 2.0 * v;
        }
    }
    (k, z)
}

/// `KL(P || Q)` for the embedding `y`.
pub fn kl_divergence(p: &Tensor, y: &[[f64; 2]]) -> f64 {
    let n = y.len();
    let (k, z) = student_kernel(y);
    let mut kl = 0.0;
    for (idx, &pij) in p.data().iter().enumerate() {
        if pij > 0.0 && idx / n != idx % n {
            kl += pij * (pij / (k[idx] / z)).ln();
        }
    }
    kl
}

/// `dKL/dy_i = 4 sum_j (p_ij - q_ij) (y_i - y_j) / (1 + |y_i - y_j|^2)`.
pub fn kl_gradient(p: &Tensor, y: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let n = y.len();
    let (k, z) = student_kernel(y);
    let pd = p.data();
    (0..n)
        .map(|i| {
            let mut g = [0.0; 2];
            for j in 0..n {
                if j == i {
                    continue;
                }
                let w = (pd[i * n + j] - k[i * n + j] / z) * k[i * n + j];
                g[0] += 4.0 * w * (y[i][0] - y[j][0]);
                g[1] += 4.0 * w * (y[i][1] - y[j][1]);
            }
            g
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub coords: Vec<[f64; 2]>,
    pub labels: Vec<usize>,
    /// `(iteration, KL)` every [`KL_RECORD_EVERY`] iterations.
    pub kl_trace: Vec<(usize, f64)>,
}

/// Gradient descent with momentum and per-coordinate adaptive gains on
/// `KL(P || Q)`, starting from a small Gaussian cloud.
pub fn tsne_embed(job: &EmbeddingJob) -> Result<Embedding> {
    job.validate()?;
    let s = &job.settings;
    let points = if s.standardize { standardize(&job.points) } else { job.points.clone() };
    let p = joint_probabilities(&points, s.perplexity)?;
    let exaggerated = p.scale(s.exaggeration);
    let n = points.len();

    let mut rng = Rng::new(s.seed);
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [1e-4 * rng.normal(), 1e-4 * rng.normal()]).collect();
    let mut velocity = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0_f64; 2]; n];
    let mut kl_trace = Vec::new();
    for iter in 1..=s.iterations {
        let target = if iter <= s.exaggeration_iterations { &exaggerated } else { &p };
        let momentum = if iter <= s.momentum_switch { s.initial_momentum } else { s.final_momentum };
        let grad = kl_gradient(target, &y);
        for i in 0..n {
            for a in 0..2 {
                gains[i][a] = if (grad[i][a] > 0.0) != (velocity[i][a] > 0.0) {
                    gains[i][a] + 0.2
                } else {
                    (gains[i][a] * 0.8).max(0.01)
                };
                velocity[i][a] = momentum * velocity[i][a] - s.learning_rate * gains[i][a] * grad[i][a];
                y[i][a] += velocity[i][a];
            }
        }
        for a in 0..2 {
            let mean = y.iter().map(|v| v[a]).sum::<f64>() / n as f64;
            y.iter_mut().for_each(|v| v[a] -= mean);
        }
        if iter % KL_RECORD_EVERY == 0 {
            let kl = kl_divergence(&p, &y);
            if !kl.is_finite() {
                return Err(Error::Numeric(format!("KL divergence became {kl} at iteration {iter}")));
            }
            kl_trace.push((iter, kl));
        }
    }
    Ok(Embedding {
        coords: y,
        labels: job.labels.clone(),
        kl_trace,
    })
}

/// Fraction of points whose nearest other point shares their label.
pub fn neighbor_purity(coords: &[[f64; 2]], labels: &[usize]) -> f64 {
    let n = coords.len();
    let hits = (0..n)
        .filter(|&i| {
            let nearest = (0..n)
                .filter(|&j| j != i)
                .min_by(|&a, &b| {
                    let da = (coords[i][0] - coords[a][0]).powi(2) + (coords[i][1] - coords[a][1]).powi(2);
                    let db = (coords[i][0] - coords[b][0]).powi(2) + (coords[i][1] - coords[b][1]).powi(2);
                    da.total_cmp(&db)
                })
                .expect("at least two points");
            labels[nearest] == labels[i]
        })
        .count();
    hits as f64 / n as f64
}

/// Distance between the centroids of classes `a` and `b` divided by their
/// mean RMS spread around their own centroids. Scale free, so comparable
/// across embeddings.
pub fn centroid_separation(coords: &[[f64; 2]], labels: &[usize], a: usize, b: usize) -> Result<f64> {
    let stats = |class: usize| -> Result<([f64; 2], f64)> {
        let members: Vec<&[f64; 2]> = coords.iter().zip(labels).filter(|(_, &l)| l == class).map(|(c, _)| c).collect();
        if members.is_empty() {
            return Err(Error::Argument(format!("no points with label {class}")));
        }
        let m = members.len() as f64;
        let centroid = [
            members.iter().map(|c| c[0]).sum::<f64>() / m,
            members.iter().map(|c| c[1]).sum::<f64>() / m,
        ];
        let spread = (members
            .iter()
            .map(|c| (c[0] - centroid[0]).powi(2) + (c[1] - centroid[1]).powi(2))
            .sum::<f64>()
            / m)
            .sqrt();
        Ok((centroid, spread))
    };
    let (ca, sa) = stats(a)?;
    let (cb, sb) = stats(b)?;
    let gap = ((ca[0] - cb[0]).powi(2) + (ca[1] - cb[1]).powi(2)).sqrt();
    let spread = (sa + sb) / 2.0;
    if spread == 0.0 {
        return Err(Error::Numeric("both classes collapse to a single point".into()));
    }
    Ok(gap / spread)
}

/// Parses `s1`..`s5` into a 1-based state index.
pub fn parse_state(which: &str) -> Result<usize> {
    which
        .strip_prefix('s')
        .and_then(|k| k.parse::<usize>().ok())
        .filter(|k| (1..=SEGMENTS).contains(k))
        .ok_or_else(|| {
            let options: Vec<String> = (1..=SEGMENTS).map(|k| format!("s{k}")).collect();
            Error::Argument(format!("unknown state `{which}`; expected one of {}", options.join(", ")))
        })
}

/// The `step`-th internal state (1-based) of the model for each window.
pub fn collect_states(model: &CompositeModel, windows: &[&SampleWindow], step: usize) -> Result<Vec<Vec<f64>>> {
    windows
        .iter()
        .map(|w| Ok(model.run(&w.readings)?.state(step)?.into_data()))
        .collect()
}

pub fn write_embedding_csv(embedding: &Embedding, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let csv_err = |e: csv::Error| Error::Argument(format!("writing {}: {e}", path.display()));
    w.write_record(["x", "y", "label", "activity_name"]).map_err(csv_err)?;
    for (c, &label) in embedding.coords.iter().zip(&embedding.labels) {
        w.write_record([c[0].to_string(), c[1].to_string(), label.to_string(), activity_name(label)?.to_string()])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Embeds the `step`-th state of every window and writes
/// `x,y,label,activity_name` rows in window order.
pub fn export_states(
    model: &CompositeModel,
    windows: &[&SampleWindow],
    step: usize,
    settings: &EmbeddingSettings,
    path: &Path,
) -> Result<Embedding> {
    if windows.is_empty() {
        return Err(Error::Argument("no windows to embed".into()));
    }
    let job = EmbeddingJob {
        points: collect_states(model, windows, step)?,
        labels: windows.iter().map(|w| w.label).collect(),
        settings: settings.clone(),
    };
    let embedding = tsne_embed(&job)?;
    write_embedding_csv(&embedding, path)?;
    Ok(embedding)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;
    use proptest::prelude::*;

    fn gaussian_points(rng: &mut Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| rng.normal()).collect()).collect()
    }

    fn two_clusters(rng: &mut Rng) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for i in 0..60 {
            let label = i % 2;
            let center = if label == 0 { -5.0 } else { 5.0 };
            pts.push((0..16).map(|_| center + rng.normal()).collect());
            labels.push(label);
        }
        (pts, labels)
    }

    fn entropy_perplexity(p: &[f64]) -> f64 {
        2f64.powf(-p.iter().filter(|&&v| v > 0.0).map(|v| v * v.log2()).sum::<f64>())
    }

    #[test]
    fn uniform_distances() {
        let row = vec![2.5; 9];
        let cal = perplexity_calibrate(&row, 9.0).unwrap();
        assert!(cal.probabilities.iter().all(|&p| (p - 1.0 / 9.0).abs() < 1e-15));
        assert!(matches!(
            perplexity_calibrate(&row, 5.0),
            Err(Error::Calibration { achieved, .. }) if (achieved - 9.0).abs() < 1e-9
        ));
    }

    #[test]
    fn calibration_hits_target_on_gaussian_data() {
        let mut rng = Rng::new(3);
        let pts = gaussian_points(&mut rng, 50, 5);
        let d = squared_distances(&pts);
        for i in 0..50 {
            let row: Vec<f64> = (0..50).filter(|&j| j != i).map(|j| d[i][j]).collect();
            let cal = perplexity_calibrate(&row, 30.0).unwrap();
            assert!((entropy_perplexity(&cal.probabilities) - 30.0).abs() < 1e-3);
        }
    }

    #[test]
    fn sigma_grows_with_target() {
        let mut rng = Rng::new(4);
        let row: Vec<f64> = (0..40).map(|_| rng.uniform(0.0, 10.0)).collect();
        let sigmas: Vec<f64> = [5.0, 10.0, 20.0, 30.0]
            .iter()
            .map(|&t| perplexity_calibrate(&row, t).unwrap().sigma)
            .collect();
        assert!(sigmas.windows(2).all(|w| w[0] < w[1]), "{sigmas:?}");
    }

    #[test]
    fn calibration_rejects_bad_arguments() {
        assert!(perplexity_calibrate(&[1.0, 2.0], 3.0).is_err());
        assert!(perplexity_calibrate(&[1.0, -2.0], 1.5).is_err());
        assert!(perplexity_calibrate(&[], 1.0).is_err());
    }

    #[test]
    fn joint_probabilities_contract() {
        let pts = gaussian_points(&mut Rng::new(5), 40, 4);
        let p = joint_probabilities(&pts, 10.0).unwrap();
        let n = 40;
        let d = p.data();
        assert!((p.sum() - 1.0).abs() < 1e-10);
        for i in 0..n {
            assert_eq!(d[i * n + i], 0.0);
            for j in 0..n {
                assert!(d[i * n + j] >= 0.0);
                assert!((d[i * n + j] - d[j * n + i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let mut rng = Rng::new(6);
        let pts = gaussian_points(&mut rng, 10, 3);
        let p = joint_probabilities(&pts, 3.0).unwrap();
        let mut y: Vec<[f64; 2]> = (0..10).map(|_| [rng.normal(), rng.normal()]).collect();
        let analytic: Vec<f64> = kl_gradient(&p, &y).into_iter().flatten().collect();
        let eps = 1e-5;
        let mut numeric = Vec::new();
        for i in 0..10 {
            for a in 0..2 {
                let orig = y[i][a];
                y[i][a] = orig + eps;
                let up = kl_divergence(&p, &y);
                y[i][a] = orig - eps;
                let down = kl_divergence(&p, &y);
                y[i][a] = orig;
                numeric.push((up - down) / (2.0 * eps));
            }
        }
        let err = crate::gradcheck::relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "{err:e}");
    }

    #[test]
    fn separated_clusters_stay_pure_and_kl_falls() {
        let (points, labels) = two_clusters(&mut Rng::new(7));
        let job = EmbeddingJob {
            points,
            labels: labels.clone(),
            settings: EmbeddingSettings {
                perplexity: 15.0,
                ..EmbeddingSettings::default()
            },
        };
        let e = tsne_embed(&job).unwrap();
        assert!(neighbor_purity(&e.coords, &labels) >= 0.95);
        let first = e.kl_trace.first().unwrap();
        let last = e.kl_trace.last().unwrap();
        assert_eq!((first.0, last.0), (50, 1000));
        assert!(last.1 < first.1);
        assert!(e.kl_trace.iter().all(|(_, kl)| kl.is_finite()));
    }

    #[test]
    fn deterministic_per_seed() {
        let (points, labels) = two_clusters(&mut Rng::new(8));
        let mut job = EmbeddingJob {
            points,
            labels,
            settings: EmbeddingSettings {
                perplexity: 10.0,
                iterations: 200,
                ..EmbeddingSettings::default()
            },
        };
        let a = tsne_embed(&job).unwrap();
        assert_eq!(a, tsne_embed(&job).unwrap());
        job.settings.seed = 1;
        assert_ne!(a.coords, tsne_embed(&job).unwrap().coords);
    }

    #[test]
    fn job_validation() {
        let pts = gaussian_points(&mut Rng::new(9), 30, 3);
        let job = EmbeddingJob {
            points: pts.clone(),
            labels: vec![0; 30],
            settings: EmbeddingSettings::default(),
        };
        assert!(job.validate().is_err());
        let one_dim = EmbeddingJob {
            points: pts.iter().map(|p| vec![p[0]]).collect(),
            labels: vec![0; 30],
            settings: EmbeddingSettings {
                perplexity: 5.0,
                ..EmbeddingSettings::default()
            },
        };
        assert!(one_dim.validate().is_err());
    }

    #[test]
    fn state_names() {
        assert_eq!(parse_state("s1").unwrap(), 1);
        assert_eq!(parse_state("s5").unwrap(), 5);
        for bad in ["s0", "s6", "x1", ""] {
            let msg = parse_state(bad).unwrap_err().to_string();
            assert!(msg.contains("s1, s2, s3, s4, s5"), "{msg}");
        }
    }

    #[test]
    fn separation_is_scale_free() {
        let coords = [[0.0, 0.0], [1.0, 0.0], [10.0, 0.0], [11.0, 0.0]];
        let labels = [0, 0, 1, 1];
        let s = centroid_separation(&coords, &labels, 0, 1).unwrap();
        assert!((s - 20.0).abs() < 1e-12);
        let scaled: Vec<[f64; 2]> = coords.iter().map(|c| [3.0 * c[0], 3.0 * c[1]]).collect();
        assert!((centroid_separation(&scaled, &labels, 0, 1).unwrap() - s).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn joint_probabilities_sum_to_one(seed in any::<u64>(), n in 12usize..30) {
            let pts = gaussian_points(&mut Rng::new(seed), n, 3);
            let p = joint_probabilities(&pts, 3.0).unwrap();
            prop_assert!((p.sum() - 1.0).abs() < 1e-10);
        }

        #[test]
        fn standardized_columns(seed in any::<u64>()) {
            let pts: Vec<Vec<f64>> = gaussian_points(&mut Rng::new(seed), 20, 3)
                .into_iter()
                .map(|p| vec![3.0 * p[0] + 1.0, p[1] - 4.0, 7.0])
                .collect();
            let z = standardize(&pts);
            for k in 0..3 {
                let mean: f64 = z.iter().map(|p| p[k]).sum::<f64>() / 20.0;
                prop_assert!(mean.abs() < 1e-12);
            }
            for k in 0..2 {
                let var: f64 = z.iter().map(|p| p[k] * p[k]).sum::<f64>() / 20.0;
                prop_assert!((var - 1.0).abs() < 1e-12);
            }
        }
    }
}
