//! Planted-profile synthetic task.
//!
//! Each instruction cluster owns a weight profile `w*`. A sample pairs an
//! instruction embedding drawn near its cluster centroid with a freshly
//! generated feature stack; its label is the frozen readout of the teacher
//! pipeline run with `w*`, plus Gaussian noise.

use crate::allocator::WeightVector;
use crate::embedding::SentenceEmbedding;
use crate::error::{Error, Result};
use crate::fusion::{static_pipeline, AdapterConfig, AdapterParams};
use crate::hierarchy::{make_grouping, synth_features, GroupSummaries, GroupingScheme, SynthSpec};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub clusters: usize,
    pub groups: usize,
    pub layers: usize,
    pub patches: usize,
    pub feature_dim: usize,
    pub sentence_dim: usize,
    pub adapter_dim: usize,
    /// Width of the adapter's hidden layer.
    pub adapter_hidden: usize,
    pub readout_dim: usize,
    pub train_per_cluster: usize,
    pub heldout_per_cluster: usize,
    /// Standard deviation of the label noise.
    pub noise_scale: f64,
    /// The readout is scaled so that labels generated with uniform weights
    /// differ from the planted labels by this mean squared error.
    pub contrast: f64,
    /// Per-coordinate standard deviation of embeddings around a centroid.
    pub embedding_spread: f64,
    /// Minimum pairwise L1 distance between planted profiles.
    pub min_profile_gap: f64,
    /// Explicit profiles; drawn from the seed when `None`.
    pub profiles: Option<Vec<Vec<f64>>>,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            clusters: 3,
            groups: 4,
            layers: 8,
            patches: 16,
            feature_dim: 32,
            sentence_dim: 48,
            adapter_dim: 64,
            adapter_hidden: 64,
            readout_dim: 16,
            train_per_cluster: 128,
            heldout_per_cluster: 32,
            noise_scale: 0.01,
            contrast: 1.0,
            embedding_spread: 0.1,
            min_profile_gap: 0.5,
            profiles: None,
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.clusters < 2 || self.groups < 2 {
            return Err(Error::Config(format!(
                "task needs at least 2 clusters and 2 groups (got {}, {})",
                self.clusters, self.groups
            )));
        }
        let dims = [
            self.patches,
            self.feature_dim,
            self.sentence_dim,
            self.adapter_dim,
            self.adapter_hidden,
            self.readout_dim,
            self.train_per_cluster,
            self.heldout_per_cluster,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("task dimensions and sample counts must be positive".into()));
        }
        if self.layers > self.feature_dim {
            return Err(Error::Config(format!(
                "{} layers need feature_dim >= {0} for orthogonal planted directions",
                self.layers
            )));
        }
        if !(self.noise_scale >= 0.0 && self.embedding_spread >= 0.0) {
            return Err(Error::Config("noise and spread must be nonnegative".into()));
        }
        if !(self.contrast > 0.0 && self.contrast.is_finite()) {
            return Err(Error::Config("contrast must be positive".into()));
        }
        if let Some(p) = &self.profiles {
            if p.len() != self.clusters || p.iter().any(|w| w.len() != self.groups) {
                return Err(Error::Config(format!(
                    "expected {} profiles of {} weights",
                    self.clusters, self.groups
                )));
            }
        }
        make_grouping(self.layers, self.groups).map(|_| ())
    }

    /// Integer fields encoded for checkpoints; see [`TaskSpec::from_tensor`].
    pub fn to_tensor(&self) -> Tensor {
        Tensor::vector(vec![
            self.clusters as f64,
            self.groups as f64,
            self.layers as f64,
            self.patches as f64,
            self.feature_dim as f64,
            self.sentence_dim as f64,
            self.adapter_dim as f64,
            self.adapter_hidden as f64,
            self.readout_dim as f64,
            self.train_per_cluster as f64,
            self.heldout_per_cluster as f64,
            self.noise_scale,
            self.contrast,
            self.embedding_spread,
            self.min_profile_gap,
        ])
    }

    /// Restores a spec written by [`TaskSpec::to_tensor`]. Seed and explicit
    /// profiles are not part of the encoding.
    pub fn from_tensor(t: &Tensor, seed: u64) -> Result<Self> {
        if t.shape() != [15] {
            return Err(Error::format(
                crate::error::FormatErrorKind::ShapeMismatch,
                0,
                format!("task spec: expected [15], found {:?}", t.shape()),
            ));
        }
        let counts = crate::allocator::decode_counts(
            &Tensor::vector(t.data()[..11].to_vec()),
            11,
            "task spec",
        )?;
        let d = t.data();
        let spec = Self {
            clusters: counts[0],
            groups: counts[1],
            layers: counts[2],
            patches: counts[3],
            feature_dim: counts[4],
            sentence_dim: counts[5],
            adapter_dim: counts[6],
            adapter_hidden: counts[7],
            readout_dim: counts[8],
            train_per_cluster: counts[9],
            heldout_per_cluster: counts[10],
            noise_scale: d[11],
            contrast: d[12],
            embedding_spread: d[13],
            min_profile_gap: d[14],
            profiles: None,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub cluster: usize,
    pub embedding: SentenceEmbedding,
    pub summaries: GroupSummaries,
    pub target: Tensor,
}

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub spec: TaskSpec,
    pub grouping: GroupingScheme,
    pub profiles: Vec<WeightVector>,
    pub centroids: Vec<Vec<f64>>,
    /// Adapter that generated the labels.
    pub teacher: AdapterParams,
    /// Frozen `[N * D_t, R]` map from flattened adapted features to labels.
    pub readout: Tensor,
    pub train: Vec<Sample>,
    pub heldout: Vec<Sample>,
}

const STREAM_PROFILES: u64 = 1;
const STREAM_CENTROIDS: u64 = 2;
const STREAM_TEACHER: u64 = 3;
const STREAM_READOUT: u64 = 4;
const STREAM_DIRECTIONS: u64 = 5;
const STREAM_SAMPLES: u64 = 6;

fn draw_profiles(spec: &TaskSpec) -> Result<Vec<WeightVector>> {
    if let Some(p) = &spec.profiles {
        return p.iter().map(|w| WeightVector::new(w.clone())).collect();
    }
    let mut r = rng::seeded(rng::derive_seed(spec.seed, STREAM_PROFILES));
    for _ in 0..10_000 {
        let profiles: Vec<WeightVector> = (0..spec.clusters)
            .map(|_| {
                let logits: Vec<f64> = (0..spec.groups).map(|_| 1.2 * rng::gaussian(&mut r)).collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let s: f64 = e.iter().sum();
                WeightVector::new(e.iter().map(|x| x / s).collect()).expect("softmax")
            })
            .collect();
        let separated = (0..profiles.len()).all(|i| {
            (i + 1..profiles.len())
                .all(|j| profiles[i].l1_distance(profiles[j].as_slice()) >= spec.min_profile_gap)
        });
        if separated {
            return Ok(profiles);
        }
    }
    Err(Error::Config(format!(
        "could not draw {} profiles with pairwise L1 gap {}",
        spec.clusters, spec.min_profile_gap
    )))
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

fn scaled(t: &Tensor, c: f64) -> Result<Tensor> {
    Tensor::new(t.shape(), t.data().iter().map(|v| c * v).collect())
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Flattens `[N, D_t]` adapted features and applies the readout.
pub fn apply_readout(adapted: &Tensor, readout: &Tensor) -> Result<Tensor> {
    let x = adapted.data();
    if readout.rank() != 2 || readout.shape()[0] != x.len() {
        return Err(Error::dim("readout", adapted.shape(), readout.shape()));
    }
    let r = readout.shape()[1];
    let mut out = vec![0.0; r];
    for (i, xi) in x.iter().enumerate() {
        for (o, w) in out.iter_mut().zip(readout.row(i)) {
            *o += xi * w;
        }
    }
    Ok(Tensor::vector(out))
}

impl SyntheticTask {
    pub fn adapter_config(&self) -> AdapterConfig {
        AdapterConfig {
            feature_dim: self.spec.feature_dim,
            hidden: self.spec.adapter_hidden,
            out_dim: self.spec.adapter_dim,
        }
    }

    /// Label of a sample under weights `w` and the teacher adapter, before noise.
    pub fn clean_target(&self, w: &WeightVector, summaries: &GroupSummaries) -> Result<Tensor> {
        let rep = static_pipeline(summaries, w, &self.teacher)?;
        apply_readout(&rep.adapted, &self.readout)
    }

    pub fn samples_of(&self, cluster: usize, heldout: bool) -> impl Iterator<Item = &Sample> {
        let pool = if heldout { &self.heldout } else { &self.train };
        pool.iter().filter(move |s| s.cluster == cluster)
    }

    /// Largest distance of any embedding from its cluster centroid.
    pub fn max_spread(&self) -> f64 {
        self.train
            .iter()
            .chain(&self.heldout)
            .map(|s| l2(s.embedding.as_slice(), &self.centroids[s.cluster]))
            .fold(0.0, f64::max)
    }

    pub fn min_centroid_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.centroids.len() {
            for j in i + 1..self.centroids.len() {
                best = best.min(l2(&self.centroids[i], &self.centroids[j]));
            }
        }
        best
    }
}

pub fn gen_task(spec: &TaskSpec) -> Result<SyntheticTask> {
    spec.validate()?;
    let grouping = make_grouping(spec.layers, spec.groups)?;
    let profiles = draw_profiles(spec)?;

    let mut r = rng::seeded(rng::derive_seed(spec.seed, STREAM_CENTROIDS));
    let centroids: Vec<Vec<f64>> = (0..spec.clusters)
        .map(|_| rng::gaussian_vec(&mut r, spec.sentence_dim))
        .collect();

    let adapter_cfg = AdapterConfig {
        feature_dim: spec.feature_dim,
        hidden: spec.adapter_hidden,
        out_dim: spec.adapter_dim,
    };
    let teacher = AdapterParams::init(&adapter_cfg, rng::derive_seed(spec.seed, STREAM_TEACHER))?;

    let flat = spec.patches * spec.adapter_dim;
    let mut r = rng::seeded(rng::derive_seed(spec.seed, STREAM_READOUT));
    let readout = rng::gaussian_tensor(&mut r, &[flat, spec.readout_dim]);
    let readout = scaled(&readout, 1.0 / (flat as f64).sqrt())?;

    let mut task = SyntheticTask {
        spec: spec.clone(),
        grouping,
        profiles,
        centroids,
        teacher,
        readout,
        train: Vec::new(),
        heldout: Vec::new(),
    };

    let direction_seed = rng::derive_seed(spec.seed, STREAM_DIRECTIONS);
    let mut r = rng::seeded(rng::derive_seed(spec.seed, STREAM_SAMPLES));
    let uniform = WeightVector::uniform(spec.groups);
    let mut id = 0u64;
    // (heldout, sample, clean label) before the readout is rescaled.
    let mut drafts = Vec::new();
    let mut contrast_sum = 0.0;
    for heldout in [false, true] {
        let per_cluster = if heldout { spec.heldout_per_cluster } else { spec.train_per_cluster };
        for _ in 0..per_cluster {
            for cluster in 0..spec.clusters {
                let e: Vec<f64> = task.centroids[cluster]
                    .iter()
                    .map(|c| c + spec.embedding_spread * rng::gaussian(&mut r))
                    .collect();
                let features = synth_features(&SynthSpec {
                    seed: rng::derive_seed(spec.seed ^ 0x5EED, id),
                    direction_seed,
                    ..SynthSpec::new(spec.layers, spec.patches, spec.feature_dim, 0)
                })?;
                id += 1;
                let summaries = GroupSummaries::new(&features, &task.grouping)?;
                let clean = task.clean_target(&task.profiles[cluster], &summaries)?;
                if !heldout {
                    let flat = task.clean_target(&uniform, &summaries)?;
                    contrast_sum += mse(clean.data(), flat.data());
                }
                let sample = Sample {
                    cluster,
                    embedding: SentenceEmbedding::new(e)?,
                    summaries,
                    target: clean,
                };
                drafts.push((heldout, sample));
            }
        }
    }

    let base_contrast = contrast_sum / (spec.train_per_cluster * spec.clusters) as f64;
    let gain = if base_contrast > 0.0 {
        (spec.contrast / base_contrast).sqrt()
    } else {
        1.0
    };
    task.readout = scaled(&task.readout, gain)?;
    for (heldout, mut sample) in drafts {
        let noisy = sample
            .target
            .data()
            .iter()
            .map(|v| gain * v + spec.noise_scale * rng::gaussian(&mut r))
            .collect();
        sample.target = Tensor::vector(noisy);
        if heldout {
            task.heldout.push(sample);
        } else {
            task.train.push(sample);
        }
    }

    if task.min_centroid_distance() <= 4.0 * task.max_spread() {
        return Err(Error::Config(format!(
            "cluster centroids {:.3} apart but spread {:.3}; lower embedding_spread",
            task.min_centroid_distance(),
            task.max_spread()
        )));
    }
    Ok(task)
}
