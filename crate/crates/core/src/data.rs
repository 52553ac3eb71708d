//! Identity datasets: synthetic domain-shift generator and the embedding CSV
//! format (`id,camera,split,f0..f{D-1}`).

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{l2_normalize, l2_normalize_rows, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Source,
    TargetTrain,
    TargetQuery,
    TargetGallery,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Source => "source",
            Split::TargetTrain => "target_train",
            Split::TargetQuery => "target_query",
            Split::TargetGallery => "target_gallery",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "source" => Ok(Split::Source),
            "target_train" => Ok(Split::TargetTrain),
            "target_query" => Ok(Split::TargetQuery),
            "target_gallery" => Ok(Split::TargetGallery),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// Rows of inputs with identity, camera and split per row.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityDataset {
    pub inputs: Matrix,
    pub ids: Vec<usize>,
    pub cameras: Vec<usize>,
    pub splits: Vec<Split>,
}

impl IdentityDataset {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn subset(&self, split: Split) -> IdentityDataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.splits[i] == split).collect();
        self.select(&idx)
    }

    pub fn select(&self, idx: &[usize]) -> IdentityDataset {
        IdentityDataset {
            inputs: self.inputs.select_rows(idx),
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
            cameras: idx.iter().map(|&i| self.cameras[i]).collect(),
            splits: idx.iter().map(|&i| self.splits[i]).collect(),
        }
    }

    pub fn concat(&self, other: &IdentityDataset) -> Result<IdentityDataset> {
        if self.dim() != other.dim() && !self.is_empty() && !other.is_empty() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        let rows: Vec<&[f64]> = self.inputs.iter_rows().chain(other.inputs.iter_rows()).collect();
        Ok(IdentityDataset {
            inputs: Matrix::from_rows(&rows)?,
            ids: self.ids.iter().chain(&other.ids).cloned().collect(),
            cameras: self.cameras.iter().chain(&other.cameras).cloned().collect(),
            splits: self.splits.iter().chain(&other.splits).cloned().collect(),
        })
    }

    /// Identity labels remapped to `0..n_ids` in order of first appearance.
    pub fn dense_ids(&self) -> (Vec<usize>, usize) {
        let mut map = std::collections::HashMap::new();
        let dense = self
            .ids
            .iter()
            .map(|id| {
                let next = map.len();
                *map.entry(*id).or_insert(next)
            })
            .collect();
        (dense, map.len())
    }
}

/// Synthetic benchmark parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    /// Identities per domain.
    pub n_identities: usize,
    /// Training samples per identity.
    pub samples_per_identity: usize,
    /// Extra target samples per identity for query/gallery; the first
    /// `query_per_identity` of them are queries.
    pub eval_per_identity: usize,
    pub query_per_identity: usize,
    pub input_dim: usize,
    /// Norm of the per-sample Gaussian perturbation (in expectation).
    pub cluster_std: f64,
    pub n_cameras: usize,
    pub camera_shift_strength: f64,
    pub domain_shift_strength: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_identities: 20,
            samples_per_identity: 30,
            eval_per_identity: 20,
            query_per_identity: 4,
            input_dim: 32,
            cluster_std: 0.6,
            n_cameras: 3,
            camera_shift_strength: 0.5,
            domain_shift_strength: 1.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_identities == 0 || self.samples_per_identity == 0 || self.input_dim == 0 || self.n_cameras == 0 {
            return Err(Error::InvalidConfig("synthetic counts must be positive".into()));
        }
        if self.query_per_identity > self.eval_per_identity {
            return Err(Error::InvalidConfig("query_per_identity > eval_per_identity".into()));
        }
        if self.cluster_std < 0.0 || self.camera_shift_strength < 0.0 || self.domain_shift_strength < 0.0 {
            return Err(Error::InvalidConfig("strengths must be >= 0".into()));
        }
        Ok(())
    }
}

/// `x -> A x + b` with `A = I + s G / sqrt(d)` and `|b| ~ s`.
#[derive(Debug, Clone)]
struct Affine {
    a: Matrix,
    b: Vec<f64>,
}

impl Affine {
    fn random(dim: usize, strength: f64, rng: &mut impl Rng) -> Self {
        let scale = strength / (dim as f64).sqrt();
        let mut a = Matrix::identity(dim);
        for v in a.as_mut_slice() {
            *v += scale * rng.sample::<f64, _>(StandardNormal);
        }
        let b = (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
        Self { a, b }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.b.len())
            .map(|r| crate::numerics::dot(self.a.row(r), x) + self.b[r])
            .collect()
    }
}

fn gaussian_vec(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Source and target datasets. Identities are Gaussian blobs around random
/// unit vectors; every sample passes through the affine map of its camera
/// (each domain has its own cameras), and target samples additionally
/// through a global domain-shift map. Rows are
/// L2-normalized. Target identity ids start at `n_identities`.
pub fn synth_generate(spec: &SynthSpec) -> Result<(IdentityDataset, IdentityDataset)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dim = spec.input_dim;
    let n = spec.n_identities;
    let mut means = Vec::with_capacity(2 * n);
    for _ in 0..2 * n {
        let mut v = gaussian_vec(dim, &mut rng);
        while crate::numerics::norm(&v) < 1e-6 {
            v = gaussian_vec(dim, &mut rng);
        }
        means.push(l2_normalize(&v)?);
    }
    // each domain has its own camera network, as two datasets would
    let camera_maps: Vec<Vec<Affine>> = (0..2)
        .map(|_| {
            (0..spec.n_cameras)
                .map(|_| Affine::random(dim, spec.camera_shift_strength, &mut rng))
                .collect()
        })
        .collect();
    let domain = Affine::random(dim, spec.domain_shift_strength, &mut rng);
    let noise_scale = spec.cluster_std / (dim as f64).sqrt();

    let sample = |mean: &[f64], cam: &Affine, shift: Option<&Affine>, rng: &mut ChaCha8Rng| {
        let x: Vec<f64> = mean
            .iter()
            .map(|m| m + noise_scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let x = cam.apply(&x);
        match shift {
            Some(d) => d.apply(&x),
            None => x,
        }
    };

    let build =
        |domain_ids: std::ops::Range<usize>, is_target: bool, rng: &mut ChaCha8Rng| -> Result<IdentityDataset> {
            let mut rows = Vec::new();
            let mut ids = Vec::new();
            let mut cams = Vec::new();
            let mut splits = Vec::new();
            let shift = is_target.then_some(&domain);
            for id in domain_ids {
                let extra = if is_target { spec.eval_per_identity } else { 0 };
                for j in 0..spec.samples_per_identity + extra {
                    let cam = rng.random_range(0..spec.n_cameras);
                    rows.push(sample(
                        &means[id],
                        &camera_maps[usize::from(is_target)][cam],
                        shift,
                        rng,
                    ));
                    ids.push(id);
                    cams.push(cam);
                    splits.push(if !is_target {
                        Split::Source
                    } else if j < spec.samples_per_identity {
                        Split::TargetTrain
                    } else if j - spec.samples_per_identity < spec.query_per_identity {
                        Split::TargetQuery
                    } else {
                        Split::TargetGallery
                    });
                }
            }
            let inputs = l2_normalize_rows(&Matrix::from_rows(&rows)?)?;
            Ok(IdentityDataset {
                inputs,
                ids,
                cameras: cams,
                splits,
            })
        };

    let source = build(0..n, false, &mut rng)?;
    let target = build(n..2 * n, true, &mut rng)?;
    Ok((source, target))
}

/// Serializes to the embedding CSV format.
pub fn export_embeddings(ds: &IdentityDataset) -> String {
    let mut out = String::from("id,camera,split");
    for d in 0..ds.dim() {
        out.push_str(&format!(",f{d}"));
    }
    out.push('\n');
    for i in 0..ds.len() {
        out.push_str(&format!("{},{},{}", ds.ids[i], ds.cameras[i], ds.splits[i]));
        for v in ds.inputs.row(i) {
            out.push_str(&format!(",{v:?}"));
        }
        out.push('\n');
    }
    out
}

pub fn write_embeddings(ds: &IdentityDataset, path: &Path) -> Result<()> {
    std::fs::write(path, export_embeddings(ds))?;
    Ok(())
}

/// Parses the embedding CSV format; features are L2-normalized on load.
pub fn parse_embeddings(text: &str) -> Result<IdentityDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| Error::ParseError {
            line: 1,
            msg: e.to_string(),
        })?
        .clone();
    if header.len() < 4 || &header[0] != "id" || &header[1] != "camera" || &header[2] != "split" {
        return Err(Error::ParseError {
            line: 1,
            msg: "header must be id,camera,split,f0..".into(),
        });
    }
    for (d, name) in header.iter().skip(3).enumerate() {
        if name != format!("f{d}") {
            return Err(Error::ParseError {
                line: 1,
                msg: format!("expected column f{d}, found {name:?}"),
            });
        }
    }
    let dim = header.len() - 3;
    let mut rows = Vec::new();
    let (mut ids, mut cams, mut splits) = (Vec::new(), Vec::new(), Vec::new());
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::ParseError {
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let err = |msg: String| Error::ParseError { line, msg };
        if rec.len() != header.len() {
            return Err(err(format!("expected {} columns, got {}", header.len(), rec.len())));
        }
        ids.push(rec[0].parse::<usize>().map_err(|e| err(format!("id: {e}")))?);
        cams.push(rec[1].parse::<usize>().map_err(|e| err(format!("camera: {e}")))?);
        splits.push(rec[2].parse::<Split>().map_err(err)?);
        let feat = rec
            .iter()
            .skip(3)
            .map(|t| t.parse::<f64>().map_err(|e| err(format!("{t:?}: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(l2_normalize(&feat).map_err(|_| err("zero feature vector".into()))?);
    }
    let inputs = if rows.is_empty() {
        Matrix::zeros(0, dim)
    } else {
        Matrix::from_rows(&rows)?
    };
    Ok(IdentityDataset {
        inputs,
        ids,
        cameras: cams,
        splits,
    })
}

pub fn ingest_embeddings(path: &Path) -> Result<IdentityDataset> {
    parse_embeddings(&std::fs::read_to_string(path)?)
}

/// Like [`ingest_embeddings`], rejecting files whose dimension differs.
pub fn ingest_embeddings_with_dim(path: &Path, expected: usize) -> Result<IdentityDataset> {
    let ds = ingest_embeddings(path)?;
    if ds.dim() != expected {
        return Err(Error::DimMismatch {
            expected,
            got: ds.dim(),
        });
    }
    Ok(ds)
}
