//! Synthetic non-IID client shards.
//!
//! Every class is an isotropic unit-variance Gaussian around `scale·e_c`.
//! Each client draws its class proportions from a symmetric Dirichlet, then
//! draws its own samples from the mixture with those proportions, so no
//! sample is shared between clients. Features are stored at 32-bit
//! precision so a shard dump reloads bit-identically.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::{Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamVector;
use crate::rng::{stream, tag};
use crate::trainer::Objective;

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes { num_classes: usize, labels: Vec<u32> },
    Values(Vec<f64>),
}

/// Row-major feature matrix with one target per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    dim: usize,
    features: Vec<f64>,
    targets: Targets,
}

impl Samples {
    pub fn new(dim: usize, features: Vec<f64>, targets: Targets) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("feature dimension must be positive".into()));
        }
        let n = match &targets {
            Targets::Classes { num_classes, labels } => {
                if let Some(bad) = labels.iter().find(|l| **l as usize >= *num_classes) {
                    return Err(Error::Config(format!("label {bad} out of range for {num_classes} classes")));
                }
                labels.len()
            }
            Targets::Values(v) => v.len(),
        };
        if features.len() != n * dim {
            return Err(Error::Config(format!("{} features for {n} rows of dimension {dim}", features.len())));
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("sample features".into()));
        }
        Ok(Self { dim, features, targets })
    }

    pub fn len(&self) -> usize {
        self.features.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn num_classes(&self) -> Option<usize> {
        match &self.targets {
            Targets::Classes { num_classes, .. } => Some(*num_classes),
            Targets::Values(_) => None,
        }
    }

    pub fn label(&self, i: usize) -> Option<u32> {
        match &self.targets {
            Targets::Classes { labels, .. } => Some(labels[i]),
            Targets::Values(_) => None,
        }
    }

    pub fn value(&self, i: usize) -> Option<f64> {
        match &self.targets {
            Targets::Values(v) => Some(v[i]),
            Targets::Classes { .. } => None,
        }
    }

    /// Per-class counts; empty for regression targets.
    pub fn class_histogram(&self) -> Vec<usize> {
        match &self.targets {
            Targets::Classes { num_classes, labels } => {
                let mut h = vec![0; *num_classes];
                for l in labels {
                    h[*l as usize] += 1;
                }
                h
            }
            Targets::Values(_) => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub client: u32,
    pub train: Samples,
    pub test: Samples,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub clients: usize,
    pub classes: usize,
    pub dim: usize,
    /// Train plus test samples per client.
    pub samples_per_client: usize,
    pub test_fraction: f64,
    /// Dirichlet concentration.
    pub alpha: f64,
    /// Distance of each class mean from the origin along its own axis.
    pub class_scale: f64,
    pub seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            clients: 20,
            classes: 10,
            dim: 32,
            samples_per_client: 250,
            test_fraction: 0.2,
            alpha: 0.1,
            class_scale: 0.5,
            seed: 0,
        }
    }
}

impl DataSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.clients == 0 {
            return fail("at least one client is required".into());
        }
        if self.classes < 2 {
            return fail(format!("{} classes; need at least 2", self.classes));
        }
        if self.dim < self.classes {
            return fail(format!("dimension {} cannot hold {} simplex means", self.dim, self.classes));
        }
        if self.samples_per_client < 2 {
            return fail("each client needs at least one train and one test sample".into());
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return fail(format!("Dirichlet concentration {} must be positive", self.alpha));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return fail(format!("test fraction {} must lie in (0, 1)", self.test_fraction));
        }
        if !(self.class_scale.is_finite() && self.class_scale > 0.0) {
            return fail(format!("class scale {} must be positive", self.class_scale));
        }
        Ok(())
    }

    pub fn test_count(&self) -> usize {
        let n = self.samples_per_client;
        ((n as f64 * self.test_fraction).round() as usize).clamp(1, n - 1)
    }
}

/// Draws from a symmetric Dirichlet in log space so that tiny
/// concentrations do not underflow every component to zero.
pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: f64, k: usize, rng: &mut R) -> Result<Vec<f64>> {
    // Gamma(a) = Gamma(a + 1) · U^(1/a), which keeps the log finite for a < 1.
    let gamma = Gamma::new(alpha + 1.0, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    let logs: Vec<f64> = (0..k)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            g.ln() + u.ln() / alpha
        })
        .collect();
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}

pub fn generate(spec: &DataSpec) -> Result<Vec<ClientShard>> {
    spec.validate()?;
    let n = spec.samples_per_client;
    let n_test = spec.test_count();
    (0..spec.clients)
        .map(|client| {
            let mut rng = stream(spec.seed, &[tag::DATA, client as u64]);
            let proportions = sample_dirichlet(spec.alpha, spec.classes, &mut rng)?;
            let pick = WeightedIndex::new(&proportions).map_err(|e| Error::Config(e.to_string()))?;
            let mut features = Vec::with_capacity(n * spec.dim);
            let mut labels = Vec::with_capacity(n);
            for _ in 0..n {
                let c = pick.sample(&mut rng);
                labels.push(c as u32);
                for j in 0..spec.dim {
                    let mean = if j == c { spec.class_scale } else { 0.0 };
                    let noise: f64 = rng.sample(StandardNormal);
                    features.push(f64::from((mean + noise) as f32));
                }
            }
            let split = (n - n_test) * spec.dim;
            let test_features = features.split_off(split);
            let test_labels = labels.split_off(n - n_test);
            Ok(ClientShard {
                client: client as u32,
                train: Samples::new(
                    spec.dim,
                    features,
                    Targets::Classes { num_classes: spec.classes, labels },
                )?,
                test: Samples::new(
                    spec.dim,
                    test_features,
                    Targets::Classes { num_classes: spec.classes, labels: test_labels },
                )?,
            })
        })
        .collect()
}

/// Shannon entropy in nats of a histogram.
pub fn entropy(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|c| **c > 0)
        .map(|c| {
            let p = *c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

/// Mean loss and top-1 accuracy of `model` on the shard's test set.
pub fn local_eval(objective: &dyn Objective, model: &ParamVector, shard: &ClientShard) -> Result<(f64, f64)> {
    evaluate(objective, model, &shard.test)
}

pub fn evaluate(objective: &dyn Objective, model: &ParamVector, samples: &Samples) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let rows: Vec<usize> = (0..samples.len()).collect();
    let loss = objective.loss_grad(model.values(), samples, &rows, None)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("evaluation loss".into()));
    }
    let mut correct = 0usize;
    for i in rows {
        correct += usize::from(objective.is_correct(model.values(), samples, i)?);
    }
    Ok((loss, correct as f64 / samples.len() as f64))
}

const SHARD_MAGIC: [u8; 4] = *b"PCSD";
const SHARD_VERSION: u32 = 1;
const TARGET_CLASSES: u8 = 0;
const TARGET_VALUES: u8 = 1;

/// Writes shards as a little-endian binary file: a versioned header, then
/// per client its id and the train and test sets, each as row count,
/// dimension, target kind, row-major `f32` features and targets.
pub fn dump_shards(path: &Path, shards: &[ClientShard]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&SHARD_MAGIC)?;
    out.write_u32::<LittleEndian>(SHARD_VERSION)?;
    out.write_u32::<LittleEndian>(shards.len() as u32)?;
    for shard in shards {
        out.write_u32::<LittleEndian>(shard.client)?;
        write_samples(&mut out, &shard.train)?;
        write_samples(&mut out, &shard.test)?;
    }
    out.flush()?;
    Ok(())
}

fn write_samples<W: Write>(out: &mut W, s: &Samples) -> Result<()> {
    out.write_u32::<LittleEndian>(s.len() as u32)?;
    out.write_u32::<LittleEndian>(s.dim as u32)?;
    for x in &s.features {
        out.write_f32::<LittleEndian>(*x as f32)?;
    }
    match &s.targets {
        Targets::Classes { num_classes, labels } => {
            out.write_u8(TARGET_CLASSES)?;
            out.write_u32::<LittleEndian>(*num_classes as u32)?;
            for l in labels {
                out.write_u32::<LittleEndian>(*l)?;
            }
        }
        Targets::Values(v) => {
            out.write_u8(TARGET_VALUES)?;
            for y in v {
                out.write_f32::<LittleEndian>(*y as f32)?;
            }
        }
    }
    Ok(())
}

pub fn load_shards(path: &Path) -> Result<Vec<ClientShard>> {
    let mut input = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if magic != SHARD_MAGIC {
        return Err(Error::CorruptPayload("not a shard file".into()));
    }
    let version = input.read_u32::<LittleEndian>()?;
    if version != SHARD_VERSION {
        return Err(Error::CorruptPayload(format!("unsupported shard file version {version}")));
    }
    let count = input.read_u32::<LittleEndian>()?;
    let mut shards = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let client = input.read_u32::<LittleEndian>()?;
        let train = read_samples(&mut input)?;
        let test = read_samples(&mut input)?;
        shards.push(ClientShard { client, train, test });
    }
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::CorruptPayload("trailing bytes in shard file".into()));
    }
    Ok(shards)
}

fn read_samples<R: Read>(input: &mut R) -> Result<Samples> {
    let n = input.read_u32::<LittleEndian>()? as usize;
    let dim = input.read_u32::<LittleEndian>()? as usize;
    let mut features = Vec::with_capacity(n * dim);
    for _ in 0..n * dim {
        features.push(f64::from(input.read_f32::<LittleEndian>()?));
    }
    let targets = match input.read_u8()? {
        TARGET_CLASSES => {
            let num_classes = input.read_u32::<LittleEndian>()? as usize;
            let labels = (0..n).map(|_| input.read_u32::<LittleEndian>()).collect::<std::io::Result<_>>()?;
            Targets::Classes { num_classes, labels }
        }
        TARGET_VALUES => Targets::Values(
            (0..n)
                .map(|_| input.read_f32::<LittleEndian>().map(f64::from))
                .collect::<std::io::Result<_>>()?,
        ),
        other => return Err(Error::CorruptPayload(format!("unknown target kind {other}"))),
    };
    Samples::new(dim, features, targets).map_err(|e| Error::CorruptPayload(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DataSpec {
        DataSpec { clients: 20, samples_per_client: 250, ..DataSpec::default() }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec();
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = generate(&DataSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(generate(&spec).unwrap(), other);
    }

    #[test]
    fn split_sizes_and_labels() {
        let spec = small_spec();
        for shard in generate(&spec).unwrap() {
            assert_eq!(shard.train.len(), 200);
            assert_eq!(shard.test.len(), 50);
            assert_eq!(shard.train.class_histogram().iter().sum::<usize>(), 200);
        }
    }

    #[test]
    fn huge_concentration_is_near_uniform() {
        let spec = DataSpec { alpha: 1e6, samples_per_client: 20_000, clients: 2, ..DataSpec::default() };
        for shard in generate(&spec).unwrap() {
            let mut h = shard.train.class_histogram();
            for (c, n) in shard.test.class_histogram().into_iter().enumerate() {
                h[c] += n;
            }
            for n in h {
                let p = n as f64 / 20_000.0;
                assert!((p - 0.1).abs() <= 0.005, "class share {p}");
            }
        }
    }

    #[test]
    fn smaller_concentration_lowers_entropy() {
        let mean_entropy = |alpha: f64| {
            let shards = generate(&DataSpec { alpha, ..small_spec() }).unwrap();
            shards.iter().map(|s| entropy(&s.train.class_histogram())).sum::<f64>() / shards.len() as f64
        };
        assert!(mean_entropy(0.1) < mean_entropy(1.0));
    }

    #[test]
    fn tiny_concentration_does_not_underflow() {
        let mut rng = stream(3, &[0]);
        for _ in 0..100 {
            let p = sample_dirichlet(1e-3, 10, &mut rng).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|x| x.is_finite() && *x >= 0.0));
        }
    }

    #[test]
    fn infeasible_specs_are_rejected() {
        for bad in [
            DataSpec { alpha: 0.0, ..DataSpec::default() },
            DataSpec { test_fraction: 1.0, ..DataSpec::default() },
            DataSpec { samples_per_client: 1, ..DataSpec::default() },
            DataSpec { dim: 4, ..DataSpec::default() },
            DataSpec { clients: 0, ..DataSpec::default() },
        ] {
            assert!(matches!(generate(&bad), Err(Error::Config(_))));
        }
    }

    #[test]
    fn shard_file_roundtrip() {
        let shards = generate(&DataSpec { clients: 3, ..DataSpec::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("shards.bin");
        dump_shards(&path, &shards).unwrap();
        assert_eq!(load_shards(&path).unwrap(), shards);

        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_shards(&path).is_err());
    }

    #[test]
    fn regression_targets_roundtrip() {
        let s = Samples::new(2, vec![1.0, 2.0, 3.0, 4.0], Targets::Values(vec![0.5, -1.0])).unwrap();
        let shard = ClientShard { client: 7, train: s.clone(), test: s };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("reg.bin");
        dump_shards(&path, std::slice::from_ref(&shard)).unwrap();
        assert_eq!(load_shards(&path).unwrap(), vec![shard]);
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&[5, 0, 0]), 0.0);
        assert!((entropy(&[1, 1]) - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
