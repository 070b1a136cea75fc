//! Synthetic federated classification data.
//!
//! Each class is a Gaussian blob in feature space; clients differ from the
//! global distribution in three controllable ways: sample counts follow a
//! log-normal (quantity skew), per-client class proportions follow a
//! Dirichlet (label skew), and every client's features are displaced by a
//! fixed per-client offset (feature skew, the synthetic "accent"). The
//! held-out test set is drawn from the unshifted global distribution with
//! balanced classes.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_distr::{Distribution, Gamma, LogNormal, StandardNormal};
use rand_distr::weighted::WeightedIndex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// All knobs of the generator. Serialized into every dataset manifest so a
/// dataset directory is reproducible from its artifacts alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub num_clients: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Symmetric Dirichlet concentration for per-client class proportions.
    pub dirichlet_alpha: f64,
    /// Log-normal sigma for per-client sample counts.
    pub quantity_sigma: f64,
    /// Norm of the per-client feature offset.
    pub feature_shift_scale: f64,
    /// Scale of `count ~ round(samples_mean * LogNormal(0, sigma))`.
    pub samples_mean: f64,
    pub test_size: usize,
    /// Norm of each class mean; controls how separable the task is.
    pub class_separation: f64,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            num_clients: 200,
            num_classes: 12,
            feature_dim: 40,
            dirichlet_alpha: 0.3,
            quantity_sigma: 0.8,
            feature_shift_scale: 1.0,
            samples_mean: 45.0,
            test_size: 1200,
            class_separation: 4.0,
            seed: 0,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::config("num_clients must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        if self.feature_dim == 0 {
            return Err(Error::config("feature_dim must be positive"));
        }
        if self.test_size < self.num_classes {
            return Err(Error::config(
                "test_size must be at least num_classes so every class appears",
            ));
        }
        if !(self.dirichlet_alpha > 0.0) {
            return Err(Error::config("dirichlet_alpha must be positive"));
        }
        if self.quantity_sigma < 0.0 {
            return Err(Error::config("quantity_sigma must be nonnegative"));
        }
        if self.feature_shift_scale < 0.0 {
            return Err(Error::config("feature_shift_scale must be nonnegative"));
        }
        if !(self.samples_mean >= 1.0) {
            return Err(Error::config("samples_mean must be at least 1"));
        }
        if self.class_separation < 0.0 {
            return Err(Error::config("class_separation must be nonnegative"));
        }
        Ok(())
    }
}

/// One client's training data.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub class_counts: Vec<usize>,
}

impl ClientDataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::data("feature rows and label count differ"));
        }
        if labels.is_empty() {
            return Err(Error::data("client dataset must contain at least one sample"));
        }
        let mut class_counts = vec![0usize; num_classes];
        for &y in &labels {
            if y >= num_classes {
                return Err(Error::data(format!(
                    "label {y} out of range for {num_classes} classes"
                )));
            }
            class_counts[y] += 1;
        }
        Ok(ClientDataset {
            features,
            labels,
            class_counts,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_counts.len()
    }
}

/// A complete federation: client shards plus a global test set.
#[derive(Debug, Clone, PartialEq)]
pub struct FederationData {
    pub clients: Vec<ClientDataset>,
    pub global_test: ClientDataset,
    pub spec: GeneratorSpec,
}

impl FederationData {
    pub fn total_samples(&self) -> usize {
        self.clients.iter().map(ClientDataset::len).sum::<usize>() + self.global_test.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }
}

/// Per-client statistics: sample count, class distribution, and normalized
/// class entropy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClientStats {
    pub samples: usize,
    pub proportions: Vec<f64>,
    pub entropy: f64,
}

/// `(-sum q ln q) / ln C` with `0 ln 0 := 0`; in `[0, 1]`.
pub fn normalized_entropy(class_counts: &[usize]) -> f64 {
    let n: usize = class_counts.iter().sum();
    let c = class_counts.len();
    if n == 0 || c < 2 {
        return 0.0;
    }
    let mut h = 0.0;
    for &count in class_counts {
        if count > 0 {
            let q = count as f64 / n as f64;
            h -= q * q.ln();
        }
    }
    h / (c as f64).ln()
}

/// Statistics for every client, in client order.
pub fn client_stats(data: &FederationData) -> Vec<ClientStats> {
    data.clients
        .iter()
        .map(|client| {
            let n = client.len();
            ClientStats {
                samples: n,
                proportions: client
                    .class_counts
                    .iter()
                    .map(|&count| count as f64 / n as f64)
                    .collect(),
                entropy: normalized_entropy(&client.class_counts),
            }
        })
        .collect()
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn dirichlet_proportions(rng: &mut ChaCha8Rng, alpha: f64, classes: usize) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| Error::config(format!("invalid dirichlet alpha: {e}")))?;
    let draws: Vec<f64> = (0..classes).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if !sum.is_finite() {
        return Err(Error::config("dirichlet draw produced non-finite values"));
    }
    if sum <= 0.0 {
        // All gamma draws underflowed; fall back to a uniform split.
        return Ok(vec![1.0 / classes as f64; classes]);
    }
    Ok(draws.into_iter().map(|g| g / sum).collect())
}

fn sample_counts(
    rng: &mut ChaCha8Rng,
    proportions: &[f64],
    total: usize,
) -> Result<Vec<usize>> {
    let index = WeightedIndex::new(proportions)
        .map_err(|e| Error::config(format!("invalid class proportions: {e}")))?;
    let mut counts = vec![0usize; proportions.len()];
    for _ in 0..total {
        counts[index.sample(rng)] += 1;
    }
    Ok(counts)
}

/// Rows for `counts[c]` samples of each class: `mean_c + N(0, I) + offset`.
fn gaussian_block(
    rng: &mut ChaCha8Rng,
    means: &[Vec<f64>],
    counts: &[usize],
    offset: Option<&[f64]>,
    dim: usize,
) -> (Array2<f64>, Vec<usize>) {
    let total: usize = counts.iter().sum();
    let mut features = Array2::zeros((total, dim));
    let mut labels = Vec::with_capacity(total);
    let mut row = 0;
    for (class, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            for j in 0..dim {
                let noise: f64 = StandardNormal.sample(rng);
                let shift = offset.map_or(0.0, |o| o[j]);
                features[[row, j]] = means[class][j] + noise + shift;
            }
            labels.push(class);
            row += 1;
        }
    }
    (features, labels)
}

/// Generate a federation from the spec. Fully deterministic in `spec.seed`.
pub fn generate_federation(spec: &GeneratorSpec) -> Result<FederationData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let c = spec.num_classes;
    let d = spec.feature_dim;

    let means: Vec<Vec<f64>> = (0..c)
        .map(|_| {
            unit_vector(&mut rng, d)
                .into_iter()
                .map(|x| x * spec.class_separation)
                .collect()
        })
        .collect();

    // Balanced test counts; remainder spread over the lowest class indices.
    let mut test_counts = vec![spec.test_size / c; c];
    for counts in test_counts.iter_mut().take(spec.test_size % c) {
        *counts += 1;
    }
    let (test_features, test_labels) = gaussian_block(&mut rng, &means, &test_counts, None, d);
    let global_test = ClientDataset::new(test_features, test_labels, c)?;

    let lognormal = LogNormal::new(0.0, spec.quantity_sigma)
        .map_err(|e| Error::config(format!("invalid quantity_sigma: {e}")))?;

    let mut clients = Vec::with_capacity(spec.num_clients);
    for _ in 0..spec.num_clients {
        // Offset direction is drawn even at scale zero so that changing the
        // scale never perturbs the rest of the stream (labels included).
        let direction = unit_vector(&mut rng, d);
        let offset: Vec<f64> = direction
            .into_iter()
            .map(|x| x * spec.feature_shift_scale)
            .collect();

        let factor = if spec.quantity_sigma > 0.0 {
            lognormal.sample(&mut rng)
        } else {
            1.0
        };
        let samples = (spec.samples_mean * factor).round().max(1.0) as usize;

        let proportions = dirichlet_proportions(&mut rng, spec.dirichlet_alpha, c)?;
        let counts = sample_counts(&mut rng, &proportions, samples)?;
        let (features, labels) = gaussian_block(&mut rng, &means, &counts, Some(&offset), d);
        clients.push(ClientDataset::new(features, labels, c)?);
    }

    Ok(FederationData {
        clients,
        global_test,
        spec: spec.clone(),
    })
}

// ---------------------------------------------------------------------------
// Directory export / import
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ManifestClient {
    file: String,
    samples: usize,
    class_counts: Vec<usize>,
    entropy: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    generator_spec: GeneratorSpec,
    total_samples: usize,
    clients: Vec<ManifestClient>,
    test: ManifestClient,
}

const MANIFEST_VERSION: u32 = 1;

fn write_dataset_csv(path: &Path, data: &ClientDataset) -> Result<()> {
    let mut out = String::new();
    let d = data.features.ncols();
    for j in 0..d {
        out.push_str(&format!("f{j},"));
    }
    out.push_str("label\n");
    for (row, &label) in data.features.rows().into_iter().zip(&data.labels) {
        for v in row {
            out.push_str(&format!("{v},"));
        }
        out.push_str(&format!("{label}\n"));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn read_dataset_csv(path: &Path, dim: usize, num_classes: usize) -> Result<ClientDataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::data(format!("{}: empty file", path.display())))?
        .map_err(|e| Error::io(path, e))?;
    let expected_header: String = (0..dim)
        .map(|j| format!("f{j},"))
        .chain(std::iter::once("label".to_string()))
        .collect();
    if header != expected_header {
        return Err(Error::data(format!(
            "{}: unexpected header for {} features",
            path.display(),
            dim
        )));
    }
    let mut rows: Vec<f64> = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 1 {
            return Err(Error::data(format!(
                "{}:{}: expected {} fields, found {}",
                path.display(),
                lineno + 2,
                dim + 1,
                fields.len()
            )));
        }
        for field in &fields[..dim] {
            let v: f64 = field.parse().map_err(|_| {
                Error::data(format!("{}:{}: bad feature value", path.display(), lineno + 2))
            })?;
            rows.push(v);
        }
        let label: usize = fields[dim].parse().map_err(|_| {
            Error::data(format!("{}:{}: bad label", path.display(), lineno + 2))
        })?;
        labels.push(label);
    }
    let features = Array2::from_shape_vec((labels.len(), dim), rows)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    ClientDataset::new(features, labels, num_classes)
}

/// Write a federation as a directory: one CSV per client, a test CSV, and a
/// JSON manifest carrying the generator spec and per-client statistics.
pub fn export_federation(data: &FederationData, dir: &Path) -> Result<()> {
    let clients_dir = dir.join("clients");
    fs::create_dir_all(&clients_dir).map_err(|e| Error::io(&clients_dir, e))?;

    let mut manifest_clients = Vec::with_capacity(data.clients.len());
    for (k, client) in data.clients.iter().enumerate() {
        let rel = format!("clients/client_{k:04}.csv");
        write_dataset_csv(&dir.join(&rel), client)?;
        manifest_clients.push(ManifestClient {
            file: rel,
            samples: client.len(),
            class_counts: client.class_counts.clone(),
            entropy: normalized_entropy(&client.class_counts),
        });
    }
    write_dataset_csv(&dir.join("test.csv"), &data.global_test)?;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        generator_spec: data.spec.clone(),
        total_samples: data.total_samples(),
        clients: manifest_clients,
        test: ManifestClient {
            file: "test.csv".to_string(),
            samples: data.global_test.len(),
            class_counts: data.global_test.class_counts.clone(),
            entropy: normalized_entropy(&data.global_test.class_counts),
        },
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Serialization(e.to_string()))?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

/// Read a federation back from a directory written by [`export_federation`],
/// validating shapes, label ranges, and per-client counts against the
/// manifest.
pub fn import_federation(dir: &Path) -> Result<FederationData> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Serialization(e.to_string()))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::data(format!(
            "unsupported manifest version {}",
            manifest.version
        )));
    }
    let spec = manifest.generator_spec.clone();
    spec.validate()?;
    if manifest.clients.len() != spec.num_clients {
        return Err(Error::data(format!(
            "manifest lists {} clients, spec says {}",
            manifest.clients.len(),
            spec.num_clients
        )));
    }

    let mut clients = Vec::with_capacity(manifest.clients.len());
    for entry in &manifest.clients {
        let client = read_dataset_csv(&dir.join(&entry.file), spec.feature_dim, spec.num_classes)?;
        if client.len() != entry.samples || client.class_counts != entry.class_counts {
            return Err(Error::data(format!(
                "{}: contents disagree with manifest",
                entry.file
            )));
        }
        clients.push(client);
    }
    let global_test =
        read_dataset_csv(&dir.join(&manifest.test.file), spec.feature_dim, spec.num_classes)?;
    if global_test.len() != manifest.test.samples {
        return Err(Error::data("test.csv contents disagree with manifest"));
    }
    if global_test.class_counts.iter().any(|&count| count == 0) {
        return Err(Error::data("test set is missing at least one class"));
    }
    let data = FederationData {
        clients,
        global_test,
        spec,
    };
    if data.total_samples() != manifest.total_samples {
        return Err(Error::data("total sample count disagrees with manifest"));
    }
    Ok(data)
}

/// Convenience used by the CLI: relative paths of everything a dataset
/// directory contains.
pub fn dataset_files(dir: &Path) -> Vec<PathBuf> {
    let mut files = vec![dir.join("manifest.json"), dir.join("test.csv")];
    if let Ok(entries) = fs::read_dir(dir.join("clients")) {
        let mut clients: Vec<PathBuf> = entries.flatten().map(|e| e.path()).collect();
        clients.sort();
        files.extend(clients);
    }
    files
}
