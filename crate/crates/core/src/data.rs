//! Rotated Gaussian-blob domains, CSV I/O, stratified splits and episodic
//! meta-source / meta-target sampling.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid data configuration: {0}")]
    Config(String),
    #[error("duplicate domain angle {0}°")]
    DuplicateAngle(f64),
    #[error("class {class} has {count} samples, need at least 2 to split")]
    ClassTooSmall { class: usize, count: usize },
    #[error("class {class} appears in the meta-target batch but not in source domain {domain}")]
    MissingClass { class: usize, domain: usize },
    #[error("{path}: line {line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub domain_id: usize,
    pub angle_deg: f64,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, domain_id: usize, angle_deg: f64) -> Result<Self> {
        if features.rank() != 2 || features.rows() != labels.len() {
            return Err(DataError::Config(format!(
                "features {:?} do not match {} labels",
                features.shape(),
                labels.len()
            )));
        }
        Ok(Self {
            features,
            labels,
            domain_id,
            angle_deg,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Row indices per class, in ascending row order.
    pub fn class_index(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &y) in self.labels.iter().enumerate() {
            map.entry(y).or_default().push(i);
        }
        map
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(rows).expect("rows in range"),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            domain_id: self.domain_id,
            angle_deg: self.angle_deg,
        }
    }
}

/// Rotates the first two coordinates of every row by `zeta` radians
/// counter-clockwise. Remaining coordinates pass through.
pub fn rotate(points: &Tensor, zeta: f64) -> Tensor {
    assert!(points.cols() >= 2, "rotate needs at least two coordinates");
    let (s, c) = zeta.sin_cos();
    let mut out = points.clone();
    let d = points.cols();
    for row in out.data_mut().chunks_mut(d) {
        let (x, y) = (row[0], row[1]);
        row[0] = c * x - s * y;
        row[1] = s * x + c * y;
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlobConfig {
    pub classes: usize,
    pub per_class: usize,
    pub radius: f64,
    pub std: f64,
}

impl Default for BlobConfig {
    fn default() -> Self {
        Self {
            classes: 3,
            per_class: 500,
            radius: 3.0,
            std: 0.4,
        }
    }
}

impl BlobConfig {
    /// Class `k` is centered at angle `2πk/C` on the circle.
    pub fn center(&self, class: usize) -> [f64; 2] {
        let t = 2.0 * std::f64::consts::PI * class as f64 / self.classes as f64;
        [self.radius * t.cos(), self.radius * t.sin()]
    }
}

/// Isotropic 2-D Gaussian blob per class, rows grouped by class. Domain 0,
/// angle 0.
pub fn generate_blobs<R: Rng + ?Sized>(cfg: &BlobConfig, rng: &mut R) -> Result<Dataset> {
    if cfg.classes < 2 {
        return Err(DataError::Config(format!("need at least 2 classes, got {}", cfg.classes)));
    }
    if cfg.per_class == 0 || !(cfg.std > 0.0) || !(cfg.radius > 0.0) {
        return Err(DataError::Config("per_class, std and radius must be positive".into()));
    }
    let noise = Normal::new(0.0, cfg.std).expect("positive std");
    let n = cfg.classes * cfg.per_class;
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for k in 0..cfg.classes {
        let [cx, cy] = cfg.center(k);
        for _ in 0..cfg.per_class {
            data.push(cx + noise.sample(rng));
            data.push(cy + noise.sample(rng));
            labels.push(k);
        }
    }
    Dataset::new(Tensor::matrix(n, 2, data).expect("sized"), labels, 0, 0.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkConfig {
    pub blobs: BlobConfig,
    pub source_angles: Vec<f64>,
    pub target_angles: Vec<f64>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            blobs: BlobConfig::default(),
            source_angles: vec![15.0, 30.0, 45.0, 60.0, 75.0],
            target_angles: vec![0.0, 90.0],
        }
    }
}

/// Full rotated domains. Sources take domain ids `0..S`, targets follow.
#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub sources: Vec<Dataset>,
    pub targets: Vec<Dataset>,
}

pub fn generate_benchmark<R: Rng + ?Sized>(cfg: &BenchmarkConfig, rng: &mut R) -> Result<Benchmark> {
    let base = generate_blobs(&cfg.blobs, rng)?;
    let angles: Vec<f64> = cfg.source_angles.iter().chain(&cfg.target_angles).copied().collect();
    let mut domains = make_rotated_domains(&base, &angles)?;
    let targets = domains.split_off(cfg.source_angles.len());
    Ok(Benchmark { sources: domains, targets })
}

/// Source domains split for training and model selection; targets untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitBenchmark {
    pub train: Vec<Dataset>,
    pub val: Vec<Dataset>,
    pub targets: Vec<Dataset>,
}

pub fn split_benchmark<R: Rng + ?Sized>(b: &Benchmark, val_frac: f64, rng: &mut R) -> Result<SplitBenchmark> {
    let mut train = Vec::with_capacity(b.sources.len());
    let mut val = Vec::with_capacity(b.sources.len());
    for d in &b.sources {
        let (t, v) = split_train_val(d, val_frac, rng)?;
        train.push(t);
        val.push(v);
    }
    Ok(SplitBenchmark {
        train,
        val,
        targets: b.targets.clone(),
    })
}

/// Rows of several datasets stacked; the first dataset's domain metadata is kept.
pub fn pool(sets: &[Dataset]) -> Result<Dataset> {
    let first = sets.first().ok_or_else(|| DataError::Config("nothing to pool".into()))?;
    let feats: Vec<&Tensor> = sets.iter().map(|d| &d.features).collect();
    let features = Tensor::concat_rows(&feats).map_err(|e| DataError::Config(e.to_string()))?;
    let labels = sets.iter().flat_map(|d| d.labels.iter().copied()).collect();
    Dataset::new(features, labels, first.domain_id, first.angle_deg)
}

/// One rotated copy of `base` per angle. Domain ids follow list order.
pub fn make_rotated_domains(base: &Dataset, angles_deg: &[f64]) -> Result<Vec<Dataset>> {
    if base.angle_deg != 0.0 {
        return Err(DataError::Config(format!("base dataset must have angle 0, got {}", base.angle_deg)));
    }
    for (i, a) in angles_deg.iter().enumerate() {
        if angles_deg[..i].contains(a) {
            return Err(DataError::DuplicateAngle(*a));
        }
    }
    Ok(angles_deg
        .iter()
        .enumerate()
        .map(|(id, &a)| Dataset {
            features: rotate(&base.features, a.to_radians()),
            labels: base.labels.clone(),
            domain_id: id,
            angle_deg: a,
        })
        .collect())
}

/// Stratified split. Each class contributes `round(val_frac · n_k)` rows to
/// validation, clamped to `[1, n_k − 1]`.
pub fn split_train_val<R: Rng + ?Sized>(ds: &Dataset, val_frac: f64, rng: &mut R) -> Result<(Dataset, Dataset)> {
    if !(val_frac > 0.0 && val_frac < 1.0) {
        return Err(DataError::Config(format!("val_frac must be in (0, 1), got {val_frac}")));
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (class, mut rows) in ds.class_index() {
        if rows.len() < 2 {
            return Err(DataError::ClassTooSmall { class, count: rows.len() });
        }
        rows.shuffle(rng);
        let k = ((val_frac * rows.len() as f64).round() as usize).clamp(1, rows.len() - 1);
        val.extend_from_slice(&rows[..k]);
        train.extend_from_slice(&rows[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((ds.subset(&train), ds.subset(&val)))
}

/// Rows drawn for one meta-source domain, keyed by class.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceSet {
    pub domain_id: usize,
    pub per_class: BTreeMap<usize, Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub target_features: Tensor,
    pub target_labels: Vec<usize>,
    pub target_domain: usize,
    pub sources: Vec<SourceSet>,
}

impl Episode {
    pub fn batch_size(&self) -> usize {
        self.target_labels.len()
    }

    pub fn num_sources(&self) -> usize {
        self.sources.len()
    }
}

/// One episode: a uniformly chosen meta-target domain supplies `batch` rows;
/// every other domain supplies up to `n_per_class` rows of each class present
/// in that batch.
pub fn sample_episode<R: Rng + ?Sized>(domains: &[Dataset], batch: usize, n_per_class: usize, rng: &mut R) -> Result<Episode> {
    if domains.len() < 2 {
        return Err(DataError::Config(format!("need at least 2 source domains, got {}", domains.len())));
    }
    if batch == 0 || n_per_class == 0 {
        return Err(DataError::Config("batch and N must be positive".into()));
    }
    let t = rng.random_range(0..domains.len());
    let target = &domains[t];
    if target.is_empty() {
        return Err(DataError::Config(format!("domain {} is empty", target.domain_id)));
    }
    let rows: Vec<usize> = if batch <= target.len() {
        rand::seq::index::sample(rng, target.len(), batch).into_vec()
    } else {
        (0..batch).map(|_| rng.random_range(0..target.len())).collect()
    };
    let target_features = target.features.select_rows(&rows).expect("rows in range");
    let target_labels: Vec<usize> = rows.iter().map(|&i| target.labels[i]).collect();
    let mut classes: Vec<usize> = target_labels.clone();
    classes.sort_unstable();
    classes.dedup();

    let mut sources = Vec::with_capacity(domains.len() - 1);
    for (s, domain) in domains.iter().enumerate() {
        if s == t {
            continue;
        }
        let index = domain.class_index();
        let mut per_class = BTreeMap::new();
        for &c in &classes {
            let pool = index.get(&c).ok_or(DataError::MissingClass {
                class: c,
                domain: domain.domain_id,
            })?;
            let picked: Vec<usize> = pool.choose_multiple(rng, n_per_class.min(pool.len())).copied().collect();
            per_class.insert(c, domain.features.select_rows(&picked).expect("rows in range"));
        }
        sources.push(SourceSet {
            domain_id: domain.domain_id,
            per_class,
        });
    }
    Ok(Episode {
        target_features,
        target_labels,
        target_domain: target.domain_id,
        sources,
    })
}

pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let d = ds.dim();
    let mut out = String::new();
    for k in 0..d {
        let _ = write!(out, "d{k},");
    }
    out.push_str("label,domain,angle\n");
    for (i, &y) in ds.labels.iter().enumerate() {
        for v in ds.features.row(i) {
            let _ = write!(out, "{v:.16e},");
        }
        let _ = writeln!(out, "{y},{},{:.16e}", ds.domain_id, ds.angle_deg);
    }
    std::fs::write(path, out).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_csv(path: &Path) -> Result<Dataset> {
    let p = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io { path: p.clone(), source })?;
    let err = |line: usize, msg: String| DataError::Parse { path: p.clone(), line, msg };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    let d = cols.len().checked_sub(3).filter(|&d| d > 0).ok_or_else(|| err(1, "header needs d0..dk,label,domain,angle".into()))?;
    let expected: Vec<String> = (0..d).map(|k| format!("d{k}")).chain(["label".into(), "domain".into(), "angle".into()]).collect();
    if cols != expected {
        return Err(err(1, format!("unexpected header {header:?}")));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut meta: Option<(usize, f64)> = None;
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 3 {
            return Err(err(n, format!("expected {} columns, found {}", d + 3, fields.len())));
        }
        for f in &fields[..d] {
            data.push(f.parse::<f64>().map_err(|e| err(n, format!("bad feature {f:?}: {e}")))?);
        }
        labels.push(fields[d].parse::<usize>().map_err(|e| err(n, format!("bad label {:?}: {e}", fields[d])))?);
        let domain = fields[d + 1].parse::<usize>().map_err(|e| err(n, format!("bad domain {:?}: {e}", fields[d + 1])))?;
        let angle = fields[d + 2].parse::<f64>().map_err(|e| err(n, format!("bad angle {:?}: {e}", fields[d + 2])))?;
        match meta {
            None => meta = Some((domain, angle)),
            Some(m) if m.0 == domain && m.1.to_bits() == angle.to_bits() => {}
            Some(_) => return Err(err(n, "domain/angle differ from earlier rows".into())),
        }
    }
    let (domain_id, angle_deg) = meta.ok_or_else(|| err(2, "no data rows".into()))?;
    let rows = labels.len();
    Dataset::new(Tensor::matrix(rows, d, data).expect("sized"), labels, domain_id, angle_deg)
}
