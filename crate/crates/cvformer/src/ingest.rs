//! Dataset loading and construction of the two model views.
//!
//! A dataset is a manifest plus one time-series file per subject. From each
//! series we build the functional connectivity network (Pearson correlation
//! of RoI columns) and derive the two views the model consumes: the FCN rows
//! as per-RoI features, and a binary adjacency obtained by keeping
//! correlations above the 70th percentile of the off-diagonal values.
//!
//! File formats:
//! - series file: UTF-8 text, one time point per line, M comma-separated
//!   decimal values, lines starting with `#` ignored;
//! - manifest: `key = value` lines (roi_count, num_classes, optional seed)
//!   followed by a `subjects:` marker and one `id path label split` row per
//!   subject, paths relative to the manifest's directory.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub label: usize,
    pub split: Split,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub roi_count: usize,
    pub num_classes: usize,
    pub seed: Option<u64>,
    pub subjects: Vec<ManifestEntry>,
    /// Directory the subject paths are relative to.
    pub root: PathBuf,
}

#[derive(Debug, Clone)]
pub struct SubjectRecord {
    pub id: String,
    pub label: usize,
    /// Time points.
    pub t: usize,
    /// RoI count.
    pub m: usize,
    /// Row-major T x M series.
    pub series: Vec<f64>,
}

/// The two inputs the model sees for one subject.
#[derive(Debug, Clone)]
pub struct ViewPair<S: Scalar> {
    /// M x M correlation matrix, row i = connectivity profile of RoI i.
    pub roi_features: Tensor<S>,
    /// M x M binary adjacency from percentile thresholding.
    pub adjacency: Tensor<S>,
}

#[derive(Debug, Clone)]
pub struct LoadedSubject<S: Scalar> {
    pub id: String,
    pub label: usize,
    pub split: Split,
    pub views: ViewPair<S>,
}

#[derive(Debug)]
pub struct Dataset<S: Scalar> {
    pub manifest: DatasetManifest,
    pub subjects: Vec<LoadedSubject<S>>,
}

impl<S: Scalar> Dataset<S> {
    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        self.subjects
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn m(&self) -> usize {
        self.manifest.roi_count
    }
}

// ── manifest ──

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    let mut roi_count = None;
    let mut num_classes = None;
    let mut seed = None;
    let mut subjects = Vec::new();
    let mut in_table = false;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !in_table {
            if line == "subjects:" {
                in_table = true;
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::data(None, format!("manifest line {}: expected `key = value`, got {line:?}", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let parsed: u64 = value.parse().map_err(|_| {
                Error::data(None, format!("manifest line {}: {key} value {value:?} is not an integer", lineno + 1))
            })?;
            match key {
                "roi_count" => roi_count = Some(parsed as usize),
                "num_classes" => num_classes = Some(parsed as usize),
                "seed" => seed = Some(parsed),
                other => {
                    return Err(Error::data(None, format!("manifest line {}: unknown key {other:?}", lineno + 1)))
                }
            }
        } else {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(Error::data(
                    None,
                    format!("manifest line {}: expected `id path label split`, got {line:?}", lineno + 1),
                ));
            }
            let label: usize = fields[2]
                .parse()
                .map_err(|_| Error::data(Some(fields[0]), format!("label {:?} is not an integer", fields[2])))?;
            let split = Split::parse(fields[3])
                .ok_or_else(|| Error::data(Some(fields[0]), format!("unknown split {:?}", fields[3])))?;
            subjects.push(ManifestEntry { id: fields[0].into(), path: fields[1].into(), label, split });
        }
    }
    let roi_count = roi_count.ok_or_else(|| Error::data(None, "manifest is missing roi_count"))?;
    let num_classes = num_classes.ok_or_else(|| Error::data(None, "manifest is missing num_classes"))?;
    if num_classes < 2 {
        return Err(Error::data(None, format!("num_classes must be at least 2, got {num_classes}")));
    }
    if subjects.is_empty() {
        return Err(Error::data(None, "manifest lists no subjects"));
    }
    for entry in &subjects {
        if entry.label >= num_classes {
            return Err(Error::data(
                Some(&entry.id),
                format!("label {} is out of range for {num_classes} classes", entry.label),
            ));
        }
    }
    Ok(DatasetManifest { roi_count, num_classes, seed, subjects, root })
}

// ── subject loading ──

pub fn load_subject(manifest: &DatasetManifest, entry: &ManifestEntry) -> Result<SubjectRecord> {
    let path = manifest.root.join(&entry.path);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m = manifest.roi_count;
    let mut series = Vec::new();
    let mut t = 0usize;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut count = 0usize;
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::data(Some(&entry.id), format!("line {}: {field:?} is not a number", lineno + 1))
            })?;
            series.push(v);
            count += 1;
        }
        if count != m {
            return Err(Error::data(
                Some(&entry.id),
                format!("line {}: {count} columns, manifest declares {m} RoIs", lineno + 1),
            ));
        }
        t += 1;
    }
    if t < 2 {
        return Err(Error::data(Some(&entry.id), format!("series has {t} time points, need at least 2")));
    }
    for j in 0..m {
        let first = series[j];
        if (0..t).all(|i| series[i * m + j] == first) {
            return Err(Error::data(Some(&entry.id), format!("column {j} is constant")));
        }
    }
    Ok(SubjectRecord { id: entry.id.clone(), label: entry.label, t, m, series })
}

// ── connectivity construction ──

/// Pearson correlation matrix of the M series columns, as a row-major
/// M x M buffer. Symmetric by construction, diagonal exactly 1, entries
/// clamped to [-1, 1] to absorb round-off.
pub fn compute_fcn(t: usize, m: usize, series: &[f64]) -> Result<Vec<f64>> {
    if t < 2 || series.len() != t * m {
        return Err(Error::data(None, format!("series shape {t}x{m} does not match {} values", series.len())));
    }
    let mut means = vec![0.0f64; m];
    for i in 0..t {
        for j in 0..m {
            means[j] += series[i * m + j];
        }
    }
    for mj in &mut means {
        *mj /= t as f64;
    }
    // Centered columns, column-major so each column is contiguous for the
    // pairwise dot products below.
    let mut centered = vec![0.0f64; t * m];
    let mut norms = vec![0.0f64; m];
    for j in 0..m {
        for i in 0..t {
            let c = series[i * m + j] - means[j];
            centered[j * t + i] = c;
            norms[j] += c * c;
        }
        if norms[j] == 0.0 {
            return Err(Error::data(None, format!("column {j} is constant")));
        }
        norms[j] = norms[j].sqrt();
    }
    let mut fcn = vec![0.0f64; m * m];
    for a in 0..m {
        fcn[a * m + a] = 1.0;
        for b in (a + 1)..m {
            let ca = &centered[a * t..(a + 1) * t];
            let cb = &centered[b * t..(b + 1) * t];
            let dot: f64 = ca.iter().zip(cb).map(|(x, y)| x * y).sum();
            let r = (dot / (norms[a] * norms[b])).clamp(-1.0, 1.0);
            fcn[a * m + b] = r;
            fcn[b * m + a] = r;
        }
    }
    Ok(fcn)
}

/// Binary adjacency keeping off-diagonal entries strictly above the
/// nearest-rank percentile of the strict upper triangle.
pub fn threshold_fcn(m: usize, fcn: &[f64], percentile: f64) -> Vec<f64> {
    let mut upper = Vec::with_capacity(m * (m - 1) / 2);
    for a in 0..m {
        for b in (a + 1)..m {
            upper.push(fcn[a * m + b]);
        }
    }
    let n = upper.len();
    let mut adj = vec![0.0f64; m * m];
    if n == 0 {
        return adj;
    }
    upper.sort_by(|x, y| x.partial_cmp(y).unwrap());
    // Nearest rank: the ceil(p/100 * n)-th smallest. The tiny epsilon keeps
    // exact products like 0.7 * 10 from rounding up across a representation
    // error.
    let rank = ((percentile / 100.0 * n as f64) - 1e-9).ceil().max(1.0) as usize;
    let threshold = upper[rank.min(n) - 1];
    for a in 0..m {
        for b in (a + 1)..m {
            if fcn[a * m + b] > threshold {
                adj[a * m + b] = 1.0;
                adj[b * m + a] = 1.0;
            }
        }
    }
    adj
}

/// Assemble the two model views from a correlation matrix.
pub fn build_views<S: Scalar>(m: usize, fcn: &[f64]) -> ViewPair<S> {
    let roi_features = Tensor::matrix(m, m, fcn.iter().map(|&v| S::from_f64(v)).collect()).unwrap();
    let adj = threshold_fcn(m, fcn, 70.0);
    let adjacency = Tensor::matrix(m, m, adj.iter().map(|&v| S::from_f64(v)).collect()).unwrap();
    ViewPair { roi_features, adjacency }
}

pub fn load_dataset<S: Scalar>(manifest_path: &Path) -> Result<Dataset<S>> {
    let manifest = load_manifest(manifest_path)?;
    let mut subjects = Vec::with_capacity(manifest.subjects.len());
    for entry in &manifest.subjects {
        let record = load_subject(&manifest, entry)?;
        let fcn = compute_fcn(record.t, record.m, &record.series)
            .map_err(|e| Error::data(Some(&entry.id), e.to_string()))?;
        let views = build_views(record.m, &fcn);
        subjects.push(LoadedSubject { id: record.id, label: record.label, split: entry.split, views });
    }
    Ok(Dataset { manifest, subjects })
}

// ── synthetic generator ──

/// The two RoI blocks whose coupling carries the class signal.
pub fn planted_blocks(m: usize) -> (Range<usize>, Range<usize>) {
    let w = m / 6;
    (0..w, w..2 * w)
}

#[derive(Debug, Clone)]
pub struct GenConfig {
    pub subjects: usize,
    pub rois: usize,
    pub timepoints: usize,
    pub effect: f64,
    pub seed: u64,
}

/// Generate a labeled synthetic dataset under `out_dir` and return the
/// manifest path.
///
/// Each subject's series mixes per-RoI noise with latent block factors: the
/// RoIs of each planted block share one factor, and for class-1 subjects the
/// two block factors are correlated by `effect` through a shared component.
/// Class 0 leaves the blocks independent, so the inter-block correlation is
/// the only distributional difference between the classes.
pub fn gen_synth(cfg: &GenConfig, out_dir: &Path) -> Result<PathBuf> {
    if cfg.subjects < 2 || cfg.subjects % 2 != 0 {
        return Err(Error::Config(format!("subjects must be even and at least 2, got {}", cfg.subjects)));
    }
    if cfg.rois < 8 {
        return Err(Error::Config(format!("rois must be at least 8, got {}", cfg.rois)));
    }
    if cfg.timepoints < 32 {
        return Err(Error::Config(format!("timepoints must be at least 32, got {}", cfg.timepoints)));
    }
    if !(0.0..=1.0).contains(&cfg.effect) || !cfg.effect.is_finite() {
        return Err(Error::Config(format!("effect must lie in [0, 1], got {}", cfg.effect)));
    }

    let n = cfg.subjects;
    let (m, t) = (cfg.rois, cfg.timepoints);
    let (block_a, block_b) = planted_blocks(m);
    let series_dir = out_dir.join("series");
    fs::create_dir_all(&series_dir).map_err(|e| Error::io(&series_dir, e))?;

    // Stream 0 drives the split shuffle; subject i draws from stream i + 1,
    // so the per-subject data is independent of how many subjects precede it.
    let mut splits = vec![Split::Train; n];
    {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(0);
        let mut class0: Vec<usize> = (0..n).step_by(2).collect();
        let mut class1: Vec<usize> = (1..n).step_by(2).collect();
        class0.shuffle(&mut rng);
        class1.shuffle(&mut rng);
        // Interleave the classes so every split stays close to balanced.
        let mut order = Vec::with_capacity(n);
        for k in 0..n / 2 {
            order.push(class0[k]);
            order.push(class1[k]);
        }
        let test_n = n * 2 / 10;
        let val_n = n / 10;
        for (pos, &idx) in order.iter().enumerate() {
            splits[idx] = if pos < test_n {
                Split::Test
            } else if pos < test_n + val_n {
                Split::Val
            } else {
                Split::Train
            };
        }
    }

    let shared = cfg.effect.sqrt();
    let own = (1.0 - cfg.effect).sqrt();
    let mix = (0.5f64).sqrt();
    for idx in 0..n {
        let label = idx % 2;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(idx as u64 + 1);
        let mut draw = || -> f64 { StandardNormal.sample(&mut rng) };
        let factor_a: Vec<f64> = (0..t).map(|_| draw()).collect();
        let factor_b: Vec<f64> = (0..t).map(|_| draw()).collect();
        let bridge: Vec<f64> = (0..t).map(|_| draw()).collect();

        let path = series_dir.join(format!("s{idx:04}.csv"));
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        for ti in 0..t {
            let (sa, sb) = if label == 1 {
                (own * factor_a[ti] + shared * bridge[ti], own * factor_b[ti] + shared * bridge[ti])
            } else {
                (factor_a[ti], factor_b[ti])
            };
            for j in 0..m {
                let noise = draw();
                let x = if block_a.contains(&j) {
                    mix * (sa + noise)
                } else if block_b.contains(&j) {
                    mix * (sb + noise)
                } else {
                    noise
                };
                let sep = if j + 1 == m { "\n" } else { "," };
                write!(w, "{:.6}{sep}", 1000.0 + 50.0 * x).map_err(|e| Error::io(&path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }

    let manifest_path = out_dir.join("manifest.txt");
    let file = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut w = BufWriter::new(file);
    (|| -> std::io::Result<()> {
        writeln!(w, "roi_count = {m}")?;
        writeln!(w, "num_classes = 2")?;
        writeln!(w, "seed = {}", cfg.seed)?;
        writeln!(w, "subjects:")?;
        for idx in 0..n {
            writeln!(w, "s{idx:04} series/s{idx:04}.csv {} {}", idx % 2, splits[idx])?;
        }
        w.flush()
    })()
    .map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}
