//! Long-tail dataset curation: Pareto rank→count splits, balanced closed
//! test sets, open-class splits, shot partitions, class-aware batching, and
//! the manifest files that make every split reconstructible.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::rng::{indexed_stream, stream};
use crate::types::{Label, LabeledExample, ShotCategory};

pub const MANIFEST_VERSION: u32 = 1;

/// Per-class training counts for ranks 1..=k: the r^(−1/α) curve rescaled so
/// rank 1 gets exactly `n_max` and rank k exactly `n_min`. Monotone
/// nonincreasing; degenerates to the balanced split when `n_min == n_max`.
pub fn pareto_counts(k: usize, alpha: f64, n_max: usize, n_min: usize) -> Vec<usize> {
    assert!(k > 0 && alpha > 0.0 && n_min >= 1 && n_min <= n_max);
    if k == 1 {
        return vec![n_max];
    }
    if n_min == n_max {
        return vec![n_max; k];
    }
    let tail = (k as f64).powf(-1.0 / alpha);
    let span = (n_max - n_min) as f64;
    (1..=k)
        .map(|r| {
            let t = ((r as f64).powf(-1.0 / alpha) - tail) / (1.0 - tail);
            let count = (n_min as f64 + span * t).round() as usize;
            count.clamp(n_min, n_max)
        })
        .collect()
}

/// MANY iff count > many_min; FEW iff count < few_max; MEDIUM otherwise
/// (both boundaries land in MEDIUM).
pub fn shot_partition(class_counts: &[usize], many_min: usize, few_max: usize) -> Vec<ShotCategory> {
    class_counts
        .iter()
        .map(|&count| {
            if count > many_min {
                ShotCategory::Many
            } else if count < few_max {
                ShotCategory::Few
            } else {
                ShotCategory::Medium
            }
        })
        .collect()
}

/// A balanced labeled pool the curator draws from. `fetch` must be
/// deterministic so that manifests alone reconstruct every split.
pub trait ExampleSource: Sync {
    fn num_classes(&self) -> usize;
    fn pool_len(&self, class: usize) -> usize;
    /// Returns (example id, input tensor).
    fn fetch(&self, class: usize, index: usize) -> (String, Vec<f64>);
    /// Reverse lookup used when loading manifests.
    fn fetch_by_id(&self, id: &str) -> Option<Vec<f64>>;
}

/// Gaussian-mixture generator: one isotropic cluster per class, centers at
/// scale `separation`, samples at scale `noise`. Examples are pure functions
/// of (seed, class, index).
pub struct SyntheticSource {
    centers: Vec<Vec<f64>>,
    noise: f64,
    seed: u64,
}

impl SyntheticSource {
    pub fn new(dim: usize, num_classes: usize, separation: f64, noise: f64, seed: u64) -> Self {
        Self::with_latent_rank(dim, num_classes, separation, noise, 0, seed)
    }

    /// With `latent_rank > 0`, class centers are drawn inside a shared
    /// random subspace of that rank (scaled to keep the expected center
    /// norm equal to the independent case), so classes share structure the
    /// memory mechanism can transfer. `latent_rank == 0` draws centers
    /// independently per dimension.
    pub fn with_latent_rank(
        dim: usize,
        num_classes: usize,
        separation: f64,
        noise: f64,
        latent_rank: usize,
        seed: u64,
    ) -> Self {
        let mut rng = stream(seed, "synthetic.centers");
        let rank = latent_rank.min(dim);
        let centers = if rank == 0 {
            let normal = Normal::new(0.0, separation).unwrap();
            (0..num_classes)
                .map(|_| (0..dim).map(|_| normal.sample(&mut rng)).collect())
                .collect()
        } else {
            let basis_normal = Normal::new(0.0, (1.0 / rank as f64).sqrt()).unwrap();
            let basis: Vec<Vec<f64>> = (0..dim)
                .map(|_| (0..rank).map(|_| basis_normal.sample(&mut rng)).collect())
                .collect();
            let latent_normal = Normal::new(0.0, separation).unwrap();
            (0..num_classes)
                .map(|_| {
                    let z: Vec<f64> = (0..rank).map(|_| latent_normal.sample(&mut rng)).collect();
                    basis
                        .iter()
                        .map(|row| row.iter().zip(&z).map(|(b, zi)| b * zi).sum())
                        .collect()
                })
                .collect()
        };
        Self {
            centers,
            noise,
            seed,
        }
    }

    /// Source sized for a curation run: closed + open classes.
    pub fn from_config(cfg: &Config) -> Self {
        Self::with_latent_rank(
            cfg.input_len(),
            cfg.num_classes + cfg.open_classes,
            cfg.synthetic_separation,
            cfg.synthetic_noise,
            cfg.synthetic_latent_rank,
            cfg.seed,
        )
    }

    fn sample(&self, class: usize, index: usize) -> Vec<f64> {
        let mut rng = indexed_stream(
            self.seed,
            "synthetic.sample",
            ((class as u64) << 32) | index as u64,
        );
        let normal = Normal::new(0.0, self.noise).unwrap();
        self.centers[class]
            .iter()
            .map(|c| c + normal.sample(&mut rng))
            .collect()
    }
}

impl ExampleSource for SyntheticSource {
    fn num_classes(&self) -> usize {
        self.centers.len()
    }

    fn pool_len(&self, _class: usize) -> usize {
        // Generation is lazy; any index is valid.
        1 << 20
    }

    fn fetch(&self, class: usize, index: usize) -> (String, Vec<f64>) {
        (format!("syn{class:04}_{index:06}"), self.sample(class, index))
    }

    fn fetch_by_id(&self, id: &str) -> Option<Vec<f64>> {
        let rest = id.strip_prefix("syn")?;
        let (class, index) = rest.split_once('_')?;
        let class: usize = class.parse().ok()?;
        let index: usize = index.parse().ok()?;
        if class >= self.centers.len() {
            return None;
        }
        Some(self.sample(class, index))
    }
}

/// CSV-backed source: rows `id,class,x0,x1,...`. A directory is read as the
/// concatenation of its `*.csv` files in name order.
pub struct CsvSource {
    pools: Vec<Vec<(String, Vec<f64>)>>,
    by_id: HashMap<String, (usize, usize)>,
}

impl CsvSource {
    pub fn load(path: &Path) -> Result<Self> {
        let mut files = Vec::new();
        if path.is_dir() {
            for entry in std::fs::read_dir(path)? {
                let p = entry?.path();
                if p.extension().is_some_and(|e| e == "csv") {
                    files.push(p);
                }
            }
            files.sort();
            if files.is_empty() {
                return Err(Error::MissingArtifact(format!(
                    "no .csv files under {}",
                    path.display()
                )));
            }
        } else if path.is_file() {
            files.push(path.to_path_buf());
        } else {
            return Err(Error::MissingArtifact(format!(
                "source path {} does not exist",
                path.display()
            )));
        }

        let mut pools: Vec<Vec<(String, Vec<f64>)>> = Vec::new();
        for file in files {
            let text = std::fs::read_to_string(&file)?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let mut parts = line.split(',');
                let id = parts
                    .next()
                    .ok_or_else(|| Error::Format(format!("{}:{}: empty row", file.display(), lineno + 1)))?
                    .trim()
                    .to_string();
                let class: usize = parts
                    .next()
                    .and_then(|c| c.trim().parse().ok())
                    .ok_or_else(|| {
                        Error::Format(format!("{}:{}: bad class id", file.display(), lineno + 1))
                    })?;
                let input: Vec<f64> = parts
                    .map(|x| x.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| {
                        Error::Format(format!("{}:{}: bad feature value", file.display(), lineno + 1))
                    })?;
                if !input.iter().all(|x| x.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "{}:{}: non-finite feature",
                        file.display(),
                        lineno + 1
                    )));
                }
                if pools.len() <= class {
                    pools.resize_with(class + 1, Vec::new);
                }
                pools[class].push((id, input));
            }
        }
        let mut by_id = HashMap::new();
        for (class, pool) in pools.iter().enumerate() {
            for (idx, (id, _)) in pool.iter().enumerate() {
                by_id.insert(id.clone(), (class, idx));
            }
        }
        Ok(Self { pools, by_id })
    }
}

impl ExampleSource for CsvSource {
    fn num_classes(&self) -> usize {
        self.pools.len()
    }

    fn pool_len(&self, class: usize) -> usize {
        self.pools.get(class).map_or(0, Vec::len)
    }

    fn fetch(&self, class: usize, index: usize) -> (String, Vec<f64>) {
        let (id, input) = &self.pools[class][index];
        (id.clone(), input.clone())
    }

    fn fetch_by_id(&self, id: &str) -> Option<Vec<f64>> {
        let &(class, idx) = self.by_id.get(id)?;
        Some(self.pools[class][idx].1.clone())
    }
}

/// Draw `count` distinct indices from `0..pool` (partial Fisher-Yates; order
/// is the draw order).
fn sample_distinct(rng: &mut ChaCha8Rng, pool: usize, count: usize) -> Vec<usize> {
    assert!(count <= pool, "cannot draw {count} distinct from {pool}");
    let mut swaps: HashMap<usize, usize> = HashMap::new();
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let j = rng.gen_range(i..pool);
        let vi = *swaps.get(&i).unwrap_or(&i);
        let vj = *swaps.get(&j).unwrap_or(&j);
        out.push(vj);
        swaps.insert(j, vi);
    }
    out
}

/// The curated dataset: long-tailed train split, balanced validation and
/// closed test splits, open split, per-class counts and shot partition.
/// Curated class ids are rank order (0 = largest class).
#[derive(Debug, Clone)]
pub struct CuratedDataset {
    pub train: Vec<LabeledExample>,
    pub val: Vec<LabeledExample>,
    pub test_closed: Vec<LabeledExample>,
    pub test_open: Vec<LabeledExample>,
    pub class_counts: Vec<usize>,
    pub shot_partition: Vec<ShotCategory>,
    /// Curated class id → source class id.
    pub closed_source_classes: Vec<usize>,
    pub open_source_classes: Vec<usize>,
}

/// Source classes ranked by pool size (descending), ties by id.
fn rank_classes(source: &dyn ExampleSource) -> Vec<usize> {
    let mut ranked: Vec<usize> = (0..source.num_classes()).collect();
    ranked.sort_by_key(|&c| (std::cmp::Reverse(source.pool_len(c)), c));
    ranked
}

/// Build the long-tailed training split (plus balanced val/test splits) from
/// a balanced source. Counts depend only on (k, α, n_max, n_min); membership
/// depends on the seed.
pub fn pareto_longtail_split(source: &dyn ExampleSource, cfg: &Config) -> Result<CuratedDataset> {
    let k = cfg.num_classes;
    let ranked = rank_classes(source);
    if ranked.len() < k + cfg.open_classes {
        return Err(Error::Config(format!(
            "source provides {} classes; {} closed + {} open requested",
            ranked.len(),
            k,
            cfg.open_classes
        )));
    }
    let counts = pareto_counts(k, cfg.pareto_alpha, cfg.n_max, cfg.n_min);

    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test_closed = Vec::new();
    for (class, (&source_class, &count)) in ranked.iter().zip(&counts).enumerate() {
        let needed = count + cfg.val_per_class + cfg.test_per_class;
        let pool = source.pool_len(source_class);
        if pool < needed {
            return Err(Error::ClassTooSmall {
                class: source_class,
                available: pool,
                needed,
            });
        }
        let mut rng = indexed_stream(cfg.seed, "curate.class", class as u64);
        let picks = sample_distinct(&mut rng, pool, needed);
        for (slot, &index) in picks.iter().enumerate() {
            let (id, input) = source.fetch(source_class, index);
            let ex = LabeledExample::new(id, input, Label::Known(class));
            if slot < count {
                train.push(ex);
            } else if slot < count + cfg.val_per_class {
                val.push(ex);
            } else {
                test_closed.push(ex);
            }
        }
    }

    let closed_source_classes: Vec<usize> = ranked[..k].to_vec();
    let open_source_classes: Vec<usize> = ranked[k..k + cfg.open_classes].to_vec();
    let test_open = open_split(
        source,
        &open_source_classes,
        &closed_source_classes,
        cfg.open_per_class,
        cfg.seed,
    )?;

    let shot = shot_partition(&counts, cfg.many_shot_min, cfg.few_shot_max);
    Ok(CuratedDataset {
        train,
        val,
        test_closed,
        test_open,
        class_counts: counts,
        shot_partition: shot,
        closed_source_classes,
        open_source_classes,
    })
}

/// Draw the open test split: `per_class` examples from each open class, all
/// labeled OPEN. Open classes must be disjoint from the closed ones.
pub fn open_split(
    source: &dyn ExampleSource,
    open_class_ids: &[usize],
    closed_class_ids: &[usize],
    per_class: usize,
    seed: u64,
) -> Result<Vec<LabeledExample>> {
    for &open in open_class_ids {
        if closed_class_ids.contains(&open) {
            return Err(Error::OpenClassOverlap(open));
        }
    }
    let mut out = Vec::with_capacity(open_class_ids.len() * per_class);
    for (slot, &source_class) in open_class_ids.iter().enumerate() {
        let pool = source.pool_len(source_class);
        if pool < per_class {
            return Err(Error::ClassTooSmall {
                class: source_class,
                available: pool,
                needed: per_class,
            });
        }
        let mut rng = indexed_stream(seed, "curate.open", slot as u64);
        for index in sample_distinct(&mut rng, pool, per_class) {
            let (id, input) = source.fetch(source_class, index);
            out.push(LabeledExample::new(id, input, Label::Open));
        }
    }
    Ok(out)
}

/// Deterministic class-aware batch stream: each batch samples
/// `classes_per_batch` distinct classes uniformly, then
/// `batch_size / classes_per_batch` instances per class (with replacement
/// when the class is smaller than its quota). Yields indices into the
/// training set.
pub struct ClassAwareBatches {
    rng: ChaCha8Rng,
    class_indices: Vec<Vec<usize>>,
    batch_size: usize,
    classes_per_batch: usize,
}

impl ClassAwareBatches {
    pub fn new(
        labels: &[usize],
        num_classes: usize,
        batch_size: usize,
        classes_per_batch: usize,
        seed: u64,
    ) -> Result<Self> {
        if !batch_size.is_multiple_of(classes_per_batch) {
            return Err(Error::BatchDivisibility {
                batch_size,
                classes_per_batch,
            });
        }
        if classes_per_batch > num_classes {
            return Err(Error::Config(format!(
                "classes_per_batch ({classes_per_batch}) exceeds the class count ({num_classes})"
            )));
        }
        let mut class_indices = vec![Vec::new(); num_classes];
        for (i, &label) in labels.iter().enumerate() {
            if label >= num_classes {
                return Err(Error::LabelOutOfRange {
                    label,
                    num_classes,
                });
            }
            class_indices[label].push(i);
        }
        for (class, list) in class_indices.iter().enumerate() {
            if list.is_empty() {
                return Err(Error::EmptyClass { class });
            }
        }
        Ok(Self {
            rng: stream(seed, "batches.class_aware"),
            class_indices,
            batch_size,
            classes_per_batch,
        })
    }
}

impl Iterator for ClassAwareBatches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let k = self.class_indices.len();
        let quota = self.batch_size / self.classes_per_batch;
        // Distinct classes by partial Fisher-Yates.
        let mut classes: Vec<usize> = (0..k).collect();
        for i in 0..self.classes_per_batch {
            let j = self.rng.gen_range(i..k);
            classes.swap(i, j);
        }
        let mut batch = Vec::with_capacity(self.batch_size);
        for &class in &classes[..self.classes_per_batch] {
            let pool = &self.class_indices[class];
            if pool.len() >= quota {
                let mut scratch: Vec<usize> = (0..pool.len()).collect();
                for i in 0..quota {
                    let j = self.rng.gen_range(i..pool.len());
                    scratch.swap(i, j);
                    batch.push(pool[scratch[i]]);
                }
            } else {
                for _ in 0..quota {
                    batch.push(pool[self.rng.gen_range(0..pool.len())]);
                }
            }
        }
        Some(batch)
    }
}

/// Plain shuffled instance batches for one epoch (the baseline's sampler).
pub fn shuffled_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Manifest header; one manifest file per split.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestHeader {
    pub split: String,
    pub k: usize,
    pub alpha: f64,
    pub n_max: usize,
    pub n_min: usize,
    pub seed: u64,
    pub version: u32,
}

pub fn write_manifest(path: &Path, header: &ManifestHeader, rows: &[&LabeledExample]) -> Result<()> {
    let mut text = String::new();
    let _ = writeln!(text, "# oltr-manifest v{}", header.version);
    let _ = writeln!(text, "# split = {}", header.split);
    let _ = writeln!(text, "# k = {}", header.k);
    let _ = writeln!(text, "# alpha = {}", header.alpha);
    let _ = writeln!(text, "# n_max = {}", header.n_max);
    let _ = writeln!(text, "# n_min = {}", header.n_min);
    let _ = writeln!(text, "# seed = {}", header.seed);
    for ex in rows {
        let class = match ex.label {
            Label::Known(c) => c.to_string(),
            Label::Open => "open".to_string(),
        };
        let _ = writeln!(text, "{}\t{}\t{}", ex.id, class, header.split);
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Parse a manifest into its header and (id, label) rows.
pub fn read_manifest(path: &Path) -> Result<(ManifestHeader, Vec<(String, Label)>)> {
    let text = std::fs::read_to_string(path)
        .map_err(|_| Error::MissingArtifact(format!("manifest {}", path.display())))?;
    let mut header = ManifestHeader {
        split: String::new(),
        k: 0,
        alpha: 0.0,
        n_max: 0,
        n_min: 0,
        seed: 0,
        version: 0,
    };
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            let comment = comment.trim();
            if let Some(v) = comment.strip_prefix("oltr-manifest v") {
                header.version = v
                    .parse()
                    .map_err(|_| Error::Format(format!("bad manifest version {v:?}")))?;
            } else if let Some((key, value)) = comment.split_once('=') {
                let value = value.trim();
                match key.trim() {
                    "split" => header.split = value.to_string(),
                    "k" => header.k = value.parse().unwrap_or(0),
                    "alpha" => header.alpha = value.parse().unwrap_or(0.0),
                    "n_max" => header.n_max = value.parse().unwrap_or(0),
                    "n_min" => header.n_min = value.parse().unwrap_or(0),
                    "seed" => header.seed = value.parse().unwrap_or(0),
                    _ => {}
                }
            }
            continue;
        }
        let mut parts = line.split('\t');
        let (Some(id), Some(class)) = (parts.next(), parts.next()) else {
            return Err(Error::Format(format!(
                "{}:{}: expected id<TAB>class<TAB>split",
                path.display(),
                lineno + 1
            )));
        };
        let label = if class == "open" {
            Label::Open
        } else {
            Label::Known(class.parse().map_err(|_| {
                Error::Format(format!("{}:{}: bad class {class:?}", path.display(), lineno + 1))
            })?)
        };
        rows.push((id.to_string(), label));
    }
    if header.version != MANIFEST_VERSION {
        return Err(Error::Format(format!(
            "unsupported manifest version {} in {}",
            header.version,
            path.display()
        )));
    }
    Ok((header, rows))
}

/// Reconstruct a split from its manifest by re-fetching inputs from the
/// source.
pub fn load_split(source: &dyn ExampleSource, path: &Path) -> Result<Vec<LabeledExample>> {
    let (_, rows) = read_manifest(path)?;
    rows.into_iter()
        .map(|(id, label)| {
            let input = source
                .fetch_by_id(&id)
                .ok_or_else(|| Error::Format(format!("example id {id:?} not found in source")))?;
            Ok(LabeledExample::new(id, input, label))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn cfg_with(pairs: &[(&str, &str)]) -> Config {
        let raw: BTreeMap<String, String> = pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        crate::config::validate_config(&raw).unwrap()
    }

    /// Independent reimplementation of the rank-count formula, kept free of
    /// the production helper.
    fn oracle_counts(k: usize, alpha: f64, n_max: usize, n_min: usize) -> Vec<usize> {
        let kf = k as f64;
        let floor = kf.powf(-1.0 / alpha);
        (1..=k)
            .map(|r| {
                if n_min == n_max {
                    return n_max;
                }
                let x = (r as f64).powf(-1.0 / alpha);
                let frac = (x - floor) / (1.0 - floor);
                let v = n_min as f64 + (n_max as f64 - n_min as f64) * frac;
                (v.round() as usize).clamp(n_min, n_max)
            })
            .collect()
    }

    #[test]
    fn balanced_when_endpoints_coincide() {
        assert_eq!(pareto_counts(5, 6.0, 40, 40), vec![40; 5]);
    }

    #[test]
    fn thousand_class_endpoints_are_exact() {
        let counts = pareto_counts(1000, 6.0, 1280, 5);
        assert_eq!(counts[0], 1280);
        assert_eq!(counts[999], 5);
        assert!(counts.windows(2).all(|w| w[0] >= w[1]), "counts must be nonincreasing");
    }

    #[test]
    fn ten_class_counts_match_frozen_oracle_vector() {
        // Frozen output of the independent oracle for K=10, n_max=100,
        // n_min=5, α=6.
        let frozen = vec![100, 67, 50, 39, 30, 23, 17, 13, 9, 5];
        assert_eq!(oracle_counts(10, 6.0, 100, 5), frozen);
        assert_eq!(pareto_counts(10, 6.0, 100, 5), frozen);
    }

    #[test]
    fn smaller_alpha_is_more_longtailed() {
        let steep = pareto_counts(20, 2.0, 500, 5);
        let flat = pareto_counts(20, 10.0, 500, 5);
        let steep_total: usize = steep.iter().sum();
        let flat_total: usize = flat.iter().sum();
        assert!(steep_total < flat_total, "lower α must concentrate mass in the head");
    }

    #[test]
    fn shot_partition_boundaries() {
        let counts = [1280, 101, 100, 21, 20, 19, 5];
        let cats = shot_partition(&counts, 100, 20);
        assert_eq!(cats[0], ShotCategory::Many);
        assert_eq!(cats[1], ShotCategory::Many);
        assert_eq!(cats[2], ShotCategory::Medium); // exactly 100 → MEDIUM
        assert_eq!(cats[3], ShotCategory::Medium);
        assert_eq!(cats[4], ShotCategory::Medium); // exactly 20 → MEDIUM
        assert_eq!(cats[5], ShotCategory::Few);
        assert_eq!(cats[6], ShotCategory::Few);
    }

    #[test]
    fn shot_partition_is_total() {
        let counts = pareto_counts(50, 6.0, 300, 2);
        let cats = shot_partition(&counts, 100, 20);
        assert_eq!(cats.len(), 50);
    }

    fn bench_cfg() -> Config {
        cfg_with(&[
            ("num_classes", "6"),
            ("open_classes", "2"),
            ("n_max", "30"),
            ("n_min", "4"),
            ("val_per_class", "3"),
            ("test_per_class", "5"),
            ("open_per_class", "5"),
            ("input_dim", "3"),
            ("seed", "11"),
        ])
    }

    #[test]
    fn curation_counts_are_seed_independent_membership_is_not() {
        let cfg_a = bench_cfg();
        let mut cfg_b = bench_cfg();
        cfg_b.seed = 999;
        // Same source for both so only curation randomness differs.
        let source = SyntheticSource::new(3, 8, 1.0, 1.0, 1234);
        let a = pareto_longtail_split(&source, &cfg_a).unwrap();
        let b = pareto_longtail_split(&source, &cfg_b).unwrap();
        assert_eq!(a.class_counts, b.class_counts);
        let ids_a: Vec<&str> = a.train.iter().map(|e| e.id.as_str()).collect();
        let ids_b: Vec<&str> = b.train.iter().map(|e| e.id.as_str()).collect();
        assert_ne!(ids_a, ids_b, "membership should vary with the seed");

        let a2 = pareto_longtail_split(&source, &cfg_a).unwrap();
        let ids_a2: Vec<&str> = a2.train.iter().map(|e| e.id.as_str()).collect();
        assert_eq!(ids_a, ids_a2, "same seed must reproduce the same split");
    }

    #[test]
    fn splits_are_disjoint_and_sized() {
        let cfg = bench_cfg();
        let source = SyntheticSource::from_config(&cfg);
        let data = pareto_longtail_split(&source, &cfg).unwrap();
        assert_eq!(data.train.len(), data.class_counts.iter().sum::<usize>());
        assert_eq!(data.val.len(), cfg.num_classes * cfg.val_per_class);
        assert_eq!(data.test_closed.len(), cfg.num_classes * cfg.test_per_class);
        assert_eq!(data.test_open.len(), cfg.open_classes * cfg.open_per_class);
        let mut all_ids: Vec<&str> = data
            .train
            .iter()
            .chain(&data.val)
            .chain(&data.test_closed)
            .chain(&data.test_open)
            .map(|e| e.id.as_str())
            .collect();
        let n = all_ids.len();
        all_ids.sort_unstable();
        all_ids.dedup();
        assert_eq!(all_ids.len(), n, "splits must not share examples");
        assert!(data.test_open.iter().all(|e| e.label == Label::Open));
    }

    #[test]
    fn zero_open_classes_gives_empty_open_split() {
        let source = SyntheticSource::new(3, 8, 1.0, 1.0, 5);
        let open = open_split(&source, &[], &[0, 1, 2], 10, 5).unwrap();
        assert!(open.is_empty());
    }

    #[test]
    fn open_overlap_is_rejected() {
        let source = SyntheticSource::new(3, 8, 1.0, 1.0, 5);
        let err = open_split(&source, &[2, 6], &[0, 1, 2], 10, 5).unwrap_err();
        assert!(matches!(err, Error::OpenClassOverlap(2)));
    }

    #[test]
    fn open_split_matches_reference_seeded_draw() {
        // Reference draw: the same partial Fisher-Yates procedure written
        // out independently.
        let source = SyntheticSource::new(2, 6, 1.0, 1.0, 42);
        let open_ids = [3usize, 4, 5];
        let got = open_split(&source, &open_ids, &[0, 1, 2], 10, 77).unwrap();

        let mut want_ids = Vec::new();
        for (slot, &class) in open_ids.iter().enumerate() {
            let mut rng = indexed_stream(77, "curate.open", slot as u64);
            let pool = source.pool_len(class);
            let mut swaps: HashMap<usize, usize> = HashMap::new();
            for i in 0..10 {
                let j = rng.gen_range(i..pool);
                let vi = *swaps.get(&i).unwrap_or(&i);
                let vj = *swaps.get(&j).unwrap_or(&j);
                want_ids.push(format!("syn{class:04}_{vj:06}"));
                swaps.insert(j, vi);
            }
        }
        let got_ids: Vec<String> = got.iter().map(|e| e.id.clone()).collect();
        assert_eq!(got_ids, want_ids);
    }

    #[test]
    fn class_aware_divisibility_is_checked() {
        let labels = vec![0, 0, 1, 1, 2, 2];
        assert!(matches!(
            ClassAwareBatches::new(&labels, 3, 10, 3, 0),
            Err(Error::BatchDivisibility { .. })
        ));
    }

    #[test]
    fn one_instance_per_class_when_quota_is_one() {
        let labels = vec![0, 0, 1, 1, 2, 2, 3, 3];
        let mut batches = ClassAwareBatches::new(&labels, 4, 4, 4, 3).unwrap();
        let batch = batches.next().unwrap();
        assert_eq!(batch.len(), 4);
        let mut seen: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3], "quota one must cover distinct classes");
    }

    #[test]
    fn undersized_class_is_padded_with_replacement() {
        // Class 1 holds a single example but the per-class quota is 3.
        let labels = vec![0, 0, 0, 1];
        let mut batches = ClassAwareBatches::new(&labels, 2, 6, 2, 9).unwrap();
        for _ in 0..20 {
            let batch = batches.next().unwrap();
            assert_eq!(batch.len(), 6);
            let ones = batch.iter().filter(|&&i| labels[i] == 1).count();
            assert!(ones == 0 || ones == 3, "quota must be exact");
            if ones == 3 {
                assert!(batch.iter().filter(|&&i| i == 3).count() == 3);
            }
        }
    }

    #[test]
    fn batch_stream_matches_reference_seeded_draw() {
        let labels = vec![0, 0, 1, 1, 1, 2];
        let k = 3;
        let (batch_size, cpb) = (4, 2);
        let seed = 21;
        let got: Vec<Vec<usize>> = ClassAwareBatches::new(&labels, k, batch_size, cpb, seed)
            .unwrap()
            .take(5)
            .collect();

        // Reference: identical procedure, written out.
        let class_indices: Vec<Vec<usize>> = vec![vec![0, 1], vec![2, 3, 4], vec![5]];
        let mut rng = stream(seed, "batches.class_aware");
        let quota = batch_size / cpb;
        let mut want = Vec::new();
        for _ in 0..5 {
            let mut classes: Vec<usize> = (0..k).collect();
            for i in 0..cpb {
                let j = rng.gen_range(i..k);
                classes.swap(i, j);
            }
            let mut batch = Vec::new();
            for &class in &classes[..cpb] {
                let pool = &class_indices[class];
                if pool.len() >= quota {
                    let mut scratch: Vec<usize> = (0..pool.len()).collect();
                    for i in 0..quota {
                        let j = rng.gen_range(i..pool.len());
                        scratch.swap(i, j);
                        batch.push(pool[scratch[i]]);
                    }
                } else {
                    for _ in 0..quota {
                        batch.push(pool[rng.gen_range(0..pool.len())]);
                    }
                }
            }
            want.push(batch);
        }
        assert_eq!(got, want);
    }

    #[test]
    fn class_appearance_is_uniform_chi_squared() {
        // 10⁴ batches over K=10 classes; χ² against uniform must stay below
        // the 0.99 quantile at df=9 (21.666), i.e. p > 0.01.
        let k = 10;
        let labels: Vec<usize> = (0..k).flat_map(|c| std::iter::repeat_n(c, 3)).collect();
        let batches = ClassAwareBatches::new(&labels, k, 4, 2, 31).unwrap();
        let mut appearances = vec![0usize; k];
        let total_batches = 10_000;
        for batch in batches.take(total_batches) {
            let mut classes: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            classes.dedup();
            for c in classes {
                appearances[c] += 1;
            }
        }
        let expected = (total_batches * 2) as f64 / k as f64;
        let chi2: f64 = appearances
            .iter()
            .map(|&obs| {
                let d = obs as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(chi2 < 21.666, "χ² = {chi2} too large; appearances {appearances:?}");
    }

    #[test]
    fn shuffled_batches_cover_everything_once() {
        let mut rng = stream(5, "test-shuffle");
        let batches = shuffled_batches(10, 3, &mut rng);
        let mut seen: Vec<usize> = batches.into_iter().flatten().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn csv_source_loads_and_curates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let mut text = String::from("# id,class,features\n");
        for class in 0..4 {
            for i in 0..12 {
                text.push_str(&format!(
                    "ex{class}_{i},{class},{},{}\n",
                    class as f64 + i as f64 * 0.1,
                    -(class as f64)
                ));
            }
        }
        std::fs::write(&path, text).unwrap();
        let source = CsvSource::load(&path).unwrap();
        assert_eq!(source.num_classes(), 4);
        assert_eq!(source.pool_len(2), 12);
        let (id, input) = source.fetch(1, 3);
        assert_eq!(id, "ex1_3");
        assert_eq!(input, vec![1.3, -1.0]);
        assert_eq!(source.fetch_by_id("ex1_3"), Some(vec![1.3, -1.0]));
        assert_eq!(source.fetch_by_id("nope"), None);

        let cfg = cfg_with(&[
            ("num_classes", "3"),
            ("open_classes", "1"),
            ("n_max", "5"),
            ("n_min", "2"),
            ("val_per_class", "2"),
            ("test_per_class", "3"),
            ("open_per_class", "4"),
            ("input_dim", "2"),
            ("seed", "2"),
        ]);
        let data = pareto_longtail_split(&source, &cfg).unwrap();
        assert_eq!(data.train.len(), data.class_counts.iter().sum::<usize>());
        assert_eq!(data.test_open.len(), 4);
    }

    #[test]
    fn csv_source_class_too_small_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("small.csv");
        std::fs::write(&path, "a,0,1.0\nb,0,2.0\nc,1,3.0\n").unwrap();
        let source = CsvSource::load(&path).unwrap();
        let cfg = cfg_with(&[
            ("num_classes", "2"),
            ("open_classes", "0"),
            ("n_max", "2"),
            ("n_min", "1"),
            ("val_per_class", "1"),
            ("test_per_class", "1"),
            ("input_dim", "1"),
        ]);
        let err = pareto_longtail_split(&source, &cfg).unwrap_err();
        assert!(matches!(err, Error::ClassTooSmall { .. }), "got {err}");
    }

    #[test]
    fn csv_source_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "id,notaclass,1.0\n").unwrap();
        assert!(CsvSource::load(&path).is_err());
        assert!(CsvSource::load(&dir.path().join("missing.csv")).is_err());
    }

    #[test]
    fn manifest_roundtrip_preserves_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.manifest");
        let header = ManifestHeader {
            split: "train".into(),
            k: 4,
            alpha: 6.0,
            n_max: 20,
            n_min: 2,
            seed: 3,
            version: MANIFEST_VERSION,
        };
        let examples = [
            LabeledExample::new("syn0001_000002", vec![1.0], Label::Known(1)),
            LabeledExample::new("syn0003_000007", vec![2.0], Label::Open),
        ];
        let refs: Vec<&LabeledExample> = examples.iter().collect();
        write_manifest(&path, &header, &refs).unwrap();
        let (h, rows) = read_manifest(&path).unwrap();
        assert_eq!(h, header);
        assert_eq!(rows[0], ("syn0001_000002".to_string(), Label::Known(1)));
        assert_eq!(rows[1], ("syn0003_000007".to_string(), Label::Open));
    }

    #[test]
    fn split_reloads_identically_through_manifest() {
        let cfg = bench_cfg();
        let source = SyntheticSource::from_config(&cfg);
        let data = pareto_longtail_split(&source, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.manifest");
        let header = ManifestHeader {
            split: "train".into(),
            k: cfg.num_classes,
            alpha: cfg.pareto_alpha,
            n_max: cfg.n_max,
            n_min: cfg.n_min,
            seed: cfg.seed,
            version: MANIFEST_VERSION,
        };
        let refs: Vec<&LabeledExample> = data.train.iter().collect();
        write_manifest(&path, &header, &refs).unwrap();
        let reloaded = load_split(&source, &path).unwrap();
        assert_eq!(reloaded, data.train);
    }
}
