//! Synthetic two-modality identity data.
//!
//! Each class has a Gaussian prototype. Modality A observes the prototype
//! directly; modality B observes it through a fixed random affine map. Both
//! add isotropic noise whose scale sets how hard each modality is.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::seeded;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    A,
    B,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::A => "A",
            Modality::B => "B",
        })
    }
}

impl FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "A" | "a" => Ok(Modality::A),
            "B" | "b" => Ok(Modality::B),
            other => Err(format!("unknown modality `{other}`")),
        }
    }
}

fn default_gap() -> f64 {
    0.5
}

fn default_prototype_scale() -> f64 {
    1.0
}

/// Generator settings for a two-modality dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySpec {
    pub num_classes: usize,
    pub dim: usize,
    /// Samples per class in each modality.
    pub samples_per_class: usize,
    /// Noise standard deviation for modality A.
    pub noise_a: f64,
    /// Noise standard deviation for modality B.
    pub noise_b: f64,
    /// 0 makes modality B identical in geometry to A; 1 applies a full random rotation.
    #[serde(default = "default_gap")]
    pub modality_gap: f64,
    /// Standard deviation of prototype coordinates.
    #[serde(default = "default_prototype_scale")]
    pub prototype_scale: f64,
    pub seed: u64,
}

impl ModalitySpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("dataset.num_classes", "must be at least 2"));
        }
        if self.dim == 0 {
            return Err(Error::config("dataset.dim", "must be at least 1"));
        }
        if self.samples_per_class == 0 {
            return Err(Error::config(
                "dataset.samples_per_class",
                "must be at least 1",
            ));
        }
        for (name, v) in [
            ("dataset.noise_a", self.noise_a),
            ("dataset.noise_b", self.noise_b),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, "must be a finite nonnegative value"));
            }
        }
        if !(0.0..=1.0).contains(&self.modality_gap) {
            return Err(Error::config("dataset.modality_gap", "must lie in [0,1]"));
        }
        if !(self.prototype_scale > 0.0) {
            return Err(Error::config("dataset.prototype_scale", "must be positive"));
        }
        Ok(())
    }
}

/// Feature rows with class labels and modality tags.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
    modalities: Vec<Modality>,
}

impl Dataset {
    pub fn new(
        dim: usize,
        features: Vec<f64>,
        labels: Vec<usize>,
        modalities: Vec<Modality>,
    ) -> Result<Self> {
        if labels.len() != modalities.len() || features.len() != labels.len() * dim {
            return Err(Error::Argument(format!(
                "inconsistent dataset: {} values, {} labels, {} modality tags, width {dim}",
                features.len(),
                labels.len(),
                modalities.len()
            )));
        }
        Ok(Dataset {
            dim,
            features,
            labels,
            modalities,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn modalities(&self) -> &[Modality] {
        &self.modalities
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Feature matrix for the given rows.
    pub fn features(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor::matrix(idx.len(), self.dim, data).expect("row-major layout")
    }

    pub fn labels_of(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn indices_of(&self, modality: Modality) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.modalities[i] == modality)
            .collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            features.extend_from_slice(self.row(i));
        }
        Dataset {
            dim: self.dim,
            features,
            labels: self.labels_of(idx),
            modalities: idx.iter().map(|&i| self.modalities[i]).collect(),
        }
    }

    /// Errors unless every class present has samples in both modalities.
    pub fn check_cross_modal(&self) -> Result<()> {
        let mut seen: BTreeMap<usize, (bool, bool)> = BTreeMap::new();
        for (l, m) in self.labels.iter().zip(&self.modalities) {
            let e = seen.entry(*l).or_default();
            match m {
                Modality::A => e.0 = true,
                Modality::B => e.1 = true,
            }
        }
        match seen.iter().find(|(_, (a, b))| !(*a && *b)) {
            Some((c, _)) => Err(Error::Argument(format!(
                "class {c} is missing from one modality"
            ))),
            None => Ok(()),
        }
    }
}

fn random_orthogonal(dim: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while basis.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

struct ModalityMap {
    matrix: Vec<Vec<f64>>,
    offset: Vec<f64>,
}

impl ModalityMap {
    fn sample(spec: &ModalitySpec) -> Self {
        let mut rng = seeded(spec.seed, 2);
        let d = spec.dim;
        let rot = random_orthogonal(d, &mut rng);
        let scale = rng.random_range(0.8..1.25);
        let gap = spec.modality_gap;
        let matrix = (0..d)
            .map(|i| {
                (0..d)
                    .map(|j| {
                        scale * ((1.0 - gap) * if i == j { 1.0 } else { 0.0 } + gap * rot[i][j])
                    })
                    .collect()
            })
            .collect();
        let offset = (0..d)
            .map(|_| gap * spec.prototype_scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        ModalityMap { matrix, offset }
    }

    fn apply(&self, p: &[f64]) -> Vec<f64> {
        self.matrix
            .iter()
            .zip(&self.offset)
            .map(|(row, o)| row.iter().zip(p).map(|(m, x)| m * x).sum::<f64>() + o)
            .collect()
    }
}

fn generate_with(spec: &ModalitySpec, per_class: usize) -> Result<Dataset> {
    spec.validate()?;
    let proto_dist =
        Normal::new(0.0, spec.prototype_scale).map_err(|e| Error::Argument(e.to_string()))?;
    let mut rng = seeded(spec.seed, 1);
    let prototypes: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| (0..spec.dim).map(|_| proto_dist.sample(&mut rng)).collect())
        .collect();
    let map_b = ModalityMap::sample(spec);
    let mut rng = seeded(spec.seed, 3);
    let n = spec.num_classes * per_class * 2;
    let mut features = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    let mut modalities = Vec::with_capacity(n);
    for (class, proto) in prototypes.iter().enumerate() {
        let centers = [
            (Modality::A, proto.clone(), spec.noise_a),
            (Modality::B, map_b.apply(proto), spec.noise_b),
        ];
        for (modality, center, sigma) in centers {
            for _ in 0..per_class {
                features.extend(
                    center
                        .iter()
                        .map(|c| c + sigma * rng.sample::<f64, _>(StandardNormal)),
                );
                labels.push(class);
                modalities.push(modality);
            }
        }
    }
    Dataset::new(spec.dim, features, labels, modalities)
}

/// Generates `samples_per_class` samples per class and modality. Deterministic per seed.
pub fn generate(spec: &ModalitySpec) -> Result<Dataset> {
    generate_with(spec, spec.samples_per_class)
}

/// Train and held-out sets drawn from the same prototypes and modality map.
pub fn generate_split(spec: &ModalitySpec, test_per_class: usize) -> Result<(Dataset, Dataset)> {
    let per = spec.samples_per_class;
    let all = generate_with(spec, per + test_per_class)?;
    let block = per + test_per_class;
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for i in 0..all.len() {
        if i % block < per {
            train.push(i);
        } else {
            test.push(i);
        }
    }
    Ok((all.subset(&train), all.subset(&test)))
}

/// A cross-modal verification pair: modality-A row, modality-B row, same identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pair {
    pub a: usize,
    pub b: usize,
    pub same: bool,
}

/// Balanced positive/negative cross-modal pairs. Deterministic per seed.
pub fn make_pairs(data: &Dataset, n_pairs: usize, seed: u64) -> Result<Vec<Pair>> {
    if !n_pairs.is_multiple_of(2) {
        return Err(Error::Argument(format!(
            "pair count {n_pairs} must be even"
        )));
    }
    data.check_cross_modal()?;
    let mut by_class: BTreeMap<usize, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for i in 0..data.len() {
        let e = by_class.entry(data.labels[i]).or_default();
        match data.modalities[i] {
            Modality::A => e.0.push(i),
            Modality::B => e.1.push(i),
        }
    }
    if n_pairs > 0 && by_class.len() < 2 {
        return Err(Error::Argument(
            "negative pairs need at least two classes".into(),
        ));
    }
    let classes: Vec<&(Vec<usize>, Vec<usize>)> = by_class.values().collect();
    let all_a = data.indices_of(Modality::A);
    let all_b = data.indices_of(Modality::B);
    let mut rng = seeded(seed, 0x9a1);
    let mut pairs = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs / 2 {
        let (a_rows, b_rows) = classes[rng.random_range(0..classes.len())];
        let a = a_rows[rng.random_range(0..a_rows.len())];
        let b = b_rows[rng.random_range(0..b_rows.len())];
        pairs.push(Pair { a, b, same: true });
    }
    for _ in 0..n_pairs / 2 {
        let a = all_a[rng.random_range(0..all_a.len())];
        let b = loop {
            let b = all_b[rng.random_range(0..all_b.len())];
            if data.labels[b] != data.labels[a] {
                break b;
            }
        };
        pairs.push(Pair { a, b, same: false });
    }
    pairs.shuffle(&mut rng);
    Ok(pairs)
}

/// Partitions row indices into `k` folds, stratified by class and modality.
pub fn kfold_split(data: &Dataset, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::Argument(format!("k-fold needs k >= 2, got {k}")));
    }
    if k > data.len() {
        return Err(Error::Argument(format!(
            "{k} folds for {} samples",
            data.len()
        )));
    }
    let mut groups: BTreeMap<(usize, Modality), Vec<usize>> = BTreeMap::new();
    for i in 0..data.len() {
        groups
            .entry((data.labels[i], data.modalities[i]))
            .or_default()
            .push(i);
    }
    let mut rng = seeded(seed, 0xf01d);
    let mut folds = vec![Vec::new(); k];
    let mut slot = 0;
    for rows in groups.values_mut() {
        rows.shuffle(&mut rng);
        for &i in rows.iter() {
            folds[slot % k].push(i);
            slot += 1;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Column names used to read and write datasets as CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub feature_columns: Vec<String>,
    pub label_column: String,
    pub modality_column: String,
}

impl CsvSchema {
    /// `f0..f{dim-1}`, `label`, `modality`.
    pub fn default_for(dim: usize) -> Self {
        CsvSchema {
            feature_columns: (0..dim).map(|i| format!("f{i}")).collect(),
            label_column: "label".into(),
            modality_column: "modality".into(),
        }
    }
}

/// Reads the header of `path`: every column other than `label` and
/// `modality` is a feature.
pub fn infer_schema(path: &Path) -> Result<CsvSchema> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?;
    let mut schema = CsvSchema::default_for(0);
    schema.feature_columns = headers
        .iter()
        .filter(|h| *h != schema.label_column && *h != schema.modality_column)
        .map(String::from)
        .collect();
    Ok(schema)
}

pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(name.to_string()))
    };
    let feature_idx = schema
        .feature_columns
        .iter()
        .map(|c| column(c))
        .collect::<Result<Vec<_>>>()?;
    let label_idx = column(&schema.label_column)?;
    let modality_idx = column(&schema.modality_column)?;

    let (mut features, mut labels, mut modalities) = (Vec::new(), Vec::new(), Vec::new());
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let row = record.position().map_or(0, |p| p.line() as usize);
        let cell = |i: usize| record.get(i).unwrap_or("").trim();
        for &i in &feature_idx {
            let v: f64 = cell(i).parse().map_err(|_| Error::Parse {
                row,
                message: format!("feature `{}` is not a number: `{}`", &headers[i], cell(i)),
            })?;
            features.push(v);
        }
        labels.push(cell(label_idx).parse().map_err(|_| Error::Parse {
            row,
            message: format!("label `{}` is not a class index", cell(label_idx)),
        })?);
        modalities.push(
            cell(modality_idx)
                .parse()
                .map_err(|message| Error::Parse { row, message })?,
        );
    }
    Dataset::new(feature_idx.len(), features, labels, modalities)
}

pub fn write_csv(data: &Dataset, path: &Path, schema: &CsvSchema) -> Result<()> {
    if schema.feature_columns.len() != data.dim() {
        return Err(Error::Argument(format!(
            "{} feature columns for width {}",
            schema.feature_columns.len(),
            data.dim()
        )));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = schema.feature_columns.clone();
    header.push(schema.label_column.clone());
    header.push(schema.modality_column.clone());
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for i in 0..data.len() {
        let mut rec: Vec<String> = data.row(i).iter().map(|x| x.to_string()).collect();
        rec.push(data.labels[i].to_string());
        rec.push(data.modalities[i].to_string());
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let row = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            row,
            message: format!("{other:?}"),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(noise: f64, seed: u64) -> ModalitySpec {
        ModalitySpec {
            num_classes: 5,
            dim: 6,
            samples_per_class: 8,
            noise_a: noise,
            noise_b: noise,
            modality_gap: 0.5,
            prototype_scale: 1.0,
            seed,
        }
    }

    fn nearest_prototype_accuracy(train: &Dataset, test: &Dataset, modality: Modality) -> f64 {
        let k = train.num_classes();
        let d = train.dim();
        let mut means = vec![vec![0.0; d]; k];
        let mut counts = vec![0.0; k];
        for i in train.indices_of(modality) {
            counts[train.labels()[i]] += 1.0;
            for (m, x) in means[train.labels()[i]].iter_mut().zip(train.row(i)) {
                *m += x;
            }
        }
        for (m, c) in means.iter_mut().zip(&counts) {
            m.iter_mut().for_each(|x| *x /= c);
        }
        let rows = test.indices_of(modality);
        let hits = rows
            .iter()
            .filter(|&&i| {
                let dist = |m: &Vec<f64>| {
                    m.iter()
                        .zip(test.row(i))
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>()
                };
                let best = (0..k)
                    .min_by(|&a, &b| dist(&means[a]).total_cmp(&dist(&means[b])))
                    .unwrap();
                best == test.labels()[i]
            })
            .count();
        hits as f64 / rows.len() as f64
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(
            generate(&spec(0.5, 3)).unwrap(),
            generate(&spec(0.5, 3)).unwrap()
        );
        assert_ne!(
            generate(&spec(0.5, 3)).unwrap(),
            generate(&spec(0.5, 4)).unwrap()
        );
    }

    #[test]
    fn every_class_in_both_modalities() {
        let d = generate(&spec(0.5, 3)).unwrap();
        assert_eq!(d.len(), 5 * 8 * 2);
        d.check_cross_modal().unwrap();
    }

    #[test]
    fn noiseless_data_is_separable() {
        let (train, test) = generate_split(&spec(0.0, 9), 4).unwrap();
        for m in [Modality::A, Modality::B] {
            assert_eq!(nearest_prototype_accuracy(&train, &test, m), 1.0);
        }
    }

    #[test]
    fn difficulty_is_monotone_in_noise() {
        let sigmas = [0.1, 0.5, 1.0, 2.0];
        let mut means = Vec::new();
        for &s in &sigmas {
            let mut total = 0.0;
            for seed in 0..10 {
                let mut sp = spec(s, seed);
                sp.samples_per_class = 20;
                let (train, test) = generate_split(&sp, 20).unwrap();
                total += nearest_prototype_accuracy(&train, &test, Modality::A);
            }
            means.push(total / 10.0);
        }
        for w in means.windows(2) {
            assert!(w[1] <= w[0], "{means:?}");
        }
        assert!(means[3] < means[0]);
    }

    #[test]
    fn pairs_are_balanced_and_consistent() {
        let d = generate(&spec(0.5, 1)).unwrap();
        let pairs = make_pairs(&d, 100, 7).unwrap();
        assert_eq!(pairs.len(), 100);
        assert_eq!(pairs.iter().filter(|p| p.same).count(), 50);
        for p in &pairs {
            assert_eq!(d.modalities()[p.a], Modality::A);
            assert_eq!(d.modalities()[p.b], Modality::B);
            assert_eq!(p.same, d.labels()[p.a] == d.labels()[p.b]);
        }
        assert_eq!(pairs, make_pairs(&d, 100, 7).unwrap());
        assert!(make_pairs(&d, 7, 7).is_err());
    }

    #[test]
    fn folds_partition_the_rows() {
        let mut sp = spec(0.5, 1);
        sp.samples_per_class = 10;
        let d = generate(&sp).unwrap();
        assert_eq!(d.len(), 100);
        let folds = kfold_split(&d, 10, 3).unwrap();
        let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert!(folds.iter().all(|f| f.len() == 10));
        assert_eq!(folds, kfold_split(&d, 10, 3).unwrap());
        let odd = kfold_split(&d, 7, 3).unwrap();
        let (lo, hi) = (
            odd.iter().map(Vec::len).min().unwrap(),
            odd.iter().map(Vec::len).max().unwrap(),
        );
        assert!(hi - lo <= 1);
        assert!(kfold_split(&d.subset(&[0, 1, 2]), 4, 0).is_err());
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate(&spec(0.7, 2)).unwrap();
        let schema = CsvSchema::default_for(d.dim());
        let path = dir.path().join("d.csv");
        write_csv(&d, &path, &schema).unwrap();
        assert_eq!(load_csv(&path, &schema).unwrap(), d);

        let empty = dir.path().join("empty.csv");
        std::fs::write(&empty, "f0,label,modality\n").unwrap();
        let e = load_csv(&empty, &CsvSchema::default_for(1)).unwrap();
        assert!(e.is_empty());

        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "f0,label,modality\n1.5,0,A\n2.5,xyz,B\n").unwrap();
        match load_csv(&bad, &CsvSchema::default_for(1)) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 3),
            other => panic!("{other:?}"),
        }
        let missing = CsvSchema {
            label_column: "identity".into(),
            ..CsvSchema::default_for(1)
        };
        match load_csv(&bad, &missing) {
            Err(Error::Schema(c)) => assert_eq!(c, "identity"),
            other => panic!("{other:?}"),
        }
    }
}
