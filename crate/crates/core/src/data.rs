//! Datasets, the synthetic quadrant task, CSV ingestion and non-IID
//! partitioning across clients.

use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::distr::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::Gamma;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub xs: Array2<f64>,
    pub ys: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(xs: Array2<f64>, ys: Vec<usize>, num_classes: usize) -> Result<Self> {
        if xs.nrows() != ys.len() {
            return Err(Error::shape("dataset labels", xs.nrows(), ys.len()));
        }
        if ys.is_empty() {
            return Err(Error::Dataset("no examples".into()));
        }
        if let Some(&y) = ys.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Dataset(format!(
                "label {y} outside [0, {num_classes})"
            )));
        }
        Ok(Dataset {
            xs,
            ys,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.xs.ncols()
    }

    pub fn x(&self) -> ArrayView2<'_, f64> {
        self.xs.view()
    }

    /// Rows at `indices`, in that order. May be empty.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            xs: self.xs.select(Axis(0), indices),
            ys: indices.iter().map(|&i| self.ys[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.ys {
            counts[y] += 1;
        }
        counts
    }

    /// Stacks datasets row-wise.
    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dataset("no datasets to concatenate".into()))?;
        let views: Vec<_> = parts.iter().map(|d| d.xs.view()).collect();
        let xs = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::Dataset(format!("cannot concatenate: {e}")))?;
        let ys = parts.iter().flat_map(|d| d.ys.iter().copied()).collect();
        Dataset::new(xs, ys, first.num_classes)
    }
}

/// Quadrant label of a 2-D point: I → 0, II → 1, III → 2, IV → 3.
pub fn quadrant(x: f64, y: f64) -> usize {
    match (x >= 0.0, y >= 0.0) {
        (true, true) => 0,
        (false, true) => 1,
        (false, false) => 2,
        (true, false) => 3,
    }
}

/// `n` points uniform in the open square (−4, 4)², labelled by quadrant.
pub fn gen_toy_dataset(n: usize, seed: u64) -> Result<Dataset> {
    gen_toy_with_stream(n, seed, Stream::ToyTrain)
}

pub(crate) fn gen_toy_with_stream(n: usize, seed: u64, stream: Stream) -> Result<Dataset> {
    if n < 4 {
        return Err(Error::InvalidArgument(format!(
            "toy dataset needs at least 4 points, got {n}"
        )));
    }
    let mut rng = stream_rng(seed, stream, &[]);
    let coord = Uniform::new(-4.0f64, 4.0).expect("finite bounds");
    let mut xs = Array2::zeros((n, 2));
    let mut ys = Vec::with_capacity(n);
    for mut row in xs.rows_mut() {
        let mut sample = || loop {
            let v = coord.sample(&mut rng);
            if v > -4.0 {
                break v;
            }
        };
        let (a, b) = (sample(), sample());
        row[0] = a;
        row[1] = b;
        ys.push(quadrant(a, b));
    }
    Dataset::new(xs, ys, 4)
}

/// Reads rows of feature columns followed by one integer label column. A
/// first row that is not entirely numeric is taken as a header and skipped.
pub fn load_csv_dataset(path: &Path, num_classes: usize) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Dataset(format!("{other:?}")),
        })?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut values = Vec::new();
    let mut ys = Vec::new();
    let mut width = None;
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if i == 0 && record.iter().any(|f| f.parse::<f64>().is_err()) {
            continue;
        }
        if record.len() < 2 {
            return Err(parse_err(line, "need at least one feature and a label".into()));
        }
        let features = record.len() - 1;
        match width {
            None => width = Some(features),
            Some(w) if w != features => {
                return Err(parse_err(
                    line,
                    format!("expected {w} feature columns, found {features}"),
                ))
            }
            _ => {}
        }
        for (col, field) in record.iter().take(features).enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(line, format!("column {}: `{field}` is not a number", col + 1)))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("column {}: non-finite value", col + 1)));
            }
            values.push(v);
        }
        let label_field = &record[features];
        let label: usize = label_field
            .parse()
            .map_err(|_| parse_err(line, format!("label `{label_field}` is not a class index")))?;
        if label >= num_classes {
            return Err(parse_err(
                line,
                format!("label {label} outside [0, {num_classes})"),
            ));
        }
        ys.push(label);
    }
    let Some(width) = width else {
        return Err(Error::Dataset(format!("{}: no examples", path.display())));
    };
    let xs = Array2::from_shape_vec((ys.len(), width), values).expect("row widths checked");
    Dataset::new(xs, ys, num_classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub alpha: f64,
    pub num_clients: usize,
    pub seed: u64,
    pub val_fraction: f64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("partition.alpha", "must be positive"));
        }
        if self.num_clients == 0 {
            return Err(Error::config("federation.num_clients", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::config("partition.val_fraction", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub client_id: usize,
    pub train: Dataset,
    pub val: Option<Dataset>,
    /// Source-dataset row of every training example.
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

impl ClientShard {
    pub fn n_k(&self) -> usize {
        self.train.len()
    }

    /// Shard holding the given rows of `ds` as training data.
    pub fn from_indices(ds: &Dataset, client_id: usize, indices: Vec<usize>) -> Self {
        ClientShard {
            client_id,
            train: ds.select(&indices),
            val: None,
            train_indices: indices,
            val_indices: Vec::new(),
        }
    }
}

fn dirichlet_sample<R: Rng>(alpha: f64, k: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        draws.into_iter().map(|g| g / sum).collect()
    } else {
        // every draw underflowed: all mass on one client
        let mut p = vec![0.0; k];
        p[rng.random_range(0..k)] = 1.0;
        p
    }
}

/// Splits `total` items by `proportions` with the largest-remainder method.
/// Ties go to the lower index.
pub fn largest_remainder(proportions: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = proportions.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Per-class Dirichlet partition. For each class, proportions are drawn from
/// `Dir(α·1_K)` and that class's (shuffled) examples are dealt to clients by
/// largest-remainder rounding. Empty shards then take one example from the
/// currently largest shard. A nonzero `val_fraction` finally carves a
/// validation split out of every shard.
pub fn dirichlet_partition(ds: &Dataset, spec: &PartitionSpec) -> Result<Vec<ClientShard>> {
    spec.validate()?;
    let k = spec.num_clients;
    if k > ds.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot split {} examples across {k} clients",
            ds.len()
        )));
    }
    let mut rng = stream_rng(spec.seed, Stream::Partition, &[]);
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
    for (i, &y) in ds.ys.iter().enumerate() {
        per_class[y].push(i);
    }
    let mut assignment: Vec<Vec<usize>> = vec![Vec::new(); k];
    for mut members in per_class {
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng);
        let proportions = dirichlet_sample(spec.alpha, k, &mut rng);
        let counts = largest_remainder(&proportions, members.len());
        let mut start = 0;
        for (client, &c) in counts.iter().enumerate() {
            assignment[client].extend_from_slice(&members[start..start + c]);
            start += c;
        }
    }
    for shard in &mut assignment {
        shard.sort_unstable();
    }
    while let Some(empty) = assignment.iter().position(Vec::is_empty) {
        let largest = (0..k)
            .max_by(|&a, &b| assignment[a].len().cmp(&assignment[b].len()).then(b.cmp(&a)))
            .expect("k >= 1");
        let moved = assignment[largest].pop().expect("largest shard nonempty");
        assignment[empty].push(moved);
    }
    assignment
        .into_iter()
        .enumerate()
        .map(|(id, indices)| {
            let shard = ClientShard::from_indices(ds, id, indices);
            if spec.val_fraction > 0.0 {
                let seed = crate::rng::derive_seed(spec.seed, Stream::Split, &[id as u64]);
                train_val_split(&shard, spec.val_fraction, seed)
            } else {
                Ok(shard)
            }
        })
        .collect()
}

/// Moves `⌈fraction·n_k⌉` randomly chosen training examples into a
/// validation split.
pub fn train_val_split(shard: &ClientShard, fraction: f64, seed: u64) -> Result<ClientShard> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!(
            "validation fraction {fraction} outside [0, 1)"
        )));
    }
    if fraction == 0.0 {
        return Ok(shard.clone());
    }
    let n = shard.train_indices.len();
    if n == 0 {
        return Err(Error::InvalidArgument(format!("client {} has no training data to split", shard.client_id)));
    }
    // always keep one training example; a singleton shard gets no validation split
    let n_val = (((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize).min(n - 1);
    let mut positions: Vec<usize> = (0..n).collect();
    positions.shuffle(&mut stream_rng(seed, Stream::Split, &[]));
    let (val_pos, train_pos) = positions.split_at(n_val);
    let mut val_pos = val_pos.to_vec();
    let mut train_pos = train_pos.to_vec();
    val_pos.sort_unstable();
    train_pos.sort_unstable();
    let mut val_indices: Vec<usize> = val_pos.iter().map(|&p| shard.train_indices[p]).collect();
    val_indices.extend_from_slice(&shard.val_indices);
    val_indices.sort_unstable();
    let val = match &shard.val {
        Some(existing) => Dataset::concat(&[&shard.train.select(&val_pos), existing])?,
        None => shard.train.select(&val_pos),
    };
    Ok(ClientShard {
        client_id: shard.client_id,
        train: shard.train.select(&train_pos),
        val: Some(val),
        train_indices: train_pos.iter().map(|&p| shard.train_indices[p]).collect(),
        val_indices,
    })
}

/// Total-variation distance between two count vectors viewed as
/// distributions.
pub fn tv_distance(a: &[usize], b: &[usize]) -> f64 {
    let sa: usize = a.iter().sum();
    let sb: usize = b.iter().sum();
    if sa == 0 || sb == 0 {
        return 0.0;
    }
    0.5 * a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 / sa as f64 - y as f64 / sb as f64).abs())
        .sum::<f64>()
}

/// Largest class-distribution TV distance of any client from the pooled data.
pub fn max_client_tv(ds: &Dataset, shards: &[ClientShard]) -> f64 {
    let global = ds.class_counts();
    shards
        .iter()
        .map(|s| {
            let mut counts = s.train.class_counts();
            if let Some(v) = &s.val {
                for (c, extra) in counts.iter_mut().zip(v.class_counts()) {
                    *c += extra;
                }
            }
            tv_distance(&counts, &global)
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientAudit {
    pub client_id: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub train_class_counts: Vec<usize>,
    pub val_class_counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionAudit {
    pub alpha: f64,
    pub num_clients: usize,
    pub num_classes: usize,
    pub max_tv_distance: f64,
    pub clients: Vec<ClientAudit>,
}

impl PartitionAudit {
    pub fn new(ds: &Dataset, spec: &PartitionSpec, shards: &[ClientShard]) -> Self {
        PartitionAudit {
            alpha: spec.alpha,
            num_clients: shards.len(),
            num_classes: ds.num_classes,
            max_tv_distance: max_client_tv(ds, shards),
            clients: shards
                .iter()
                .map(|s| ClientAudit {
                    client_id: s.client_id,
                    n_train: s.n_k(),
                    n_val: s.val.as_ref().map_or(0, Dataset::len),
                    train_class_counts: s.train.class_counts(),
                    val_class_counts: s
                        .val
                        .as_ref()
                        .map_or_else(|| vec![0; ds.num_classes], Dataset::class_counts),
                })
                .collect(),
        }
    }
}
