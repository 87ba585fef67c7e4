//! Synthetic datasets and client partitioning (IID and the non-IID "mixed" scheme).

use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Batch;

/// Feature matrix, labels and the size of the label space.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl LabeledDataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::Structural(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::Structural(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(LabeledDataset {
            features,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Rows at `indices`, in that order, as a new dataset.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }

    /// Rows at `indices` as a batch. `indices` must be nonempty.
    pub fn select(&self, indices: &[usize]) -> Batch {
        Batch {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// The whole dataset as one batch.
    pub fn to_batch(&self) -> Batch {
        Batch {
            features: self.features.clone(),
            labels: self.labels.clone(),
        }
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Concatenates datasets sharing a dimension and class count.
    pub fn concat(parts: &[&LabeledDataset]) -> Result<LabeledDataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Structural("nothing to concatenate".into()))?;
        let views: Vec<_> = parts.iter().map(|p| p.features.view()).collect();
        let features = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::Structural(e.to_string()))?;
        let labels = parts.iter().flat_map(|p| p.labels.iter().copied()).collect();
        LabeledDataset::new(features, labels, first.class_count)
    }
}

/// Gaussian blobs: one unit-norm mean per class, isotropic noise of scale `spread`.
///
/// Rows come out grouped by class (`per_class` rows of class 0, then class 1, ...).
pub fn gen_synthetic<R: Rng + ?Sized>(
    class_count: usize,
    dim: usize,
    per_class: usize,
    spread: f64,
    rng: &mut R,
) -> Result<LabeledDataset> {
    if class_count < 2 {
        return Err(Error::config("data.class_count", "need at least 2 classes"));
    }
    if per_class == 0 || dim == 0 {
        return Err(Error::config("data", "per_class and dim must be positive"));
    }
    let means: Vec<Vec<f64>> = (0..class_count)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    let rows = class_count * per_class;
    let mut features = Array2::zeros((rows, dim));
    let mut labels = Vec::with_capacity(rows);
    for (class, mean) in means.iter().enumerate() {
        for k in 0..per_class {
            let mut row = features.row_mut(class * per_class + k);
            for (x, m) in row.iter_mut().zip(mean) {
                let noise: f64 = StandardNormal.sample(rng);
                *x = m + spread * noise;
            }
            labels.push(class);
        }
    }
    LabeledDataset::new(features, labels, class_count)
}

/// Reads a delimiter-separated file: one example per row, integer label in the
/// last column. Class count is `max label + 1`.
pub fn load_delimited(path: &Path, delimiter: u8) -> Result<LabeledDataset> {
    let parse_err = |reason: String| Error::Parse {
        path: path.to_path_buf(),
        reason,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .delimiter(delimiter)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| parse_err(e.to_string()))?;
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| parse_err(e.to_string()))?;
        if record.len() < 2 {
            return Err(parse_err(format!("row {}: need features and a label", line + 1)));
        }
        let dim = record.len() - 1;
        if *width.get_or_insert(dim) != dim {
            return Err(parse_err(format!("row {}: ragged row", line + 1)));
        }
        for field in record.iter().take(dim) {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(format!("row {}: bad number `{field}`", line + 1)))?;
            values.push(v);
        }
        let label = &record[dim];
        labels.push(
            label
                .parse::<usize>()
                .map_err(|_| parse_err(format!("row {}: bad label `{label}`", line + 1)))?,
        );
    }
    let dim = width.ok_or_else(|| parse_err("no rows".into()))?;
    let class_count = labels.iter().max().map_or(0, |m| m + 1).max(2);
    let features = Array2::from_shape_vec((labels.len(), dim), values)
        .map_err(|e| parse_err(e.to_string()))?;
    LabeledDataset::new(features, labels, class_count)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionScheme {
    #[default]
    Iid,
    NoniidMixed,
}

/// How a dataset is spread over clients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionPlan {
    pub scheme: PartitionScheme,
    /// Shares of clients seeing all classes, half the classes, and two classes.
    pub group_fractions: [f64; 3],
    /// `(mu, sigma)` of the Lognormal law for client data amounts.
    pub size_lognormal: (f64, f64),
    pub train_fraction: f64,
}

impl Default for PartitionPlan {
    fn default() -> Self {
        PartitionPlan {
            scheme: PartitionScheme::Iid,
            group_fractions: [0.5, 0.3, 0.2],
            size_lognormal: (0.0, 2.0),
            train_fraction: 0.9,
        }
    }
}

impl PartitionPlan {
    pub fn noniid_mixed() -> Self {
        PartitionPlan {
            scheme: PartitionScheme::NoniidMixed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::config("partition.group_fractions", "each must lie in [0, 1]"));
        }
        if (self.group_fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("partition.group_fractions", "must sum to 1"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config("partition.train_fraction", "must lie in (0, 1)"));
        }
        let (mu, sigma) = self.size_lognormal;
        if !mu.is_finite() || !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::config("partition.size_lognormal", "need finite mu and sigma >= 0"));
        }
        Ok(())
    }
}

/// One client's local data.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientData {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

impl ClientData {
    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Classes present anywhere in this client's data.
    pub fn classes(&self) -> Vec<usize> {
        let mut seen = vec![false; self.train.class_count];
        for &y in self.train.labels.iter().chain(&self.test.labels) {
            seen[y] = true;
        }
        (0..seen.len()).filter(|&c| seen[c]).collect()
    }
}

/// Every client needs one training and one test example.
pub const MIN_CLIENT_EXAMPLES: usize = 2;

/// Largest-remainder rounding of `weights * total` to integers summing to `total`.
fn apportion(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() {
        return Vec::new();
    }
    if sum <= 0.0 {
        let mut out = vec![total / weights.len(); weights.len()];
        for slot in out.iter_mut().take(total % weights.len()) {
            *slot += 1;
        }
        return out;
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut out: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    // Largest fractional part first; ties by index.
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        out[i] += 1;
    }
    out
}

/// Splits `data` over `clients` clients and then into per-client train/test sets.
pub fn partition<R: Rng + ?Sized>(
    data: &LabeledDataset,
    clients: usize,
    plan: &PartitionPlan,
    rng: &mut R,
) -> Result<Vec<ClientData>> {
    plan.validate()?;
    if clients == 0 {
        return Err(Error::config("num_clients", "need at least one client"));
    }
    if data.len() < clients * MIN_CLIENT_EXAMPLES {
        return Err(Error::config(
            "data",
            format!(
                "{} examples cannot give {clients} clients {MIN_CLIENT_EXAMPLES} each",
                data.len()
            ),
        ));
    }
    let assignment = match plan.scheme {
        PartitionScheme::Iid => assign_iid(data, clients, rng),
        PartitionScheme::NoniidMixed => assign_mixed(data, clients, plan, rng)?,
    };
    assignment
        .into_iter()
        .enumerate()
        .map(|(client, rows)| split_train_test(data, client, &rows, plan.train_fraction, rng))
        .collect()
}

fn assign_iid<R: Rng + ?Sized>(data: &LabeledDataset, clients: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let sizes = apportion(&vec![1.0; clients], data.len());
    let mut out = Vec::with_capacity(clients);
    let mut start = 0;
    for size in sizes {
        out.push(order[start..start + size].to_vec());
        start += size;
    }
    out
}

fn assign_mixed<R: Rng + ?Sized>(
    data: &LabeledDataset,
    clients: usize,
    plan: &PartitionPlan,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    let classes = data.class_count;
    let group_sizes = apportion(&plan.group_fractions, clients);
    let subset_sizes = [classes, (classes / 2).max(1), 2.min(classes)];

    // Which clients land in which group.
    let mut ids: Vec<usize> = (0..clients).collect();
    ids.shuffle(rng);
    let mut class_sets: Vec<Vec<usize>> = vec![Vec::new(); clients];
    let mut cursor = 0;
    for (group, &count) in group_sizes.iter().enumerate() {
        for &client in &ids[cursor..cursor + count] {
            let mut set = index::sample(rng, classes, subset_sizes[group]).into_vec();
            set.sort_unstable();
            class_sets[client] = set;
        }
        cursor += count;
    }

    // Amount of data per client: Lognormal weights, normalized, with a floor.
    let (mu, sigma) = plan.size_lognormal;
    let law = LogNormal::new(mu, sigma).map_err(|e| Error::config("partition.size_lognormal", e.to_string()))?;
    let weights: Vec<f64> = (0..clients).map(|_| law.sample(rng)).collect();
    // Each client is owed one row per assigned class, and at least the minimum.
    let floors: Vec<usize> = class_sets.iter().map(|set| set.len().max(MIN_CLIENT_EXAMPLES)).collect();
    let owed: usize = floors.iter().sum();
    if owed > data.len() {
        return Err(Error::config(
            "data",
            format!("{} examples cannot cover the {owed} rows the class assignment needs", data.len()),
        ));
    }
    let targets: Vec<usize> = apportion(&weights, data.len() - owed)
        .into_iter()
        .zip(&floors)
        .map(|(t, f)| t + f)
        .collect();

    // Label-sorted pools; within a class the order is shuffled.
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (row, &y) in data.labels.iter().enumerate() {
        pools[y].push(row);
    }
    for pool in &mut pools {
        pool.shuffle(rng);
    }

    // Narrowest class sets draw first so their classes are still available.
    let mut order: Vec<usize> = (0..clients).collect();
    order.sort_by_key(|&c| (class_sets[c].len(), c));
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); clients];
    // Everyone gets one row of each assigned class (then the minimum) before
    // anyone draws their full target, so one large client cannot drain classes
    // a smaller one depends on.
    for &client in &order {
        for &class in &class_sets[client] {
            if let Some(row) = pools[class].pop() {
                rows[client].push(row);
            }
        }
        while rows[client].len() < MIN_CLIENT_EXAMPLES {
            let fullest = class_sets[client]
                .iter()
                .copied()
                .filter(|&c| !pools[c].is_empty())
                .max_by_key(|&c| (pools[c].len(), std::cmp::Reverse(c)));
            let Some(class) = fullest else { break };
            rows[client].push(pools[class].pop().expect("nonempty pool"));
        }
    }
    for &client in &order {
        let set = &class_sets[client];
        let remaining = targets[client].saturating_sub(rows[client].len());
        let share = apportion(&vec![1.0; set.len()], remaining);
        let mut deficit = 0;
        for (&class, &want) in set.iter().zip(&share) {
            let take = want.min(pools[class].len());
            let start = pools[class].len() - take;
            rows[client].extend(pools[class].drain(start..));
            deficit += want - take;
        }
        // Cover shortfalls from whichever of the client's classes still have rows.
        while deficit > 0 {
            let Some(&class) = set.iter().filter(|&&c| !pools[c].is_empty()).max_by_key(|&&c| pools[c].len()) else {
                break;
            };
            rows[client].push(pools[class].pop().expect("nonempty pool"));
            deficit -= 1;
        }
    }

    // Rows left over after shortfalls go to clients that accept their class,
    // in proportion to their targets.
    for (class, pool) in pools.iter_mut().enumerate() {
        if pool.is_empty() {
            continue;
        }
        let accepting: Vec<usize> = (0..clients).filter(|&c| class_sets[c].contains(&class)).collect();
        if accepting.is_empty() {
            return Err(Error::Partition {
                client: 0,
                reason: format!("no client accepts the {} leftover rows of class {class}", pool.len()),
            });
        }
        let weights: Vec<f64> = accepting.iter().map(|&c| targets[c] as f64).collect();
        let shares = apportion(&weights, pool.len());
        for (&client, &count) in accepting.iter().zip(&shares) {
            let start = pool.len() - count;
            rows[client].extend(pool.drain(start..));
        }
    }

    for (client, r) in rows.iter_mut().enumerate() {
        if r.len() < MIN_CLIENT_EXAMPLES {
            return Err(Error::Partition {
                client,
                reason: format!(
                    "only {} rows available from classes {:?}",
                    r.len(),
                    class_sets[client]
                ),
            });
        }
        r.sort_unstable();
    }
    Ok(rows)
}

/// Stratified per-client split. Classes with a single row on the client stay in
/// training unless no class has two rows.
fn split_train_test<R: Rng + ?Sized>(
    data: &LabeledDataset,
    client: usize,
    rows: &[usize],
    train_fraction: f64,
    rng: &mut R,
) -> Result<ClientData> {
    let n = rows.len();
    if n < MIN_CLIENT_EXAMPLES {
        return Err(Error::Partition {
            client,
            reason: format!("{n} rows cannot be split into train and test"),
        });
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.class_count];
    for &r in rows {
        by_class[data.labels[r]].push(r);
    }
    for group in &mut by_class {
        group.shuffle(rng);
    }
    let test_total = ((n as f64 * (1.0 - train_fraction)).round() as usize).clamp(1, n - 1);

    let eligible: Vec<usize> = (0..data.class_count).filter(|&c| by_class[c].len() >= 2).collect();
    let mut test_counts = vec![0usize; data.class_count];
    if eligible.is_empty() {
        // Only singletons: take whole classes for test, first in shuffled order.
        let mut present: Vec<usize> = (0..data.class_count).filter(|&c| !by_class[c].is_empty()).collect();
        present.shuffle(rng);
        for &c in present.iter().take(test_total) {
            test_counts[c] = 1;
        }
    } else {
        let capacity: usize = eligible.iter().map(|&c| by_class[c].len() - 1).sum();
        let wanted = test_total.min(capacity);
        let weights: Vec<f64> = eligible.iter().map(|&c| by_class[c].len() as f64).collect();
        let mut shares = apportion(&weights, wanted);
        // Respect per-class caps, pushing any excess onto classes with room.
        let mut excess = 0;
        for (k, &c) in eligible.iter().enumerate() {
            let cap = by_class[c].len() - 1;
            if shares[k] > cap {
                excess += shares[k] - cap;
                shares[k] = cap;
            }
        }
        for (k, &c) in eligible.iter().enumerate() {
            let room = by_class[c].len() - 1 - shares[k];
            let add = room.min(excess);
            shares[k] += add;
            excess -= add;
        }
        for (k, &c) in eligible.iter().enumerate() {
            test_counts[c] = shares[k];
        }
    }

    let mut train_rows = Vec::with_capacity(n);
    let mut test_rows = Vec::new();
    for (c, group) in by_class.iter().enumerate() {
        test_rows.extend_from_slice(&group[..test_counts[c]]);
        train_rows.extend_from_slice(&group[test_counts[c]..]);
    }
    train_rows.shuffle(rng);
    test_rows.sort_unstable();
    Ok(ClientData {
        train: data.subset(&train_rows),
        test: data.subset(&test_rows),
    })
}

/// Coefficient of variation of a set of sizes.
pub fn size_cv(sizes: &[usize]) -> f64 {
    let n = sizes.len() as f64;
    let mean = sizes.iter().sum::<usize>() as f64 / n;
    let var = sizes.iter().map(|&s| (s as f64 - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}
