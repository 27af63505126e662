use rand::seq::SliceRandom;

use super::{DataError, Sample};
use crate::seed::rng_for;

/// Per-client class counts of the six training clients in the reference non-IID setup,
/// ordered (normal, other infection, COVID-19).
pub const TABLE1_COUNTS: [[usize; 3]; 6] = [
    [300, 144, 8],
    [400, 308, 80],
    [8861, 977, 0],
    [3768, 0, 0],
    [0, 0, 1929],
    [0, 0, 408],
];

/// Client id to sample indices, together with each client's class proportions.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    pub clients: Vec<Vec<usize>>,
    /// `skew[c][k]` is the fraction of client `c`'s samples with class `k`; empty for unlabeled tasks.
    pub skew: Vec<Vec<f64>>,
}

impl PartitionPlan {
    pub fn len(&self) -> usize {
        self.clients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clients.is_empty()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.clients.iter().map(Vec::len).collect()
    }

    /// True when the shards are pairwise disjoint and together cover `0..n`.
    pub fn is_exact(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        for &i in self.clients.iter().flatten() {
            if i >= n || seen[i] {
                return false;
            }
            seen[i] = true;
        }
        seen.into_iter().all(|s| s)
    }

    pub fn shard<'a>(&self, client: usize, samples: &'a [Sample]) -> Vec<&'a Sample> {
        self.clients[client].iter().map(|&i| &samples[i]).collect()
    }
}

fn histogram(samples: &[Sample], idx: &[usize], classes: usize) -> Vec<usize> {
    let mut h = vec![0; classes];
    for &i in idx {
        if let Some(c) = samples[i].class() {
            h[c] += 1;
        }
    }
    h
}

fn proportions(h: &[usize]) -> Vec<f64> {
    let total: usize = h.iter().sum();
    h.iter()
        .map(|&x| {
            if total == 0 {
                0.0
            } else {
                x as f64 / total as f64
            }
        })
        .collect()
}

/// Assigns `spec[c][k]` samples of class `k` to client `c`, taking class members in index order.
pub fn partition_noniid(
    samples: &[Sample],
    spec: &[Vec<usize>],
) -> Result<PartitionPlan, DataError> {
    let classes = spec.first().map_or(0, Vec::len);
    if classes == 0 || spec.iter().any(|r| r.len() != classes) {
        return Err(DataError::Infeasible(
            "spec rows must share a non-zero class count".into(),
        ));
    }
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, s) in samples.iter().enumerate() {
        let c = s.class().ok_or_else(|| {
            DataError::Infeasible("non-IID partitioning needs class labels".into())
        })?;
        if c >= classes {
            return Err(DataError::Infeasible(format!(
                "sample {i} has class {c} outside the spec"
            )));
        }
        pools[c].push(i);
    }
    for k in 0..classes {
        let want: usize = spec.iter().map(|r| r[k]).sum();
        if want > pools[k].len() {
            return Err(DataError::Infeasible(format!(
                "class {k}: spec asks for {want} samples, only {} available",
                pools[k].len()
            )));
        }
    }
    let mut cursor = vec![0usize; classes];
    let mut clients = Vec::with_capacity(spec.len());
    for row in spec {
        let mut idx = Vec::new();
        for (k, &n) in row.iter().enumerate() {
            idx.extend_from_slice(&pools[k][cursor[k]..cursor[k] + n]);
            cursor[k] += n;
        }
        idx.sort_unstable();
        clients.push(idx);
    }
    let skew = clients
        .iter()
        .map(|c| proportions(&histogram(samples, c, classes)))
        .collect();
    Ok(PartitionPlan { clients, skew })
}

/// Uniform random split with shard sizes differing by at most one.
pub fn partition_iid(
    samples: &[Sample],
    n_clients: usize,
    seed: u64,
) -> Result<PartitionPlan, DataError> {
    if n_clients == 0 {
        return Err(DataError::Invalid("need at least one client".into()));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng_for(seed, "partition-iid"));
    let base = samples.len() / n_clients;
    let extra = samples.len() % n_clients;
    let mut clients = Vec::with_capacity(n_clients);
    let mut start = 0;
    for c in 0..n_clients {
        let len = base + usize::from(c < extra);
        let mut idx = order[start..start + len].to_vec();
        idx.sort_unstable();
        clients.push(idx);
        start += len;
    }
    let classes = samples
        .iter()
        .filter_map(Sample::class)
        .max()
        .map_or(0, |m| m + 1);
    let skew = clients
        .iter()
        .map(|c| {
            if classes == 0 {
                Vec::new()
            } else {
                proportions(&histogram(samples, c, classes))
            }
        })
        .collect();
    Ok(PartitionPlan { clients, skew })
}

/// Largest-remainder apportionment of `total` over `weights`; ties go to the lower index.
pub fn scale_counts(weights: &[usize], total: usize) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let mut out: Vec<usize> = weights.iter().map(|&w| w * total / sum).collect();
    let mut rem: Vec<(usize, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| (w * total % sum, i))
        .collect();
    rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = total - out.iter().sum::<usize>();
    for &(_, i) in rem.iter().take(short) {
        out[i] += 1;
    }
    out
}

/// The six-client skew pattern scaled to `n` samples: `(per-client class counts, per-class totals)`.
pub fn table1_spec(n: usize) -> (Vec<Vec<usize>>, Vec<usize>) {
    let class_weights: Vec<usize> = (0..3)
        .map(|k| TABLE1_COUNTS.iter().map(|r| r[k]).sum())
        .collect();
    let totals = scale_counts(&class_weights, n);
    let mut spec = vec![vec![0; 3]; TABLE1_COUNTS.len()];
    for k in 0..3 {
        let column: Vec<usize> = TABLE1_COUNTS.iter().map(|r| r[k]).collect();
        for (c, v) in scale_counts(&column, totals[k]).into_iter().enumerate() {
            spec[c][k] = v;
        }
    }
    (spec, totals)
}
