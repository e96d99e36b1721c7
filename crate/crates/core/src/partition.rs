//! Client data allocation: splitting a dataset into per-client shards under
//! the two non-iid schemes, plus heterogeneity statistics over the result.
//!
//! Scheme 1 draws a per-client category count from [min, max] and keeps
//! volumes roughly equal; scheme 2 additionally skews volumes by a lognormal
//! draw. Both are driven by a deficit-greedy allocation toward per-client
//! volume targets, which preserves the exact-cover and category-count
//! contracts that plain per-category round-robin cannot (clients owning more
//! categories would otherwise receive proportionally more records).

use crate::data::DatasetManifest;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded_rng};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionScheme {
    /// Unbalanced category mixes, roughly equal volumes.
    UnbalancedClasses,
    /// Unbalanced category mixes and lognormal-skewed volumes.
    UnbalancedClassesAndVolumes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub scheme: PartitionScheme,
    pub n_clients: usize,
    /// Inclusive [min, max] distinct categories per client.
    pub classes_per_client: (usize, usize),
    /// Lognormal sigma for scheme 2; ignored by scheme 1.
    #[serde(default)]
    pub volume_skew: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientShard {
    pub client_id: u64,
    /// Sorted, unique indices into the manifest this shard was built from.
    pub record_indices: Vec<usize>,
    pub category_histogram: BTreeMap<String, usize>,
    /// Per-client sampling seed, derived from the plan seed.
    pub seed: u64,
}

impl ClientShard {
    pub fn len(&self) -> usize {
        self.record_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.record_indices.is_empty()
    }

    pub fn distinct_categories(&self) -> usize {
        self.category_histogram.len()
    }

    /// Fraction of the shard held by its most common category.
    pub fn concentration(&self) -> f64 {
        if self.record_indices.is_empty() {
            return 0.0;
        }
        let max = self.category_histogram.values().copied().max().unwrap_or(0);
        max as f64 / self.record_indices.len() as f64
    }

    fn from_indices(
        client_id: u64,
        plan_seed: u64,
        mut indices: Vec<usize>,
        manifest: &DatasetManifest,
    ) -> ClientShard {
        indices.sort_unstable();
        let mut histogram = BTreeMap::new();
        for &i in &indices {
            *histogram
                .entry(manifest.records[i].category.clone())
                .or_insert(0usize) += 1;
        }
        ClientShard {
            client_id,
            record_indices: indices,
            category_histogram: histogram,
            seed: derive_seed(plan_seed, &[client_id]),
        }
    }
}

fn validate_plan(plan: &PartitionPlan, manifest: &DatasetManifest) -> Result<()> {
    let (min, max) = plan.classes_per_client;
    let n_cats = manifest.category_set.len();
    if plan.n_clients == 0 {
        return Err(Error::Config("n_clients must be positive".into()));
    }
    if min < 1 || max < min {
        return Err(Error::Config(format!(
            "invalid classes_per_client range [{min}, {max}]"
        )));
    }
    if max > n_cats {
        return Err(Error::Config(format!(
            "classes_per_client max {max} exceeds {n_cats} categories"
        )));
    }
    if plan.n_clients > manifest.len() {
        return Err(Error::Config(format!(
            "{} clients cannot each receive a record from {} records",
            plan.n_clients,
            manifest.len()
        )));
    }
    if plan.volume_skew < 0.0 {
        return Err(Error::Config("volume_skew must be non-negative".into()));
    }
    Ok(())
}

/// Splits the manifest into per-client shards. The shards are a disjoint
/// cover of the manifest; each client's distinct category count lies in
/// the plan's [min, max]; scheme-1 volumes stay within a 1.5 max/min ratio.
pub fn partition(manifest: &DatasetManifest, plan: &PartitionPlan) -> Result<Vec<ClientShard>> {
    validate_plan(plan, manifest)?;
    let n = plan.n_clients;
    let n_records = manifest.len();

    // A single client owns everything regardless of scheme.
    if n == 1 {
        return Ok(vec![ClientShard::from_indices(
            0,
            plan.seed,
            (0..n_records).collect(),
            manifest,
        )]);
    }

    let cats = &manifest.category_set;
    let n_cats = cats.len();
    let (min_c, max_c) = plan.classes_per_client;
    if n * max_c < n_cats {
        return Err(Error::Config(format!(
            "{n} clients with at most {max_c} categories each cannot cover {n_cats} categories"
        )));
    }

    // Records grouped by category, in manifest order.
    let mut by_category: Vec<Vec<usize>> = vec![Vec::new(); n_cats];
    for (i, r) in manifest.records.iter().enumerate() {
        let ci = cats
            .iter()
            .position(|c| c == &r.category)
            .ok_or_else(|| Error::Config(format!("record category {} not in set", r.category)))?;
        by_category[ci].push(i);
    }

    let mut rng = seeded_rng(plan.seed);

    // Per-client category counts, bumped until the categories can be covered.
    let mut class_counts: Vec<usize> = (0..n).map(|_| rng.gen_range(min_c..=max_c)).collect();
    while class_counts.iter().sum::<usize>() < n_cats {
        let candidates: Vec<usize> = (0..n).filter(|&i| class_counts[i] < max_c).collect();
        let pick = candidates[rng.gen_range(0..candidates.len())];
        class_counts[pick] += 1;
    }

    // Deal categories one slot per client per round. Clients take their
    // least-owned candidate (random priorities break ties), except that a
    // client already holding a sole-owner category avoids taking another
    // fresh one -- stacking sole categories on one client forces its volume
    // far above target. A coverage guard overrides the avoidance when the
    // remaining slots are only just enough to own every category.
    let cat_priority: Vec<u64> = (0..n_cats).map(|_| rng.gen()).collect();
    let mut client_order: Vec<usize> = (0..n).collect();
    client_order.shuffle(&mut rng);
    let mut owners: Vec<Vec<usize>> = vec![Vec::new(); n_cats]; // category -> clients
    let mut owned: Vec<Vec<usize>> = vec![Vec::new(); n]; // client -> categories
    let mut remaining_slots: usize = class_counts.iter().sum();
    let max_rounds = *class_counts.iter().max().unwrap();
    for round in 0..max_rounds {
        for &client in &client_order {
            if owned[client].len() > round {
                continue;
            }
            if owned[client].len() >= class_counts[client] {
                continue;
            }
            let unowned = (0..n_cats).filter(|&c| owners[c].is_empty()).count();
            let must_take_fresh = unowned >= remaining_slots;
            let has_sole = owned[client]
                .iter()
                .any(|&c| owners[c].len() == 1);
            let candidate = (0..n_cats)
                .filter(|&c| {
                    !owned[client].contains(&c) && owners[c].len() < by_category[c].len()
                })
                .min_by_key(|&c| {
                    let fresh = owners[c].is_empty();
                    let penalty = if must_take_fresh {
                        usize::from(!fresh)
                    } else {
                        usize::from(fresh && has_sole)
                    };
                    (penalty, owners[c].len(), cat_priority[c])
                });
            let c = candidate.ok_or_else(|| {
                Error::Config(format!(
                    "client {client} cannot take {} distinct categories; dataset too small",
                    class_counts[client]
                ))
            })?;
            owners[c].push(client);
            owned[client].push(c);
            remaining_slots -= 1;
        }
    }

    // Per-client volume targets.
    let targets: Vec<f64> = match plan.scheme {
        PartitionScheme::UnbalancedClasses => vec![n_records as f64 / n as f64; n],
        PartitionScheme::UnbalancedClassesAndVolumes => {
            let normal = Normal::new(0.0, plan.volume_skew.max(0.0)).map_err(|_| {
                Error::Config(format!("invalid volume_skew {}", plan.volume_skew))
            })?;
            let weights: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng).exp()).collect();
            let total: f64 = weights.iter().sum();
            weights
                .into_iter()
                .map(|w| n_records as f64 * w / total)
                .collect()
        }
    };

    // Within-category shares. A client owning c_i categories weighs each of
    // them by T_i / c_i, so its expected volume across categories comes out
    // at T_i even though clients own different numbers of categories.
    let mut share: Vec<Vec<f64>> = vec![vec![0.0; n_cats]; n];
    for (c, records) in by_category.iter().enumerate() {
        let weight_sum: f64 = owners[c]
            .iter()
            .map(|&i| targets[i] / owned[i].len() as f64)
            .sum();
        for &i in &owners[c] {
            let w = targets[i] / owned[i].len() as f64;
            share[i][c] = records.len() as f64 * w / weight_sum;
        }
    }

    // Integer quotas per (client, category): largest remainder with a floor
    // of one record per owner, exact per-category totals.
    let mut quota: Vec<Vec<usize>> = vec![vec![0; n_cats]; n];
    for (c, records) in by_category.iter().enumerate() {
        let n_c = records.len();
        let mut base: Vec<(usize, usize, f64)> = owners[c]
            .iter()
            .map(|&i| {
                let q = (share[i][c].floor() as usize).max(1);
                (i, q, share[i][c] - share[i][c].floor())
            })
            .collect();
        let mut used: usize = base.iter().map(|(_, q, _)| q).sum();
        // Floors can overshoot n_c only if owners were capped at n_c, which
        // the dealing above prevents; trim defensively from the largest.
        while used > n_c {
            let (_, q, _) = base
                .iter_mut()
                .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
                .unwrap();
            *q -= 1;
            used -= 1;
        }
        let mut order: Vec<usize> = (0..base.len()).collect();
        order.sort_by(|&x, &y| {
            base[y]
                .2
                .partial_cmp(&base[x].2)
                .unwrap()
                .then(base[x].0.cmp(&base[y].0))
        });
        let mut k = 0;
        while used < n_c {
            base[order[k % order.len()]].1 += 1;
            used += 1;
            k += 1;
        }
        for (i, q, _) in base {
            quota[i][c] = q;
        }
    }

    // Volume repair: per-category rounding can leave client volumes a few
    // records off target, which matters when targets are small. Sweep over
    // every owner pair within each category, shifting one record from the
    // more overfull to the more underfull side; excess diffuses through
    // shared categories until no single transfer helps.
    let mut balance: Vec<f64> = (0..n)
        .map(|i| quota[i].iter().sum::<usize>() as f64 - targets[i])
        .collect();
    for _ in 0..64 {
        let mut moved = false;
        for c in 0..n_cats {
            for ai in 0..owners[c].len() {
                for bi in 0..owners[c].len() {
                    let (a, b) = (owners[c][ai], owners[c][bi]);
                    if quota[a][c] >= 2 && balance[a] - balance[b] > 1.0 {
                        quota[a][c] -= 1;
                        quota[b][c] += 1;
                        balance[a] -= 1.0;
                        balance[b] += 1.0;
                        moved = true;
                    }
                }
            }
        }
        if !moved {
            break;
        }
    }

    // Hand out actual record indices: owners take their quota contiguously
    // in manifest order within each category.
    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (c, records) in by_category.iter().enumerate() {
        let mut cursor = 0usize;
        for &i in &owners[c] {
            for _ in 0..quota[i][c] {
                assigned[i].push(records[cursor]);
                cursor += 1;
            }
        }
        debug_assert_eq!(cursor, records.len());
    }

    Ok(assigned
        .into_iter()
        .enumerate()
        .map(|(client, indices)| {
            ClientShard::from_indices(client as u64, plan.seed, indices, manifest)
        })
        .collect())
}

/// One row per (client, category) plus summary scalars.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeterogeneityReport {
    pub rows: Vec<HeterogeneityRow>,
    pub volume_mean: f64,
    pub volume_std: f64,
    /// Mean Shannon entropy (nats) of per-client category distributions.
    pub mean_category_entropy: f64,
    /// Mean total-variation distance over all client pairs.
    pub mean_pairwise_tv: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeterogeneityRow {
    pub client_id: u64,
    pub category: String,
    pub count: usize,
    pub fraction: f64,
}

impl HeterogeneityReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("client_id,category,count,fraction\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.client_id, r.category, r.count, r.fraction
            ));
        }
        out
    }
}

pub fn heterogeneity_report(
    shards: &[ClientShard],
    manifest: &DatasetManifest,
) -> HeterogeneityReport {
    let cats = &manifest.category_set;
    let mut rows = Vec::new();
    let mut distributions: Vec<Vec<f64>> = Vec::with_capacity(shards.len());
    let mut volumes: Vec<f64> = Vec::with_capacity(shards.len());
    for shard in shards {
        let total = shard.len().max(1) as f64;
        volumes.push(shard.len() as f64);
        let mut dist = vec![0.0; cats.len()];
        for (ci, cat) in cats.iter().enumerate() {
            let count = shard.category_histogram.get(cat).copied().unwrap_or(0);
            if count > 0 {
                rows.push(HeterogeneityRow {
                    client_id: shard.client_id,
                    category: cat.clone(),
                    count,
                    fraction: count as f64 / total,
                });
            }
            dist[ci] = count as f64 / total;
        }
        distributions.push(dist);
    }

    let n = shards.len().max(1) as f64;
    let volume_mean = volumes.iter().sum::<f64>() / n;
    let volume_std =
        (volumes.iter().map(|v| (v - volume_mean).powi(2)).sum::<f64>() / n).sqrt();

    let mean_category_entropy = distributions
        .iter()
        .map(|d| -d.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>())
        .sum::<f64>()
        / n;

    let mut tv_sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..distributions.len() {
        for j in (i + 1)..distributions.len() {
            let tv: f64 = distributions[i]
                .iter()
                .zip(&distributions[j])
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / 2.0;
            tv_sum += tv;
            pairs += 1;
        }
    }
    let mean_pairwise_tv = if pairs > 0 { tv_sum / pairs as f64 } else { 0.0 };

    HeterogeneityReport {
        rows,
        volume_mean,
        volume_std,
        mean_category_entropy,
        mean_pairwise_tv,
    }
}

/// On-disk shard index: self-describing against the dataset file it was
/// produced from. Holdout indices are recorded so downstream commands can
/// evaluate without the original config.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShardIndexFile {
    pub plan: PartitionPlan,
    pub dataset_sha256: String,
    pub holdout_indices: Vec<usize>,
    pub shards: Vec<ShardEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShardEntry {
    pub client_id: u64,
    pub seed: u64,
    pub record_indices: Vec<usize>,
}

impl ShardIndexFile {
    pub fn from_shards(
        plan: &PartitionPlan,
        dataset_sha256: String,
        holdout_indices: Vec<usize>,
        shards: &[ClientShard],
    ) -> Self {
        ShardIndexFile {
            plan: plan.clone(),
            dataset_sha256,
            holdout_indices,
            shards: shards
                .iter()
                .map(|s| ShardEntry {
                    client_id: s.client_id,
                    seed: s.seed,
                    record_indices: s.record_indices.clone(),
                })
                .collect(),
        }
    }

    /// Rebuilds full shards (with histograms) against the manifest.
    pub fn to_shards(&self, manifest: &DatasetManifest) -> Result<Vec<ClientShard>> {
        self.shards
            .iter()
            .map(|e| {
                for &i in &e.record_indices {
                    if i >= manifest.len() {
                        return Err(Error::Format(format!(
                            "shard {} references record {i} beyond dataset length {}",
                            e.client_id,
                            manifest.len()
                        )));
                    }
                }
                let mut shard = ClientShard::from_indices(
                    e.client_id,
                    0,
                    e.record_indices.clone(),
                    manifest,
                );
                shard.seed = e.seed;
                Ok(shard)
            })
            .collect()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Input(format!("cannot open {}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }
}
