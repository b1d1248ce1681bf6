//! Server-side grouping of devices by gating-matrix similarity.
//!
//! Average-linkage agglomerative clustering cut at a distance threshold,
//! followed by a minimum-group-size pass and bank continuity across steps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fleet::{GateMatrix, Observation};
use crate::moe::{BankKey, ModelBundle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Linkage {
    Average,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterSettings {
    pub distance_threshold: f64,
    pub min_group_size: usize,
    pub linkage: Linkage,
}

impl Default for ClusterSettings {
    fn default() -> Self {
        Self {
            distance_threshold: 0.3,
            min_group_size: 2,
            linkage: Linkage::Average,
        }
    }
}

impl ClusterSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.distance_threshold > 0.0 && self.distance_threshold.is_finite()) {
            return Err(Error::field("cluster.distance_threshold", "must be positive"));
        }
        if self.min_group_size == 0 {
            return Err(Error::field("cluster.min_group_size", "must be at least 1"));
        }
        Ok(())
    }
}

/// Frobenius norm of `a − b` divided by the square root of the entry count.
pub fn matrix_distance(a: &GateMatrix, b: &GateMatrix) -> Result<f64> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.len() != y.len()) {
        return Err(Error::Protocol("gating matrices differ in shape".into()));
    }
    let entries: usize = a.iter().map(Vec::len).sum();
    if entries == 0 {
        return Ok(0.0);
    }
    let sq: f64 = a
        .iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)))
        .sum();
    Ok((sq / entries as f64).sqrt())
}

/// Elementwise mean of the members' matrices.
pub fn centroid(matrices: &[&GateMatrix]) -> GateMatrix {
    let mut out: GateMatrix = matrices[0].iter().map(|r| vec![0.0; r.len()]).collect();
    for m in matrices {
        for (o, r) in out.iter_mut().zip(m.iter()) {
            o.iter_mut().zip(r).for_each(|(a, b)| *a += b);
        }
    }
    let n = matrices.len() as f64;
    out.iter_mut().flatten().for_each(|v| *v /= n);
    out
}

/// Device-id sets, each sorted, ordered by smallest member.
pub type Groups = Vec<Vec<usize>>;

fn pairwise(observations: &[Observation]) -> Result<Vec<Vec<f64>>> {
    let n = observations.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = matrix_distance(&observations[i].gating_matrix, &observations[j].gating_matrix)?;
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    Ok(d)
}

fn sort_groups(mut groups: Groups) -> Groups {
    for g in groups.iter_mut() {
        g.sort_unstable();
    }
    groups.sort_by_key(|g| g[0]);
    groups
}

/// Average-linkage agglomeration: merge the closest pair of clusters while
/// their linkage distance is at most the threshold. Equal distances merge the
/// pair whose (smaller min id, larger min id) is lexicographically smallest.
pub fn agglomerate(observations: &[Observation], settings: &ClusterSettings) -> Result<Groups> {
    if observations.is_empty() {
        return Err(Error::Protocol("clustering needs at least one observation".into()));
    }
    let point = pairwise(observations)?;
    let ids: Vec<usize> = observations.iter().map(|o| o.device_id).collect();

    // active clusters hold indices into `observations`; `link` is kept up to
    // date with the Lance-Williams update for average linkage
    let mut members: Vec<Vec<usize>> = (0..ids.len()).map(|i| vec![i]).collect();
    let mut link = point;
    let mut alive: Vec<bool> = vec![true; ids.len()];
    let min_id = |m: &Vec<usize>| m.iter().map(|&i| ids[i]).min().expect("non-empty");

    loop {
        let mut best: Option<(f64, (usize, usize), usize, usize)> = None;
        for a in 0..members.len() {
            if !alive[a] {
                continue;
            }
            for b in a + 1..members.len() {
                if !alive[b] {
                    continue;
                }
                let d = link[a][b];
                let (ka, kb) = (min_id(&members[a]), min_id(&members[b]));
                let key = (ka.min(kb), ka.max(kb));
                let better = match best {
                    None => true,
                    Some((bd, bkey, _, _)) => d < bd || (d == bd && key < bkey),
                };
                if better {
                    best = Some((d, key, a, b));
                }
            }
        }
        let Some((d, _, a, b)) = best else { break };
        if d > settings.distance_threshold {
            break;
        }
        let (na, nb) = (members[a].len() as f64, members[b].len() as f64);
        for k in 0..members.len() {
            if alive[k] && k != a && k != b {
                let v = (na * link[a][k] + nb * link[b][k]) / (na + nb);
                link[a][k] = v;
                link[k][a] = v;
            }
        }
        let moved = std::mem::take(&mut members[b]);
        members[a].extend(moved);
        alive[b] = false;
    }

    Ok(sort_groups(
        members
            .into_iter()
            .zip(alive)
            .filter(|(_, live)| *live)
            .map(|(m, _)| m.into_iter().map(|i| ids[i]).collect())
            .collect(),
    ))
}

fn index_of(observations: &[Observation]) -> std::collections::BTreeMap<usize, usize> {
    observations.iter().enumerate().map(|(i, o)| (o.device_id, i)).collect()
}

/// Mean pairwise matrix distance between two groups of devices.
pub fn average_linkage(observations: &[Observation], a: &[usize], b: &[usize]) -> Result<f64> {
    let idx = index_of(observations);
    let mut total = 0.0;
    for x in a {
        for y in b {
            let (i, j) = match (idx.get(x), idx.get(y)) {
                (Some(&i), Some(&j)) => (i, j),
                _ => return Err(Error::Protocol("group names an unobserved device".into())),
            };
            total += matrix_distance(&observations[i].gating_matrix, &observations[j].gating_matrix)?;
        }
    }
    Ok(total / (a.len() * b.len()) as f64)
}

/// Folds undersized groups into their nearest neighbour until every group has
/// at least `min_group_size` devices or only one group is left.
pub fn enforce_min_size(groups: Groups, observations: &[Observation], settings: &ClusterSettings) -> Result<Groups> {
    let mut groups = sort_groups(groups);
    loop {
        if groups.len() <= 1 {
            break;
        }
        // smallest undersized group, lowest min id on ties (groups are sorted)
        let small = groups
            .iter()
            .enumerate()
            .filter(|(_, g)| g.len() < settings.min_group_size)
            .min_by_key(|(i, g)| (g.len(), *i))
            .map(|(i, _)| i);
        let Some(small) = small else { break };
        let mut nearest: Option<(f64, usize)> = None;
        for (j, g) in groups.iter().enumerate() {
            if j == small {
                continue;
            }
            let d = average_linkage(observations, &groups[small], g)?;
            if nearest.is_none_or(|(bd, _)| d < bd) {
                nearest = Some((d, j));
            }
        }
        let (_, target) = nearest.expect("at least two groups");
        let moved = groups.remove(small);
        let target = if target > small { target - 1 } else { target };
        groups[target].extend(moved);
        groups = sort_groups(groups);
    }
    Ok(groups)
}

/// Something that owns local banks and can copy one.
pub trait BankStore {
    fn has_bank(&self, key: &str) -> bool;
    fn clone_bank(&mut self, src: &str, dst: &str) -> Result<()>;
}

impl BankStore for ModelBundle {
    fn has_bank(&self, key: &str) -> bool {
        ModelBundle::has_bank(self, key)
    }

    fn clone_bank(&mut self, src: &str, dst: &str) -> Result<()> {
        ModelBundle::clone_bank(self, src, dst)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grouping {
    pub groups: Groups,
    pub centroids: Vec<GateMatrix>,
    /// Bank of each group, parallel to `groups`.
    pub banks: Vec<BankKey>,
}

impl Grouping {
    pub fn group_of(&self, device: usize) -> Option<usize> {
        self.groups.iter().position(|g| g.contains(&device))
    }

    pub fn bank_of(&self, device: usize) -> Option<&BankKey> {
        self.group_of(device).map(|g| &self.banks[g])
    }
}

/// Hands out fresh bank names `g0`, `g1`, …
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BankNamer {
    next: usize,
}

impl BankNamer {
    pub fn fresh<S: BankStore + ?Sized>(&mut self, store: &S) -> BankKey {
        loop {
            let key = format!("g{}", self.next);
            self.next += 1;
            if !store.has_bank(&key) {
                return key;
            }
        }
    }
}

/// Gives every new group a bank.
///
/// With a previous grouping, each group inherits the bank of the previous
/// group whose centroid is nearest (lowest previous index on ties). When
/// several groups claim one bank the largest keeps it (lowest min id on
/// ties) and the others get clones. Without one, every group receives a
/// clone of `initial_bank`.
pub fn assign_banks<S: BankStore + ?Sized>(
    groups: Groups,
    observations: &[Observation],
    prev: Option<&Grouping>,
    initial_bank: &str,
    store: &mut S,
    namer: &mut BankNamer,
) -> Result<Grouping> {
    let groups = sort_groups(groups);
    let idx = index_of(observations);
    let centroids = groups
        .iter()
        .map(|g| {
            let ms = g
                .iter()
                .map(|d| {
                    idx.get(d)
                        .map(|&i| &observations[i].gating_matrix)
                        .ok_or_else(|| Error::Protocol(format!("device {d} was not observed")))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(centroid(&ms))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut banks: Vec<Option<BankKey>> = vec![None; groups.len()];
    match prev {
        None => {
            if !store.has_bank(initial_bank) {
                return Err(Error::Lookup(format!("unknown initial bank {initial_bank:?}")));
            }
            for b in banks.iter_mut() {
                let key = namer.fresh(store);
                store.clone_bank(initial_bank, &key)?;
                *b = Some(key);
            }
        }
        Some(prev) => {
            let mut claims: Vec<usize> = Vec::with_capacity(groups.len());
            for c in &centroids {
                let mut best: Option<(f64, usize)> = None;
                for (j, pc) in prev.centroids.iter().enumerate() {
                    let d = matrix_distance(c, pc)?;
                    if best.is_none_or(|(bd, _)| d < bd) {
                        best = Some((d, j));
                    }
                }
                claims.push(best.ok_or_else(|| Error::Protocol("previous grouping is empty".into()))?.1);
            }
            for p in 0..prev.groups.len() {
                let claimants: Vec<usize> = (0..groups.len()).filter(|&j| claims[j] == p).collect();
                let Some(&keeper) = claimants.iter().max_by_key(|&&j| (groups[j].len(), std::cmp::Reverse(j))) else {
                    continue;
                };
                let src = &prev.banks[p];
                if !store.has_bank(src) {
                    return Err(Error::Lookup(format!("previous bank {src:?} is gone")));
                }
                for &j in &claimants {
                    if j == keeper {
                        banks[j] = Some(src.clone());
                    } else {
                        let key = namer.fresh(store);
                        store.clone_bank(src, &key)?;
                        banks[j] = Some(key);
                    }
                }
            }
        }
    }
    Ok(Grouping {
        groups,
        centroids,
        banks: banks.into_iter().map(|b| b.expect("every group claimed a bank")).collect(),
    })
}

/// Full server-side pass: agglomerate, enforce the minimum size, then
/// assign banks.
pub fn cluster_devices<S: BankStore + ?Sized>(
    observations: &[Observation],
    settings: &ClusterSettings,
    prev: Option<&Grouping>,
    initial_bank: &str,
    store: &mut S,
    namer: &mut BankNamer,
) -> Result<Grouping> {
    let groups = agglomerate(observations, settings)?;
    let groups = enforce_min_size(groups, observations, settings)?;
    assign_banks(groups, observations, prev, initial_bank, store, namer)
}
