//! Partition of codewords into coarse clusters and the fine→coarse label map.

use std::fs;
use std::path::Path;

use ctf_tensor::SeedStream;
use serde::{Deserialize, Serialize};

use crate::error::{CtfError, Result};
use crate::tokenizer::{Codebook, TokenGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Kmeans,
    Random,
    /// Built from an explicit assignment vector.
    Manual,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterMap {
    m: usize,
    d: usize,
    assignment: Vec<usize>,
    members: Vec<Vec<usize>>,
    centroids: Vec<f32>,
    pub provenance: Provenance,
    pub seed: u64,
    pub iterations: usize,
    pub sse: f64,
    /// SSE after initialisation and after every Lloyd iteration (k-means only).
    pub sse_history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, &y)| (x - y as f64).powi(2)).sum()
}

fn nearest_centroid(point: &[f32], centroids: &[f64], d: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.chunks(d).enumerate() {
        let dist = sq_dist(cen, point);
        if dist < best.1 {
            best = (c, dist);
        }
    }
    best
}

fn mean_centroids(codebook: &Codebook, assignment: &[usize], m: usize) -> Vec<f64> {
    let d = codebook.d();
    let mut sums = vec![0.0f64; m * d];
    let mut counts = vec![0usize; m];
    for (i, &c) in assignment.iter().enumerate() {
        counts[c] += 1;
        for (s, &v) in sums[c * d..(c + 1) * d].iter_mut().zip(codebook.entry(i)) {
            *s += v as f64;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 {
            sums[c * d..(c + 1) * d].iter_mut().for_each(|s| *s /= n as f64);
        }
    }
    sums
}

fn sse_of(codebook: &Codebook, assignment: &[usize], centroids: &[f64]) -> f64 {
    let d = codebook.d();
    assignment.iter().enumerate().map(|(i, &c)| sq_dist(&centroids[c * d..(c + 1) * d], codebook.entry(i))).sum()
}

fn check_counts(k: usize, m: usize) -> Result<()> {
    if m < 1 || m > k {
        return Err(CtfError::Parameter(format!("cluster count M={m} must be in [1, K={k}]")));
    }
    Ok(())
}

/// k-means++ seeding: first centre uniform, the rest with probability ∝ squared distance.
fn kmeans_plus_plus(codebook: &Codebook, m: usize, rng: &mut SeedStream) -> Vec<f64> {
    let (k, d) = (codebook.k(), codebook.d());
    let mut chosen = vec![false; k];
    let mut centroids = Vec::with_capacity(m * d);
    let first = rng.below(k);
    chosen[first] = true;
    centroids.extend(codebook.entry(first).iter().map(|&v| v as f64));
    let mut dist: Vec<f64> = (0..k).map(|i| sq_dist(&centroids[..d], codebook.entry(i))).collect();
    for _ in 1..m {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in dist.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave `acc` a hair below `target`; fall back to the last positive weight
            pick.unwrap_or_else(|| dist.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            // every remaining point coincides with a centre; pick an unused index
            let free: Vec<usize> = (0..k).filter(|&i| !chosen[i]).collect();
            free[rng.below(free.len())]
        };
        chosen[pick] = true;
        let c: Vec<f64> = codebook.entry(pick).iter().map(|&v| v as f64).collect();
        for (i, dv) in dist.iter_mut().enumerate() {
            *dv = dv.min(sq_dist(&c, codebook.entry(i)));
        }
        centroids.extend(c);
    }
    centroids
}

/// Moves the point farthest from the largest cluster's centroid into each empty cluster.
fn repair_empty(codebook: &Codebook, assignment: &mut [usize], centroids: &[f64], m: usize) {
    let d = codebook.d();
    loop {
        let mut counts = vec![0usize; m];
        assignment.iter().for_each(|&c| counts[c] += 1);
        let Some(empty) = counts.iter().position(|&n| n == 0) else { return };
        let largest = (0..m).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).unwrap();
        let cen = &centroids[largest * d..(largest + 1) * d];
        let far = (0..assignment.len())
            .filter(|&i| assignment[i] == largest)
            .max_by(|&a, &b| sq_dist(cen, codebook.entry(a)).total_cmp(&sq_dist(cen, codebook.entry(b))).then(b.cmp(&a)))
            .unwrap();
        assignment[far] = empty;
    }
}

/// Lloyd's k-means with k-means++ seeding and empty-cluster repair.
///
/// Stops when assignments are stable, the relative SSE change drops below `tol`,
/// or after `max_iters` iterations. An early stop ends with one extra assignment step
/// against the final centroids, so every codeword is at its nearest centroid.
pub fn kmeans(codebook: &Codebook, m: usize, seed: u64, max_iters: usize, tol: f64) -> Result<ClusterMap> {
    let (k, d) = (codebook.k(), codebook.d());
    check_counts(k, m)?;
    let mut rng = SeedStream::new(seed).split("kmeans++");
    let mut centroids = kmeans_plus_plus(codebook, m, &mut rng);
    let mut assignment: Vec<usize> = (0..k).map(|i| nearest_centroid(codebook.entry(i), &centroids, d).0).collect();
    repair_empty(codebook, &mut assignment, &centroids, m);
    centroids = mean_centroids(codebook, &assignment, m);
    let mut sse = sse_of(codebook, &assignment, &centroids);
    let mut history = vec![sse];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iters {
        iterations += 1;
        let mut next: Vec<usize> = (0..k)
            .map(|i| {
                let (c, dist) = nearest_centroid(codebook.entry(i), &centroids, d);
                // keep the current label on exact ties so assignments settle
                let cur = assignment[i];
                if sq_dist(&centroids[cur * d..(cur + 1) * d], codebook.entry(i)) <= dist { cur } else { c }
            })
            .collect();
        repair_empty(codebook, &mut next, &centroids, m);
        let stable = next == assignment;
        assignment = next;
        centroids = mean_centroids(codebook, &assignment, m);
        let new_sse = sse_of(codebook, &assignment, &centroids);
        if new_sse > sse * (1.0 + 1e-12) + 1e-12 {
            return Err(CtfError::Parameter(format!(
                "k-means SSE increased from {sse} to {new_sse} at iteration {iterations}"
            )));
        }
        let rel = if sse > 0.0 { (sse - new_sse) / sse } else { 0.0 };
        sse = new_sse;
        history.push(sse);
        if stable {
            converged = true;
            break;
        }
        if rel < tol {
            break;
        }
    }
    if !converged {
        // stopped early: one last assignment step so every point sits at its nearest centroid
        let last: Vec<usize> = (0..k).map(|i| nearest_centroid(codebook.entry(i), &centroids, d).0).collect();
        let mut counts = vec![0usize; m];
        last.iter().for_each(|&c| counts[c] += 1);
        if counts.iter().all(|&n| n > 0) && last != assignment {
            assignment = last;
            sse = sse_of(codebook, &assignment, &centroids);
            history.push(sse);
        }
    }
    let centroids = centroids.into_iter().map(|v| v as f32).collect();
    let mut map = ClusterMap::from_parts(m, d, assignment, centroids, Provenance::Kmeans, seed, iterations, sse)?;
    map.sse_history = history;
    Ok(map)
}

/// Balanced random partition: cluster sizes differ by at most one.
pub fn random_clustering(codebook: &Codebook, m: usize, seed: u64) -> Result<ClusterMap> {
    let k = codebook.k();
    check_counts(k, m)?;
    let mut order: Vec<usize> = (0..k).collect();
    SeedStream::new(seed).split("random-clusters").shuffle(&mut order);
    let mut assignment = vec![0; k];
    for (slot, &i) in order.iter().enumerate() {
        assignment[i] = slot % m;
    }
    ClusterMap::build(codebook, assignment, m, Provenance::Random, seed)
}

impl ClusterMap {
    /// Map from an explicit assignment; centroids are member means.
    pub fn from_assignment(codebook: &Codebook, assignment: Vec<usize>, m: usize) -> Result<Self> {
        ClusterMap::build(codebook, assignment, m, Provenance::Manual, 0)
    }

    fn build(codebook: &Codebook, assignment: Vec<usize>, m: usize, provenance: Provenance, seed: u64) -> Result<Self> {
        if assignment.len() != codebook.k() {
            return Err(CtfError::Shape(format!("{} assignments for K={}", assignment.len(), codebook.k())));
        }
        let centroids = mean_centroids(codebook, &assignment, m);
        let sse = sse_of(codebook, &assignment, &centroids);
        let centroids = centroids.into_iter().map(|v| v as f32).collect();
        let map = Self::from_parts(m, codebook.d(), assignment, centroids, provenance, seed, 0, sse)?;
        Ok(map)
    }

    #[allow(clippy::too_many_arguments)]
    fn from_parts(
        m: usize,
        d: usize,
        assignment: Vec<usize>,
        centroids: Vec<f32>,
        provenance: Provenance,
        seed: u64,
        iterations: usize,
        sse: f64,
    ) -> Result<Self> {
        if m == 0 || centroids.len() != m * d {
            return Err(CtfError::Shape(format!("{} centroid values for M={m}, d={d}", centroids.len())));
        }
        let mut members = vec![Vec::new(); m];
        for (i, &c) in assignment.iter().enumerate() {
            if c >= m {
                return Err(CtfError::Index(format!("fine index {i} assigned to cluster {c} of {m}")));
            }
            members[c].push(i);
        }
        if let Some(empty) = members.iter().position(Vec::is_empty) {
            return Err(CtfError::Parameter(format!("cluster {empty} is empty")));
        }
        Ok(Self { m, d, assignment, members, centroids, provenance, seed, iterations, sse, sse_history: vec![] })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.assignment.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn centroid(&self, c: usize) -> &[f32] {
        &self.centroids[c * self.d..(c + 1) * self.d]
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    /// Coarse label of a fine token.
    pub fn phi(&self, fine: usize) -> Result<usize> {
        self.assignment
            .get(fine)
            .copied()
            .ok_or_else(|| CtfError::Index(format!("fine index {fine} outside K={}", self.k())))
    }

    /// Sorted fine indices carrying coarse label `coarse`.
    pub fn members(&self, coarse: usize) -> Result<&[usize]> {
        self.members
            .get(coarse)
            .map(Vec::as_slice)
            .ok_or_else(|| CtfError::Index(format!("coarse index {coarse} outside M={}", self.m)))
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }

    pub fn coarsen(&self, tokens: &TokenGrid) -> Result<TokenGrid> {
        let coarse = tokens.tokens.iter().map(|&t| self.phi(t)).collect::<Result<Vec<_>>>()?;
        TokenGrid::new(tokens.h, tokens.w, coarse)
    }

    pub fn header(&self) -> ClusterHeader {
        ClusterHeader {
            m: self.m,
            k: self.k(),
            d: self.d,
            provenance: self.provenance,
            seed: self.seed,
            iterations: self.iterations,
            sse: self.sse,
        }
    }
}

/// JSON header of a cluster-map file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterHeader {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub d: usize,
    pub provenance: Provenance,
    pub seed: u64,
    pub iterations: usize,
    pub sse: f64,
}

const CLM_MAGIC: &[u8; 4] = b"CLM1";

/// One-line JSON header, `\n`, then "CLM1", K u32 assignments and M·d f32 centroids (little-endian).
pub fn encode_cluster_map(map: &ClusterMap) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec(&map.header())?;
    out.push(b'\n');
    out.extend_from_slice(CLM_MAGIC);
    for &a in &map.assignment {
        out.extend_from_slice(&(a as u32).to_le_bytes());
    }
    for &c in &map.centroids {
        out.extend_from_slice(&c.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_cluster_map(bytes: &[u8]) -> Result<ClusterMap> {
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| CtfError::format(0, "missing JSON header line"))?;
    let header: ClusterHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| CtfError::format(0, format!("bad header: {e}")))?;
    let body = nl + 1;
    if bytes.len() < body + 4 || &bytes[body..body + 4] != CLM_MAGIC {
        return Err(CtfError::format(body as u64, "missing CLM1 block"));
    }
    let need = header.k * 4 + header.m * header.d * 4;
    let have = bytes.len() - body - 4;
    if have != need {
        return Err(CtfError::format(bytes.len() as u64, format!("expected {need} payload bytes, found {have}")));
    }
    let payload = &bytes[body + 4..];
    let assignment = payload[..header.k * 4].chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize).collect();
    let centroids = payload[header.k * 4..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    ClusterMap::from_parts(header.m, header.d, assignment, centroids, header.provenance, header.seed, header.iterations, header.sse)
        .map_err(|e| CtfError::format(body as u64 + 4, e.to_string()))
}

pub fn save_cluster_map(map: &ClusterMap, path: &Path) -> Result<()> {
    fs::write(path, encode_cluster_map(map)?).map_err(|e| CtfError::io(path, e))
}

pub fn load_cluster_map(path: &Path) -> Result<ClusterMap> {
    decode_cluster_map(&fs::read(path).map_err(|e| CtfError::io(path, e))?)
}
