//! Inverted-file index: k-means coarse quantizer plus one entry list per
//! centroid. A query scans the lists of its `nprobe` nearest centroids.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{l2_squared, NeighborSet, Query, Retriever, TopK};
use crate::datastore::Datastore;
use crate::error::{Error, Result};
use crate::fingerprint::to_hex;

pub const IVF_MAGIC: &[u8; 8] = b"KNNBXIVF";

/// Objective (sum of squared distances to the assigned centroid) after the
/// assignment step of every Lloyd iteration.
#[derive(Debug, Clone, Serialize)]
pub struct KMeansReport {
    pub objective: Vec<f64>,
    pub repaired_empty: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IvfIndex {
    dim: usize,
    centroids: Vec<f32>,
    offsets: Vec<u32>,
    indices: Vec<u32>,
    default_nprobe: usize,
    datastore_fp: u64,
}

fn dist_f64(a: &[f32], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - y;
            d * d
        })
        .sum()
}

fn nearest(key: &[f32], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.chunks_exact(dim).enumerate() {
        let d = dist_f64(key, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding: each new centroid is an entry drawn with probability
/// proportional to its squared distance from the closest chosen centroid.
fn seed_centroids(ds: &Datastore, c: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = ds.len();
    let d = ds.dim();
    let mut chosen = vec![false; n];
    let mut centroids = Vec::with_capacity(c * d);
    let first = rng.gen_range(0..n);
    chosen[first] = true;
    centroids.extend(ds.key(first).iter().map(|&v| v as f64));
    let mut closest: Vec<f64> = (0..n).map(|i| dist_f64(ds.key(i), &centroids[..d])).collect();
    while centroids.len() < c * d {
        let total: f64 = closest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut pick = None;
            for (i, w) in closest.iter().enumerate() {
                if *w > 0.0 {
                    pick = Some(i);
                    if target < *w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.expect("positive total weight")
        } else {
            // Every remaining entry coincides with a centroid.
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.gen_range(0..free.len())]
        };
        chosen[pick] = true;
        let start = centroids.len();
        centroids.extend(ds.key(pick).iter().map(|&v| v as f64));
        for (i, w) in closest.iter_mut().enumerate() {
            *w = w.min(dist_f64(ds.key(i), &centroids[start..]));
        }
    }
    centroids
}

impl IvfIndex {
    /// Clusters the store's keys into `c` lists with seeded k-means.
    pub fn build(ds: &Datastore, c: usize, iters: usize, seed: u64) -> Result<(Self, KMeansReport)> {
        let n = ds.len();
        let d = ds.dim();
        if c == 0 {
            return Err(Error::param("ivf needs at least one centroid"));
        }
        if c > n {
            return Err(Error::param(format!("{c} centroids requested for {n} entries")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut centroids = seed_centroids(ds, c, &mut rng);
        let mut assign = vec![usize::MAX; n];
        let mut objective = Vec::with_capacity(iters);
        let mut repaired_empty = 0;
        for _ in 0..iters {
            let mut changed = false;
            let mut obj = 0.0;
            let mut dists = vec![0.0; n];
            for i in 0..n {
                let (best, dist) = nearest(ds.key(i), &centroids, d);
                changed |= assign[i] != best;
                assign[i] = best;
                dists[i] = dist;
                obj += dist;
            }
            objective.push(obj);
            if !changed {
                break;
            }
            let mut sums = vec![0.0; c * d];
            let mut counts = vec![0usize; c];
            for i in 0..n {
                counts[assign[i]] += 1;
                let s = &mut sums[assign[i] * d..(assign[i] + 1) * d];
                s.iter_mut().zip(ds.key(i)).for_each(|(a, b)| *a += *b as f64);
            }
            for k in 0..c {
                if counts[k] > 0 {
                    let inv = 1.0 / counts[k] as f64;
                    for j in 0..d {
                        centroids[k * d + j] = sums[k * d + j] * inv;
                    }
                }
            }
            // Split the largest cluster into any empty one by moving the
            // empty centroid onto the largest cluster's farthest member.
            for k in 0..c {
                if counts[k] > 0 {
                    continue;
                }
                let largest = (0..c).max_by_key(|&j| (counts[j], std::cmp::Reverse(j))).unwrap();
                if counts[largest] < 2 {
                    break;
                }
                let far = (0..n)
                    .filter(|&i| assign[i] == largest)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .unwrap();
                for j in 0..d {
                    centroids[k * d + j] = ds.key(far)[j] as f64;
                }
                assign[far] = k;
                dists[far] = 0.0;
                counts[largest] -= 1;
                counts[k] = 1;
                repaired_empty += 1;
            }
        }

        let centroids: Vec<f32> = centroids.iter().map(|&v| v as f32).collect();
        let mut lists: Vec<Vec<u32>> = vec![Vec::new(); c];
        for i in 0..n {
            let key = ds.key(i);
            let mut best = (0, f32::INFINITY);
            for (k, centroid) in centroids.chunks_exact(d).enumerate() {
                let dist = l2_squared(key, centroid);
                if dist < best.1 {
                    best = (k, dist);
                }
            }
            lists[best.0].push(i as u32);
        }
        let mut offsets = Vec::with_capacity(c + 1);
        offsets.push(0u32);
        let mut indices = Vec::with_capacity(n);
        for list in lists {
            indices.extend(list);
            offsets.push(indices.len() as u32);
        }
        let index = Self {
            dim: d,
            centroids,
            offsets,
            indices,
            default_nprobe: c.min(8),
            datastore_fp: ds.fingerprint(),
        };
        Ok((
            index,
            KMeansReport {
                objective,
                repaired_empty,
            },
        ))
    }

    pub fn with_default_nprobe(mut self, nprobe: usize) -> Result<Self> {
        self.check_nprobe(nprobe)?;
        self.default_nprobe = nprobe;
        Ok(self)
    }

    fn check_nprobe(&self, nprobe: usize) -> Result<()> {
        if nprobe == 0 || nprobe > self.nlist() {
            return Err(Error::param(format!(
                "nprobe {nprobe} outside [1, {}]",
                self.nlist()
            )));
        }
        Ok(())
    }

    pub fn nlist(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn default_nprobe(&self) -> usize {
        self.default_nprobe
    }

    pub fn datastore_fingerprint(&self) -> u64 {
        self.datastore_fp
    }

    pub fn centroid(&self, c: usize) -> &[f32] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    pub fn list(&self, c: usize) -> &[u32] {
        &self.indices[self.offsets[c] as usize..self.offsets[c + 1] as usize]
    }

    /// The `nprobe` centroids closest to `vector`, nearest first.
    pub fn probe(&self, vector: &[f32], nprobe: usize) -> Vec<usize> {
        let mut top = TopK::new(nprobe);
        for (c, centroid) in self.centroids.chunks_exact(self.dim).enumerate() {
            top.push(l2_squared(vector, centroid), c);
        }
        top.into_sorted().into_iter().map(|(_, c)| c).collect()
    }

    /// Fails unless `ds` is the store this index was built from.
    pub fn check_datastore(&self, ds: &Datastore) -> Result<()> {
        if ds.fingerprint() != self.datastore_fp {
            return Err(Error::FingerprintMismatch {
                what: "datastore",
                expected: to_hex(self.datastore_fp),
                found: to_hex(ds.fingerprint()),
            });
        }
        Ok(())
    }

    pub fn search(&self, ds: &Datastore, query: &Query, nprobe: usize) -> Result<NeighborSet> {
        query.check(ds)?;
        self.check_nprobe(nprobe)?;
        self.check_datastore(ds)?;
        let mut top = TopK::new(query.k);
        for c in self.probe(&query.vector, nprobe) {
            for &i in self.list(c) {
                top.push(l2_squared(&query.vector, ds.key(i as usize)), i as usize);
            }
        }
        Ok(top.into_neighbors(ds))
    }

    /// `ivf.bin`: magic, `c`, `d`, default nprobe, `n` (u32 LE), datastore
    /// fingerprint (u64 LE), centroids (f32), `c + 1` list offsets and the
    /// `n` concatenated entry indices (u32).
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(IVF_MAGIC)?;
        w.write_u32::<LittleEndian>(self.nlist() as u32)?;
        w.write_u32::<LittleEndian>(self.dim as u32)?;
        w.write_u32::<LittleEndian>(self.default_nprobe as u32)?;
        w.write_u32::<LittleEndian>(self.indices.len() as u32)?;
        w.write_u64::<LittleEndian>(self.datastore_fp)?;
        for &v in &self.centroids {
            w.write_f32::<LittleEndian>(v)?;
        }
        for &o in self.offsets.iter().chain(&self.indices) {
            w.write_u32::<LittleEndian>(o)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != IVF_MAGIC {
            return Err(Error::param("not an ivf index (bad magic)"));
        }
        let c = r.read_u32::<LittleEndian>()? as usize;
        let dim = r.read_u32::<LittleEndian>()? as usize;
        let default_nprobe = r.read_u32::<LittleEndian>()? as usize;
        let n = r.read_u32::<LittleEndian>()? as usize;
        let datastore_fp = r.read_u64::<LittleEndian>()?;
        let mut centroids = vec![0f32; c * dim];
        r.read_f32_into::<LittleEndian>(&mut centroids)?;
        let mut offsets = vec![0u32; c + 1];
        r.read_u32_into::<LittleEndian>(&mut offsets)?;
        let mut indices = vec![0u32; n];
        r.read_u32_into::<LittleEndian>(&mut indices)?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() || c == 0 || offsets.windows(2).any(|w| w[0] > w[1]) || offsets[c] as usize != n {
            return Err(Error::param("malformed ivf index"));
        }
        let index = Self {
            dim,
            centroids,
            offsets,
            indices,
            default_nprobe,
            datastore_fp,
        };
        index.check_nprobe(default_nprobe)?;
        Ok(index)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        Self::read_from(&bytes[..]).map_err(|e| match e {
            Error::Io(io) => Error::corrupt(path, format!("truncated ivf index: {io}")),
            other => other,
        })
    }
}

/// An [`IvfIndex`] bound to a probe width.
#[derive(Debug, Clone)]
pub struct IvfRetriever {
    index: IvfIndex,
    nprobe: usize,
}

impl IvfRetriever {
    pub fn new(index: IvfIndex, nprobe: usize) -> Result<Self> {
        index.check_nprobe(nprobe)?;
        Ok(Self { index, nprobe })
    }

    pub fn index(&self) -> &IvfIndex {
        &self.index
    }
}

impl Retriever for IvfRetriever {
    fn name(&self) -> &'static str {
        "ivf"
    }

    fn search(&self, ds: &Datastore, query: &Query) -> Result<NeighborSet> {
        self.index.search(ds, query, self.nprobe)
    }

    fn check(&self, ds: &Datastore) -> Result<()> {
        self.index.check_datastore(ds)
    }
}
