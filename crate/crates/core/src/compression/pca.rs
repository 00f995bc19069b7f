//! Principal component projection of datastore keys.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, StandardNormal};
use serde::Serialize;

use crate::datastore::{Datastore, TransformRecord};
use crate::error::{Error, Result};
use crate::fingerprint::{fnv1a, to_hex};

pub const MAX_ITERS: usize = 200;
pub const TOLERANCE: f64 = 1e-8;

/// `x ↦ components · (x − mean)`; rows of `components` are orthonormal.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaTransform {
    dim_in: usize,
    dim_out: usize,
    mean: Vec<f32>,
    components: Vec<f32>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PcaFit {
    #[serde(skip)]
    pub transform: PcaTransform,
    pub explained_variance_ratio: Vec<f64>,
    pub iterations: usize,
}

/// Leading `r` eigenpairs of a symmetric positive semi-definite matrix by
/// orthogonal iteration from a seeded Gaussian start. Columns of the
/// returned matrix are eigenvectors, ordered by decreasing eigenvalue, each
/// signed so its largest-magnitude entry is positive.
pub fn top_eigenvectors(
    matrix: &DMatrix<f64>,
    r: usize,
    max_iters: usize,
    tol: f64,
    seed: u64,
) -> (DMatrix<f64>, Vec<f64>, usize) {
    let d = matrix.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = DMatrix::from_fn(d, r, |_, _| StandardNormal.sample(&mut rng));
    let mut q = start.qr().q();
    let rayleigh = |q: &DMatrix<f64>| -> Vec<f64> {
        let mq = matrix * q;
        (0..r).map(|i| q.column(i).dot(&mq.column(i))).collect()
    };
    let mut eig = rayleigh(&q);
    let mut iterations = 0;
    for _ in 0..max_iters {
        iterations += 1;
        q = (matrix * &q).qr().q();
        let next = rayleigh(&q);
        let scale = next.iter().fold(f64::MIN_POSITIVE, |a, b| a.max(b.abs()));
        let delta = next.iter().zip(&eig).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        eig = next;
        if delta <= tol * scale {
            break;
        }
    }
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| eig[b].total_cmp(&eig[a]).then(a.cmp(&b)));
    let mut vectors = DMatrix::zeros(d, r);
    for (dst, &src) in order.iter().enumerate() {
        let mut col: DVector<f64> = q.column(src).into_owned();
        let pivot = col.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
        if pivot < 0.0 {
            col.neg_mut();
        }
        vectors.set_column(dst, &col);
    }
    let values = order.iter().map(|&i| eig[i]).collect();
    (vectors, values, iterations)
}

fn covariance(points: &[&[f32]], dim: usize) -> (Vec<f64>, DMatrix<f64>) {
    let n = points.len() as f64;
    let mut mean = vec![0.0; dim];
    for p in points {
        mean.iter_mut().zip(p.iter()).for_each(|(m, v)| *m += *v as f64);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    let mut centered = vec![0.0; dim];
    for p in points {
        centered.iter_mut().zip(p.iter().zip(&mean)).for_each(|(c, (v, m))| *c = *v as f64 - m);
        for i in 0..dim {
            let ci = centered[i];
            for j in i..dim {
                cov[(i, j)] += ci * centered[j];
            }
        }
    }
    for i in 0..dim {
        for j in i..dim {
            let v = cov[(i, j)] / n;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    (mean, cov)
}

/// Fits a `dim_out`-dimensional projection to the store's keys.
pub fn fit_pca(ds: &Datastore, dim_out: usize, seed: u64) -> Result<PcaFit> {
    let d = ds.dim();
    if dim_out == 0 || dim_out > d {
        return Err(Error::param(format!("target dimension {dim_out} outside [1, {d}]")));
    }
    if ds.len() < 2 {
        return Err(Error::param("pca needs at least two keys"));
    }
    let points: Vec<&[f32]> = ds.keys().chunks_exact(d).collect();
    let (mean, cov) = covariance(&points, d);
    let total = cov.trace();
    if !(total > 1e-12) {
        return Err(Error::param("degenerate key covariance (all keys identical)"));
    }
    let (vectors, values, iterations) = top_eigenvectors(&cov, dim_out, MAX_ITERS, TOLERANCE, seed);
    let mut components = Vec::with_capacity(dim_out * d);
    for r in 0..dim_out {
        components.extend(vectors.column(r).iter().map(|&v| v as f32));
    }
    Ok(PcaFit {
        transform: PcaTransform {
            dim_in: d,
            dim_out,
            mean: mean.iter().map(|&m| m as f32).collect(),
            components,
        },
        explained_variance_ratio: values.iter().map(|v| v.max(0.0) / total).collect(),
        iterations,
    })
}

/// Coordinates of `points` on their own two leading principal axes.
/// Degenerate inputs (fewer than two distinct points) map to the origin.
pub fn project_2d(points: &[&[f32]]) -> Vec<[f64; 2]> {
    let Some(first) = points.first() else { return Vec::new() };
    let d = first.len();
    let (mean, cov) = covariance(points, d);
    if points.len() < 2 || !(cov.trace() > 1e-12) {
        return vec![[0.0, 0.0]; points.len()];
    }
    let r = d.min(2);
    let (vectors, _, _) = top_eigenvectors(&cov, r, MAX_ITERS, TOLERANCE, 0);
    points
        .iter()
        .map(|p| {
            let mut xy = [0.0; 2];
            for (c, out) in xy.iter_mut().enumerate().take(r) {
                *out = p
                    .iter()
                    .zip(&mean)
                    .zip(vectors.column(c).iter())
                    .map(|((v, m), w)| (*v as f64 - m) * w)
                    .sum();
            }
            xy
        })
        .collect()
}

impl PcaTransform {
    pub fn dim_in(&self) -> usize {
        self.dim_in
    }

    pub fn dim_out(&self) -> usize {
        self.dim_out
    }

    pub fn mean(&self) -> &[f32] {
        &self.mean
    }

    /// Row `i` is the i-th principal direction.
    pub fn component(&self, i: usize) -> &[f32] {
        &self.components[i * self.dim_in..(i + 1) * self.dim_in]
    }

    pub fn apply(&self, key: &[f32]) -> Result<Vec<f32>> {
        if key.len() != self.dim_in {
            return Err(Error::DimensionMismatch {
                expected: self.dim_in,
                got: key.len(),
            });
        }
        Ok((0..self.dim_out)
            .map(|r| {
                self.component(r)
                    .iter()
                    .zip(key.iter().zip(&self.mean))
                    .map(|(c, (k, m))| *c as f64 * (*k as f64 - *m as f64))
                    .sum::<f64>() as f32
            })
            .collect())
    }

    /// New store with projected keys; values and provenance are unchanged.
    pub fn apply_datastore(&self, ds: &Datastore) -> Result<Datastore> {
        if ds.dim() != self.dim_in {
            return Err(Error::DimensionMismatch {
                expected: self.dim_in,
                got: ds.dim(),
            });
        }
        let record = TransformRecord {
            kind: "pca".into(),
            params: serde_json::json!({
                "dim_in": self.dim_in,
                "dim_out": self.dim_out,
                "fingerprint": to_hex(self.fingerprint()),
            }),
        };
        ds.map_keys(self.dim_out, record, |k| {
            self.apply(k).expect("dimension checked above")
        })
    }

    pub fn fingerprint(&self) -> u64 {
        fnv1a(&self.to_bytes())
    }

    /// `pca.bin`: `d`, `d'` (u32 LE), mean (`d` × f32), components
    /// (`d' × d` × f32, row-major).
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_u32::<LittleEndian>(self.dim_in as u32)?;
        w.write_u32::<LittleEndian>(self.dim_out as u32)?;
        for &v in self.mean.iter().chain(&self.components) {
            w.write_f32::<LittleEndian>(v)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let dim_in = r.read_u32::<LittleEndian>()? as usize;
        let dim_out = r.read_u32::<LittleEndian>()? as usize;
        if dim_out == 0 || dim_out > dim_in {
            return Err(Error::param("malformed pca transform header"));
        }
        let mut mean = vec![0f32; dim_in];
        r.read_f32_into::<LittleEndian>(&mut mean)?;
        let mut components = vec![0f32; dim_in * dim_out];
        r.read_f32_into::<LittleEndian>(&mut components)?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::param("trailing bytes after pca transform"));
        }
        Ok(Self {
            dim_in,
            dim_out,
            mean,
            components,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::read_from(&std::fs::read(path)?[..]).map_err(|e| match e {
            Error::Io(io) => Error::corrupt(path, format!("truncated pca transform: {io}")),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::tests::synthetic;
    use rand::Rng;

    fn gaussian_store(n: usize, scales: &[f32], seed: u64) -> Datastore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keys = Vec::with_capacity(n * scales.len());
        for _ in 0..n {
            for s in scales {
                let z: f32 = StandardNormal.sample(&mut rng);
                keys.push(z * s);
            }
        }
        synthetic(keys, scales.len(), vec![4; n])
    }

    #[test]
    fn points_on_a_line_have_all_variance_in_one_component() {
        let dir = [0.3f32, -0.5, 0.8, 0.1];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut keys = Vec::new();
        for _ in 0..200 {
            let t: f32 = rng.gen_range(-3.0..3.0);
            keys.extend(dir.iter().map(|d| 1.0 + t * d));
        }
        let ds = synthetic(keys, 4, vec![4; 200]);
        let fit = fit_pca(&ds, 1, 0).unwrap();
        assert!((fit.explained_variance_ratio[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn components_are_orthonormal() {
        let ds = gaussian_store(300, &[3.0, 2.0, 1.5, 1.0, 0.5, 0.2], 2);
        let fit = fit_pca(&ds, 4, 0).unwrap();
        let t = &fit.transform;
        for i in 0..4 {
            for j in 0..4 {
                let dot: f64 = t.component(i).iter().zip(t.component(j)).map(|(a, b)| *a as f64 * *b as f64).sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expected).abs() < 1e-6, "{i},{j}: {dot}");
            }
        }
        let ratios = &fit.explained_variance_ratio;
        assert!(ratios.windows(2).all(|w| w[0] >= w[1]));
        assert!(ratios.iter().sum::<f64>() <= 1.0 + 1e-6);
    }

    #[test]
    fn identical_keys_are_degenerate() {
        let ds = synthetic(vec![1.5; 30], 3, vec![4; 10]);
        assert!(fit_pca(&ds, 2, 0).is_err());
    }

    #[test]
    fn bad_target_dimension() {
        let ds = gaussian_store(10, &[1.0, 1.0], 3);
        assert!(fit_pca(&ds, 0, 0).is_err());
        assert!(fit_pca(&ds, 3, 0).is_err());
    }

    #[test]
    fn apply_keeps_entries_and_records_transform() {
        let ds = gaussian_store(50, &[2.0, 1.0, 0.5], 4);
        let fit = fit_pca(&ds, 2, 0).unwrap();
        let out = fit.transform.apply_datastore(&ds).unwrap();
        assert_eq!(out.len(), 50);
        assert_eq!(out.dim(), 2);
        assert_eq!(out.values(), ds.values());
        assert_eq!(out.meta().transform_kinds(), vec!["pca"]);
        assert!(fit.transform.apply(&[0.0, 1.0]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let ds = gaussian_store(40, &[2.0, 1.0, 0.5], 5);
        let t = fit_pca(&ds, 2, 0).unwrap().transform;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pca.bin");
        t.save(&path).unwrap();
        assert_eq!(PcaTransform::load(&path).unwrap(), t);
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 8 + 4 * (3 + 6));
    }

    #[test]
    fn projection_of_two_points_lies_on_first_axis() {
        let a = [0.0f32, 0.0, 0.0];
        let b = [1.0f32, 2.0, 2.0];
        let xy = project_2d(&[&a, &b]);
        let dist = ((xy[0][0] - xy[1][0]).powi(2) + (xy[0][1] - xy[1][1]).powi(2)).sqrt();
        assert!((dist - 3.0).abs() < 1e-9);
        let same = project_2d(&[&a, &a]);
        assert_eq!(same, vec![[0.0, 0.0]; 2]);
    }
}
