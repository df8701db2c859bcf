//! Feature scaling, grouped standardization and PCA whitening of data packets.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::sampling::{DataPacket, PACKET_LEN};

/// Retained principal components by default.
pub const DEFAULT_COMPONENTS: usize = 17;

/// Relative eigenvalue floor below which components cannot be selected.
pub const EIGEN_FLOOR: f64 = 1e-12;

/// Feature groups sharing one mean and deviation, with their packet indices.
pub const GROUPS: [(&str, &[usize]); 6] = [
    ("phi", &[0, 6, 7, 8, 9, 21]),
    ("u", &[1, 2, 10, 11, 12, 13, 14, 15, 16, 17]),
    ("d", &[3]),
    ("coords", &[4, 5]),
    ("xxyy", &[18, 19]),
    ("kappa", &[20]),
];

/// Index of the departure value in a packet array.
pub const PHI_D: usize = 21;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub mu: f64,
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingStats {
    pub phi: GroupStats,
    pub u: GroupStats,
    pub d: GroupStats,
    pub coords: GroupStats,
    pub xxyy: GroupStats,
    pub kappa: GroupStats,
    pub n_components: usize,
}

impl TrainingStats {
    fn groups(&self) -> [GroupStats; 6] {
        [self.phi, self.u, self.d, self.coords, self.xxyy, self.kappa]
    }

    /// Per-feature (mean, deviation) in packet order.
    pub fn per_feature(&self) -> [GroupStats; PACKET_LEN] {
        let mut out = [GroupStats { mu: 0.0, sigma: 1.0 }; PACKET_LEN];
        for ((_, idx), g) in GROUPS.iter().zip(self.groups()) {
            for &i in *idx {
                out[i] = g;
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// Row-major `n_components x 22`, rows orthonormal.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
}

impl PcaModel {
    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    /// Whitened coordinates of a standardized vector.
    pub fn project<T: Real>(&self, z: &[T; PACKET_LEN]) -> Vec<T> {
        let c: [T; PACKET_LEN] = std::array::from_fn(|i| z[i] - T::lit(self.mean[i]));
        self.components
            .iter()
            .zip(&self.eigenvalues)
            .map(|(row, &lam)| {
                let mut s = T::zero();
                for (r, v) in row.iter().zip(&c) {
                    s = s + T::lit(*r) * *v;
                }
                s / T::lit(lam.sqrt())
            })
            .collect()
    }

    /// Inverse of [`project`](Self::project); exact only with all components retained.
    pub fn reconstruct(&self, w: &[f64]) -> [f64; PACKET_LEN] {
        let mut out: [f64; PACKET_LEN] = self.mean.clone().try_into().expect("22 means");
        for ((row, &lam), &wi) in self.components.iter().zip(&self.eigenvalues).zip(w) {
            for (o, r) in out.iter_mut().zip(row) {
                *o += r * wi * lam.sqrt();
            }
        }
        out
    }
}

/// Mesh-size scaling: level-set values and `d` divided by `h`, second derivatives times `h^2`,
/// curvature times `h`. Cell coordinates are already in units of `h`.
pub fn h_scale<T: Real>(p: &DataPacket<T>, h: T) -> [T; PACKET_LEN] {
    let mut a = p.to_array();
    for &i in GROUPS[0].1 {
        a[i] = a[i] / h;
    }
    a[3] = a[3] / h;
    a[18] = a[18] * h * h;
    a[19] = a[19] * h * h;
    a[20] = a[20] * h;
    a
}

pub fn standardize<T: Real>(scaled: &[T; PACKET_LEN], stats: &TrainingStats) -> [T; PACKET_LEN] {
    let f = stats.per_feature();
    std::array::from_fn(|i| (scaled[i] - T::lit(f[i].mu)) / T::lit(f[i].sigma))
}

fn pooled(rows: &[[f64; PACKET_LEN]], idx: &[usize], name: &'static str) -> Result<GroupStats> {
    let n = (rows.len() * idx.len()) as f64;
    let mu = rows.iter().flat_map(|r| idx.iter().map(move |&i| r[i])).sum::<f64>() / n;
    let var = rows.iter().flat_map(|r| idx.iter().map(move |&i| (r[i] - mu).powi(2))).sum::<f64>() / n;
    let sigma = var.sqrt();
    let scale = rows.iter().flat_map(|r| idx.iter().map(move |&i| r[i].abs())).fold(0.0, f64::max);
    if !(sigma > 1e-10 * scale) || !sigma.is_finite() {
        return Err(Error::ZeroVariance(name));
    }
    Ok(GroupStats { mu, sigma })
}

/// Fits group statistics and a whitening PCA on training packets (already in standard form).
pub fn fit(packets: &[DataPacket<f64>], h: f64, n_components: usize) -> Result<(TrainingStats, PcaModel)> {
    if !(1..=PACKET_LEN).contains(&n_components) {
        return Err(Error::Config(format!("n_components must be in 1..=22, got {n_components}")));
    }
    if packets.len() < n_components + 1 {
        return Err(Error::NotEnoughSamples { need: n_components + 1, got: packets.len() });
    }
    let scaled: Vec<[f64; PACKET_LEN]> = packets.iter().map(|p| h_scale(p, h)).collect();
    let g: Vec<GroupStats> = GROUPS.iter().map(|(name, idx)| pooled(&scaled, idx, name)).collect::<Result<_>>()?;
    let stats = TrainingStats { phi: g[0], u: g[1], d: g[2], coords: g[3], xxyy: g[4], kappa: g[5], n_components };
    let z: Vec<[f64; PACKET_LEN]> = scaled.iter().map(|r| standardize(r, &stats)).collect();
    let n = z.len() as f64;
    let mean: Vec<f64> = (0..PACKET_LEN).map(|j| z.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let mut cov = DMatrix::<f64>::zeros(PACKET_LEN, PACKET_LEN);
    for r in &z {
        for a in 0..PACKET_LEN {
            let da = r[a] - mean[a];
            for b in a..PACKET_LEN {
                cov[(a, b)] += da * (r[b] - mean[b]);
            }
        }
    }
    for a in 0..PACKET_LEN {
        for b in a..PACKET_LEN {
            let v = cov[(a, b)] / (n - 1.0);
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..PACKET_LEN).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lmax = eig.eigenvalues[order[0]];
    let usable = order.iter().filter(|&&k| eig.eigenvalues[k] > EIGEN_FLOOR * lmax).count();
    if n_components > usable {
        return Err(Error::Config(format!("only {usable} principal components exceed the eigenvalue floor, {n_components} requested")));
    }
    let mut components = Vec::with_capacity(n_components);
    let mut eigenvalues = Vec::with_capacity(n_components);
    for &k in order.iter().take(n_components) {
        let mut row: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let big = row.iter().copied().fold(0.0_f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if big < 0.0 {
            row.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(row);
        eigenvalues.push(eig.eigenvalues[k]);
    }
    Ok((stats, PcaModel { mean, components, eigenvalues }))
}

/// Whitened principal coordinates of a packet (length `n_components`).
pub fn transform<T: Real>(p: &DataPacket<T>, stats: &TrainingStats, pca: &PcaModel, h: T) -> Result<Vec<T>> {
    let z = standardize(&h_scale(p, h), stats);
    let out = pca.project(&z);
    if out.iter().all(|v| v.is_finite()) {
        Ok(out)
    } else {
        Err(Error::NonFiniteValue("preprocessed packet".into()))
    }
}

/// Network input: the whitened coordinates followed by the scaled departure value.
pub fn network_input<T: Real>(p: &DataPacket<T>, stats: &TrainingStats, pca: &PcaModel, h: T) -> Result<Vec<T>> {
    let mut v = transform(p, stats, pca, h)?;
    v.push(p.phi_d / h);
    Ok(v)
}

/// Row-major batch of network inputs.
pub fn network_inputs<T: Real>(packets: &[DataPacket<T>], stats: &TrainingStats, pca: &PcaModel, h: T) -> Result<Vec<T>> {
    let rows: Vec<Vec<T>> = packets.par_iter().map(|p| network_input(p, stats, pca, h)).collect::<Result<_>>()?;
    Ok(rows.concat())
}

pub fn transform_batch<T: Real>(packets: &[DataPacket<T>], stats: &TrainingStats, pca: &PcaModel, h: T) -> Result<Vec<Vec<T>>> {
    packets.par_iter().map(|p| transform(p, stats, pca, h)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_packets(n: usize, seed: u64) -> Vec<DataPacket<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let a: [f64; PACKET_LEN] = std::array::from_fn(|i| rng.gen_range(-1.0..1.0) * (1.0 + i as f64 * 0.1));
                DataPacket::from_array(&a)
            })
            .collect()
    }

    #[test]
    fn identical_packets_rejected() {
        let p = random_packets(1, 1)[0];
        let e = fit(&vec![p; 50], 0.1, 17).unwrap_err();
        assert!(matches!(e, Error::ZeroVariance("d")), "{e}");
    }

    #[test]
    fn whitening_and_reconstruction() {
        let ps = random_packets(1000, 2);
        let (stats, pca) = fit(&ps, 0.5, 22).unwrap();
        for (i, r) in pca.components.iter().enumerate() {
            for (j, s) in pca.components.iter().enumerate() {
                let d: f64 = r.iter().zip(s).map(|(a, b)| a * b).sum();
                assert!((d - (i == j) as u8 as f64).abs() < 1e-10);
            }
        }
        assert!(pca.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        let w = transform_batch(&ps, &stats, &pca, 0.5).unwrap();
        for k in 0..22 {
            for l in 0..22 {
                let c = w.iter().map(|r| r[k] * r[l]).sum::<f64>() / (w.len() as f64 - 1.0);
                let m = |i: usize| w.iter().map(|r| r[i]).sum::<f64>() / w.len() as f64;
                let c = c - m(k) * m(l) * w.len() as f64 / (w.len() as f64 - 1.0);
                assert!((c - (k == l) as u8 as f64).abs() < 1e-6, "{k} {l} {c}");
            }
        }
        for (p, wi) in ps.iter().zip(&w) {
            let z = standardize(&h_scale(p, 0.5), &stats);
            let back = pca.reconstruct(wi);
            for (a, b) in z.iter().zip(&back) {
                assert!((a - b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn scaling_rules() {
        let mut p = random_packets(1, 3)[0];
        p.d = 0.25;
        p.phixx_d = 3.0;
        p.kappa_a = -2.0;
        let s = h_scale(&p, 0.25);
        assert_eq!((s[3], s[18], s[20]), (1.0, 3.0 / 16.0, -0.5));
        assert_eq!(s[4], p.xd[0]);
    }

    #[test]
    fn batch_equals_single() {
        let ps = random_packets(1000, 4);
        let (stats, pca) = fit(&ps, 0.1, 17).unwrap();
        let flat = network_inputs(&ps, &stats, &pca, 0.1).unwrap();
        for (i, p) in ps.iter().enumerate() {
            let one = network_input(p, &stats, &pca, 0.1).unwrap();
            assert_eq!(&flat[i * 18..(i + 1) * 18], &one[..]);
        }
    }

    #[test]
    fn means_map_to_projected_mean() {
        let ps = random_packets(200, 5);
        let (stats, pca) = fit(&ps, 1.0, 17).unwrap();
        let f = stats.per_feature();
        let a: [f64; PACKET_LEN] = std::array::from_fn(|i| f[i].mu);
        let out = transform(&DataPacket::from_array(&a), &stats, &pca, 1.0).unwrap();
        let zero = pca.project(&[0.0; PACKET_LEN]);
        assert_eq!(out, zero);
    }

    #[test]
    fn scale_consistency() {
        let ps = random_packets(200, 6);
        let (stats, pca) = fit(&ps, 1.0, 17).unwrap();
        let p = ps[0];
        let h2 = 0.125;
        let mut a = p.to_array();
        for &i in GROUPS[0].1 {
            a[i] *= h2;
        }
        a[3] *= h2;
        a[18] /= h2 * h2;
        a[19] /= h2 * h2;
        a[20] /= h2;
        let q = DataPacket::from_array(&a);
        assert_eq!(transform(&p, &stats, &pca, 1.0).unwrap(), transform(&q, &stats, &pca, h2).unwrap());
    }
}
