//! Retrieval precision, Fréchet distance, matched distance and diversity over
//! latent vectors.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub r_precision: [f64; 3],
    pub fid: f64,
    pub mm_dist: f64,
    pub diversity: f64,
    pub pool_size: usize,
    pub num_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    pub pool_size: usize,
    pub diversity_pairs: usize,
    pub seed: u64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            pool_size: 32,
            diversity_pairs: 300,
            seed: 0,
        }
    }
}

fn check_set(x: &[Vec<f64>], what: &str) -> Result<usize> {
    let d = x.first().map(Vec::len).ok_or_else(|| Error::Parameter(format!("{what} is empty")))?;
    if d == 0 || x.iter().any(|v| v.len() != d) {
        return Err(Error::Shape(format!("{what} has ragged or empty latents")));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what.to_string()));
    }
    Ok(d)
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Top-1/2/3 hit rates of each sample's own text within a random pool.
pub fn r_precision(gen: &[Vec<f64>], text: &[Vec<f64>], pool_size: usize, seed: u64) -> Result<[f64; 3]> {
    let d = check_set(gen, "generated latents")?;
    if check_set(text, "text latents")? != d || gen.len() != text.len() {
        return Err(Error::Shape("generated and text latents must pair up".into()));
    }
    if pool_size < 2 {
        return Err(Error::Parameter("pool_size must be at least 2".into()));
    }
    let n = gen.len();
    if n < pool_size {
        return Err(Error::Parameter(format!("{n} samples is fewer than pool size {pool_size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = [0usize; 3];
    let mut others: Vec<usize> = Vec::with_capacity(n - 1);
    for i in 0..n {
        others.clear();
        others.extend((0..n).filter(|&j| j != i));
        let (chosen, _) = others.partial_shuffle(&mut rng, pool_size - 1);
        let own = euclid(&gen[i], &text[i]);
        // Rank of the matched text; ties count against it.
        let rank = chosen.iter().filter(|&&j| euclid(&gen[i], &text[j]) <= own).count();
        for (k, h) in hits.iter_mut().enumerate() {
            if rank <= k {
                *h += 1;
            }
        }
    }
    Ok(hits.map(|h| h as f64 / n as f64))
}

/// Mean and unbiased covariance.
pub fn gaussian_stats(x: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = check_set(x, "latents")?;
    if x.len() < 2 {
        return Err(Error::Parameter("need at least two latents for a covariance".into()));
    }
    let n = x.len() as f64;
    let mut mu = DVector::zeros(d);
    for v in x {
        mu += DVector::from_column_slice(v);
    }
    mu /= n;
    let mut cov = DMatrix::zeros(d, d);
    for v in x {
        let c = DVector::from_column_slice(v) - &mu;
        cov += &c * c.transpose();
    }
    cov /= n - 1.0;
    Ok((mu, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| if v < 1e-10 { 0.0 } else { v.sqrt() });
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between two Gaussians.
pub fn fid_from_stats(mu1: &DVector<f64>, s1: &DMatrix<f64>, mu2: &DVector<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    if mu1.len() != mu2.len() || s1.shape() != s2.shape() || s1.nrows() != mu1.len() {
        return Err(Error::Shape("Fréchet statistics dimensions".into()));
    }
    let r1 = sym_sqrt(s1);
    let inner = &r1 * s2 * &r1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|&v| if v < 1e-10 { 0.0 } else { v.sqrt() })
        .sum();
    let diff = mu1 - mu2;
    let value = diff.dot(&diff) + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
    Ok(value.max(0.0))
}

pub fn fid(gen: &[Vec<f64>], real: &[Vec<f64>]) -> Result<f64> {
    let (m1, s1) = gaussian_stats(gen)?;
    let (m2, s2) = gaussian_stats(real)?;
    fid_from_stats(&m1, &s1, &m2, &s2)
}

pub fn mm_dist(gen: &[Vec<f64>], text: &[Vec<f64>]) -> Result<f64> {
    let d = check_set(gen, "generated latents")?;
    if check_set(text, "text latents")? != d || gen.len() != text.len() {
        return Err(Error::Shape("generated and text latents must pair up".into()));
    }
    Ok(gen.iter().zip(text).map(|(a, b)| euclid(a, b)).sum::<f64>() / gen.len() as f64)
}

/// Mean distance over `num_pairs` random pairs of distinct samples.
///
/// Pairs come from successive shuffles. Within one shuffle no sample is used
/// twice, and a new shuffle starts when `num_pairs` exceeds half the set.
pub fn diversity(gen: &[Vec<f64>], num_pairs: usize, seed: u64) -> Result<f64> {
    check_set(gen, "generated latents")?;
    if gen.len() < 2 || num_pairs == 0 {
        return Err(Error::Parameter("diversity needs two samples and at least one pair".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..gen.len()).collect();
    let mut total = 0.0;
    let mut taken = 0;
    while taken < num_pairs {
        order.shuffle(&mut rng);
        for p in order.chunks_exact(2) {
            if taken == num_pairs {
                break;
            }
            total += euclid(&gen[p[0]], &gen[p[1]]);
            taken += 1;
        }
    }
    Ok(total / num_pairs as f64)
}

/// All four metrics. `real` supplies the reference distribution for FID.
pub fn evaluate(gen: &[Vec<f64>], text: &[Vec<f64>], real: &[Vec<f64>], cfg: &MetricConfig) -> Result<MetricReport> {
    Ok(MetricReport {
        r_precision: r_precision(gen, text, cfg.pool_size, cfg.seed)?,
        fid: fid(gen, real)?,
        mm_dist: mm_dist(gen, text)?,
        diversity: diversity(gen, cfg.diversity_pairs, cfg.seed)?,
        pool_size: cfg.pool_size,
        num_samples: gen.len(),
    })
}

/// Random latents for tests and chance-level checks.
pub fn random_latents<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Vec<Vec<f64>> {
    use rand_distr::{Distribution, StandardNormal};
    (0..n)
        .map(|_| (0..d).map(|_| StandardNormal.sample(rng)).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Dense `(A·B)^{1/2}` by Denman–Beavers iteration.
    fn denman_beavers(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = a.len();
        let eye: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(i == j)).collect()).collect();
        let (mut y, mut z) = (a.to_vec(), eye);
        for _ in 0..100 {
            let yi = invert(&y);
            let zi = invert(&z);
            let ny = (0..n).map(|i| (0..n).map(|j| 0.5 * (y[i][j] + zi[i][j])).collect()).collect();
            let nz = (0..n).map(|i| (0..n).map(|j| 0.5 * (z[i][j] + yi[i][j])).collect()).collect();
            y = ny;
            z = nz;
        }
        y
    }

    fn invert(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = m.len();
        let mut a: Vec<Vec<f64>> = m
            .iter()
            .enumerate()
            .map(|(i, r)| r.iter().cloned().chain((0..n).map(|j| f64::from(i == j))).collect())
            .collect();
        for c in 0..n {
            let p = (c..n).max_by(|&x, &y| a[x][c].abs().total_cmp(&a[y][c].abs())).unwrap();
            a.swap(c, p);
            let piv = a[c][c];
            a[c].iter_mut().for_each(|v| *v /= piv);
            for r in 0..n {
                if r != c {
                    let f = a[r][c];
                    let row_c = a[c].clone();
                    a[r].iter_mut().zip(row_c).for_each(|(v, w)| *v -= f * w);
                }
            }
        }
        a.into_iter().map(|r| r[n..].to_vec()).collect()
    }

    fn brute_fid(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
        let stats = |s: &[Vec<f64>]| {
            let n = s.len() as f64;
            let d = s[0].len();
            let mu: Vec<f64> = (0..d).map(|k| s.iter().map(|v| v[k]).sum::<f64>() / n).collect();
            let cov: Vec<Vec<f64>> = (0..d)
                .map(|i| {
                    (0..d)
                        .map(|j| s.iter().map(|v| (v[i] - mu[i]) * (v[j] - mu[j])).sum::<f64>() / (n - 1.0))
                        .collect()
                })
                .collect();
            (mu, cov)
        };
        let (m1, c1) = stats(x);
        let (m2, c2) = stats(y);
        let d = m1.len();
        let prod: Vec<Vec<f64>> = (0..d)
            .map(|i| (0..d).map(|j| (0..d).map(|k| c1[i][k] * c2[k][j]).sum()).collect())
            .collect();
        let root = denman_beavers(&prod);
        let dm: f64 = m1.iter().zip(&m2).map(|(a, b)| (a - b).powi(2)).sum();
        dm + (0..d).map(|i| c1[i][i] + c2[i][i] - 2.0 * root[i][i]).sum::<f64>()
    }

    #[test]
    fn fid_closed_forms() {
        let one = |v: f64| DVector::from_element(1, v);
        let unit = DMatrix::from_element(1, 1, 1.0);
        assert!((fid_from_stats(&one(0.0), &unit, &one(1.0), &unit).unwrap() - 1.0).abs() < 1e-8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_latents(50, 4, &mut rng);
        assert!(fid(&x, &x).unwrap().abs() < 1e-8);
        let y = random_latents(60, 4, &mut rng);
        assert!((fid(&x, &y).unwrap() - fid(&y, &x).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn fid_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n in 4..=8 {
            let x: Vec<Vec<f64>> = random_latents(n, 2, &mut rng);
            let y: Vec<Vec<f64>> = random_latents(n, 2, &mut rng)
                .into_iter()
                .map(|v| vec![2.0 * v[0] + 0.5, v[1] - 0.3 * v[0]])
                .collect();
            let a = fid(&x, &y).unwrap();
            let b = brute_fid(&x, &y);
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn r_precision_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_latents(64, 4, &mut rng);
        assert_eq!(r_precision(&x, &x, 32, 0).unwrap(), [1.0; 3]);
        assert!(r_precision(&x[..10], &x[..10], 32, 0).is_err());
        assert!(r_precision(&x, &x, 1, 0).is_err());

        let n = 4000;
        let g = random_latents(n, 8, &mut rng);
        let t = random_latents(n, 8, &mut rng);
        let r = r_precision(&g, &t, 32, 9).unwrap();
        let p = 1.0 / 32.0;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((r[0] - p).abs() < 3.0 * se, "{r:?}");
        assert!(r[0] <= r[1] && r[1] <= r[2]);
    }

    #[test]
    fn distance_examples() {
        let a = vec![vec![0.0], vec![2.0]];
        let b = vec![vec![1.0], vec![3.0]];
        assert_eq!(mm_dist(&a, &a).unwrap(), 0.0);
        assert_eq!(mm_dist(&a, &b).unwrap(), 1.0);
        assert_eq!(diversity(&vec![vec![1.0, 1.0]; 5], 10, 0).unwrap(), 0.0);
        assert_eq!(diversity(&[vec![0.0, 0.0], vec![3.0, 4.0]], 1, 7).unwrap(), 5.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_latents(50, 3, &mut rng);
        assert_eq!(diversity(&x, 300, 5).unwrap(), diversity(&x, 300, 5).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn metrics_invariant_under_rotation(seed in 0u64..1000, angle in 0.0f64..6.283, shift in -2.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_latents(40, 2, &mut rng);
            let t = random_latents(40, 2, &mut rng);
            let r: Vec<Vec<f64>> = random_latents(40, 2, &mut rng).into_iter().map(|v| vec![v[0] + shift, 2.0 * v[1]]).collect();
            let (c, s) = (angle.cos(), angle.sin());
            let rot = |x: &Vec<Vec<f64>>| x.iter().map(|v| vec![c * v[0] - s * v[1], s * v[0] + c * v[1]]).collect::<Vec<_>>();
            let cfg = MetricConfig { pool_size: 8, diversity_pairs: 30, seed: 1 };
            let a = evaluate(&g, &t, &r, &cfg).unwrap();
            let b = evaluate(&rot(&g), &rot(&t), &rot(&r), &cfg).unwrap();
            prop_assert_eq!(a.r_precision, b.r_precision);
            prop_assert!((a.fid - b.fid).abs() < 1e-8);
            prop_assert!((a.mm_dist - b.mm_dist).abs() < 1e-8);
            prop_assert!((a.diversity - b.diversity).abs() < 1e-8);
        }
    }
}
