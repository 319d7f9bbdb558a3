//! Latent priors, sampling, and categorical information measures (nats).

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const PROB_TOL: f64 = 1e-9;

/// Prior over the latent triple: `y ~ Mult(pi)`, `h ~ N(0, I)`, `z ~ N(0, I)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub k: usize,
    pub pi: Vec<f64>,
    pub d_h: usize,
    pub d_z: usize,
}

impl PriorSpec {
    /// Uniform category prior.
    pub fn uniform(k: usize, d_h: usize, d_z: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::config("number of clusters k must be at least 1"));
        }
        let spec = PriorSpec { k, pi: vec![1.0 / k as f64; k], d_h, d_z };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("number of clusters k must be at least 1"));
        }
        if self.pi.len() != self.k {
            return Err(Error::config(format!("pi has {} entries, expected k = {}", self.pi.len(), self.k)));
        }
        check_probabilities(&self.pi).map_err(|e| Error::config(format!("pi: {e}")))
    }

    /// Width of the full latent code `[y, h, z]`.
    pub fn latent_dim(&self) -> usize {
        self.k + self.d_h + self.d_z
    }
}

/// One draw of the structured latent code plus noise.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub y: Vec<f64>,
    pub h: Vec<f64>,
    pub z: Vec<f64>,
}

impl LatentCode {
    pub fn sample<R: Rng + ?Sized>(prior: &PriorSpec, rng: &mut R) -> Result<Self> {
        Ok(LatentCode {
            y: sample_multinoulli(&prior.pi, rng)?,
            h: sample_gaussian(prior.d_h, rng),
            z: sample_gaussian(prior.d_z, rng),
        })
    }
}

fn check_probabilities(p: &[f64]) -> std::result::Result<(), String> {
    if p.is_empty() {
        return Err("empty probability vector".into());
    }
    if let Some(bad) = p.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(format!("entry {bad} is not a nonnegative finite number"));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > PROB_TOL {
        return Err(format!("entries sum to {total}, not 1"));
    }
    Ok(())
}

/// A batch of prior draws stored column-blocked as tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorBatch {
    /// `n×K` one-hot rows.
    pub y: Tensor,
    pub h: Option<Tensor>,
    pub z: Option<Tensor>,
}

impl PriorBatch {
    /// `n` independent draws of `(y, h, z)`, sampled row by row.
    pub fn sample<R: Rng + ?Sized>(prior: &PriorSpec, n: usize, rng: &mut R) -> Result<Self> {
        let mut y = Vec::with_capacity(n * prior.k);
        let mut h = Vec::with_capacity(n * prior.d_h);
        let mut z = Vec::with_capacity(n * prior.d_z);
        for _ in 0..n {
            let code = LatentCode::sample(prior, rng)?;
            y.extend(code.y);
            h.extend(code.h);
            z.extend(code.z);
        }
        let block = |data: Vec<f64>, d: usize| -> Result<Option<Tensor>> {
            if d == 0 {
                Ok(None)
            } else {
                Tensor::new(vec![n, d], data).map(Some)
            }
        };
        Ok(PriorBatch { y: Tensor::new(vec![n, prior.k], y)?, h: block(h, prior.d_h)?, z: block(z, prior.d_z)? })
    }
}

/// One-hot draw with `P(k) = pi[k]`.
pub fn sample_multinoulli<R: Rng + ?Sized>(pi: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    check_probabilities(pi).map_err(Error::Config)?;
    let u: f64 = rng.random();
    let mut cumulative = 0.0;
    // Fall back to the last category with mass if rounding leaves u above the total.
    let mut chosen = pi.iter().rposition(|&p| p > 0.0).unwrap_or(0);
    for (k, &p) in pi.iter().enumerate() {
        cumulative += p;
        if u < cumulative && p > 0.0 {
            chosen = k;
            break;
        }
    }
    let mut out = vec![0.0; pi.len()];
    out[chosen] = 1.0;
    Ok(out)
}

/// `dim` i.i.d. standard normal values.
pub fn sample_gaussian<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// `-Σ p ln p`, with `0 ln 0 = 0`.
pub fn entropy_categorical(p: &[f64]) -> Result<f64> {
    if let Some(bad) = p.iter().find(|v| **v < 0.0 || !v.is_finite()) {
        return Err(Error::Invalid(format!("entropy of invalid probability {bad}")));
    }
    Ok(-p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>())
}

/// `KL(q ‖ p) = Σ q ln(q/p)`; requires `p > 0` wherever `q > 0`.
pub fn kl_categorical(q: &[f64], p: &[f64]) -> Result<f64> {
    if q.len() != p.len() {
        return Err(Error::shape(format!("kl: lengths {} and {}", q.len(), p.len())));
    }
    let mut total = 0.0;
    for (k, (&qk, &pk)) in q.iter().zip(p).enumerate() {
        if qk < 0.0 || pk < 0.0 {
            return Err(Error::Invalid(format!("kl: negative probability at index {k}")));
        }
        if qk == 0.0 {
            continue;
        }
        if pk == 0.0 {
            return Err(Error::Invalid(format!("kl: q has mass at index {k} where p is zero")));
        }
        total += qk * (qk / pk).ln();
    }
    Ok(total.max(0.0))
}

/// Batch estimate of the aggregated posterior: the row mean.
pub fn batch_marginal(rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = rows.first().ok_or_else(|| Error::Invalid("batch_marginal of an empty batch".into()))?;
    let k = first.len();
    let mut out = vec![0.0; k];
    for row in rows {
        if row.len() != k {
            return Err(Error::shape("batch_marginal: ragged rows"));
        }
        for (acc, v) in out.iter_mut().zip(row) {
            *acc += v;
        }
    }
    let n = rows.len() as f64;
    out.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn probs(k: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.0f64..1.0, k).prop_filter_map("nonzero", |v| {
            let s: f64 = v.iter().sum();
            (s > 1e-6).then(|| v.iter().map(|x| x / s).collect())
        })
    }

    #[test]
    fn degenerate_priors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pi = [0.0, 0.0, 1.0, 0.0];
        for _ in 0..100 {
            assert_eq!(sample_multinoulli(&pi, &mut rng).unwrap(), vec![0.0, 0.0, 1.0, 0.0]);
        }
        assert_eq!(sample_multinoulli(&[1.0], &mut rng).unwrap(), vec![1.0]);
        assert!(sample_multinoulli(&[0.5, 0.6], &mut rng).is_err());
        assert!(sample_multinoulli(&[1.5, -0.5], &mut rng).is_err());
    }

    #[test]
    fn multinoulli_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pi = vec![0.1; 10];
        let draws = 100_000;
        let mut counts = [0usize; 10];
        for _ in 0..draws {
            let y = sample_multinoulli(&pi, &mut rng).unwrap();
            counts[y.iter().position(|&v| v == 1.0).unwrap()] += 1;
        }
        let mut chi2 = 0.0;
        for &c in &counts {
            let f = c as f64 / draws as f64;
            assert!((f - 0.1).abs() < 0.005, "frequency {f}");
            let e = draws as f64 * 0.1;
            chi2 += (c as f64 - e).powi(2) / e;
        }
        // chi-square critical value, 9 dof, alpha = 0.01
        assert!(chi2 < 21.666, "chi2 = {chi2}");
    }

    #[test]
    fn gaussian_moments_and_replay() {
        assert!(sample_gaussian(0, &mut ChaCha8Rng::seed_from_u64(1)).is_empty());
        let xs = sample_gaussian(100_000, &mut ChaCha8Rng::seed_from_u64(3));
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        assert!(mean.abs() < 0.02);
        assert!((0.98..=1.02).contains(&var));
        let again = sample_gaussian(100_000, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(xs, again);
    }

    #[test]
    fn entropy_values() {
        assert!((entropy_categorical(&[0.1; 10]).unwrap() - 10f64.ln()).abs() < 1e-12);
        assert_eq!(entropy_categorical(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        let direct = -(0.25f64 * 0.25f64.ln() + 0.75 * 0.75f64.ln());
        let h = entropy_categorical(&[0.25, 0.75]).unwrap();
        assert!((h - direct).abs() < 1e-15);
        assert!((h - 0.562335).abs() < 1e-6);
        assert!(entropy_categorical(&[-0.1, 1.1]).is_err());
    }

    #[test]
    fn kl_values() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(kl_categorical(&p, &p).unwrap(), 0.0);
        assert!((kl_categorical(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(kl_categorical(&[0.5, 0.5], &[1.0, 0.0]).is_err());
        assert!(kl_categorical(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn marginal_basics() {
        let p = vec![0.2, 0.8];
        let m = batch_marginal(&[p.clone(), p.clone(), p.clone()]).unwrap();
        assert!(m.iter().zip(&p).all(|(a, b)| (a - b).abs() < 1e-15));
        assert_eq!(batch_marginal(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(), vec![0.5, 0.5]);
        assert!(batch_marginal(&[]).is_err());
    }

    proptest! {
        #[test]
        fn entropy_bounds(p in (1usize..12).prop_flat_map(probs)) {
            let h = entropy_categorical(&p).unwrap();
            prop_assert!(h >= 0.0);
            prop_assert!(h <= (p.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn kl_against_uniform_identity(q in (1usize..12).prop_flat_map(probs)) {
            let k = q.len();
            let uniform = vec![1.0 / k as f64; k];
            let kl = kl_categorical(&q, &uniform).unwrap();
            let identity = (k as f64).ln() - entropy_categorical(&q).unwrap();
            prop_assert!(kl >= 0.0);
            prop_assert!((kl - identity.max(0.0)).abs() < 1e-9);
        }

        #[test]
        fn marginal_entropy_dominates_mean_entropy(
            batch in (2usize..6).prop_flat_map(|k| proptest::collection::vec(probs(k), 1..20))
        ) {
            let m = batch_marginal(&batch).unwrap();
            // independent summation oracle
            for j in 0..m.len() {
                let mut s = 0.0;
                for row in &batch { s += row[j]; }
                prop_assert!((m[j] - s / batch.len() as f64).abs() < 1e-12);
            }
            let mean_h: f64 = batch.iter().map(|r| entropy_categorical(r).unwrap()).sum::<f64>() / batch.len() as f64;
            prop_assert!(entropy_categorical(&m).unwrap() >= mean_h - 1e-12);
        }

        #[test]
        fn sampling_replays(seed in any::<u64>()) {
            let prior = PriorSpec::uniform(5, 3, 2).unwrap();
            let a = LatentCode::sample(&prior, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = LatentCode::sample(&prior, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
