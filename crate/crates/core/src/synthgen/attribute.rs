//! Attribute world: binary attributes obtained by thresholding linear
//! scores of shared Gaussian latent factors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{LabelBundle, LabelLayout};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributeWorld {
    pub factors: usize,
    /// `n × factors`; row i scores attribute i.
    pub loadings: Vec<Vec<f64>>,
    /// Attribute i is on iff its score exceeds `thresholds[i]`.
    pub thresholds: Vec<f64>,
    /// Std-dev of the per-attribute score noise.
    pub score_noise: f64,
    /// Groups of mutually exclusive attributes; exactly the arg-max score
    /// within a group is on.
    pub exclusive_groups: Vec<Vec<usize>>,
    /// Observed feature channels, each a noisy random mixture of the latents.
    pub mixture_width: usize,
    pub feature_noise: f64,
    pub distractors: usize,
    /// Seed for the latent-to-feature mixing matrix.
    pub mixing_seed: u64,
}

impl Default for AttributeWorld {
    /// Twelve attributes over six factors. Attributes 0 and 1 are coupled at
    /// φ = -0.6; 2 and 3 are positively coupled; 8–11 form one exclusive group.
    fn default() -> Self {
        let factors = 6;
        let n = 12;
        let mut w = AttributeWorld {
            factors,
            loadings: vec![vec![0.0; factors]; n],
            thresholds: vec![0.0; n],
            score_noise: 0.5,
            exclusive_groups: vec![vec![8, 9, 10, 11]],
            mixture_width: 16,
            feature_noise: 0.5,
            distractors: 4,
            mixing_seed: 0x5eed,
        };
        w.couple(0, 1, -0.6, 0).expect("valid default coupling");
        w.loadings[2] = vec![-0.5, 0.9, 0.0, 0.0, 0.0, 0.0];
        w.loadings[3] = vec![-0.4, 0.8, 0.3, 0.0, 0.0, 0.0];
        w.loadings[4] = vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
        w.loadings[5] = vec![0.0, 0.0, 0.6, 0.8, 0.0, 0.0];
        w.loadings[6] = vec![0.3, 0.0, 0.0, -0.9, 0.0, 0.0];
        w.loadings[7] = vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        w.loadings[8] = vec![0.0, 0.0, 0.0, 0.0, 0.9, 0.4];
        w.loadings[9] = vec![0.0, 0.0, 0.0, 0.0, -0.9, 0.4];
        w.loadings[10] = vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        w.loadings[11] = vec![0.0, 0.0, 0.0, 0.0, 0.0, -1.0];
        w.thresholds[5] = 0.5;
        w.thresholds[7] = -0.3;
        w
    }
}

impl AttributeWorld {
    pub fn attributes(&self) -> usize {
        self.loadings.len()
    }

    pub fn layout(&self) -> LabelLayout {
        LabelLayout::attribute(self.attributes())
    }

    pub fn feature_width(&self) -> usize {
        self.mixture_width + self.distractors
    }

    /// Sets rows `a` and `b` to load only on `factor` with zero thresholds
    /// so that the binary attributes have Pearson correlation `phi`.
    ///
    /// For zero-threshold bivariate-normal scores with correlation ρ the
    /// binary correlation is `(2/π) asin ρ`, so ρ = sin(π φ / 2).
    pub fn couple(&mut self, a: usize, b: usize, phi: f64, factor: usize) -> Result<()> {
        if a == b || a >= self.attributes() || b >= self.attributes() || factor >= self.factors {
            return Err(Error::config("couple: attribute or factor index out of range"));
        }
        if !(phi > -1.0 && phi < 1.0) || phi == 0.0 {
            return Err(Error::config("couple: phi must lie in (-1, 0) or (0, 1)"));
        }
        if self.score_noise <= 0.0 {
            return Err(Error::config("couple: needs positive score noise"));
        }
        let rho = (std::f64::consts::FRAC_PI_2 * phi).sin();
        let r = self.score_noise * (rho.abs() / (1.0 - rho.abs())).sqrt();
        let mut row_a = vec![0.0; self.factors];
        let mut row_b = vec![0.0; self.factors];
        row_a[factor] = r;
        row_b[factor] = rho.signum() * r;
        self.loadings[a] = row_a;
        self.loadings[b] = row_b;
        self.thresholds[a] = 0.0;
        self.thresholds[b] = 0.0;
        Ok(())
    }

    /// Correlation between the latent scores of attributes `a` and `b`.
    pub fn score_correlation(&self, a: usize, b: usize) -> f64 {
        let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| x * y).sum::<f64>();
        let s2 = self.score_noise * self.score_noise;
        let (la, lb) = (&self.loadings[a], &self.loadings[b]);
        dot(la, lb) / ((dot(la, la) + s2) * (dot(lb, lb) + s2)).sqrt()
    }

    /// Closed-form binary correlation for a zero-threshold pair outside any
    /// exclusive group.
    pub fn expected_phi(&self, a: usize, b: usize) -> f64 {
        std::f64::consts::FRAC_2_PI * self.score_correlation(a, b).asin()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.attributes();
        if n == 0 || self.factors == 0 {
            return Err(Error::config("attribute world needs attributes and factors"));
        }
        if self.thresholds.len() != n {
            return Err(Error::config(format!(
                "{} thresholds for {n} attributes",
                self.thresholds.len()
            )));
        }
        for (i, row) in self.loadings.iter().enumerate() {
            if row.len() != self.factors {
                return Err(Error::config(format!(
                    "loading row {i} has {} entries, expected {}",
                    row.len(),
                    self.factors
                )));
            }
            if row.iter().all(|&v| v == 0.0) {
                return Err(Error::config(format!("loading row {i} is all zero")));
            }
        }
        let mut seen = vec![false; n];
        for g in &self.exclusive_groups {
            if g.len() < 2 {
                return Err(Error::config("exclusive groups need at least two attributes"));
            }
            for &i in g {
                if i >= n || seen[i] {
                    return Err(Error::config(format!("exclusive group index {i} invalid or repeated")));
                }
                seen[i] = true;
            }
        }
        let (mut neg, mut pos) = (false, false);
        for a in 0..n {
            for b in a + 1..n {
                let c = self.score_correlation(a, b);
                neg |= c < 0.0;
                pos |= c > 0.0;
            }
        }
        if !(neg && pos) {
            return Err(Error::config(
                "loading matrix needs at least one negative and one positive cross-attribute coupling",
            ));
        }
        if self.score_noise < 0.0 || self.feature_noise < 0.0 {
            return Err(Error::config("noise levels must be >= 0"));
        }
        if self.mixture_width == 0 {
            return Err(Error::config("mixture_width must be positive"));
        }
        Ok(())
    }

    /// `mixture_width × factors` standard-normal mixing matrix.
    pub fn mixing(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.mixing_seed);
        (0..self.mixture_width)
            .map(|_| (0..self.factors).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect()
    }

    /// Latent draw: `factors` standard normals then `n` score-noise normals.
    pub fn sample_latent<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.factors + self.attributes());
        for _ in 0..self.factors {
            v.push(StandardNormal.sample(rng));
        }
        for _ in 0..self.attributes() {
            let e: f64 = StandardNormal.sample(rng);
            v.push(self.score_noise * e);
        }
        v
    }

    /// Attribute labels as an exact function of the latent draw.
    pub fn labels(&self, latent: &[f64]) -> Result<LabelBundle> {
        let (f, n) = (self.factors, self.attributes());
        if latent.len() != f + n {
            return Err(Error::contract(format!(
                "attribute latent needs {} values, got {}",
                f + n,
                latent.len()
            )));
        }
        let z = &latent[..f];
        let scores: Vec<f64> = self
            .loadings
            .iter()
            .zip(&latent[f..])
            .map(|(row, e)| row.iter().zip(z).map(|(l, zi)| l * zi).sum::<f64>() + e)
            .collect();
        let mut attrs: Vec<f64> = scores
            .iter()
            .zip(&self.thresholds)
            .map(|(s, t)| if s > t { 1.0 } else { 0.0 })
            .collect();
        for g in &self.exclusive_groups {
            let best = *g
                .iter()
                .max_by(|&&i, &&j| scores[i].total_cmp(&scores[j]).then(j.cmp(&i)))
                .expect("nonempty group");
            for &i in g {
                attrs[i] = if i == best { 1.0 } else { 0.0 };
            }
        }
        Ok(LabelBundle::attribute(attrs))
    }

    pub fn features<R: Rng + ?Sized>(&self, latent: &[f64], mixing: &[Vec<f64>], rng: &mut R) -> Vec<f64> {
        let z = &latent[..self.factors];
        let mut x = Vec::with_capacity(self.feature_width());
        for row in mixing {
            let e: f64 = StandardNormal.sample(rng);
            x.push(row.iter().zip(z).map(|(m, zi)| m * zi).sum::<f64>() + self.feature_noise * e);
        }
        for _ in 0..self.distractors {
            x.push(StandardNormal.sample(rng));
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_coupled() {
        let w = AttributeWorld::default();
        w.validate().unwrap();
        assert!((w.expected_phi(0, 1) + 0.6).abs() < 1e-12);
        assert!(w.score_correlation(2, 3) > 0.0);
    }

    #[test]
    fn zero_row_is_config_error() {
        let mut w = AttributeWorld::default();
        w.loadings[4] = vec![0.0; w.factors];
        assert!(matches!(w.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn needs_both_signs_of_coupling() {
        let mut w = AttributeWorld::default();
        w.exclusive_groups.clear();
        w.loadings = (0..w.attributes())
            .map(|_| vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0])
            .collect();
        assert!(w.validate().is_err());
    }

    #[test]
    fn exclusive_group_emits_one() {
        let w = AttributeWorld::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let latent = w.sample_latent(&mut rng);
            let a = w.labels(&latent).unwrap().attributes.unwrap();
            assert_eq!(a[8..12].iter().sum::<f64>(), 1.0);
        }
    }
}
