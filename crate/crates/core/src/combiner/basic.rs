use super::{check_temperature, interpolate, knn_distribution, Combination, Combiner};
use crate::distribution::Distribution;
use crate::error::{Error, Result};
use crate::retriever::NeighborSet;

/// Fixed-weight interpolation of the retrieval and model distributions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasicCombiner {
    lambda: f64,
    temperature: f64,
    k: usize,
}

impl BasicCombiner {
    pub fn new(lambda: f64, temperature: f64, k: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::param(format!("lambda {lambda} outside [0, 1]")));
        }
        check_temperature(temperature)?;
        if k == 0 {
            return Err(Error::param("k must be at least 1"));
        }
        Ok(Self { lambda, temperature, k })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

impl Combiner for BasicCombiner {
    fn name(&self) -> &'static str {
        "basic"
    }

    fn k(&self) -> usize {
        self.k
    }

    fn temperature(&self) -> f64 {
        self.temperature
    }

    fn combine(&self, neighbors: &NeighborSet, p_nmt: &Distribution) -> Result<Combination> {
        let p_knn = knn_distribution(neighbors, self.temperature, p_nmt.len())?;
        let p_final = interpolate(&p_knn, p_nmt, self.lambda)?;
        Ok(Combination {
            p_knn,
            p_final,
            option_weights: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::combiner::tests::neighbors;

    #[test]
    fn zero_lambda_returns_model_distribution() {
        let c = BasicCombiner::new(0.0, 10.0, 2).unwrap();
        let p_nmt = Distribution::new(vec![0.0, 0.0, 0.0, 0.0, 0.25, 0.75]).unwrap();
        let out = c.combine(&neighbors(&[(0.0, 4), (1.0, 5)]), &p_nmt).unwrap();
        assert_eq!(out.p_final, p_nmt);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(BasicCombiner::new(-0.5, 1.0, 1).is_err());
        assert!(BasicCombiner::new(0.5, 0.0, 1).is_err());
        assert!(BasicCombiner::new(0.5, 1.0, 0).is_err());
    }
}
