use nalgebra::{DMatrix, DVector};

use super::{symmetrise, weighted_gram, DataTerm, Subsample};
use crate::error::{Error, Result};

/// Data for soft-max regression over `L` classes.
#[derive(Debug, Clone)]
pub struct MultiClassDataset {
    features: DMatrix<f64>,
    labels: DMatrix<f64>,
}

impl MultiClassDataset {
    /// `features` is `D × N`; `labels` is the `N × L` one-hot matrix.
    pub fn new(features: DMatrix<f64>, labels: DMatrix<f64>) -> Result<Self> {
        if labels.nrows() != features.ncols() {
            return Err(Error::dims(
                "one-hot label rows",
                features.ncols(),
                labels.nrows(),
            ));
        }
        if labels.ncols() == 0 {
            return Err(Error::invalid("at least one class is required"));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("features contain non-finite entries"));
        }
        for (n, row) in labels.row_iter().enumerate() {
            let binary = row.iter().all(|&v| v == 0.0 || v == 1.0);
            if !binary || row.sum() != 1.0 {
                return Err(Error::invalid(format!("label row {n} is not one-hot")));
            }
        }
        Ok(MultiClassDataset { features, labels })
    }

    /// One-hot encode class indices in `0..classes`.
    pub fn from_classes(
        features: DMatrix<f64>,
        classes: &[usize],
        num_classes: usize,
    ) -> Result<Self> {
        if let Some(&bad) = classes.iter().find(|&&c| c >= num_classes) {
            return Err(Error::invalid(format!("class index {bad} out of range")));
        }
        let mut labels = DMatrix::zeros(classes.len(), num_classes);
        for (n, &c) in classes.iter().enumerate() {
            labels[(n, c)] = 1.0;
        }
        MultiClassDataset::new(features, labels)
    }

    pub fn feature_dim(&self) -> usize {
        self.features.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.ncols()
    }

    pub fn len(&self) -> usize {
        self.features.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn labels(&self) -> &DMatrix<f64> {
        &self.labels
    }

    fn check(&self, theta: &DVector<f64>) -> Result<()> {
        let expected = self.feature_dim() * self.num_classes();
        if theta.len() != expected {
            return Err(Error::dims(
                "stacked parameter vector",
                expected,
                theta.len(),
            ));
        }
        Ok(())
    }

    /// Activations `a_{nl} = θ_lᵀφ_n` as an `N × L` matrix.
    fn activations(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let d = self.feature_dim();
        let blocks = DMatrix::from_column_slice(d, self.num_classes(), theta.as_slice());
        self.features.tr_mul(&blocks)
    }

    /// Row-wise soft-max of the activations together with `ln y_{nl}`.
    fn softmax(&self, theta: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut log_y = self.activations(theta);
        for mut row in log_y.row_iter_mut() {
            let max = row.max();
            let lse = max + row.iter().map(|&a| (a - max).exp()).sum::<f64>().ln();
            row.add_scalar_mut(-lse);
        }
        let y = log_y.map(f64::exp);
        (y, log_y)
    }

    fn subset(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::invalid(format!("subset index {bad} out of range")));
        }
        Ok(MultiClassDataset {
            features: self.features.select_columns(indices),
            labels: self.labels.select_rows(indices),
        })
    }
}

/// `-Σ_n Σ_l t_{nl} ln y_{nl}(θ)` with `θ = (θ_1, …, θ_L)` stacked.
pub fn multiclass_nll(theta: &DVector<f64>, data: &MultiClassDataset) -> Result<f64> {
    data.check(theta)?;
    let (_, log_y) = data.softmax(theta);
    Ok(-log_y.component_mul(&data.labels).sum())
}

/// Block `l` of the result is `Σ_n (y_{nl} - t_{nl}) φ_n`.
pub fn multiclass_grad(theta: &DVector<f64>, data: &MultiClassDataset) -> Result<DVector<f64>> {
    data.check(theta)?;
    let (y, _) = data.softmax(theta);
    let blocks = &data.features * (y - &data.labels);
    Ok(DVector::from_column_slice(blocks.as_slice()))
}

/// Blocks `Σ_n y_{nl}(δ_{lj} - y_{nj}) φ_nφ_nᵀ`.
pub fn multiclass_hessian(theta: &DVector<f64>, data: &MultiClassDataset) -> Result<DMatrix<f64>> {
    data.check(theta)?;
    let (y, _) = data.softmax(theta);
    let d = data.feature_dim();
    let l = data.num_classes();
    let mut h = DMatrix::zeros(d * l, d * l);
    for a in 0..l {
        for b in a..l {
            let w = DVector::from_fn(data.len(), |n, _| {
                let delta = if a == b { 1.0 } else { 0.0 };
                y[(n, a)] * (delta - y[(n, b)])
            });
            let block = weighted_gram(&data.features, &w);
            h.view_mut((a * d, b * d), (d, d)).copy_from(&block);
            h.view_mut((b * d, a * d), (d, d))
                .copy_from(&block.transpose());
        }
    }
    symmetrise(&mut h);
    Ok(h)
}

/// Soft-max likelihood as a [`DataTerm`] on the stacked parameter vector.
#[derive(Debug, Clone)]
pub struct MultiClassTerm {
    data: MultiClassDataset,
    scale: f64,
}

impl MultiClassTerm {
    pub fn new(data: MultiClassDataset) -> Self {
        MultiClassTerm { data, scale: 1.0 }
    }

    pub fn data(&self) -> &MultiClassDataset {
        &self.data
    }
}

impl DataTerm for MultiClassTerm {
    fn dim(&self) -> usize {
        self.data.feature_dim() * self.data.num_classes()
    }

    fn num_data(&self) -> usize {
        self.data.len()
    }

    fn potential(&self, theta: &DVector<f64>) -> f64 {
        let (_, log_y) = self.data.softmax(theta);
        -self.scale * log_y.component_mul(&self.data.labels).sum()
    }

    fn gradient(&self, theta: &DVector<f64>) -> DVector<f64> {
        let (y, _) = self.data.softmax(theta);
        let blocks = &self.data.features * (y - &self.data.labels);
        DVector::from_column_slice(blocks.as_slice()) * self.scale
    }

    fn hessian(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        multiclass_hessian(theta, &self.data).expect("dimension checked by caller") * self.scale
    }
}

impl Subsample for MultiClassTerm {
    fn subsample(&self, indices: &[usize], scale: f64) -> Result<Self> {
        Ok(MultiClassTerm {
            data: self.data.subset(indices)?,
            scale: self.scale * scale,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn instance(d: usize, n: usize, l: usize, seed: u64) -> MultiClassDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phi = DMatrix::from_fn(d, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let classes: Vec<usize> = (0..n).map(|_| rng.random_range(0..l)).collect();
        MultiClassDataset::from_classes(phi, &classes, l).unwrap()
    }

    #[test]
    fn gradient_blocks_sum_to_zero() {
        let data = instance(3, 20, 4, 1);
        let theta = DVector::from_fn(12, |i, _| (i as f64 * 0.37).sin());
        let g = multiclass_grad(&theta, &data).unwrap();
        let mut sum = DVector::zeros(3);
        for l in 0..4 {
            sum += g.rows(3 * l, 3);
        }
        assert!(sum.amax() < 1e-12);
    }

    #[test]
    fn single_class_is_flat() {
        let data = instance(2, 5, 1, 2);
        let theta = DVector::from_vec(vec![1.0, -3.0]);
        assert!(multiclass_grad(&theta, &data).unwrap().amax() < 1e-15);
        assert!(multiclass_nll(&theta, &data).unwrap().abs() < 1e-15);
    }

    #[test]
    fn two_classes_reduce_to_binary_logistic() {
        let data = instance(2, 8, 2, 3);
        let theta = DVector::from_vec(vec![0.4, -0.2, -0.1, 0.3]);
        let w = theta.rows(0, 2) - theta.rows(2, 2);
        let labels: Vec<u8> = (0..8).map(|n| data.labels()[(n, 0)] as u8).collect();
        let binary = super::super::Dataset::new(data.features().clone(), labels).unwrap();
        let v = super::super::nll_data(&w, &binary, &super::super::ClipPolicy::identity()).unwrap();
        assert!((multiclass_nll(&theta, &data).unwrap() - v).abs() < 1e-12);
    }

    #[test]
    fn rejects_malformed_labels() {
        let phi = DMatrix::zeros(2, 2);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        assert!(MultiClassDataset::new(phi.clone(), bad).is_err());
        let frac = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.0, 1.0]);
        assert!(MultiClassDataset::new(phi.clone(), frac).is_err());
        let data = MultiClassDataset::from_classes(phi, &[0, 1], 2).unwrap();
        assert!(multiclass_nll(&DVector::zeros(3), &data).is_err());
    }

    #[test]
    fn hessian_matches_gradient_differences() {
        let data = instance(2, 15, 3, 4);
        let theta = DVector::from_fn(6, |i, _| 0.3 * i as f64 - 0.8);
        let h = multiclass_hessian(&theta, &data).unwrap();
        let eps = 1e-6;
        for j in 0..6 {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[j] += eps;
            tm[j] -= eps;
            let col = (multiclass_grad(&tp, &data).unwrap() - multiclass_grad(&tm, &data).unwrap())
                / (2.0 * eps);
            assert!((col - h.column(j)).amax() < 1e-6 * h.amax());
        }
    }
}
