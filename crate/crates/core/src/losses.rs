//! The three training losses and their weighted combination.
//!
//! Every loss returns its value together with the exact gradient with
//! respect to the (already normalized) query embedding `z`. Chaining through
//! the normalization Jacobian is the encoder's job.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{axpy, check_dims, dist_sq_unchecked, dot_unchecked, norm, Matrix};

/// Tolerance on `|‖v‖ − 1|` before a loss input is rejected.
pub const NORM_TOLERANCE: f64 = 1e-3;

/// Default ε in the variance loss denominator.
pub const DEFAULT_VARIANCE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64) -> Result<Self> {
        let w = Self {
            lambda1,
            lambda2,
            lambda3,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(
                    key,
                    format!("must be a finite value >= 0, got {v}"),
                ));
            }
        }
        if self.lambda1 == 0.0 && self.lambda2 == 0.0 && self.lambda3 == 0.0 {
            return Err(Error::invalid(
                "lambda1",
                "at least one loss weight must be positive",
            ));
        }
        Ok(())
    }

    /// `λ1·l1 + λ2·l2 + λ3·l3`
    pub fn combine(&self, components: [f64; 3]) -> f64 {
        self.lambda1 * components[0] + self.lambda2 * components[1] + self.lambda3 * components[2]
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.lambda1, self.lambda2, self.lambda3]
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.1,
            lambda3: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Temperatures {
    pub contrastive: f64,
    pub centroid: f64,
}

impl Temperatures {
    pub fn new(contrastive: f64, centroid: f64) -> Result<Self> {
        if !(contrastive > 0.0) {
            return Err(Error::invalid("tau_contrastive", "must be > 0"));
        }
        if !(centroid > 0.0) {
            return Err(Error::invalid("tau_centroid", "must be > 0"));
        }
        Ok(Self {
            contrastive,
            centroid,
        })
    }
}

impl Default for Temperatures {
    fn default() -> Self {
        Self {
            contrastive: 0.2,
            centroid: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad_z: Vec<f64>,
}

impl LossOutput {
    fn zero(dim: usize) -> Self {
        Self {
            value: 0.0,
            grad_z: vec![0.0; dim],
        }
    }
}

fn check_unit(v: &[f64]) -> Result<()> {
    let n = norm(v);
    if (n - 1.0).abs() > NORM_TOLERANCE {
        return Err(Error::NotNormalized(n));
    }
    Ok(())
}

/// Softmax cross-entropy over similarity logits where `positive` is the
/// target and `others` fill the rest of the denominator.
fn softmax_contrast<'a, I>(z: &[f64], positive: &[f64], others: I, tau: f64) -> LossOutput
where
    I: Iterator<Item = &'a [f64]> + Clone,
{
    let pos_logit = dot_unchecked(z, positive) / tau;
    let logits: Vec<f64> = others.clone().map(|v| dot_unchecked(z, v) / tau).collect();
    if logits.is_empty() {
        return LossOutput::zero(z.len());
    }
    let max = logits.iter().copied().fold(pos_logit, f64::max);
    let pos_w = (pos_logit - max).exp();
    let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let mut denom = pos_w;
    for w in &weights {
        denom += w;
    }
    let lse = max + denom.ln();
    let value = lse - pos_logit;

    // d/dz = (Σ_j p_j v_j − positive) / τ
    let mut grad = vec![0.0; z.len()];
    axpy((pos_w / denom - 1.0) / tau, positive, &mut grad);
    for (w, v) in weights.iter().zip(others) {
        axpy(w / denom / tau, v, &mut grad);
    }
    LossOutput {
        value,
        grad_z: grad,
    }
}

/// InfoNCE with a positive key and a pool of negative keys (one per row).
pub fn info_nce(z: &[f64], z_pos: &[f64], negatives: &Matrix, tau: f64) -> Result<LossOutput> {
    if !(tau > 0.0) {
        return Err(Error::invalid("tau_contrastive", "must be > 0"));
    }
    check_dims(z.len(), z_pos.len())?;
    check_unit(z)?;
    check_unit(z_pos)?;
    if negatives.is_empty() {
        return Ok(LossOutput::zero(z.len()));
    }
    check_dims(z.len(), negatives.cols())?;
    for row in negatives.iter_rows() {
        check_unit(row)?;
    }
    Ok(softmax_contrast(z, z_pos, negatives.iter_rows(), tau))
}

/// Centroid contrastive loss with the assigned centroid as the positive
/// and every other centroid as a negative.
pub fn centroid_contrastive(
    z: &[f64],
    assigned: usize,
    centroids: &Matrix,
    tau: f64,
) -> Result<LossOutput> {
    centroid_contrastive_with(z, assigned, centroids, tau, false)
}

/// Like [`centroid_contrastive`]; `include_assigned` also places the
/// assigned centroid in the negative sum.
///
/// Centroids bitwise identical to the assigned one describe the same
/// cluster and are excluded from the negatives along with it.
pub fn centroid_contrastive_with(
    z: &[f64],
    assigned: usize,
    centroids: &Matrix,
    tau: f64,
    include_assigned: bool,
) -> Result<LossOutput> {
    if !(tau > 0.0) {
        return Err(Error::invalid("tau_centroid", "must be > 0"));
    }
    if assigned >= centroids.rows() {
        return Err(Error::IndexOutOfRange {
            index: assigned,
            len: centroids.rows(),
        });
    }
    check_dims(z.len(), centroids.cols())?;
    check_unit(z)?;
    let positive = centroids.row(assigned);
    let others = centroids
        .iter_rows()
        .enumerate()
        .filter(move |(l, c)| include_assigned || (*l != assigned && *c != positive))
        .map(|(_, c)| c);
    Ok(softmax_contrast(z, positive, others, tau))
}

/// `‖z − c‖² / (2σ² + ε)`; `c` and `σ²` are constants.
pub fn variance_loss(z: &[f64], centroid: &[f64], sigma_sq: f64, eps: f64) -> Result<LossOutput> {
    check_dims(z.len(), centroid.len())?;
    if !(sigma_sq >= 0.0) {
        return Err(Error::invalid("sigma_sq", "must be >= 0"));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid("variance_eps", "must be > 0"));
    }
    let denom = 2.0 * sigma_sq + eps;
    let value = dist_sq_unchecked(z, centroid) / denom;
    let grad_z = z
        .iter()
        .zip(centroid)
        .map(|(a, c)| 2.0 * (a - c) / denom)
        .collect();
    Ok(LossOutput { value, grad_z })
}

/// Cluster statistics seen by the query at loss time.
#[derive(Debug, Clone, Copy)]
pub struct ClusterView<'a> {
    pub assigned: usize,
    pub centroids: &'a Matrix,
    pub sigma_sq: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    pub variance_eps: f64,
    pub centroid_negatives_include_assigned: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            variance_eps: DEFAULT_VARIANCE_EPS,
            centroid_negatives_include_assigned: false,
        }
    }
}

/// Weighted objective plus its unweighted components `[l1, l2, l3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub value: f64,
    pub grad_z: Vec<f64>,
    pub components: [f64; 3],
}

/// Weighted sum of the three losses. Without a cluster view the two
/// clustering terms contribute nothing.
pub fn total_loss(
    z: &[f64],
    z_pos: &[f64],
    negatives: &Matrix,
    cluster: Option<ClusterView<'_>>,
    weights: &LossWeights,
    temps: &Temperatures,
    opts: &LossOptions,
) -> Result<TotalLoss> {
    let l1 = info_nce(z, z_pos, negatives, temps.contrastive)?;
    let mut grad = vec![0.0; z.len()];
    axpy(weights.lambda1, &l1.grad_z, &mut grad);
    let mut components = [l1.value, 0.0, 0.0];
    if let Some(view) = cluster {
        let l2 = centroid_contrastive_with(
            z,
            view.assigned,
            view.centroids,
            temps.centroid,
            opts.centroid_negatives_include_assigned,
        )?;
        let l3 = variance_loss(
            z,
            view.centroids.row(view.assigned),
            view.sigma_sq,
            opts.variance_eps,
        )?;
        axpy(weights.lambda2, &l2.grad_z, &mut grad);
        axpy(weights.lambda3, &l3.grad_z, &mut grad);
        components[1] = l2.value;
        components[2] = l3.value;
    }
    Ok(TotalLoss {
        value: weights.combine(components),
        grad_z: grad,
        components,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, l2_normalize, max_relative_error};
    use proptest::prelude::{prop, prop_assert, prop_assume, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // ln(1 + e^{-1}), evaluated by hand from the loss definition.
    const LN_1P_EINV: f64 = 0.313_261_687_518_222_9;

    fn mat(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows[0].len(), rows.iter().copied()).unwrap()
    }

    fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            if let Ok(u) = l2_normalize(&v) {
                return u;
            }
        }
    }

    #[test]
    fn info_nce_examples() {
        let empty = Matrix::zeros(0, 2);
        let out = info_nce(&[1.0, 0.0], &[1.0, 0.0], &empty, 0.2).unwrap();
        assert_eq!(out.value, 0.0);
        assert_eq!(out.grad_z, vec![0.0, 0.0]);

        let out = info_nce(&[1.0, 0.0], &[1.0, 0.0], &mat(&[&[0.0, 1.0]]), 1.0).unwrap();
        assert!((out.value - LN_1P_EINV).abs() < 1e-12);
        assert!((LN_1P_EINV - (1.0 + (-1f64).exp()).ln()).abs() < 1e-15);

        // identical logits everywhere: ln(K + 1)
        let k = 4;
        let negs = Matrix::from_rows(2, (0..k).map(|_| [1.0, 0.0])).unwrap();
        let out = info_nce(&[1.0, 0.0], &[1.0, 0.0], &negs, 0.2).unwrap();
        assert!((out.value - ((k + 1) as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn info_nce_errors() {
        let negs = mat(&[&[0.0, 1.0]]);
        assert!(matches!(
            info_nce(&[2.0, 0.0], &[1.0, 0.0], &negs, 1.0),
            Err(Error::NotNormalized(_))
        ));
        assert!(matches!(
            info_nce(&[1.0, 0.0], &[1.0, 0.0, 0.0], &negs, 1.0),
            Err(Error::DimMismatch { .. })
        ));
        let bad = mat(&[&[0.0, 1.1]]);
        assert!(matches!(
            info_nce(&[1.0, 0.0], &[1.0, 0.0], &bad, 1.0),
            Err(Error::NotNormalized(_))
        ));
    }

    #[test]
    fn centroid_examples() {
        let one = mat(&[&[0.6, 0.8]]);
        assert_eq!(
            centroid_contrastive(&[1.0, 0.0], 0, &one, 0.2)
                .unwrap()
                .value,
            0.0
        );

        let two = mat(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let out = centroid_contrastive(&[1.0, 0.0], 0, &two, 1.0).unwrap();
        assert!((out.value - LN_1P_EINV).abs() < 1e-12);

        // z equally similar to all L centroids -> ln L
        let cs = mat(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        let z = l2_normalize(&[1.0, 1.0, 1.0]).unwrap();
        let out = centroid_contrastive(&z, 1, &cs, 0.2).unwrap();
        assert!((out.value - 3f64.ln()).abs() < 1e-12);

        assert!(matches!(
            centroid_contrastive(&[1.0, 0.0], 2, &two, 1.0),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn centroid_include_assigned_flag() {
        let two = mat(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let out = centroid_contrastive_with(&[1.0, 0.0], 0, &two, 1.0, true).unwrap();
        // denominator gains a second copy of the positive term
        let expected = (2.0 + (-1f64).exp()).ln();
        assert!((out.value - expected).abs() < 1e-12);
    }

    #[test]
    fn identical_centroids_reduce_to_zero() {
        let cs = mat(&[&[0.6, 0.8], &[0.6, 0.8], &[0.6, 0.8]]);
        let z = l2_normalize(&[1.0, -0.3]).unwrap();
        let out = centroid_contrastive(&z, 1, &cs, 0.2).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.grad_z.iter().all(|&g| g == 0.0));
        let single = mat(&[&[0.6, 0.8]]);
        assert_eq!(
            centroid_contrastive(&z, 0, &single, 0.2).unwrap().value,
            0.0
        );
    }

    #[test]
    fn variance_examples() {
        let out = variance_loss(&[0.3, 0.4], &[0.3, 0.4], 0.7, 1e-6).unwrap();
        assert_eq!(out.value, 0.0);
        // ‖z−c‖² = 0.5
        let out = variance_loss(&[0.5, 0.5], &[0.0, 0.0], 0.25, 1e-6).unwrap();
        assert!((out.value - 0.5 / 0.500001).abs() < 1e-12);
        assert!((out.value - 0.999998).abs() < 1e-6);
        // ε floor: ‖z−c‖² = 1e-6, σ² = 0
        let out = variance_loss(&[1e-3, 0.0], &[0.0, 0.0], 0.0, 1e-6).unwrap();
        assert!((out.value - 1.0).abs() < 1e-9);
    }

    #[test]
    fn variance_scales_inversely() {
        let z = [0.2, -0.4, 0.1];
        let c = [0.0, 0.3, 0.3];
        let a = variance_loss(&z, &c, 0.1, 1e-6).unwrap().value;
        // doubling 2σ²+ε: σ'² = σ² + (2σ²+ε)/2 with ε fixed
        let b = variance_loss(&z, &c, 0.1 + (0.2 + 1e-6) / 2.0, 1e-6)
            .unwrap()
            .value;
        assert!((a / b - 2.0).abs() < 1e-12);
    }

    #[test]
    fn total_examples() {
        let z = l2_normalize(&[0.8, 0.6]).unwrap();
        let zp = l2_normalize(&[0.7, 0.7]).unwrap();
        let negs = mat(&[&[0.0, 1.0], &[-1.0, 0.0]]);
        let cs = mat(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let view = ClusterView {
            assigned: 0,
            centroids: &cs,
            sigma_sq: 0.05,
        };
        let temps = Temperatures::default();
        let opts = LossOptions::default();

        let w = LossWeights::new(1.0, 0.0, 0.0).unwrap();
        let t = total_loss(&z, &zp, &negs, Some(view), &w, &temps, &opts).unwrap();
        let l1 = info_nce(&z, &zp, &negs, 0.2).unwrap();
        assert_eq!(t.value, l1.value);
        assert_eq!(t.grad_z, l1.grad_z);

        let w = LossWeights::new(0.0, 0.0, 1.0).unwrap();
        let view_at = ClusterView {
            assigned: 0,
            centroids: &cs,
            sigma_sq: 0.05,
        };
        let t = total_loss(&[1.0, 0.0], &zp, &negs, Some(view_at), &w, &temps, &opts).unwrap();
        assert_eq!(t.value, 0.0);

        let w = LossWeights::default();
        assert!((w.combine([0.3, 0.2, 0.1]) - 0.321).abs() < 1e-15);

        // no cluster view: clustering terms vanish
        let t = total_loss(&z, &zp, &negs, None, &w, &temps, &opts).unwrap();
        assert_eq!(t.components[1], 0.0);
        assert_eq!(t.components[2], 0.0);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::new(0.0, 0.0, 0.0).is_err());
        assert!(LossWeights::new(-1.0, 0.0, 0.0).is_err());
        assert!(Temperatures::new(0.0, 0.2).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = 1e-5;
        for trial in 0..120 {
            let d = rng.random_range(2..=8);
            let k = rng.random_range(0..=5);
            let l = rng.random_range(1..=4);
            let tau = rng.random_range(0.1..1.0);
            let z = random_unit(&mut rng, d);
            let zp = random_unit(&mut rng, d);
            let negs = Matrix::from_rows(d, (0..k).map(|_| random_unit(&mut rng, d))).unwrap();
            let cs = Matrix::from_rows(d, (0..l).map(|_| random_unit(&mut rng, d))).unwrap();
            let assigned = rng.random_range(0..l);
            let sigma = rng.random_range(0.0..0.5);

            // The losses are evaluated off the unit sphere here, so skip the
            // norm check by calling the shared kernels directly.
            let f1 = |x: &[f64]| softmax_contrast(x, &zp, negs.iter_rows(), tau).value;
            let g = finite_diff_grad(f1, &z, h).unwrap();
            let a = info_nce(&z, &zp, &negs, tau).unwrap().grad_z;
            assert!(
                max_relative_error(&a, &g, 1e-6) < 1e-4,
                "info_nce trial {trial}"
            );

            let c_pos = cs.row(assigned).to_vec();
            let f2 = |x: &[f64]| {
                let others = cs
                    .iter_rows()
                    .enumerate()
                    .filter(|(i, r)| *i != assigned && *r != c_pos.as_slice())
                    .map(|(_, r)| r);
                softmax_contrast(x, &c_pos, others, tau).value
            };
            let g = finite_diff_grad(f2, &z, h).unwrap();
            let a = centroid_contrastive(&z, assigned, &cs, tau).unwrap().grad_z;
            assert!(
                max_relative_error(&a, &g, 1e-6) < 1e-4,
                "centroid trial {trial}"
            );

            let f3 = |x: &[f64]| variance_loss(x, &c_pos, sigma, 1e-6).unwrap().value;
            let g = finite_diff_grad(f3, &z, h).unwrap();
            let a = variance_loss(&z, &c_pos, sigma, 1e-6).unwrap().grad_z;
            assert!(
                max_relative_error(&a, &g, 1e-6) < 1e-4,
                "variance trial {trial}"
            );
        }
    }

    proptest! {
        #[test]
        fn info_nce_permutation_invariant(seed in 0u64..1000, shift in 0usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 4;
            let z = random_unit(&mut rng, d);
            let zp = random_unit(&mut rng, d);
            let rows: Vec<Vec<f64>> = (0..5).map(|_| random_unit(&mut rng, d)).collect();
            let mut rotated = rows.clone();
            rotated.rotate_left(shift);
            rotated.reverse();
            let a = info_nce(&z, &zp, &Matrix::from_rows(d, &rows).unwrap(), 0.2).unwrap();
            let b = info_nce(&z, &zp, &Matrix::from_rows(d, &rotated).unwrap(), 0.2).unwrap();
            prop_assert!((a.value - b.value).abs() < 1e-12);
            for (x, y) in a.grad_z.iter().zip(&b.grad_z) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn info_nce_decreasing_in_positive_similarity(a in -1.0f64..0.99, delta in 0.001f64..0.5) {
            // z fixed, negatives fixed; only the positive's similarity moves.
            let b = (a + delta).min(1.0);
            prop_assume!(b > a);
            let z = [1.0, 0.0, 0.0];
            let pos = |s: f64| [s, (1.0 - s * s).max(0.0).sqrt(), 0.0];
            let negs = Matrix::from_rows(3, [[0.3, 0.0, (1.0f64 - 0.09).sqrt()]]).unwrap();
            let la = info_nce(&z, &pos(a), &negs, 0.2).unwrap().value;
            let lb = info_nce(&z, &pos(b), &negs, 0.2).unwrap().value;
            prop_assert!(lb < la);
        }

        #[test]
        fn total_loss_linear_in_weights(
            w1 in prop::collection::vec(0.0f64..2.0, 3),
            w2 in prop::collection::vec(0.0f64..2.0, 3),
            seed in 0u64..100,
        ) {
            prop_assume!(w1.iter().sum::<f64>() > 0.0 && w2.iter().sum::<f64>() > 0.0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 5;
            let z = random_unit(&mut rng, d);
            let zp = random_unit(&mut rng, d);
            let negs = Matrix::from_rows(d, (0..3).map(|_| random_unit(&mut rng, d))).unwrap();
            let cs = Matrix::from_rows(d, (0..3).map(|_| random_unit(&mut rng, d))).unwrap();
            let view = ClusterView { assigned: 1, centroids: &cs, sigma_sq: 0.1 };
            let t = Temperatures::default();
            let o = LossOptions::default();
            let wa = LossWeights::new(w1[0], w1[1], w1[2]).unwrap();
            let wb = LossWeights::new(w2[0], w2[1], w2[2]).unwrap();
            let ws = LossWeights::new(w1[0] + w2[0], w1[1] + w2[1], w1[2] + w2[2]).unwrap();
            let va = total_loss(&z, &zp, &negs, Some(view), &wa, &t, &o).unwrap().value;
            let vb = total_loss(&z, &zp, &negs, Some(view), &wb, &t, &o).unwrap().value;
            let vs = total_loss(&z, &zp, &negs, Some(view), &ws, &t, &o).unwrap().value;
            prop_assert!((vs - va - vb).abs() < 1e-9 * (1.0 + vs.abs()));
        }
    }
}
