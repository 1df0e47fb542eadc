//! DPP kernels over evidence subgraphs and the spectral diversity loss.
//!
//! A kernel is the Gram matrix `L = Z Zᵀ` of the row-normalised node
//! embeddings of one subgraph. For every unordered pair of kernels the loss
//! compares their spectra:
//!
//! ```text
//! pair(i, j) = s · Σ_k |λ_i^k − λ_j^k|  −  Σ_k ⟨v_i^k, v_j^k⟩
//! ```
//!
//! with `s = 1` by default ([`EigenSign::Printed`]) and the result averaged
//! over the `m(m−1)/2` pairs.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{self, determinant};
use crate::params::Mat;

/// Sign applied to the eigenvalue-mismatch term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EigenSign {
    #[default]
    Printed,
    Flipped,
}

impl EigenSign {
    pub fn factor(self) -> f64 {
        match self {
            EigenSign::Printed => 1.0,
            EigenSign::Flipped => -1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DppKernel(Mat);

impl DppKernel {
    /// Wrap a matrix, checking symmetry (1e-12) and numerical PSD (λ ≥ −1e-10).
    pub fn new(l: Mat) -> Result<Self> {
        if l.nrows() != l.ncols() {
            return Err(Error::Shape(format!("kernel must be square, got {:?}", l.dim())));
        }
        let asym = (&l - &l.t()).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if asym > 1e-12 {
            return Err(Error::out_of_range("kernel asymmetry", asym));
        }
        if l.nrows() > 0 {
            let e = linalg::sym_eigen(&l)?;
            let min = e.values.iter().fold(f64::INFINITY, |a, &v| a.min(v));
            if min < -1e-10 {
                return Err(Error::out_of_range("kernel eigenvalue", min));
            }
        }
        Ok(Self(l))
    }

    pub fn matrix(&self) -> &Mat {
        &self.0
    }

    pub fn size(&self) -> usize {
        self.0.nrows()
    }
}

/// Eigenpairs of a kernel, descending and sign-normalised.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralPair {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Mat,
}

pub fn spectral_pair(kernel: &DppKernel) -> Result<SpectralPair> {
    let e = linalg::sym_eigen(kernel.matrix())?;
    Ok(SpectralPair {
        eigenvalues: e.values.to_vec(),
        eigenvectors: e.vectors,
    })
}

pub fn dpp_kernel_on_tape(tape: &mut Tape<'_>, embeddings: Var) -> Var {
    let z = tape.row_normalize(embeddings);
    let zt = tape.transpose(z);
    tape.matmul(z, zt)
}

pub fn dpp_kernel(embeddings: &Mat) -> Result<DppKernel> {
    if embeddings.nrows() == 0 {
        return Err(Error::out_of_range("subgraph size", 0));
    }
    let mut tape = Tape::detached();
    let h = tape.leaf(embeddings.clone());
    let l = dpp_kernel_on_tape(&mut tape, h);
    let mut m = tape.value(l).clone();
    // exact symmetry, so the checked constructor never trips on rounding
    let sym = (&m + &m.t()) * 0.5;
    m.assign(&sym);
    DppKernel::new(m)
}

/// Mean pair term over all unordered kernel pairs; `0` for a single kernel.
pub fn diversity_loss_on_tape(tape: &mut Tape<'_>, kernels: &[Var], sign: EigenSign) -> Result<Var> {
    let Some(&first) = kernels.first() else {
        return Err(Error::out_of_range("evidence count", 0));
    };
    let k = tape.shape(first).0;
    if let Some(bad) = kernels.iter().find(|&&l| tape.shape(l) != (k, k)) {
        return Err(Error::Shape(format!(
            "kernels must all be [{k} x {k}], found {:?}",
            tape.shape(*bad)
        )));
    }
    if kernels.len() == 1 {
        let s = tape.sum(first);
        return Ok(tape.scale(s, 0.0));
    }
    let spectra: Vec<(Var, Var)> = kernels
        .iter()
        .map(|&l| {
            let e = tape.sym_eigen(l)?;
            Ok((tape.slice_cols(e, 0, 1), tape.slice_cols(e, 1, k)))
        })
        .collect::<Result<_>>()?;
    let mut terms = Vec::new();
    for i in 0..spectra.len() {
        for j in (i + 1)..spectra.len() {
            let (li, vi) = spectra[i];
            let (lj, vj) = spectra[j];
            let dl = tape.sub(li, lj);
            let dl = tape.abs(dl);
            let eig = tape.sum(dl);
            let eig = tape.scale(eig, sign.factor());
            let vv = tape.mul(vi, vj);
            let vec_term = tape.sum(vv);
            terms.push(tape.sub(eig, vec_term));
        }
    }
    let n_pairs = terms.len() as f64;
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t);
    }
    Ok(tape.scale(total, 1.0 / n_pairs))
}

/// Loss value and its gradient with respect to each kernel matrix.
pub fn diversity_loss(kernels: &[DppKernel], sign: EigenSign) -> Result<(f64, Vec<Mat>)> {
    let mut tape = Tape::detached();
    let vars: Vec<Var> = kernels.iter().map(|k| tape.leaf(k.matrix().clone())).collect();
    let loss = diversity_loss_on_tape(&mut tape, &vars, sign)?;
    let grads = tape.backward(loss);
    let g = vars.iter().map(|&v| grads.wrt_or_zero(&tape, v)).collect();
    Ok((tape.scalar(loss), g))
}

/// `det(L_Y) / det(L + I)`, with `det(L_∅) = 1`.
pub fn dpp_subset_prob(kernel: &DppKernel, subset: &[usize]) -> Result<f64> {
    let l = kernel.matrix();
    let k = kernel.size();
    let mut seen = vec![false; k];
    for &i in subset {
        if i >= k {
            return Err(Error::out_of_range("subset index", i));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::RepeatedIndex(i));
        }
    }
    let sub = Mat::from_shape_fn((subset.len(), subset.len()), |(a, b)| l[[subset[a], subset[b]]]);
    let norm = determinant(&(l + &Mat::eye(k)));
    Ok(determinant(&sub) / norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: usize, cols: usize, v: &[f64]) -> Mat {
        Mat::from_shape_vec((rows, cols), v.to_vec()).unwrap()
    }

    fn kernel(rows: usize, v: &[f64]) -> DppKernel {
        DppKernel::new(mat(rows, rows, v)).unwrap()
    }

    #[test]
    fn kernel_examples() {
        let l = dpp_kernel(&mat(1, 3, &[0.0, 2.0, 0.0])).unwrap();
        assert_eq!(l.matrix(), &mat(1, 1, &[1.0]));
        let l = dpp_kernel(&mat(2, 2, &[3.0, 0.0, 0.0, -0.5])).unwrap();
        assert_eq!(l.matrix(), &Mat::eye(2));
        let l = dpp_kernel(&mat(3, 2, &[1.0, 2.0, 1.0, 2.0, -3.0, 0.4])).unwrap();
        let s = spectral_pair(&l).unwrap();
        assert!(s.eigenvalues[2].abs() < 1e-12);
        // zero rows stay zero
        let l = dpp_kernel(&mat(2, 2, &[0.0, 0.0, 1.0, 1.0])).unwrap();
        assert_eq!(l.matrix()[[0, 0]], 0.0);
    }

    #[test]
    fn rejects_non_symmetric_or_indefinite() {
        assert!(DppKernel::new(mat(2, 2, &[1.0, 0.5, 0.0, 1.0])).is_err());
        assert!(DppKernel::new(mat(2, 2, &[1.0, 0.0, 0.0, -1.0])).is_err());
    }

    #[test]
    fn two_by_two_spectrum() {
        let s = spectral_pair(&kernel(2, &[2.0, 1.0, 1.0, 2.0])).unwrap();
        assert!((s.eigenvalues[0] - 3.0).abs() < 1e-12);
        assert!((s.eigenvalues[1] - 1.0).abs() < 1e-12);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((s.eigenvectors[[0, 0]] - r).abs() < 1e-12);
        assert!((s.eigenvectors[[1, 0]] - r).abs() < 1e-12);
    }

    #[test]
    fn pair_term_examples() {
        let l = kernel(3, &[2.0, 0.3, 0.0, 0.3, 1.0, 0.1, 0.0, 0.1, 0.5]);
        let (v, _) = diversity_loss(&[l.clone(), l], EigenSign::Printed).unwrap();
        assert!((v + 3.0).abs() < 1e-12);

        let a = kernel(2, &[3.0, 0.0, 0.0, 1.0]);
        let b = kernel(2, &[2.0, 0.0, 0.0, 2.0]);
        let (v, _) = diversity_loss(&[a, b], EigenSign::Printed).unwrap();
        assert!(v.abs() < 1e-12, "{v}");

        // same spectrum, eigenvectors swapped: every inner product vanishes
        let p = kernel(2, &[3.0, 0.0, 0.0, 1.0]);
        let q = kernel(2, &[1.0, 0.0, 0.0, 3.0]);
        let (v, _) = diversity_loss(&[p, q], EigenSign::Printed).unwrap();
        assert!(v.abs() < 1e-12);

        let single = kernel(2, &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(diversity_loss(&[single], EigenSign::Printed).unwrap().0, 0.0);
    }

    #[test]
    fn flipped_sign_negates_eigen_term() {
        let a = kernel(2, &[3.0, 0.0, 0.0, 1.0]);
        let b = kernel(2, &[2.0, 0.0, 0.0, 2.0]);
        let (v, _) = diversity_loss(&[a, b], EigenSign::Flipped).unwrap();
        assert!((v + 4.0).abs() < 1e-12);
    }

    #[test]
    fn matched_pair_beats_mismatched_pair() {
        let base = kernel(2, &[2.0, 0.5, 0.5, 1.0]);
        let near = kernel(2, &[2.0, 0.45, 0.45, 1.0]);
        let far = kernel(2, &[0.2, 0.0, 0.0, 3.0]);
        let (matched, _) = diversity_loss(&[base.clone(), near], EigenSign::Printed).unwrap();
        let (mismatched, _) = diversity_loss(&[base, far], EigenSign::Printed).unwrap();
        assert!(matched < mismatched);
    }

    #[test]
    fn subset_probabilities() {
        let l = kernel(2, &[1.0, 0.0, 0.0, 1.0]);
        assert!((dpp_subset_prob(&l, &[0]).unwrap() - 0.25).abs() < 1e-15);
        assert!((dpp_subset_prob(&l, &[]).unwrap() - 0.25).abs() < 1e-15);
        assert!(dpp_subset_prob(&l, &[0, 0]).is_err());
        assert!(dpp_subset_prob(&l, &[2]).is_err());
    }

    fn random_psd(k: usize, rng: &mut ChaCha8Rng) -> DppKernel {
        let b = Mat::from_shape_fn((k, k + 1), |_| rng.gen_range(-1.0..1.0));
        let l = b.dot(&b.t());
        DppKernel::new((&l + &l.t()) * 0.5).unwrap()
    }

    #[test]
    fn embedding_gradient_through_eigendecomposition() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let inputs: Vec<Mat> = (0..3)
            .map(|_| Mat::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0)))
            .collect();
        let r = gradcheck::check_inputs(&inputs, 1e-6, |tape, v| {
            let ks: Vec<Var> = v.iter().map(|&h| dpp_kernel_on_tape(tape, h)).collect();
            diversity_loss_on_tape(tape, &ks, EigenSign::Printed)
        })
        .unwrap();
        assert!(r.max_rel_err <= 1e-3, "{r:?}");
    }

    proptest! {
        #[test]
        fn subset_probabilities_sum_to_one(seed in 0u64..200, k in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let l = random_psd(k, &mut rng);
            let mut total = 0.0;
            for mask in 0u32..(1 << k) {
                let y: Vec<usize> = (0..k).filter(|i| mask & (1 << i) != 0).collect();
                let p = dpp_subset_prob(&l, &y).unwrap();
                prop_assert!((-1e-12..=1.0 + 1e-12).contains(&p));
                total += p;
            }
            prop_assert!((total - 1.0).abs() < 1e-10);
        }

        #[test]
        fn loss_is_permutation_symmetric(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ks: Vec<DppKernel> = (0..4).map(|_| random_psd(3, &mut rng)).collect();
            let (a, _) = diversity_loss(&ks, EigenSign::Printed).unwrap();
            let rev: Vec<DppKernel> = ks.iter().rev().cloned().collect();
            let (b, _) = diversity_loss(&rev, EigenSign::Printed).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn spectral_pairs_reconstruct(seed in 0u64..200, k in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let l = random_psd(k, &mut rng);
            let s = spectral_pair(&l).unwrap();
            let norm = l.matrix().iter().map(|v| v * v).sum::<f64>().sqrt();
            for c in 0..k {
                let v = s.eigenvectors.column(c);
                let r = l.matrix().dot(&v) - &v * s.eigenvalues[c];
                prop_assert!(r.dot(&r).sqrt() <= 1e-8 * norm.max(1.0));
                let (mut best, mut arg) = (0.0f64, 0);
                for (i, x) in v.iter().enumerate() {
                    if x.abs() > best + 1e-12 { best = x.abs(); arg = i; }
                }
                prop_assert!(v[arg] > 0.0);
            }
        }
    }
}
