//! Dense symmetric linear algebra: eigendecomposition, spectral energy
//! thresholds, Kronecker spectrum utilities, and dense projector assembly.
//!
//! Everything here is `f64` and deliberately desk-scale: the eigensolver is a
//! Householder tridiagonalization followed by implicit-shift QL (the classic
//! EISPACK `tred2`/`tql2` pair), which is plenty for the factor and block
//! sizes this crate works with.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Relative tolerance under which a matrix is accepted as symmetric.
pub const SYMMETRY_TOL: f64 = 1e-8;

/// Negative eigenvalues with magnitude below `CLAMP_TOL * max|lambda|` are
/// treated as floating-point noise and clamped to zero.
pub const CLAMP_TOL: f64 = 1e-10;

/// Eigendecomposition of a symmetric matrix, eigenvalues sorted descending.
#[derive(Debug, Clone)]
pub struct SymEig {
    /// Orthonormal eigenvectors, one per column, in eigenvalue order.
    pub u: Array2<f64>,
    /// Eigenvalues, non-increasing; tiny negatives clamped to zero.
    pub lambda: Array1<f64>,
}

impl SymEig {
    pub fn dim(&self) -> usize {
        self.lambda.len()
    }

    /// Reconstructs `U diag(lambda) U^T`.
    pub fn reconstruct(&self) -> Array2<f64> {
        let scaled = &self.u * &self.lambda.view().insert_axis(ndarray::Axis(0));
        scaled.dot(&self.u.t())
    }
}

/// Eigenvalue spectrum of a Kronecker product, kept in factored form.
///
/// The implied spectrum is the `d_out x d_in` grid of pairwise products
/// `lambda_out[i] * lambda_in[j]`; the grid is never materialized as a
/// Kronecker matrix.
#[derive(Debug, Clone)]
pub struct KronSpectrum {
    pub lambda_out: Array1<f64>,
    pub lambda_in: Array1<f64>,
}

impl KronSpectrum {
    pub fn new(lambda_out: Array1<f64>, lambda_in: Array1<f64>) -> Self {
        Self {
            lambda_out,
            lambda_in,
        }
    }

    pub fn product(&self, i: usize, j: usize) -> f64 {
        self.lambda_out[i] * self.lambda_in[j]
    }
}

fn max_abs(m: &Array2<f64>) -> f64 {
    m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

/// Eigendecomposition of a real symmetric matrix.
///
/// The input must be square and symmetric within [`SYMMETRY_TOL`] relative
/// asymmetry. Eigenvalues come back sorted descending; negatives smaller in
/// magnitude than [`CLAMP_TOL`] times the largest magnitude are clamped to
/// zero, so numerically PSD inputs yield a nonnegative spectrum.
pub fn sym_eig(m: &Array2<f64>) -> Result<SymEig> {
    let (rows, cols) = m.dim();
    if rows != cols {
        return Err(Error::dim(format!(
            "sym_eig expects a square matrix, got {rows}x{cols}"
        )));
    }
    if rows == 0 {
        return Err(Error::dim("sym_eig expects dimension >= 1".to_string()));
    }
    let scale = max_abs(m);
    let asym = m
        .indexed_iter()
        .fold(0.0f64, |acc, ((i, j), v)| acc.max((v - m[[j, i]]).abs()));
    if asym > SYMMETRY_TOL * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::validation(
            "matrix",
            format!(
                "asymmetry {asym:.3e} exceeds {SYMMETRY_TOL:.0e} * max|entry| = {:.3e}",
                SYMMETRY_TOL * scale
            ),
        ));
    }
    if !m.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical(format!(
            "sym_eig input of dimension {rows} contains non-finite entries"
        )));
    }

    // Work on the symmetrized matrix so the tridiagonalization sees an
    // exactly symmetric input. The working matrix holds eigenvectors as
    // rows (the transpose of the usual convention) so the hot loops scan
    // contiguous memory.
    let n = rows;
    let mut vt = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            vt[i * n + j] = 0.5 * (m[[i, j]] + m[[j, i]]);
        }
    }
    let mut d = vec![0.0f64; n];
    let mut e = vec![0.0f64; n];
    tred2(&mut vt, &mut d, &mut e, n);
    tql2(&mut vt, &mut d, &mut e, n).map_err(|_| {
        Error::Numerical(format!(
            "eigensolver failed to converge on a {n}x{n} matrix"
        ))
    })?;

    // Sort descending; row `src` of the working matrix is eigenvector
    // `src`, which becomes column `dst` of U.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| d[b].partial_cmp(&d[a]).unwrap());
    let mut u = Array2::<f64>::zeros((n, n));
    let mut lambda = Array1::<f64>::zeros(n);
    for (dst, &src) in order.iter().enumerate() {
        lambda[dst] = d[src];
        for r in 0..n {
            u[[r, dst]] = vt[src * n + r];
        }
    }

    // Clamping negatives to zero cannot break the descending order: any
    // unclamped negative below a clamped one would have larger magnitude and
    // hence be clamped too.
    let lambda_scale = lambda.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    for l in lambda.iter_mut() {
        if *l < 0.0 && l.abs() <= CLAMP_TOL * lambda_scale {
            *l = 0.0;
        }
    }

    Ok(SymEig { u, lambda })
}

/// Householder reduction of a symmetric matrix to tridiagonal form.
///
/// `vt` holds the matrix in a row-per-eigenvector (transposed) layout so
/// every inner loop scans contiguous memory; on exit it holds the
/// accumulated orthogonal transform, `d` the diagonal, and `e` the
/// subdiagonal. Ported from the public-domain EISPACK/Jama routine.
fn tred2(vt: &mut [f64], d: &mut [f64], e: &mut [f64], n: usize) {
    for j in 0..n {
        d[j] = vt[j * n + n - 1];
    }

    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut h = 0.0;
        for k in 0..i {
            scale += d[k].abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = vt[j * n + i - 1];
                vt[j * n + i] = 0.0;
                vt[i * n + j] = 0.0;
            }
        } else {
            for k in 0..i {
                d[k] /= scale;
                h += d[k] * d[k];
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for v in e.iter_mut().take(i) {
                *v = 0.0;
            }

            for j in 0..i {
                f = d[j];
                vt[i * n + j] = f;
                let row_j = &vt[j * n..j * n + i];
                g = e[j] + row_j[j] * f;
                for k in (j + 1)..i {
                    g += row_j[k] * d[k];
                    e[k] += row_j[k] * f;
                }
                e[j] = g;
            }
            f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                let row_j = &mut vt[j * n..j * n + i];
                for k in j..i {
                    row_j[k] -= f * e[k] + g * d[k];
                }
                d[j] = vt[j * n + i - 1];
                vt[j * n + i] = 0.0;
            }
        }
        d[i] = h;
    }

    for i in 0..(n - 1) {
        vt[i * n + n - 1] = vt[i * n + i];
        vt[i * n + i] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            {
                let row_next = &vt[(i + 1) * n..(i + 1) * n + i + 1];
                for k in 0..=i {
                    d[k] = row_next[k] / h;
                }
            }
            for j in 0..=i {
                let mut g = 0.0;
                {
                    let row_next = &vt[(i + 1) * n..(i + 1) * n + i + 1];
                    let row_j = &vt[j * n..j * n + i + 1];
                    for k in 0..=i {
                        g += row_next[k] * row_j[k];
                    }
                }
                let row_j = &mut vt[j * n..j * n + i + 1];
                for k in 0..=i {
                    row_j[k] -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            vt[(i + 1) * n + k] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = vt[j * n + n - 1];
        vt[j * n + n - 1] = 0.0;
    }
    vt[(n - 1) * n + n - 1] = 1.0;
    e[0] = 0.0;
}

/// Implicit-shift QL iteration on a symmetric tridiagonal matrix, rotating
/// the (transposed) eigenvector rows in place.
fn tql2(vt: &mut [f64], d: &mut [f64], e: &mut [f64], n: usize) -> std::result::Result<(), ()> {
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;

    let mut f = 0.0f64;
    let mut tst1 = 0.0f64;
    let eps = f64::EPSILON;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }

        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > 50 {
                    return Err(());
                }

                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for v in d.iter_mut().take(n).skip(l + 2) {
                    *v -= h;
                }
                f += h;

                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);

                    // Rotate eigenvector rows i and i+1.
                    let (row_i, row_next) = {
                        let (a, b) = vt[i * n..(i + 2) * n].split_at_mut(n);
                        (a, b)
                    };
                    for k in 0..n {
                        let h = row_next[k];
                        row_next[k] = s * row_i[k] + c * h;
                        row_i[k] = c * row_i[k] - s * h;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;

                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    Ok(())
}

/// Minimum number of leading eigenvalues whose cumulative energy reaches a
/// `gamma` fraction of the total.
///
/// `lambda` must be sorted descending with nonnegative entries. Equal
/// eigenvalues straddling the boundary are all pulled into the retained set,
/// so a degenerate eigenspace is never split. A zero-trace spectrum returns
/// 0: a vanishing curvature model constrains nothing.
pub fn energy_cutoff_index(lambda: &Array1<f64>, gamma: f64) -> Result<usize> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::validation(
            "gamma",
            format!("must lie in (0, 1), got {gamma}"),
        ));
    }
    for i in 0..lambda.len() {
        if lambda[i] < 0.0 {
            return Err(Error::validation(
                "lambda",
                format!("entry {i} is negative ({})", lambda[i]),
            ));
        }
        if i > 0 && lambda[i] > lambda[i - 1] {
            return Err(Error::validation(
                "lambda",
                format!("not sorted descending at index {i}"),
            ));
        }
    }
    let total: f64 = lambda.sum();
    if total <= 0.0 {
        return Ok(0);
    }
    let threshold = gamma * total;
    let mut cum = 0.0;
    let mut k = lambda.len();
    for (i, &l) in lambda.iter().enumerate() {
        cum += l;
        if cum >= threshold {
            k = i + 1;
            break;
        }
    }
    // Conservative tie-break: everything equal to the boundary eigenvalue is
    // treated as high-curvature.
    while k < lambda.len() && lambda[k] == lambda[k - 1] {
        k += 1;
    }
    Ok(k)
}

/// Orthogonal projector onto the trailing `p - k` eigendirections.
///
/// `P = U_{>k} U_{>k}^T`: symmetric, idempotent, rank `p - k`.
pub fn dense_projector(eig: &SymEig, k: usize) -> Result<Array2<f64>> {
    let p = eig.dim();
    if k > p {
        return Err(Error::validation(
            "k",
            format!("cutoff index {k} exceeds dimension {p}"),
        ));
    }
    let tail = eig.u.slice(ndarray::s![.., k..]);
    Ok(tail.dot(&tail.t()))
}

/// Result of applying the energy rule to a Kronecker product spectrum.
#[derive(Debug, Clone)]
pub struct KronCutoff {
    /// Largest eigenvalue of the gamma-approximate nullspace; `-inf` when
    /// every direction is retained as high-curvature.
    pub lambda_gamma: f64,
    /// `d_out x d_in` mask: 1 where the product eigenvalue is at most
    /// `lambda_gamma` (the low-curvature set), 0 elsewhere.
    pub mask: Array2<f64>,
    /// Fraction of total spectral energy in the retained (masked-out) set.
    pub retained_energy: f64,
    /// Size of the retained high-curvature set.
    pub removed_rank: usize,
}

/// Applies the gamma-energy rule to the pairwise product grid of a
/// [`KronSpectrum`] without materializing the Kronecker matrix.
///
/// Eigenvalues enter sorted or unsorted; only nonnegativity (within the
/// clamping tolerance) is required. Tiny negatives are clamped to zero.
pub fn kron_energy_cutoff(spec: &KronSpectrum, gamma: f64) -> Result<KronCutoff> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::validation(
            "gamma",
            format!("must lie in (0, 1), got {gamma}"),
        ));
    }
    let lambda_out = clamp_spectrum(&spec.lambda_out, "lambda_out")?;
    let lambda_in = clamp_spectrum(&spec.lambda_in, "lambda_in")?;

    let d_out = lambda_out.len();
    let d_in = lambda_in.len();
    let mut products: Vec<f64> = Vec::with_capacity(d_out * d_in);
    for i in 0..d_out {
        for j in 0..d_in {
            products.push(lambda_out[i] * lambda_in[j]);
        }
    }
    products.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let sorted = Array1::from(products);
    let k = energy_cutoff_index(&sorted, gamma)?;
    let total: f64 = sorted.sum();

    let lambda_gamma = if k == sorted.len() {
        f64::NEG_INFINITY
    } else {
        sorted[k]
    };
    let retained_energy = if total > 0.0 {
        sorted.iter().take(k).sum::<f64>() / total
    } else {
        0.0
    };

    let mut mask = Array2::<f64>::zeros((d_out, d_in));
    for i in 0..d_out {
        for j in 0..d_in {
            if lambda_out[i] * lambda_in[j] <= lambda_gamma {
                mask[[i, j]] = 1.0;
            }
        }
    }
    Ok(KronCutoff {
        lambda_gamma,
        mask,
        retained_energy,
        removed_rank: k,
    })
}

fn clamp_spectrum(lambda: &Array1<f64>, name: &str) -> Result<Array1<f64>> {
    let scale = lambda.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut out = lambda.clone();
    for (i, l) in out.iter_mut().enumerate() {
        if *l < 0.0 {
            if l.abs() <= CLAMP_TOL * scale {
                *l = 0.0;
            } else {
                return Err(Error::validation(
                    name,
                    format!("entry {i} is negative ({}) beyond clamping tolerance", *l),
                ));
            }
        }
    }
    Ok(out)
}

/// Clamp a descending spectrum's small negatives to zero, erroring on
/// negatives beyond tolerance. Used by projector construction on spectra
/// that are PSD by construction.
pub fn clamp_psd_spectrum(lambda: &Array1<f64>) -> Result<Array1<f64>> {
    clamp_spectrum(lambda, "lambda")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_symmetric(n: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let mut m = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            for j in 0..=i {
                let v: f64 = rng.random_range(-1.0..1.0);
                m[[i, j]] = v;
                m[[j, i]] = v;
            }
        }
        m
    }

    fn frob(m: &Array2<f64>) -> f64 {
        m.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    #[test]
    fn identity_eigenvalues() {
        let eig = sym_eig(&Array2::eye(3)).unwrap();
        for &l in eig.lambda.iter() {
            assert!((l - 1.0).abs() < 1e-12);
        }
        let ortho = eig.u.t().dot(&eig.u);
        for ((i, j), v) in ortho.indexed_iter() {
            let expect = if i == j { 1.0 } else { 0.0 };
            assert!((v - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn diagonal_matrix_sorted() {
        let m = array![[3.0, 0.0], [0.0, 1.0]];
        let eig = sym_eig(&m).unwrap();
        assert!((eig.lambda[0] - 3.0).abs() < 1e-12);
        assert!((eig.lambda[1] - 1.0).abs() < 1e-12);
        // Eigenvectors of a diagonal matrix are signed standard basis vectors.
        assert!((eig.u[[0, 0]].abs() - 1.0).abs() < 1e-12);
        assert!((eig.u[[1, 1]].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_residual_random_6x6() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = random_symmetric(6, &mut rng);
        let eig = sym_eig(&m).unwrap();
        let resid = frob(&(&eig.reconstruct() - &m));
        assert!(resid <= 1e-10 * frob(&m).max(1.0), "residual {resid}");
    }

    #[test]
    fn reconstruction_residual_100_random_up_to_32() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..100 {
            let n = rng.random_range(1..=32);
            let m = random_symmetric(n, &mut rng);
            let eig = sym_eig(&m).unwrap();
            let resid = frob(&(&eig.reconstruct() - &m));
            assert!(
                resid <= 1e-10 * frob(&m).max(f64::MIN_POSITIVE),
                "trial {trial}: n={n} residual {resid}"
            );
            let ortho = eig.u.t().dot(&eig.u);
            for ((i, j), v) in ortho.indexed_iter() {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((v - expect).abs() < 1e-10);
            }
            for i in 1..n {
                assert!(eig.lambda[i] <= eig.lambda[i - 1]);
            }
        }
    }

    #[test]
    fn psd_input_clamps_to_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // Gram matrix: PSD by construction, rank-deficient on purpose.
        let b = {
            let mut b = Array2::<f64>::zeros((3, 6));
            for v in b.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            b
        };
        let m = b.t().dot(&b);
        let eig = sym_eig(&m).unwrap();
        assert!(eig.lambda.iter().all(|&l| l >= 0.0));
    }

    #[test]
    fn rejects_non_square_and_asymmetric() {
        let rect = Array2::<f64>::zeros((2, 3));
        assert!(matches!(sym_eig(&rect), Err(Error::Dim(_))));
        let asym = array![[1.0, 2.0], [0.0, 1.0]];
        assert!(matches!(sym_eig(&asym), Err(Error::Validation { .. })));
    }

    #[test]
    fn energy_cutoff_hand_computed() {
        let lambda = array![4.0, 3.0, 2.0, 1.0];
        // Cumulative fractions: 0.4, 0.7, 0.9, 1.0.
        assert_eq!(energy_cutoff_index(&lambda, 0.7).unwrap(), 2);
        assert_eq!(energy_cutoff_index(&lambda, 0.69).unwrap(), 2);
        assert_eq!(energy_cutoff_index(&lambda, 0.71).unwrap(), 3);
    }

    #[test]
    fn energy_cutoff_single_dominant() {
        let lambda = array![1.0, 0.0, 0.0];
        assert_eq!(energy_cutoff_index(&lambda, 0.5).unwrap(), 1);
    }

    #[test]
    fn energy_cutoff_zero_trace() {
        let lambda = array![0.0, 0.0];
        assert_eq!(energy_cutoff_index(&lambda, 0.3).unwrap(), 0);
        assert_eq!(energy_cutoff_index(&lambda, 0.9).unwrap(), 0);
    }

    #[test]
    fn energy_cutoff_small_gamma_keeps_top() {
        let lambda = array![5.0, 1.0, 0.5];
        assert_eq!(energy_cutoff_index(&lambda, 1e-9).unwrap(), 1);
    }

    #[test]
    fn energy_cutoff_ties_retained() {
        let lambda = array![2.0, 2.0, 2.0, 1.0];
        // gamma = 0.3: minimal index is 2 (2/7 < 0.3 <= 4/7), and the tie at
        // the boundary pulls in the third copy as well.
        assert_eq!(energy_cutoff_index(&lambda, 0.3).unwrap(), 3);
    }

    #[test]
    fn energy_cutoff_rejects_bad_inputs() {
        let unsorted = array![1.0, 2.0];
        assert!(energy_cutoff_index(&unsorted, 0.5).is_err());
        let negative = array![1.0, -0.5];
        assert!(energy_cutoff_index(&negative, 0.5).is_err());
        let ok = array![1.0, 0.5];
        assert!(energy_cutoff_index(&ok, 0.0).is_err());
        assert!(energy_cutoff_index(&ok, 1.0).is_err());
    }

    #[test]
    fn dense_projector_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = random_symmetric(5, &mut rng);
        let eig = sym_eig(&m).unwrap();
        let full = dense_projector(&eig, 0).unwrap();
        for ((i, j), v) in full.indexed_iter() {
            let expect = if i == j { 1.0 } else { 0.0 };
            assert!((v - expect).abs() < 1e-10);
        }
        let zero = dense_projector(&eig, 5).unwrap();
        assert!(zero.iter().all(|v| v.abs() < 1e-12));
        assert!(dense_projector(&eig, 6).is_err());
    }

    #[test]
    fn dense_projector_diagonal_case() {
        let m = Array2::from_diag(&array![4.0, 3.0, 2.0, 1.0]);
        let eig = sym_eig(&m).unwrap();
        let p = dense_projector(&eig, 2).unwrap();
        // Projects onto coordinates 3 and 4.
        let e1 = array![1.0, 0.0, 0.0, 0.0];
        let pe1 = p.dot(&e1);
        assert!(pe1.iter().all(|v| v.abs() < 1e-10));
        let e4 = array![0.0, 0.0, 0.0, 1.0];
        let pe4 = p.dot(&e4);
        assert!((pe4[3] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn kron_cutoff_hand_computed() {
        let spec = KronSpectrum::new(array![2.0, 1.0], array![3.0, 1.0]);
        // Products {6, 3, 2, 1}; cumulative 0.5, 0.75 -> top set {6, 3}.
        let cut = kron_energy_cutoff(&spec, 0.7).unwrap();
        assert_eq!(cut.removed_rank, 2);
        assert!((cut.lambda_gamma - 2.0).abs() < 1e-15);
        assert!((cut.retained_energy - 0.75).abs() < 1e-15);
        // Mask is d_out x d_in: products [[6, 2], [3, 1]].
        assert_eq!(cut.mask[[0, 0]], 0.0);
        assert_eq!(cut.mask[[0, 1]], 1.0);
        assert_eq!(cut.mask[[1, 0]], 0.0);
        assert_eq!(cut.mask[[1, 1]], 1.0);
    }

    #[test]
    fn kron_cutoff_one_dimensional() {
        let spec = KronSpectrum::new(array![1.0], array![1.0]);
        let cut = kron_energy_cutoff(&spec, 0.5).unwrap();
        assert_eq!(cut.removed_rank, 1);
        assert_eq!(cut.mask[[0, 0]], 0.0);
        assert_eq!(cut.lambda_gamma, f64::NEG_INFINITY);
    }

    #[test]
    fn kron_cutoff_zero_trace_masks_everything() {
        let spec = KronSpectrum::new(array![0.0, 0.0], array![0.0]);
        let cut = kron_energy_cutoff(&spec, 0.4).unwrap();
        assert_eq!(cut.removed_rank, 0);
        assert!(cut.mask.iter().all(|&v| v == 1.0));
        assert_eq!(cut.retained_energy, 0.0);
    }

    #[test]
    fn kron_cutoff_rejects_large_negative() {
        let spec = KronSpectrum::new(array![1.0, -0.5], array![1.0]);
        assert!(kron_energy_cutoff(&spec, 0.5).is_err());
    }

    proptest! {
        #[test]
        fn projector_symmetric_idempotent(seed in 0u64..500, n in 2usize..10, kfrac in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_symmetric(n, &mut rng);
            let eig = sym_eig(&m).unwrap();
            let k = ((n as f64) * kfrac) as usize;
            let p = dense_projector(&eig, k).unwrap();
            let pt = p.t().to_owned();
            let pp = p.dot(&p);
            prop_assert!(frob(&(&p - &pt)) <= 1e-9);
            prop_assert!(frob(&(&pp - &p)) <= 1e-9);
        }

        #[test]
        fn cutoff_monotone_in_gamma(seed in 0u64..500, n in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut lambda: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..5.0)).collect();
            lambda.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let lambda = Array1::from(lambda);
            let g1: f64 = rng.random_range(0.01..0.99);
            let g2: f64 = rng.random_range(0.01..0.99);
            let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
            let k_lo = energy_cutoff_index(&lambda, lo).unwrap();
            let k_hi = energy_cutoff_index(&lambda, hi).unwrap();
            prop_assert!(k_lo <= k_hi);
        }

        #[test]
        fn kron_retained_set_minimal(seed in 0u64..300, d_out in 1usize..5, d_in in 1usize..5, gamma in 0.05f64..0.95) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let lo: Vec<f64> = (0..d_out).map(|_| rng.random_range(0.0..3.0)).collect();
            let li: Vec<f64> = (0..d_in).map(|_| rng.random_range(0.0..3.0)).collect();
            let spec = KronSpectrum::new(Array1::from(lo.clone()), Array1::from(li.clone()));
            let cut = kron_energy_cutoff(&spec, gamma).unwrap();
            let mut products: Vec<f64> = Vec::new();
            for &a in &lo { for &b in &li { products.push(a * b); } }
            products.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let total: f64 = products.iter().sum();
            if total > 0.0 {
                let retained: f64 = products.iter().take(cut.removed_rank).sum();
                prop_assert!(retained / total >= gamma - 1e-12);
                // The cutoff is the minimal index reaching gamma, extended
                // only over exact ties at the boundary.
                let mut cum = 0.0;
                let mut kmin = products.len();
                for (i, &v) in products.iter().enumerate() {
                    cum += v;
                    if cum >= gamma * total {
                        kmin = i + 1;
                        break;
                    }
                }
                prop_assert!(cut.removed_rank >= kmin);
                for i in kmin..cut.removed_rank {
                    prop_assert_eq!(products[i], products[kmin - 1]);
                }
                // Mask partitions the grid consistently with the cutoff.
                let masked: usize = cut.mask.iter().filter(|&&v| v == 1.0).count();
                prop_assert_eq!(masked, products.len() - cut.removed_rank);
            } else {
                prop_assert_eq!(cut.removed_rank, 0);
            }
        }
    }
}
