use nalgebra::{ComplexField, DMatrix, Dyn, SymmetricEigen};

/// Hermitian eigendecomposition that is robust to sparse, low-rank input.
///
/// nalgebra's implicit QR can stall on matrices that are mostly zeros (a
/// rank-one projector on a 64-dimensional space comes back as all zeros), so
/// the spectrum is shifted by the Frobenius norm first and shifted back.
pub(crate) fn hermitian_eigen<T: ComplexField<RealField = f64>>(m: DMatrix<T>) -> SymmetricEigen<T, Dyn> {
    let n = m.nrows();
    let shift = m.norm().max(f64::MIN_POSITIVE);
    let shifted = m + DMatrix::<T>::identity(n, n) * T::from_real(shift);
    let mut eig = shifted.symmetric_eigen();
    eig.eigenvalues.iter_mut().for_each(|v| *v -= shift);
    eig
}
