//! Thin wrappers over the system LAPACK for the two dense kernels nalgebra
//! lacks: the general (nonsymmetric) eigenproblem and large positive-definite
//! solves. nalgebra stores column-major, which is what LAPACK expects, so no
//! transposition is involved.

use crate::error::{Result, RgspError};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

/// Right eigenpairs of a general real square matrix (dgeev).
///
/// Complex conjugate pairs are unpacked from LAPACK's packed-real layout.
pub fn eig_general(a: &DMatrix<f64>) -> Result<(DVector<Complex64>, DMatrix<Complex64>)> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "eig_general needs a square matrix");
    if n == 0 {
        return Err(RgspError::InvalidParams("empty matrix".into()));
    }
    let ni = n as i32;
    let mut a = a.clone();
    let mut wr = vec![0.0f64; n];
    let mut wi = vec![0.0f64; n];
    let mut vr = vec![0.0f64; n * n];
    let mut vl = [0.0f64; 1];
    let mut info = 0i32;
    let jobvl = b'N' as std::ffi::c_char;
    let jobvr = b'V' as std::ffi::c_char;
    unsafe {
        let mut work = vec![0.0f64; 1];
        let lwork = -1i32;
        lapack_sys::dgeev_(
            &jobvl, &jobvr, &ni,
            a.as_mut_slice().as_mut_ptr(), &ni,
            wr.as_mut_ptr(), wi.as_mut_ptr(),
            vl.as_mut_ptr(), &1,
            vr.as_mut_ptr(), &ni,
            work.as_mut_ptr(), &lwork, &mut info,
        );
        if info != 0 {
            return Err(RgspError::Lapack { routine: "dgeev(query)", info });
        }
        let lwork = work[0] as i32;
        let mut work = vec![0.0f64; lwork as usize];
        lapack_sys::dgeev_(
            &jobvl, &jobvr, &ni,
            a.as_mut_slice().as_mut_ptr(), &ni,
            wr.as_mut_ptr(), wi.as_mut_ptr(),
            vl.as_mut_ptr(), &1,
            vr.as_mut_ptr(), &ni,
            work.as_mut_ptr(), &lwork, &mut info,
        );
    }
    if info != 0 {
        return Err(RgspError::Lapack { routine: "dgeev", info });
    }
    let lam = DVector::from_iterator(n, wr.iter().zip(&wi).map(|(&re, &im)| Complex64::new(re, im)));
    let mut v = DMatrix::<Complex64>::zeros(n, n);
    let mut j = 0;
    while j < n {
        if wi[j] == 0.0 {
            for i in 0..n {
                v[(i, j)] = Complex64::new(vr[j * n + i], 0.0);
            }
            j += 1;
        } else {
            // columns j, j+1 hold real and imaginary parts of the pair
            for i in 0..n {
                let re = vr[j * n + i];
                let im = vr[(j + 1) * n + i];
                v[(i, j)] = Complex64::new(re, im);
                v[(i, j + 1)] = Complex64::new(re, -im);
            }
            j += 2;
        }
    }
    Ok((lam, v))
}

/// Solve A X = B for symmetric positive-definite A (dposv), consuming both.
pub fn solve_spd(mut a: DMatrix<f64>, mut b: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    assert_eq!(n, b.nrows());
    let ni = n as i32;
    let nrhs = b.ncols() as i32;
    let uplo = b'L' as std::ffi::c_char;
    let mut info = 0i32;
    unsafe {
        lapack_sys::dposv_(
            &uplo, &ni, &nrhs,
            a.as_mut_slice().as_mut_ptr(), &ni,
            b.as_mut_slice().as_mut_ptr(), &ni,
            &mut info,
        );
    }
    if info != 0 {
        return Err(RgspError::Lapack { routine: "dposv", info });
    }
    Ok(b)
}
