// Link the system BLAS/LAPACK (e.g. Debian/Ubuntu: libopenblas-dev or
// libblas-dev + liblapack-dev). lapack-sys only declares the externs.
fn main() {
    println!("cargo:rustc-link-lib=dylib=lapack");
    println!("cargo:rustc-link-lib=dylib=blas");
}
