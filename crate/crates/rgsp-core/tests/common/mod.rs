//! Shared helpers for the acceptance suite.

/// Print the per-criterion verdict line.
#[allow(dead_code)]
pub fn verdict(id: usize, name: &str, pass: bool) {
    println!("acceptance {id:02} {name}: {}", if pass { "PASS" } else { "FAIL" });
}
