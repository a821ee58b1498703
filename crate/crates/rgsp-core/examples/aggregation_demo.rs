//! End-to-end pass over the sampling pipeline: diffuse a sparse seed, observe
//! one node, design the samples, and recover the seed blind and non-blind.

use nalgebra::DVector;
use rgsp_core::{
    blind_sparse_recovery_exact, build_aggregation, error_covariance, greedy_sampling_design, observation_theta,
    observation_xi, recover_known_support, suggest_l1_weight, DesignCriterion, GraphFilter, GraphModel, Gso,
    NoiseCov,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let raw = rgsp_core::random_graph(GraphModel::Er { n: 20, p: 0.3 }, 7)?;
    // scale to unit spectral radius so shift powers stay O(1)
    let lmax = raw.real_spectrum()?.lam[0];
    let gso = Gso::new(raw.matrix() / lmax, raw.kind())?;
    let filter = GraphFilter::new(&gso, &[1.0, 0.7, 0.2])?;

    let mut seed = DVector::zeros(20);
    seed[4] = 1.2;
    seed[11] = -0.8;
    let x = filter.apply_vec(&seed)?;

    let node = 2;
    let noise = NoiseCov::White(1e-6);
    let xi = observation_xi(&gso, node, &filter)?;
    println!("observation cond = {:.3e} (warning: {})", xi.cond, xi.cond_warning);

    let support = vec![4, 11];
    let samples = greedy_sampling_design(&xi, &support, &noise, 6, DesignCriterion::Mse)?;
    println!("greedy samples: {samples:?}");
    let re = error_covariance(&xi, &support, &samples, &noise)?;
    println!("predicted mse = {:.3e}", re.trace());

    let state = build_aggregation(&gso, &x, node, &samples)?;
    let known = recover_known_support(&xi, &state.z_qi, &samples, &support, &noise)?;
    println!("known-support error = {:.3e}", (&known.s_hat - &seed).norm());

    let theta = observation_theta(&gso, node)?;
    assert_eq!(theta.matrix.nrows(), 20);
    let all: Vec<usize> = (0..12).collect();
    let state_all = build_aggregation(&gso, &x, node, &all)?;
    let blind = blind_sparse_recovery_exact(&xi, &state_all.z_qi, &all)?;
    println!("blind support = {:?} (iters {})", blind.support, blind.iterations);
    println!("blind error = {:.3e}", (&blind.s_hat - &seed).norm());
    let gamma = suggest_l1_weight(&xi, &state_all.z_qi, &all, &noise, 1e-3)?;
    println!("l1 weight for noisy data would be {gamma:.3e}");
    Ok(())
}
