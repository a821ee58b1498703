//! Graph signal processing on dense shift operators: graph filters and their
//! identification, sampling and recovery of diffused sparse signals, untrained
//! graph-neural denoisers, robust filter identification under perturbed
//! topologies, and joint topology inference with hidden nodes.

pub mod agss;
pub mod dendro;
pub mod denoise;
pub mod error;
pub mod filter;
pub mod graph;
pub mod graphgen;
pub mod io;
pub mod la;
pub mod lapack;
pub mod perturb;
pub mod rfi;
pub mod rng;
pub mod signals;

pub use agss::{
    suggest_l1_weight,
    aggregation_bandlimited_recover, blind_deconvolution, blind_sparse_recovery, blind_sparse_recovery_exact,
    build_aggregation, error_covariance, greedy_sampling_design, observation_phi, observation_theta, observation_xi,
    recover_known_support, recovery_rate, seed_success, selection_sampling_recover, space_shift_assemble,
    AggregationState, DesignCriterion, NoiseCov, ObsKind, ObservationMatrix, SeedEstimate,
};
pub use dendro::{build_dendrogram_upsamplers, DendrogramLayers, Linkage};
pub use denoise::{
    analytic_gradient, eigen_alignment, expected_sq_jacobian, fit_untrained, gcg_forward,
    gdec_forward, mc_sq_jacobian, sign_split_readout, theorem31_bound, write_fit_trace_csv,
    DenoiserArch, FitOptions, FitTrace, GcgArch, GdecArch, JacobianSpectrum, NetWeights, Optimizer,
};
pub use error::{Result, RgspError};
pub use filter::{identify_filter_ls, identify_filter_vertex, GraphFilter};
pub use graph::{Gso, GsoKind, RealSpectrum, Spectrum};
pub use graphgen::{random_graph, sbm_membership, GraphModel};
pub use perturb::{graph_distance, perturb, GraphDistanceKind, PerturbMode, PerturbationSpec};
pub use rfi::{
    ar_predict, ar_rfi_solve, cd_scalar_argmin, check_identifiability, extract_coeffs, joint_rfi_solve,
    rfi_objective, rfi_solve, rfi_solve_stationary, rfi_stationarity, rfi_step1_closed_form,
    rfi_step1_gradient, rfi_step2_cd, rfi_step2_cd_instrumented, rfi_step2_exact, write_solver_report_csv,
    CdStats, CoeffFit, FilterData, GammaSchedule, GsoConstraint, IdentifiabilityReport, JointRfiSolution,
    ReweightState, RfiAlgorithm, RfiOptions, RfiProblem, RfiSolution, RfiWeights, SolverReport,
    StationarityData, Step1Solve,
};
pub use signals::{generate_signal, nerr, SignalModel, SignalSet};
