//! Untrained graph-aware denoisers and their spectral analysis machinery.
//!
//! Two architectures are provided: a convolutional generator whose layers mix
//! features through a fixed graph filter, and an upsampling decoder that
//! expands a low-dimensional latent signal through nested cluster
//! memberships. Both are fitted to a single noisy observation by gradient
//! descent; early stopping denoises because structured components are fitted
//! faster than noise. The expected squared Jacobian of the two-layer forms
//! predicts, through its spectrum, which signals fit fast.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::dendro::DendrogramLayers;
use crate::error::{Result, RgspError};
use crate::filter::GraphFilter;
use crate::la;
use crate::rng::seeded_rng;
use crate::signals::nerr_vec;

fn relu(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.map(|v| v.max(0.0))
}

/// Heaviside mask of the ReLU; the derivative at exactly 0 is taken as 0.
fn step(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.map(|v| if v > 0.0 { 1.0 } else { 0.0 })
}

/// Fixed readout: first half `1/sqrt(F)`, second half `-1/sqrt(F)`.
pub fn sign_split_readout(features: usize) -> DVector<f64> {
    let scale = 1.0 / (features as f64).sqrt();
    DVector::from_fn(features, |i, _| if 2 * i < features { scale } else { -scale })
}

/// Convolutional generator: every layer mixes features through the same
/// fixed graph filter and applies a ReLU, except the last which stays linear.
#[derive(Debug, Clone)]
pub struct GcgArch {
    filter: GraphFilter,
    widths: Vec<usize>,
    simplified: bool,
}

impl GcgArch {
    /// Deep generator with feature widths `[F0, ..., FL]`; the last width must be 1.
    pub fn deep(filter: GraphFilter, widths: &[usize]) -> Result<GcgArch> {
        check_widths(widths)?;
        Ok(GcgArch { filter, widths: widths.to_vec(), simplified: false })
    }

    /// Two-layer analysis form `ReLU(H Theta) b` with `Theta` of size N x F
    /// absorbing the random input, and `b` the fixed sign-split readout.
    pub fn two_layer(filter: GraphFilter, features: usize) -> Result<GcgArch> {
        if features == 0 {
            return Err(RgspError::InvalidParams("zero features".into()));
        }
        let n = filter.n();
        Ok(GcgArch { filter, widths: vec![n, features, 1], simplified: true })
    }

    pub fn filter(&self) -> &GraphFilter {
        &self.filter
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn n(&self) -> usize {
        self.filter.n()
    }

    pub fn is_two_layer(&self) -> bool {
        self.simplified
    }
}

/// Upsampling decoder: layer `l` expands resolution `l-1` into resolution `l`
/// through the dendrogram upsampler, mixing features with learnable weights.
#[derive(Debug, Clone)]
pub struct GdecArch {
    upsamplers: Vec<DMatrix<f64>>,
    memberships: Vec<DMatrix<f64>>,
    layer_graphs: Vec<DMatrix<f64>>,
    gamma: f64,
    widths: Vec<usize>,
    simplified: bool,
}

impl GdecArch {
    /// Deep decoder over a nested hierarchy with widths `[F0, ..., FL]`.
    pub fn deep(layers: &DendrogramLayers, widths: &[usize]) -> Result<GdecArch> {
        check_widths(widths)?;
        if widths.len() != layers.upsamplers.len() + 1 {
            return Err(RgspError::DimensionMismatch(format!(
                "{} widths for {} upsampling stages",
                widths.len(),
                layers.upsamplers.len()
            )));
        }
        Ok(GdecArch {
            upsamplers: layers.upsamplers.clone(),
            memberships: layers.memberships.clone(),
            layer_graphs: layers.layer_graphs.clone(),
            gamma: layers.gamma,
            widths: widths.to_vec(),
            simplified: false,
        })
    }

    /// Two-layer analysis form `ReLU(U Theta) b` over a single upsampling
    /// stage, with `Theta` spanning only the coarse resolution.
    pub fn two_layer(layers: &DendrogramLayers, features: usize) -> Result<GdecArch> {
        if features == 0 {
            return Err(RgspError::InvalidParams("zero features".into()));
        }
        if layers.upsamplers.len() != 1 {
            return Err(RgspError::InvalidParams(format!(
                "two-layer decoder needs exactly one upsampling stage, got {}",
                layers.upsamplers.len()
            )));
        }
        let n0 = layers.upsamplers[0].ncols();
        Ok(GdecArch {
            upsamplers: layers.upsamplers.clone(),
            memberships: layers.memberships.clone(),
            layer_graphs: layers.layer_graphs.clone(),
            gamma: layers.gamma,
            widths: vec![n0, features, 1],
            simplified: true,
        })
    }

    pub fn upsamplers(&self) -> &[DMatrix<f64>] {
        &self.upsamplers
    }

    pub fn memberships(&self) -> &[DMatrix<f64>] {
        &self.memberships
    }

    pub fn layer_graphs(&self) -> &[DMatrix<f64>] {
        &self.layer_graphs
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn n(&self) -> usize {
        self.upsamplers.last().map_or(0, |u| u.nrows())
    }

    pub fn is_two_layer(&self) -> bool {
        self.simplified
    }
}

fn check_widths(widths: &[usize]) -> Result<()> {
    if widths.len() < 2 || widths.contains(&0) || *widths.last().unwrap() != 1 {
        return Err(RgspError::InvalidParams(format!("bad feature widths {widths:?}")));
    }
    Ok(())
}

/// Per-fit learnable state. `z` is the frozen random input of the deep
/// recursion; it is empty in the two-layer analysis forms where the weights
/// absorb it.
#[derive(Debug, Clone)]
pub struct NetWeights {
    pub z: DMatrix<f64>,
    pub thetas: Vec<DMatrix<f64>>,
}

impl NetWeights {
    fn gaussian(input_dim: usize, widths: &[usize], simplified: bool, seed: u64) -> NetWeights {
        let mut rng = seeded_rng(seed, &[0x6e65/* ne */]);
        if simplified {
            let (rows, features) = (widths[0], widths[1]);
            let std = (1.0 / rows as f64).sqrt();
            let theta =
                DMatrix::from_fn(rows, features, |_, _| std * rng.sample::<f64, _>(StandardNormal));
            return NetWeights { z: DMatrix::zeros(0, 0), thetas: vec![theta] };
        }
        let z =
            DMatrix::from_fn(input_dim, widths[0], |_, _| rng.sample::<f64, _>(StandardNormal));
        let thetas = widths
            .windows(2)
            .map(|w| {
                let std = (1.0 / w[0] as f64).sqrt();
                DMatrix::from_fn(w[0], w[1], |_, _| std * rng.sample::<f64, _>(StandardNormal))
            })
            .collect();
        NetWeights { z, thetas }
    }
}

/// Architecture selector for the shared fitting loop.
#[derive(Debug, Clone)]
pub enum DenoiserArch {
    Gcg(GcgArch),
    Gdec(GdecArch),
}

impl From<GcgArch> for DenoiserArch {
    fn from(a: GcgArch) -> Self {
        DenoiserArch::Gcg(a)
    }
}

impl From<GdecArch> for DenoiserArch {
    fn from(a: GdecArch) -> Self {
        DenoiserArch::Gdec(a)
    }
}

impl DenoiserArch {
    fn layer_ops(&self) -> Vec<&DMatrix<f64>> {
        match self {
            DenoiserArch::Gcg(a) => vec![a.filter.matrix(); a.widths.len() - 1],
            DenoiserArch::Gdec(a) => a.upsamplers.iter().collect(),
        }
    }

    fn widths(&self) -> &[usize] {
        match self {
            DenoiserArch::Gcg(a) => &a.widths,
            DenoiserArch::Gdec(a) => &a.widths,
        }
    }

    fn simplified(&self) -> bool {
        match self {
            DenoiserArch::Gcg(a) => a.simplified,
            DenoiserArch::Gdec(a) => a.simplified,
        }
    }

    /// Mixing operator of the two-layer analysis form.
    pub fn two_layer_op(&self) -> Option<&DMatrix<f64>> {
        if !self.simplified() {
            return None;
        }
        match self {
            DenoiserArch::Gcg(a) => Some(a.filter.matrix()),
            DenoiserArch::Gdec(a) => Some(&a.upsamplers[0]),
        }
    }

    fn input_dim(&self) -> usize {
        match self {
            DenoiserArch::Gcg(a) => a.n(),
            DenoiserArch::Gdec(a) => a.upsamplers.first().map_or(0, |u| u.ncols()),
        }
    }

    pub fn output_len(&self) -> usize {
        match self {
            DenoiserArch::Gcg(a) => a.n(),
            DenoiserArch::Gdec(a) => a.n(),
        }
    }

    pub fn init_weights(&self, seed: u64) -> NetWeights {
        NetWeights::gaussian(self.input_dim(), self.widths(), self.simplified(), seed)
    }

    pub fn forward(&self, weights: &NetWeights) -> Result<DVector<f64>> {
        match self {
            DenoiserArch::Gcg(a) => gcg_forward(a, weights),
            DenoiserArch::Gdec(a) => gdec_forward(a, weights),
        }
    }

    /// Conservative step size: one hundredth of the inverse top eigenvalue of
    /// the expected squared Jacobian for the two-layer forms, 1e-3 otherwise.
    pub fn default_lr(&self) -> Result<f64> {
        match self.two_layer_op() {
            Some(op) => {
                let x = kernel_matrix(op)?;
                let top = power_top_eig(&x, 200);
                Ok(if top > 0.0 { 0.01 / top } else { 1e-3 })
            }
            None => Ok(1e-3),
        }
    }
}

/// Pre-activations and readout of a two-layer form `ReLU(op theta) b`.
fn simplified_pre(
    op: &DMatrix<f64>,
    weights: &NetWeights,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if weights.thetas.len() != 1 {
        return Err(RgspError::DimensionMismatch(format!(
            "two-layer form takes one weight matrix, got {}",
            weights.thetas.len()
        )));
    }
    let theta = &weights.thetas[0];
    if theta.nrows() != op.ncols() {
        return Err(RgspError::DimensionMismatch(format!(
            "weights have {} rows, operator has {} columns",
            theta.nrows(),
            op.ncols()
        )));
    }
    let b = sign_split_readout(theta.ncols());
    Ok((op * theta, b))
}

/// Forward pass of the convolutional generator.
pub fn gcg_forward(arch: &GcgArch, weights: &NetWeights) -> Result<DVector<f64>> {
    if arch.simplified {
        let (pre, b) = simplified_pre(arch.filter.matrix(), weights)?;
        return Ok(relu(&pre) * b);
    }
    let ops = vec![arch.filter.matrix(); arch.widths.len() - 1];
    Ok(deep_forward(&ops, &weights.z, &weights.thetas)?.2)
}

/// Forward pass of the upsampling decoder.
pub fn gdec_forward(arch: &GdecArch, weights: &NetWeights) -> Result<DVector<f64>> {
    if arch.simplified {
        let (pre, b) = simplified_pre(&arch.upsamplers[0], weights)?;
        return Ok(relu(&pre) * b);
    }
    let ops: Vec<&DMatrix<f64>> = arch.upsamplers.iter().collect();
    Ok(deep_forward(&ops, &weights.z, &weights.thetas)?.2)
}

/// Deep recursion: pre_l = op_l * y_{l-1} * theta_l, ReLU on all but the last
/// layer. Returns the layer inputs, pre-activations, and the output column.
#[allow(clippy::type_complexity)]
fn deep_forward(
    ops: &[&DMatrix<f64>],
    z: &DMatrix<f64>,
    thetas: &[DMatrix<f64>],
) -> Result<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>, DVector<f64>)> {
    if ops.is_empty() || ops.len() != thetas.len() {
        return Err(RgspError::DimensionMismatch(format!(
            "{} operators vs {} weight matrices",
            ops.len(),
            thetas.len()
        )));
    }
    let mut ys = vec![z.clone()];
    let mut pres = Vec::with_capacity(ops.len());
    for l in 0..ops.len() {
        let y = &ys[l];
        if ops[l].ncols() != y.nrows() || y.ncols() != thetas[l].nrows() {
            return Err(RgspError::DimensionMismatch(format!(
                "layer {l}: operator {:?}, input {:?}, weights {:?}",
                ops[l].shape(),
                y.shape(),
                thetas[l].shape()
            )));
        }
        let pre = ops[l] * y * &thetas[l];
        let next = if l + 1 == ops.len() { pre.clone() } else { relu(&pre) };
        pres.push(pre);
        ys.push(next);
    }
    let out = {
        let last = ys.last().unwrap();
        if last.ncols() != 1 {
            return Err(RgspError::DimensionMismatch(format!("output has {} columns", last.ncols())));
        }
        last.column(0).into_owned()
    };
    Ok((ys, pres, out))
}

/// Loss gradient of a two-layer form for a given residual `f(theta) - x`,
/// assembled from the per-feature Jacobian blocks `b_f op' diag(mask_f)`.
pub fn analytic_gradient(
    op: &DMatrix<f64>,
    theta: &DMatrix<f64>,
    b: &DVector<f64>,
    residual: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    if op.ncols() != theta.nrows() || theta.ncols() != b.len() || residual.len() != op.nrows() {
        return Err(RgspError::DimensionMismatch(format!(
            "op {:?}, theta {:?}, b {}, residual {}",
            op.shape(),
            theta.shape(),
            b.len(),
            residual.len()
        )));
    }
    let pre = op * theta;
    Ok(op.transpose() * step(&pre).component_mul(&(residual * b.transpose())))
}

/// Squared-error loss, its gradient for every weight matrix, and the output.
fn grad_and_loss(
    arch: &DenoiserArch,
    weights: &NetWeights,
    x: &DVector<f64>,
) -> Result<(f64, Vec<DMatrix<f64>>, DVector<f64>)> {
    if let Some(op) = arch.two_layer_op() {
        let (pre, b) = simplified_pre(op, weights)?;
        let out = relu(&pre) * &b;
        let r = &out - x;
        let loss = 0.5 * r.norm_squared();
        let grad = op.transpose() * step(&pre).component_mul(&(&r * b.transpose()));
        return Ok((loss, vec![grad], out));
    }
    let ops = arch.layer_ops();
    let (ys, pres, out) = deep_forward(&ops, &weights.z, &weights.thetas)?;
    let r = &out - x;
    let loss = 0.5 * r.norm_squared();
    let last = ops.len() - 1;
    let mut grads = vec![DMatrix::zeros(0, 0); ops.len()];
    let mut d_y = DMatrix::from_column_slice(r.len(), 1, r.as_slice());
    for l in (0..=last).rev() {
        let g = if l == last { d_y.clone() } else { d_y.component_mul(&step(&pres[l])) };
        grads[l] = (ops[l] * &ys[l]).transpose() * &g;
        if l > 0 {
            d_y = ops[l].transpose() * &g * weights.thetas[l].transpose();
        }
    }
    Ok((loss, grads, out))
}

/// Optimizer choice; with a single observation both reduce to full-batch steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Gd,
    Sgd,
}

/// Knobs for `fit_untrained`. `lr = None` picks the architecture default.
/// `plateau_stop` halts once the loss improves by less than 1e-5 over a
/// 20-epoch window.
#[derive(Debug, Clone)]
pub struct FitOptions {
    pub epochs: usize,
    pub lr: Option<f64>,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub plateau_stop: bool,
}

impl FitOptions {
    pub fn new(epochs: usize, seed: u64) -> FitOptions {
        FitOptions { epochs, lr: None, optimizer: Optimizer::Gd, seed, plateau_stop: false }
    }
}

/// Per-epoch record of a fit; entry 0 is the state at initialization.
/// `best_epoch` marks the smallest NMSE when the truth is known, otherwise
/// the smallest loss.
#[derive(Debug, Clone)]
pub struct FitTrace {
    pub loss: Vec<f64>,
    pub nmse: Vec<f64>,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
}

/// Fit an untrained network to one observation with full-batch gradient
/// descent from a fresh random initialization; returns the output at the
/// stopping epoch together with the trajectory.
pub fn fit_untrained(
    arch: &DenoiserArch,
    x_observed: &DVector<f64>,
    opts: &FitOptions,
    truth: Option<&DVector<f64>>,
) -> Result<(DVector<f64>, FitTrace)> {
    if x_observed.len() != arch.output_len() {
        return Err(RgspError::DimensionMismatch(format!(
            "observation length {} vs output length {}",
            x_observed.len(),
            arch.output_len()
        )));
    }
    let lr = match opts.lr {
        Some(v) if v > 0.0 => v,
        Some(v) => return Err(RgspError::InvalidParams(format!("lr = {v}"))),
        None => arch.default_lr()?,
    };
    let mut w = arch.init_weights(opts.seed);
    let (mut loss, mut grads, mut out) = grad_and_loss(arch, &w, x_observed)?;
    let loss0 = loss;
    let mut losses = vec![loss];
    let mut nmses = Vec::new();
    if let Some(t) = truth {
        nmses.push(nerr_vec(&out, t)?);
    }
    let mut stopped = 0;
    for t in 1..=opts.epochs {
        for (theta, g) in w.thetas.iter_mut().zip(&grads) {
            *theta -= g * lr;
        }
        (loss, grads, out) = grad_and_loss(arch, &w, x_observed)?;
        losses.push(loss);
        if let Some(tr) = truth {
            nmses.push(nerr_vec(&out, tr)?);
        }
        if !loss.is_finite() || loss > 1e6 * loss0 + 1e-9 {
            return Err(RgspError::Divergence(format!(
                "loss {loss:.3e} at epoch {t} from initial {loss0:.3e}"
            )));
        }
        stopped = t;
        if opts.plateau_stop && t >= 20 && losses[t - 20] - losses[t] < 1e-5 {
            break;
        }
    }
    let curve: &[f64] = if nmses.is_empty() { &losses } else { &nmses };
    let best_epoch = curve
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map_or(0, |(i, _)| i);
    Ok((out, FitTrace { loss: losses, nmse: nmses, best_epoch, stopped_epoch: stopped }))
}

/// Closed-form expected squared Jacobian of a two-layer form: the Gaussian
/// average of the ReLU masks gives `0.5 (1 - arccos(rho)/pi)` entrywise on
/// the row-correlation matrix, multiplied into the operator gram matrix.
fn kernel_matrix(op: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = op.nrows();
    let gram = op * op.transpose();
    let mut c = DVector::zeros(n);
    for i in 0..n {
        let g: f64 = gram[(i, i)];
        if g <= 0.0 {
            return Err(RgspError::ZeroRow(i));
        }
        c[i] = g.sqrt();
    }
    let mut x = DMatrix::zeros(n, n);
    for i in 0..n {
        // unit autocorrelation on the diagonal, exactly half the squared row norm
        x[(i, i)] = 0.5 * gram[(i, i)];
        for j in i + 1..n {
            let rho = (gram[(i, j)] / (c[i] * c[j])).clamp(-1.0, 1.0);
            let v = 0.5 * (1.0 - rho.acos() / PI) * gram[(i, j)];
            x[(i, j)] = v;
            x[(j, i)] = v;
        }
    }
    Ok(x)
}

/// Spectrum of the expected squared Jacobian of a two-layer form.
#[derive(Debug, Clone)]
pub struct JacobianSpectrum {
    /// The N x N expected squared Jacobian itself.
    pub x: DMatrix<f64>,
    /// Eigenvectors as columns, matching `sigma_sq`.
    pub w: DMatrix<f64>,
    /// Eigenvalues in descending order.
    pub sigma_sq: DVector<f64>,
}

/// Expected squared Jacobian of `ReLU(op Theta) b` over Gaussian weights,
/// with its eigendecomposition.
pub fn expected_sq_jacobian(op: &DMatrix<f64>) -> Result<JacobianSpectrum> {
    let x = kernel_matrix(op)?;
    let (sigma_sq, w) = la::sym_eigen_desc(&x);
    Ok(JacobianSpectrum { x, w, sigma_sq })
}

/// Monte-Carlo estimate of the expected squared Jacobian from `draws`
/// independent Gaussian weight draws with `features` columns each.
pub fn mc_sq_jacobian(op: &DMatrix<f64>, features: usize, draws: usize, seed: u64) -> DMatrix<f64> {
    let n = op.nrows();
    let m = op.ncols();
    let chunk = 512;
    let starts: Vec<usize> = (0..draws).step_by(chunk).collect();
    let partials: Vec<DMatrix<f64>> = starts
        .par_iter()
        .map(|&start| {
            let mut acc = DMatrix::zeros(n, n);
            for d in start..(start + chunk).min(draws) {
                let mut rng = seeded_rng(seed, &[0x6d63 /* mc */, d as u64]);
                let theta =
                    DMatrix::from_fn(m, features, |_, _| rng.sample::<f64, _>(StandardNormal));
                let mask = step(&(op * theta));
                acc += &mask * mask.transpose();
            }
            acc
        })
        .collect();
    let mut acc = DMatrix::zeros(n, n);
    for p in partials {
        acc += p;
    }
    let gram = op * op.transpose();
    (acc / (draws * features) as f64).component_mul(&gram)
}

fn power_top_eig(m: &DMatrix<f64>, iters: usize) -> f64 {
    let n = m.nrows();
    let mut v = DVector::from_element(n, (1.0 / n as f64).sqrt());
    for _ in 0..iters {
        let w = m * &v;
        let nrm = w.norm();
        if nrm <= 1e-300 {
            return 0.0;
        }
        v = w / nrm;
    }
    v.dot(&(m * &v))
}

/// Mean per-column distance between two orthonormal bases after the optimal
/// orthogonal alignment of the second onto the first.
pub fn eigen_alignment(v_k: &DMatrix<f64>, w_k: &DMatrix<f64>) -> Result<f64> {
    if v_k.shape() != w_k.shape() || v_k.ncols() == 0 {
        return Err(RgspError::DimensionMismatch(format!("{:?} vs {:?}", v_k.shape(), w_k.shape())));
    }
    let k = v_k.ncols();
    for m in [v_k, w_k] {
        let gram = m.transpose() * m;
        if (gram - DMatrix::identity(k, k)).amax() > 1e-6 {
            return Err(RgspError::InvalidParams("columns are not orthonormal".into()));
        }
    }
    let q = la::procrustes(v_k, w_k);
    Ok((v_k - w_k * q).norm() / k as f64)
}

/// Closed-form envelope on the fit error after `t` gradient-descent steps:
/// an unfitted-signal term decaying in `t`, a width-driven floor `xi ||x||`,
/// and a fitted-noise term growing in `t` along the Jacobian eigenbasis.
#[allow(clippy::too_many_arguments)]
pub fn theorem31_bound(
    spectrum: &JacobianSpectrum,
    eta: f64,
    t: f64,
    x0: &DVector<f64>,
    x: &DVector<f64>,
    noise: &DVector<f64>,
    xi: f64,
    delta: f64,
    k: usize,
) -> Result<f64> {
    let n = spectrum.sigma_sq.len();
    if k == 0 || k > n || x0.len() != n || x.len() != n || noise.len() != n {
        return Err(RgspError::DimensionMismatch(format!(
            "k = {k}, N = {n}, lengths {}/{}/{}",
            x0.len(),
            x.len(),
            noise.len()
        )));
    }
    if eta <= 0.0 || t < 0.0 {
        return Err(RgspError::InvalidParams(format!("eta = {eta}, t = {t}")));
    }
    let top = spectrum.sigma_sq[0];
    let limit = if top > 0.0 { 1.0 / top } else { f64::INFINITY };
    if eta > limit {
        return Err(RgspError::StepTooLarge { eta, limit });
    }
    let geo = |s: f64| (1.0 - eta * s).max(0.0).powf(t);
    let term1 = (geo(spectrum.sigma_sq[k - 1]) + delta * geo(spectrum.sigma_sq[n - 1])) * x0.norm();
    let term2 = xi * x.norm();
    let mut acc = 0.0;
    for i in 0..n {
        let wn = spectrum.w.column(i).dot(noise);
        let g = geo(spectrum.sigma_sq[i]) - 1.0;
        acc += g * g * wn * wn;
    }
    Ok(term1 + term2 + acc.sqrt())
}

/// Write a fit trace as CSV with columns `epoch,loss,nmse` (nmse blank when
/// the truth was not supplied).
pub fn write_fit_trace_csv<W: std::io::Write>(trace: &FitTrace, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "loss", "nmse"]).map_err(|e| RgspError::Io(e.to_string()))?;
    for (e, l) in trace.loss.iter().enumerate() {
        let nm = trace.nmse.get(e).map(|v| v.to_string()).unwrap_or_default();
        w.write_record([e.to_string(), l.to_string(), nm])
            .map_err(|e| RgspError::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| RgspError::Io(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Gso, GsoKind};
    use crate::graphgen::{random_graph, GraphModel};
    use approx::assert_abs_diff_eq;

    fn test_filter(n: usize, p: f64, seed: u64) -> GraphFilter {
        let gso = random_graph(GraphModel::Er { n, p }, seed).unwrap();
        GraphFilter::new(&gso, &[1.0, 0.5, 0.2]).unwrap()
    }

    fn hand_two_cluster_layers(gamma: f64) -> DendrogramLayers {
        // two triangles joined by one edge, coarse level of two clusters
        let g = Gso::from_edges(
            6,
            &[(0, 1), (0, 2), (1, 2), (3, 4), (3, 5), (4, 5), (2, 3)],
            None,
            GsoKind::Adjacency,
        )
        .unwrap();
        crate::dendro::build_dendrogram_upsamplers(&g, &[2, 6], gamma, crate::dendro::Linkage::Average)
            .unwrap()
    }

    #[test]
    fn readout_is_sign_split_unit_vector() {
        let b = sign_split_readout(4);
        assert_eq!(b.as_slice(), &[0.5, 0.5, -0.5, -0.5]);
        assert_abs_diff_eq!(sign_split_readout(9).norm(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn gcg_two_layer_matches_closed_form() {
        let filter = test_filter(7, 0.5, 1);
        let h = filter.matrix().clone();
        let arch = GcgArch::two_layer(filter, 10).unwrap();
        let w = DenoiserArch::from(arch.clone()).init_weights(4);
        let out = gcg_forward(&arch, &w).unwrap();
        let manual = relu(&(&h * &w.thetas[0])) * sign_split_readout(10);
        assert_abs_diff_eq!(out, manual, epsilon = 1e-12);

        let zero = NetWeights { z: DMatrix::zeros(0, 0), thetas: vec![DMatrix::zeros(7, 10)] };
        assert_eq!(gcg_forward(&arch, &zero).unwrap(), DVector::zeros(7));
    }

    #[test]
    fn gcg_deep_matches_manual_recursion() {
        let filter = test_filter(6, 0.5, 2);
        let h = filter.matrix().clone();
        let arch = GcgArch::deep(filter, &[3, 4, 1]).unwrap();
        let w = DenoiserArch::from(arch.clone()).init_weights(9);
        let out = gcg_forward(&arch, &w).unwrap();
        let y1 = relu(&(&h * &w.z * &w.thetas[0]));
        let manual = &h * y1 * &w.thetas[1];
        assert_abs_diff_eq!(out, manual.column(0).into_owned(), epsilon = 1e-12);
    }

    #[test]
    fn gcg_single_linear_layer_is_identity_path() {
        let gso = random_graph(GraphModel::Er { n: 5, p: 0.6 }, 13).unwrap();
        let filter = GraphFilter::identity(&gso);
        let arch = GcgArch::deep(filter, &[5, 1]).unwrap();
        let theta = DMatrix::from_fn(5, 1, |i, _| i as f64 + 1.0);
        let w = NetWeights { z: DMatrix::identity(5, 5), thetas: vec![theta.clone()] };
        let out = gcg_forward(&arch, &w).unwrap();
        assert_abs_diff_eq!(out, theta.column(0).into_owned(), epsilon = 1e-14);
    }

    #[test]
    fn gdec_two_layer_matches_closed_form_and_copies_clusters() {
        let layers = hand_two_cluster_layers(1.0);
        let arch = GdecArch::two_layer(&layers, 8).unwrap();
        let w = DenoiserArch::from(arch.clone()).init_weights(11);
        let out = gdec_forward(&arch, &w).unwrap();
        let manual = relu(&(&layers.upsamplers[0] * &w.thetas[0])) * sign_split_readout(8);
        assert_abs_diff_eq!(out, manual, epsilon = 1e-12);
        // gamma = 1 makes the upsampler a pure membership copy, so outputs are
        // constant within each cluster
        for u in 0..6 {
            for u2 in 0..6 {
                if layers.assignments[0][u2] == layers.assignments[0][u] {
                    assert_abs_diff_eq!(out[u], out[u2], epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn analytic_gradient_is_linear_in_residual() {
        let filter = test_filter(6, 0.5, 3);
        let op = filter.matrix();
        let theta = DMatrix::from_fn(6, 8, |i, j| ((i * 8 + j) as f64 * 0.37).sin());
        let b = sign_split_readout(8);
        let zero = analytic_gradient(op, &theta, &b, &DVector::zeros(6)).unwrap();
        assert_eq!(zero, DMatrix::zeros(6, 8));
        let r = DVector::from_fn(6, |i, _| (i as f64 - 2.5) * 0.3);
        let g1 = analytic_gradient(op, &theta, &b, &r).unwrap();
        let g2 = analytic_gradient(op, &theta, &b, &(&r * 2.0)).unwrap();
        assert_abs_diff_eq!(g2, &g1 * 2.0, epsilon = 1e-12);
    }

    /// Central finite differences of the squared-error loss of a two-layer fit.
    fn fd_two_layer(
        op: &DMatrix<f64>,
        theta: &DMatrix<f64>,
        b: &DVector<f64>,
        x: &DVector<f64>,
        h: f64,
    ) -> DMatrix<f64> {
        let loss = |th: &DMatrix<f64>| {
            let out = relu(&(op * th)) * b;
            0.5 * (out - x).norm_squared()
        };
        DMatrix::from_fn(theta.nrows(), theta.ncols(), |i, j| {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[(i, j)] += h;
            tm[(i, j)] -= h;
            (loss(&tp) - loss(&tm)) / (2.0 * h)
        })
    }

    #[test]
    fn two_layer_gradient_matches_finite_differences() {
        let filter = test_filter(6, 0.6, 4);
        let op = filter.matrix().clone();
        let b = sign_split_readout(8);
        let x = DVector::from_fn(6, |i, _| (i as f64 * 0.71).cos());
        let mut seed = 0;
        let theta = loop {
            let arch = GcgArch::two_layer(filter.clone(), 8).unwrap();
            let w = DenoiserArch::from(arch).init_weights(seed);
            let pre = &op * &w.thetas[0];
            if pre.iter().all(|v| v.abs() > 1e-4) {
                break w.thetas[0].clone();
            }
            seed += 1;
            assert!(seed < 50, "no kink-free draw found");
        };
        let r = relu(&(&op * &theta)) * &b - &x;
        let grad = analytic_gradient(&op, &theta, &b, &r).unwrap();
        let fd = fd_two_layer(&op, &theta, &b, &x, 1e-5);
        assert!((&grad - &fd).norm() < 1e-5 * fd.norm().max(1.0), "{}", (&grad - &fd).norm());
    }

    #[test]
    fn deep_gradient_matches_finite_differences() {
        let filter = test_filter(10, 0.4, 5);
        let arch = DenoiserArch::from(GcgArch::deep(filter, &[3, 5, 4, 3, 1]).unwrap());
        let x = DVector::from_fn(10, |i, _| (i as f64 * 0.31).sin());
        let mut seed = 0;
        let w = loop {
            let w = arch.init_weights(seed);
            let (_, pres, _) = deep_forward(&arch.layer_ops(), &w.z, &w.thetas).unwrap();
            if pres.iter().all(|p| p.iter().all(|v| v.abs() > 1e-4)) {
                break w;
            }
            seed += 1;
            assert!(seed < 200, "no kink-free draw found");
        };
        let (_, grads, _) = grad_and_loss(&arch, &w, &x).unwrap();
        let h = 1e-5;
        #[allow(clippy::needless_range_loop)]
        for l in 0..w.thetas.len() {
            let fd = DMatrix::from_fn(w.thetas[l].nrows(), w.thetas[l].ncols(), |i, j| {
                let mut wp = w.clone();
                let mut wm = w.clone();
                wp.thetas[l][(i, j)] += h;
                wm.thetas[l][(i, j)] -= h;
                let lp = grad_and_loss(&arch, &wp, &x).unwrap().0;
                let lm = grad_and_loss(&arch, &wm, &x).unwrap().0;
                (lp - lm) / (2.0 * h)
            });
            assert!(
                (&grads[l] - &fd).norm() < 1e-5 * fd.norm().max(1.0),
                "layer {l}: {}",
                (&grads[l] - &fd).norm()
            );
        }
    }

    #[test]
    fn kernel_at_identity_is_half_identity() {
        let js = expected_sq_jacobian(&DMatrix::identity(5, 5)).unwrap();
        assert_abs_diff_eq!(js.x, DMatrix::identity(5, 5) * 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(js.sigma_sq[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn kernel_diagonal_is_half_squared_row_norm() {
        let filter = test_filter(7, 0.5, 6);
        let op = filter.matrix();
        let js = expected_sq_jacobian(op).unwrap();
        for i in 0..7 {
            assert_abs_diff_eq!(js.x[(i, i)], 0.5 * op.row(i).norm_squared(), epsilon = 1e-12);
        }
        assert!(js.sigma_sq[6] > -1e-9, "kernel not PSD: {}", js.sigma_sq[6]);
    }

    #[test]
    fn kernel_rejects_zero_row() {
        let mut op = DMatrix::identity(4, 4);
        op[(2, 2)] = 0.0;
        assert!(matches!(expected_sq_jacobian(&op), Err(RgspError::ZeroRow(2))));
    }

    #[test]
    fn monte_carlo_matches_closed_form() {
        let filter = test_filter(6, 0.6, 7);
        let op = filter.matrix();
        let js = expected_sq_jacobian(op).unwrap();
        let mc = mc_sq_jacobian(op, 12, 20_000, 5);
        let scale = js.x.amax();
        for i in 0..6 {
            for j in 0..6 {
                let x = js.x[(i, j)];
                let err = (mc[(i, j)] - x).abs();
                assert!(
                    err <= 0.03 * x.abs() + 1e-6 * scale,
                    "entry ({i},{j}): mc {} vs {}",
                    mc[(i, j)],
                    x
                );
            }
        }
    }

    #[test]
    fn alignment_ignores_rotation_and_sign() {
        let raw = DMatrix::from_fn(6, 3, |i, j| ((i * 3 + j) as f64 * 0.747).sin());
        let v = raw.qr().q();
        let rot = DMatrix::from_fn(3, 3, |i, j| ((i + 2 * j) as f64 * 1.3).cos());
        let q0 = rot.qr().q();
        assert!(eigen_alignment(&v, &(&v * &q0)).unwrap() < 1e-10);
        let one = v.column(0).clone_owned();
        let m_one = DMatrix::from_column_slice(6, 1, one.as_slice());
        assert!(eigen_alignment(&m_one, &(-&m_one)).unwrap() < 1e-12);
    }

    #[test]
    fn alignment_of_complementary_subspaces_hits_closed_form() {
        let eye = DMatrix::identity(6, 6);
        let v = eye.columns(0, 3).into_owned();
        let w = eye.columns(3, 3).into_owned();
        let got = eigen_alignment(&v, &w).unwrap();
        assert_abs_diff_eq!(got, (2.0 * 3.0f64).sqrt() / 3.0, epsilon = 1e-9);
    }

    #[test]
    fn bound_limits_and_step_guard() {
        let filter = test_filter(8, 0.5, 8);
        let js = expected_sq_jacobian(filter.matrix()).unwrap();
        let x0 = DVector::from_fn(8, |i, _| (i as f64 * 0.4).sin());
        let x = DVector::from_fn(8, |i, _| (i as f64 * 0.9).cos());
        let n = DVector::from_fn(8, |i, _| 0.1 * (i as f64 - 3.0));
        let eta = 0.9 / js.sigma_sq[0];
        let (xi, delta) = (0.05, 0.02);

        let at0 = theorem31_bound(&js, eta, 0.0, &x0, &x, &n, xi, delta, 3).unwrap();
        assert_abs_diff_eq!(at0, (1.0 + delta) * x0.norm() + xi * x.norm(), epsilon = 1e-12);

        // flat spectrum so every geometric factor vanishes at large t
        let flat = expected_sq_jacobian(&DMatrix::identity(8, 8)).unwrap();
        let at_inf = theorem31_bound(&flat, 1.8, 1e6, &x0, &x, &n, xi, delta, 3).unwrap();
        assert_abs_diff_eq!(at_inf, xi * x.norm() + n.norm(), epsilon = 1e-9);

        let zero = DVector::zeros(8);
        let mut prev = f64::INFINITY;
        for t in [0.0, 1.0, 2.0, 5.0, 20.0] {
            let b = theorem31_bound(&js, eta, t, &x0, &x, &zero, 0.0, 0.0, 3).unwrap();
            let expect = (1.0 - eta * js.sigma_sq[2]).powf(t) * x0.norm();
            assert_abs_diff_eq!(b, expect, epsilon = 1e-10);
            assert!(b < prev);
            prev = b;
        }

        let too_big = 1.01 / js.sigma_sq[0];
        assert!(matches!(
            theorem31_bound(&js, too_big, 1.0, &x0, &x, &n, xi, delta, 3),
            Err(RgspError::StepTooLarge { .. })
        ));
    }

    #[test]
    fn fit_fixed_point_keeps_zero_loss() {
        let filter = test_filter(6, 0.6, 9);
        let arch = DenoiserArch::from(GcgArch::two_layer(filter, 12).unwrap());
        let w0 = arch.init_weights(21);
        let target = arch.forward(&w0).unwrap();
        let (out, trace) = fit_untrained(&arch, &target, &FitOptions::new(30, 21), None).unwrap();
        assert!(trace.loss[0] < 1e-24);
        assert!(trace.loss.iter().all(|&l| l < 1e-20));
        assert_abs_diff_eq!(out, target, epsilon = 1e-10);
    }

    #[test]
    fn fit_reduces_loss_and_fills_trace() {
        let filter = test_filter(8, 0.5, 10);
        let arch = DenoiserArch::from(GcgArch::two_layer(filter, 20).unwrap());
        let truth = DVector::from_fn(8, |i, _| (i as f64 * 0.5).sin());
        let noisy = &truth + DVector::from_fn(8, |i, _| 0.05 * ((3 * i) as f64 * 0.7).cos());
        let opts = FitOptions::new(2000, 3);
        let (_, trace) = fit_untrained(&arch, &noisy, &opts, Some(&truth)).unwrap();
        assert_eq!(trace.loss.len(), 2001);
        assert_eq!(trace.nmse.len(), 2001);
        assert_eq!(trace.stopped_epoch, 2000);
        assert!(trace.loss[2000] < 0.6 * trace.loss[0], "{} vs {}", trace.loss[2000], trace.loss[0]);
        let min = trace.nmse.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_abs_diff_eq!(trace.nmse[trace.best_epoch], min, epsilon = 0.0);
    }

    #[test]
    fn fit_rejects_huge_steps() {
        let filter = test_filter(6, 0.6, 11);
        let arch = DenoiserArch::from(GcgArch::two_layer(filter, 12).unwrap());
        let target = DVector::from_element(6, 1.0);
        let mut opts = FitOptions::new(200, 1);
        opts.lr = Some(1e6);
        assert!(matches!(
            fit_untrained(&arch, &target, &opts, None),
            Err(RgspError::Divergence(_))
        ));
    }

    #[test]
    fn plateau_stop_halts_early() {
        let filter = test_filter(6, 0.6, 12);
        let arch = DenoiserArch::from(GcgArch::two_layer(filter, 12).unwrap());
        let w0 = arch.init_weights(5);
        let target = arch.forward(&w0).unwrap();
        let mut opts = FitOptions::new(500, 5);
        opts.plateau_stop = true;
        let (_, trace) = fit_untrained(&arch, &target, &opts, None).unwrap();
        assert_eq!(trace.stopped_epoch, 20);
    }

    #[test]
    fn pure_copy_decoder_nails_cluster_constant_target() {
        let layers = hand_two_cluster_layers(1.0);
        let arch = DenoiserArch::from(GdecArch::two_layer(&layers, 16).unwrap());
        let target =
            DVector::from_fn(6, |i, _| if layers.assignments[0][i] == 0 { 1.3 } else { -0.4 });
        // perfect prior alignment tolerates a step near the stability limit
        let mut opts = FitOptions::new(500, 2);
        opts.lr = Some(0.2);
        let (_, trace) = fit_untrained(&arch, &target, &opts, None).unwrap();
        assert!(
            trace.loss.iter().any(|&l| l < 1e-6),
            "min loss {:?}",
            trace.loss.iter().cloned().fold(f64::INFINITY, f64::min)
        );
    }

    #[test]
    fn trace_csv_has_header_and_rows() {
        let trace = FitTrace {
            loss: vec![1.0, 0.5],
            nmse: vec![0.9, 0.4],
            best_epoch: 1,
            stopped_epoch: 1,
        };
        let mut buf = Vec::new();
        write_fit_trace_csv(&trace, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "epoch,loss,nmse");
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().nth(2).unwrap().starts_with("1,0.5,0.4"));
    }
}
