// SPDX-License-Identifier: Apache-2.0

//! One-step maps and the integration driver.
//!
//! A [`Stepper`] is built once per `(system, plan)`: it reduces the system to unit
//! mass, caches every propagator and kick covariance the plan needs, and is then
//! shared read-only by all paths. Each path owns a [`Workspace`] so stepping never
//! allocates.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::fastflow::{
    assemble_propagator, kick_covariance, modal_decompose, CoupledKickTable, FastFlowError,
    KickCovariance, ModalForm, Propagator,
};
use crate::linalg::psd_factor;
use crate::model::{mass_weighted_form, CheckedSystem, ModelError, State, Transform};
use crate::noise::{grid_count, BrownianGrid, NoiseError, PathStream};

/// Default `||(q, p)||_2` above which a run is declared unstable.
pub const DEFAULT_BLOWUP_THRESHOLD: f64 = 1e8;

#[derive(Debug, Error)]
pub enum IntegratorError {
    #[error("non-finite state after step {step}")]
    NonFiniteState { step: usize },
    #[error("state norm {norm:e} exceeded the blow-up threshold at step {step}")]
    BlowUp { step: usize, norm: f64 },
    #[error("{method} only supports systems without damping and noise")]
    UnsupportedStochastic { method: Method },
    #[error("{method} does not support noise mode {mode}")]
    UnsupportedNoiseMode { method: Method, mode: NoiseMode },
    #[error("unknown method '{0}'")]
    UnknownMethod(String),
    #[error("step size must be finite and nonzero, got {0}")]
    InvalidStep(f64),
    #[error("noise input does not match the plan: {0}")]
    NoiseInput(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    FastFlow(#[from] FastFlowError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// `phi^s(H) o phi^f(H)` without damping or noise.
    Sim1Hamiltonian,
    /// `phi^f(H) o phi^s(H)`, the adjoint of [`Method::Sim1Hamiltonian`].
    Sim1Dual,
    /// `phi^s(H) o phi^f(H)` with the exact damped, noisy fast flow.
    Sim1Langevin,
    /// `phi^s(H/2) o phi^f(H) o phi^s(H/2)`.
    Sim2Langevin,
    /// Seven-stage fourth-order composition, deterministic only.
    Sim4Deterministic,
    /// Exact Ornstein–Uhlenbeck substep on `p`, then symplectic Euler of the full
    /// Hamiltonian.
    Gla1,
    /// Symplectic Euler of the full deterministic system, damping included.
    FineSymplecticEuler,
    /// Semi-implicit Euler–Maruyama: symplectic Euler plus `sigma dW` on `p`.
    FineEulerMaruyama,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Sim1Hamiltonian,
        Method::Sim1Dual,
        Method::Sim1Langevin,
        Method::Sim2Langevin,
        Method::Sim4Deterministic,
        Method::Gla1,
        Method::FineSymplecticEuler,
        Method::FineEulerMaruyama,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Sim1Hamiltonian => "sim1-ham",
            Method::Sim1Dual => "sim1-dual",
            Method::Sim1Langevin => "sim1-lan",
            Method::Sim2Langevin => "sim2-lan",
            Method::Sim4Deterministic => "sim4-det",
            Method::Gla1 => "gla1",
            Method::FineSymplecticEuler => "fine-symplectic-euler",
            Method::FineEulerMaruyama => "fine-euler-maruyama",
        }
    }

    pub fn is_deterministic_only(self) -> bool {
        matches!(
            self,
            Method::Sim1Hamiltonian
                | Method::Sim1Dual
                | Method::Sim4Deterministic
                | Method::FineSymplecticEuler
        )
    }

    pub fn is_impulse(self) -> bool {
        matches!(
            self,
            Method::Sim1Hamiltonian
                | Method::Sim1Dual
                | Method::Sim1Langevin
                | Method::Sim2Langevin
                | Method::Sim4Deterministic
        )
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl serde::Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl FromStr for Method {
    type Err = IntegratorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        let m = match key.as_str() {
            "sim1-ham" | "sim1-hamiltonian" => Method::Sim1Hamiltonian,
            "sim1-dual" => Method::Sim1Dual,
            "sim1-lan" | "sim1-langevin" | "sim1" => Method::Sim1Langevin,
            "sim2-lan" | "sim2-langevin" | "sim2" => Method::Sim2Langevin,
            "sim4-det" | "sim4-deterministic" | "sim4" => Method::Sim4Deterministic,
            "gla1" | "gla" => Method::Gla1,
            "fine-symplectic-euler" | "symplectic-euler" => Method::FineSymplecticEuler,
            "fine-euler-maruyama" | "euler-maruyama" => Method::FineEulerMaruyama,
            _ => return Err(IntegratorError::UnknownMethod(s.to_string())),
        };
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseMode {
    /// Kicks drawn from the exact covariance with a per-path stream.
    ExactSample,
    /// Kicks aggregated from a shared Brownian grid with step `fine_h`.
    PathCoupled { fine_h: f64 },
    None,
}

impl fmt::Display for NoiseMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseMode::ExactSample => f.write_str("exact-sample"),
            NoiseMode::PathCoupled { fine_h } => write!(f, "path-coupled(h={fine_h})"),
            NoiseMode::None => f.write_str("none"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowKind {
    Fast,
    Slow,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Substep {
    pub kind: FlowKind,
    pub duration: f64,
}

/// Method, macro step and the ordered fast/slow stages of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPlan {
    pub method: Method,
    pub h: f64,
    /// Stages in application order; empty for the non-splitting baselines.
    pub substeps: Vec<Substep>,
    pub noise_mode: NoiseMode,
}

/// `1 / (2 - 2^{1/3})`
pub fn sim4_coefficient() -> f64 {
    1.0 / (2.0 - 2f64.cbrt())
}

impl StepPlan {
    pub fn new(method: Method, h: f64, noise_mode: NoiseMode) -> Self {
        let fast = |d: f64| Substep {
            kind: FlowKind::Fast,
            duration: d,
        };
        let slow = |d: f64| Substep {
            kind: FlowKind::Slow,
            duration: d,
        };
        let substeps = match method {
            Method::Sim1Hamiltonian | Method::Sim1Langevin => vec![fast(h), slow(h)],
            Method::Sim1Dual => vec![slow(h), fast(h)],
            Method::Sim2Langevin => vec![slow(0.5 * h), fast(h), slow(0.5 * h)],
            Method::Sim4Deterministic => {
                let c = sim4_coefficient();
                vec![
                    slow(0.5 * c * h),
                    fast(c * h),
                    slow(0.5 * (1.0 - c) * h),
                    fast((1.0 - 2.0 * c) * h),
                    slow(0.5 * (1.0 - c) * h),
                    fast(c * h),
                    slow(0.5 * c * h),
                ]
            }
            Method::Gla1 | Method::FineSymplecticEuler | Method::FineEulerMaruyama => Vec::new(),
        };
        let plan = StepPlan {
            method,
            h,
            substeps,
            noise_mode,
        };
        if !plan.substeps.is_empty() {
            let (f, s) = plan.durations();
            assert!(
                (f - h).abs() <= 1e-12 * h.abs() && (s - h).abs() <= 1e-12 * h.abs(),
                "splitting inconsistency: fast {f}, slow {s}, H {h}"
            );
        }
        plan
    }

    pub fn deterministic(method: Method, h: f64) -> Self {
        StepPlan::new(method, h, NoiseMode::None)
    }

    /// Total fast and slow durations.
    pub fn durations(&self) -> (f64, f64) {
        self.substeps.iter().fold((0.0, 0.0), |(f, s), st| match st.kind {
            FlowKind::Fast => (f + st.duration, s),
            FlowKind::Slow => (f, s + st.duration),
        })
    }
}

/// Per-path scratch buffers.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub q: DVector<f64>,
    pub p: DVector<f64>,
    q2: DVector<f64>,
    p2: DVector<f64>,
    f: DVector<f64>,
    kq: DVector<f64>,
    kp: DVector<f64>,
    z: DVector<f64>,
    mq: DVector<f64>,
    mp: DVector<f64>,
    dw: DVector<f64>,
}

impl Workspace {
    pub fn new(d: usize, noise_dim: usize) -> Self {
        let v = || DVector::zeros(d);
        Workspace {
            q: v(),
            p: v(),
            q2: v(),
            p2: v(),
            f: v(),
            kq: v(),
            kp: v(),
            z: DVector::zeros(2 * d),
            mq: v(),
            mp: v(),
            dw: DVector::zeros(noise_dim),
        }
    }
}

/// Noise consumed by one step.
pub enum StepNoise<'a> {
    None,
    Stream(&'a mut PathStream),
    /// Fine increments covering exactly this step, increment-major.
    Increments(&'a [f64]),
}

/// Noise for a whole run.
pub enum Noise<'a> {
    None,
    Stream(&'a mut PathStream),
    Grid(&'a BrownianGrid),
}

struct OuStep {
    decay: DMatrix<f64>,
    factor: DMatrix<f64>,
}

/// Cached one-step map of a plan on a fixed system.
pub struct Stepper {
    plan: StepPlan,
    system: CheckedSystem,
    transform: Transform,
    modal: ModalForm,
    /// One propagator per fast substep, in order.
    fast: Vec<Propagator>,
    kick: Option<KickCovariance>,
    coupled: Option<CoupledKickTable>,
    ou: Option<OuStep>,
    stiff_rate: DMatrix<f64>,
    increments_per_step: usize,
    noisy: bool,
}

impl fmt::Debug for Stepper {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Stepper")
            .field("plan", &self.plan)
            .field("noisy", &self.noisy)
            .finish()
    }
}

impl Stepper {
    pub fn new(sys: &CheckedSystem, plan: StepPlan) -> Result<Self, IntegratorError> {
        let h = plan.h;
        if !(h.is_finite() && h != 0.0) {
            return Err(IntegratorError::InvalidStep(h));
        }
        let (system, transform) = mass_weighted_form(sys)?;
        let method = plan.method;
        let deterministic = system.is_deterministic();
        if method.is_deterministic_only() {
            let damped = !system.is_undamped();
            let needs_undamped = method != Method::FineSymplecticEuler;
            if !deterministic || (needs_undamped && damped) {
                return Err(IntegratorError::UnsupportedStochastic { method });
            }
        }
        let noisy = !deterministic && plan.noise_mode != NoiseMode::None;
        if noisy && h < 0.0 {
            return Err(IntegratorError::InvalidStep(h));
        }
        let mode_ok = match (method, plan.noise_mode) {
            (_, NoiseMode::None) => method != Method::FineEulerMaruyama || deterministic,
            (Method::Sim1Langevin | Method::Sim2Langevin, _) => true,
            (Method::Gla1, NoiseMode::ExactSample) => true,
            (Method::FineEulerMaruyama, _) => true,
            _ => false,
        };
        if !mode_ok {
            return Err(IntegratorError::UnsupportedNoiseMode {
                method,
                mode: plan.noise_mode,
            });
        }

        let modal = modal_decompose(&system)?;
        let fast = plan
            .substeps
            .iter()
            .filter(|s| s.kind == FlowKind::Fast)
            .map(|s| assemble_propagator(&modal, s.duration))
            .collect();

        let mut kick = None;
        let mut coupled = None;
        let mut increments_per_step = 0;
        let mut ou = None;
        if method.is_impulse() && noisy {
            match plan.noise_mode {
                NoiseMode::ExactSample => kick = Some(kick_covariance(&modal, &system.sigma, h)?),
                NoiseMode::PathCoupled { fine_h } => {
                    let n = grid_count(h, fine_h)?;
                    coupled = Some(CoupledKickTable::new(&modal, &system.sigma, h, n));
                    increments_per_step = n;
                }
                NoiseMode::None => {}
            }
        }
        if method == Method::Gla1 {
            ou = Some(ou_step(&modal, &system.sigma, h, noisy));
        }
        if method == Method::FineEulerMaruyama {
            if let NoiseMode::PathCoupled { fine_h } = plan.noise_mode {
                increments_per_step = grid_count(h, fine_h)?;
                if increments_per_step != 1 {
                    return Err(IntegratorError::NoiseInput(format!(
                        "fine reference step {h} must equal the grid step {fine_h}"
                    )));
                }
            }
        }
        let stiff_rate = &system.stiffness / system.eps;

        Ok(Stepper {
            plan,
            system,
            transform,
            modal,
            fast,
            kick,
            coupled,
            ou,
            stiff_rate,
            increments_per_step,
            noisy,
        })
    }

    pub fn plan(&self) -> &StepPlan {
        &self.plan
    }

    pub fn h(&self) -> f64 {
        self.plan.h
    }

    /// The unit-mass system the stepper works on.
    pub fn system(&self) -> &CheckedSystem {
        &self.system
    }

    pub fn transform(&self) -> &Transform {
        &self.transform
    }

    pub fn modal(&self) -> &ModalForm {
        &self.modal
    }

    pub fn kick_covariance(&self) -> Option<&KickCovariance> {
        self.kick.as_ref()
    }

    pub fn propagators(&self) -> &[Propagator] {
        &self.fast
    }

    pub fn is_noisy(&self) -> bool {
        self.noisy
    }

    /// Fine Brownian increments consumed per step in path-coupled mode.
    pub fn increments_per_step(&self) -> usize {
        self.increments_per_step
    }

    pub fn workspace(&self) -> Workspace {
        Workspace::new(self.system.dim(), self.system.noise_dim())
    }

    fn slow(&self, ws: &mut Workspace, tau: f64) {
        self.system.force(ws.q.as_slice(), ws.f.as_mut_slice());
        ws.p.axpy(tau, &ws.f, 1.0);
    }

    fn fast(&self, ws: &mut Workspace, k: usize) {
        self.fast[k].apply_into(&ws.q, &ws.p, &mut ws.q2, &mut ws.p2);
        std::mem::swap(&mut ws.q, &mut ws.q2);
        std::mem::swap(&mut ws.p, &mut ws.p2);
    }

    fn add_kick(&self, ws: &mut Workspace, noise: &mut StepNoise<'_>) -> Result<(), IntegratorError> {
        if !self.noisy {
            return Ok(());
        }
        match (noise, &self.kick, &self.coupled) {
            (StepNoise::Stream(rng), Some(cov), _) => {
                cov.sample_into(*rng, &mut ws.z, &mut ws.kq, &mut ws.kp);
            }
            (StepNoise::Increments(dw), _, Some(table)) => {
                if dw.len() != self.increments_per_step * self.system.noise_dim() {
                    return Err(IntegratorError::NoiseInput(format!(
                        "expected {} increments, got {}",
                        self.increments_per_step * self.system.noise_dim(),
                        dw.len()
                    )));
                }
                table.kick_into(dw, &mut ws.mq, &mut ws.mp, &mut ws.kq, &mut ws.kp);
            }
            _ => {
                return Err(IntegratorError::NoiseInput(format!(
                    "noise mode {} needs matching step noise",
                    self.plan.noise_mode
                )))
            }
        }
        ws.q += &ws.kq;
        ws.p += &ws.kp;
        Ok(())
    }

    /// Advances `ws.q`, `ws.p` by one step (unit-mass coordinates).
    pub fn step(&self, ws: &mut Workspace, mut noise: StepNoise<'_>) -> Result<(), IntegratorError> {
        let h = self.plan.h;
        match self.plan.method {
            Method::Sim1Hamiltonian
            | Method::Sim1Dual
            | Method::Sim1Langevin
            | Method::Sim2Langevin
            | Method::Sim4Deterministic => {
                let mut k = 0;
                for st in &self.plan.substeps {
                    match st.kind {
                        FlowKind::Slow => self.slow(ws, st.duration),
                        FlowKind::Fast => {
                            self.fast(ws, k);
                            k += 1;
                            self.add_kick(ws, &mut noise)?;
                        }
                    }
                }
            }
            Method::Gla1 => {
                let ou = self.ou.as_ref().expect("GLA stepper carries its OU step");
                ws.p2.gemv(1.0, &ou.decay, &ws.p, 0.0);
                std::mem::swap(&mut ws.p, &mut ws.p2);
                if self.noisy {
                    let StepNoise::Stream(rng) = &mut noise else {
                        return Err(IntegratorError::NoiseInput("GLA needs a random stream".into()));
                    };
                    let r = ou.factor.ncols();
                    let z = &mut ws.z.as_mut_slice()[..r];
                    rng.fill_normal(z);
                    let zv = nalgebra::DVectorView::from_slice(z, r);
                    ws.p.gemv(1.0, &ou.factor, &zv, 1.0);
                }
                self.system.force(ws.q.as_slice(), ws.f.as_mut_slice());
                ws.f.gemv(-1.0, &self.stiff_rate, &ws.q, 1.0);
                ws.p.axpy(h, &ws.f, 1.0);
                ws.q.axpy(h, &ws.p, 1.0);
            }
            Method::FineSymplecticEuler | Method::FineEulerMaruyama => {
                self.system.force(ws.q.as_slice(), ws.f.as_mut_slice());
                ws.f.gemv(-1.0, &self.stiff_rate, &ws.q, 1.0);
                ws.f.gemv(-1.0, &self.system.damping, &ws.p, 1.0);
                ws.p.axpy(h, &ws.f, 1.0);
                if self.noisy {
                    let r = self.system.noise_dim();
                    match &mut noise {
                        StepNoise::Stream(rng) => {
                            rng.fill_normal(ws.dw.as_mut_slice());
                            ws.dw *= h.sqrt();
                        }
                        StepNoise::Increments(dw) if dw.len() == r => {
                            ws.dw.as_mut_slice().copy_from_slice(dw);
                        }
                        _ => {
                            return Err(IntegratorError::NoiseInput(
                                "Euler–Maruyama needs one increment or a stream".into(),
                            ))
                        }
                    }
                    ws.p.gemv(1.0, &self.system.sigma, &ws.dw, 1.0);
                }
                ws.q.axpy(h, &ws.p, 1.0);
            }
        }
        Ok(())
    }

    /// One step from `state` in original coordinates.
    pub fn step_state(&self, state: &State, noise: StepNoise<'_>) -> Result<State, IntegratorError> {
        let w = self.transform.to_weighted(state);
        let mut ws = self.workspace();
        ws.q.copy_from(&w.q);
        ws.p.copy_from(&w.p);
        self.step(&mut ws, noise)?;
        if !(ws.q.iter().chain(ws.p.iter()).all(|v| v.is_finite())) {
            return Err(IntegratorError::NonFiniteState { step: 1 });
        }
        let out = State {
            q: ws.q,
            p: ws.p,
            t: state.t + self.plan.h,
        };
        Ok(self.transform.from_weighted(&out))
    }
}

fn ou_step(modal: &ModalForm, sigma: &DMatrix<f64>, h: f64, noisy: bool) -> OuStep {
    let d = modal.dim();
    let decay_diag: Vec<f64> = modal.damping.iter().map(|&c| (-c * h).exp()).collect();
    let decay = modal.assemble(&decay_diag);
    if !noisy {
        return OuStep {
            decay,
            factor: DMatrix::zeros(d, d),
        };
    }
    // int_0^h e^{-c s} sigma sigma^T e^{-c s} ds, entrywise in the modal basis
    let sm = modal.basis.tr_mul(sigma);
    let mut cov = &sm * sm.transpose();
    for i in 0..d {
        for j in 0..d {
            let rate = modal.damping[i] + modal.damping[j];
            let w = if rate * h < 1e-8 {
                h * (1.0 - 0.5 * rate * h)
            } else {
                -(-rate * h).exp_m1() / rate
            };
            cov[(i, j)] *= w;
        }
    }
    let cov = &modal.basis * cov * modal.basis.transpose();
    OuStep {
        decay,
        factor: psd_factor(&crate::linalg::symmetrize(&cov)),
    }
}

/// Receives the state after every step, in original coordinates.
pub trait Recorder {
    fn record(&mut self, step: usize, t: f64, q: &DVector<f64>, p: &DVector<f64>);
}

impl Recorder for () {
    fn record(&mut self, _: usize, _: f64, _: &DVector<f64>, _: &DVector<f64>) {}
}

impl<F: FnMut(usize, f64, &DVector<f64>, &DVector<f64>)> Recorder for F {
    fn record(&mut self, step: usize, t: f64, q: &DVector<f64>, p: &DVector<f64>) {
        self(step, t, q, p)
    }
}

/// Stores every recorded state.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub states: Vec<State>,
}

impl Recorder for Trajectory {
    fn record(&mut self, _: usize, t: f64, q: &DVector<f64>, p: &DVector<f64>) {
        self.states.push(State {
            q: q.clone(),
            p: p.clone(),
            t,
        });
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegrateOptions {
    pub blowup_threshold: f64,
}

impl Default for IntegrateOptions {
    fn default() -> Self {
        IntegrateOptions {
            blowup_threshold: DEFAULT_BLOWUP_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub state: State,
    pub steps: usize,
    /// `steps * H`, the time actually reached.
    pub t_end: f64,
}

/// `N = round(T / H)`
pub fn step_count(t_end: f64, h: f64) -> usize {
    (t_end / h).round().max(0.0) as usize
}

/// Applies `round(T/H)` steps from `initial`, recording the initial state and the
/// state after every step.
pub fn integrate<R: Recorder + ?Sized>(
    stepper: &Stepper,
    initial: &State,
    t_end: f64,
    mut noise: Noise<'_>,
    recorder: &mut R,
    options: &IntegrateOptions,
) -> Result<Outcome, IntegratorError> {
    let h = stepper.h();
    let n = step_count(t_end, h.abs());
    let tf = stepper.transform();
    let identity = tf.is_identity();
    let mut ws = stepper.workspace();
    let start = tf.to_weighted(initial);
    ws.q.copy_from(&start.q);
    ws.p.copy_from(&start.p);
    recorder.record(0, initial.t, &initial.q, &initial.p);

    let per_step = stepper.increments_per_step() * stepper.system().noise_dim();
    if let Noise::Grid(g) = &noise {
        if stepper.is_noisy() && g.increments.len() < n * per_step {
            return Err(IntegratorError::NoiseInput(format!(
                "grid holds {} values, run needs {}",
                g.increments.len(),
                n * per_step
            )));
        }
    }

    for k in 0..n {
        let step_noise = match &mut noise {
            Noise::None => StepNoise::None,
            Noise::Stream(s) => StepNoise::Stream(s),
            Noise::Grid(g) => StepNoise::Increments(&g.increments[k * per_step..(k + 1) * per_step]),
        };
        stepper.step(&mut ws, step_noise)?;
        if !ws.q.iter().chain(ws.p.iter()).all(|v| v.is_finite()) {
            return Err(IntegratorError::NonFiniteState { step: k + 1 });
        }
        let norm = (ws.q.norm_squared() + ws.p.norm_squared()).sqrt();
        if norm > options.blowup_threshold {
            return Err(IntegratorError::BlowUp { step: k + 1, norm });
        }
        let t = initial.t + (k + 1) as f64 * h;
        if identity {
            recorder.record(k + 1, t, &ws.q, &ws.p);
        } else {
            let s = tf.from_weighted(&State {
                q: ws.q.clone(),
                p: ws.p.clone(),
                t,
            });
            recorder.record(k + 1, t, &s.q, &s.p);
        }
    }

    let out = tf.from_weighted(&State {
        q: ws.q,
        p: ws.p,
        t: initial.t + n as f64 * h,
    });
    Ok(Outcome {
        t_end: out.t - initial.t,
        state: out,
        steps: n,
    })
}

/// Builds a stepper and runs [`integrate`] without recording.
pub fn integrate_system(
    sys: &CheckedSystem,
    plan: StepPlan,
    initial: &State,
    t_end: f64,
    noise: Noise<'_>,
) -> Result<Outcome, IntegratorError> {
    let stepper = Stepper::new(sys, plan)?;
    integrate(&stepper, initial, t_end, noise, &mut (), &IntegrateOptions::default())
}
