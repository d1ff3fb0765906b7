//! Per-vehicle decision layer.
//!
//! A follower picks a predecessor plan (fresh or time-shifted communicated
//! profile, GP forecast, or constant-speed fallback), builds the hybrid MPC
//! program, solves it and applies the first input. The leader tracks a speed
//! reference with a plain convex MPC.

use std::collections::VecDeque;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::comms::Packet;
use crate::dynamics::{DiscreteSystem, ErrorState, KinematicState, VehicleParams};
use crate::error::Result;
use crate::gp::{self, discretize, implied_accel, GpModel, GpPayload, SpeedWindow, WINDOW_LEN};
use crate::miqp::{solve_miqp, MiqpOptions, MiqpStatus};
use crate::mld::{build, MldInputs, MpcWeights, PredecessorPlan, DEFAULT_GAP_ENVELOPE};
use crate::qp::{solve_qp, QpProblem, SparseRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    /// Communicated profiles only.
    Dhmpc,
    /// GP forecasts only.
    Dhsmpc,
    /// Fresh profile when a packet arrives, GP forecast otherwise.
    DhDhsmpc,
}

impl Policy {
    pub fn name(self) -> &'static str {
        match self {
            Policy::Dhmpc => "dhmpc",
            Policy::Dhsmpc => "dhsmpc",
            Policy::DhDhsmpc => "dh-dhsmpc",
        }
    }
}

impl std::str::FromStr for Policy {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "dhmpc" => Ok(Policy::Dhmpc),
            "dhsmpc" => Ok(Policy::Dhsmpc),
            "dh-dhsmpc" => Ok(Policy::DhDhsmpc),
            other => Err(format!("unknown policy `{other}` (expected dhmpc, dhsmpc or dh-dhsmpc)")),
        }
    }
}

/// Where the predecessor plan of one step came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    FreshComm,
    ShiftedComm,
    Gp,
    Acc,
}

impl Source {
    pub fn name(self) -> &'static str {
        match self {
            Source::FreshComm => "fresh-comm",
            Source::ShiftedComm => "shifted-comm",
            Source::Gp => "gp",
            Source::Acc => "acc",
        }
    }
}

/// Which data the follower conditions its GP forecast on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GpSource {
    /// The received model as broadcast (window and hyperparameters).
    Received,
    /// Received hyperparameters conditioned on the locally observed window.
    ReceivedHyper,
    /// Hyperparameters refit on the locally observed window.
    LocalRefit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    pub horizon: usize,
    pub weights: MpcWeights,
    /// Lower bound on the trajectory probability; `None` means `0.01^N`.
    pub chance_bound: Option<f64>,
    pub gap_envelope: f64,
    pub gp_source: GpSource,
    /// Steps without a packet after which DHMPC falls back to ACC; `None`
    /// means the horizon length.
    pub acc_after: Option<usize>,
    pub node_budget: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            horizon: 7,
            weights: MpcWeights::default(),
            chance_bound: None,
            gap_envelope: DEFAULT_GAP_ENVELOPE,
            gp_source: GpSource::ReceivedHyper,
            acc_after: None,
            node_budget: crate::miqp::DEFAULT_NODE_BUDGET,
        }
    }
}

impl ControllerConfig {
    pub fn chance_bound(&self) -> f64 {
        self.chance_bound.unwrap_or_else(|| 0.01f64.powi(self.horizon as i32))
    }

    pub fn acc_after(&self) -> usize {
        self.acc_after.unwrap_or(self.horizon)
    }
}

/// Time-shifted reuse of a profile received at `k0`, extended past its end
/// by linear extrapolation of its last two samples and clipped.
pub fn shifted_profile(profile: &[f64], k0: u64, k1: u64, horizon: usize, accel_min: f64, accel_max: f64) -> Vec<f64> {
    let len = profile.len();
    if len == 0 {
        return vec![0.0; horizon];
    }
    let last = profile[len - 1];
    let slope = if len >= 2 { last - profile[len - 2] } else { 0.0 };
    let shift = k1.saturating_sub(k0) as usize;
    (0..horizon)
        .map(|j| {
            let idx = shift + j;
            let v = if idx < len {
                profile[idx]
            } else {
                last + slope * (idx + 1 - len) as f64
            };
            v.clamp(accel_min, accel_max)
        })
        .collect()
}

/// Everything a follower knows about its predecessor.
#[derive(Debug, Clone)]
pub struct PredecessorStore {
    pub profile: Option<(Vec<f64>, u64)>,
    pub gp: Option<(GpPayload, u64)>,
    /// Ranged predecessor speeds, oldest first, one per step.
    pub observed: VecDeque<f64>,
}

impl PredecessorStore {
    pub fn new(initial_speed: f64) -> Self {
        Self {
            profile: None,
            gp: None,
            observed: std::iter::repeat_n(initial_speed, WINDOW_LEN).collect(),
        }
    }

    pub fn observe(&mut self, speed: f64) {
        self.observed.push_back(speed);
        while self.observed.len() > WINDOW_LEN {
            self.observed.pop_front();
        }
    }

    pub fn receive(&mut self, packet: &Packet, k: u64) {
        if let Some(p) = &packet.profile {
            if self.profile.as_ref().is_none_or(|(_, k0)| *k0 <= k) {
                self.profile = Some((p.clone(), k));
            }
        }
        if let Some(g) = packet.gp {
            if self.gp.as_ref().is_none_or(|(_, k0)| *k0 <= k) {
                self.gp = Some((g, k));
            }
        }
    }

    fn observed_window(&self, now: f64, ts: f64) -> Result<SpeedWindow> {
        let mut speeds = [0.0; WINDOW_LEN];
        for (s, v) in speeds.iter_mut().zip(&self.observed) {
            *s = *v;
        }
        SpeedWindow::ending_at(now, ts, speeds)
    }
}

/// Measurement available to a follower at the start of a step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub ego: KinematicState,
    /// Bumper-to-bumper gap (m).
    pub gap: f64,
    /// Predecessor speed minus ego speed (m/s).
    pub speed_error: f64,
}

/// Result of one planning step.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutcome {
    pub u: f64,
    pub source: Source,
    pub emergency: bool,
    pub objective: f64,
    pub nodes: usize,
    pub gap: f64,
    pub status: Option<MiqpStatus>,
    pub safety_event: bool,
}

#[derive(Debug, Clone)]
pub struct FollowerController {
    pub params: VehicleParams,
    pub system: DiscreteSystem,
    pub policy: Policy,
    pub cfg: ControllerConfig,
    pub store: PredecessorStore,
    pub u_prev: f64,
    pub emergency_prev: bool,
    /// Planned accelerations for the next `N` steps, from the last solve.
    pub planned_accel: Vec<f64>,
    ts: f64,
}

impl FollowerController {
    pub fn new(params: VehicleParams, system: DiscreteSystem, policy: Policy, cfg: ControllerConfig, initial: &KinematicState, pred_speed: f64) -> Self {
        let ts = system.ts;
        Self {
            params,
            system,
            policy,
            cfg,
            store: PredecessorStore::new(pred_speed),
            u_prev: initial.a,
            emergency_prev: false,
            planned_accel: vec![initial.a; cfg.horizon],
            ts,
        }
    }

    fn gp_model(&self, now: f64) -> Option<GpModel> {
        let ts = self.ts;
        match self.cfg.gp_source {
            GpSource::Received => {
                let (payload, _) = self.store.gp.as_ref()?;
                GpModel::from_payload(payload).ok()
            }
            GpSource::ReceivedHyper => {
                let (payload, _) = self.store.gp.as_ref()?;
                let window = self.store.observed_window(now, ts).ok()?;
                let hyper = gp::GpHyperParams::new(payload.signal_variance, payload.length_scale);
                GpModel::new(window, hyper).ok()
            }
            GpSource::LocalRefit => {
                let window = self.store.observed_window(now, ts).ok()?;
                gp::fit(&window).ok()
            }
        }
    }

    fn gp_plan(&self, now: f64) -> Option<PredecessorPlan> {
        let model = self.gp_model(now)?;
        let n = self.cfg.horizon;
        let fc = model.forecast(now, n + 1, self.ts, self.params.speed_max);
        let mut accel = implied_accel(&fc, self.ts, self.params.accel_min, self.params.accel_max);
        accel.truncate(n);
        let levels = (0..n).map(|j| discretize(fc.std[j + 1])).collect();
        Some(PredecessorPlan::gp(accel, levels))
    }

    /// Choose the predecessor plan for step `k`.
    pub fn select_plan(&self, k: u64) -> (PredecessorPlan, Source) {
        let n = self.cfg.horizon;
        let now = k as f64 * self.ts;
        let fresh = self.store.profile.as_ref().filter(|(_, k0)| *k0 == k);
        let (amin, amax) = (self.params.accel_min, self.params.accel_max);
        let acc = || (PredecessorPlan::acc_fallback(n), Source::Acc);
        match self.policy {
            Policy::Dhmpc => match &self.store.profile {
                Some((p, k0)) if *k0 == k => (PredecessorPlan::communicated(shifted_profile(p, k, k, n, amin, amax)), Source::FreshComm),
                Some((p, k0)) if (k - k0) as usize <= self.cfg.acc_after() => (
                    PredecessorPlan::communicated(shifted_profile(p, *k0, k, n, amin, amax)),
                    Source::ShiftedComm,
                ),
                _ => acc(),
            },
            Policy::Dhsmpc => self.gp_plan(now).map(|p| (p, Source::Gp)).unwrap_or_else(acc),
            Policy::DhDhsmpc => match fresh {
                Some((p, _)) => (PredecessorPlan::communicated(shifted_profile(p, k, k, n, amin, amax)), Source::FreshComm),
                None => self.gp_plan(now).map(|p| (p, Source::Gp)).unwrap_or_else(acc),
            },
        }
    }

    /// Plan and return the input for step `k`.
    pub fn plan(&mut self, k: u64, m: &Measurement) -> Result<PlanOutcome> {
        self.store.observe(m.ego.v + m.speed_error);
        let (plan, source) = self.select_plan(k);
        let p = &self.params;
        // A vehicle about to stop cannot keep decelerating; the plant floors
        // its acceleration, so the model does too.
        let accel = if m.ego.v + self.ts * m.ego.a < 0.0 {
            -m.ego.v / self.ts
        } else {
            m.ego.a
        };
        let x0 = ErrorState::new(
            m.gap - crate::dynamics::desired_gap(m.ego.v, p),
            m.speed_error,
            accel,
        );
        let program = build(&MldInputs {
            x0,
            ego_speed: m.ego.v,
            params: p,
            system: &self.system,
            plan: &plan,
            weights: self.cfg.weights,
            u_prev: self.u_prev,
            emergency_prev: self.emergency_prev,
            chance_bound: self.cfg.chance_bound(),
            gap_envelope: self.cfg.gap_envelope,
        })?;
        let opts = MiqpOptions {
            node_budget: self.cfg.node_budget,
            ..MiqpOptions::default()
        };
        let sol = solve_miqp(&program, &opts)?;
        let outcome = if sol.has_solution() {
            let u = sol.inputs(&program)[0].clamp(p.input_min, p.input_max);
            let emergency = sol.emergency(&program, 0);
            let states = sol.states(&program);
            self.planned_accel = states[1..].iter().map(|s| s[2]).collect();
            PlanOutcome {
                u,
                source,
                emergency,
                objective: sol.objective,
                nodes: sol.nodes,
                gap: sol.gap,
                status: Some(sol.status),
                safety_event: false,
            }
        } else {
            warn!("step {k}: follower program infeasible ({:?}), braking", sol.status);
            self.planned_accel = vec![p.input_min.max(p.accel_min); self.cfg.horizon];
            PlanOutcome {
                u: p.input_min,
                source,
                emergency: false,
                objective: f64::NAN,
                nodes: sol.nodes,
                gap: f64::NAN,
                status: Some(sol.status),
                safety_event: true,
            }
        };
        self.u_prev = outcome.u;
        // A fail-safe brake releases the comfort limits on the next step like
        // an emergency step would.
        self.emergency_prev = outcome.emergency || outcome.safety_event;
        Ok(outcome)
    }

    /// Profile to broadcast at step `k`: the accelerations planned at the
    /// previous step for steps `k..k+N`.
    pub fn broadcast_profile(&self) -> Vec<f64> {
        self.planned_accel.clone()
    }
}

/// Stage weights and preview length of the leader MPC.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LeaderConfig {
    pub horizon: usize,
    pub speed_weight: f64,
    pub accel_weight: f64,
    /// Whether the leader sees future reference values; otherwise the
    /// current reference is held over the horizon.
    pub preview: bool,
}

impl Default for LeaderConfig {
    fn default() -> Self {
        Self {
            horizon: 20,
            speed_weight: 1.0,
            accel_weight: 0.1,
            preview: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LeaderController {
    pub params: VehicleParams,
    pub cfg: LeaderConfig,
    pub u_prev: f64,
    pub planned_accel: Vec<f64>,
    ts: f64,
}

impl LeaderController {
    pub fn new(params: VehicleParams, cfg: LeaderConfig, ts: f64, initial: &KinematicState, profile_len: usize) -> Self {
        Self {
            params,
            cfg,
            u_prev: initial.a,
            planned_accel: vec![initial.a; profile_len],
            ts,
        }
    }

    /// Track `reference(t)` over the preview horizon; returns the input.
    pub fn plan(&mut self, now: f64, state: &KinematicState, reference: impl Fn(f64) -> f64) -> f64 {
        let refs: Vec<f64> = if self.cfg.preview {
            (1..=self.cfg.horizon).map(|j| reference(now + j as f64 * self.ts)).collect()
        } else {
            vec![reference(now); self.cfg.horizon]
        };
        let accel = if state.v + self.ts * state.a < 0.0 {
            -state.v / self.ts
        } else {
            state.a
        };
        let start = KinematicState { a: accel, ..*state };
        let solved = [true, false]
            .into_iter()
            .find_map(|strict| self.solve(&start, &refs, strict));
        let p = &self.params;
        let u = match solved {
            Some((u, accel_plan)) => {
                let n = self.planned_accel.len();
                self.planned_accel = accel_plan.into_iter().take(n).collect();
                u
            }
            None => {
                warn!("leader tracking problem infeasible at t = {now:.2}");
                (self.u_prev).clamp(p.input_min, p.input_max)
            }
        };
        self.u_prev = u;
        u
    }

    /// Variables per step j = 0..H: [a(j+1), v(j+1), u(j)].
    fn solve(&self, s: &KinematicState, refs: &[f64], strict: bool) -> Option<(f64, Vec<f64>)> {
        let h = refs.len();
        let p = &self.params;
        let ts = self.ts;
        let f = p.driveline;
        let nv = 3 * h;
        let (ia, iv, iu) = (|j: usize| 3 * j, |j: usize| 3 * j + 1, |j: usize| 3 * j + 2);
        let mut hess = DMatrix::zeros(nv, nv);
        let mut lin = DVector::zeros(nv);
        for j in 0..h {
            hess[(iv(j), iv(j))] = 2.0 * self.cfg.speed_weight;
            hess[(ia(j), ia(j))] = 2.0 * self.cfg.accel_weight;
            hess[(iu(j), iu(j))] = 2e-4;
            lin[iv(j)] = -2.0 * self.cfg.speed_weight * refs[j];
        }
        let mut qp = QpProblem::new(hess, lin);
        for j in 0..h {
            // a(j+1) = (1 - ts f) a(j) + ts f u(j); v(j+1) = v(j) + ts a(j)
            let mut ra = vec![(ia(j), 1.0), (iu(j), -ts * f)];
            let mut rv = vec![(iv(j), 1.0)];
            let (mut ba, mut bv) = (0.0, 0.0);
            if j == 0 {
                ba = (1.0 - ts * f) * s.a;
                bv = s.v + ts * s.a;
            } else {
                if 1.0 - ts * f != 0.0 {
                    ra.push((ia(j - 1), -(1.0 - ts * f)));
                }
                rv.push((iv(j - 1), -1.0));
                rv.push((ia(j - 1), -ts));
            }
            qp.equalities.push(SparseRow::new(ra), ba);
            qp.equalities.push(SparseRow::new(rv), bv);
            qp.lower[ia(j)] = p.accel_min;
            qp.upper[ia(j)] = p.accel_max;
            qp.lower[iu(j)] = p.input_min;
            qp.upper[iu(j)] = p.input_max;
            qp.upper[iv(j)] = p.speed_max;
            if strict {
                qp.lower[iv(j)] = 0.0;
                // Comfort rate limits.
                let (lo, hi) = (ts * p.input_min, ts * p.input_max);
                if j == 0 {
                    qp.inequalities.push(SparseRow::new(vec![(iu(0), 1.0)]), hi + self.u_prev);
                    qp.inequalities.push(SparseRow::new(vec![(iu(0), -1.0)]), -lo - self.u_prev);
                } else {
                    qp.inequalities.push(SparseRow::new(vec![(iu(j), 1.0), (iu(j - 1), -1.0)]), hi);
                    qp.inequalities.push(SparseRow::new(vec![(iu(j), -1.0), (iu(j - 1), 1.0)]), -lo);
                }
            }
        }
        let sol = solve_qp(&qp).ok()?;
        if !sol.is_optimal() {
            return None;
        }
        let accel = (0..h).map(|j| sol.x[ia(j)]).collect();
        Some((sol.x[iu(0)].clamp(p.input_min, p.input_max), accel))
    }
}

/// Constant-speed-predecessor plan of a follower, for callers that want the
/// ACC fallback directly.
pub fn acc_fallback_plan(ctrl: &mut FollowerController, k: u64, m: &Measurement) -> Result<PlanOutcome> {
    let saved = ctrl.policy;
    let saved_store = ctrl.store.clone();
    ctrl.policy = Policy::Dhmpc;
    ctrl.store.profile = None;
    let out = ctrl.plan(k, m);
    ctrl.policy = saved;
    let observed = ctrl.store.observed.clone();
    ctrl.store = saved_store;
    ctrl.store.observed = observed;
    out
}
