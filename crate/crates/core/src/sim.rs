//! Scenario configuration, the synchronous simulation loop, metrics and
//! trace files.
//!
//! Each step: sense gaps, broadcast and deliver packets on the schedule, plan
//! every vehicle from the same step-start snapshot, then advance all plants.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::comms::{Channel, ChannelConfig, Packet};
use crate::controller::{
    ControllerConfig, FollowerController, LeaderConfig, LeaderController, Measurement, Policy,
};
use crate::dynamics::{desired_gap, discrete_system, gap, step_plant, KinematicState, VehicleParams};
use crate::error::{Error, Result};
use crate::gp::{self, SpeedWindow, WINDOW_LEN};
use crate::miqp::MiqpStatus;

/// Piecewise-constant leader speed reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeaderReference {
    /// Switching times (s), increasing.
    pub times: Vec<f64>,
    /// One more speed than switching times (m/s).
    pub speeds: Vec<f64>,
}

impl Default for LeaderReference {
    fn default() -> Self {
        Self {
            times: vec![15.0, 30.0],
            speeds: vec![27.0, 0.0, 25.0],
        }
    }
}

impl LeaderReference {
    pub fn speed_at(&self, t: f64) -> f64 {
        let idx = self.times.iter().take_while(|&&s| s <= t).count();
        self.speeds[idx]
    }

    pub fn validate(&self) -> Result<()> {
        if self.speeds.len() != self.times.len() + 1 {
            return Err(Error::Config("reference needs exactly one more speed than switching times".into()));
        }
        if self.times.windows(2).any(|w| w[1] <= w[0]) || self.times.iter().any(|t| !t.is_finite()) {
            return Err(Error::Config("reference switching times must increase".into()));
        }
        if self.speeds.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("reference speeds must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub vehicles: usize,
    pub policy: Policy,
    pub ts: f64,
    pub duration: f64,
    pub seed: u64,
    pub halt_on_collision: bool,
    /// Common initial speed; vehicles start at their desired gaps.
    pub initial_speed: f64,
    /// Parameters shared by every vehicle unless `per_vehicle` is given.
    pub vehicle: VehicleParams,
    /// Optional per-vehicle parameters, leader first.
    pub per_vehicle: Vec<VehicleParams>,
    /// Channel settings; the run seed drives the loss process.
    pub channel: ChannelConfig,
    pub reference: LeaderReference,
    pub controller: ControllerConfig,
    pub leader: LeaderConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            vehicles: 10,
            policy: Policy::Dhsmpc,
            ts: 0.1,
            duration: 60.0,
            seed: 0,
            halt_on_collision: false,
            initial_speed: 27.0,
            vehicle: VehicleParams::default(),
            per_vehicle: Vec::new(),
            channel: ChannelConfig::default(),
            reference: LeaderReference::default(),
            controller: ControllerConfig::default(),
            leader: LeaderConfig::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario config serializes")
    }

    pub fn params(&self, i: usize) -> &VehicleParams {
        self.per_vehicle.get(i).unwrap_or(&self.vehicle)
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.ts).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.vehicles < 2 {
            return Err(Error::Config("need a leader and at least one follower".into()));
        }
        if !(self.ts > 0.0 && self.ts.is_finite()) {
            return Err(Error::Config(format!("sample time must be positive, got {}", self.ts)));
        }
        let ratio = self.duration / self.ts;
        if !(self.duration >= 0.0) || (ratio - ratio.round()).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "duration {} is not a multiple of the sample time {}",
                self.duration, self.ts
            )));
        }
        if !self.per_vehicle.is_empty() && self.per_vehicle.len() != self.vehicles {
            return Err(Error::Config(format!(
                "per_vehicle lists {} vehicles, expected {}",
                self.per_vehicle.len(),
                self.vehicles
            )));
        }
        for i in 0..self.vehicles {
            self.params(i).validate()?;
            discrete_system(self.params(i), self.ts)?;
        }
        if self.controller.horizon == 0 || self.leader.horizon == 0 {
            return Err(Error::Config("horizons must be at least 1".into()));
        }
        if self.leader.horizon < self.controller.horizon {
            return Err(Error::Config("leader preview must cover the follower horizon".into()));
        }
        if !(self.initial_speed >= 0.0 && self.initial_speed <= self.vehicle.speed_max) {
            return Err(Error::Config("initial speed outside [0, v_max]".into()));
        }
        self.channel.validate(self.ts)?;
        self.reference.validate()
    }
}

/// One row of `trace.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub step: usize,
    pub time: f64,
    pub vehicle: usize,
    pub x: f64,
    pub v: f64,
    pub a: f64,
    pub u: f64,
    /// Gap to the predecessor; `None` for the leader.
    pub gap: Option<f64>,
    pub gap_error: Option<f64>,
    pub source: &'static str,
    pub emergency: bool,
    pub safety_event: bool,
    pub nodes: usize,
}

/// One row of `diagnostics.csv`; includes wall-clock solve time.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticRecord {
    pub step: usize,
    pub vehicle: usize,
    pub source: &'static str,
    pub emergency: bool,
    pub objective: f64,
    pub nodes: usize,
    pub status: &'static str,
    pub solve_micros: u128,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Metrics {
    pub collision: bool,
    pub collision_time: Option<f64>,
    pub collision_vehicle: Option<usize>,
    pub min_gap: f64,
    /// Rising edges of the applied emergency flag, all followers.
    pub emergency_activations: usize,
    /// Total time spent in emergency mode, all followers (s).
    pub emergency_duration: f64,
    pub safety_events: usize,
    pub budget_warnings: usize,
    /// Per follower (index 0 is vehicle 1).
    pub rms_gap_error: Vec<f64>,
    /// One entry per constant-reference phase, the initial one included.
    pub phases: Vec<PhaseMetrics>,
}

/// Summary of one constant-reference phase, worst case over followers.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseMetrics {
    pub start: f64,
    pub reference: f64,
    /// Time after `start` from which every follower stays within 0.1 m/s of
    /// the leader until the phase ends; `None` if some follower never does.
    pub settling_time: Option<f64>,
    pub steady_time: f64,
    /// Largest `|Δd|` at `steady_time`.
    pub steady_gap_error: f64,
    pub peak_gap_error: f64,
    /// Largest excursion of a follower speed past the new reference in the
    /// direction of the step; zero for the initial phase.
    pub speed_overshoot: f64,
    /// Largest excursion of a spacing error past zero in the direction of
    /// the step (a larger gap after speeding up, a smaller one after slowing).
    pub gap_overshoot: f64,
    pub emergency_activations: usize,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub trace: Vec<TraceRecord>,
    pub diagnostics: Vec<DiagnosticRecord>,
    pub metrics: Metrics,
}

fn status_name(s: Option<MiqpStatus>) -> &'static str {
    match s {
        None => "none",
        Some(MiqpStatus::Optimal) => "optimal",
        Some(MiqpStatus::BudgetExhausted) => "budget",
        Some(MiqpStatus::Infeasible) => "infeasible",
        Some(MiqpStatus::BudgetInfeasible) => "budget-infeasible",
    }
}

fn push_history(h: &mut VecDeque<f64>, v: f64) {
    h.push_back(v);
    while h.len() > WINDOW_LEN {
        h.pop_front();
    }
}

/// Run one scenario to completion (or first collision when halting).
pub fn run(cfg: &ScenarioConfig) -> Result<RunResult> {
    cfg.validate()?;
    let n = cfg.vehicles;
    let ts = cfg.ts;
    let horizon = cfg.controller.horizon;
    let period = cfg.channel.period_steps(ts)?;
    let mut channel = Channel::new(&ChannelConfig {
        seed: cfg.seed,
        ..cfg.channel
    });
    let uses_gp = cfg.policy != Policy::Dhmpc;

    let mut states = Vec::with_capacity(n);
    let mut x = 0.0;
    for i in 0..n {
        if i > 0 {
            x -= cfg.params(i - 1).length + desired_gap(cfg.initial_speed, cfg.params(i));
        }
        states.push(KinematicState::new(x, cfg.initial_speed, 0.0));
    }
    let mut histories: Vec<VecDeque<f64>> = (0..n)
        .map(|_| std::iter::repeat_n(cfg.initial_speed, WINDOW_LEN - 1).collect())
        .collect();
    let mut leader = LeaderController::new(*cfg.params(0), cfg.leader, ts, &states[0], horizon);
    let mut followers: Vec<FollowerController> = (1..n)
        .map(|i| {
            let p = *cfg.params(i);
            let sys = discrete_system(&p, ts)?;
            Ok(FollowerController::new(p, sys, cfg.policy, cfg.controller, &states[i], cfg.initial_speed))
        })
        .collect::<Result<_>>()?;

    let mut trace = Vec::with_capacity(cfg.steps() * n);
    let mut diagnostics = Vec::with_capacity(cfg.steps() * (n - 1));
    let mut budget_warnings = 0;

    'outer: for k in 0..cfg.steps() {
        let t = k as f64 * ts;
        for (h, s) in histories.iter_mut().zip(&states) {
            push_history(h, s.v);
        }

        if k as u64 % period == 0 {
            let delivered = channel.deliver_all(n - 1);
            for (link, ok) in delivered.into_iter().enumerate() {
                if !ok {
                    continue;
                }
                let profile = if link == 0 {
                    leader.planned_accel.clone()
                } else {
                    followers[link - 1].broadcast_profile()
                };
                let gp_payload = if uses_gp {
                    let speeds: [f64; WINDOW_LEN] = std::array::from_fn(|j| histories[link][j]);
                    let window = SpeedWindow::ending_at(t, ts, speeds)?;
                    Some(gp::fit(&window)?.payload())
                } else {
                    None
                };
                let packet = Packet {
                    sender: link as u16,
                    step: k as u32,
                    profile: Some(profile),
                    gp: gp_payload,
                };
                followers[link].store.receive(&packet, k as u64);
            }
        }

        let snapshot = states.clone();
        let mut inputs = vec![0.0; n];
        inputs[0] = leader.plan(t, &snapshot[0], |s| cfg.reference.speed_at(s));
        trace.push(TraceRecord {
            step: k,
            time: t,
            vehicle: 0,
            x: snapshot[0].x,
            v: snapshot[0].v,
            a: snapshot[0].a,
            u: inputs[0],
            gap: None,
            gap_error: None,
            source: "leader",
            emergency: false,
            safety_event: false,
            nodes: 0,
        });
        let mut collided = false;
        for i in 1..n {
            let p = cfg.params(i);
            let d = gap(&snapshot[i], &snapshot[i - 1], cfg.params(i - 1).length);
            let meas = Measurement {
                ego: snapshot[i],
                gap: d,
                speed_error: snapshot[i - 1].v - snapshot[i].v,
            };
            let started = Instant::now();
            let out = followers[i - 1].plan(k as u64, &meas)?;
            let elapsed = started.elapsed().as_micros();
            if out.status == Some(MiqpStatus::BudgetExhausted) {
                budget_warnings += 1;
            }
            inputs[i] = out.u;
            collided |= d <= 0.0;
            trace.push(TraceRecord {
                step: k,
                time: t,
                vehicle: i,
                x: snapshot[i].x,
                v: snapshot[i].v,
                a: snapshot[i].a,
                u: out.u,
                gap: Some(d),
                gap_error: Some(d - desired_gap(snapshot[i].v, p)),
                source: out.source.name(),
                emergency: out.emergency,
                safety_event: out.safety_event,
                nodes: out.nodes,
            });
            diagnostics.push(DiagnosticRecord {
                step: k,
                vehicle: i,
                source: out.source.name(),
                emergency: out.emergency,
                objective: out.objective,
                nodes: out.nodes,
                status: status_name(out.status),
                solve_micros: elapsed,
            });
        }
        if collided && cfg.halt_on_collision {
            break 'outer;
        }
        for i in 0..n {
            states[i] = step_plant(&snapshot[i], inputs[i], cfg.params(i), ts);
        }
    }

    let preview = if cfg.leader.preview { cfg.leader.horizon as f64 * ts } else { 0.0 };
    let mut metrics = compute_metrics(&trace, &cfg.reference, ts, preview);
    metrics.budget_warnings = budget_warnings;
    Ok(RunResult {
        trace,
        diagnostics,
        metrics,
    })
}

/// Summaries derived purely from a trace.
///
/// `preview` is how far ahead (s) the leader sees its reference; steady-state
/// gaps are sampled before that window reaches the next switch.
pub fn compute_metrics(trace: &[TraceRecord], reference: &LeaderReference, ts: f64, preview: f64) -> Metrics {
    let mut m = Metrics {
        min_gap: f64::INFINITY,
        ..Metrics::default()
    };
    let vehicles = trace.iter().map(|r| r.vehicle + 1).max().unwrap_or(0);
    let followers = vehicles.saturating_sub(1);
    let mut sq = vec![0.0; followers];
    let mut count = vec![0usize; followers];
    let mut in_emergency = vec![false; followers];
    for r in trace {
        let Some(g) = r.gap else { continue };
        let f = r.vehicle - 1;
        m.min_gap = m.min_gap.min(g);
        if g <= 0.0 && !m.collision {
            m.collision = true;
            m.collision_time = Some(r.time);
            m.collision_vehicle = Some(r.vehicle);
        }
        if let Some(e) = r.gap_error {
            sq[f] += e * e;
            count[f] += 1;
        }
        if r.emergency {
            if !in_emergency[f] {
                m.emergency_activations += 1;
            }
            m.emergency_duration += ts;
        }
        in_emergency[f] = r.emergency;
        m.safety_events += r.safety_event as usize;
    }
    m.rms_gap_error = sq
        .iter()
        .zip(&count)
        .map(|(s, &c)| if c == 0 { 0.0 } else { (s / c as f64).sqrt() })
        .collect();

    // Per-step views for the phase summaries.
    let steps = trace.iter().map(|r| r.step + 1).max().unwrap_or(0);
    let mut rows = vec![vec![(f64::NAN, f64::NAN, false); vehicles]; steps];
    for r in trace {
        rows[r.step][r.vehicle] = (r.v, r.gap_error.unwrap_or(f64::NAN), r.emergency);
    }
    let step_of = |t: f64| ((t / ts).round() as usize).min(steps);
    let mut starts = vec![0.0];
    starts.extend(&reference.times);
    for (w, &start) in starts.iter().enumerate() {
        let s0 = step_of(start);
        let s1 = starts.get(w + 1).map_or(steps, |&t| step_of(t));
        if s0 >= s1 {
            continue;
        }
        let target = reference.speeds[w];
        let direction = if w == 0 { 0.0 } else { (target - reference.speeds[w - 1]).signum() };
        let mut ph = PhaseMetrics {
            start,
            reference: target,
            settling_time: Some(0.0),
            steady_time: 0.0,
            steady_gap_error: 0.0,
            peak_gap_error: 0.0,
            speed_overshoot: 0.0,
            gap_overshoot: 0.0,
            emergency_activations: 0,
        };
        for v in 1..vehicles {
            // Last step in the window that is still outside the band.
            let last_bad = (s0..s1).rev().find(|&s| (rows[s][v].0 - rows[s][0].0).abs() >= 0.1);
            let settle = match last_bad {
                None => Some(0.0),
                Some(s) if s + 1 < s1 => Some((s + 1 - s0) as f64 * ts),
                Some(_) => None,
            };
            ph.settling_time = ph.settling_time.zip(settle).map(|(a, b)| a.max(b));
            for s in s0..s1 {
                let (speed, err, emergency) = rows[s][v];
                ph.peak_gap_error = ph.peak_gap_error.max(err.abs());
                ph.speed_overshoot = ph.speed_overshoot.max(direction * (speed - target));
                if err.is_finite() {
                    ph.gap_overshoot = ph.gap_overshoot.max(direction * err);
                }
                if emergency && (s == 0 || !rows[s - 1][v].2) {
                    ph.emergency_activations += 1;
                }
            }
        }
        // Steady state is sampled before the leader's preview reaches the
        // next switch.
        let last = if w + 1 < starts.len() {
            s1.saturating_sub(step_of(preview) + 1).max(s0)
        } else {
            s1 - 1
        };
        ph.steady_time = last as f64 * ts;
        ph.steady_gap_error = rows[last][1..].iter().fold(0.0f64, |a, r| a.max(r.1.abs()));
        m.phases.push(ph);
    }
    m
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), |x| format!("{x:.3}"))
}

impl Metrics {
    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "collision = {}", self.collision);
        let _ = writeln!(out, "collision_time = {}", opt(self.collision_time));
        let _ = writeln!(
            out,
            "collision_vehicle = {}",
            self.collision_vehicle.map_or("none".to_string(), |v| v.to_string())
        );
        let _ = writeln!(out, "min_gap = {:.6}", self.min_gap);
        let _ = writeln!(out, "emergency_activations = {}", self.emergency_activations);
        let _ = writeln!(out, "emergency_duration = {:.3}", self.emergency_duration);
        let _ = writeln!(out, "safety_events = {}", self.safety_events);
        let _ = writeln!(out, "budget_warnings = {}", self.budget_warnings);
        for (i, r) in self.rms_gap_error.iter().enumerate() {
            let _ = writeln!(out, "rms_gap_error.{} = {r:.6}", i + 1);
        }
        for p in &self.phases {
            let key = format!("phase.{:.1}", p.start);
            let _ = writeln!(out, "{key}.reference = {:.3}", p.reference);
            let _ = writeln!(out, "{key}.settling_time = {}", opt(p.settling_time));
            let _ = writeln!(out, "{key}.steady_time = {:.1}", p.steady_time);
            let _ = writeln!(out, "{key}.steady_gap_error = {:.6}", p.steady_gap_error);
            let _ = writeln!(out, "{key}.peak_gap_error = {:.6}", p.peak_gap_error);
            let _ = writeln!(out, "{key}.speed_overshoot = {:.6}", p.speed_overshoot);
            let _ = writeln!(out, "{key}.gap_overshoot = {:.6}", p.gap_overshoot);
            let _ = writeln!(out, "{key}.emergency_activations = {}", p.emergency_activations);
        }
        out
    }
}

pub const TRACE_HEADER: &str = "step,time,vehicle,x,v,a,u,gap,gap_error,source,emergency,safety,nodes";

pub fn trace_csv(trace: &[TraceRecord]) -> String {
    let mut out = String::with_capacity(trace.len() * 96);
    out.push_str(TRACE_HEADER);
    out.push('\n');
    let f = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
    for r in trace {
        let _ = writeln!(
            out,
            "{},{:.2},{},{:.6},{:.6},{:.6},{:.6},{},{},{},{},{},{}",
            r.step,
            r.time,
            r.vehicle,
            r.x,
            r.v,
            r.a,
            r.u,
            f(r.gap),
            f(r.gap_error),
            r.source,
            r.emergency as u8,
            r.safety_event as u8,
            r.nodes
        );
    }
    out
}

pub fn diagnostics_csv(diag: &[DiagnosticRecord]) -> String {
    let mut out = String::from("step,vehicle,source,emergency,objective,nodes,status,solve_us\n");
    for d in diag {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.6},{},{},{}",
            d.step, d.vehicle, d.source, d.emergency as u8, d.objective, d.nodes, d.status, d.solve_micros
        );
    }
    out
}

/// Write `trace.csv`, `diagnostics.csv` and `metrics.txt` into `dir`.
pub fn write_outputs(dir: &Path, result: &RunResult) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("trace.csv"), trace_csv(&result.trace))?;
    fs::write(dir.join("diagnostics.csv"), diagnostics_csv(&result.diagnostics))?;
    fs::write(dir.join("metrics.txt"), result.metrics.to_text())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_examples() {
        let r = LeaderReference::default();
        assert_eq!(r.speed_at(10.0), 27.0);
        assert_eq!(r.speed_at(20.0), 0.0);
        assert_eq!(r.speed_at(40.0), 25.0);
        assert_eq!(r.speed_at(15.0), 0.0);
    }

    #[test]
    fn config_round_trip_and_validation() {
        let cfg = ScenarioConfig::default();
        let back = ScenarioConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
        assert!(ScenarioConfig::from_toml_str("vehicles = 1").is_err());
        assert!(ScenarioConfig::from_toml_str("duration = 1.05").is_err());
        assert!(ScenarioConfig::from_toml_str("no_such_field = 3").is_err());
        let cfg = ScenarioConfig::from_toml_str("vehicles = 3\npolicy = \"dh-dhsmpc\"\n[channel]\nperiod = 1.0\n").unwrap();
        assert_eq!(cfg.policy, Policy::DhDhsmpc);
        assert!(ScenarioConfig::from_toml_str("[channel]\nperiod = 0.15\n").is_err());
    }

    fn record(step: usize, vehicle: usize, v: f64, gap: Option<f64>, err: Option<f64>, emergency: bool) -> TraceRecord {
        TraceRecord {
            step,
            time: step as f64 * 0.1,
            vehicle,
            x: 0.0,
            v,
            a: 0.0,
            u: 0.0,
            gap,
            gap_error: err,
            source: "x",
            emergency,
            safety_event: false,
            nodes: 0,
        }
    }

    #[test]
    fn metrics_hand_computed() {
        let reference = LeaderReference {
            times: vec![],
            speeds: vec![10.0],
        };
        let trace = vec![
            record(0, 0, 10.0, None, None, false),
            record(0, 1, 10.0, Some(12.0), Some(1.0), false),
            record(1, 0, 10.0, None, None, false),
            record(1, 1, 10.0, Some(11.0), Some(-2.0), true),
            record(2, 0, 10.0, None, None, false),
            record(2, 1, 10.0, Some(-0.5), Some(2.0), true),
        ];
        let m = compute_metrics(&trace, &reference, 0.1, 0.0);
        assert!((m.rms_gap_error[0] - 3.0f64.sqrt()).abs() < 1e-12);
        assert!(m.collision);
        assert_eq!(m.collision_time, Some(0.2));
        assert_eq!(m.min_gap, -0.5);
        assert_eq!(m.emergency_activations, 1);
        assert!((m.emergency_duration - 0.2).abs() < 1e-12);
    }

    #[test]
    fn phase_overshoot_hand_computed() {
        let reference = LeaderReference {
            times: vec![0.2],
            speeds: vec![10.0, 12.0],
        };
        let mut trace = Vec::new();
        for (step, v, err) in [(0, 10.0, 0.0), (1, 10.0, 0.1), (2, 12.5, 0.4), (3, 11.0, -0.3)] {
            trace.push(record(step, 0, 12.0, None, None, false));
            trace.push(record(step, 1, v, Some(10.0), Some(err), false));
        }
        let m = compute_metrics(&trace, &reference, 0.1, 0.0);
        assert_eq!(m.phases.len(), 2);
        assert_eq!(m.phases[0].speed_overshoot, 0.0);
        assert_eq!(m.phases[0].gap_overshoot, 0.0);
        assert!((m.phases[1].speed_overshoot - 0.5).abs() < 1e-12);
        assert!((m.phases[1].gap_overshoot - 0.4).abs() < 1e-12);
        assert!((m.phases[1].peak_gap_error - 0.4).abs() < 1e-12);
    }

    #[test]
    fn two_vehicle_equilibrium() {
        let cfg = ScenarioConfig {
            vehicles: 2,
            duration: 3.0,
            policy: Policy::Dhmpc,
            reference: LeaderReference {
                times: vec![],
                speeds: vec![27.0],
            },
            ..ScenarioConfig::default()
        };
        let res = run(&cfg).unwrap();
        let d0 = desired_gap(27.0, &cfg.vehicle);
        for r in res.trace.iter().filter(|r| r.vehicle == 1) {
            assert!((r.gap.unwrap() - d0).abs() < 1e-6, "{r:?}");
        }
        assert_eq!(res.metrics.emergency_activations, 0);
        assert!(!res.metrics.collision);
    }
}
