//! Feasibility iteration and state-time option kernels.
//!
//! [`feasibility_iteration`] solves a task MDP's four coupled Bellman
//! equations: the cumulative feasibility function `kappa` (probability of
//! completing the goal without a constraint violation), the policy that
//! maximizes `kappa` and then minimizes expected success time, and the two
//! state-time event functions `eta+` / `eta-` that record where and when
//! goal-success and failure events occur under that policy. Together the
//! event functions form a state-time option kernel ([`Stok`]), a
//! row-stochastic map from initiation states to terminal `(state, time,
//! event)` triples.
//!
//! Three termination events are tracked: goal success (probability
//! `f_1 = f_g * f_c` at the occupied state-action), constraint violation
//! (probability `1 - f_c`), and entry into a state with zero feasibility,
//! which terminates immediately. Because of the third event every state of
//! the controlled chain is transient, so the STOK sums to one.
//!
//! [`absorbing_chain_stok`] reconstructs the same kernel from the block
//! power form of the policy's absorbing Markov chain and serves as an
//! independent oracle for the Bellman recursions, and [`trajectory_stef`]
//! evaluates the closed product form along a single trajectory.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::tmdp::{ConstraintFunction, GoalFunction, Tmdp};
use crate::{Error, Result, TIE_TOL};

/// Hard cap on the summed horizon of composed kernels.
pub const HORIZON_CAP: usize = 1_000_000;

/// Cumulative feasibility function: per-state probability of completing
/// the goal without violating a constraint under the optimal policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cff {
    pub values: Vec<f64>,
}

impl Cff {
    pub fn value(&self, x: usize) -> f64 {
        self.values[x]
    }

    pub fn feasible(&self, x: usize) -> bool {
        self.values[x] > 0.0
    }
}

/// A state-time option kernel: per initiation state, the distribution over
/// `(final state, final time)` split into success and failure events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stok {
    pub num_states: usize,
    /// Exclusive upper bound on stored time indices.
    pub horizon: usize,
    success: Vec<BTreeMap<(usize, usize), f64>>,
    failure: Vec<BTreeMap<(usize, usize), f64>>,
}

impl Stok {
    pub fn empty(num_states: usize, horizon: usize) -> Self {
        Self {
            num_states,
            horizon,
            success: vec![BTreeMap::new(); num_states],
            failure: vec![BTreeMap::new(); num_states],
        }
    }

    /// The STOK of an option that succeeds immediately in place: a unit
    /// success atom at `(x, 0)` for every start. Identity element of
    /// composition.
    pub fn immediate_success(num_states: usize) -> Self {
        let mut s = Self::empty(num_states, 1);
        for x in 0..num_states {
            s.add_success(x, x, 0, 1.0);
        }
        s
    }

    pub fn add_success(&mut self, start: usize, xf: usize, tf: usize, p: f64) {
        if p != 0.0 {
            *self.success[start].entry((xf, tf)).or_insert(0.0) += p;
            self.horizon = self.horizon.max(tf + 1);
        }
    }

    pub fn add_failure(&mut self, start: usize, xf: usize, tf: usize, p: f64) {
        if p != 0.0 {
            *self.failure[start].entry((xf, tf)).or_insert(0.0) += p;
            self.horizon = self.horizon.max(tf + 1);
        }
    }

    /// Success atoms `((x_f, t_f), p)` from `start`.
    pub fn success_atoms(&self, start: usize) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.success[start].iter().map(|(&(x, t), &p)| (x, t, p))
    }

    pub fn failure_atoms(&self, start: usize) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.failure[start].iter().map(|(&(x, t), &p)| (x, t, p))
    }

    pub fn success_value(&self, start: usize, xf: usize, tf: usize) -> f64 {
        self.success[start].get(&(xf, tf)).copied().unwrap_or(0.0)
    }

    pub fn failure_value(&self, start: usize, xf: usize, tf: usize) -> f64 {
        self.failure[start].get(&(xf, tf)).copied().unwrap_or(0.0)
    }

    /// Total success mass from `start` (equals `kappa` there).
    pub fn success_mass(&self, start: usize) -> f64 {
        self.success[start].values().sum()
    }

    pub fn failure_mass(&self, start: usize) -> f64 {
        self.failure[start].values().sum()
    }

    pub fn total_mass(&self, start: usize) -> f64 {
        self.success_mass(start) + self.failure_mass(start)
    }

    /// Cumulative event function `kappa(start, t)`: probability that some
    /// event (success or failure) has occurred by time `t`. Index `t` runs
    /// over `0..horizon`; the result is nondecreasing.
    pub fn cumulative_events(&self, start: usize) -> Vec<f64> {
        let mut by_t = vec![0.0; self.horizon];
        for (&(_, t), &p) in self.success[start].iter().chain(self.failure[start].iter()) {
            by_t[t] += p;
        }
        let mut acc = 0.0;
        by_t.iter_mut().for_each(|v| {
            acc += *v;
            *v = acc;
        });
        by_t
    }

    /// Success-only cumulative function.
    pub fn cumulative_success(&self, start: usize) -> Vec<f64> {
        let mut by_t = vec![0.0; self.horizon];
        for (&(_, t), &p) in self.success[start].iter() {
            by_t[t] += p;
        }
        let mut acc = 0.0;
        by_t.iter_mut().for_each(|v| {
            acc += *v;
            *v = acc;
        });
        by_t
    }

    /// Largest deviation of any start's total mass from one.
    pub fn mass_residual(&self) -> f64 {
        (0..self.num_states)
            .map(|s| (self.total_mass(s) - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Maximum absolute entrywise difference against another STOK.
    pub fn max_abs_diff(&self, other: &Stok) -> f64 {
        let mut d: f64 = 0.0;
        for s in 0..self.num_states {
            for (k, &p) in &self.success[s] {
                d = d.max((p - other.success[s].get(k).copied().unwrap_or(0.0)).abs());
            }
            for (k, &p) in &other.success[s] {
                d = d.max((p - self.success[s].get(k).copied().unwrap_or(0.0)).abs());
            }
            for (k, &p) in &self.failure[s] {
                d = d.max((p - other.failure[s].get(k).copied().unwrap_or(0.0)).abs());
            }
            for (k, &p) in &other.failure[s] {
                d = d.max((p - self.failure[s].get(k).copied().unwrap_or(0.0)).abs());
            }
        }
        d
    }
}

/// State option kernel: a STOK with time marginalized out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sok {
    pub num_states: usize,
    success: Vec<BTreeMap<usize, f64>>,
    failure: Vec<BTreeMap<usize, f64>>,
}

impl Sok {
    pub fn empty(num_states: usize) -> Self {
        Self {
            num_states,
            success: vec![BTreeMap::new(); num_states],
            failure: vec![BTreeMap::new(); num_states],
        }
    }

    pub fn identity(num_states: usize) -> Self {
        let mut s = Self::empty(num_states);
        for x in 0..num_states {
            s.success[x].insert(x, 1.0);
        }
        s
    }

    pub fn success_row(&self, start: usize) -> &BTreeMap<usize, f64> {
        &self.success[start]
    }

    pub fn failure_row(&self, start: usize) -> &BTreeMap<usize, f64> {
        &self.failure[start]
    }

    pub fn total_mass(&self, start: usize) -> f64 {
        self.success[start].values().sum::<f64>() + self.failure[start].values().sum::<f64>()
    }
}

/// Marginalizes time out of a STOK.
pub fn stok_to_sok(s: &Stok) -> Sok {
    let mut out = Sok::empty(s.num_states);
    for i in 0..s.num_states {
        for (xf, _t, p) in s.success_atoms(i) {
            *out.success[i].entry(xf).or_insert(0.0) += p;
        }
        for (xf, _t, p) in s.failure_atoms(i) {
            *out.failure[i].entry(xf).or_insert(0.0) += p;
        }
    }
    out
}

/// Chapman-Kolmogorov composition of two STOKs.
///
/// Success mass of the first option initiates the second at the first
/// option's terminal state with a time shift; failure mass of the first
/// stage passes through untouched since a failed option never hands
/// control to the next one.
pub fn compose_stoks(first: &Stok, second: &Stok) -> Result<Stok> {
    if first.num_states != second.num_states {
        return Err(Error::DimensionMismatch(format!(
            "composing STOKs over {} and {} states",
            first.num_states, second.num_states
        )));
    }
    let horizon = first.horizon + second.horizon;
    if horizon > HORIZON_CAP {
        return Err(Error::CapExceeded {
            required: horizon as u128,
            cap: HORIZON_CAP as u128,
        });
    }
    let mut out = Stok::empty(first.num_states, 1);
    for start in 0..first.num_states {
        for (x1, t1, p1) in first.success_atoms(start) {
            for (xf, t2, p2) in second.success_atoms(x1) {
                out.add_success(start, xf, t1 + t2, p1 * p2);
            }
            for (xf, t2, p2) in second.failure_atoms(x1) {
                out.add_failure(start, xf, t1 + t2, p1 * p2);
            }
        }
        for (xf, tf, p) in first.failure_atoms(start) {
            out.add_failure(start, xf, tf, p);
        }
    }
    Ok(out)
}

/// Matrix-product composition of two SOKs, same event semantics as
/// [`compose_stoks`].
pub fn compose_soks(first: &Sok, second: &Sok) -> Result<Sok> {
    if first.num_states != second.num_states {
        return Err(Error::DimensionMismatch(format!(
            "composing SOKs over {} and {} states",
            first.num_states, second.num_states
        )));
    }
    let mut out = Sok::empty(first.num_states);
    for start in 0..first.num_states {
        for (&x1, &p1) in first.success_row(start) {
            for (&xf, &p2) in second.success_row(x1) {
                *out.success[start].entry(xf).or_insert(0.0) += p1 * p2;
            }
            for (&xf, &p2) in second.failure_row(x1) {
                *out.failure[start].entry(xf).or_insert(0.0) += p1 * p2;
            }
        }
        for (&xf, &p) in first.failure_row(start) {
            *out.failure[start].entry(xf).or_insert(0.0) += p;
        }
    }
    Ok(out)
}

/// Folds a sequence of STOKs left to right into one macro kernel.
pub fn abstract_action(stoks: &[Stok]) -> Result<Stok> {
    let mut it = stoks.iter();
    let first = it.next().ok_or(Error::EmptyOptionSet)?;
    let mut acc = first.clone();
    for s in it {
        acc = compose_stoks(&acc, s)?;
    }
    Ok(acc)
}

/// Solver configuration for [`feasibility_iteration`].
#[derive(Debug, Clone)]
pub struct FiConfig {
    /// Initial time-horizon allocation; grows geometrically while event
    /// mass remains beyond it.
    pub horizon_hint: usize,
    /// Sweep-to-sweep convergence tolerance.
    pub tol: f64,
    /// Mass allowed to remain unabsorbed beyond the final horizon.
    pub residual_tol: f64,
    /// Sweep cap; `None` uses `10 * num_states * horizon_hint`.
    pub max_sweeps: Option<usize>,
    /// Hard ceiling on horizon growth.
    pub max_horizon: usize,
    /// Record the kappa iterate after every sweep.
    pub track_kappa_history: bool,
}

impl Default for FiConfig {
    fn default() -> Self {
        Self {
            horizon_hint: 64,
            tol: 1e-12,
            residual_tol: 1e-12,
            max_sweeps: None,
            max_horizon: 100_000,
            track_kappa_history: false,
        }
    }
}

/// Full output of feasibility iteration.
#[derive(Debug, Clone)]
pub struct FiSolution {
    pub cff: Cff,
    pub policy: Vec<usize>,
    pub stok: Stok,
    /// Expected time-to-go maintained alongside the policy sweep.
    pub nu: Vec<f64>,
    pub sweeps: usize,
    /// Unabsorbed mass beyond the final horizon (max over starts).
    pub residual: f64,
    pub kappa_history: Option<Vec<Vec<f64>>>,
}

/// Stationary feasibility iteration.
///
/// Sweeps the `kappa`, policy, and `nu` updates in state order from a
/// mandatory zero initialization until the kappa fixed point, then runs the
/// event recursions forward in time to build the STOK, growing the horizon
/// geometrically while unabsorbed mass exceeds the residual tolerance.
///
/// Ties in the kappa-maximizing action set are resolved by minimizing the
/// expected time-to-go and then by the lowest action index; `nu`
/// contributions from zero-feasibility successors are dropped since no
/// success mass ever flows through them.
pub fn feasibility_iteration(t: &Tmdp, cfg: &FiConfig) -> Result<FiSolution> {
    let ns = t.kernel.num_states();
    let na = t.kernel.num_actions();
    let mut f1 = vec![0.0; ns * na];
    let mut f2 = vec![0.0; ns * na];
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(ns * na);
    for x in 0..ns {
        for a in 0..na {
            f1[x * na + a] = t.achievement(x, a);
            f2[x * na + a] = t.continuation(x, a);
            rows.push(t.kernel.row(x, a, 0));
        }
    }

    let mut kappa = vec![0.0; ns];
    let mut nu = vec![0.0; ns];
    let mut policy = vec![0usize; ns];
    let mut history: Vec<Vec<f64>> = Vec::new();
    let max_sweeps = cfg
        .max_sweeps
        .unwrap_or_else(|| 10 * ns * cfg.horizon_hint.max(1));

    let mut sweeps = 0;
    loop {
        sweeps += 1;
        let mut dk: f64 = 0.0;
        let mut dn: f64 = 0.0;
        let mut policy_changed = false;
        for x in 0..ns {
            let mut best = f64::NEG_INFINITY;
            let mut q = vec![0.0; na];
            for a in 0..na {
                let idx = x * na + a;
                let mut exp = 0.0;
                for &(j, p) in &rows[idx] {
                    exp += p * kappa[j];
                }
                q[a] = f1[idx] + f2[idx] * exp;
                if q[a] > best {
                    best = q[a];
                }
            }
            // time-minimizing choice within the kappa-maximizing set
            let mut chosen = usize::MAX;
            let mut chosen_score = f64::INFINITY;
            for a in 0..na {
                if q[a] < best - TIE_TOL {
                    continue;
                }
                let idx = x * na + a;
                let mut exp = 0.0;
                for &(j, p) in &rows[idx] {
                    if kappa[j] > 0.0 {
                        exp += p * nu[j];
                    }
                }
                let score = f2[idx] * exp;
                if score < chosen_score - TIE_TOL {
                    chosen_score = score;
                    chosen = a;
                }
            }
            let a = chosen;
            let idx = x * na + a;
            let mut exp = 0.0;
            for &(j, p) in &rows[idx] {
                if kappa[j] > 0.0 {
                    exp += p * nu[j];
                }
            }
            let new_nu = if best > 0.0 { 1.0 + f2[idx] * exp } else { 0.0 };

            dk = dk.max((best - kappa[x]).abs());
            dn = dn.max((new_nu - nu[x]).abs());
            if policy[x] != a {
                policy_changed = true;
            }
            kappa[x] = best;
            nu[x] = new_nu;
            policy[x] = a;
        }
        if cfg.track_kappa_history {
            history.push(kappa.clone());
        }
        if dk < cfg.tol && dn < cfg.tol && !policy_changed {
            break;
        }
        if sweeps >= max_sweeps {
            return Err(Error::NonConvergence {
                sweeps,
                residual: dk.max(dn),
            });
        }
    }

    // event recursions under the converged policy, forward in time
    let stok = policy_event_kernel(
        &policy,
        &kappa,
        t,
        cfg.horizon_hint.max(1),
        cfg.residual_tol,
        cfg.max_horizon,
    )?;
    let residual = stok.mass_residual();

    Ok(FiSolution {
        cff: Cff { values: kappa },
        policy,
        stok,
        nu,
        sweeps,
        residual,
        kappa_history: if cfg.track_kappa_history {
            Some(history)
        } else {
            None
        },
    })
}

/// Builds the STOK of a fixed policy by iterating the event recursions
/// over time: `eta_t = M eta_{t-1}` with `M = f2 P_pi` zeroed at
/// infeasible states, plus the boundary diagonal.
fn policy_event_kernel(
    policy: &[usize],
    kappa: &[f64],
    t: &Tmdp,
    horizon_hint: usize,
    residual_tol: f64,
    max_horizon: usize,
) -> Result<Stok> {
    let ns = t.kernel.num_states();
    let mut m: Vec<Vec<(usize, f64)>> = Vec::with_capacity(ns);
    let mut d_plus = vec![0.0; ns];
    let mut d_minus = vec![0.0; ns];
    for x in 0..ns {
        let a = policy[x];
        if kappa[x] > 0.0 {
            let w = t.continuation(x, a);
            m.push(
                t.kernel
                    .row(x, a, 0)
                    .into_iter()
                    .filter(|&(_, p)| p != 0.0)
                    .map(|(j, p)| (j, w * p))
                    .collect(),
            );
            d_plus[x] = t.achievement(x, a);
            d_minus[x] = 1.0 - t.constraint.value(x, a);
        } else {
            // third termination: infeasible states fail in place at t0
            m.push(Vec::new());
            d_minus[x] = 1.0;
        }
    }

    let mut stok = Stok::empty(ns, 1);
    // occupancy rows: mass at (row state j) having survived to time t,
    // starting from each start i
    let mut occ: Vec<BTreeMap<usize, f64>> = (0..ns)
        .map(|i| {
            let mut r = BTreeMap::new();
            r.insert(i, 1.0);
            r
        })
        .collect();
    let mut absorbed = vec![0.0; ns];
    let mut horizon = horizon_hint;
    let mut tf = 0;
    loop {
        let mut live = 0.0f64;
        for i in 0..ns {
            for (&j, &mass) in &occ[i] {
                if d_plus[j] != 0.0 {
                    stok.add_success(i, j, tf, mass * d_plus[j]);
                    absorbed[i] += mass * d_plus[j];
                }
                if d_minus[j] != 0.0 {
                    stok.add_failure(i, j, tf, mass * d_minus[j]);
                    absorbed[i] += mass * d_minus[j];
                }
            }
            live = live.max(1.0 - absorbed[i]);
        }
        if live <= residual_tol {
            break;
        }
        tf += 1;
        if tf >= horizon {
            if horizon >= max_horizon {
                break;
            }
            horizon = (horizon * 2).min(max_horizon);
        }
        // advance survivors one step
        let mut next: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); ns];
        for i in 0..ns {
            for (&j, &mass) in &occ[i] {
                for &(k, w) in &m[j] {
                    *next[i].entry(k).or_insert(0.0) += mass * w;
                }
            }
        }
        occ = next;
    }
    Ok(stok)
}

/// An option: a policy plus a termination function over state-actions,
/// bundled with the feasibility function and event kernel it was solved
/// with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptionObj {
    pub policy: Vec<usize>,
    /// `beta(x, a)` flattened `(x * num_actions + a)`.
    pub termination: Vec<f64>,
    pub num_actions: usize,
    pub goal_index: usize,
    pub stok: Stok,
    pub cff: Cff,
}

impl OptionObj {
    pub fn beta(&self, x: usize, a: usize) -> f64 {
        self.termination[x * self.num_actions + a]
    }
}

/// Casts a solved task MDP as an option. Termination fires on goal success
/// or constraint violation wherever the task is feasible, and immediately
/// wherever it is not.
pub fn make_option(
    sol: &FiSolution,
    goal: &GoalFunction,
    constraint: &ConstraintFunction,
    goal_index: usize,
) -> OptionObj {
    let ns = goal.num_states;
    let na = goal.num_actions;
    let mut termination = vec![0.0; ns * na];
    for x in 0..ns {
        for a in 0..na {
            let f1 = goal.value(x, a) * constraint.value(x, a);
            let beta = if sol.cff.values[x] > 0.0 {
                f1 + (1.0 - constraint.value(x, a))
            } else {
                1.0
            };
            termination[x * na + a] = beta;
        }
    }
    OptionObj {
        policy: sol.policy.clone(),
        termination,
        num_actions: na,
        goal_index,
        stok: sol.stok.clone(),
        cff: sol.cff.clone(),
    }
}

/// Evaluates the closed-form state-time event products along a single
/// trajectory of `(state, action)` pairs: the probability that the first
/// goal-success event is exactly at the trajectory's final step, and the
/// probability that the first violation event is there.
pub fn trajectory_stef(traj: &[(usize, usize)], t: &Tmdp) -> (f64, f64) {
    assert!(!traj.is_empty());
    let mut carry = 1.0;
    for &(x, a) in &traj[..traj.len() - 1] {
        carry *= t.continuation(x, a);
    }
    let (xf, af) = traj[traj.len() - 1];
    let eta_plus = carry * t.achievement(xf, af);
    let eta_minus = carry * (1.0 - t.constraint.value(xf, af));
    (eta_plus, eta_minus)
}

/// Independent oracle for the event recursions: clones goal and constraint
/// absorption into block matrices and extracts the STOK from matrix powers
/// of the policy's absorbing chain.
///
/// Feasibility support is determined by graph reachability rather than the
/// solver's kappa, so the construction shares no code path with
/// [`feasibility_iteration`].
pub fn absorbing_chain_stok(policy: &[usize], t: &Tmdp, horizon: usize) -> Stok {
    let ns = t.kernel.num_states();
    assert_eq!(policy.len(), ns);

    // reverse reachability to positive-achievement states through
    // positive-continuation edges
    let mut feasible = vec![false; ns];
    let mut stack: Vec<usize> = (0..ns)
        .filter(|&x| t.achievement(x, policy[x]) > 0.0)
        .collect();
    let mut preds: Vec<Vec<usize>> = vec![Vec::new(); ns];
    for x in 0..ns {
        if t.continuation(x, policy[x]) > 0.0 {
            for (j, p) in t.kernel.row(x, policy[x], 0) {
                if p > 0.0 {
                    preds[j].push(x);
                }
            }
        }
    }
    for &s in &stack {
        feasible[s] = true;
    }
    while let Some(s) = stack.pop() {
        for &p in &preds[s] {
            if !feasible[p] {
                feasible[p] = true;
                stack.push(p);
            }
        }
    }

    // block matrices: diagonal event transitions and the complement-weighted
    // survivor dynamics
    let mut p_nn: Vec<Vec<(usize, f64)>> = Vec::with_capacity(ns);
    let mut to_plus = vec![0.0; ns];
    let mut to_minus = vec![0.0; ns];
    for x in 0..ns {
        let a = policy[x];
        if feasible[x] {
            to_plus[x] = t.goal.value(x, a) * t.constraint.value(x, a);
            to_minus[x] = 1.0 - t.constraint.value(x, a);
        } else {
            to_minus[x] = 1.0;
        }
        let stay = 1.0 - to_plus[x] - to_minus[x];
        if stay > 0.0 {
            p_nn.push(
                t.kernel
                    .row(x, a, 0)
                    .into_iter()
                    .map(|(j, p)| (j, stay * p))
                    .collect(),
            );
        } else {
            p_nn.push(Vec::new());
        }
    }

    let mut stok = Stok::empty(ns, 1);
    let mut power: Vec<BTreeMap<usize, f64>> = (0..ns)
        .map(|i| {
            let mut r = BTreeMap::new();
            r.insert(i, 1.0);
            r
        })
        .collect();
    for tf in 0..horizon {
        for i in 0..ns {
            for (&j, &mass) in &power[i] {
                stok.add_success(i, j, tf, mass * to_plus[j]);
                stok.add_failure(i, j, tf, mass * to_minus[j]);
            }
        }
        if tf + 1 < horizon {
            let mut next: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); ns];
            for i in 0..ns {
                for (&j, &mass) in &power[i] {
                    for &(k, w) in &p_nn[j] {
                        *next[i].entry(k).or_insert(0.0) += mass * w;
                    }
                }
            }
            power = next;
        }
    }
    stok
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::TransitionKernel;

    fn corridor(n: usize) -> Tmdp {
        // actions: 0 = left, 1 = right; goal at the right end
        let k = TransitionKernel::deterministic(n, 2, |s, a| {
            if a == 1 {
                (s + 1).min(n - 1)
            } else {
                s.saturating_sub(1)
            }
        });
        let mut g = GoalFunction::zero(n, 2);
        g.set_state(n - 1, 1.0);
        Tmdp::new(k, g, ConstraintFunction::free(n, 2)).unwrap()
    }

    #[test]
    fn goal_at_start_is_immediately_feasible() {
        let k = TransitionKernel::deterministic(3, 1, |s, _| s);
        let mut g = GoalFunction::zero(3, 1);
        g.set(0, 0, 1.0);
        let t = Tmdp::new(k, g, ConstraintFunction::free(3, 1)).unwrap();
        let sol = feasibility_iteration(&t, &FiConfig::default()).unwrap();
        assert_eq!(sol.cff.value(0), 1.0);
        assert_eq!(sol.stok.success_value(0, 0, 0), 1.0);
    }

    #[test]
    fn disconnected_goal_fails_at_initiation() {
        // two self-loop states, goal on the unreachable one
        let k = TransitionKernel::deterministic(2, 1, |s, _| s);
        let mut g = GoalFunction::zero(2, 1);
        g.set(1, 0, 1.0);
        let t = Tmdp::new(k, g, ConstraintFunction::free(2, 1)).unwrap();
        let sol = feasibility_iteration(&t, &FiConfig::default()).unwrap();
        assert_eq!(sol.cff.value(0), 0.0);
        assert_eq!(sol.stok.failure_value(0, 0, 0), 1.0);
        assert_eq!(sol.stok.total_mass(0), 1.0);
    }

    #[test]
    fn corridor_solution_is_exact() {
        let t = corridor(5);
        let sol = feasibility_iteration(&t, &FiConfig::default()).unwrap();
        for i in 0..5 {
            assert_eq!(sol.cff.value(i), 1.0);
            assert_eq!(sol.stok.success_value(i, 4, 4 - i), 1.0);
            if i < 4 {
                assert_eq!(sol.policy[i], 1, "policy moves right at {i}");
            }
        }
    }

    #[test]
    fn corridor_matches_absorbing_chain_oracle() {
        let t = corridor(5);
        let sol = feasibility_iteration(&t, &FiConfig::default()).unwrap();
        let oracle = absorbing_chain_stok(&sol.policy, &t, sol.stok.horizon);
        assert!(sol.stok.max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn stochastic_chain_sums_to_one_and_matches_oracle() {
        // noisy two-action ring with a goal and one constraint state
        let n = 7;
        let k = TransitionKernel::from_rows(n, 2, 1, |s, a, _| {
            let fwd = (s + 1) % n;
            let bwd = (s + n - 1) % n;
            if a == 0 {
                vec![(fwd, 0.8), (bwd, 0.1), (s, 0.1)]
            } else {
                vec![(bwd, 0.8), (fwd, 0.1), (s, 0.1)]
            }
        })
        .unwrap();
        let mut g = GoalFunction::zero(n, 2);
        g.set_state(3, 1.0);
        let mut c = ConstraintFunction::free(n, 2);
        c.block_state(5);
        let t = Tmdp::new(k, g, c).unwrap();
        let sol = feasibility_iteration(&t, &FiConfig::default()).unwrap();
        assert!(sol.stok.mass_residual() < 1e-9);
        let oracle = absorbing_chain_stok(&sol.policy, &t, sol.stok.horizon);
        assert!(sol.stok.max_abs_diff(&oracle) < 1e-10);
        // kappa consistency
        for i in 0..n {
            assert!((sol.stok.success_mass(i) - sol.cff.value(i)).abs() < 1e-9);
            assert!((sol.stok.failure_mass(i) - (1.0 - sol.cff.value(i))).abs() < 1e-9);
        }
    }

    #[test]
    fn option_termination_function() {
        let t = corridor(4);
        let sol = feasibility_iteration(&t, &FiConfig::default()).unwrap();
        let opt = make_option(&sol, &t.goal, &t.constraint, 0);
        // free-space interior, feasible: continue
        assert_eq!(opt.beta(1, 1), 0.0);
        // goal state with any action: terminate
        assert_eq!(opt.beta(3, 0), 1.0);

        // infeasible state: immediate termination
        let k = TransitionKernel::deterministic(2, 1, |s, _| s);
        let mut g = GoalFunction::zero(2, 1);
        g.set(1, 0, 1.0);
        let t2 = Tmdp::new(k, g, ConstraintFunction::free(2, 1)).unwrap();
        let sol2 = feasibility_iteration(&t2, &FiConfig::default()).unwrap();
        let opt2 = make_option(&sol2, &t2.goal, &t2.constraint, 0);
        assert_eq!(opt2.beta(0, 0), 1.0);
    }

    #[test]
    fn identity_composition() {
        let t = corridor(5);
        let sol = feasibility_iteration(&t, &FiConfig::default()).unwrap();
        let id = Stok::immediate_success(5);
        let composed = compose_stoks(&sol.stok, &id).unwrap();
        assert!(composed.max_abs_diff(&sol.stok) < 1e-15);
    }

    #[test]
    fn deterministic_lengths_add_under_composition() {
        // option 1: go from 0 to 2 (length 2); option 2: from 2 to 5 (length 3)
        let n = 6;
        let k = TransitionKernel::deterministic(n, 2, |s, a| {
            if a == 1 {
                (s + 1).min(n - 1)
            } else {
                s.saturating_sub(1)
            }
        });
        let mut g1 = GoalFunction::zero(n, 2);
        g1.set_state(2, 1.0);
        let t1 = Tmdp::new(k.clone(), g1, ConstraintFunction::free(n, 2)).unwrap();
        let mut g2 = GoalFunction::zero(n, 2);
        g2.set_state(5, 1.0);
        let t2 = Tmdp::new(k, g2, ConstraintFunction::free(n, 2)).unwrap();
        let s1 = feasibility_iteration(&t1, &FiConfig::default()).unwrap();
        let s2 = feasibility_iteration(&t2, &FiConfig::default()).unwrap();
        let mu = compose_stoks(&s1.stok, &s2.stok).unwrap();
        assert_eq!(mu.success_value(0, 5, 5), 1.0);
        assert!(mu.mass_residual() < 1e-12);
    }

    #[test]
    fn sok_marginal_commutes_with_composition() {
        let t = corridor(5);
        let sol = feasibility_iteration(&t, &FiConfig::default()).unwrap();
        let mut g2 = GoalFunction::zero(5, 2);
        g2.set_state(0, 1.0);
        let t2 = Tmdp::new(t.kernel.clone(), g2, ConstraintFunction::free(5, 2)).unwrap();
        let sol2 = feasibility_iteration(&t2, &FiConfig::default()).unwrap();

        let via_stok = stok_to_sok(&compose_stoks(&sol.stok, &sol2.stok).unwrap());
        let via_sok = compose_soks(&stok_to_sok(&sol.stok), &stok_to_sok(&sol2.stok)).unwrap();
        for i in 0..5 {
            for x in 0..5 {
                let a = via_stok.success_row(i).get(&x).copied().unwrap_or(0.0);
                let b = via_sok.success_row(i).get(&x).copied().unwrap_or(0.0);
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn trajectory_oracle_closed_products() {
        let t = corridor(3);
        // single step at the goal
        let (ep, em) = trajectory_stef(&[(2, 1)], &t);
        assert_eq!(ep, 1.0);
        assert_eq!(em, 0.0);

        // trajectory through a hard constraint
        let mut c = ConstraintFunction::free(3, 2);
        c.block_state(1);
        let t2 = Tmdp::new(t.kernel.clone(), t.goal.clone(), c).unwrap();
        let (ep, _) = trajectory_stef(&[(0, 1), (1, 1), (2, 1)], &t2);
        assert_eq!(ep, 0.0);

        // mixed probabilities: f2 * f2 * f1
        let k = TransitionKernel::deterministic(3, 1, |s, _| (s + 1).min(2));
        let mut g = GoalFunction::zero(3, 1);
        g.set(2, 0, 0.5);
        let mut c = ConstraintFunction::free(3, 1);
        c.set(0, 0, 0.8);
        c.set(1, 0, 0.8);
        let t3 = Tmdp::new(k, g, c).unwrap();
        let (ep, em) = trajectory_stef(&[(0, 0), (1, 0), (2, 0)], &t3);
        assert!((ep - 0.8 * 0.8 * 0.5).abs() < 1e-15);
        assert!((em - 0.0).abs() < 1e-15);
    }

    #[test]
    fn fi_matches_trajectory_oracle_on_deterministic_rollout() {
        let t = corridor(5);
        let sol = feasibility_iteration(&t, &FiConfig::default()).unwrap();
        // rollout from 1 under the solved policy
        let mut x = 1;
        let mut traj = Vec::new();
        loop {
            traj.push((x, sol.policy[x]));
            if t.achievement(x, sol.policy[x]) > 0.0 {
                break;
            }
            x = t.kernel.row(x, sol.policy[x], 0)[0].0;
        }
        let (ep, _) = trajectory_stef(&traj, &t);
        assert_eq!(ep, sol.stok.success_value(1, 4, traj.len() - 1));
    }

    #[test]
    fn kappa_iterates_are_monotone() {
        let n = 7;
        let k = TransitionKernel::from_rows(n, 2, 1, |s, a, _| {
            let fwd = (s + 1) % n;
            let bwd = (s + n - 1) % n;
            if a == 0 {
                vec![(fwd, 0.7), (s, 0.3)]
            } else {
                vec![(bwd, 0.7), (s, 0.3)]
            }
        })
        .unwrap();
        let mut g = GoalFunction::zero(n, 2);
        g.set_state(4, 0.9);
        let t = Tmdp::new(k, g, ConstraintFunction::free(n, 2)).unwrap();
        let cfg = FiConfig {
            track_kappa_history: true,
            ..FiConfig::default()
        };
        let sol = feasibility_iteration(&t, &cfg).unwrap();
        let hist = sol.kappa_history.unwrap();
        for w in hist.windows(2) {
            for (prev, next) in w[0].iter().zip(w[1].iter()) {
                assert!(next >= prev, "kappa iterate decreased");
                assert!(*next <= 1.0 + 1e-15);
            }
        }
    }
}
