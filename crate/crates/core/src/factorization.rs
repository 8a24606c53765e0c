//! Decomposition machinery for compositional task MDPs.
//!
//! Solving the product-space Bellman equations directly is exponential in
//! the number of subsystems. Within a region of consistent default
//! dynamics, the product-space option kernel factorizes: a temporal event
//! function built from per-space complement cumulative event functions
//! carries the first-event time, and per-space state-prediction kernels
//! (powers of each subsystem's default absorbing chain) carry the states.
//! [`factorized_stok`] implements that factorization; the brute-force
//! product solve from [`crate::tmdp::Ctmdp::product_tmdp`] is its oracle at
//! desk scale.
//!
//! [`ensemble_solve`] decomposes a compositional problem into one option
//! per non-default affordance tuple (goals extracted from the affordance
//! function, other tuples constrained away for homogeneity) and aggregates
//! the solutions into a [`GoalKernel`]: a semi-Markov kernel that jumps a
//! full state-vector and clock from option initiation to post-termination,
//! including the one-step boundary-action update that lets a terminal
//! action drive the high-level spaces.

use std::collections::BTreeMap;
use std::sync::Mutex;

use crate::kernels::{default_markov_chain, ProductLayout, TransitionKernel};
use crate::okbe::{feasibility_iteration, make_option, FiConfig, FiSolution, OptionObj, Stok};
use crate::tmdp::{ConstraintFunction, Ctmdp, GoalFunction, GoalTuple, SpaceRef, Tmdp};
use crate::{Error, Result};

/// A maximal set of base state-actions inducing the same high-level action
/// vector under the affordance function.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub id: usize,
    /// Default high-level action per space while inside this region.
    pub default_alpha: Vec<usize>,
    pub members: Vec<(usize, usize)>,
}

impl Region {
    /// True if the region owns every action of at least one state, i.e. an
    /// option can dwell inside it.
    pub fn has_interior(&self, num_actions: usize) -> bool {
        let mut count: BTreeMap<usize, usize> = BTreeMap::new();
        for &(x, _) in &self.members {
            *count.entry(x).or_insert(0) += 1;
        }
        count.values().any(|&c| c == num_actions)
    }
}

/// Partitions the base state-action space by induced high-level action
/// vector. Guarded affordance entries resolve to their unguarded value
/// here; regions describe the unconditional coupling.
pub fn identify_regions(
    f: &crate::kernels::AffordanceFunction,
    num_states: usize,
    num_actions: usize,
) -> Result<Vec<Region>> {
    let sentinel = vec![usize::MAX; f.factors().len().max(1)];
    let mut classes: BTreeMap<Vec<usize>, Vec<(usize, usize)>> = BTreeMap::new();
    for x in 0..num_states {
        for a in 0..num_actions {
            let alpha = f.action_vector(&sentinel, x, a).ok_or_else(|| Error::Validation {
                path: format!("affordance at (x={x}, a={a})"),
                message: "region identification requires deterministic affordances".into(),
            })?;
            classes.entry(alpha).or_default().push((x, a));
        }
    }
    // default vector first, then lexicographic
    let default = f.default_vector();
    let mut regions: Vec<Region> = Vec::with_capacity(classes.len());
    if let Some(members) = classes.remove(&default) {
        regions.push(Region {
            id: 0,
            default_alpha: default,
            members,
        });
    }
    for (alpha, members) in classes {
        regions.push(Region {
            id: regions.len(),
            default_alpha: alpha,
            members,
        });
    }
    Ok(regions)
}

/// State-prediction kernel: matrix powers of a default absorbing chain,
/// `rows[t][start]` a sparse distribution over final states.
#[derive(Debug, Clone, PartialEq)]
pub struct Spk {
    pub num_states: usize,
    pub max_t: usize,
    rows: Vec<Vec<Vec<(usize, f64)>>>,
}

impl Spk {
    /// Distribution over final states after `t` steps from `start`.
    pub fn dist(&self, start: usize, t: usize) -> &[(usize, f64)] {
        &self.rows[t.min(self.max_t)][start]
    }

    pub fn covers(&self, t: usize) -> bool {
        t <= self.max_t
    }
}

/// Builds the state-prediction kernel for one space: clamps the kernel to
/// the region's default action, makes the listed event states absorbing,
/// and takes matrix powers up to `max_t`. The `t = 0` slice is the
/// identity.
pub fn spk(
    kernel: &TransitionKernel,
    default_action: usize,
    absorbing: &[usize],
    max_t: usize,
) -> Result<Spk> {
    let chain = default_markov_chain(kernel, default_action, absorbing)?;
    let n = chain.num_states();
    let mut rows: Vec<Vec<Vec<(usize, f64)>>> = Vec::with_capacity(max_t + 1);
    rows.push((0..n).map(|s| vec![(s, 1.0)]).collect());
    for t in 1..=max_t {
        let prev = &rows[t - 1];
        let mut next: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
        for s in 0..n {
            let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
            for &(j, p) in &prev[s] {
                for (k, q) in chain.row(j, 0, 0) {
                    *acc.entry(k).or_insert(0.0) += p * q;
                }
            }
            next.push(acc.into_iter().collect());
        }
        rows.push(next);
    }
    Ok(Spk {
        num_states: n,
        max_t,
        rows,
    })
}

/// First-event functions of one high-level space under a region's default
/// dynamics: the state-time event function, its cumulative form, and the
/// complement.
#[derive(Debug, Clone, PartialEq)]
pub struct HlEvent {
    pub num_states: usize,
    pub max_t: usize,
    /// `stef[t][start]` sparse distribution over event states at exactly `t`.
    stef: Vec<Vec<Vec<(usize, f64)>>>,
    /// `cef[start][t]`: probability a first event occurs by `t`; nondecreasing.
    cef: Vec<Vec<f64>>,
}

impl HlEvent {
    pub fn stef(&self, start: usize, t: usize) -> &[(usize, f64)] {
        &self.stef[t][start]
    }

    /// Cumulative event probability by time `t`.
    pub fn cef(&self, start: usize, t: usize) -> f64 {
        if t > self.max_t {
            self.cef[start][self.max_t]
        } else {
            self.cef[start][t]
        }
    }

    /// Probability no event has occurred through time `t`.
    pub fn comp_cef(&self, start: usize, t: usize) -> f64 {
        1.0 - self.cef(start, t)
    }

    /// True if no event can ever occur from `start` within the horizon.
    pub fn event_free(&self, start: usize) -> bool {
        self.cef[start][self.max_t] == 0.0
    }
}

/// Computes the high-level event functions for one space under a region's
/// default action: `f_3(z) = (1 - f_g(z, a_l)) * f_c(z, a_l) * f_l(z)` is
/// the continuation weight, and the event recursion runs over the plain
/// default chain.
pub fn hl_event_functions(
    kernel: &TransitionKernel,
    default_action: usize,
    goal: Option<&GoalFunction>,
    constraint: Option<&ConstraintFunction>,
    region_member: Option<&[bool]>,
    max_t: usize,
) -> Result<HlEvent> {
    if default_action >= kernel.num_actions() {
        return Err(Error::InvalidIndex(format!(
            "default action {default_action} out of {}",
            kernel.num_actions()
        )));
    }
    let n = kernel.num_states();
    let chain = default_markov_chain(kernel, default_action, &[])?;
    let f3: Vec<f64> = (0..n)
        .map(|z| {
            let g = goal.map(|g| g.value(z, default_action)).unwrap_or(0.0);
            let c = constraint.map(|c| c.value(z, default_action)).unwrap_or(1.0);
            let l = region_member
                .map(|m| if m[z] { 1.0 } else { 0.0 })
                .unwrap_or(1.0);
            (1.0 - g) * c * l
        })
        .collect();

    let mut stef: Vec<Vec<Vec<(usize, f64)>>> = Vec::with_capacity(max_t + 1);
    // boundary: eta(z_j, t0 | z_i) = (1 - f3(z_i)) delta_ij
    stef.push(
        (0..n)
            .map(|z| {
                if f3[z] < 1.0 {
                    vec![(z, 1.0 - f3[z])]
                } else {
                    Vec::new()
                }
            })
            .collect(),
    );
    for t in 1..=max_t {
        let prev = &stef[t - 1];
        let mut next: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
        for z in 0..n {
            let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
            if f3[z] > 0.0 {
                for (j, p) in chain.row(z, 0, 0) {
                    for &(zf, q) in &prev[j] {
                        *acc.entry(zf).or_insert(0.0) += f3[z] * p * q;
                    }
                }
            }
            next.push(acc.into_iter().collect());
        }
        stef.push(next);
    }

    let mut cef = vec![vec![0.0; max_t + 1]; n];
    for z in 0..n {
        let mut acc = 0.0;
        for (t, row) in stef.iter().enumerate() {
            acc += row[z].iter().map(|&(_, p)| p).sum::<f64>();
            cef[z][t] = acc.min(1.0);
        }
    }
    Ok(HlEvent {
        num_states: n,
        max_t,
        stef,
        cef,
    })
}

/// Builds the base-level prediction kernel for a solved policy: powers of
/// the controlled chain with every event state (goal, constraint, or zero
/// feasibility) absorbing.
pub fn bl_spk(bl: &Tmdp, sol: &FiSolution, max_t: usize) -> Result<Spk> {
    let n = bl.kernel.num_states();
    let policy_kernel =
        TransitionKernel::from_rows(n, 1, 1, |x, _, _| bl.kernel.row(x, sol.policy[x], 0))?;
    let absorbing: Vec<usize> = (0..n)
        .filter(|&x| sol.cff.values[x] == 0.0 || bl.continuation(x, sol.policy[x]) < 1.0)
        .collect();
    spk(&policy_kernel, 0, &absorbing, max_t)
}

/// A product-space STOK evaluated from a single start vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductStok {
    pub layout: ProductLayout,
    pub start: Vec<usize>,
    success: BTreeMap<(usize, usize), f64>,
    failure: BTreeMap<(usize, usize), f64>,
}

impl ProductStok {
    pub fn success_atoms(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.success.iter().map(|(&(s, t), &p)| (s, t, p))
    }

    pub fn failure_atoms(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.failure.iter().map(|(&(s, t), &p)| (s, t, p))
    }

    pub fn total_mass(&self) -> f64 {
        self.success.values().sum::<f64>() + self.failure.values().sum::<f64>()
    }

    /// Max absolute difference against a brute-force product STOK row.
    pub fn max_abs_diff_vs(&self, brute: &Stok, start_index: usize) -> f64 {
        let mut d: f64 = 0.0;
        let mut seen = std::collections::BTreeSet::new();
        for (s, t, p) in self.success_atoms() {
            d = d.max((p - brute.success_value(start_index, s, t)).abs());
            seen.insert((true, s, t));
        }
        for (s, t, p) in brute.success_atoms(start_index) {
            if !seen.contains(&(true, s, t)) {
                d = d.max(p.abs());
            }
        }
        for (s, t, p) in self.failure_atoms() {
            d = d.max((p - brute.failure_value(start_index, s, t)).abs());
            seen.insert((false, s, t));
        }
        for (s, t, p) in brute.failure_atoms(start_index) {
            if !seen.contains(&(false, s, t)) {
                d = d.max(p.abs());
            }
        }
        d
    }
}

/// The STOK decomposition: assembles the product-space option kernel from
/// the base-level solution, per-space prediction kernels, and per-space
/// event functions, without ever touching the product space's Bellman
/// equations.
///
/// The temporal event function is computed from complement-CEF
/// differences, `xi(t) = prod_k comp_k(t-1) - prod_k comp_k(t)` over all
/// spaces including the base level. When every high-level space is
/// verified event-free from its start, the fast path multiplies the base
/// STOK directly with the high-level prediction kernels.
pub fn factorized_stok(
    bl: &Tmdp,
    bl_sol: &FiSolution,
    spks: &[&Spk],
    hl_events: &[&HlEvent],
    start: &[usize],
) -> Result<ProductStok> {
    if spks.len() != hl_events.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} prediction kernels for {} event functions",
            spks.len(),
            hl_events.len()
        )));
    }
    let n_hl = spks.len();
    if start.len() != n_hl + 1 {
        return Err(Error::DimensionMismatch(format!(
            "start vector has {} components for {} spaces",
            start.len(),
            n_hl + 1
        )));
    }
    let x0 = start[n_hl];
    let z0 = &start[..n_hl];
    let horizon = bl_sol.stok.horizon;
    for (k, s) in spks.iter().enumerate() {
        if !s.covers(horizon.saturating_sub(1)) {
            return Err(Error::DimensionMismatch(format!(
                "prediction kernel for space {k} covers t <= {}, base STOK horizon is {horizon}",
                s.max_t
            )));
        }
    }
    let layout = ProductLayout::new(
        &spks.iter().map(|s| s.num_states).collect::<Vec<_>>(),
        bl.kernel.num_states(),
    );

    let mut out = ProductStok {
        layout: layout.clone(),
        start: start.to_vec(),
        success: BTreeMap::new(),
        failure: BTreeMap::new(),
    };

    // joint HL prediction at time t as a sparse product distribution
    let hl_joint = |t: usize| -> Vec<(Vec<usize>, f64)> {
        let mut acc: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 1.0)];
        for (k, s) in spks.iter().enumerate() {
            let row = s.dist(z0[k], t);
            let mut next = Vec::with_capacity(acc.len() * row.len());
            for (vec, p) in &acc {
                for &(zf, q) in row {
                    let mut v = vec.clone();
                    v.push(zf);
                    next.push((v, p * q));
                }
            }
            acc = next;
        }
        acc
    };

    let event_free = hl_events
        .iter()
        .enumerate()
        .all(|(k, e)| e.event_free(z0[k]));

    if event_free {
        // base STOK times HL prediction kernels
        for (xf, t, p) in bl_sol.stok.success_atoms(x0) {
            for (zvec, q) in hl_joint(t) {
                let mut sv = zvec;
                sv.push(xf);
                *out.success.entry((layout.index(&sv), t)).or_insert(0.0) += p * q;
            }
        }
        for (xf, t, p) in bl_sol.stok.failure_atoms(x0) {
            for (zvec, q) in hl_joint(t) {
                let mut sv = zvec;
                sv.push(xf);
                *out.failure.entry((layout.index(&sv), t)).or_insert(0.0) += p * q;
            }
        }
        return Ok(out);
    }

    // general form: complement-CEF products over all spaces
    let bl_pred = bl_spk(bl, bl_sol, horizon.saturating_sub(1))?;
    let cum = bl_sol.stok.cumulative_events(x0);
    let comp_x = |t: isize| -> f64 {
        if t < 0 {
            1.0
        } else {
            1.0 - cum[(t as usize).min(cum.len() - 1)]
        }
    };
    let comp_z = |t: isize| -> f64 {
        if t < 0 {
            1.0
        } else {
            hl_events
                .iter()
                .enumerate()
                .map(|(k, e)| e.comp_cef(z0[k], t as usize))
                .product()
        }
    };
    // per-t base event split
    let mut xi_plus = vec![0.0; horizon];
    let mut xi_minus = vec![0.0; horizon];
    for (_, t, p) in bl_sol.stok.success_atoms(x0) {
        xi_plus[t] += p;
    }
    for (_, t, p) in bl_sol.stok.failure_atoms(x0) {
        xi_minus[t] += p;
    }

    for t in 0..horizon {
        let ti = t as isize;
        let kz_t = comp_z(ti);
        let kz_prev = comp_z(ti - 1);
        let xi_z = kz_prev - kz_t;
        // base-level events with the high-level spaces silent through t
        let w_plus = xi_plus[t] * kz_t;
        let w_minus = xi_minus[t] * kz_t;
        // high-level event at t with the base level silent through t-1
        let w_hl = comp_x(ti - 1) * xi_z;
        if w_plus == 0.0 && w_minus == 0.0 && w_hl == 0.0 {
            continue;
        }
        let joint = hl_joint(t);
        let bl_row = bl_pred.dist(x0, t);
        for (zvec, q) in &joint {
            for &(xf, r) in bl_row {
                let mut sv = zvec.clone();
                sv.push(xf);
                let idx = layout.index(&sv);
                if w_plus != 0.0 {
                    *out.success.entry((idx, t)).or_insert(0.0) += w_plus * q * r;
                }
                let fail_w = w_minus + w_hl;
                if fail_w != 0.0 {
                    *out.failure.entry((idx, t)).or_insert(0.0) += fail_w * q * r;
                }
            }
        }
    }
    Ok(out)
}

/// Which option set to construct for planning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptionSetKind {
    /// One point-option per base state-action (sufficient for deterministic
    /// problems).
    StateAction,
    /// One option per non-default affordance tuple (sufficient when the
    /// high-level kernels are static).
    Affordance,
}

/// One solved option of an ensemble, bundled with everything needed to
/// apply it through the goal kernel.
#[derive(Debug, Clone)]
pub struct PlanOption {
    pub id: usize,
    pub mode: usize,
    pub region: usize,
    pub goal: GoalTuple,
    pub option: OptionObj,
    /// Base-level prediction kernel under this option's policy.
    pub bl_pred: Spk,
    /// The reduced base-level task this option was solved on.
    pub tmdp: Tmdp,
}

/// Outcome of a goal-kernel application.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeDist {
    /// Post-boundary-update live atoms `(state vector, absolute time, mass)`.
    pub success: Vec<(Vec<usize>, usize, f64)>,
    /// Terminal failure atoms (no boundary update applied).
    pub failure: Vec<(Vec<usize>, usize, f64)>,
}

impl OutcomeDist {
    pub fn success_mass(&self) -> f64 {
        self.success.iter().map(|&(_, _, p)| p).sum()
    }

    pub fn failure_mass(&self) -> f64 {
        self.failure.iter().map(|&(_, _, p)| p).sum()
    }

    pub fn total_mass(&self) -> f64 {
        self.success_mass() + self.failure_mass()
    }
}

/// The factorized semi-Markov planning substrate: an ensemble of options
/// with per-space prediction kernels and event functions over a shared
/// compositional problem.
#[derive(Debug)]
pub struct GoalKernel {
    pub ctmdp: Ctmdp,
    pub options: Vec<PlanOption>,
    pub regions: Vec<Region>,
    /// Per `(space, region)` prediction kernels.
    spks: BTreeMap<(usize, usize), Spk>,
    /// Per `(space, region)` event functions.
    events: BTreeMap<(usize, usize), HlEvent>,
    cache: Mutex<BTreeMap<(Vec<usize>, usize), OutcomeDist>>,
}

impl GoalKernel {
    pub fn spk_for(&self, space: usize, region: usize) -> &Spk {
        &self.spks[&(space, region)]
    }

    pub fn hl_event_for(&self, space: usize, region: usize) -> &HlEvent {
        &self.events[&(space, region)]
    }

    pub fn num_hl(&self) -> usize {
        self.ctmdp.hl.len()
    }

    /// Mode of the base kernel at a high-level state vector.
    pub fn mode_at(&self, hl_states: &[usize]) -> usize {
        if self.ctmdp.bl.kernel.has_modes() {
            self.ctmdp.mode.mode(hl_states)
        } else {
            0
        }
    }

    /// Applies one option from `(state vector, time)`, producing the joint
    /// distribution over post-termination `(state vector, time)` atoms.
    ///
    /// Success events receive the one-step boundary-action update: the
    /// terminal base action and the high-level actions it induces advance
    /// every kernel one step and the clock by `t_f + 1`. Failure events are
    /// returned frozen where they happened; high-level first-event failures
    /// are positioned at the prediction kernels' states for their time.
    pub fn apply(&self, state: &[usize], time: usize, option_id: usize) -> Result<OutcomeDist> {
        if option_id >= self.options.len() {
            return Err(Error::ForeignOption(option_id));
        }
        let key = (state.to_vec(), option_id);
        if let Some(hit) = self.cache.lock().unwrap().get(&key) {
            return Ok(shift_time(hit, time));
        }
        let out = self.apply_uncached(state, option_id)?;
        let shifted = shift_time(&out, time);
        self.cache.lock().unwrap().insert(key, out);
        Ok(shifted)
    }

    fn apply_uncached(&self, state: &[usize], option_id: usize) -> Result<OutcomeDist> {
        let n_hl = self.num_hl();
        if state.len() != n_hl + 1 {
            return Err(Error::DimensionMismatch(format!(
                "state vector has {} components for {} spaces",
                state.len(),
                n_hl + 1
            )));
        }
        let opt = &self.options[option_id];
        let z0 = &state[..n_hl];
        let x0 = state[n_hl];

        let immediate_failure = OutcomeDist {
            success: Vec::new(),
            failure: vec![(state.to_vec(), 0, 1.0)],
        };
        // mode mismatch or zero feasibility: the option terminates at
        // initiation and contributes a pure failure atom
        if self.mode_at(z0) != opt.mode || opt.option.cff.values[x0] == 0.0 {
            return Ok(immediate_failure);
        }

        let stok = &opt.option.stok;
        let cum = stok.cumulative_events(x0);
        let comp_x = |t: isize| -> f64 {
            if t < 0 {
                1.0
            } else {
                1.0 - cum[(t as usize).min(cum.len() - 1)]
            }
        };
        let comp_z = |t: isize| -> f64 {
            if t < 0 {
                1.0
            } else {
                (0..n_hl)
                    .map(|k| self.hl_event_for(k, opt.region).comp_cef(z0[k], t as usize))
                    .product()
            }
        };

        let hl_joint = |t: usize| -> Vec<(Vec<usize>, f64)> {
            let mut acc: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 1.0)];
            for k in 0..n_hl {
                let row = self.spk_for(k, opt.region).dist(z0[k], t);
                let mut next = Vec::with_capacity(acc.len() * row.len());
                for (vec, p) in &acc {
                    for &(zf, q) in row {
                        let mut v = vec.clone();
                        v.push(zf);
                        next.push((v, p * q));
                    }
                }
                acc = next;
            }
            acc
        };

        let mut success: BTreeMap<(Vec<usize>, usize), f64> = BTreeMap::new();
        let mut failure: BTreeMap<(Vec<usize>, usize), f64> = BTreeMap::new();

        // base-level success events with surviving high-level spaces
        for (xf, tf, p) in stok.success_atoms(x0) {
            let w = comp_z(tf as isize);
            if p * w == 0.0 {
                continue;
            }
            let a_f = opt.goal.a;
            debug_assert_eq!(xf, opt.goal.x);
            for (zf, q) in hl_joint(tf) {
                let mass = p * w * q;
                if mass == 0.0 {
                    continue;
                }
                // resolve terminal high-level actions in the event context
                for (alpha, pa) in self.ctmdp.affordance.joint(&zf, xf, a_f) {
                    // boundary-step constraint factors on the high-level spaces
                    let mut c_z = 1.0;
                    for k in 0..n_hl {
                        if let Some(cf) = self.ctmdp.constraint.hl_factor(k) {
                            c_z *= cf.value(zf[k], alpha[k]);
                        }
                    }
                    let viol = mass * pa * (1.0 - c_z);
                    if viol != 0.0 {
                        let mut sv = zf.clone();
                        sv.push(xf);
                        *failure.entry((sv, tf)).or_insert(0.0) += viol;
                    }
                    let ok = mass * pa * c_z;
                    if ok == 0.0 {
                        continue;
                    }
                    // one-step boundary-action update
                    let mode = self.mode_at(&zf);
                    let mut hl_next: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), ok)];
                    for k in 0..n_hl {
                        let row = self.ctmdp.hl[k].kernel.row(zf[k], alpha[k], 0);
                        let mut nxt = Vec::with_capacity(hl_next.len() * row.len());
                        for (vec, m) in &hl_next {
                            for &(zj, q2) in &row {
                                let mut v = vec.clone();
                                v.push(zj);
                                nxt.push((v, m * q2));
                            }
                        }
                        hl_next = nxt;
                    }
                    for &(xj, px) in &self.ctmdp.bl.kernel.row(xf, a_f, mode) {
                        for (zvec, m) in &hl_next {
                            let mut sv = zvec.clone();
                            sv.push(xj);
                            *success.entry((sv, tf + 1)).or_insert(0.0) += m * px;
                        }
                    }
                }
            }
        }

        // base-level failure events with surviving high-level spaces
        for (xf, tf, p) in stok.failure_atoms(x0) {
            let w = comp_z(tf as isize);
            if p * w == 0.0 {
                continue;
            }
            for (zf, q) in hl_joint(tf) {
                let mut sv = zf;
                sv.push(xf);
                *failure.entry((sv, tf)).or_insert(0.0) += p * w * q;
            }
        }

        // high-level first events with the base level still silent
        let deepest = stok.horizon.max(1);
        for tf in 0..deepest {
            let ti = tf as isize;
            let xi_z = comp_z(ti - 1) - comp_z(ti);
            if xi_z == 0.0 {
                continue;
            }
            let w = comp_x(ti - 1) * xi_z;
            if w == 0.0 {
                continue;
            }
            for (zf, q) in hl_joint(tf) {
                for &(xf, r) in opt.bl_pred.dist(x0, tf) {
                    let mut sv = zf.clone();
                    sv.push(xf);
                    *failure.entry((sv, tf)).or_insert(0.0) += w * q * r;
                }
            }
        }

        Ok(OutcomeDist {
            success: success.into_iter().map(|((s, t), p)| (s, t, p)).collect(),
            failure: failure.into_iter().map(|((s, t), p)| (s, t, p)).collect(),
        })
    }
}

fn shift_time(out: &OutcomeDist, offset: usize) -> OutcomeDist {
    OutcomeDist {
        success: out
            .success
            .iter()
            .map(|(s, t, p)| (s.clone(), t + offset, *p))
            .collect(),
        failure: out
            .failure
            .iter()
            .map(|(s, t, p)| (s.clone(), t + offset, *p))
            .collect(),
    }
}

/// Solver knobs shared by the ensemble constructors.
#[derive(Debug, Clone, Default)]
pub struct EnsembleConfig {
    pub fi: FiConfig,
    /// Cap on the number of options constructed.
    pub max_options: Option<usize>,
}

/// Decomposes a compositional problem into goal-conditioned options and
/// aggregates them into a goal kernel: one feasibility-iteration solve per
/// non-default affordance tuple per region interior and base mode, with
/// every other tuple constrained away so the region's default dynamics are
/// guaranteed during option execution.
pub fn ensemble_solve(c: &Ctmdp, cfg: &EnsembleConfig) -> Result<GoalKernel> {
    build_goal_kernel(c, OptionSetKind::Affordance, cfg)
}

/// Constructs either the affordance option set (one option per non-default
/// tuple) or the state-action option set (one point-option per base
/// state-action).
pub fn option_sets(c: &Ctmdp, kind: OptionSetKind, cfg: &EnsembleConfig) -> Result<GoalKernel> {
    build_goal_kernel(c, kind, cfg)
}

fn build_goal_kernel(c: &Ctmdp, kind: OptionSetKind, cfg: &EnsembleConfig) -> Result<GoalKernel> {
    c.validate()?;
    let nx = c.bl.kernel.num_states();
    let na = c.bl.kernel.num_actions();
    let n_modes = c.bl.kernel.num_modes();
    let n_hl = c.hl.len();
    let regions = identify_regions(&c.affordance, nx, na)?;
    let sentinel = vec![usize::MAX; n_hl.max(1)];

    // per-(x, a) induced vector, resolved unconditionally
    let mut alpha_at: Vec<Vec<usize>> = Vec::with_capacity(nx * na);
    for x in 0..nx {
        for a in 0..na {
            alpha_at.push(
                c.affordance
                    .action_vector(&sentinel, x, a)
                    .expect("deterministic affordance"),
            );
        }
    }

    let bl_constraint = c
        .constraint
        .bl_factor()
        .cloned()
        .unwrap_or_else(|| ConstraintFunction::free(nx, na));

    let mut options: Vec<PlanOption> = Vec::new();
    for region in regions.iter().filter(|r| r.has_interior(na)) {
        // goal tuples relative to this region's defaults
        let mut tuples: Vec<GoalTuple> = Vec::new();
        for x in 0..nx {
            for a in 0..na {
                let alpha = &alpha_at[x * na + a];
                let include = match kind {
                    OptionSetKind::Affordance => alpha != &region.default_alpha,
                    OptionSetKind::StateAction => true,
                };
                if include {
                    tuples.push(GoalTuple {
                        x,
                        a,
                        alpha: alpha.clone(),
                        prob: 1.0,
                    });
                }
            }
        }
        if let Some(cap) = cfg.max_options {
            if (options.len() + tuples.len() * n_modes) > cap {
                return Err(Error::CapExceeded {
                    required: (options.len() + tuples.len() * n_modes) as u128,
                    cap: cap as u128,
                });
            }
        }
        for mode in 0..n_modes {
            let kernel = c.bl.kernel.clamp_mode(mode)?;
            for tuple in &tuples {
                // hard-constrain every other non-default tuple (homogeneity)
                let mut constraint = bl_constraint.clone();
                for x in 0..nx {
                    for a in 0..na {
                        if (x, a) != (tuple.x, tuple.a)
                            && alpha_at[x * na + a] != region.default_alpha
                        {
                            constraint.set(x, a, 0.0);
                        }
                    }
                }
                let mut goal = GoalFunction::zero(nx, na);
                goal.set(tuple.x, tuple.a, tuple.prob.min(1.0));
                let tmdp = Tmdp::new(kernel.clone(), goal, constraint)?;
                let sol = feasibility_iteration(&tmdp, &cfg.fi)?;
                let horizon = sol.stok.horizon.max(1);
                let bl_pred = bl_spk(&tmdp, &sol, horizon.saturating_sub(1))?;
                let option = make_option(&sol, &tmdp.goal, &tmdp.constraint, options.len());
                options.push(PlanOption {
                    id: options.len(),
                    mode,
                    region: region.id,
                    goal: tuple.clone(),
                    option,
                    bl_pred,
                    tmdp,
                });
            }
        }
    }

    // per-(space, region) prediction kernels and event functions, sized to
    // the deepest option horizon
    let max_t = options
        .iter()
        .map(|o| o.option.stok.horizon)
        .max()
        .unwrap_or(1);
    let mut spks = BTreeMap::new();
    let mut events = BTreeMap::new();
    for region in &regions {
        for (k, space) in c.hl.iter().enumerate() {
            let default_action = *region.default_alpha.get(k).unwrap_or(&0);
            let goal = c.goal.factors.iter().find_map(|f| match f.space {
                SpaceRef::Hl(i) if i == k => Some(&f.table),
                _ => None,
            });
            let constraint = c.constraint.hl_factor(k);
            let ev =
                hl_event_functions(&space.kernel, default_action, goal, constraint, None, max_t)?;
            let absorbing: Vec<usize> = (0..space.kernel.num_states())
                .filter(|&z| {
                    let g = goal.map(|g| g.value(z, default_action)).unwrap_or(0.0);
                    let cns = constraint
                        .map(|cf| cf.value(z, default_action))
                        .unwrap_or(1.0);
                    (1.0 - g) * cns < 1.0
                })
                .collect();
            let s = spk(&space.kernel, default_action, &absorbing, max_t)?;
            spks.insert((k, region.id), s);
            events.insert((k, region.id), ev);
        }
    }

    Ok(GoalKernel {
        ctmdp: c.clone(),
        options,
        regions,
        spks,
        events,
        cache: Mutex::new(BTreeMap::new()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{AffordanceFactor, AffordanceFunction, ModeFunction};
    use crate::tmdp::{
        ConstraintFactor, GoalFactor, SeparableConstraint, SeparableGoal, SpaceDef,
    };

    fn corridor_kernel(n: usize) -> TransitionKernel {
        TransitionKernel::deterministic(n, 2, |s, a| {
            if a == 1 {
                (s + 1).min(n - 1)
            } else {
                s.saturating_sub(1)
            }
        })
    }

    /// Hydration-style countdown: action 0 decrements, action 1 refills.
    fn countdown_kernel(levels: usize) -> TransitionKernel {
        TransitionKernel::deterministic(levels, 2, |y, alpha| {
            if alpha == 1 {
                levels - 1
            } else {
                y.saturating_sub(1)
            }
        })
    }

    #[test]
    fn constant_affordance_yields_single_region() {
        let f = AffordanceFunction::new(vec![AffordanceFactor::new(0, 2, 0)]).unwrap();
        let regions = identify_regions(&f, 4, 2).unwrap();
        assert_eq!(regions.len(), 1);
        assert_eq!(regions[0].members.len(), 8);
    }

    #[test]
    fn goal_tuples_form_singleton_regions() {
        let mut factor = AffordanceFactor::new(0, 2, 0);
        factor.set(3, 1, 1);
        let f = AffordanceFunction::new(vec![factor]).unwrap();
        let regions = identify_regions(&f, 4, 2).unwrap();
        assert_eq!(regions.len(), 2);
        assert_eq!(regions[0].members.len(), 7);
        assert_eq!(regions[1].members, vec![(3, 1)]);
        assert!(regions[0].has_interior(2));
        assert!(!regions[1].has_interior(2));
    }

    #[test]
    fn spk_static_kernel_is_identity_for_all_t() {
        let k = TransitionKernel::deterministic(4, 2, |z, _| z);
        let s = spk(&k, 0, &[], 5).unwrap();
        for t in 0..=5 {
            for z in 0..4 {
                assert_eq!(s.dist(z, t), &[(z, 1.0)]);
            }
        }
    }

    #[test]
    fn spk_countdown_two_steps() {
        let k = countdown_kernel(5);
        let s = spk(&k, 0, &[0], 4).unwrap();
        assert_eq!(s.dist(3, 2), &[(1, 1.0)]);
        assert_eq!(s.dist(3, 0), &[(3, 1.0)]); // t = 0 identity
        assert_eq!(s.dist(1, 3), &[(0, 1.0)]); // absorbed at death
    }

    #[test]
    fn hl_events_no_constraints_never_fire() {
        let k = TransitionKernel::deterministic(3, 1, |z, _| z);
        let ev = hl_event_functions(&k, 0, None, None, None, 6).unwrap();
        for z in 0..3 {
            for t in 0..=6 {
                assert_eq!(ev.comp_cef(z, t), 1.0);
            }
            assert!(ev.event_free(z));
        }
    }

    #[test]
    fn hl_events_countdown_death() {
        let k = countdown_kernel(5);
        let mut c = ConstraintFunction::free(5, 2);
        c.set(0, 0, 0.0);
        let ev = hl_event_functions(&k, 0, None, Some(&c), None, 8).unwrap();
        // from y = 3 the first event is at exactly t = 3
        for t in 0..3 {
            assert_eq!(ev.cef(3, t), 0.0, "no event before the countdown ends");
        }
        assert_eq!(ev.cef(3, 3), 1.0);
        assert_eq!(ev.stef(3, 3), &[(0, 1.0)]);
    }

    fn grid_hydration_ctmdp(grid: usize, levels: usize) -> Ctmdp {
        // corridor of cells, hydration counts down, lake at cell 1
        let bl = corridor_kernel(grid);
        let hy = countdown_kernel(levels);
        let mut factor = AffordanceFactor::new(0, 2, 0);
        factor.set(1, 0, 1); // drinking: action 0 at cell 1 refills
        let f = AffordanceFunction::new(vec![factor]).unwrap();
        let mut death = ConstraintFunction::free(levels, 2);
        death.set(0, 0, 0.0);
        death.set(0, 1, 0.0);
        let mut goal = GoalFunction::zero(grid, 2);
        goal.set(grid - 1, 1, 1.0);
        Ctmdp {
            hl: vec![SpaceDef {
                name: "hydration".into(),
                kernel: hy,
            }],
            bl: SpaceDef {
                name: "grid".into(),
                kernel: bl,
            },
            affordance: f,
            mode: ModeFunction::constant(0),
            goal: SeparableGoal {
                factors: vec![GoalFactor {
                    space: SpaceRef::Bl,
                    table: goal,
                }],
            },
            constraint: SeparableConstraint {
                factors: vec![ConstraintFactor {
                    space: SpaceRef::Hl(0),
                    table: death,
                }],
            },
            start: vec![levels - 1, 0],
        }
    }

    #[test]
    fn factorized_stok_matches_brute_force_with_death() {
        // 4-cell corridor x 5-level hydration, goal at the right end,
        // death when hydration hits zero
        let c = grid_hydration_ctmdp(4, 5);
        let (product, layout) = c.product_tmdp(None).unwrap();
        let brute = feasibility_iteration(&product, &FiConfig::default()).unwrap();

        // reduced base-level problem for the goal tuple (3, 1), other
        // tuples (the lake) constrained away
        let bl_kernel = corridor_kernel(4);
        let mut goal = GoalFunction::zero(4, 2);
        goal.set(3, 1, 1.0);
        let mut constraint = ConstraintFunction::free(4, 2);
        constraint.set(1, 0, 0.0); // lake tuple
        let bl = Tmdp::new(bl_kernel, goal, constraint).unwrap();
        let sol = feasibility_iteration(&bl, &FiConfig::default()).unwrap();

        let hy = countdown_kernel(5);
        let mut death = ConstraintFunction::free(5, 2);
        death.set(0, 0, 0.0);
        death.set(0, 1, 0.0);
        let max_t = sol.stok.horizon;
        let ev = hl_event_functions(&hy, 0, None, Some(&death), None, max_t).unwrap();
        let pred = spk(&hy, 0, &[0], max_t).unwrap();

        // start with plenty of water: factorization must match brute force
        let start = vec![4usize, 0usize];
        let fs = factorized_stok(&bl, &sol, &[&pred], &[&ev], &start).unwrap();
        let idx = layout.index(&start);
        assert!(
            fs.max_abs_diff_vs(&brute.stok, idx) < 1e-10,
            "death-free start mismatch: {}",
            fs.max_abs_diff_vs(&brute.stok, idx)
        );
        assert!((fs.total_mass() - 1.0).abs() < 1e-12);

        // start with too little water: the countdown kills the option
        let start = vec![2usize, 0usize];
        let fs = factorized_stok(&bl, &sol, &[&pred], &[&ev], &start).unwrap();
        let idx = layout.index(&start);
        assert!(
            fs.max_abs_diff_vs(&brute.stok, idx) < 1e-10,
            "death start mismatch: {}",
            fs.max_abs_diff_vs(&brute.stok, idx)
        );
        assert!((fs.total_mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn factorized_stok_fast_path_static_logic() {
        // stochastic 3-cell base, static 2-bit logic, no high-level events
        let bl_kernel = TransitionKernel::from_rows(3, 2, 1, |s, a, _| {
            let fwd = (s + 1).min(2);
            let bwd = s.saturating_sub(1);
            let tgt = if a == 1 { fwd } else { bwd };
            if tgt == s {
                vec![(s, 1.0)]
            } else {
                vec![(tgt, 0.9), (s, 0.1)]
            }
        })
        .unwrap();
        let logic = TransitionKernel::deterministic(4, 2, |z, alpha| {
            if alpha == 1 {
                z | 1
            } else {
                z
            }
        });
        let mut goal = GoalFunction::zero(3, 2);
        goal.set(2, 1, 1.0);
        let bl = Tmdp::new(bl_kernel, goal, ConstraintFunction::free(3, 2)).unwrap();
        let sol = feasibility_iteration(&bl, &FiConfig::default()).unwrap();
        let max_t = sol.stok.horizon;
        let ev = hl_event_functions(&logic, 0, None, None, None, max_t).unwrap();
        let pred = spk(&logic, 0, &[], max_t).unwrap();
        let start = vec![2usize, 0usize];
        let fs = factorized_stok(&bl, &sol, &[&pred], &[&ev], &start).unwrap();
        // static logic: the product STOK is the base STOK at fixed z
        let layout = ProductLayout::new(&[4], 3);
        for (xf, t, p) in sol.stok.success_atoms(0) {
            let s = layout.index(&[2, xf]);
            let got = fs
                .success_atoms()
                .find(|&(si, ti, _)| si == s && ti == t)
                .map(|(_, _, p)| p)
                .unwrap_or(0.0);
            assert!((got - p).abs() < 1e-12);
        }
    }

    #[test]
    fn ensemble_and_goal_kernel_conserve_mass() {
        let c = grid_hydration_ctmdp(4, 5);
        let gk = ensemble_solve(&c, &EnsembleConfig::default()).unwrap();
        // two tuples: the lake (1, 0) and the goal (3, 1)
        assert_eq!(gk.options.len(), 2);
        for opt in &gk.options {
            let out = gk.apply(&[4, 0], 0, opt.id).unwrap();
            assert!(
                (out.total_mass() - 1.0).abs() < 1e-9,
                "option {} leaks mass: {}",
                opt.id,
                out.total_mass()
            );
        }
        // drinking at the lake refills hydration and advances the clock by
        // travel + 1
        let lake = gk
            .options
            .iter()
            .find(|o| o.goal.x == 1 && o.goal.a == 0)
            .unwrap();
        let out = gk.apply(&[3, 0], 0, lake.id).unwrap();
        assert_eq!(out.success.len(), 1);
        let (sv, t, p) = &out.success[0];
        assert_eq!(sv, &vec![4, 1]); // refilled, lake cell
        assert_eq!(*t, 2); // one travel step + boundary step
        assert!((p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn goal_kernel_immediate_failure_cases() {
        let c = grid_hydration_ctmdp(4, 5);
        let gk = ensemble_solve(&c, &EnsembleConfig::default()).unwrap();
        let goal_opt = gk.options.iter().find(|o| o.goal.x == 3).unwrap();
        // starting dead: immediate high-level event
        let out = gk.apply(&[0, 0], 0, goal_opt.id).unwrap();
        assert!(out.success.is_empty());
        assert!((out.failure_mass() - 1.0).abs() < 1e-12);
    }
}
