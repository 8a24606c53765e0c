//! Task MDPs: transition kernels paired with goal and constraint functions.
//!
//! A goal function gives the probability that a goal is satisfied at a
//! state-action; a constraint function gives the probability `f_c` that no
//! constraint is violated there (`f_c = 0` is a hard constraint, `f_c = 1`
//! free space). Their products form the achievement function
//! `f_1 = f_g * f_c` and the continuation function `f_2 = (1 - f_g) * f_c`,
//! the two coefficients of every Bellman recursion in this crate.
//!
//! High-dimensional problems keep goals and constraints in separable
//! per-space factors; goals recombine as `1 - prod(1 - f_k)` and
//! constraints as a plain product, so a violation in one subsystem is a
//! violation of the whole product space.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::kernels::{
    compose_kernels, AffordanceFunction, ModeFunction, ProductLayout, TransitionKernel,
};
use crate::{Error, Result};

/// Probability a goal is satisfied, per base state-action. Sparse over a
/// default of zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalFunction {
    pub num_states: usize,
    pub num_actions: usize,
    entries: BTreeMap<(usize, usize), f64>,
}

impl GoalFunction {
    pub fn zero(num_states: usize, num_actions: usize) -> Self {
        Self {
            num_states,
            num_actions,
            entries: BTreeMap::new(),
        }
    }

    pub fn set(&mut self, x: usize, a: usize, p: f64) {
        assert!(x < self.num_states && a < self.num_actions);
        assert!((0.0..=1.0).contains(&p), "goal probability out of [0,1]");
        if p == 0.0 {
            self.entries.remove(&(x, a));
        } else {
            self.entries.insert((x, a), p);
        }
    }

    /// Sets the same probability for every action at `x`.
    pub fn set_state(&mut self, x: usize, p: f64) {
        for a in 0..self.num_actions {
            self.set(x, a, p);
        }
    }

    pub fn value(&self, x: usize, a: usize) -> f64 {
        self.entries.get(&(x, a)).copied().unwrap_or(0.0)
    }

    /// State-actions with a positive goal probability.
    pub fn support(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.entries.iter().map(|(&(x, a), &p)| (x, a, p))
    }

    pub fn is_zero(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Probability `f_c` that no constraint is violated, per state-action.
/// Sparse over a default of one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintFunction {
    pub num_states: usize,
    pub num_actions: usize,
    entries: BTreeMap<(usize, usize), f64>,
}

impl ConstraintFunction {
    pub fn free(num_states: usize, num_actions: usize) -> Self {
        Self {
            num_states,
            num_actions,
            entries: BTreeMap::new(),
        }
    }

    pub fn set(&mut self, x: usize, a: usize, p: f64) {
        assert!(x < self.num_states && a < self.num_actions);
        assert!((0.0..=1.0).contains(&p), "constraint value out of [0,1]");
        if p == 1.0 {
            self.entries.remove(&(x, a));
        } else {
            self.entries.insert((x, a), p);
        }
    }

    /// Hard constraint over every action at `x`.
    pub fn block_state(&mut self, x: usize) {
        for a in 0..self.num_actions {
            self.set(x, a, 0.0);
        }
    }

    pub fn value(&self, x: usize, a: usize) -> f64 {
        self.entries.get(&(x, a)).copied().unwrap_or(1.0)
    }

    /// State-actions with `f_c < 1`.
    pub fn support(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.entries.iter().map(|(&(x, a), &p)| (x, a, p))
    }
}

/// A task MDP: kernel, goal function, constraint function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tmdp {
    pub kernel: TransitionKernel,
    pub goal: GoalFunction,
    pub constraint: ConstraintFunction,
}

impl Tmdp {
    pub fn new(kernel: TransitionKernel, goal: GoalFunction, constraint: ConstraintFunction) -> Result<Self> {
        if kernel.has_modes() {
            return Err(Error::DimensionMismatch(
                "task MDP kernels must be mode-free; clamp the mode first".into(),
            ));
        }
        if goal.num_states != kernel.num_states() || goal.num_actions != kernel.num_actions() {
            return Err(Error::DimensionMismatch(format!(
                "goal function sized {}x{}, kernel {}x{}",
                goal.num_states,
                goal.num_actions,
                kernel.num_states(),
                kernel.num_actions()
            )));
        }
        if constraint.num_states != kernel.num_states() || constraint.num_actions != kernel.num_actions()
        {
            return Err(Error::DimensionMismatch(format!(
                "constraint function sized {}x{}, kernel {}x{}",
                constraint.num_states,
                constraint.num_actions,
                kernel.num_states(),
                kernel.num_actions()
            )));
        }
        Ok(Self {
            kernel,
            goal,
            constraint,
        })
    }

    /// Achievement function `f_1 = f_g * f_c`.
    pub fn achievement(&self, x: usize, a: usize) -> f64 {
        self.goal.value(x, a) * self.constraint.value(x, a)
    }

    /// Continuation function `f_2 = (1 - f_g) * f_c`.
    pub fn continuation(&self, x: usize, a: usize) -> f64 {
        (1.0 - self.goal.value(x, a)) * self.constraint.value(x, a)
    }
}

/// Which component space a separable factor lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SpaceRef {
    Hl(usize),
    Bl,
}

/// One separable goal factor: a goal function over a single space's
/// state-actions (high-level factors are indexed by induced actions).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalFactor {
    pub space: SpaceRef,
    pub table: GoalFunction,
}

/// One separable constraint factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintFactor {
    pub space: SpaceRef,
    pub table: ConstraintFunction,
}

/// Separable goal: recombines as `1 - prod_k (1 - f_k)`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SeparableGoal {
    pub factors: Vec<GoalFactor>,
}

impl SeparableGoal {
    pub fn value(&self, hl_states: &[usize], hl_actions: &[usize], x: usize, a: usize) -> f64 {
        let mut miss = 1.0;
        for f in &self.factors {
            let v = match f.space {
                SpaceRef::Hl(k) => f.table.value(hl_states[k], hl_actions[k]),
                SpaceRef::Bl => f.table.value(x, a),
            };
            miss *= 1.0 - v;
        }
        1.0 - miss
    }
}

/// Separable constraint: recombines as a product, so one violated factor
/// violates the whole product space.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SeparableConstraint {
    pub factors: Vec<ConstraintFactor>,
}

impl SeparableConstraint {
    pub fn value(&self, hl_states: &[usize], hl_actions: &[usize], x: usize, a: usize) -> f64 {
        let mut prod = 1.0;
        for f in &self.factors {
            prod *= match f.space {
                SpaceRef::Hl(k) => f.table.value(hl_states[k], hl_actions[k]),
                SpaceRef::Bl => f.table.value(x, a),
            };
        }
        prod
    }

    /// The base-level factor, if one is present.
    pub fn bl_factor(&self) -> Option<&ConstraintFunction> {
        self.factors.iter().find_map(|f| match f.space {
            SpaceRef::Bl => Some(&f.table),
            _ => None,
        })
    }

    /// The factor for high-level space `k`, if present.
    pub fn hl_factor(&self, k: usize) -> Option<&ConstraintFunction> {
        self.factors.iter().find_map(|f| match f.space {
            SpaceRef::Hl(i) if i == k => Some(&f.table),
            _ => None,
        })
    }
}

/// A state-only goal over the product space, used by the planner to credit
/// task achievement at tree nodes. Recombines like a separable goal.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TaskGoal {
    /// Per-space state tables `(space, value per state)`.
    pub factors: Vec<(SpaceRef, Vec<f64>)>,
}

impl TaskGoal {
    pub fn value(&self, hl_states: &[usize], x: usize) -> f64 {
        let mut miss = 1.0;
        for (space, table) in &self.factors {
            let v = match space {
                SpaceRef::Hl(k) => table[hl_states[*k]],
                SpaceRef::Bl => table[x],
            };
            miss *= 1.0 - v;
        }
        1.0 - miss
    }
}

/// One named component space of a compositional problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceDef {
    pub name: String,
    pub kernel: TransitionKernel,
}

/// A compositional task MDP: component kernels coupled by an affordance
/// function and a mode function, with separable goal and constraint
/// functions and a start vector `(z_1, .., z_n, x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ctmdp {
    pub hl: Vec<SpaceDef>,
    pub bl: SpaceDef,
    pub affordance: AffordanceFunction,
    pub mode: ModeFunction,
    pub goal: SeparableGoal,
    pub constraint: SeparableConstraint,
    pub start: Vec<usize>,
}

impl Ctmdp {
    pub fn layout(&self) -> ProductLayout {
        ProductLayout::new(
            &self.hl.iter().map(|s| s.kernel.num_states()).collect::<Vec<_>>(),
            self.bl.kernel.num_states(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.start.len() != self.hl.len() + 1 {
            return Err(Error::DimensionMismatch(format!(
                "start vector has {} components for {} spaces",
                self.start.len(),
                self.hl.len() + 1
            )));
        }
        for (k, s) in self.hl.iter().enumerate() {
            if self.start[k] >= s.kernel.num_states() {
                return Err(Error::InvalidIndex(format!(
                    "start[{k}] = {} out of space {} ({} states)",
                    self.start[k],
                    s.name,
                    s.kernel.num_states()
                )));
            }
            s.kernel.validate_stochastic(crate::STOCHASTIC_TOL)?;
        }
        if self.start[self.hl.len()] >= self.bl.kernel.num_states() {
            return Err(Error::InvalidIndex("base-level start out of range".into()));
        }
        self.bl.kernel.validate_stochastic(crate::STOCHASTIC_TOL)?;
        for f in &self.goal.factors {
            let (ns, na) = self.space_dims(f.space);
            if f.table.num_states != ns || f.table.num_actions != na {
                return Err(Error::DimensionMismatch(format!(
                    "goal factor on {:?} sized {}x{}, space is {}x{}",
                    f.space, f.table.num_states, f.table.num_actions, ns, na
                )));
            }
        }
        for f in &self.constraint.factors {
            let (ns, na) = self.space_dims(f.space);
            if f.table.num_states != ns || f.table.num_actions != na {
                return Err(Error::DimensionMismatch(format!(
                    "constraint factor on {:?} sized {}x{}, space is {}x{}",
                    f.space, f.table.num_states, f.table.num_actions, ns, na
                )));
            }
        }
        Ok(())
    }

    fn space_dims(&self, space: SpaceRef) -> (usize, usize) {
        match space {
            SpaceRef::Hl(k) => (self.hl[k].kernel.num_states(), self.hl[k].kernel.num_actions()),
            SpaceRef::Bl => (self.bl.kernel.num_states(), self.bl.kernel.num_actions()),
        }
    }

    /// High-level components of the start vector.
    pub fn hl_start(&self) -> &[usize] {
        &self.start[..self.hl.len()]
    }

    pub fn bl_start(&self) -> usize {
        self.start[self.hl.len()]
    }

    /// Multiplies the problem out into an explicit product-space task MDP.
    /// Requires a deterministic affordance function; this is the brute-force
    /// route used for desk-scale oracles, not a scalable solver.
    pub fn product_tmdp(&self, cap: Option<u128>) -> Result<(Tmdp, ProductLayout)> {
        self.validate()?;
        let hl_kernels: Vec<&TransitionKernel> = self.hl.iter().map(|s| &s.kernel).collect();
        let kernel = compose_kernels(
            &hl_kernels,
            Some(&self.affordance),
            if self.bl.kernel.has_modes() {
                Some(&self.mode)
            } else {
                None
            },
            &self.bl.kernel,
            cap,
        )?;
        let layout = self.layout();
        let n = layout.len();
        let na = self.bl.kernel.num_actions();
        let n_hl = self.hl.len();
        let mut goal = GoalFunction::zero(n, na);
        let mut constraint = ConstraintFunction::free(n, na);
        for s in 0..n {
            let svec = layout.vector(s);
            let (z, x) = (&svec[..n_hl], svec[n_hl]);
            for a in 0..na {
                let alpha = self.affordance.action_vector(z, x, a).ok_or_else(|| {
                    Error::Validation {
                        path: format!("affordance at (x={x}, a={a})"),
                        message: "product TMDP construction requires deterministic affordances".into(),
                    }
                })?;
                let g = self.goal.value(z, &alpha, x, a);
                let c = self.constraint.value(z, &alpha, x, a);
                if g != 0.0 {
                    goal.set(s, a, g);
                }
                if c != 1.0 {
                    constraint.set(s, a, c);
                }
            }
        }
        Ok((Tmdp::new(kernel, goal, constraint)?, layout))
    }
}

/// A non-default affordance tuple: the base state-action, the joint
/// high-level action vector it induces, and its probability under `F`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalTuple {
    pub x: usize,
    pub a: usize,
    pub alpha: Vec<usize>,
    pub prob: f64,
}

/// Enumerates the non-default `(alpha, x, a)` tuples in the support of an
/// affordance function, relative to the given default vector. Guarded
/// entries are resolved with their guards satisfied.
pub fn goal_tuples_from_affordance(
    f: &AffordanceFunction,
    default_alpha: &[usize],
) -> Vec<GoalTuple> {
    let mut keys: Vec<(usize, usize)> = f
        .factors()
        .iter()
        .flat_map(|fac| fac.entries().map(|e| (e.x, e.a)))
        .collect();
    keys.sort_unstable();
    keys.dedup();
    let mut tuples = Vec::new();
    for (x, a) in keys {
        // resolve each factor at (x, a); synthesize a context satisfying the
        // first guarded entry per factor when present
        let mut alpha = Vec::with_capacity(f.factors().len());
        let mut prob = 1.0;
        for fac in f.factors() {
            let mut ctx: Vec<usize> = vec![usize::MAX; f.factors().len()];
            let mut chosen: Option<&crate::kernels::AffordanceEntry> = None;
            for e in fac.entries() {
                if e.x == x && e.a == a {
                    chosen = Some(e);
                    break;
                }
            }
            let out = match chosen {
                Some(e) => {
                    for &(sp, st) in &e.guard {
                        ctx[sp] = st;
                    }
                    e.out.clone()
                }
                None => vec![(fac.default_action, 1.0)],
            };
            let _ = ctx;
            // deterministic by construction unless stochastic was allowed;
            // take the most probable output as the tuple's action
            let &(best, p) = out
                .iter()
                .max_by(|l, r| l.1.partial_cmp(&r.1).unwrap())
                .expect("non-empty output");
            alpha.push(best);
            prob *= p;
        }
        if alpha != default_alpha {
            tuples.push(GoalTuple { x, a, alpha, prob });
        }
    }
    tuples
}

/// Converts an affordance function into one goal function per non-default
/// tuple in its support (with respect to the factor defaults). Errors if
/// the support is empty.
pub fn goal_functions_from_affordance(
    f: &AffordanceFunction,
    num_states: usize,
    num_actions: usize,
) -> Result<Vec<GoalFunction>> {
    let tuples = goal_tuples_from_affordance(f, &f.default_vector());
    if tuples.is_empty() {
        return Err(Error::Validation {
            path: "affordance function".into(),
            message: "no non-default outputs to convert into goal functions".into(),
        });
    }
    Ok(tuples
        .iter()
        .map(|t| {
            let mut g = GoalFunction::zero(num_states, num_actions);
            g.set(t.x, t.a, t.prob);
            g
        })
        .collect())
}

/// Returns `base` with every non-kept goal's support turned into a hard
/// constraint, so an option for one goal treats the others as obstacles.
pub fn constraint_with_other_goals(
    base: &ConstraintFunction,
    goals: &[GoalFunction],
    keep: usize,
) -> ConstraintFunction {
    let mut out = base.clone();
    for (i, g) in goals.iter().enumerate() {
        if i == keep {
            continue;
        }
        for (x, a, _) in g.support() {
            out.set(x, a, 0.0);
        }
    }
    out
}

/// Checks the homogeneity precondition of the decomposition theorem: every
/// base state-action inducing non-default variables, other than the goal
/// tuple itself, must be zeroed by the constraint function.
pub fn validate_homogeneity(
    f: &AffordanceFunction,
    default_alpha: &[usize],
    goal: (usize, usize),
    f_c: &ConstraintFunction,
) -> Result<()> {
    for t in goal_tuples_from_affordance(f, default_alpha) {
        if (t.x, t.a) == goal {
            continue;
        }
        if f_c.value(t.x, t.a) != 0.0 {
            return Err(Error::Homogeneity(format!(
                "state-action (x={}, a={}) induces non-default variables but is not constrained",
                t.x, t.a
            )));
        }
    }
    Ok(())
}

/// Homogeneity repair: returns `base` with every non-default-inducing
/// state-action other than the goal tuple turned into a hard constraint.
pub fn augment_constraints_for_homogeneity(
    f: &AffordanceFunction,
    default_alpha: &[usize],
    goal: (usize, usize),
    base: &ConstraintFunction,
) -> ConstraintFunction {
    let mut out = base.clone();
    for t in goal_tuples_from_affordance(f, default_alpha) {
        if (t.x, t.a) != goal {
            out.set(t.x, t.a, 0.0);
        }
    }
    out
}
