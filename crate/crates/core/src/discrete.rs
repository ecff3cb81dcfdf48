//! Exact finite-state, finite-action, finite-noise discrete-time mean-field
//! control with common noise, solved by exhaustive policy enumeration.
//!
//! The "state" of the dynamic program is the pair (step, common-outcome
//! history), whose node carries the exact population distribution over S —
//! the same measure argument the continuous value function takes. Two policy
//! classes are enumerable:
//! - `CommonHistory`: one action per (step, history) node — rules adapted to
//!   the common noise only;
//! - `Feedback`: one action per (node, state) — idiosyncratic randomness is
//!   integrated out by the measure flow, so this is the maximal
//!   implementable class here.
//!
//! Everything is computed by enumeration with exact forward measure
//! propagation, which makes the dynamic-programming defect a machine-precision
//! certificate rather than a statistical one.

use crate::error::{Error, Result};
use crate::rng::{Role, Stream};
use serde::{Deserialize, Serialize};

/// Enumeration guard: total policy-table count per class.
pub const ENUMERATION_GUARD: u128 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyClass {
    CommonHistory,
    Feedback,
}

/// A finite mean-field control instance. The transition law mixes a tabular
/// kernel with the current population distribution, and rewards may couple
/// linearly to a statistic of the distribution:
///
/// ```text
/// T(s, a, μ, c)(s') = (1−λ) base[s][a][c][s'] + λ μ(s')
/// r(s, a, μ)        = reward_base[s][a] + reward_coupling · E_μ[φ]
/// g(s, μ)           = terminal_base[s] + terminal_coupling · E_μ[φ]
/// ```
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscreteProblem {
    pub states: usize,
    pub actions: usize,
    pub horizon: usize,
    pub common_probs: Vec<f64>,
    pub initial: Vec<f64>,
    /// Flattened `[s][a][c][s']`.
    pub transition_base: Vec<f64>,
    pub mean_field_mix: f64,
    /// Flattened `[s][a]`.
    pub reward_base: Vec<f64>,
    pub reward_coupling: f64,
    /// The statistic φ, one value per state.
    pub state_statistic: Vec<f64>,
    pub terminal_base: Vec<f64>,
    pub terminal_coupling: f64,
}

impl DiscreteProblem {
    pub fn validate(&self) -> Result<()> {
        let (s, a, c) = (self.states, self.actions, self.common_probs.len());
        if s == 0 || a == 0 || c == 0 || self.horizon == 0 {
            return Err(Error::InvalidArgument(
                "discrete problem needs states, actions, outcomes, horizon >= 1".into(),
            ));
        }
        let norm_ok = |v: &[f64]| (v.iter().sum::<f64>() - 1.0).abs() <= 1e-12
            && v.iter().all(|&x| x >= -1e-15);
        if !norm_ok(&self.common_probs) {
            return Err(Error::InvalidArgument("common_probs not a distribution".into()));
        }
        if self.initial.len() != s || !norm_ok(&self.initial) {
            return Err(Error::InvalidArgument("initial not a distribution over S".into()));
        }
        if self.transition_base.len() != s * a * c * s {
            return Err(Error::DimensionMismatch {
                context: "transition_base",
                expected: s * a * c * s,
                got: self.transition_base.len(),
            });
        }
        for si in 0..s {
            for ai in 0..a {
                for ci in 0..c {
                    let row = self.kernel_row(si, ai, ci);
                    if !norm_ok(row) {
                        return Err(Error::InvalidArgument(format!(
                            "transition row ({si},{ai},{ci}) not a distribution"
                        )));
                    }
                }
            }
        }
        if !(0.0..=1.0).contains(&self.mean_field_mix) {
            return Err(Error::InvalidArgument("mean_field_mix must be in [0,1]".into()));
        }
        if self.reward_base.len() != s * a
            || self.terminal_base.len() != s
            || self.state_statistic.len() != s
        {
            return Err(Error::InvalidArgument("reward table shape mismatch".into()));
        }
        Ok(())
    }

    fn kernel_row(&self, s: usize, a: usize, c: usize) -> &[f64] {
        let idx = ((s * self.actions + a) * self.common_probs.len() + c) * self.states;
        &self.transition_base[idx..idx + self.states]
    }

    fn statistic(&self, mu: &[f64]) -> f64 {
        mu.iter()
            .zip(&self.state_statistic)
            .map(|(m, v)| m * v)
            .sum()
    }

    pub fn running_reward(&self, s: usize, a: usize, mu: &[f64]) -> f64 {
        self.reward_base[s * self.actions + a] + self.reward_coupling * self.statistic(mu)
    }

    pub fn terminal_reward(&self, s: usize, mu: &[f64]) -> f64 {
        self.terminal_base[s] + self.terminal_coupling * self.statistic(mu)
    }

    /// Next-state probability vector for one (state, action, outcome) given
    /// the current distribution.
    pub fn transition(&self, s: usize, a: usize, mu: &[f64], c: usize) -> Vec<f64> {
        let lam = self.mean_field_mix;
        self.kernel_row(s, a, c)
            .iter()
            .zip(mu)
            .map(|(b, m)| (1.0 - lam) * b + lam * m)
            .collect()
    }

    /// Decision nodes strictly before `upto` steps: one per common-outcome
    /// history.
    fn nodes_before(&self, upto: usize) -> usize {
        let c = self.common_probs.len();
        let mut total = 0usize;
        let mut level = 1usize;
        for _ in 0..upto {
            total += level;
            level *= c;
        }
        total
    }

    fn slots(&self, class: PolicyClass, upto: usize) -> usize {
        match class {
            PolicyClass::CommonHistory => self.nodes_before(upto),
            PolicyClass::Feedback => self.nodes_before(upto) * self.states,
        }
    }

    pub fn table_count(&self, class: PolicyClass) -> u128 {
        (self.actions as u128).saturating_pow(self.slots(class, self.horizon) as u32)
    }

    pub fn check_guard(&self, class: PolicyClass) -> Result<()> {
        let size = self.table_count(class);
        if size > ENUMERATION_GUARD {
            return Err(Error::EnumerationGuard { size });
        }
        Ok(())
    }

    /// The same instance with the first `k_star` steps removed (rewards and
    /// kernels are time-homogeneous) and a new initial distribution.
    fn tail_problem(&self, k_star: usize, initial: Vec<f64>) -> DiscreteProblem {
        DiscreteProblem {
            horizon: self.horizon - k_star,
            initial,
            ..self.clone()
        }
    }
}

/// One node of the exact measure flow.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeasureNode {
    pub time: usize,
    pub history: Vec<usize>,
    pub distribution: Vec<f64>,
}

/// A policy table: action per slot, slots ordered by node id (breadth-first
/// over histories), then state for the feedback class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyTable {
    pub class: PolicyClass,
    pub actions: Vec<u8>,
}

impl PolicyTable {
    fn from_index(problem: &DiscreteProblem, class: PolicyClass, mut idx: u128, upto: usize) -> Self {
        let slots = problem.slots(class, upto);
        let a = problem.actions as u128;
        let mut actions = vec![0u8; slots];
        // Most-significant digit first: lexicographic order in the table.
        for slot in (0..slots).rev() {
            actions[slot] = (idx % a) as u8;
            idx /= a;
        }
        PolicyTable { class, actions }
    }

    fn action(&self, problem: &DiscreteProblem, node: usize, state: usize) -> usize {
        match self.class {
            PolicyClass::CommonHistory => self.actions[node] as usize,
            PolicyClass::Feedback => self.actions[node * problem.states + state] as usize,
        }
    }
}

/// Exact expected total reward of a policy table, by forward propagation of
/// the population distribution along every common-outcome history.
pub fn evaluate_policy(problem: &DiscreteProblem, table: &PolicyTable) -> f64 {
    fn recurse(
        p: &DiscreteProblem,
        table: &PolicyTable,
        k: usize,
        node: usize,
        level_offset: usize,
        h: usize,
        mu: &[f64],
    ) -> f64 {
        if k == p.horizon {
            return mu
                .iter()
                .enumerate()
                .map(|(s, m)| m * p.terminal_reward(s, mu))
                .sum();
        }
        let immediate: f64 = mu
            .iter()
            .enumerate()
            .map(|(s, m)| m * p.running_reward(s, table.action(p, node, s), mu))
            .sum();
        let c_count = p.common_probs.len();
        let next_offset = level_offset + c_count.pow(k as u32);
        let mut total = immediate;
        for (c, pc) in p.common_probs.iter().enumerate() {
            let mut mu_next = vec![0.0; p.states];
            for (s, m) in mu.iter().enumerate() {
                if *m == 0.0 {
                    continue;
                }
                let row = p.transition(s, table.action(p, node, s), mu, c);
                for (sn, q) in row.iter().enumerate() {
                    mu_next[sn] += m * q;
                }
            }
            let h_next = h * c_count + c;
            total += pc
                * recurse(
                    p,
                    table,
                    k + 1,
                    next_offset + h_next,
                    next_offset,
                    h_next,
                    &mu_next,
                );
        }
        total
    }
    recurse(problem, table, 0, 0, 0, 0, &problem.initial)
}

/// Exact measure flow under a policy: every (step, history) node with its
/// distribution.
pub fn measure_flow(problem: &DiscreteProblem, table: &PolicyTable) -> Vec<MeasureNode> {
    let c_count = problem.common_probs.len();
    let mut out = Vec::new();
    let mut frontier: Vec<(usize, Vec<usize>, Vec<f64>)> =
        vec![(0, Vec::new(), problem.initial.clone())];
    let mut node_base = 0usize;
    for k in 0..=problem.horizon {
        for (h, hist, mu) in &frontier {
            let _ = h;
            out.push(MeasureNode {
                time: k,
                history: hist.clone(),
                distribution: mu.clone(),
            });
        }
        if k == problem.horizon {
            break;
        }
        let mut next = Vec::with_capacity(frontier.len() * c_count);
        for (h, hist, mu) in &frontier {
            let node = node_base + h;
            for c in 0..c_count {
                let mut mu_next = vec![0.0; problem.states];
                for (s, m) in mu.iter().enumerate() {
                    let row = problem.transition(s, table.action(problem, node, s), mu, c);
                    for (sn, q) in row.iter().enumerate() {
                        mu_next[sn] += m * q;
                    }
                }
                let mut hist_next = hist.clone();
                hist_next.push(c);
                next.push((h * c_count + c, hist_next, mu_next));
            }
        }
        node_base += frontier.len();
        frontier = next;
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExactSolution {
    pub value: f64,
    pub policy: PolicyTable,
    pub tables_enumerated: u128,
}

/// Exhaustive enumeration over the policy class; ties break toward the
/// lexicographically smallest table.
pub fn exact_value(problem: &DiscreteProblem, class: PolicyClass) -> Result<ExactSolution> {
    problem.validate()?;
    problem.check_guard(class)?;
    let count = problem.table_count(class);
    let mut best_value = f64::NEG_INFINITY;
    let mut best_table = None;
    for idx in 0..count {
        let table = PolicyTable::from_index(problem, class, idx, problem.horizon);
        let v = evaluate_policy(problem, &table);
        if v > best_value {
            best_value = v;
            best_table = Some(table);
        }
    }
    Ok(ExactSolution {
        value: best_value,
        policy: best_table.expect("at least one table"),
        tables_enumerated: count,
    })
}

/// Head propagation result: expected running reward accumulated before
/// `k_star` plus each level-`k_star` leaf (probability, distribution).
fn propagate_head(
    problem: &DiscreteProblem,
    head: &PolicyTable,
    k_star: usize,
) -> (f64, Vec<(f64, Vec<f64>)>) {
    let c_count = problem.common_probs.len();
    let mut reward = 0.0;
    let mut frontier: Vec<(usize, f64, Vec<f64>)> = vec![(0, 1.0, problem.initial.clone())];
    let mut node_base = 0usize;
    for k in 0..k_star {
        let mut next = Vec::with_capacity(frontier.len() * c_count);
        for (h, prob, mu) in &frontier {
            let node = node_base + h;
            let immediate: f64 = mu
                .iter()
                .enumerate()
                .map(|(s, m)| m * problem.running_reward(s, head.action(problem, node, s), mu))
                .sum();
            reward += prob * immediate;
            for (c, pc) in problem.common_probs.iter().enumerate() {
                let mut mu_next = vec![0.0; problem.states];
                for (s, m) in mu.iter().enumerate() {
                    let row = problem.transition(s, head.action(problem, node, s), mu, c);
                    for (sn, q) in row.iter().enumerate() {
                        mu_next[sn] += m * q;
                    }
                }
                next.push((h * c_count + c, prob * pc, mu_next));
            }
        }
        node_base += frontier.len();
        frontier = next;
        let _ = k;
    }
    (
        reward,
        frontier.into_iter().map(|(_, p, mu)| (p, mu)).collect(),
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DppCertificate {
    pub class: PolicyClass,
    pub split: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub defect: f64,
    /// Max over full tables of (full value − spliced-with-optimal value);
    /// nonpositive up to rounding when concatenation never hurts.
    pub concat_worst: f64,
    pub concat_ok: bool,
    pub tables_enumerated: u128,
}

/// Exact dynamic-programming certificate: compares the all-at-once optimal
/// value against head-policy enumeration plus exact continuation values at
/// the split, and verifies that replacing any policy's continuation with the
/// split-optimal one never lowers its value.
pub fn verify_dpp_exact(
    problem: &DiscreteProblem,
    k_star: usize,
    class: PolicyClass,
) -> Result<DppCertificate> {
    problem.validate()?;
    if k_star == 0 || k_star > problem.horizon {
        return Err(Error::InvalidArgument(format!(
            "split {k_star} must be in 1..={}",
            problem.horizon
        )));
    }
    problem.check_guard(class)?;
    let lhs = exact_value(problem, class)?;

    let head_slots = problem.slots(class, k_star);
    let head_count = (problem.actions as u128).saturating_pow(head_slots as u32);
    let mut rhs = f64::NEG_INFINITY;
    let mut spliced_values = Vec::with_capacity(head_count as usize);
    for idx in 0..head_count {
        let head = PolicyTable::from_index(problem, class, idx, k_star);
        let (head_reward, leaves) = propagate_head(problem, &head, k_star);
        let mut total = head_reward;
        for (prob, mu) in &leaves {
            if k_star == problem.horizon {
                total += prob
                    * mu.iter()
                        .enumerate()
                        .map(|(s, m)| m * problem.terminal_reward(s, mu))
                        .sum::<f64>();
            } else {
                let tail = problem.tail_problem(k_star, mu.clone());
                total += prob * exact_value(&tail, class)?.value;
            }
        }
        spliced_values.push(total);
        if total > rhs {
            rhs = total;
        }
    }
    let defect = (lhs.value - rhs).abs();

    // Concatenation: every full table's value is dominated by its head
    // spliced with the optimal continuation.
    let full_count = problem.table_count(class);
    let mut concat_worst = f64::NEG_INFINITY;
    let tail_slots = problem.slots(class, problem.horizon) - head_slots;
    let tail_count = (problem.actions as u128).saturating_pow(tail_slots as u32);
    for idx in 0..full_count {
        let table = PolicyTable::from_index(problem, class, idx, problem.horizon);
        let v = evaluate_policy(problem, &table);
        let head_idx = (idx / tail_count.max(1)) as usize;
        concat_worst = concat_worst.max(v - spliced_values[head_idx]);
    }
    Ok(DppCertificate {
        class,
        split: k_star,
        lhs: lhs.value,
        rhs,
        defect,
        concat_worst,
        concat_ok: concat_worst <= 1e-12,
        tables_enumerated: full_count,
    })
}

/// Deterministically randomized instance within the enumeration guard.
pub fn random_instance(seed: u64, index: u64) -> DiscreteProblem {
    let s = Stream::new(seed, Role::Instance, &[index]);
    let mut draw = 0u64;
    let mut next = |range: usize| -> usize {
        let v = (s.uniform(draw) * range as f64) as usize;
        draw += 1;
        v.min(range - 1)
    };
    // Shapes kept comfortably inside the guard for the feedback class.
    let configs: [(usize, usize, usize, usize); 4] = [
        (2, 2, 2, 2), // |S|, |A|, K, |C|
        (3, 2, 2, 2),
        (2, 3, 2, 2),
        (2, 2, 3, 1),
    ];
    let (states, actions, horizon, c_count) = configs[next(configs.len())];
    let unit = |i: u64| s.uniform(1000 + i);
    let normalize = |v: &mut Vec<f64>| {
        let total: f64 = v.iter().sum();
        for x in v.iter_mut() {
            *x /= total;
        }
    };
    let mut counter = 0u64;
    let mut rand_dist = |len: usize| -> Vec<f64> {
        let mut v: Vec<f64> = (0..len)
            .map(|_| {
                counter += 1;
                0.05 + unit(counter)
            })
            .collect();
        normalize(&mut v);
        v
    };
    let common_probs = rand_dist(c_count);
    let initial = rand_dist(states);
    let mut transition_base = Vec::with_capacity(states * actions * c_count * states);
    for _ in 0..states * actions * c_count {
        transition_base.extend(rand_dist(states));
    }
    counter += 1;
    let mean_field_mix = 0.5 * unit(counter);
    let reward_base: Vec<f64> = (0..states * actions)
        .map(|_| {
            counter += 1;
            unit(counter)
        })
        .collect();
    let state_statistic: Vec<f64> = (0..states)
        .map(|_| {
            counter += 1;
            2.0 * unit(counter) - 1.0
        })
        .collect();
    let terminal_base: Vec<f64> = (0..states)
        .map(|_| {
            counter += 1;
            unit(counter)
        })
        .collect();
    counter += 1;
    let reward_coupling = unit(counter) - 0.5;
    counter += 1;
    let terminal_coupling = unit(counter) - 0.5;
    DiscreteProblem {
        states,
        actions,
        horizon,
        common_probs,
        initial,
        transition_base,
        mean_field_mix,
        reward_base,
        reward_coupling,
        state_statistic,
        terminal_base,
        terminal_coupling,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_instance() -> DiscreteProblem {
        // 2 states, 1 action, K = 1, |C| = 2.
        DiscreteProblem {
            states: 2,
            actions: 1,
            horizon: 1,
            common_probs: vec![0.25, 0.75],
            initial: vec![0.5, 0.5],
            transition_base: vec![
                // s=0, a=0, c=0 / c=1
                0.9, 0.1, 0.2, 0.8, // s=1, a=0, c=0 / c=1
                0.5, 0.5, 0.3, 0.7,
            ],
            mean_field_mix: 0.0,
            reward_base: vec![1.0, 2.0],
            reward_coupling: 0.0,
            state_statistic: vec![0.0, 1.0],
            terminal_base: vec![0.0, 10.0],
            terminal_coupling: 0.0,
        }
    }

    #[test]
    fn hand_computed_single_step_value() {
        // value = Σ_c p(c) [ Σ_s ν(s)(r(s) + Σ_s' T(s,c)(s') g(s')) ]
        // running: 0.5·1 + 0.5·2 = 1.5 (no μ coupling, action fixed).
        // terminal after c=0: μ' = 0.5(0.9,0.1)+0.5(0.5,0.5) = (0.7,0.3) → 3.
        // after c=1: μ' = 0.5(0.2,0.8)+0.5(0.3,0.7) = (0.25,0.75) → 7.5.
        // total = 1.5 + 0.25·3 + 0.75·7.5 = 1.5 + 0.75 + 5.625 = 7.875.
        let p = tiny_instance();
        let sol = exact_value(&p, PolicyClass::CommonHistory).unwrap();
        assert!((sol.value - 7.875).abs() < 1e-12, "value {}", sol.value);
    }

    #[test]
    fn action_independent_rewards_tie() {
        let mut p = tiny_instance();
        p.actions = 2;
        p.transition_base = p
            .transition_base
            .chunks(4)
            .flat_map(|rows| {
                // duplicate each state's kernel for the second action
                let mut v = rows.to_vec();
                v.extend_from_slice(rows);
                v
            })
            .collect();
        p.reward_base = vec![1.0, 1.0, 2.0, 2.0];
        let sol = exact_value(&p, PolicyClass::Feedback).unwrap();
        // All tables tie; the lexicographically smallest (all zeros) wins.
        assert!(sol.policy.actions.iter().all(|&a| a == 0));
        let uncontrolled = evaluate_policy(
            &p,
            &PolicyTable {
                class: PolicyClass::Feedback,
                actions: vec![0; sol.policy.actions.len()],
            },
        );
        assert_eq!(sol.value, uncontrolled);
    }

    #[test]
    fn class_ordering_and_state_independent_equality() {
        for idx in 0..10u64 {
            let p = random_instance(42, idx);
            let a = exact_value(&p, PolicyClass::CommonHistory).unwrap().value;
            let b = exact_value(&p, PolicyClass::Feedback).unwrap().value;
            assert!(a <= b + 1e-12, "instance {idx}: open-loop {a} > feedback {b}");
        }
        // State-independent transitions and rewards: feedback adds nothing.
        let mut p = tiny_instance();
        p.actions = 2;
        p.transition_base = vec![
            0.6, 0.4, 0.3, 0.7, //
            0.6, 0.4, 0.3, 0.7, //
            0.6, 0.4, 0.3, 0.7, //
            0.6, 0.4, 0.3, 0.7,
        ];
        p.reward_base = vec![1.0, 0.5, 1.0, 0.5];
        p.terminal_base = vec![2.0, 2.0];
        let a = exact_value(&p, PolicyClass::CommonHistory).unwrap().value;
        let b = exact_value(&p, PolicyClass::Feedback).unwrap().value;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn dpp_defect_is_machine_zero() {
        for idx in 0..6u64 {
            let p = random_instance(7, idx);
            for class in [PolicyClass::CommonHistory, PolicyClass::Feedback] {
                let k_star = 1 + (idx as usize) % p.horizon;
                let cert = verify_dpp_exact(&p, k_star, class).unwrap();
                assert!(
                    cert.defect < 1e-12,
                    "instance {idx} class {class:?}: defect {}",
                    cert.defect
                );
                assert!(cert.concat_ok, "concat worst {}", cert.concat_worst);
            }
        }
    }

    #[test]
    fn split_at_horizon_collapses() {
        let p = random_instance(9, 0);
        let cert = verify_dpp_exact(&p, p.horizon, PolicyClass::Feedback).unwrap();
        assert!(cert.defect < 1e-12);
    }

    #[test]
    fn measure_flow_conserves_mass() {
        for idx in 0..8u64 {
            let p = random_instance(11, idx);
            let sol = exact_value(&p, PolicyClass::Feedback).unwrap();
            for node in measure_flow(&p, &sol.policy) {
                let total: f64 = node.distribution.iter().sum();
                assert!(
                    (total - 1.0).abs() <= 1e-12,
                    "mass {total} at step {} history {:?}",
                    node.time,
                    node.history
                );
                assert_eq!(node.history.len(), node.time);
            }
        }
    }

    #[test]
    fn guard_rejects_oversized_instances() {
        let mut p = tiny_instance();
        p.actions = 4;
        p.horizon = 6;
        p.common_probs = vec![0.5, 0.5];
        // transition table is wrong size now, but the guard trips first.
        assert!(matches!(
            p.check_guard(PolicyClass::Feedback),
            Err(Error::EnumerationGuard { .. })
        ));
    }

    #[test]
    fn json_roundtrip() {
        let p = random_instance(3, 1);
        let text = serde_json::to_string(&p).unwrap();
        let back: DiscreteProblem = serde_json::from_str(&text).unwrap();
        back.validate().unwrap();
        let a = exact_value(&p, PolicyClass::Feedback).unwrap().value;
        let b = exact_value(&back, PolicyClass::Feedback).unwrap().value;
        assert_eq!(a, b);
    }
}
