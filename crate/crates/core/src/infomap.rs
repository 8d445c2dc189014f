//! Two-level map-equation community detection over the pruned similarity
//! graph.
//!
//! The random walk is the undirected stationary flow: node visit rates are
//! proportional to weighted degree, no teleportation. The two-level
//! codelength of a partition M is
//!
//! ```text
//! L(M) = plogp(q) - 2 * sum_m plogp(q_m) + sum_m plogp(q_m + p_m) - sum_a plogp(p_a)
//! ```
//!
//! with `plogp(x) = x log2 x`, `q_m` the exit flow of module m, `p_m` the
//! total node flow inside m and `q = sum_m q_m`. A partition with a single
//! module therefore costs exactly the entropy of the node flows.
//!
//! Optimization is greedy: starting from singletons, nodes move to the
//! neighboring module with the best strict codelength decrease, modules are
//! aggregated into super-nodes, and the two phases alternate until neither
//! improves. The seed fixes the node visiting order, so runs are
//! deterministic; several deterministic restarts are taken and the best
//! codelength wins.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::SimilarityGraph;
use crate::partition::Partition;

/// Deterministic restarts taken by [`cluster`].
pub const DEFAULT_TRIALS: usize = 5;

const IMPROVEMENT_EPS: f64 = 1e-12;

/// Stationary flow derived from a similarity graph: per-node visit rates
/// and per-direction edge flows, each normalized by twice the total weight.
#[derive(Debug, Clone)]
pub struct FlowGraph {
    node_flow: Vec<f64>,
    adj: Vec<Vec<(usize, f64)>>,
    negative_dropped: usize,
}

impl FlowGraph {
    pub fn node_count(&self) -> usize {
        self.node_flow.len()
    }

    /// Stationary visit rate of a node; rates sum to 1.
    pub fn node_flow(&self, node: usize) -> f64 {
        self.node_flow[node]
    }

    pub fn node_flows(&self) -> &[f64] {
        &self.node_flow
    }

    /// Count of negative-weight edges dropped during construction.
    pub fn negative_dropped(&self) -> usize {
        self.negative_dropped
    }

    pub fn is_isolated(&self, node: usize) -> bool {
        self.adj[node].is_empty()
    }

    /// Undirected edge flows `(u, v, w/W)`; they sum to 1.
    pub fn edge_flows(&self) -> Vec<(usize, usize, f64)> {
        let mut flows = Vec::new();
        for (u, list) in self.adj.iter().enumerate() {
            for &(v, f) in list {
                if u < v {
                    flows.push((u, v, 2.0 * f));
                }
            }
        }
        flows
    }
}

/// Normalizes a similarity graph into stationary flows. Negative-weight
/// edges are dropped (the count is recorded on the result); a graph with
/// zero total remaining weight has no flow and is an error.
pub fn to_flow(graph: &SimilarityGraph) -> Result<FlowGraph> {
    let n = graph.node_count();
    let mut kept: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    let mut negative_dropped = 0usize;
    let mut total = 0.0;
    for (u, v, w) in graph.edges() {
        if w < 0.0 {
            negative_dropped += 1;
            continue;
        }
        kept[u].push((v, w));
        kept[v].push((u, w));
        total += w;
    }
    if total <= 0.0 {
        return Err(Error::ZeroTotalWeight);
    }
    let scale = 1.0 / (2.0 * total);
    let mut node_flow = vec![0.0; n];
    let adj: Vec<Vec<(usize, f64)>> = kept
        .into_iter()
        .enumerate()
        .map(|(u, list)| {
            list.into_iter()
                .map(|(v, w)| {
                    let f = w * scale;
                    node_flow[u] += f;
                    (v, f)
                })
                .collect()
        })
        .collect();
    Ok(FlowGraph {
        node_flow,
        adj,
        negative_dropped,
    })
}

/// Two-level description length of a partition, in bits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapEquationScore {
    pub codelength: f64,
    pub module_count: usize,
}

fn plogp(x: f64) -> f64 {
    if x > 0.0 {
        x * x.log2()
    } else {
        0.0
    }
}

/// Evaluates the two-level map equation for a partition of the flow graph.
/// Every node that carries edges must be assigned; isolated nodes may be
/// removed.
pub fn map_equation(flow: &FlowGraph, partition: &Partition) -> Result<MapEquationScore> {
    if partition.len() != flow.node_count() {
        return Err(Error::PartitionSizeMismatch {
            partition: partition.len(),
            graph: flow.node_count(),
        });
    }
    for node in 0..flow.node_count() {
        if partition.is_removed(node) && !flow.is_isolated(node) {
            return Err(Error::UncoveredNode { node });
        }
    }
    let modules = partition.num_clusters();
    let mut mod_flow = vec![0.0; modules];
    let mut mod_exit = vec![0.0; modules];
    for node in 0..flow.node_count() {
        let Some(m) = partition.cluster_of(node) else {
            continue;
        };
        mod_flow[m] += flow.node_flow[node];
        for &(v, f) in &flow.adj[node] {
            if partition.cluster_of(v) != Some(m) {
                mod_exit[m] += f;
            }
        }
    }
    let codelength = codelength_from_terms(&mod_flow, &mod_exit, flow.node_flows());
    Ok(MapEquationScore {
        codelength,
        module_count: modules,
    })
}

fn codelength_from_terms(mod_flow: &[f64], mod_exit: &[f64], node_flow: &[f64]) -> f64 {
    let q: f64 = mod_exit.iter().sum();
    let mut codelength = plogp(q);
    for (&pm, &qm) in mod_flow.iter().zip(mod_exit) {
        codelength += plogp(qm + pm) - 2.0 * plogp(qm);
    }
    codelength -= node_flow.iter().map(|&p| plogp(p)).sum::<f64>();
    codelength
}

/// One optimization level: (super-)nodes with flows, exits and
/// per-direction inter-node flows. Self-flow inside a super-node is dropped
/// when aggregating; it can never cross a module boundary again.
struct Level {
    flow: Vec<f64>,
    exit: Vec<f64>,
    adj: Vec<Vec<(usize, f64)>>,
}

impl Level {
    fn from_flow_graph(flow: &FlowGraph) -> Level {
        Level {
            flow: flow.node_flow.clone(),
            exit: flow.adj.iter().map(|l| l.iter().map(|(_, f)| f).sum()).collect(),
            adj: flow.adj.clone(),
        }
    }

    fn len(&self) -> usize {
        self.flow.len()
    }
}

/// Observer invoked after each accepted move; used by tests to audit
/// strict codelength decrease.
type MoveObserver<'a> = &'a mut dyn FnMut(&[usize]);

/// Greedy sweeps over `level` starting from `modules` (dense ids). Each
/// accepted move strictly decreases the codelength. Returns whether any
/// move was accepted.
fn optimize(
    level: &Level,
    modules: &mut [usize],
    rng: &mut ChaCha8Rng,
    mut on_move: Option<MoveObserver<'_>>,
) -> bool {
    let n = level.len();
    let mut module_count = modules.iter().copied().max().map_or(0, |m| m + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);

    let mut any_move = false;
    loop {
        // Rebuild module aggregates each sweep to cap floating-point drift.
        let mut mod_flow = vec![0.0; module_count];
        let mut mod_exit = vec![0.0; module_count];
        for node in 0..n {
            mod_flow[modules[node]] += level.flow[node];
            for &(v, f) in &level.adj[node] {
                if modules[v] != modules[node] {
                    mod_exit[modules[node]] += f;
                }
            }
        }
        let mut q: f64 = mod_exit.iter().sum();

        let mut moved_in_sweep = false;
        let mut flow_to: Vec<f64> = vec![0.0; module_count + 1];
        for &node in &order {
            let current = modules[node];
            let mut touched: Vec<usize> = Vec::with_capacity(level.adj[node].len());
            for &(v, f) in &level.adj[node] {
                let m = modules[v];
                if flow_to[m] == 0.0 && m != current {
                    touched.push(m);
                }
                flow_to[m] += f;
            }
            touched.sort_unstable();

            let node_flow = level.flow[node];
            let node_exit = level.exit[node];
            let f_cur = flow_to[current];
            let exit_a = mod_exit[current] - node_exit + 2.0 * f_cur;
            let flow_a = mod_flow[current] - node_flow;

            let mut best_delta = -IMPROVEMENT_EPS;
            let mut best: Option<(usize, f64, f64)> = None;
            let alone = flow_a == 0.0 && exit_a == 0.0 && f_cur == 0.0;
            // Fresh singleton module as an extra candidate, unless the node
            // is already alone.
            let fresh = module_count;
            for &candidate in touched.iter().chain((!alone).then_some(&fresh)) {
                let (exit_b, flow_b, f_b) = if candidate == fresh {
                    (0.0, 0.0, 0.0)
                } else {
                    (mod_exit[candidate], mod_flow[candidate], flow_to[candidate])
                };
                let exit_b_new = exit_b + node_exit - 2.0 * f_b;
                let flow_b_new = flow_b + node_flow;
                let q_new = q - mod_exit[current] - exit_b + exit_a + exit_b_new;
                let delta = plogp(q_new) - plogp(q)
                    - 2.0 * (plogp(exit_a) + plogp(exit_b_new)
                        - plogp(mod_exit[current])
                        - plogp(exit_b))
                    + plogp(exit_a + flow_a) + plogp(exit_b_new + flow_b_new)
                    - plogp(mod_exit[current] + mod_flow[current])
                    - plogp(exit_b + flow_b);
                if delta < best_delta {
                    best_delta = delta;
                    best = Some((candidate, exit_b_new, flow_b_new));
                }
            }

            if let Some((target, exit_b_new, flow_b_new)) = best {
                if target == fresh {
                    mod_exit.push(0.0);
                    mod_flow.push(0.0);
                    flow_to.push(0.0);
                    module_count += 1;
                }
                q = q - mod_exit[current] - mod_exit[target] + exit_a + exit_b_new;
                mod_exit[current] = exit_a;
                mod_flow[current] = flow_a;
                mod_exit[target] = exit_b_new;
                mod_flow[target] = flow_b_new;
                modules[node] = target;
                moved_in_sweep = true;
                any_move = true;
                if let Some(cb) = on_move.as_deref_mut() {
                    cb(modules);
                }
            }

            for &(v, _) in &level.adj[node] {
                flow_to[modules[v]] = 0.0;
            }
            flow_to[current] = 0.0;
        }
        if !moved_in_sweep {
            break;
        }
    }
    any_move
}

/// Remaps module ids densely in first-appearance order.
fn densify(modules: &mut [usize]) -> usize {
    let max = modules.iter().copied().max().map_or(0, |m| m + 1);
    let mut remap: Vec<Option<usize>> = vec![None; max];
    let mut next = 0usize;
    for m in modules.iter_mut() {
        let new = *remap[*m].get_or_insert_with(|| {
            let id = next;
            next += 1;
            id
        });
        *m = new;
    }
    next
}

/// Collapses each module into one super-node, summing flows; intra-module
/// flow disappears (it is internal to the super-node).
fn aggregate(level: &Level, modules: &[usize], module_count: usize) -> Level {
    let mut flow = vec![0.0; module_count];
    for (node, &m) in modules.iter().enumerate() {
        flow[m] += level.flow[node];
    }
    let mut edges: std::collections::BTreeMap<(usize, usize), f64> =
        std::collections::BTreeMap::new();
    for (u, list) in level.adj.iter().enumerate() {
        for &(v, f) in list {
            if u < v && modules[u] != modules[v] {
                let key = (modules[u].min(modules[v]), modules[u].max(modules[v]));
                *edges.entry(key).or_insert(0.0) += f;
            }
        }
    }
    let mut adj = vec![Vec::new(); module_count];
    for (&(a, b), &f) in &edges {
        adj[a].push((b, f));
        adj[b].push((a, f));
    }
    let exit = adj
        .iter()
        .map(|l| l.iter().map(|(_, f)| f).sum())
        .collect();
    Level { flow, exit, adj }
}

fn codelength_of(level0: &Level, modules: &[usize], module_count: usize, node_flow: &[f64]) -> f64 {
    let mut mod_flow = vec![0.0; module_count];
    let mut mod_exit = vec![0.0; module_count];
    for (node, &m) in modules.iter().enumerate() {
        mod_flow[m] += level0.flow[node];
        for &(v, f) in &level0.adj[node] {
            if modules[v] != m {
                mod_exit[m] += f;
            }
        }
    }
    codelength_from_terms(&mod_flow, &mod_exit, node_flow)
}

fn cluster_once(
    level0: &Level,
    node_flow: &[f64],
    rng: &mut ChaCha8Rng,
    init: Option<&[usize]>,
) -> (Vec<usize>, f64) {
    let n = level0.len();
    let mut modules: Vec<usize> = match init {
        Some(init) => init.to_vec(),
        None => (0..n).collect(),
    };
    densify(&mut modules);
    loop {
        optimize(level0, &mut modules, rng, None);
        let module_count = densify(&mut modules);

        let super_level = aggregate(level0, &modules, module_count);
        let mut super_modules: Vec<usize> = (0..module_count).collect();
        let moved = optimize(&super_level, &mut super_modules, rng, None);
        if !moved {
            let codelength = codelength_of(level0, &modules, module_count, node_flow);
            return (modules, codelength);
        }
        for m in modules.iter_mut() {
            *m = super_modules[*m];
        }
        densify(&mut modules);
    }
}

/// Clusters the flow graph with [`DEFAULT_TRIALS`] deterministic restarts.
/// Isolated nodes come back removed.
pub fn cluster(flow: &FlowGraph, seed: u64) -> Partition {
    cluster_trials(flow, seed, DEFAULT_TRIALS)
}

/// Clusters with an explicit number of deterministic restarts; the restart
/// with the lowest codelength wins (first winner on ties).
pub fn cluster_trials(flow: &FlowGraph, seed: u64, trials: usize) -> Partition {
    cluster_with_init(flow, seed, trials, None)
}

/// Clusters with restarts, optionally warm-starting the first restart from
/// an existing assignment (removed nodes start as fresh singletons).
pub fn cluster_with_init(
    flow: &FlowGraph,
    seed: u64,
    trials: usize,
    init: Option<&Partition>,
) -> Partition {
    let level0 = Level::from_flow_graph(flow);
    let n = level0.len();
    let init_modules: Option<Vec<usize>> = init.map(|p| {
        assert_eq!(p.len(), n, "warm-start partition must cover the graph");
        let mut next = p.num_clusters();
        p.assignment()
            .iter()
            .map(|a| {
                a.unwrap_or_else(|| {
                    let id = next;
                    next += 1;
                    id
                })
            })
            .collect()
    });

    let mut best: Option<(Vec<usize>, f64)> = None;
    for trial in 0..trials.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(trial as u64);
        let trial_init = if trial == 0 {
            init_modules.as_deref()
        } else {
            None
        };
        let (modules, codelength) = cluster_once(&level0, flow.node_flows(), &mut rng, trial_init);
        if best.as_ref().is_none_or(|(_, b)| codelength < *b) {
            best = Some((modules, codelength));
        }
    }
    let (modules, _) = best.expect("at least one trial");
    let labels: Vec<Option<usize>> = (0..n)
        .map(|node| (!flow.is_isolated(node)).then_some(modules[node]))
        .collect();
    Partition::from_labels_first_seen(labels)
}
