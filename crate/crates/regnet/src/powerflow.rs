//! Lossless linear power-flow model of a microgrid: injections, line flows,
//! flow limits, and the loop-flow parameterization of all flow solutions.
//!
//! Bus 1 is always the tie bus connecting the microgrid to the bulk grid; the
//! remaining buses are controllable (generators, flexible loads) or
//! uncontrollable loads. Power injections follow the sign convention that
//! consumption is negative, so a load `l > 0` enters the flow equations
//! as `-l`.

use crate::netgraph::{DiGraph, GraphError, TreeCertificate};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Relative balance tolerance: injections must sum to zero within
/// `1e-9 * max(1, |injection|_inf)`.
const BALANCE_RTOL: f64 = 1e-9;
/// Slack applied when comparing flows against their limits.
const FLOW_RTOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BusKind {
    Tie,
    Controllable,
    Load,
}

#[derive(Debug, Error)]
pub enum PowerflowError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("bus kinds must cover every bus ({0} kinds for {1} buses)")]
    KindCountMismatch(usize, usize),
    #[error("bus 1 must be the tie bus and the only one")]
    TieBusMisplaced,
    #[error("generator parameter vectors must have one entry per controllable bus")]
    GeneratorDimensionMismatch,
    #[error("generator bounds violated at controllable bus {0}: need g_min <= g0 <= g_max")]
    BadGeneratorBounds(usize),
    #[error("ramp must be nonnegative at controllable bus {0}")]
    NegativeRamp(usize),
    #[error("flow limit must be positive on line {0}")]
    NonPositiveFlowLimit(usize),
    #[error("flow limits must have one entry per line")]
    FlowLimitDimensionMismatch,
    #[error("network has overlapping loops")]
    OverlappingLoops,
    #[error("injection is unbalanced (residual {0:.3e})")]
    UnbalancedInjection(f64),
    #[error("operation requires a tree network")]
    NotATree,
    #[error("injection vector dimensions do not match the network")]
    InjectionDimensionMismatch,
}

/// Power injections: incoming tie power, controllable levels over the
/// controllable buses (ascending bus id) and consumption over the load buses.
#[derive(Debug, Clone, PartialEq)]
pub struct Injection {
    pub tie: f64,
    pub gen: DVector<f64>,
    pub load: DVector<f64>,
}

impl Injection {
    pub fn new(tie: f64, gen: DVector<f64>, load: DVector<f64>) -> Self {
        Injection { tie, gen, load }
    }

    /// Build a balanced injection: the tie absorbs whatever the controllable
    /// and load buses do not cancel.
    pub fn balanced(gen: DVector<f64>, load: DVector<f64>) -> Self {
        let tie = load.sum() - gen.sum();
        Injection { tie, gen, load }
    }

    pub fn balance_residual(&self) -> f64 {
        self.tie + self.gen.sum() - self.load.sum()
    }
}

/// Result of a flow-feasibility query. `loop_flows` carries the witness
/// loop-flow vector on networks with cycles (empty on trees).
#[derive(Debug, Clone)]
pub struct FlowFeasibility {
    pub feasible: bool,
    pub flows: DVector<f64>,
    pub loop_flows: DVector<f64>,
}

/// Columns of the Moore-Penrose pseudoinverse of the incidence matrix grouped
/// by bus kind: `M+ = [tie | gen | load]`.
#[derive(Debug, Clone)]
pub struct PinvSplit {
    pub tie: DVector<f64>,
    pub gen: DMatrix<f64>,
    pub load: DMatrix<f64>,
}

/// Signed and absolute column blocks of the path-matrix transpose of a tree
/// (reference = tie bus): flows are `gen_signed * g - load_signed * l`, and
/// the absolute blocks are the `P1/P2` data of the reduced ramp formulation.
#[derive(Debug, Clone)]
pub struct TreeBlocks {
    pub gen_signed: DMatrix<f64>,
    pub load_signed: DMatrix<f64>,
    pub gen_abs: DMatrix<f64>,
    pub load_abs: DMatrix<f64>,
}

#[derive(Debug, Clone)]
struct TreeData {
    certificate: TreeCertificate,
    blocks: TreeBlocks,
}

/// An immutable microgrid model. All derived matrices (incidence,
/// pseudoinverse split, loop matrix, tree path blocks) are computed once at
/// construction and shared by every capacity / ramp / cost evaluation.
#[derive(Debug, Clone)]
pub struct NetworkModel {
    graph: DiGraph,
    kinds: Vec<BusKind>,
    gen_buses: Vec<usize>,
    load_buses: Vec<usize>,
    g_min: DVector<f64>,
    g_max: DVector<f64>,
    g0: DVector<f64>,
    ramp: DVector<f64>,
    flow_limit: DVector<f64>,
    p0: f64,
    incidence: DMatrix<f64>,
    pinv: PinvSplit,
    loops: DMatrix<f64>,
    tree: Option<TreeData>,
}

impl NetworkModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        graph: DiGraph,
        kinds: Vec<BusKind>,
        g_min: DVector<f64>,
        g_max: DVector<f64>,
        g0: DVector<f64>,
        ramp: DVector<f64>,
        flow_limit: DVector<f64>,
        p0: f64,
    ) -> Result<Self, PowerflowError> {
        let n = graph.vertex_count();
        let m = graph.edge_count();
        if kinds.len() != n {
            return Err(PowerflowError::KindCountMismatch(kinds.len(), n));
        }
        if kinds[0] != BusKind::Tie || kinds.iter().skip(1).any(|&k| k == BusKind::Tie) {
            return Err(PowerflowError::TieBusMisplaced);
        }
        let gen_buses: Vec<usize> = (1..=n).filter(|&b| kinds[b - 1] == BusKind::Controllable).collect();
        let load_buses: Vec<usize> = (1..=n).filter(|&b| kinds[b - 1] == BusKind::Load).collect();
        let ng = gen_buses.len();
        if g_min.len() != ng || g_max.len() != ng || g0.len() != ng || ramp.len() != ng {
            return Err(PowerflowError::GeneratorDimensionMismatch);
        }
        for i in 0..ng {
            if !(g_min[i] <= g0[i] && g0[i] <= g_max[i]) {
                return Err(PowerflowError::BadGeneratorBounds(gen_buses[i]));
            }
            if ramp[i] < 0.0 {
                return Err(PowerflowError::NegativeRamp(gen_buses[i]));
            }
        }
        if flow_limit.len() != m {
            return Err(PowerflowError::FlowLimitDimensionMismatch);
        }
        for j in 0..m {
            if !(flow_limit[j] > 0.0) {
                return Err(PowerflowError::NonPositiveFlowLimit(j));
            }
        }
        // connectivity is implied by the loop-matrix construction
        let loops = graph.fundamental_loop_matrix()?;
        if loops.ncols() > 0 && !graph.has_non_overlapping_loops()? {
            return Err(PowerflowError::OverlappingLoops);
        }

        let incidence = graph.incidence_matrix();
        let pinv = split_pseudoinverse(&incidence, &gen_buses, &load_buses);

        let tree = if m + 1 == n {
            let certificate = TreeCertificate::new(graph.clone(), 1)?;
            let pt = certificate.path_matrix().transpose(); // m x (n-1)
            // column k of pt corresponds to bus k+2 (non-reference order)
            let col_of_bus = |b: usize| b - 2;
            let gather = |buses: &[usize]| {
                let cols: Vec<usize> = buses.iter().map(|&b| col_of_bus(b)).collect();
                pt.select_columns(&cols)
            };
            let gen_signed = gather(&gen_buses);
            let load_signed = gather(&load_buses);
            let blocks = TreeBlocks {
                gen_abs: gen_signed.abs(),
                load_abs: load_signed.abs(),
                gen_signed,
                load_signed,
            };
            Some(TreeData {
                certificate,
                blocks,
            })
        } else {
            None
        };

        Ok(NetworkModel {
            graph,
            kinds,
            gen_buses,
            load_buses,
            g_min,
            g_max,
            g0,
            ramp,
            flow_limit,
            p0,
            incidence,
            pinv,
            loops,
            tree,
        })
    }

    pub fn graph(&self) -> &DiGraph {
        &self.graph
    }
    pub fn bus_kinds(&self) -> &[BusKind] {
        &self.kinds
    }
    pub fn gen_buses(&self) -> &[usize] {
        &self.gen_buses
    }
    pub fn load_buses(&self) -> &[usize] {
        &self.load_buses
    }
    pub fn num_gens(&self) -> usize {
        self.gen_buses.len()
    }
    pub fn num_loads(&self) -> usize {
        self.load_buses.len()
    }
    pub fn num_lines(&self) -> usize {
        self.graph.edge_count()
    }
    pub fn g_min(&self) -> &DVector<f64> {
        &self.g_min
    }
    pub fn g_max(&self) -> &DVector<f64> {
        &self.g_max
    }
    pub fn g0(&self) -> &DVector<f64> {
        &self.g0
    }
    pub fn ramp_nominal(&self) -> &DVector<f64> {
        &self.ramp
    }
    pub fn flow_limit(&self) -> &DVector<f64> {
        &self.flow_limit
    }
    pub fn p0(&self) -> f64 {
        self.p0
    }
    pub fn incidence(&self) -> &DMatrix<f64> {
        &self.incidence
    }
    pub fn loop_matrix(&self) -> &DMatrix<f64> {
        &self.loops
    }
    pub fn is_tree(&self) -> bool {
        self.tree.is_some()
    }
    pub fn tree_certificate(&self) -> Option<&TreeCertificate> {
        self.tree.as_ref().map(|t| &t.certificate)
    }
    pub fn tree_blocks(&self) -> Option<&TreeBlocks> {
        self.tree.as_ref().map(|t| &t.blocks)
    }

    /// Columns of `M+` grouped as tie / controllable / load.
    pub fn pseudoinverse_split(&self) -> &PinvSplit {
        &self.pinv
    }

    /// Full injection vector in bus order.
    pub fn injection_vector(&self, inj: &Injection) -> Result<DVector<f64>, PowerflowError> {
        if inj.gen.len() != self.num_gens() || inj.load.len() != self.num_loads() {
            return Err(PowerflowError::InjectionDimensionMismatch);
        }
        let mut v = DVector::zeros(self.graph.vertex_count());
        v[0] = inj.tie;
        for (i, &b) in self.gen_buses.iter().enumerate() {
            v[b - 1] = inj.gen[i];
        }
        for (i, &b) in self.load_buses.iter().enumerate() {
            v[b - 1] = -inj.load[i];
        }
        Ok(v)
    }

    fn check_balance(&self, inj: &Injection) -> Result<(), PowerflowError> {
        if inj.gen.len() != self.num_gens() || inj.load.len() != self.num_loads() {
            return Err(PowerflowError::InjectionDimensionMismatch);
        }
        let scale = inj
            .gen
            .iter()
            .chain(inj.load.iter())
            .fold(inj.tie.abs(), |acc, v| acc.max(v.abs()))
            .max(1.0);
        let residual = inj.balance_residual();
        if residual.abs() > BALANCE_RTOL * scale {
            return Err(PowerflowError::UnbalancedInjection(residual));
        }
        Ok(())
    }

    /// Unique line flows of a balanced injection on a tree network, computed
    /// through the path-matrix transpose applied to the non-reference
    /// injections.
    pub fn tree_flows(&self, inj: &Injection) -> Result<DVector<f64>, PowerflowError> {
        let tree = self.tree.as_ref().ok_or(PowerflowError::NotATree)?;
        self.check_balance(inj)?;
        Ok(&tree.blocks.gen_signed * &inj.gen - &tree.blocks.load_signed * &inj.load)
    }

    /// Base flows `M+ inj` plus the loop matrix parameterize every flow
    /// solution of a balanced injection.
    pub fn base_flows(&self, inj: &Injection) -> Result<DVector<f64>, PowerflowError> {
        let v = self.injection_vector(inj)?;
        Ok(&self.pinv.tie * v[0] + &self.pinv.gen * &inj.gen - &self.pinv.load * &inj.load)
    }

    /// Whether some flow solution keeps every line within its limit. On trees
    /// the unique flows are tested directly; on loop networks a small LP
    /// minimizes the maximum normalized violation over the loop flows and the
    /// witness is returned.
    pub fn feasible_flow_exists(&self, inj: &Injection) -> Result<FlowFeasibility, PowerflowError> {
        self.check_balance(inj)?;
        if let Some(tree) = &self.tree {
            let flows = &tree.blocks.gen_signed * &inj.gen - &tree.blocks.load_signed * &inj.load;
            let feasible = (0..flows.len())
                .all(|j| flows[j].abs() <= self.flow_limit[j] * (1.0 + FLOW_RTOL));
            return Ok(FlowFeasibility {
                feasible,
                flows,
                loop_flows: DVector::zeros(0),
            });
        }

        let base = self.base_flows(inj)?;
        let m = self.num_lines();
        let k = self.loops.ncols();
        // variables (gamma, tau): minimize tau subject to
        //   +-(base + N gamma)_j <= (1 + tau) wbar_j
        let mut p = crate::convexsolve::ConvexProgram::new(k + 1);
        p.add_linear(k, 1.0);
        p.bound(k, -1.0, f64::INFINITY);
        for j in 0..m {
            let mut pos: Vec<(usize, f64)> = (0..k)
                .filter(|&c| self.loops[(j, c)] != 0.0)
                .map(|c| (c, self.loops[(j, c)]))
                .collect();
            pos.push((k, -self.flow_limit[j]));
            p.add_ineq(&pos, self.flow_limit[j] - base[j]);
            let mut neg: Vec<(usize, f64)> = (0..k)
                .filter(|&c| self.loops[(j, c)] != 0.0)
                .map(|c| (c, -self.loops[(j, c)]))
                .collect();
            neg.push((k, -self.flow_limit[j]));
            p.add_ineq(&neg, self.flow_limit[j] + base[j]);
        }
        let cfg = crate::convexsolve::SolverConfig {
            assume_feasible: true, // tau large is always feasible
            ..Default::default()
        };
        let sol = p
            .solve_with(&cfg)
            .expect("loop-flow LP is always feasible and bounded");
        let gamma = sol.x.rows(0, k).into_owned();
        let flows = &base + &self.loops * &gamma;
        Ok(FlowFeasibility {
            feasible: sol.x[k] <= FLOW_RTOL,
            flows,
            loop_flows: gamma,
        })
    }
}

/// `M+ = M' (M M' + J/n)^-1 - M' J/n` for a connected graph, using the
/// rank-one shift identity for the Laplacian pseudoinverse.
fn split_pseudoinverse(
    incidence: &DMatrix<f64>,
    gen_buses: &[usize],
    load_buses: &[usize],
) -> PinvSplit {
    let n = incidence.nrows();
    let shift = DMatrix::from_element(n, n, 1.0 / n as f64);
    let lap = incidence * incidence.transpose() + &shift;
    let lap_inv = lap
        .lu()
        .solve(&DMatrix::identity(n, n))
        .expect("shifted Laplacian of a connected graph is invertible");
    let pinv = incidence.transpose() * (lap_inv - &shift);
    let gen_cols: Vec<usize> = gen_buses.iter().map(|&b| b - 1).collect();
    let load_cols: Vec<usize> = load_buses.iter().map(|&b| b - 1).collect();
    PinvSplit {
        tie: pinv.column(0).into_owned(),
        gen: pinv.select_columns(&gen_cols),
        load: pinv.select_columns(&load_cols),
    }
}
