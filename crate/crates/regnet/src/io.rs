//! File-format layer: the network JSON schema, abstraction exports, bid and
//! award files, and scenario descriptions. Formats are strict: unknown fields
//! are rejected, and writers are deterministic so identical inputs produce
//! byte-identical outputs.

use crate::abstraction::{LoadDistribution, MicrogridAbstraction, NodeCost};
use crate::coordination::Gains;
use crate::market::{MarketAward, RegulationBid};
use crate::netgraph::DiGraph;
use crate::powerflow::{BusKind, NetworkModel};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("schema violation: {0}")]
    Schema(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    File(#[from] std::io::Error),
    #[error(transparent)]
    Powerflow(#[from] crate::powerflow::PowerflowError),
    #[error(transparent)]
    Abstraction(#[from] crate::abstraction::AbstractionError),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSpec {
    pub quad: f64,
    #[serde(default)]
    pub lin: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusSpec {
    pub id: usize,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gmin: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gmax: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ramp: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<CostSpec>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineSpec {
    pub from: usize,
    pub to: usize,
    pub limit: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadsSpec {
    pub mean: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cov_diag: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cov: Option<Vec<Vec<f64>>>,
}

/// The microgrid network file: buses with per-kind parameters, lines with
/// limits, the baseline tie power, and optionally the load distribution.
/// Units are kW throughout.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkFile {
    pub buses: Vec<BusSpec>,
    pub lines: Vec<LineSpec>,
    pub p0: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loads: Option<LoadsSpec>,
}

impl NetworkFile {
    pub fn parse(text: &str) -> Result<Self, IoError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, IoError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_model(&self) -> Result<(NetworkModel, NodeCost, LoadDistribution), IoError> {
        let n = self.buses.len();
        let mut kinds = Vec::with_capacity(n);
        let mut g_min = Vec::new();
        let mut g_max = Vec::new();
        let mut g0 = Vec::new();
        let mut ramp = Vec::new();
        let mut quad = Vec::new();
        let mut lin = Vec::new();
        for (idx, bus) in self.buses.iter().enumerate() {
            if bus.id != idx + 1 {
                return Err(IoError::Schema(format!(
                    "bus ids must be 1..=n in order; found {} at position {}",
                    bus.id,
                    idx + 1
                )));
            }
            match bus.kind.as_str() {
                "tie" => {
                    if bus.gmin.is_some() || bus.gmax.is_some() || bus.cost.is_some() {
                        return Err(IoError::Schema(format!(
                            "tie bus {} must not carry generator fields",
                            bus.id
                        )));
                    }
                    kinds.push(BusKind::Tie);
                }
                "gen" => {
                    kinds.push(BusKind::Controllable);
                    let need = |v: Option<f64>, what: &str| {
                        v.ok_or_else(|| {
                            IoError::Schema(format!("gen bus {} missing {what}", bus.id))
                        })
                    };
                    g_min.push(need(bus.gmin, "gmin")?);
                    g_max.push(need(bus.gmax, "gmax")?);
                    g0.push(need(bus.g0, "g0")?);
                    ramp.push(need(bus.ramp, "ramp")?);
                    let cost = bus.cost.as_ref().ok_or_else(|| {
                        IoError::Schema(format!("gen bus {} missing cost", bus.id))
                    })?;
                    quad.push(cost.quad);
                    lin.push(cost.lin);
                }
                "load" => {
                    if bus.gmin.is_some() || bus.gmax.is_some() || bus.cost.is_some() {
                        return Err(IoError::Schema(format!(
                            "load bus {} must not carry generator fields",
                            bus.id
                        )));
                    }
                    kinds.push(BusKind::Load);
                }
                other => {
                    return Err(IoError::Schema(format!(
                        "bus {}: unknown kind {other:?}",
                        bus.id
                    )))
                }
            }
        }
        let edges: Vec<(usize, usize)> = self.lines.iter().map(|l| (l.from, l.to)).collect();
        let limits = DVector::from_iterator(self.lines.len(), self.lines.iter().map(|l| l.limit));
        let graph = DiGraph::new(n, edges).map_err(crate::powerflow::PowerflowError::from)?;
        let model = NetworkModel::new(
            graph,
            kinds,
            DVector::from_vec(g_min),
            DVector::from_vec(g_max),
            DVector::from_vec(g0),
            DVector::from_vec(ramp),
            limits,
            self.p0,
        )?;
        let cost = NodeCost::new(DVector::from_vec(quad), DVector::from_vec(lin))?;
        let n_l = model.num_loads();
        let dist = match &self.loads {
            None => LoadDistribution::constant(DVector::zeros(n_l)),
            Some(spec) => {
                if spec.mean.len() != n_l {
                    return Err(IoError::Schema(format!(
                        "loads.mean has {} entries for {} load buses",
                        spec.mean.len(),
                        n_l
                    )));
                }
                let mean = DVector::from_vec(spec.mean.clone());
                match (&spec.cov_diag, &spec.cov) {
                    (Some(_), Some(_)) => {
                        return Err(IoError::Schema(
                            "give either cov_diag or cov, not both".into(),
                        ))
                    }
                    (Some(diag), None) => {
                        if diag.len() != n_l {
                            return Err(IoError::Schema("cov_diag length mismatch".into()));
                        }
                        LoadDistribution::diagonal(mean, DVector::from_vec(diag.clone()))?
                    }
                    (None, Some(full)) => {
                        if full.len() != n_l || full.iter().any(|r| r.len() != n_l) {
                            return Err(IoError::Schema("cov shape mismatch".into()));
                        }
                        let m = DMatrix::from_fn(n_l, n_l, |i, j| full[i][j]);
                        LoadDistribution::normal(mean, m)?
                    }
                    (None, None) => LoadDistribution::constant(mean),
                }
            }
        };
        Ok((model, cost, dist))
    }

    /// Serialize a model back into the file schema.
    pub fn from_model(model: &NetworkModel, cost: &NodeCost, dist: &LoadDistribution) -> Self {
        let mut gi = 0usize;
        let buses = model
            .bus_kinds()
            .iter()
            .enumerate()
            .map(|(idx, kind)| {
                let id = idx + 1;
                match kind {
                    BusKind::Tie => BusSpec {
                        id,
                        kind: "tie".into(),
                        gmin: None,
                        gmax: None,
                        g0: None,
                        ramp: None,
                        cost: None,
                    },
                    BusKind::Controllable => {
                        let spec = BusSpec {
                            id,
                            kind: "gen".into(),
                            gmin: Some(model.g_min()[gi]),
                            gmax: Some(model.g_max()[gi]),
                            g0: Some(model.g0()[gi]),
                            ramp: Some(model.ramp_nominal()[gi]),
                            cost: Some(CostSpec {
                                quad: cost.quad_coeffs()[gi],
                                lin: cost.lin_coeffs()[gi],
                            }),
                        };
                        gi += 1;
                        spec
                    }
                    BusKind::Load => BusSpec {
                        id,
                        kind: "load".into(),
                        gmin: None,
                        gmax: None,
                        g0: None,
                        ramp: None,
                        cost: None,
                    },
                }
            })
            .collect();
        let lines = model
            .graph()
            .edges()
            .iter()
            .zip(model.flow_limit().iter())
            .map(|(&(from, to), &limit)| LineSpec { from, to, limit })
            .collect();
        let loads = if model.num_loads() > 0 {
            Some(LoadsSpec {
                mean: dist.mean().iter().copied().collect(),
                cov_diag: if dist.is_degenerate() {
                    None
                } else {
                    Some(dist.covariance().diagonal().iter().copied().collect())
                },
                cov: None,
            })
        } else {
            None
        };
        NetworkFile {
            buses,
            lines,
            p0: model.p0(),
            loads,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridPoint {
    pub x: f64,
    pub f: f64,
    pub r: f64,
}

/// Exported abstraction: capacities, the sampled cost / ramp grid, and the
/// maximum-up dispatch data the bid needs.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbstractionFile {
    pub up_capacity: f64,
    pub down_capacity: f64,
    pub grid: Vec<GridPoint>,
    pub g_up: Vec<f64>,
    pub cost_at_g_up: f64,
    pub ramp_at_g_up: f64,
}

impl AbstractionFile {
    pub fn from_abstraction(abs: &MicrogridAbstraction) -> Self {
        let xs = abs.cost_fn().xs();
        let fs = abs.cost_fn().ys();
        let rs = abs.ramp_fn().ys();
        AbstractionFile {
            up_capacity: abs.up_capacity(),
            down_capacity: abs.down_capacity(),
            grid: xs
                .iter()
                .zip(fs.iter().zip(rs))
                .map(|(&x, (&f, &r))| GridPoint { x, f, r })
                .collect(),
            g_up: abs.g_up().iter().copied().collect(),
            cost_at_g_up: abs.cost_at_g_up(),
            ramp_at_g_up: abs.ramp_at_g_up(),
        }
    }

    pub fn to_abstraction(&self) -> MicrogridAbstraction {
        MicrogridAbstraction::from_parts(
            self.up_capacity,
            self.down_capacity,
            self.grid.iter().map(|p| p.x).collect(),
            self.grid.iter().map(|p| p.f).collect(),
            self.grid.iter().map(|p| p.r).collect(),
            DVector::from_vec(self.g_up.clone()),
            self.cost_at_g_up,
            self.ramp_at_g_up,
        )
    }

    pub fn parse(text: &str) -> Result<Self, IoError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, IoError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// Bid file for both market sides.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BidFile {
    pub k: f64,
    pub up: Vec<RegulationBid>,
    pub down: Vec<RegulationBid>,
}

/// Award file for both market sides.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AwardFile {
    pub requirement: f64,
    pub up: MarketAward,
    pub down: MarketAward,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetSpec {
    pub groups: usize,
    pub per_group: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalSpec {
    pub path: String,
    pub scale: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainsSpec {
    pub mu: f64,
    pub mu2: f64,
    pub nu: f64,
    pub beta: f64,
}

impl From<GainsSpec> for Gains {
    fn from(g: GainsSpec) -> Gains {
        Gains {
            mu: g.mu,
            mu2: g.mu2,
            nu: g.nu,
            beta: g.beta,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edges: Option<Vec<(usize, usize)>>,
}

/// End-to-end experiment description consumed by the tracking harness.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub fleet: FleetSpec,
    pub signal: SignalSpec,
    pub gains: GainsSpec,
    pub dt: f64,
    pub topology: TopologySpec,
    pub epsilon_prime: f64,
    pub epsilon: f64,
    pub k: f64,
    pub requirement: f64,
    pub seed: u64,
    #[serde(default = "default_grid")]
    pub grid: usize,
    #[serde(default = "default_stride")]
    pub recompute_stride: usize,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    #[serde(default = "default_informed")]
    pub informed: usize,
}

fn default_grid() -> usize {
    101
}
fn default_stride() -> usize {
    25
}
fn default_max_steps() -> usize {
    60_000
}
fn default_informed() -> usize {
    1
}

impl ScenarioFile {
    pub fn parse(text: &str) -> Result<Self, IoError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, IoError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Build the communication digraph named by the topology spec.
    pub fn build_topology(&self, n: usize) -> Result<DiGraph, IoError> {
        let graph = match self.topology.kind.as_str() {
            "ring" => {
                let edges = (1..=n).map(|i| (i, i % n + 1)).collect();
                DiGraph::new(n, edges)
            }
            "ring_chords" => {
                let mut edges: Vec<(usize, usize)> = Vec::new();
                let mut add = |a: usize, b: usize, edges: &mut Vec<(usize, usize)>| {
                    if a != b && !edges.contains(&(a, b)) {
                        edges.push((a, b));
                    }
                    if a != b && !edges.contains(&(b, a)) {
                        edges.push((b, a));
                    }
                };
                for i in 1..=n {
                    add(i, i % n + 1, &mut edges);
                }
                // a few symmetric chords, scaled to the ring size
                if n > 3 {
                    add(1, n / 2 + 1, &mut edges);
                }
                if n > 5 {
                    add(2, n / 2 + 3, &mut edges);
                }
                if n > 7 {
                    add(4, n - 1, &mut edges);
                }
                DiGraph::new(n, edges)
            }
            "edges" => {
                let edges = self
                    .topology
                    .edges
                    .clone()
                    .ok_or_else(|| IoError::Schema("topology kind \"edges\" needs edges".into()))?;
                DiGraph::new(n, edges)
            }
            other => return Err(IoError::Schema(format!("unknown topology kind {other:?}"))),
        };
        graph.map_err(|e| IoError::Schema(format!("bad topology: {e}")))
    }
}

pub fn write_json<T: Serialize>(value: &T, path: &std::path::Path) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SPEC_EXAMPLE: &str = r#"{"buses":[{"id":1,"kind":"tie"},{"id":2,"kind":"gen","gmin":-5,"gmax":5,"g0":0,"ramp":10,"cost":{"quad":1.0,"lin":0.0}},{"id":3,"kind":"load"}],"lines":[{"from":1,"to":2,"limit":3.0},{"from":2,"to":3,"limit":3.0}],"p0":0.0}"#;

    #[test]
    fn parses_schema_example() {
        let file = NetworkFile::parse(SPEC_EXAMPLE).unwrap();
        let (model, cost, dist) = file.to_model().unwrap();
        assert_eq!(model.num_gens(), 1);
        assert_eq!(model.num_loads(), 1);
        assert_eq!(model.flow_limit()[0], 3.0);
        assert_eq!(cost.quad_coeffs()[0], 1.0);
        assert!(dist.is_degenerate());
    }

    #[test]
    fn rejects_unknown_fields() {
        let text = SPEC_EXAMPLE.replace("\"p0\":0.0", "\"p0\":0.0,\"mystery\":1");
        assert!(NetworkFile::parse(&text).is_err());
    }

    #[test]
    fn rejects_misplaced_generator_fields() {
        let text = SPEC_EXAMPLE.replace(
            r#"{"id":3,"kind":"load"}"#,
            r#"{"id":3,"kind":"load","gmin":-1}"#,
        );
        let file = NetworkFile::parse(&text).unwrap();
        assert!(file.to_model().is_err());
    }

    #[test]
    fn network_round_trip() {
        let file = NetworkFile::parse(SPEC_EXAMPLE).unwrap();
        let (model, cost, dist) = file.to_model().unwrap();
        let back = NetworkFile::from_model(&model, &cost, &dist);
        let a = serde_json::to_string(&NetworkFile::parse(SPEC_EXAMPLE).unwrap()).unwrap();
        let mut b: serde_json::Value = serde_json::from_str(&serde_json::to_string(&back).unwrap()).unwrap();
        // the writer adds an explicit zero-mean loads block for load buses
        let obj = b.as_object_mut().unwrap();
        obj.remove("loads");
        let a_val: serde_json::Value = serde_json::from_str(&a).unwrap();
        assert_eq!(a_val, b);
    }

    #[test]
    fn scenario_defaults_apply() {
        let text = r#"{
            "fleet": {"groups": 4, "per_group": 3, "seed": 7},
            "signal": {"path": "regd.csv", "scale": 50000.0},
            "gains": {"mu": 1000.0, "mu2": 1100.0, "nu": 400.0, "beta": 400.0},
            "dt": 0.001,
            "topology": {"kind": "ring_chords"},
            "epsilon_prime": 0.1,
            "epsilon": 4.2e-5,
            "k": 1.0,
            "requirement": 2000.0,
            "seed": 42
        }"#;
        let sc = ScenarioFile::parse(text).unwrap();
        assert_eq!(sc.grid, 101);
        assert_eq!(sc.recompute_stride, 25);
        let topo = sc.build_topology(12).unwrap();
        assert!(topo.is_strongly_connected());
        assert!(topo.is_weight_balanced());
    }
}
