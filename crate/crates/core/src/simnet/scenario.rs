use std::cell::RefCell;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::control::{virtual_processes, LoadScript, ServerBackend, SimControl};
use super::experiments::{
    run_bytes_experiment, run_depth_experiment, run_latency_experiment, run_loss_experiment, summarize_latency, Setup,
};
use super::lookup::{run_lookup_experiment, LookupParams};
use super::sim::{Sim, SimParams};
use super::topology::{generate_topology, TopologyParams};
use super::SimError;
use crate::clock::ManualClock;
use crate::entrie::{parse_config, trigger_loop, write_transcript, SimClock, TriggerEngine};
use crate::ising::AggregateOp;
use crate::qtree::TopologyKind;
use crate::sensact::{
    HostnameSensor, KillActuator, Ledger, LedgerRow, RebootActuator, SensorServer, SharedProcesses, StartActuator,
    VirtualProcesses,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Latency,
    Bytes,
    Loss,
    Depth,
    Lookup,
    Trigger,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub sizes: Vec<usize>,
    pub topologies: Vec<TopologyKind>,
    pub ops: Vec<AggregateOp>,
    pub repetitions: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            sizes: vec![64, 128, 256, 384, 512],
            topologies: vec![TopologyKind::Direct, TopologyKind::Prefix],
            ops: vec![AggregateOp::Min, AggregateOp::Median],
            repetitions: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSpec {
    pub nodes: usize,
    pub p_list: Vec<f64>,
    pub queries: usize,
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec { nodes: 512, p_list: vec![0.0001, 0.0005, 0.0010, 0.0015], queries: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DepthSpec {
    pub nodes: usize,
    pub seeds: Vec<u64>,
}

impl Default for DepthSpec {
    fn default() -> Self {
        DepthSpec { nodes: 512, seeds: (1..=10).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TriggerSpecFile {
    /// Trigger XML, relative to the scenario file.
    pub config: PathBuf,
    pub nodes: usize,
    /// Application instances each node runs before the triggers start.
    pub instances_per_node: u64,
    pub horizon_ms: u64,
    pub tree: TopologyKind,
    pub loads: LoadScript,
}

impl Default for TriggerSpecFile {
    fn default() -> Self {
        TriggerSpecFile {
            config: PathBuf::new(),
            nodes: 16,
            instances_per_node: 1,
            horizon_ms: 3_600_000,
            tree: TopologyKind::Prefix,
            loads: LoadScript { baseline: 1.0, spikes: Vec::new() },
        }
    }
}

/// A simulation run described in TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub kind: ExperimentKind,
    pub seed: u64,
    #[serde(default)]
    pub topology: TopologyParams,
    #[serde(default)]
    pub sim: SimParams,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub loss: LossSpec,
    #[serde(default)]
    pub depth: DepthSpec,
    #[serde(default)]
    pub lookup: LookupParams,
    #[serde(default)]
    pub trigger: TriggerSpecFile,
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Scenario, SimError> {
        toml::from_str(text).map_err(|e| {
            let field = e.span().map(|s| text[s].trim().to_owned()).unwrap_or_else(|| "scenario".into());
            SimError::Config { field, reason: e.message().to_owned() }
        })
    }

    pub fn load(path: &Path) -> Result<Scenario, SimError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SimError::Config { field: path.display().to_string(), reason: e.to_string() })?;
        Scenario::parse(&text)
    }

    fn setup(&self) -> Setup {
        Setup { seed: self.seed, topology: self.topology.clone(), sim: self.sim.clone() }
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), SimError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| SimError::Runtime(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| SimError::Runtime(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// What a trigger run leaves behind.
#[derive(Debug, Clone)]
pub struct TriggerRun {
    pub transcript: Vec<crate::entrie::TranscriptRow>,
    /// Actuator ledger of the control node (start and kill).
    pub ledger: Vec<LedgerRow>,
    /// Restarts performed on each node by the reboot actuator.
    pub reboots: Vec<u64>,
    pub stopped_at_ms: u64,
}

/// Runs a trigger configuration against a simulated cluster. Node `i`
/// serves `hostname` and `reboot`; its `load` follows the script. A
/// separate control node hosts `start` and `kill` over virtual processes.
pub fn run_trigger_scenario(
    seed: u64,
    topology: &TopologyParams,
    sim_params: &SimParams,
    spec: &TriggerSpecFile,
    xml: &str,
) -> Result<TriggerRun, SimError> {
    let specs = parse_config(xml).map_err(|e| SimError::Config { field: "trigger.config".into(), reason: e.to_string() })?;
    let n = spec.nodes;
    let clock = ManualClock::new(0);
    let node_ledger = Arc::new(Ledger::in_memory(clock.as_now_fn()));
    let procs = virtual_processes(n);
    let mut servers = Vec::with_capacity(n);
    for (i, p) in procs.iter().enumerate() {
        let mut s = SensorServer::new();
        let reg = |e: crate::sensact::SensactError| SimError::Runtime(e.to_string());
        s.register("hostname", Arc::new(HostnameSensor::new(super::sim_node_name(i)))).map_err(reg)?;
        s.register("reboot", Arc::new(RebootActuator { processes: p.clone() as SharedProcesses, ledger: node_ledger.clone() }))
            .map_err(reg)?;
        for _ in 0..spec.instances_per_node {
            crate::sensact::ProcessManager::start(&mut *p.lock().unwrap()).map_err(SimError::Runtime)?;
        }
        servers.push(Arc::new(s));
    }
    let control_ledger = Arc::new(Ledger::in_memory(clock.as_now_fn()));
    let cluster: SharedProcesses = Arc::new(Mutex::new(VirtualProcesses::new()));
    let mut local = SensorServer::new();
    let reg = |e: crate::sensact::SensactError| SimError::Runtime(e.to_string());
    local
        .register("start", Arc::new(StartActuator { processes: cluster.clone(), ledger: control_ledger.clone() }))
        .map_err(reg)?;
    local
        .register("kill", Arc::new(KillActuator { processes: cluster.clone(), ledger: control_ledger.clone() }))
        .map_err(reg)?;

    let tp = TopologyParams { min_stub_hosts: topology.min_stub_hosts.max(n), ..topology.clone() };
    let topo = Arc::new(generate_topology(seed, &tp)?);
    let backend = ServerBackend { servers: servers.clone(), loads: Some(spec.loads.clone()) };
    let sim = Sim::new(topo, n, sim_params.clone(), seed, Box::new(backend))?;
    let ctl = SimControl {
        sim: Rc::new(RefCell::new(sim)),
        servers,
        local: Some(Arc::new(local)),
        kind: spec.tree,
        clock: Some(clock),
    };
    let mut engine = TriggerEngine::new(specs, seed);
    let stopped_at_ms = trigger_loop(&mut engine, &mut SimClock::default(), &mut ctl.clone(), &mut ctl.clone(), spec.horizon_ms);
    let reboots = procs
        .iter()
        .map(|p| {
            let p = p.lock().unwrap();
            crate::sensact::ProcessManager::census(&*p).iter().map(|&id| u64::from(p.restarts(id))).sum()
        })
        .collect();
    Ok(TriggerRun { transcript: engine.transcript().to_vec(), ledger: control_ledger.rows(), reboots, stopped_at_ms })
}

/// Runs a scenario and writes its CSV tables into `out_dir`. Relative
/// paths inside the scenario resolve against `base_dir`.
pub fn run_scenario(scenario: &Scenario, base_dir: &Path, out_dir: &Path) -> Result<Vec<PathBuf>, SimError> {
    std::fs::create_dir_all(out_dir)?;
    let setup = scenario.setup();
    let mut written = Vec::new();
    let mut out = |name: &str| {
        let p = out_dir.join(name);
        written.push(p.clone());
        p
    };
    match scenario.kind {
        ExperimentKind::Latency => {
            let g = &scenario.grid;
            let rows = run_latency_experiment(&setup, &g.sizes, &g.topologies, &g.ops, g.repetitions)?;
            write_csv(&out("latency_raw.csv"), &rows)?;
            write_csv(&out("latency.csv"), &summarize_latency(&rows))?;
        }
        ExperimentKind::Bytes => {
            let g = &scenario.grid;
            write_csv(&out("bytes.csv"), &run_bytes_experiment(&setup, &g.sizes, &g.topologies, &g.ops)?)?;
        }
        ExperimentKind::Loss => {
            let l = &scenario.loss;
            write_csv(&out("loss.csv"), &run_loss_experiment(&setup, l.nodes, &l.p_list, l.queries)?)?;
        }
        ExperimentKind::Depth => {
            let d = &scenario.depth;
            write_csv(&out("depth.csv"), &run_depth_experiment(&setup, d.nodes, &d.seeds)?)?;
        }
        ExperimentKind::Lookup => {
            write_csv(&out("lookup.csv"), &run_lookup_experiment(scenario.seed, &scenario.topology, &scenario.lookup)?)?;
        }
        ExperimentKind::Trigger => {
            let t = &scenario.trigger;
            let path = base_dir.join(&t.config);
            let xml = std::fs::read_to_string(&path)
                .map_err(|e| SimError::Config { field: "trigger.config".into(), reason: format!("{}: {e}", path.display()) })?;
            let run = run_trigger_scenario(scenario.seed, &scenario.topology, &scenario.sim, t, &xml)?;
            write_transcript(&run.transcript, File::create(out("transcript.csv"))?)?;
            write_csv(&out("ledger.csv"), &run.ledger)?;
            let reboots: Vec<RebootRow> =
                run.reboots.iter().enumerate().map(|(node, &restarts)| RebootRow { node, restarts }).collect();
            write_csv(&out("reboots.csv"), &reboots)?;
        }
    }
    Ok(written)
}

#[derive(Debug, Serialize)]
struct RebootRow {
    node: usize,
    restarts: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_field_is_named() {
        let e = Scenario::parse("kind = \"loss\"\nseed = 1\n[loss]\nqueris = 3\n").unwrap_err().to_string();
        assert!(e.contains("queris"), "{e}");
        let e = Scenario::parse("kind = \"loss\"\n").unwrap_err().to_string();
        assert!(e.contains("seed"), "{e}");
    }

    #[test]
    fn minimal_scenario_defaults() {
        let s = Scenario::parse("kind = \"bytes\"\nseed = 4\n").unwrap();
        assert_eq!(s.grid.repetitions, 11);
        assert_eq!(s.sim.message_size, 100);
        assert_eq!(s.loss.p_list.len(), 4);
    }

    #[test]
    fn writes_identical_csv_for_identical_seeds() {
        let text = "kind = \"loss\"\nseed = 3\n[topology]\nmin_stub_hosts = 64\n[loss]\nnodes = 64\np_list = [0.01]\nqueries = 30\n";
        let s = Scenario::parse(text).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        run_scenario(&s, Path::new("."), a.path()).unwrap();
        run_scenario(&s, Path::new("."), b.path()).unwrap();
        let ra = std::fs::read(a.path().join("loss.csv")).unwrap();
        assert_eq!(ra, std::fs::read(b.path().join("loss.csv")).unwrap());
        let text = String::from_utf8(ra).unwrap();
        assert!(text.starts_with("p,n,queries,lossy,lossy_fraction,expected_fraction,mean_nodes_lost\n"), "{text}");
    }

    fn repo_file(rel: &str) -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
    }

    #[test]
    fn shipped_scenarios_parse() {
        let mut n = 0;
        for e in std::fs::read_dir(repo_file("scenarios")).unwrap() {
            let path = e.unwrap().path();
            let s = Scenario::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            if s.kind == ExperimentKind::Trigger {
                let xml = std::fs::read_to_string(path.parent().unwrap().join(&s.trigger.config)).unwrap();
                parse_config(&xml).unwrap();
            }
            n += 1;
        }
        assert!(n >= 7);
    }

    #[test]
    fn self_repair_reboots_only_the_spiking_node() {
        let s = Scenario::load(&repo_file("scenarios/self_repair.toml")).unwrap();
        let xml = std::fs::read_to_string(repo_file("configs/self_repair.xml")).unwrap();
        let run = run_trigger_scenario(s.seed, &s.topology, &s.sim, &s.trigger, &xml).unwrap();
        let fired: Vec<_> = run.transcript.iter().map(|r| (r.timestamp_ms, r.target.clone())).collect();
        assert!(!fired.is_empty(), "{fired:?}");
        assert!(fired.iter().all(|(_, t)| t == "sim5:9100"), "{fired:?}");
        assert_eq!(run.reboots[5] as usize, fired.len());
        assert_eq!(run.reboots.iter().sum::<u64>() as usize, fired.len());
    }
}
