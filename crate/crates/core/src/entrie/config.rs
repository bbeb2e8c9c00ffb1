use std::collections::{BTreeSet, HashMap};

use rand::Rng;
use rand_distr::{Distribution, Exp};

use super::EntrieError;
use crate::ising::{AggregateOp, Comparator};

/// A fixed or exponentially distributed duration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Dist {
    Fixed(u64),
    Exponential { mean_ms: f64 },
}

impl Dist {
    /// Draws one duration in ms, at least 1.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        match *self {
            Dist::Fixed(ms) => ms.max(1),
            Dist::Exponential { mean_ms } => {
                let d = Exp::new(1.0 / mean_ms).expect("positive mean checked at parse time");
                (d.sample(rng).round() as u64).max(1)
            }
        }
    }

    pub fn mean_ms(&self) -> f64 {
        match *self {
            Dist::Fixed(ms) => ms as f64,
            Dist::Exponential { mean_ms } => mean_ms,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RepeatMode {
    FirstTransition,
    EveryTransition,
    PeriodicFirstTrue,
    PeriodicEveryTrue,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RepeatPolicy {
    pub mode: RepeatMode,
    pub period: Option<Dist>,
}

impl RepeatPolicy {
    pub fn every_transition() -> Self {
        RepeatPolicy { mode: RepeatMode::EveryTransition, period: None }
    }
}

/// Where a sensor lives or an actuator is invoked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeSpec {
    /// Every node, through an ISING root.
    All { port: u16 },
    /// The node singled out by the gating MAX/MIN sensor condition.
    Variable { port: u16 },
    /// One named `host:port`.
    Host { host: String, port: u16 },
}

impl NodeSpec {
    pub fn port(&self) -> u16 {
        match self {
            NodeSpec::All { port } | NodeSpec::Variable { port } | NodeSpec::Host { port, .. } => *port,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Rhs {
    Const(f64),
    Secondary { id: String, scaling: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorCondition {
    pub id: Option<String>,
    /// ISING roots in failover order.
    pub roots: Vec<String>,
    pub node: NodeSpec,
    pub sensor: String,
    pub period_ms: u64,
    pub sensor_agg: AggregateOp,
    pub hist_size: usize,
    pub hist_agg: AggregateOp,
    pub is_secondary: bool,
    /// `None` only for secondaries.
    pub comparator: Option<Comparator>,
    pub rhs: Option<Rhs>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConditionSpec {
    /// Holds from `not_before_ms` (run-relative) until `not_after_ms`.
    Timer { not_before_ms: u64, not_after_ms: Option<u64> },
    /// Holds once every named action has completed.
    Completion { action_ids: Vec<String> },
    Sensor(SensorCondition),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ActionSpec {
    /// Start `count` application instances; each optionally dies after a
    /// sampled lifetime.
    StartNode { count: u64, lifetime: Option<Dist>, node: Option<NodeSpec> },
    /// Kill `count` instances started earlier by this configuration.
    KillNode { count: u64, node: Option<NodeSpec> },
    /// Invoke a named actuator.
    Execute { actuator: String, roots: Vec<String>, node: NodeSpec, args: String },
}

impl ActionSpec {
    pub fn name(&self) -> &str {
        match self {
            ActionSpec::StartNode { .. } => "startNode",
            ActionSpec::KillNode { .. } => "killNode",
            ActionSpec::Execute { actuator, .. } => actuator,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriggerSpec {
    pub id: String,
    pub timer_name: Option<String>,
    pub action: ActionSpec,
    pub conditions: Vec<ConditionSpec>,
    pub repeat: RepeatPolicy,
}

impl TriggerSpec {
    /// Replaces the ISING roots named by every sensor condition and action.
    pub fn set_roots(&mut self, new_roots: &[String]) {
        if let ActionSpec::Execute { roots, .. } = &mut self.action {
            *roots = new_roots.to_vec();
        }
        for c in &mut self.conditions {
            if let ConditionSpec::Sensor(s) = c {
                s.roots = new_roots.to_vec();
            }
        }
    }

    /// The gating sensor condition that can bind `VARIABLE_host`.
    pub fn binding_condition(&self) -> Option<usize> {
        self.conditions.iter().position(|c| {
            matches!(c, ConditionSpec::Sensor(s)
                if !s.is_secondary
                    && matches!(s.node, NodeSpec::All { .. })
                    && matches!(s.sensor_agg, AggregateOp::Max | AggregateOp::Min))
        })
    }
}

const ACTION_ATTRS: &[&str] = &["ID", "name", "timerName"];
const PARAMS_ATTRS: &[&str] = &[
    "numToStart",
    "numToKill",
    "distribution",
    "randLifetime",
    "meanLifetime",
    "lifetime",
    "commandType",
    "name",
    "hosts",
    "node",
    "args",
];
const REPEAT_ATTRS: &[&str] = &["distribution", "randPeriod", "meanPeriod", "period", "mode"];
const CONDITION_ATTRS: &[&str] = &[
    "type",
    "value",
    "ID",
    "name",
    "hosts",
    "node",
    "period",
    "sensorAgg",
    "histSize",
    "histAgg",
    "isSecondary",
    "secondaryID",
    "scalingFactor",
    "operator",
];

struct El<'a, 'i> {
    node: roxmltree::Node<'a, 'i>,
    path: String,
}

impl<'a, 'i> El<'a, 'i> {
    fn err(&self, msg: impl std::fmt::Display) -> EntrieError {
        EntrieError::Config(format!("{}: {msg}", self.path))
    }

    fn check_attrs(&self, allowed: &[&str]) -> Result<(), EntrieError> {
        for a in self.node.attributes() {
            if !allowed.contains(&a.name()) {
                return Err(self.err(format!("unknown attribute `{}`", a.name())));
            }
        }
        Ok(())
    }

    fn attr(&self, name: &str) -> Option<&'a str> {
        self.node.attribute(name).map(str::trim)
    }

    fn req(&self, name: &str) -> Result<&'a str, EntrieError> {
        self.attr(name).ok_or_else(|| self.err(format!("missing attribute `{name}`")))
    }

    fn num<T: std::str::FromStr>(&self, name: &str) -> Result<Option<T>, EntrieError> {
        self.attr(name)
            .map(|v| v.parse::<T>().map_err(|_| self.err(format!("`{name}`: not a number: {v:?}"))))
            .transpose()
    }

    fn flag(&self, name: &str) -> Result<bool, EntrieError> {
        match self.attr(name) {
            None => Ok(false),
            Some(v) if v.eq_ignore_ascii_case("true") => Ok(true),
            Some(v) if v.eq_ignore_ascii_case("false") => Ok(false),
            Some(v) => Err(self.err(format!("`{name}`: expected true or false, got {v:?}"))),
        }
    }

    fn op(&self, name: &str) -> Result<Option<AggregateOp>, EntrieError> {
        self.attr(name)
            .map(|v| v.parse::<AggregateOp>().map_err(|_| self.err(format!("`{name}`: unknown aggregate {v:?}"))))
            .transpose()
    }

    fn children(&self) -> impl Iterator<Item = El<'a, 'i>> + '_ {
        self.node.children().filter(|c| c.is_element()).map(|c| El {
            node: c,
            path: format!("{}/{}", self.path, c.tag_name().name()),
        })
    }
}

fn parse_node(el: &El<'_, '_>, v: &str) -> Result<NodeSpec, EntrieError> {
    let (host, port) = v.rsplit_once(':').ok_or_else(|| el.err(format!("`node`: expected host:port, got {v:?}")))?;
    let port = port.parse::<u16>().map_err(|_| el.err(format!("`node`: bad port in {v:?}")))?;
    Ok(match host {
        "ALL" => NodeSpec::All { port },
        "VARIABLE_host" => NodeSpec::Variable { port },
        "" => return Err(el.err(format!("`node`: empty host in {v:?}"))),
        h => NodeSpec::Host { host: h.to_owned(), port },
    })
}

fn parse_roots(el: &El<'_, '_>) -> Result<Vec<String>, EntrieError> {
    let Some(v) = el.attr("hosts") else { return Ok(Vec::new()) };
    let roots: Vec<String> = v.split(',').map(|s| s.trim().to_owned()).filter(|s| !s.is_empty()).collect();
    for r in &roots {
        match r.rsplit_once(':') {
            Some((h, p)) if !h.is_empty() && p.parse::<u16>().is_ok() => {}
            _ => return Err(el.err(format!("`hosts`: expected host:port, got {r:?}"))),
        }
    }
    Ok(roots)
}

fn positive_mean(el: &El<'_, '_>, name: &str, v: Option<f64>) -> Result<Option<f64>, EntrieError> {
    match v {
        Some(m) if !(m > 0.0 && m.is_finite()) => Err(el.err(format!("`{name}` must be positive"))),
        other => Ok(other),
    }
}

fn parse_repeat(el: &El<'_, '_>) -> Result<RepeatPolicy, EntrieError> {
    el.check_attrs(REPEAT_ATTRS)?;
    let mean = positive_mean(el, "meanPeriod", el.num::<f64>("meanPeriod")?)?;
    let fixed = el.num::<u64>("period")?;
    let exponential = match el.attr("distribution") {
        None => false,
        Some("exponential") => true,
        Some("fixed") => false,
        Some(d) => return Err(el.err(format!("`distribution`: unknown {d:?}"))),
    };
    let period = match (fixed, mean) {
        (Some(_), Some(_)) => return Err(el.err("give either `period` or `meanPeriod`, not both")),
        (Some(0), None) => return Err(el.err("`period` must be positive")),
        (Some(p), None) => Some(Dist::Fixed(p)),
        (None, Some(m)) if exponential && el.flag("randPeriod")? => Some(Dist::Exponential { mean_ms: m }),
        (None, Some(m)) => Some(Dist::Fixed(m.round() as u64)),
        (None, None) => None,
    };
    let mode = match el.attr("mode") {
        None if period.is_some() => RepeatMode::PeriodicEveryTrue,
        None => RepeatMode::EveryTransition,
        Some("firstTransition") => RepeatMode::FirstTransition,
        Some("everyTransition") => RepeatMode::EveryTransition,
        Some("periodicFirstTrue") => RepeatMode::PeriodicFirstTrue,
        Some("periodicEveryTrue") => RepeatMode::PeriodicEveryTrue,
        Some(m) => return Err(el.err(format!("`mode`: unknown {m:?}"))),
    };
    if matches!(mode, RepeatMode::PeriodicFirstTrue | RepeatMode::PeriodicEveryTrue) && period.is_none() {
        return Err(el.err("periodic repeat needs `period` or `meanPeriod`"));
    }
    Ok(RepeatPolicy { mode, period })
}

fn parse_params(el: &El<'_, '_>, action_name: &str) -> Result<ActionSpec, EntrieError> {
    el.check_attrs(PARAMS_ATTRS)?;
    let node = el.attr("node").map(|v| parse_node(el, v)).transpose()?;
    match action_name {
        "startNode" => {
            let count = el.num::<u64>("numToStart")?.unwrap_or(1);
            if count == 0 {
                return Err(el.err("`numToStart` must be at least 1"));
            }
            let mean = positive_mean(el, "meanLifetime", el.num::<f64>("meanLifetime")?)?;
            let lifetime = match (el.num::<u64>("lifetime")?, mean) {
                (Some(_), Some(_)) => return Err(el.err("give either `lifetime` or `meanLifetime`, not both")),
                (Some(l), None) => Some(Dist::Fixed(l)),
                (None, Some(m)) => {
                    let exponential = match el.attr("distribution") {
                        None | Some("fixed") => false,
                        Some("exponential") => true,
                        Some(d) => return Err(el.err(format!("`distribution`: unknown {d:?}"))),
                    };
                    if exponential && el.flag("randLifetime")? {
                        Some(Dist::Exponential { mean_ms: m })
                    } else {
                        Some(Dist::Fixed(m.round() as u64))
                    }
                }
                (None, None) => None,
            };
            Ok(ActionSpec::StartNode { count, lifetime, node })
        }
        "killNode" => {
            let count = el.num::<u64>("numToKill")?.unwrap_or(1);
            Ok(ActionSpec::KillNode { count, node })
        }
        "EXECUTE" => {
            match el.attr("commandType") {
                None | Some("actuator") => {}
                Some(c) => return Err(el.err(format!("`commandType`: unsupported {c:?}"))),
            }
            let actuator = el.req("name")?.to_owned();
            let node = node.ok_or_else(|| el.err("missing attribute `node`"))?;
            let roots = parse_roots(el)?;
            if matches!(node, NodeSpec::All { .. }) && roots.is_empty() {
                return Err(el.err("an ALL-node action needs ISING roots in `hosts`"));
            }
            Ok(ActionSpec::Execute { actuator, roots, node, args: el.attr("args").unwrap_or("").to_owned() })
        }
        other => Err(el.err(format!("unknown action name {other:?}"))),
    }
}

/// A condition as written; endDelay is folded into the timer afterwards.
enum Written {
    Cond(ConditionSpec),
    EndDelay(u64),
}

fn parse_condition(el: &El<'_, '_>) -> Result<Written, EntrieError> {
    el.check_attrs(CONDITION_ATTRS)?;
    let cond = match el.req("type")? {
        "timer" => ConditionSpec::Timer {
            not_before_ms: el.num::<u64>("value")?.ok_or_else(|| el.err("missing attribute `value`"))?,
            not_after_ms: None,
        },
        "endDelay" => {
            let d = el.num::<u64>("value")?.ok_or_else(|| el.err("missing attribute `value`"))?;
            return Ok(Written::EndDelay(d));
        }
        "completion" => {
            let ids: Vec<String> = el
                .req("value")?
                .split(',')
                .map(|s| s.trim().to_owned())
                .filter(|s| !s.is_empty())
                .collect();
            if ids.is_empty() {
                return Err(el.err("completion condition names no actions"));
            }
            ConditionSpec::Completion { action_ids: ids }
        }
        "sensor" => {
            let is_secondary = el.flag("isSecondary")?;
            let node = parse_node(el, el.req("node")?)?;
            if matches!(node, NodeSpec::Variable { .. }) {
                return Err(el.err("a sensor condition cannot target VARIABLE_host"));
            }
            let roots = parse_roots(el)?;
            if matches!(node, NodeSpec::All { .. }) && roots.is_empty() {
                return Err(el.err("an ALL-node sensor condition needs ISING roots in `hosts`"));
            }
            let period_ms = el.num::<u64>("period")?.ok_or_else(|| el.err("missing attribute `period`"))?;
            if period_ms == 0 {
                return Err(el.err("`period` must be positive"));
            }
            let hist_size = el.num::<usize>("histSize")?.unwrap_or(1);
            if hist_size == 0 {
                return Err(el.err("`histSize` must be at least 1"));
            }
            let sensor_agg = el.op("sensorAgg")?.unwrap_or(AggregateOp::Avg);
            let hist_agg = el.op("histAgg")?.unwrap_or(AggregateOp::Avg);
            if hist_agg == AggregateOp::Value {
                return Err(el.err("`histAgg` must produce a single number"));
            }
            let comparator = el
                .attr("operator")
                .map(|o| Comparator::parse(o).ok_or_else(|| el.err(format!("`operator`: unknown {o:?}"))))
                .transpose()?;
            let scaling = el.num::<f64>("scalingFactor")?.unwrap_or(1.0);
            let rhs = match (el.attr("secondaryID"), el.num::<f64>("value")?) {
                (Some(_), Some(_)) => return Err(el.err("give either `value` or `secondaryID`, not both")),
                (Some(id), None) => Some(Rhs::Secondary { id: id.to_owned(), scaling }),
                (None, Some(v)) => Some(Rhs::Const(v * scaling)),
                (None, None) => None,
            };
            if !is_secondary && (comparator.is_none() || rhs.is_none()) {
                return Err(el.err("a gating sensor condition needs `operator` and `value` or `secondaryID`"));
            }
            ConditionSpec::Sensor(SensorCondition {
                id: el.attr("ID").map(str::to_owned),
                roots,
                node,
                sensor: el.req("name")?.to_owned(),
                period_ms,
                sensor_agg,
                hist_size,
                hist_agg,
                is_secondary,
                comparator,
                rhs,
            })
        }
        other => return Err(el.err(format!("unknown condition type {other:?}"))),
    };
    Ok(Written::Cond(cond))
}

/// Pairs each endDelay with the trigger's timer: the deadline counts from
/// when the timer starts to hold (run start if there is no timer).
fn fold_end_delays(el: &El<'_, '_>, conditions: Vec<Written>) -> Result<Vec<ConditionSpec>, EntrieError> {
    let mut start = None;
    let mut delay = None;
    let mut rest = Vec::new();
    for c in conditions {
        match c {
            Written::EndDelay(d) => {
                if delay.replace(d).is_some() {
                    return Err(el.err("more than one endDelay condition"));
                }
            }
            Written::Cond(ConditionSpec::Timer { not_before_ms, .. }) => {
                if start.replace(not_before_ms).is_some() {
                    return Err(el.err("more than one timer condition"));
                }
            }
            Written::Cond(other) => rest.push(other),
        }
    }
    if start.is_some() || delay.is_some() {
        let nb = start.unwrap_or(0);
        rest.insert(0, ConditionSpec::Timer { not_before_ms: nb, not_after_ms: delay.map(|d| nb + d) });
    }
    Ok(rest)
}

fn parse_action(el: &El<'_, '_>) -> Result<TriggerSpec, EntrieError> {
    el.check_attrs(ACTION_ATTRS)?;
    let id = el.req("ID")?.to_owned();
    let name = el.req("name")?;
    let el = El { node: el.node, path: format!("{}[ID={id}]", el.path) };
    let mut action = None;
    let mut repeat = None;
    let mut conditions = None;
    for child in el.children() {
        match child.node.tag_name().name() {
            "params" => action = Some(parse_params(&child, name)?),
            "repeat" => repeat = Some(parse_repeat(&child)?),
            "conditions" => {
                child.check_attrs(&[])?;
                let mut list = Vec::new();
                for c in child.children() {
                    if c.node.tag_name().name() != "condition" {
                        return Err(c.err("unexpected element"));
                    }
                    list.push(parse_condition(&c)?);
                }
                if list.is_empty() {
                    return Err(child.err("a trigger needs at least one condition"));
                }
                conditions = Some(fold_end_delays(&child, list)?);
            }
            _ => return Err(child.err("unexpected element")),
        }
    }
    let action = match action {
        Some(a) => a,
        None if name == "startNode" || name == "killNode" => {
            parse_params(&El { node: el.node, path: el.path.clone() }, name).map_err(|_| el.err("missing <params>"))?
        }
        None => return Err(el.err("missing <params>")),
    };
    let conditions = conditions.ok_or_else(|| el.err("missing <conditions>"))?;
    let spec = TriggerSpec {
        id,
        timer_name: el.attr("timerName").map(str::to_owned),
        action,
        conditions,
        repeat: repeat.unwrap_or_else(RepeatPolicy::every_transition),
    };
    let needs_binding = match &spec.action {
        ActionSpec::Execute { node, .. } => matches!(node, NodeSpec::Variable { .. }),
        ActionSpec::StartNode { node, .. } | ActionSpec::KillNode { node, .. } => {
            matches!(node, Some(NodeSpec::Variable { .. }))
        }
    };
    if needs_binding && spec.binding_condition().is_none() {
        return Err(el.err("VARIABLE_host needs a gating MAX or MIN sensor condition over ALL nodes"));
    }
    Ok(spec)
}

fn strip_declaration(xml: &str) -> &str {
    let t = xml.trim_start_matches('\u{feff}').trim_start();
    if t.starts_with("<?xml") {
        if let Some(end) = t.find("?>") {
            return &t[end + 2..];
        }
    }
    t
}

/// Parses a trigger configuration: a sequence of `<action>` elements, either
/// at top level or inside one wrapper element.
pub fn parse_config(xml: &str) -> Result<Vec<TriggerSpec>, EntrieError> {
    let wrapped = format!("<config>{}</config>", strip_declaration(xml));
    let doc = roxmltree::Document::parse(&wrapped).map_err(|e| EntrieError::Config(format!("malformed XML: {e}")))?;
    let root = El { node: doc.root_element(), path: String::new() };
    let mut elems: Vec<El<'_, '_>> = root.children().collect();
    if elems.len() == 1 && elems[0].node.tag_name().name() != "action" {
        let wrapper = elems.pop().unwrap();
        elems = wrapper.children().map(|c| El { path: c.path.clone(), node: c.node }).collect();
    }
    let mut specs = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, el) in elems.iter().enumerate() {
        if el.node.tag_name().name() != "action" {
            return Err(EntrieError::Config(format!("{}: element {} is not an <action>", el.path, i + 1)));
        }
        let spec = parse_action(el)?;
        if !ids.insert(spec.id.clone()) {
            return Err(el.err(format!("duplicate action ID {:?}", spec.id)));
        }
        specs.push(spec);
    }
    check_references(&specs)?;
    Ok(specs)
}

fn check_references(specs: &[TriggerSpec]) -> Result<(), EntrieError> {
    let mut secondaries: HashMap<&str, usize> = HashMap::new();
    for s in specs {
        for c in &s.conditions {
            if let ConditionSpec::Sensor(sc) = c {
                if let Some(id) = &sc.id {
                    if secondaries.insert(id, 0).is_some() {
                        return Err(EntrieError::Config(format!("duplicate condition ID {id:?}")));
                    }
                }
            }
        }
    }
    let action_ids: BTreeSet<&str> = specs.iter().map(|s| s.id.as_str()).collect();
    for s in specs {
        for c in &s.conditions {
            match c {
                ConditionSpec::Sensor(SensorCondition { rhs: Some(Rhs::Secondary { id, .. }), .. }) => {
                    let target = specs.iter().flat_map(|t| &t.conditions).find_map(|c| match c {
                        ConditionSpec::Sensor(sc) if sc.id.as_deref() == Some(id.as_str()) => Some(sc),
                        _ => None,
                    });
                    match target {
                        Some(sc) if sc.is_secondary => {}
                        Some(_) => {
                            return Err(EntrieError::Config(format!(
                                "action[ID={}]: secondaryID {id:?} names a condition without isSecondary",
                                s.id
                            )))
                        }
                        None => {
                            return Err(EntrieError::Config(format!(
                                "action[ID={}]: secondaryID {id:?} names no condition",
                                s.id
                            )))
                        }
                    }
                }
                ConditionSpec::Completion { action_ids: refs } => {
                    if let Some(bad) = refs.iter().find(|r| !action_ids.contains(r.as_str())) {
                        return Err(EntrieError::Config(format!(
                            "action[ID={}]: completion names unknown action {bad:?}",
                            s.id
                        )));
                    }
                }
                _ => {}
            }
        }
    }
    Ok(())
}
