use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, HashMap, VecDeque};
use std::io::Write;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ActionSpec, ConditionSpec, NodeSpec, RepeatMode, RepeatPolicy, Rhs, SensorCondition, TriggerSpec};
use crate::ising::{AggregateOp, ResultTuple};
use crate::sensact::{AckStatus, ActuatorResult};

/// One sensor reading kept in a condition's history.
#[derive(Debug, Clone, PartialEq)]
pub struct Reading {
    pub t_ms: u64,
    pub value: f64,
    /// `host:port` the value came from.
    pub source: String,
}

/// The last `cap` readings, oldest first.
#[derive(Debug, Clone)]
pub struct ConditionHistory {
    cap: usize,
    ring: VecDeque<Reading>,
}

impl ConditionHistory {
    pub fn new(cap: usize) -> Self {
        ConditionHistory { cap: cap.max(1), ring: VecDeque::new() }
    }

    pub fn push(&mut self, r: Reading) {
        if self.ring.len() == self.cap {
            self.ring.pop_front();
        }
        self.ring.push_back(r);
    }

    pub fn len(&self) -> usize {
        self.ring.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ring.is_empty()
    }

    pub fn readings(&self) -> impl Iterator<Item = &Reading> {
        self.ring.iter()
    }

    /// Aggregates the history. Selecting aggregates also report which
    /// reading won, so its source can be bound to an action.
    pub fn aggregate(&self, op: AggregateOp) -> Option<(f64, Option<&Reading>)> {
        if self.ring.is_empty() {
            return None;
        }
        let pick = |better: fn(f64, f64) -> bool| {
            let mut best = &self.ring[0];
            for r in self.ring.iter().skip(1) {
                if better(r.value, best.value) {
                    best = r;
                }
            }
            Some((best.value, Some(best)))
        };
        match op {
            AggregateOp::Max => pick(|a, b| a > b),
            AggregateOp::Min => pick(|a, b| a < b),
            AggregateOp::Sum => Some((self.ring.iter().map(|r| r.value).sum(), None)),
            AggregateOp::Avg => Some((self.ring.iter().map(|r| r.value).sum::<f64>() / self.ring.len() as f64, None)),
            AggregateOp::Count => Some((self.ring.len() as f64, None)),
            AggregateOp::Median => {
                let mut v: Vec<&Reading> = self.ring.iter().collect();
                v.sort_by(|a, b| a.value.total_cmp(&b.value));
                let m = v[(v.len() - 1) / 2];
                Some((m.value, Some(m)))
            }
            AggregateOp::Value => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CondEval {
    pub holds: bool,
    /// The host singled out by a MAX/MIN condition, when it holds.
    pub fired_node: Option<String>,
}

fn host_of(source: &str) -> String {
    source.rsplit_once(':').map(|(h, _)| h).unwrap_or(source).to_owned()
}

/// Evaluates a gating sensor condition against its history. `fresh` is false
/// when the most recent fetch failed; `secondary` is the current value of
/// the referenced secondary condition, if any.
pub fn eval_sensor(cond: &SensorCondition, history: &ConditionHistory, fresh: bool, secondary: Option<f64>) -> CondEval {
    let (Some(cmp), Some(rhs)) = (cond.comparator, &cond.rhs) else {
        return CondEval::default();
    };
    if !fresh {
        return CondEval::default();
    }
    let Some((lhs, winner)) = history.aggregate(cond.hist_agg) else {
        return CondEval::default();
    };
    let rhs = match rhs {
        Rhs::Const(c) => *c,
        Rhs::Secondary { scaling, .. } => match secondary {
            Some(v) => v * scaling,
            None => return CondEval::default(),
        },
    };
    let holds = cmp.holds(lhs.total_cmp(&rhs));
    let selecting = matches!(cond.sensor_agg, AggregateOp::Max | AggregateOp::Min)
        && matches!(cond.node, NodeSpec::All { .. });
    // AVG/SUM histories pick no reading; fall back to the newest one
    let winner = winner.or_else(|| history.readings().last());
    CondEval { holds, fired_node: if holds && selecting { winner.map(|r| host_of(&r.source)) } else { None } }
}

/// Per-trigger repeat bookkeeping.
#[derive(Debug, Clone, Default)]
pub struct RepeatState {
    prev: bool,
    fired_ever: bool,
    intervals: u32,
    next_fire: Option<u64>,
}

impl RepeatState {
    /// Feeds the conjunction's current truth value; returns whether the action
    /// fires now.
    pub fn step(&mut self, policy: &RepeatPolicy, cur: bool, now_ms: u64, rng: &mut ChaCha8Rng) -> bool {
        let rising = cur && !self.prev;
        if rising {
            self.intervals += 1;
        }
        let periodic_due = |st: &mut RepeatState, rng: &mut ChaCha8Rng| -> bool {
            let period = policy.period.expect("periodic policies carry a period");
            if rising {
                st.next_fire = Some(now_ms + period.sample(rng));
                return true;
            }
            match st.next_fire {
                Some(t) if now_ms >= t => {
                    st.next_fire = Some(t + period.sample(rng));
                    true
                }
                _ => false,
            }
        };
        let fire = match policy.mode {
            RepeatMode::FirstTransition => rising && !self.fired_ever,
            RepeatMode::EveryTransition => rising,
            RepeatMode::PeriodicFirstTrue => cur && self.intervals == 1 && periodic_due(self, rng),
            RepeatMode::PeriodicEveryTrue => cur && periodic_due(self, rng),
        };
        if !cur {
            self.next_fire = None;
        }
        self.prev = cur;
        self.fired_ever |= fire;
        fire
    }

    pub fn next_due(&self) -> Option<u64> {
        self.next_fire
    }

    /// True when no future input can make this policy fire again.
    fn exhausted(&self, policy: &RepeatPolicy) -> bool {
        match policy.mode {
            RepeatMode::FirstTransition => self.fired_ever,
            RepeatMode::PeriodicFirstTrue => self.intervals >= 1 && !self.prev,
            _ => false,
        }
    }
}

/// Everything the loop needs to ask a sensor for.
#[derive(Debug, Clone, Copy)]
pub struct SensorFetch<'a> {
    pub roots: &'a [String],
    pub node: &'a NodeSpec,
    pub sensor: &'a str,
    pub op: AggregateOp,
    pub period_ms: u64,
}

/// Source of sensor readings: ISING roots over HTTP, or a simulator.
pub trait SensorSource {
    fn fetch(&mut self, now_ms: u64, req: &SensorFetch<'_>) -> Result<Vec<ResultTuple>, String>;
}

impl<F> SensorSource for F
where
    F: FnMut(u64, &SensorFetch<'_>) -> Result<Vec<ResultTuple>, String>,
{
    fn fetch(&mut self, now_ms: u64, req: &SensorFetch<'_>) -> Result<Vec<ResultTuple>, String> {
        self(now_ms, req)
    }
}

/// Where an actuator call goes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Target {
    /// The executor's default actuator server.
    Local,
    /// One `host:port`.
    Node(String),
    /// Every node, through an ISING root.
    All { port: u16 },
}

impl std::fmt::Display for Target {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Target::Local => f.write_str("local"),
            Target::Node(n) => f.write_str(n),
            Target::All { port } => write!(f, "ALL:{port}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Invocation {
    pub actuator: String,
    pub target: Target,
    /// ISING roots for ALL targets, in failover order.
    pub roots: Vec<String>,
    /// URL query string, without the leading `?`.
    pub args: String,
}

pub trait Executor {
    fn invoke(&mut self, now_ms: u64, inv: &Invocation) -> ActuatorResult;
}

/// One line of the firing transcript: `timestamp_ms,trigger_id,action,target,status`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptRow {
    pub timestamp_ms: u64,
    pub trigger_id: String,
    pub action: String,
    pub target: String,
    pub status: AckStatus,
}

pub fn write_transcript<W: Write>(rows: &[TranscriptRow], out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["timestamp_ms", "trigger_id", "action", "target", "status"])?;
    for r in rows {
        w.write_record([
            r.timestamp_ms.to_string().as_str(),
            &r.trigger_id,
            &r.action,
            &r.target,
            r.status.as_str(),
        ])?;
    }
    w.flush()
}

#[derive(Debug)]
struct SensorState {
    history: ConditionHistory,
    next_fetch: u64,
    fresh: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct PendingKill {
    at: u64,
    seq: u64,
    trigger: usize,
    target: Target,
    id: u64,
}

/// Trigger evaluation state. Dropping it and building a new one from the
/// same specs is a restart: every history is gone.
pub struct TriggerEngine {
    specs: Vec<TriggerSpec>,
    repeat: Vec<RepeatState>,
    sensors: HashMap<(usize, usize), SensorState>,
    secondaries: HashMap<String, (usize, usize)>,
    completed: BTreeSet<String>,
    live: Vec<(Target, u64)>,
    kills: BinaryHeap<Reverse<PendingKill>>,
    kill_seq: u64,
    rng: ChaCha8Rng,
    tick_ms: u64,
    transcript: Vec<TranscriptRow>,
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Loop tick: gcd of all sensor-condition periods, never below 100 ms.
pub fn evaluation_tick(specs: &[TriggerSpec]) -> u64 {
    let g = specs
        .iter()
        .flat_map(|s| &s.conditions)
        .filter_map(|c| match c {
            ConditionSpec::Sensor(sc) => Some(sc.period_ms),
            _ => None,
        })
        .fold(0, gcd);
    if g == 0 {
        100
    } else {
        g.max(100)
    }
}

impl TriggerEngine {
    pub fn new(specs: Vec<TriggerSpec>, seed: u64) -> Self {
        let mut sensors = HashMap::new();
        let mut secondaries = HashMap::new();
        for (ti, s) in specs.iter().enumerate() {
            for (ci, c) in s.conditions.iter().enumerate() {
                if let ConditionSpec::Sensor(sc) = c {
                    sensors.insert(
                        (ti, ci),
                        SensorState { history: ConditionHistory::new(sc.hist_size), next_fetch: 0, fresh: false },
                    );
                    if let Some(id) = &sc.id {
                        secondaries.insert(id.clone(), (ti, ci));
                    }
                }
            }
        }
        TriggerEngine {
            tick_ms: evaluation_tick(&specs),
            repeat: vec![RepeatState::default(); specs.len()],
            specs,
            sensors,
            secondaries,
            completed: BTreeSet::new(),
            live: Vec::new(),
            kills: BinaryHeap::new(),
            kill_seq: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            transcript: Vec::new(),
        }
    }

    pub fn specs(&self) -> &[TriggerSpec] {
        &self.specs
    }

    pub fn tick_ms(&self) -> u64 {
        self.tick_ms
    }

    pub fn transcript(&self) -> &[TranscriptRow] {
        &self.transcript
    }

    pub fn completed(&self) -> &BTreeSet<String> {
        &self.completed
    }

    /// Instances started by this engine and not yet killed by it.
    pub fn live_instances(&self) -> usize {
        self.live.len()
    }

    pub fn pending_kills(&self) -> usize {
        self.kills.len()
    }

    /// History of one sensor condition, by trigger and condition index.
    pub fn history(&self, trigger: usize, condition: usize) -> Option<&ConditionHistory> {
        self.sensors.get(&(trigger, condition)).map(|s| &s.history)
    }

    fn secondary_value(&self, id: &str) -> Option<f64> {
        let key = self.secondaries.get(id)?;
        let st = self.sensors.get(key)?;
        let ConditionSpec::Sensor(sc) = &self.specs[key.0].conditions[key.1] else { return None };
        st.history.aggregate(sc.hist_agg).map(|(v, _)| v)
    }

    /// Evaluates one condition at `now_ms` (run-relative).
    pub fn eval_condition(&self, trigger: usize, condition: usize, now_ms: u64) -> CondEval {
        match &self.specs[trigger].conditions[condition] {
            ConditionSpec::Timer { not_before_ms, not_after_ms } => CondEval {
                holds: *not_before_ms <= now_ms && not_after_ms.is_none_or(|na| now_ms < na),
                fired_node: None,
            },
            ConditionSpec::Completion { action_ids } => CondEval {
                holds: action_ids.iter().all(|a| self.completed.contains(a)),
                fired_node: None,
            },
            ConditionSpec::Sensor(sc) => {
                if sc.is_secondary {
                    // computes values, never gates
                    return CondEval { holds: true, fired_node: None };
                }
                let st = &self.sensors[&(trigger, condition)];
                let secondary = match &sc.rhs {
                    Some(Rhs::Secondary { id, .. }) => self.secondary_value(id),
                    _ => None,
                };
                eval_sensor(sc, &st.history, st.fresh, secondary)
            }
        }
    }

    fn refresh_sensors(&mut self, now_ms: u64, source: &mut dyn SensorSource) {
        let mut keys: Vec<(usize, usize)> = self.sensors.keys().copied().collect();
        keys.sort_unstable();
        for key in keys {
            let ConditionSpec::Sensor(sc) = &self.specs[key.0].conditions[key.1] else { continue };
            let st = self.sensors.get_mut(&key).unwrap();
            if st.next_fetch > now_ms {
                continue;
            }
            while st.next_fetch <= now_ms {
                st.next_fetch += sc.period_ms;
            }
            let req = SensorFetch {
                roots: &sc.roots,
                node: &sc.node,
                sensor: &sc.sensor,
                op: sc.sensor_agg,
                period_ms: sc.period_ms,
            };
            let reading = source.fetch(now_ms, &req).and_then(|tuples| {
                let t = tuples.first().ok_or_else(|| "empty result".to_owned())?;
                let value = t.numeric().ok_or_else(|| format!("non-numeric reading {:?}", t.data))?;
                Ok(Reading { t_ms: now_ms, value, source: t.source.clone() })
            });
            match reading {
                Ok(r) => {
                    st.history.push(r);
                    st.fresh = true;
                }
                Err(e) => {
                    log::warn!("sensor {} unavailable: {e}", sc.sensor);
                    st.fresh = false;
                }
            }
        }
    }

    fn record(&mut self, now_ms: u64, trigger: usize, action: &str, target: &Target, status: AckStatus) {
        self.transcript.push(TranscriptRow {
            timestamp_ms: now_ms,
            trigger_id: self.specs[trigger].id.clone(),
            action: action.to_owned(),
            target: target.to_string(),
            status,
        });
    }

    fn resolve(node: Option<&NodeSpec>, fired: Option<&str>) -> Result<Target, String> {
        match node {
            None => Ok(Target::Local),
            Some(NodeSpec::Host { host, port }) => Ok(Target::Node(format!("{host}:{port}"))),
            Some(NodeSpec::All { port }) => Ok(Target::All { port: *port }),
            Some(NodeSpec::Variable { port }) => match fired {
                Some(h) => Ok(Target::Node(format!("{h}:{port}"))),
                None => Err("no node bound to VARIABLE_host".into()),
            },
        }
    }

    fn execute(&mut self, now_ms: u64, trigger: usize, fired: Option<String>, exec: &mut dyn Executor) {
        let action = self.specs[trigger].action.clone();
        let name = action.name().to_owned();
        let (node, roots) = match &action {
            ActionSpec::StartNode { node, .. } | ActionSpec::KillNode { node, .. } => (node.as_ref(), Vec::new()),
            ActionSpec::Execute { node, roots, .. } => (Some(node), roots.clone()),
        };
        let target = match Self::resolve(node, fired.as_deref()) {
            Ok(t) => t,
            Err(e) => {
                log::warn!("trigger {}: {e}", self.specs[trigger].id);
                self.record(now_ms, trigger, &name, &Target::Local, AckStatus::Error);
                return;
            }
        };
        let ok = match action {
            ActionSpec::Execute { actuator, args, .. } => {
                let inv = Invocation { actuator, target: target.clone(), roots, args };
                let res = exec.invoke(now_ms, &inv);
                self.record(now_ms, trigger, &name, &target, res.status);
                res.is_ok()
            }
            ActionSpec::StartNode { count, lifetime, .. } => {
                let inv = Invocation {
                    actuator: "start".into(),
                    target: target.clone(),
                    roots,
                    args: format!("count={count}"),
                };
                let res = exec.invoke(now_ms, &inv);
                self.record(now_ms, trigger, &name, &target, res.status);
                if res.is_ok() {
                    let ids: Vec<u64> = res
                        .detail
                        .split_whitespace()
                        .filter_map(|w| w.parse().ok())
                        .collect();
                    for id in ids {
                        self.live.push((target.clone(), id));
                        if let Some(l) = lifetime {
                            let at = now_ms + l.sample(&mut self.rng);
                            self.kill_seq += 1;
                            self.kills.push(Reverse(PendingKill {
                                at,
                                seq: self.kill_seq,
                                trigger,
                                target: target.clone(),
                                id,
                            }));
                        }
                    }
                }
                res.is_ok()
            }
            ActionSpec::KillNode { count, .. } => {
                let n = (count as usize).min(self.live.len());
                let mut picks: Vec<usize> = sample(&mut self.rng, self.live.len(), n).into_vec();
                picks.sort_unstable_by(|a, b| b.cmp(a));
                let mut all_ok = n > 0;
                for i in picks {
                    let (t, id) = self.live.remove(i);
                    all_ok &= self.kill(now_ms, trigger, &t, id, exec);
                }
                if n == 0 {
                    self.record(now_ms, trigger, &name, &target, AckStatus::Error);
                }
                all_ok
            }
        };
        if ok {
            self.completed.insert(self.specs[trigger].id.clone());
        }
    }

    fn kill(&mut self, now_ms: u64, trigger: usize, target: &Target, id: u64, exec: &mut dyn Executor) -> bool {
        let inv = Invocation {
            actuator: "kill".into(),
            target: target.clone(),
            roots: Vec::new(),
            args: format!("target={id}"),
        };
        let res = exec.invoke(now_ms, &inv);
        self.record(now_ms, trigger, "kill", target, res.status);
        res.is_ok()
    }

    /// Runs everything due at `now_ms` and returns when to wake next, or
    /// `None` once no trigger can ever fire again.
    pub fn step(&mut self, now_ms: u64, source: &mut dyn SensorSource, exec: &mut dyn Executor) -> Option<u64> {
        self.refresh_sensors(now_ms, source);
        while self.kills.peek().is_some_and(|k| k.0.at <= now_ms) {
            let Reverse(k) = self.kills.pop().unwrap();
            if let Some(pos) = self.live.iter().position(|(t, id)| *t == k.target && *id == k.id) {
                self.live.remove(pos);
                self.kill(k.at, k.trigger, &k.target, k.id, exec);
            }
        }
        for t in 0..self.specs.len() {
            let mut cur = true;
            let mut fired = None;
            for c in 0..self.specs[t].conditions.len() {
                let e = self.eval_condition(t, c, now_ms);
                cur &= e.holds;
                if e.fired_node.is_some() {
                    fired = e.fired_node;
                }
            }
            let policy = self.specs[t].repeat;
            if self.repeat[t].step(&policy, cur, now_ms, &mut self.rng) {
                self.execute(now_ms, t, fired, exec);
            }
        }
        if self.settled(now_ms) {
            return None;
        }
        let mut next = now_ms + self.tick_ms;
        let mut consider = |t: u64| {
            if t > now_ms {
                next = next.min(t);
            }
        };
        for st in self.sensors.values() {
            consider(st.next_fetch);
        }
        if let Some(k) = self.kills.peek() {
            consider(k.0.at);
        }
        for (t, spec) in self.specs.iter().enumerate() {
            if let Some(d) = self.repeat[t].next_due() {
                consider(d);
            }
            for c in &spec.conditions {
                if let ConditionSpec::Timer { not_before_ms, not_after_ms } = c {
                    consider(*not_before_ms);
                    if let Some(na) = not_after_ms {
                        consider(*na);
                    }
                }
            }
        }
        Some(next)
    }

    /// No trigger can fire again: each is past its timer window, or its
    /// policy is used up, or it depends only on conditions that stay true
    /// forever and has already fired on their rising edge.
    fn settled(&self, now_ms: u64) -> bool {
        self.specs.iter().enumerate().all(|(t, spec)| {
            let expired = spec.conditions.iter().any(|c| {
                matches!(c, ConditionSpec::Timer { not_after_ms: Some(na), .. } if now_ms >= *na)
            });
            let stuck_true = !matches!(spec.repeat.mode, RepeatMode::PeriodicEveryTrue | RepeatMode::PeriodicFirstTrue)
                && self.repeat[t].fired_ever
                && spec.conditions.iter().enumerate().all(|(c, cond)| match cond {
                    ConditionSpec::Timer { not_after_ms: None, .. } | ConditionSpec::Completion { .. } => {
                        self.eval_condition(t, c, now_ms).holds
                    }
                    _ => false,
                });
            expired || stuck_true || self.repeat[t].exhausted(&spec.repeat)
        })
    }
}

/// Time source for [`trigger_loop`].
pub trait Clock {
    /// Milliseconds since the loop started.
    fn now_ms(&self) -> u64;
    fn sleep_until(&mut self, t_ms: u64);
}

/// Virtual time: sleeping jumps straight to the wake-up instant.
#[derive(Debug, Default)]
pub struct SimClock {
    now: u64,
}

impl Clock for SimClock {
    fn now_ms(&self) -> u64 {
        self.now
    }

    fn sleep_until(&mut self, t_ms: u64) {
        self.now = self.now.max(t_ms);
    }
}

/// Wall-clock time from the moment of construction.
#[derive(Debug)]
pub struct WallClock {
    start: std::time::Instant,
}

impl WallClock {
    pub fn start() -> Self {
        WallClock { start: std::time::Instant::now() }
    }
}

impl Clock for WallClock {
    fn now_ms(&self) -> u64 {
        self.start.elapsed().as_millis() as u64
    }

    fn sleep_until(&mut self, t_ms: u64) {
        let now = self.now_ms();
        if t_ms > now {
            std::thread::sleep(std::time::Duration::from_millis(t_ms - now));
        }
    }
}

/// Evaluates triggers until none can fire again or `horizon_ms` passes.
/// Returns the instant the loop stopped.
pub fn trigger_loop(
    engine: &mut TriggerEngine,
    clock: &mut dyn Clock,
    source: &mut dyn SensorSource,
    exec: &mut dyn Executor,
    horizon_ms: u64,
) -> u64 {
    loop {
        let now = clock.now_ms();
        if now >= horizon_ms {
            return now;
        }
        match engine.step(now, source, exec) {
            None => return now,
            Some(next) => clock.sleep_until(next.min(horizon_ms)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entrie::config::{parse_config, Dist};
    use crate::ising::Comparator;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(1)
    }

    fn run_policy(policy: RepeatPolicy, states: &[bool]) -> usize {
        let mut st = RepeatState::default();
        let mut r = rng();
        states.iter().enumerate().filter(|(i, s)| st.step(&policy, **s, *i as u64 * 1000, &mut r)).count()
    }

    #[test]
    fn first_and_every_transition() {
        let seq = [false, true, false, true];
        let first = RepeatPolicy { mode: RepeatMode::FirstTransition, period: None };
        assert_eq!(run_policy(first, &seq), 1);
        assert_eq!(run_policy(RepeatPolicy::every_transition(), &seq), 2);
        // staying true is not a new transition
        assert_eq!(run_policy(RepeatPolicy::every_transition(), &[true, true, true]), 1);
    }

    #[test]
    fn periodic_modes() {
        let p = Some(Dist::Fixed(2000));
        let seq = [true, true, true, true, true, false, true, true, true];
        // fires at 0, 2000, 4000 in the first interval, then 6000 and 8000 in the second
        let every = RepeatPolicy { mode: RepeatMode::PeriodicEveryTrue, period: p };
        assert_eq!(run_policy(every, &seq), 5);
        let first = RepeatPolicy { mode: RepeatMode::PeriodicFirstTrue, period: p };
        assert_eq!(run_policy(first, &seq), 3);
    }

    fn reading(v: f64, src: &str) -> Reading {
        Reading { t_ms: 0, value: v, source: src.into() }
    }

    #[test]
    fn history_is_bounded_and_one_element_agg_is_identity() {
        let mut h = ConditionHistory::new(3);
        for i in 0..10 {
            h.push(reading(i as f64, "a:1"));
            assert!(h.len() <= 3);
        }
        assert_eq!(h.aggregate(AggregateOp::Avg).unwrap().0, 8.0);
        let mut one = ConditionHistory::new(1);
        one.push(reading(4.5, "a:1"));
        for op in [AggregateOp::Min, AggregateOp::Max, AggregateOp::Avg, AggregateOp::Sum, AggregateOp::Median] {
            assert_eq!(one.aggregate(op).unwrap().0, 4.5);
        }
    }

    fn gate(rhs: Rhs) -> SensorCondition {
        SensorCondition {
            id: None,
            roots: vec!["r:1".into()],
            node: NodeSpec::All { port: 9000 },
            sensor: "load".into(),
            period_ms: 60_000,
            sensor_agg: AggregateOp::Max,
            hist_size: 1,
            hist_agg: AggregateOp::Max,
            is_secondary: false,
            comparator: Some(Comparator::Gt),
            rhs: Some(rhs),
        }
    }

    #[test]
    fn max_against_scaled_secondary_binds_host() {
        let mut h = ConditionHistory::new(1);
        h.push(reading(12.0, "node17:9000"));
        let c = gate(Rhs::Secondary { id: "s".into(), scaling: 5.0 });
        let e = eval_sensor(&c, &h, true, Some(2.0));
        assert_eq!(e, CondEval { holds: true, fired_node: Some("node17".into()) });
        assert!(!eval_sensor(&c, &h, true, Some(2.5)).holds);
        assert!(!eval_sensor(&c, &h, true, None).holds);
        assert!(!eval_sensor(&c, &h, false, Some(2.0)).holds);
        assert!(eval_sensor(&gate(Rhs::Const(11.0)), &h, true, None).holds);
    }

    #[derive(Default)]
    struct Recorder {
        calls: Vec<(u64, Invocation)>,
        next_id: u64,
    }

    impl Executor for Recorder {
        fn invoke(&mut self, now_ms: u64, inv: &Invocation) -> ActuatorResult {
            self.calls.push((now_ms, inv.clone()));
            if inv.actuator == "start" {
                let n: u64 = inv.args.trim_start_matches("count=").parse().unwrap();
                let ids: Vec<String> = (0..n).map(|_| {
                    self.next_id += 1;
                    self.next_id.to_string()
                }).collect();
                ActuatorResult::ok(format!("started {}", ids.join(" ")))
            } else {
                ActuatorResult::ok("done")
            }
        }
    }

    fn no_sensors(_: u64, _: &SensorFetch<'_>) -> Result<Vec<ResultTuple>, String> {
        Err("no sensors".into())
    }

    #[test]
    fn timer_zero_fires_at_start_and_loop_ends() {
        let xml = r#"<action ID="1" name="startNode"><params numToStart="2"/>
            <conditions><condition type="timer" value="0"/></conditions></action>"#;
        let mut e = TriggerEngine::new(parse_config(xml).unwrap(), 1);
        let mut exec = Recorder::default();
        let end = trigger_loop(&mut e, &mut SimClock::default(), &mut no_sensors, &mut exec, 10_000);
        assert_eq!(end, 0);
        assert_eq!(exec.calls.len(), 1);
        assert_eq!(exec.calls[0].1.args, "count=2");
        assert_eq!(e.live_instances(), 2);
    }

    #[test]
    fn empty_config_idles_to_settled() {
        let mut e = TriggerEngine::new(Vec::new(), 1);
        let end = trigger_loop(&mut e, &mut SimClock::default(), &mut no_sensors, &mut Recorder::default(), 5000);
        assert_eq!(end, 0);
    }

    #[test]
    fn completion_orders_actions() {
        let xml = r#"
        <action ID="a" name="startNode"><params numToStart="1"/>
            <conditions><condition type="timer" value="5000"/></conditions></action>
        <action ID="b" name="startNode"><params numToStart="3"/>
            <conditions><condition type="completion" value="a"/></conditions></action>"#;
        let mut e = TriggerEngine::new(parse_config(xml).unwrap(), 1);
        let mut exec = Recorder::default();
        trigger_loop(&mut e, &mut SimClock::default(), &mut no_sensors, &mut exec, 60_000);
        let times: Vec<(u64, &str)> = exec.calls.iter().map(|(t, i)| (*t, i.args.as_str())).collect();
        assert_eq!(times, vec![(5000, "count=1"), (5000, "count=3")]);
    }

    #[test]
    fn end_delay_boundary() {
        let xml = r#"<action ID="1" name="startNode"><params/><repeat period="1000"/>
            <conditions><condition type="timer" value="0"/><condition type="endDelay" value="1800000"/></conditions></action>"#;
        let e = TriggerEngine::new(parse_config(xml).unwrap(), 1);
        assert!(e.eval_condition(0, 0, 1_799_999).holds);
        assert!(!e.eval_condition(0, 0, 1_800_000).holds);
        assert!(!e.eval_condition(0, 0, 1_800_001).holds);
    }

    #[test]
    fn tick_is_gcd_with_floor() {
        let xml = r#"<action ID="1" name="EXECUTE"><params name="x" node="h:1"/>
            <conditions>
              <condition type="sensor" name="a" node="h:2" period="60000" operator="&gt;" value="1"/>
              <condition type="sensor" name="b" node="h:2" period="45000" operator="&gt;" value="1"/>
            </conditions></action>"#;
        assert_eq!(evaluation_tick(&parse_config(xml).unwrap()), 15_000);
        let xml = xml.replace("45000", "50");
        assert_eq!(evaluation_tick(&parse_config(&xml).unwrap()), 100);
    }

    #[test]
    fn restart_forgets_history_and_refires() {
        let xml = r#"<action ID="1" name="EXECUTE"><params name="page" node="ops:1"/><repeat mode="firstTransition"/>
            <conditions><condition type="sensor" name="load" node="h:9000" period="1000" operator="&gt;" value="3"/></conditions></action>"#;
        let specs = parse_config(xml).unwrap();
        let mut src = |_: u64, _: &SensorFetch<'_>| Ok(vec![ResultTuple::new("h:9000", 0, "5")]);
        let mut exec = Recorder::default();
        let mut e = TriggerEngine::new(specs.clone(), 1);
        trigger_loop(&mut e, &mut SimClock::default(), &mut src, &mut exec, 10_000);
        assert_eq!(exec.calls.len(), 1);
        let mut e = TriggerEngine::new(specs, 1);
        trigger_loop(&mut e, &mut SimClock::default(), &mut src, &mut exec, 10_000);
        assert_eq!(exec.calls.len(), 2);
    }

    #[test]
    fn unreachable_sensor_keeps_condition_false() {
        let xml = r#"<action ID="1" name="EXECUTE"><params name="page" node="ops:1"/>
            <conditions><condition type="sensor" name="load" node="h:9000" period="1000" operator="&gt;" value="3"/></conditions></action>"#;
        let mut e = TriggerEngine::new(parse_config(xml).unwrap(), 1);
        let mut exec = Recorder::default();
        trigger_loop(&mut e, &mut SimClock::default(), &mut no_sensors, &mut exec, 10_000);
        assert!(exec.calls.is_empty());
    }

    #[test]
    fn transcript_csv() {
        let rows = vec![TranscriptRow {
            timestamp_ms: 5,
            trigger_id: "2".into(),
            action: "startNode".into(),
            target: "local".into(),
            status: AckStatus::Ok,
        }];
        let mut out = Vec::new();
        write_transcript(&rows, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "timestamp_ms,trigger_id,action,target,status\n5,2,startNode,local,OK\n");
    }
}
