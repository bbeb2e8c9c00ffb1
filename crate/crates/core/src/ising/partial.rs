use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::exact_sum::ExactSum;
use super::IsingError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AggregateOp {
    Min,
    Max,
    Avg,
    Median,
    Sum,
    Count,
    Value,
}

impl AggregateOp {
    pub const ALL: [AggregateOp; 7] = [
        AggregateOp::Min,
        AggregateOp::Max,
        AggregateOp::Avg,
        AggregateOp::Median,
        AggregateOp::Sum,
        AggregateOp::Count,
        AggregateOp::Value,
    ];

    /// Whether a partial is a single value no matter how many nodes it covers.
    pub fn is_monotonic(self) -> bool {
        matches!(self, AggregateOp::Min | AggregateOp::Max | AggregateOp::Sum | AggregateOp::Count)
    }

    pub fn name(self) -> &'static str {
        match self {
            AggregateOp::Min => "MIN",
            AggregateOp::Max => "MAX",
            AggregateOp::Avg => "AVG",
            AggregateOp::Median => "MEDIAN",
            AggregateOp::Sum => "SUM",
            AggregateOp::Count => "COUNT",
            AggregateOp::Value => "VALUE",
        }
    }
}

impl fmt::Display for AggregateOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AggregateOp {
    type Err = IsingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AggregateOp::ALL
            .into_iter()
            .find(|op| op.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| IsingError::Parse { field: "op".into(), reason: format!("unknown aggregate {s:?}") })
    }
}

/// One result line: `host:port,timestamp_ms,data`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ResultTuple {
    pub source: String,
    pub timestamp_ms: u64,
    pub data: String,
}

impl ResultTuple {
    pub fn new(source: impl Into<String>, timestamp_ms: u64, data: impl Into<String>) -> Self {
        ResultTuple { source: source.into(), timestamp_ms, data: data.into() }
    }

    pub fn numeric(&self) -> Option<f64> {
        self.data.trim().parse::<f64>().ok().filter(|v| v.is_finite())
    }

    pub fn to_csv_line(&self) -> String {
        format!("{},{},{}", self.source, self.timestamp_ms, self.data)
    }

    /// Parses a result line. The data field is everything after the second
    /// comma, so multi-column rows survive intact.
    pub fn parse_csv_line(line: &str) -> Result<Self, IsingError> {
        let mut parts = line.splitn(3, ',');
        let bad = |reason: &str| IsingError::Parse { field: "result".into(), reason: format!("{reason}: {line:?}") };
        let source = parts.next().filter(|s| !s.is_empty()).ok_or_else(|| bad("missing source"))?;
        let ts = parts.next().ok_or_else(|| bad("missing timestamp"))?;
        let data = parts.next().ok_or_else(|| bad("missing data"))?;
        let timestamp_ms = ts.trim().parse().map_err(|_| bad("bad timestamp"))?;
        Ok(ResultTuple::new(source, timestamp_ms, data))
    }
}

/// A numeric datum with its origin, ordered by value then origin so that
/// selection is independent of merge order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Datum {
    pub value: f64,
    pub tuple: ResultTuple,
}

impl Datum {
    fn cmp_key(&self, other: &Datum) -> Ordering {
        self.value.total_cmp(&other.value).then_with(|| self.tuple.cmp(&other.tuple))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PartialState {
    Extremum(Option<Datum>),
    Sum(ExactSum),
    Count(u64),
    Avg { sum: ExactSum, count: u64 },
    /// Sorted by value (MEDIAN) or by tuple (VALUE).
    Data(Vec<Datum>),
    Tuples(Vec<ResultTuple>),
}

/// Mergeable state flowing up the tree for one query epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialAggregate {
    pub op: AggregateOp,
    pub state: PartialState,
    /// Number of nodes whose values are folded in.
    pub contributing: u64,
}

impl PartialAggregate {
    /// The identity element for `op`.
    pub fn empty(op: AggregateOp) -> Self {
        let state = match op {
            AggregateOp::Min | AggregateOp::Max => PartialState::Extremum(None),
            AggregateOp::Sum => PartialState::Sum(ExactSum::new()),
            AggregateOp::Count => PartialState::Count(0),
            AggregateOp::Avg => PartialState::Avg { sum: ExactSum::new(), count: 0 },
            AggregateOp::Median => PartialState::Data(Vec::new()),
            AggregateOp::Value => PartialState::Tuples(Vec::new()),
        };
        PartialAggregate { op, state, contributing: 0 }
    }

    /// Partial for one node's local sample. Values that cannot take part in
    /// `op` (non-numeric data for numeric aggregates) are invalid and skipped;
    /// the node contributes only if at least one value survives.
    pub fn from_local(op: AggregateOp, tuples: &[ResultTuple]) -> Self {
        let mut p = PartialAggregate::empty(op);
        let mut valid = 0u64;
        for t in tuples {
            if op == AggregateOp::Value {
                if let PartialState::Tuples(v) = &mut p.state {
                    v.push(t.clone());
                }
                valid += 1;
                continue;
            }
            let Some(value) = t.numeric() else { continue };
            valid += 1;
            let d = Datum { value, tuple: t.clone() };
            match &mut p.state {
                PartialState::Extremum(cur) => *cur = Some(pick(op, cur.take(), d)),
                PartialState::Sum(s) => s.add(value),
                PartialState::Count(c) => *c += 1,
                PartialState::Avg { sum, count } => {
                    sum.add(value);
                    *count += 1;
                }
                PartialState::Data(v) => v.push(d),
                PartialState::Tuples(_) => unreachable!(),
            }
        }
        match &mut p.state {
            PartialState::Data(v) => v.sort_by(Datum::cmp_key),
            PartialState::Tuples(v) => v.sort(),
            _ => {}
        }
        p.contributing = u64::from(valid > 0);
        p
    }

    pub fn merge(&mut self, other: &PartialAggregate) -> Result<(), IsingError> {
        if self.op != other.op {
            return Err(IsingError::InvalidArgument(format!(
                "cannot merge {} into {}",
                other.op, self.op
            )));
        }
        match (&mut self.state, &other.state) {
            (PartialState::Extremum(a), PartialState::Extremum(b)) => {
                if let Some(b) = b {
                    *a = Some(match a.take() {
                        Some(x) => pick(self.op, Some(x), b.clone()),
                        None => b.clone(),
                    });
                }
            }
            (PartialState::Sum(a), PartialState::Sum(b)) => a.merge(b),
            (PartialState::Count(a), PartialState::Count(b)) => *a += b,
            (PartialState::Avg { sum, count }, PartialState::Avg { sum: s2, count: c2 }) => {
                sum.merge(s2);
                *count += c2;
            }
            (PartialState::Data(a), PartialState::Data(b)) => {
                *a = merge_sorted(std::mem::take(a), b, Datum::cmp_key);
            }
            (PartialState::Tuples(a), PartialState::Tuples(b)) => {
                *a = merge_sorted(std::mem::take(a), b, ResultTuple::cmp);
            }
            _ => return Err(IsingError::InvalidArgument("partial state does not match its op".into())),
        }
        self.contributing += other.contributing;
        Ok(())
    }

    pub fn merged(mut self, other: &PartialAggregate) -> Result<Self, IsingError> {
        self.merge(other)?;
        Ok(self)
    }

    /// How many values this partial carries on the wire: one for monotonic
    /// aggregates, two for AVG (sum and count), one per value for lists.
    pub fn value_units(&self) -> u64 {
        match &self.state {
            PartialState::Avg { .. } => 2,
            PartialState::Data(v) => v.len().max(1) as u64,
            PartialState::Tuples(v) => v.len().max(1) as u64,
            _ => 1,
        }
    }

    /// Number of individual values currently held.
    pub fn value_count(&self) -> u64 {
        match &self.state {
            PartialState::Extremum(d) => u64::from(d.is_some()),
            PartialState::Sum(_) => self.contributing,
            PartialState::Count(c) => *c,
            PartialState::Avg { count, .. } => *count,
            PartialState::Data(v) => v.len() as u64,
            PartialState::Tuples(v) => v.len() as u64,
        }
    }

    /// Turns the partial into result tuples. Aggregates that select an
    /// actual datum (MIN, MAX, MEDIAN) keep its origin; computed aggregates
    /// are attributed to `root_source` at `now_ms`.
    pub fn finalize(&self, root_source: &str, now_ms: u64) -> Vec<ResultTuple> {
        if self.contributing == 0 {
            return Vec::new();
        }
        let computed = |v: String| vec![ResultTuple::new(root_source, now_ms, v)];
        match &self.state {
            PartialState::Extremum(d) => d.iter().map(|d| d.tuple.clone()).collect(),
            PartialState::Sum(s) => computed(fmt_num(s.value())),
            PartialState::Count(c) => computed(c.to_string()),
            PartialState::Avg { sum, count } => {
                if *count == 0 {
                    Vec::new()
                } else {
                    computed(fmt_num(sum.value() / *count as f64))
                }
            }
            PartialState::Data(v) => {
                if v.is_empty() {
                    Vec::new()
                } else {
                    vec![v[(v.len() - 1) / 2].tuple.clone()]
                }
            }
            PartialState::Tuples(v) => v.clone(),
        }
    }

    /// The single numeric result, when there is one.
    pub fn scalar(&self) -> Option<f64> {
        match &self.state {
            PartialState::Tuples(_) => None,
            PartialState::Count(c) if self.contributing > 0 => Some(*c as f64),
            _ => self.finalize("", 0).first().and_then(ResultTuple::numeric),
        }
    }
}

fn pick(op: AggregateOp, cur: Option<Datum>, new: Datum) -> Datum {
    let Some(cur) = cur else { return new };
    let keep_cur = match op {
        AggregateOp::Min => cur.cmp_key(&new) != Ordering::Greater,
        // Largest value; equal values fall back to the smaller origin.
        _ => match cur.value.total_cmp(&new.value) {
            Ordering::Greater => true,
            Ordering::Less => false,
            Ordering::Equal => cur.tuple <= new.tuple,
        },
    };
    if keep_cur {
        cur
    } else {
        new
    }
}

fn merge_sorted<T: Clone>(a: Vec<T>, b: &[T], cmp: impl Fn(&T, &T) -> Ordering) -> Vec<T> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let mut ai = a.into_iter().peekable();
    let mut bi = b.iter().peekable();
    loop {
        match (ai.peek(), bi.peek()) {
            (Some(x), Some(y)) => {
                if cmp(x, y) != Ordering::Greater {
                    out.push(ai.next().unwrap());
                } else {
                    out.push(bi.next().unwrap().clone());
                }
            }
            (Some(_), None) => out.push(ai.next().unwrap()),
            (None, Some(_)) => out.push(bi.next().unwrap().clone()),
            (None, None) => break,
        }
    }
    out
}

pub(crate) fn fmt_num(v: f64) -> String {
    format!("{v}")
}
