use std::fmt;

use regex::Regex;
use url::form_urlencoded;

use super::partial::AggregateOp;
use super::IsingError;

/// Which nodes a query reaches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HostScope {
    All,
    /// One machine, contacted directly by the root without using the tree.
    Host(String),
}

/// Row filter and column projection applied to raw sensor output.
/// Columns are 1-based.
#[derive(Debug, Clone)]
pub struct Selection {
    pub row_filter: Option<(usize, Regex)>,
    pub value_column: Option<usize>,
}

impl PartialEq for Selection {
    fn eq(&self, other: &Self) -> bool {
        let key = |s: &Selection| s.row_filter.as_ref().map(|(c, r)| (*c, r.as_str().to_owned()));
        key(self) == key(other) && self.value_column == other.value_column
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorRef {
    pub port: u16,
    pub sensor: String,
    pub selection: Option<Selection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Comparator {
    Eq,
    Ne,
    Gt,
    Lt,
    Ge,
    Le,
}

impl Comparator {
    pub const ALL: [Comparator; 6] =
        [Comparator::Ge, Comparator::Le, Comparator::Ne, Comparator::Eq, Comparator::Gt, Comparator::Lt];

    pub fn symbol(self) -> &'static str {
        match self {
            Comparator::Eq => "=",
            Comparator::Ne => "!=",
            Comparator::Gt => ">",
            Comparator::Lt => "<",
            Comparator::Ge => ">=",
            Comparator::Le => "<=",
        }
    }

    pub fn parse(s: &str) -> Option<Comparator> {
        match s.trim() {
            "=" | "==" => Some(Comparator::Eq),
            "!=" => Some(Comparator::Ne),
            ">" => Some(Comparator::Gt),
            "<" => Some(Comparator::Lt),
            ">=" => Some(Comparator::Ge),
            "<=" => Some(Comparator::Le),
            _ => None,
        }
    }

    pub fn holds(self, ord: std::cmp::Ordering) -> bool {
        use std::cmp::Ordering::*;
        match self {
            Comparator::Eq => ord == Equal,
            Comparator::Ne => ord != Equal,
            Comparator::Gt => ord == Greater,
            Comparator::Lt => ord == Less,
            Comparator::Ge => ord != Less,
            Comparator::Le => ord != Greater,
        }
    }
}

impl fmt::Display for Comparator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Operand {
    Const(String),
    Sensor(SensorRef),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clause {
    pub lhs: SensorRef,
    pub cmp: Comparator,
    pub rhs: Operand,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connective {
    And,
    Or,
}

/// Clauses folded left to right; no precedence, no parentheses.
#[derive(Debug, Clone, PartialEq)]
pub struct PredicateExpr {
    pub first: Clause,
    pub rest: Vec<(Connective, Clause)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorQuery {
    pub sensor_port: u16,
    pub sensor_name: String,
    pub host: HostScope,
    pub op: AggregateOp,
    /// Zero means a one-shot snapshot.
    pub epoch_ms: u64,
    pub selection: Option<Selection>,
    pub predicate: Option<PredicateExpr>,
}

impl SensorQuery {
    pub fn new(port: u16, sensor: impl Into<String>, host: HostScope, op: AggregateOp, epoch_ms: u64) -> Self {
        SensorQuery {
            sensor_port: port,
            sensor_name: sensor.into(),
            host,
            op,
            epoch_ms,
            selection: None,
            predicate: None,
        }
    }

    pub fn is_snapshot(&self) -> bool {
        self.epoch_ms == 0
    }

    /// Serializes back to the `/ising?...` form accepted by [`parse_query`].
    pub fn to_url(&self) -> String {
        let mut q = form_urlencoded::Serializer::new(String::new());
        q.append_pair("port", &self.sensor_port.to_string());
        q.append_pair("sensor", &self.sensor_name);
        q.append_pair(
            "host",
            match &self.host {
                HostScope::All => "ALL",
                HostScope::Host(h) => h,
            },
        );
        q.append_pair("op", self.op.name());
        q.append_pair("epoch", &self.epoch_ms.to_string());
        if let Some(sel) = &self.selection {
            if let Some((col, re)) = &sel.row_filter {
                q.append_pair("rowcol", &col.to_string());
                q.append_pair("rowregex", re.as_str());
            }
            if let Some(v) = sel.value_column {
                q.append_pair("valcol", &v.to_string());
            }
        }
        if let Some(p) = &self.predicate {
            q.append_pair("pred", &p.to_string());
        }
        format!("/ising?{}", q.finish())
    }
}

fn perr(field: &str, reason: impl Into<String>) -> IsingError {
    IsingError::Parse { field: field.into(), reason: reason.into() }
}

fn parse_column(field: &str, s: &str) -> Result<usize, IsingError> {
    match s.trim().parse::<usize>() {
        Ok(c) if c >= 1 => Ok(c),
        _ => Err(perr(field, format!("column must be an integer >= 1, got {s:?}"))),
    }
}

fn parse_regex(field: &str, s: &str) -> Result<Regex, IsingError> {
    Regex::new(s).map_err(|e| perr(field, e.to_string()))
}

/// Parses `/ising?port=&sensor=&host=&op=&epoch=[&rowcol=&rowregex=][&valcol=][&pred=]`.
pub fn parse_query(url: &str) -> Result<SensorQuery, IsingError> {
    let (path, qs) = match url.split_once('?') {
        Some((p, q)) => (p, q),
        None => ("", url),
    };
    if !path.is_empty() && path.trim_end_matches('/') != "/ising" {
        return Err(perr("path", format!("expected /ising, got {path:?}")));
    }
    let mut port = None;
    let mut sensor = None;
    let mut host = None;
    let mut op = None;
    let mut epoch = None;
    let mut rowcol = None;
    let mut rowregex = None;
    let mut valcol = None;
    let mut pred = None;
    for (k, v) in form_urlencoded::parse(qs.as_bytes()) {
        let v = v.into_owned();
        match k.as_ref() {
            "port" => port = Some(v.trim().parse::<u16>().map_err(|_| perr("port", format!("bad port {v:?}")))?),
            "sensor" => sensor = Some(v),
            "host" => host = Some(v),
            "op" => op = Some(v.parse::<AggregateOp>()?),
            "epoch" => {
                let e: i64 = v.trim().parse().map_err(|_| perr("epoch", format!("bad epoch {v:?}")))?;
                if e < 0 {
                    return Err(perr("epoch", "epoch duration must be non-negative"));
                }
                epoch = Some(e as u64);
            }
            "rowcol" => rowcol = Some(parse_column("rowcol", &v)?),
            "rowregex" => rowregex = Some(parse_regex("rowregex", &v)?),
            "valcol" => valcol = Some(parse_column("valcol", &v)?),
            "pred" => pred = Some(v),
            other => return Err(perr(other, "unknown parameter")),
        }
    }
    let sensor = sensor.filter(|s| !s.is_empty()).ok_or_else(|| perr("sensor", "missing"))?;
    let host = match host.as_deref() {
        None => return Err(perr("host", "missing")),
        Some(h) if h.eq_ignore_ascii_case("ALL") => HostScope::All,
        Some("") => return Err(perr("host", "empty")),
        Some(h) => HostScope::Host(h.to_owned()),
    };
    let row_filter = match (rowcol, rowregex) {
        (Some(c), Some(r)) => Some((c, r)),
        (None, None) => None,
        (Some(_), None) => return Err(perr("rowregex", "rowcol given without rowregex")),
        (None, Some(_)) => return Err(perr("rowcol", "rowregex given without rowcol")),
    };
    let selection = (row_filter.is_some() || valcol.is_some())
        .then_some(Selection { row_filter, value_column: valcol });
    Ok(SensorQuery {
        sensor_port: port.ok_or_else(|| perr("port", "missing"))?,
        sensor_name: sensor,
        host,
        op: op.ok_or_else(|| perr("op", "missing"))?,
        epoch_ms: epoch.ok_or_else(|| perr("epoch", "missing"))?,
        selection,
        predicate: pred.as_deref().map(parse_predicate).transpose()?,
    })
}

fn parse_sensor_ref(s: &str) -> Result<SensorRef, IsingError> {
    let parts: Vec<&str> = s.trim().split(':').collect();
    let port = parts
        .first()
        .and_then(|p| p.parse::<u16>().ok())
        .ok_or_else(|| perr("pred", format!("sensor reference must start with a port: {s:?}")))?;
    let sensor = parts
        .get(1)
        .filter(|n| !n.is_empty())
        .ok_or_else(|| perr("pred", format!("sensor reference missing name: {s:?}")))?
        .to_string();
    let selection = match parts.len() {
        2 => None,
        4 | 5 => Some(Selection {
            row_filter: Some((parse_column("pred", parts[2])?, parse_regex("pred", parts[3])?)),
            value_column: parts.get(4).map(|c| parse_column("pred", c)).transpose()?,
        }),
        _ => return Err(perr("pred", format!("malformed sensor reference {s:?}"))),
    };
    Ok(SensorRef { port, sensor, selection })
}

fn looks_like_ref(s: &str) -> bool {
    let s = s.trim();
    match s.split_once(':') {
        Some((p, rest)) => !p.is_empty() && p.bytes().all(|b| b.is_ascii_digit()) && !rest.is_empty(),
        None => false,
    }
}

fn parse_clause(s: &str) -> Result<Clause, IsingError> {
    // The comparator is the earliest space-delimited operator token.
    let found = Comparator::ALL
        .iter()
        .filter_map(|c| s.find(&format!(" {} ", c.symbol())).map(|pos| (pos, *c)))
        .min_by_key(|(pos, c)| (*pos, std::cmp::Reverse(c.symbol().len())));
    let (pos, cmp) = found.ok_or_else(|| perr("pred", format!("clause has no comparator: {s:?}")))?;
    let lhs = parse_sensor_ref(&s[..pos])?;
    let rhs_text = s[pos + cmp.symbol().len() + 2..].trim();
    if rhs_text.is_empty() {
        return Err(perr("pred", format!("clause has no right-hand side: {s:?}")));
    }
    let rhs = if looks_like_ref(rhs_text) {
        Operand::Sensor(parse_sensor_ref(rhs_text)?)
    } else {
        Operand::Const(rhs_text.to_owned())
    };
    Ok(Clause { lhs, cmp, rhs })
}

/// Parses `clause(;AND|;OR)clause...`.
pub fn parse_predicate(s: &str) -> Result<PredicateExpr, IsingError> {
    let mut clauses = Vec::new();
    let mut conns = Vec::new();
    let mut rest = s;
    loop {
        let next = [(";AND", Connective::And), (";OR", Connective::Or)]
            .iter()
            .filter_map(|(tok, c)| rest.find(tok).map(|p| (p, tok.len(), *c)))
            .min_by_key(|(p, _, _)| *p);
        match next {
            Some((p, len, c)) => {
                clauses.push(parse_clause(&rest[..p])?);
                conns.push(c);
                rest = &rest[p + len..];
            }
            None => {
                clauses.push(parse_clause(rest)?);
                break;
            }
        }
    }
    let mut it = clauses.into_iter();
    let first = it.next().ok_or_else(|| perr("pred", "empty predicate"))?;
    Ok(PredicateExpr { first, rest: conns.into_iter().zip(it).collect() })
}

impl fmt::Display for SensorRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.port, self.sensor)?;
        if let Some(Selection { row_filter: Some((c, r)), value_column }) = &self.selection {
            write!(f, ":{c}:{}", r.as_str())?;
            if let Some(v) = value_column {
                write!(f, ":{v}")?;
            }
        }
        Ok(())
    }
}

impl fmt::Display for Clause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} ", self.lhs, self.cmp)?;
        match &self.rhs {
            Operand::Const(c) => f.write_str(c),
            Operand::Sensor(r) => write!(f, "{r}"),
        }
    }
}

impl fmt::Display for PredicateExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.first)?;
        for (c, clause) in &self.rest {
            let tok = match c {
                Connective::And => ";AND",
                Connective::Or => ";OR",
            };
            write!(f, "{tok}{clause}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basic_continuous_query() {
        let q = parse_query("/ising?port=9000&sensor=load&host=ALL&op=AVG&epoch=60000").unwrap();
        assert_eq!(q, SensorQuery::new(9000, "load", HostScope::All, AggregateOp::Avg, 60000));
        assert!(!q.is_snapshot());
    }

    #[test]
    fn snapshot_median() {
        let q = parse_query("/ising?port=9000&sensor=load&host=ALL&op=MEDIAN&epoch=0").unwrap();
        assert!(q.is_snapshot());
        assert_eq!(q.op, AggregateOp::Median);
    }

    #[test]
    fn rejections_name_the_field() {
        let field = |url: &str| match parse_query(url) {
            Err(IsingError::Parse { field, .. }) => field,
            other => panic!("{other:?}"),
        };
        assert_eq!(field("/ising?port=9000&sensor=load&host=ALL&op=FOO&epoch=0"), "op");
        assert_eq!(field("/ising?port=9000&sensor=load&host=ALL&op=MIN&epoch=-5"), "epoch");
        assert_eq!(
            field("/ising?port=9000&sensor=load&host=ALL&op=MIN&epoch=0&rowcol=1&rowregex=(oops"),
            "rowregex"
        );
        assert_eq!(field("/ising?port=9000&sensor=load&host=ALL&epoch=0"), "op");
        assert_eq!(field("/ising?port=9000&sensor=load&host=ALL&op=MIN&epoch=0&bogus=1"), "bogus");
        assert_eq!(field("/ising?port=x&sensor=load&host=ALL&op=MIN&epoch=0"), "port");
        assert_eq!(field("/other?port=1&sensor=load&host=ALL&op=MIN&epoch=0"), "path");
    }

    #[test]
    fn single_host_scope() {
        let q = parse_query("/ising?port=9100&sensor=reboot&host=node7&op=VALUE&epoch=0").unwrap();
        assert_eq!(q.host, HostScope::Host("node7".into()));
    }

    #[test]
    fn selection_and_predicate_round_trip() {
        let mut q = SensorQuery::new(9000, "hostname", HostScope::All, AggregateOp::Value, 0);
        q.selection = Some(Selection {
            row_filter: Some((1, Regex::new("^alice$").unwrap())),
            value_column: Some(3),
        });
        q.predicate = Some(parse_predicate("9000:traffic > 1000;AND9000:load < 0.5").unwrap());
        let url = q.to_url();
        assert_eq!(parse_query(&url).unwrap(), q);
    }

    #[test]
    fn predicate_parsing() {
        let p = parse_predicate("9000:slicestat:1:^bob$:4 >= 9001:limit;OR9000:load != 3").unwrap();
        assert_eq!(p.first.cmp, Comparator::Ge);
        assert!(matches!(p.first.rhs, Operand::Sensor(ref r) if r.port == 9001 && r.sensor == "limit"));
        assert_eq!(p.first.lhs.selection.as_ref().unwrap().value_column, Some(4));
        assert_eq!(p.rest.len(), 1);
        assert_eq!(p.rest[0].0, Connective::Or);
        assert_eq!(p.rest[0].1.rhs, Operand::Const("3".into()));
        assert!(parse_predicate("9000:load 3").is_err());
        assert!(parse_predicate("load > 3").is_err());
    }
}
