use std::cmp::Ordering;

use super::partial::ResultTuple;
use super::query::{Connective, Operand, PredicateExpr, Selection, SensorQuery, SensorRef};

/// Fetches raw CSV from a sensor on the local machine, by port and name.
pub type LocalFetch<'a> = dyn FnMut(u16, &str) -> Result<String, String> + 'a;

fn split_row(line: &str) -> Vec<String> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(line.as_bytes());
    match rdr.records().next() {
        Some(Ok(rec)) => rec.iter().map(str::to_owned).collect(),
        _ => line.split(',').map(str::to_owned).collect(),
    }
}

/// Filters rows whose `row_column` matches the regex and optionally projects
/// `value_column`. Rows too narrow for a requested column do not match.
pub fn apply_selection(raw_csv: &str, selection: Option<&Selection>) -> Vec<String> {
    let lines = raw_csv.lines().map(|l| l.trim_end_matches('\r')).filter(|l| !l.is_empty());
    let Some(sel) = selection else {
        return lines.map(str::to_owned).collect();
    };
    lines
        .filter_map(|line| {
            let fields = split_row(line);
            if let Some((col, re)) = &sel.row_filter {
                if !fields.get(col - 1).is_some_and(|f| re.is_match(f)) {
                    return None;
                }
            }
            match sel.value_column {
                Some(v) => fields.get(v - 1).cloned(),
                None => Some(line.to_owned()),
            }
        })
        .collect()
}

/// Numeric when both sides parse as numbers, lexical otherwise.
pub fn compare_values(a: &str, b: &str) -> Ordering {
    match (a.trim().parse::<f64>(), b.trim().parse::<f64>()) {
        (Ok(x), Ok(y)) => x.total_cmp(&y),
        _ => a.cmp(b),
    }
}

fn resolve(fetch: &mut LocalFetch<'_>, r: &SensorRef) -> Option<String> {
    let raw = fetch(r.port, &r.sensor).ok()?;
    apply_selection(&raw, r.selection.as_ref()).into_iter().next()
}

/// Evaluates a value predicate against sensors on the local machine. Any
/// clause that cannot be resolved makes the whole predicate false.
pub fn eval_predicate(fetch: &mut LocalFetch<'_>, predicate: &PredicateExpr) -> bool {
    let mut eval = |clause: &super::query::Clause| -> Option<bool> {
        let lhs = resolve(fetch, &clause.lhs)?;
        let rhs = match &clause.rhs {
            Operand::Const(c) => c.clone(),
            Operand::Sensor(r) => resolve(fetch, r)?,
        };
        Some(clause.cmp.holds(compare_values(&lhs, &rhs)))
    };
    let Some(mut acc) = eval(&predicate.first) else { return false };
    for (conn, clause) in &predicate.rest {
        let Some(v) = eval(clause) else { return false };
        acc = match conn {
            Connective::And => acc && v,
            Connective::Or => acc || v,
        };
    }
    acc
}

/// One node's contribution to a query: fetch, select, then gate on the
/// predicate. A failed sensor or a false predicate yields no valid values.
pub fn sample_local(
    fetch: &mut LocalFetch<'_>,
    query: &SensorQuery,
    source: &str,
    now_ms: u64,
) -> Vec<ResultTuple> {
    let raw = match fetch(query.sensor_port, &query.sensor_name) {
        Ok(raw) => raw,
        Err(e) => {
            log::debug!("local sensor {} unavailable: {e}", query.sensor_name);
            return Vec::new();
        }
    };
    let values = apply_selection(&raw, query.selection.as_ref());
    if values.is_empty() {
        return Vec::new();
    }
    if let Some(p) = &query.predicate {
        if !eval_predicate(fetch, p) {
            return Vec::new();
        }
    }
    values.into_iter().map(|v| ResultTuple::new(source, now_ms, v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ising::query::parse_predicate;
    use regex::Regex;

    fn sel(col: usize, re: &str, val: Option<usize>) -> Selection {
        Selection { row_filter: Some((col, Regex::new(re).unwrap())), value_column: val }
    }

    #[test]
    fn worked_filter() {
        let out = apply_selection("alice,host1\nbob,host2", Some(&sel(1, "^alice$", Some(2))));
        assert_eq!(out, vec!["host1"]);
    }

    #[test]
    fn no_selection_is_identity() {
        assert_eq!(apply_selection("a,b\nc,d\n", None), vec!["a,b", "c,d"]);
        assert!(apply_selection("", None).is_empty());
    }

    #[test]
    fn finger_style_rows() {
        let finger = "alice,pts/0,lab1.example.org\nbob,pts/1,home.example.net\nalice,pts/2,cafe.example.com\n";
        let out = apply_selection(finger, Some(&sel(1, "^alice$", Some(3))));
        assert_eq!(out, vec!["lab1.example.org", "cafe.example.com"]);
    }

    #[test]
    fn out_of_range_column_does_not_match() {
        assert!(apply_selection("a,b", Some(&sel(5, ".*", None))).is_empty());
        assert!(apply_selection("a,b", Some(&sel(1, "a", Some(9)))).is_empty());
    }

    #[test]
    fn quoted_fields_are_split_properly() {
        let out = apply_selection("\"x,y\",2", Some(&sel(2, "^2$", Some(1))));
        assert_eq!(out, vec!["x,y"]);
    }

    fn sensors(name: &str) -> Result<String, String> {
        match name {
            "traffic" => Ok("5000".into()),
            "load" => Ok("0.2".into()),
            "name" => Ok("zeta".into()),
            _ => Err("connection refused".into()),
        }
    }

    #[test]
    fn conjunction_of_true_clauses() {
        let p = parse_predicate("9000:traffic > 1000;AND9000:load < 0.5").unwrap();
        assert!(eval_predicate(&mut |_, n: &str| sensors(n), &p));
        let p = parse_predicate("9000:traffic > 1000;AND9000:load > 0.5").unwrap();
        assert!(!eval_predicate(&mut |_, n: &str| sensors(n), &p));
        let p = parse_predicate("9000:traffic < 1000;OR9000:load < 0.5").unwrap();
        assert!(eval_predicate(&mut |_, n: &str| sensors(n), &p));
    }

    #[test]
    fn comparator_semantics() {
        let p = parse_predicate("9000:five >= 5").unwrap();
        assert!(eval_predicate(&mut |_, _: &str| Ok("5".into()), &p));
        let p = parse_predicate("9000:name > alpha").unwrap();
        assert!(eval_predicate(&mut |_, n: &str| sensors(n), &p));
        // numeric, not lexical: 10 > 9
        let p = parse_predicate("9000:x > 9").unwrap();
        assert!(eval_predicate(&mut |_, _: &str| Ok("10".into()), &p));
    }

    #[test]
    fn unreachable_sensor_makes_predicate_false() {
        let p = parse_predicate("9000:down > 1").unwrap();
        assert!(!eval_predicate(&mut |_, n: &str| sensors(n), &p));
        let p = parse_predicate("9000:down > 1;OR9000:load < 1").unwrap();
        assert!(!eval_predicate(&mut |_, n: &str| sensors(n), &p));
    }

    #[test]
    fn sample_local_gates_on_predicate() {
        let mut q = SensorQuery::new(
            9000,
            "name",
            super::super::query::HostScope::All,
            super::super::partial::AggregateOp::Value,
            0,
        );
        q.predicate = Some(parse_predicate("9000:traffic > 1000;AND9000:load < 0.5").unwrap());
        let got = sample_local(&mut |_, n: &str| sensors(n), &q, "h:9000", 3);
        assert_eq!(got, vec![ResultTuple::new("h:9000", 3, "zeta")]);
        q.predicate = Some(parse_predicate("9000:load > 0.5").unwrap());
        assert!(sample_local(&mut |_, n: &str| sensors(n), &q, "h:9000", 3).is_empty());
        q.sensor_name = "missing".into();
        q.predicate = None;
        assert!(sample_local(&mut |_, n: &str| sensors(n), &q, "h:9000", 3).is_empty());
    }
}
