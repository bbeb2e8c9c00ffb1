use super::partial::{PartialAggregate, ResultTuple};
use super::IsingError;

/// Renders the final aggregate of one epoch as the CSV body returned to the
/// querying client, one `source,timestamp,data` line per tuple.
pub fn root_respond(partial: &PartialAggregate, root_source: &str, now_ms: u64) -> String {
    let mut out = String::new();
    for t in partial.finalize(root_source, now_ms) {
        out.push_str(&t.to_csv_line());
        out.push('\n');
    }
    out
}

/// Parses a response body into epochs. Continuous queries stream one block
/// per epoch, with blocks separated by an empty line.
pub fn parse_response(body: &str) -> Result<Vec<Vec<ResultTuple>>, IsingError> {
    let mut epochs = Vec::new();
    let mut cur = Vec::new();
    for line in body.lines().map(|l| l.trim_end_matches('\r')) {
        if line.is_empty() {
            epochs.push(std::mem::take(&mut cur));
            continue;
        }
        cur.push(ResultTuple::parse_csv_line(line)?);
    }
    if !cur.is_empty() || epochs.is_empty() {
        epochs.push(cur);
    }
    Ok(epochs)
}

/// Aggregates tuples gathered outside the tree (for instance from a single
/// host queried directly) with the same semantics as the in-network path.
pub fn fanin_local(op: super::AggregateOp, tuples: &[ResultTuple], root_source: &str, now_ms: u64) -> String {
    root_respond(&PartialAggregate::from_local(op, tuples), root_source, now_ms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ising::AggregateOp;

    #[test]
    fn max_keeps_origin_and_sum_is_attributed_to_root() {
        let tuples = [ResultTuple::new("a:9000", 5, "3"), ResultTuple::new("b:9000", 6, "7")];
        assert_eq!(fanin_local(AggregateOp::Max, &tuples, "r:8000", 10), "b:9000,6,7\n");
        assert_eq!(fanin_local(AggregateOp::Sum, &tuples, "r:8000", 10), "r:8000,10,10\n");
        assert_eq!(fanin_local(AggregateOp::Sum, &[], "r:8000", 10), "");
    }

    #[test]
    fn streamed_blocks_split_on_blank_lines() {
        let body = "a:1,1,2\nb:1,1,3\n\na:1,2,4\n\n";
        let got = parse_response(body).unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].len(), 2);
        assert_eq!(got[1][0].data, "4");
        assert_eq!(parse_response("").unwrap(), vec![Vec::<ResultTuple>::new()]);
        assert!(parse_response("garbage").is_err());
    }
}
