//! CSV storage for [`CorrelationTrace`]: `# key=value` header lines, a
//! column header, then one `grid,value` row per sample.

use std::io::{BufRead, Write};

use crate::correlations::{Axis, CorrelationTrace, Detector};
use crate::error::{Error, Result};

/// Write `trace` with its own provenance plus `extra` header pairs.
pub fn write_trace<W: Write>(mut w: W, trace: &CorrelationTrace, extra: &[(String, String)]) -> Result<()> {
    trace.validate()?;
    let opt_det = |d: Option<Detector>| d.map_or("none", Detector::name);
    writeln!(w, "# axis={}", trace.axis.column())?;
    writeln!(w, "# op_first={}", opt_det(trace.op_first))?;
    writeln!(w, "# op_second={}", opt_det(trace.op_second))?;
    writeln!(w, "# normalized={}", trace.normalized)?;
    if let Some(r) = trace.reference_value {
        writeln!(w, "# reference_value={r:.16e}")?;
    }
    if let Some(t) = trace.t_anchor {
        writeln!(w, "# t_anchor_ps={t:.16e}")?;
    }
    for (k, v) in extra {
        writeln!(w, "# {k}={v}")?;
    }
    writeln!(w, "{},value", trace.axis.column())?;
    for (x, y) in trace.grid.iter().zip(&trace.values) {
        writeln!(w, "{x:.16e},{y:.16e}")?;
    }
    Ok(())
}

pub fn trace_to_string(trace: &CorrelationTrace, extra: &[(String, String)]) -> Result<String> {
    let mut buf = Vec::new();
    write_trace(&mut buf, trace, extra)?;
    Ok(String::from_utf8(buf).expect("ascii output"))
}

/// Parse a file written by [`write_trace`]. Header pairs not describing the
/// trace itself are returned in order.
pub fn read_trace<R: BufRead>(r: R) -> Result<(CorrelationTrace, Vec<(String, String)>)> {
    let bad = |line: usize, msg: &str| Error::TraceFormat(format!("line {line}: {msg}"));
    let mut trace = CorrelationTrace::new(Axis::T, Vec::new(), Vec::new());
    let mut extra = Vec::new();
    let mut seen_columns = false;
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let n = i + 1;
        if let Some(kv) = line.strip_prefix("# ") {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad(n, "header without '='"))?;
            let det = |v: &str| match v {
                "none" => Ok(None),
                s => Detector::parse(s).map(Some).ok_or_else(|| bad(n, "unknown detector")),
            };
            let num = |v: &str| v.parse::<f64>().map_err(|_| bad(n, "not a number"));
            match k {
                "axis" => {
                    trace.axis = match v {
                        "t_ps" => Axis::T,
                        "tau_ps" => Axis::Tau,
                        _ => return Err(bad(n, "unknown axis")),
                    }
                }
                "op_first" => trace.op_first = det(v)?,
                "op_second" => trace.op_second = det(v)?,
                "normalized" => trace.normalized = v.parse().map_err(|_| bad(n, "not a bool"))?,
                "reference_value" => trace.reference_value = Some(num(v)?),
                "t_anchor_ps" => trace.t_anchor = Some(num(v)?),
                _ => extra.push((k.to_string(), v.to_string())),
            }
            continue;
        }
        if !seen_columns {
            if line != format!("{},value", trace.axis.column()) {
                return Err(bad(n, "unexpected column header"));
            }
            seen_columns = true;
            continue;
        }
        let (x, y) = line.split_once(',').ok_or_else(|| bad(n, "expected two columns"))?;
        trace.grid.push(x.parse().map_err(|_| bad(n, "bad grid value"))?);
        trace.values.push(y.parse().map_err(|_| bad(n, "bad value"))?);
    }
    if !seen_columns {
        return Err(Error::TraceFormat("missing column header".into()));
    }
    trace.validate()?;
    Ok((trace, extra))
}
