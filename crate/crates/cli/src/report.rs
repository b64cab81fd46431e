//! Convergence table, CSV and summary writers.

use std::io::Write;
use std::path::Path;

use anyhow::Result;
use boxsqp::sqp::{IterationRecord, SqpRun};
use serde_json::{json, Value};

/// `x` in C-style scientific notation with `digits` decimals and a signed,
/// two-digit exponent, e.g. `9.0274091266354717e+03`.
pub fn sci(x: f64, digits: usize) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    let s = format!("{x:.digits$e}");
    let (mantissa, exp) = s.split_once('e').expect("scientific format has an exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    let sign = if exp < 0 { '-' } else { '+' };
    format!("{mantissa}e{sign}{:02}", exp.abs())
}

/// Table with columns `n, J(u_n), δ_n, #{α<u<β}, #{u=α}, #{u=β}`.
pub fn table(records: &[IterationRecord]) -> String {
    let mut out = format!(
        "{:>3}  {:<23}  {:<8}  {:>10}  {:>10}  {:>10}\n",
        "n", "J(u_n)", "delta_n", "#{a<u<b}", "#{u=a}", "#{u=b}"
    );
    for r in records {
        let delta = r.stepsize.map(|d| sci(d, 1)).unwrap_or_else(|| "-".into());
        out.push_str(&format!(
            "{:>3}  {:<23}  {:<8}  {:>10}  {:>10}  {:>10}\n",
            r.n,
            sci(r.objective, 16),
            delta,
            r.count_free,
            r.count_lower,
            r.count_upper
        ));
    }
    out
}

pub fn write_csv(path: &Path, records: &[IterationRecord], timings: bool) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "n",
        "objective",
        "stepsize",
        "count_free",
        "count_lower",
        "count_upper",
        "qp_iterations",
        "wall_time_seconds",
    ])?;
    for r in records {
        let time = if timings { r.wall_time_seconds } else { 0.0 };
        w.write_record([
            r.n.to_string(),
            sci(r.objective, 16),
            r.stepsize.map(|d| sci(d, 16)).unwrap_or_default(),
            r.count_free.to_string(),
            r.count_lower.to_string(),
            r.count_upper.to_string(),
            r.qp_iterations.to_string(),
            format!("{time:.3}"),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn run_summary(run: &SqpRun, timings: bool) -> Value {
    let rate = match run.fitted_rate() {
        Ok((r, c)) => json!({ "exponent": r, "constant": c }),
        Err(e) => json!({ "unavailable": e.to_string() }),
    };
    let wall = run.records.last().map(|r| r.wall_time_seconds).unwrap_or(0.0);
    json!({
        "status": run.status.as_str(),
        "message": run.message,
        "iterations": run.iterations(),
        "final_objective": sci(run.final_objective(), 16),
        "fitted_rate": rate,
        "wall_time_seconds": if timings { json!(format!("{wall:.3}")) } else { Value::Null },
    })
}

pub fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    Ok(())
}
