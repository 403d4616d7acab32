//! Sweep grid syntax: `;`-separated clauses `key=values`, where values are a
//! comma list of numbers or inclusive `start:stop:step` ranges.
//!
//! Keys: `cfg` (or `lambda_cfg`), `ipa` (or `lambda_ipa`), `solver`. Missing
//! keys take the base configuration's value. Cells are ordered solver-major,
//! then `ipa`, then `cfg`.

use revpers::{GuidanceConfig, Solver};

use crate::error::{CliError, CliResult};

fn invalid(msg: String) -> CliError {
    CliError::Invalid(format!("grid: {msg}"))
}

fn parse_number(s: &str) -> CliResult<f64> {
    let v: f64 = s.trim().parse().map_err(|_| invalid(format!("not a number: {s:?}")))?;
    if !v.is_finite() {
        return Err(invalid(format!("not finite: {s:?}")));
    }
    Ok(v)
}

fn parse_values(list: &str) -> CliResult<Vec<f64>> {
    let mut out = Vec::new();
    for item in list.split(',') {
        let parts: Vec<&str> = item.split(':').collect();
        match parts.as_slice() {
            [v] => out.push(parse_number(v)?),
            [a, b, step] => {
                let (a, b, step) = (parse_number(a)?, parse_number(b)?, parse_number(step)?);
                if step == 0.0 || (b - a) * step < 0.0 {
                    return Err(invalid(format!("range {item:?} never reaches its end")));
                }
                let count = ((b - a) / step + 1e-9).floor() as usize;
                if count > 10_000 {
                    return Err(invalid(format!("range {item:?} is too long")));
                }
                out.extend((0..=count).map(|k| a + k as f64 * step));
            }
            _ => return Err(invalid(format!("expected a number or start:stop:step, got {item:?}"))),
        }
    }
    Ok(out)
}

pub fn parse_grid(spec: &str, base: GuidanceConfig) -> CliResult<Vec<GuidanceConfig>> {
    let mut cfg: Option<Vec<f64>> = None;
    let mut ipa: Option<Vec<f64>> = None;
    let mut solver: Option<Vec<Solver>> = None;
    let clauses: Vec<&str> = spec.split(';').map(str::trim).filter(|c| !c.is_empty()).collect();
    if clauses.is_empty() {
        return Err(invalid("empty grid".into()));
    }
    for clause in clauses {
        let (key, values) =
            clause.split_once('=').ok_or_else(|| invalid(format!("expected key=values, got {clause:?}")))?;
        let key = key.trim();
        let dup = || invalid(format!("key {key:?} given twice"));
        match key {
            "cfg" | "lambda_cfg" => {
                if cfg.replace(parse_values(values)?).is_some() {
                    return Err(dup());
                }
            }
            "ipa" | "lambda_ipa" => {
                let v = parse_values(values)?;
                if let Some(bad) = v.iter().find(|x| **x < 0.0) {
                    return Err(invalid(format!("ipa must be >= 0, got {bad}")));
                }
                if ipa.replace(v).is_some() {
                    return Err(dup());
                }
            }
            "solver" => {
                let v = values
                    .split(',')
                    .map(|s| s.trim().parse::<Solver>().map_err(|e| invalid(e.to_string())))
                    .collect::<CliResult<Vec<_>>>()?;
                if solver.replace(v).is_some() {
                    return Err(dup());
                }
            }
            other => return Err(invalid(format!("unknown key {other:?}"))),
        }
    }
    let cfg = cfg.unwrap_or_else(|| vec![base.lambda_cfg]);
    let ipa = ipa.unwrap_or_else(|| vec![base.lambda_ipa]);
    let solver = solver.unwrap_or_else(|| vec![base.solver]);
    let mut cells = Vec::with_capacity(cfg.len() * ipa.len() * solver.len());
    for s in &solver {
        for i in &ipa {
            for c in &cfg {
                cells.push(GuidanceConfig { lambda_cfg: *c, lambda_ipa: *i, solver: *s, steps: base.steps });
            }
        }
    }
    Ok(cells)
}
