//! Finite-difference verification of every differentiable operation.

use morphwin_core::gradcheck::{format_report, full_suite, END_TO_END_MIN_COORDS};
use morphwin_tensor::AdjointFault;

use crate::error::{CliError, CliResult};

/// `name` or `name:scale`; the scale defaults to 1.01.
pub fn parse_fault(spec: &str) -> CliResult<AdjointFault> {
    let (primitive, scale) = match spec.split_once(':') {
        Some((p, s)) => (p, s.parse().map_err(|_| CliError::Validation(format!("bad adjoint scale in {spec:?}")))?),
        None => (spec, 1.01),
    };
    if primitive.is_empty() {
        return Err(CliError::Validation("--corrupt-adjoint needs a primitive name".into()));
    }
    Ok(AdjointFault { primitive: primitive.to_string(), scale })
}

pub fn run(coords: usize, fault: Option<AdjointFault>) -> CliResult<()> {
    if coords < END_TO_END_MIN_COORDS {
        return Err(CliError::Validation(format!("--coords must be at least {END_TO_END_MIN_COORDS}")));
    }
    if let Some(f) = &fault {
        log::warn!("adjoint of {} scaled by {} (negative control)", f.primitive, f.scale);
    }
    let reports = full_suite(fault, coords)?;
    for r in &reports {
        println!("{}", format_report(r));
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    println!("{} of {} checks passed", reports.len() - failed.len(), reports.len());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Validation(format!("gradient check failed: {}", failed.join(", "))))
    }
}
