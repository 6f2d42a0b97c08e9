use std::path::Path;

use crate::error::{Error, Result};
use crate::loss::LossBreakdown;

pub const LOG_HEADER: &str = "step\tmsm\tmlm\ttotal\talpha_mean";

/// One TSV row. Values use the shortest round-trip representation so logs
/// are byte-identical whenever the numbers are.
pub fn format_log_line(step: usize, l: &LossBreakdown) -> String {
    format!("{step}\t{}\t{}\t{}\t{}", l.msm, l.mlm, l.total, l.alpha_mean)
}

pub fn read_loss_log(path: &Path) -> Result<Vec<(usize, LossBreakdown)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let bad = |message: String| Error::Format {
            path: path.display().to_string(),
            line: i + 1,
            message,
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(bad(format!("expected 5 fields, found {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("`{s}`: {e}")));
        let step = f[0].parse().map_err(|e| bad(format!("step `{}`: {e}", f[0])))?;
        out.push((
            step,
            LossBreakdown {
                msm: num(f[1])?,
                mlm: num(f[2])?,
                total: num(f[3])?,
                alpha_mean: num(f[4])?,
            },
        ));
    }
    Ok(out)
}
