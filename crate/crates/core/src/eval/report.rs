use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{LatencyTable, SweepResult};
use crate::error::Result;

/// Writes `<stem>.jsonl` (one row per line) and `<stem>.tsv`.
pub fn write_sweep(result: &SweepResult, dir: &Path, stem: &str) -> Result<()> {
    let mut jsonl = BufWriter::new(File::create(dir.join(format!("{stem}.jsonl")))?);
    for row in &result.rows {
        serde_json::to_writer(&mut jsonl, row)?;
        jsonl.write_all(b"\n")?;
    }
    jsonl.flush()?;
    let mut tsv = BufWriter::new(File::create(dir.join(format!("{stem}.tsv")))?);
    writeln!(tsv, "tag\tsnr_db\tmetric\tmean\tstd\tcount\tmean_steps")?;
    for r in &result.rows {
        let steps = r.mean_steps.map(|s| format!("{s:.3}")).unwrap_or_else(|| "-".into());
        writeln!(
            tsv,
            "{}\t{}\t{}\t{:.6}\t{:.6}\t{}\t{steps}",
            r.tag,
            r.snr_db,
            serde_json::to_value(r.metric)?.as_str().unwrap_or_default(),
            r.mean,
            r.std,
            r.count
        )?;
    }
    tsv.flush()?;
    Ok(())
}

pub fn write_latency(table: &LatencyTable, dir: &Path, stem: &str) -> Result<()> {
    std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(table)?)?;
    let mut tsv = BufWriter::new(File::create(dir.join(format!("{stem}.tsv")))?);
    writeln!(tsv, "arm\tmean_ms\tstd_ms\tmedian_ms\trepetitions\tmean_steps")?;
    for r in &table.rows {
        writeln!(
            tsv,
            "{}\t{:.4}\t{:.4}\t{:.4}\t{}\t{:.3}",
            r.arm, r.mean_ms, r.std_ms, r.median_ms, r.repetitions, r.mean_steps
        )?;
    }
    writeln!(tsv, "# denoiser overhead {:.4} ms", table.denoiser_overhead_ms)?;
    tsv.flush()?;
    Ok(())
}
