use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::{AlignmentReport, EvalError, MetricsReport};
use crate::fsutil::write_atomic;

/// One row per video plus an `average` row.
pub fn metrics_csv(r: &MetricsReport) -> String {
    let mut s = String::from("protocol,interval_t,checkpoint,prompt_noise_sigma,video_id,frames,psnr,ssim\n");
    let sigma = r.prompt_noise_sigma.map(|v| v.to_string()).unwrap_or_default();
    let mut row = |vid: &str, frames: usize, psnr: f64, ssim: f64| {
        let _ = writeln!(
            s,
            "{},{},{},{},{vid},{frames},{psnr:.4},{ssim:.6}",
            r.protocol, r.interval_t, r.checkpoint, sigma
        );
    };
    for v in &r.videos {
        row(&v.video_id, v.frames, v.psnr, v.ssim);
    }
    row("average", r.videos.iter().map(|v| v.frames).sum(), r.psnr, r.ssim);
    s
}

/// A fixed-width table with one PSNR/SSIM column pair per report and an
/// average over them, one row per method.
pub fn metrics_table(rows: &[(&str, Vec<&MetricsReport>)]) -> String {
    let Some((_, first)) = rows.first() else {
        return String::new();
    };
    let heads: Vec<String> = first
        .iter()
        .map(|r| match r.prompt_noise_sigma {
            Some(s) => format!("{} t={} σ={s}", r.protocol, r.interval_t),
            None => format!("{} t={}", r.protocol, r.interval_t),
        })
        .chain(std::iter::once("Average".to_string()))
        .collect();
    let width = heads.iter().map(|h| h.chars().count()).max().unwrap_or(0).max(15);
    let name_w = rows.iter().map(|(n, _)| n.chars().count()).max().unwrap_or(0).max(6);
    let mut s = format!("{:<name_w$}", "Method");
    for h in &heads {
        let _ = write!(s, " | {h:^width$}");
    }
    s.push('\n');
    let _ = write!(s, "{:<name_w$}", "");
    for _ in &heads {
        let _ = write!(s, " | {:^width$}", "PSNR ↑  SSIM ↑");
    }
    s.push('\n');
    for (name, reports) in rows {
        let _ = write!(s, "{name:<name_w$}");
        let n = reports.len().max(1) as f64;
        let avg_p = reports.iter().map(|r| r.psnr).sum::<f64>() / n;
        let avg_s = reports.iter().map(|r| r.ssim).sum::<f64>() / n;
        for (p, q) in reports.iter().map(|r| (r.psnr, r.ssim)).chain(std::iter::once((avg_p, avg_s))) {
            let _ = write!(s, " | {:^width$}", format!("{p:.2}  {q:.4}"));
        }
        s.push('\n');
    }
    s
}

pub fn alignment_text(r: &AlignmentReport) -> String {
    format!(
        "checkpoint {}\nframes {}\n{:<10} {:>8} {:>8} {:>8}\n{:<10} {:>8.4} {:>8.4} {:>8.4}\n{:<10} {:>8.4} {:>8.4} {:>8.4}\ngap (matched - shuffled mean) {:.4}\ndegenerate pairs {}\n",
        r.checkpoint,
        r.frames,
        "",
        "min",
        "mean",
        "max",
        "matched",
        r.matched.min,
        r.matched.mean,
        r.matched.max,
        "shuffled",
        r.shuffled.min,
        r.shuffled.mean,
        r.shuffled.max,
        r.gap(),
        r.degenerate
    )
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), EvalError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}
