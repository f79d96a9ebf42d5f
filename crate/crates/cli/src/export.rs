use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use pkm::experiments::{EpochRecord, Record, Split, METRICS_FILE};
use pkm::Result;

/// Metric columns, in CSV order.
const METRICS: [&str; 8] = ["loss", "top1", "top5", "mean_util", "value_util", "kl", "score_ops", "replaced_total"];

fn value(r: &EpochRecord, metric: &str) -> Option<f64> {
    match metric {
        "loss" => Some(r.loss),
        "top1" => Some(r.top1),
        "top5" => Some(r.top5),
        "mean_util" => (!r.util_frac.is_empty())
            .then(|| r.util_frac.iter().map(|h| h[0] + h[1]).sum::<f64>() / (2 * r.util_frac.len()) as f64),
        "value_util" => r.value_util,
        "kl" => r.kl,
        "score_ops" => Some(r.score_ops as f64),
        "replaced_total" => Some(r.replaced_total as f64),
        _ => None,
    }
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Eval => "eval",
        Split::Final => "final",
    }
}

/// Epoch records of a run; unparsable lines are skipped with a warning.
fn read_run(dir: &Path) -> Result<(Vec<EpochRecord>, usize)> {
    let path = dir.join(METRICS_FILE);
    let text = std::fs::read_to_string(&path)?;
    let mut records = Vec::new();
    let mut skipped = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Record>(line) {
            Ok(Record::Epoch(e)) => records.push(e),
            Ok(_) => {}
            Err(e) => {
                eprintln!("warning: skipping line {} of {}: {e}", i + 1, path.display());
                skipped += 1;
            }
        }
    }
    Ok((records, skipped))
}

fn run_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .filter(|n| !n.is_empty() && n != "." && n != "..")
        .unwrap_or_else(|| "run".into())
}

fn report(skipped: usize) {
    if skipped > 0 {
        eprintln!("skipped {skipped} corrupt line(s)");
    }
}

/// Writes `<out>/<run>.csv` with one row per epoch record.
pub fn csv(runs: &[PathBuf], out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let mut skipped = 0;
    for dir in runs {
        let (records, s) = read_run(dir)?;
        skipped += s;
        let mut text = format!("epoch,step,split,{}\n", METRICS.join(","));
        for r in &records {
            write!(text, "{},{},{}", r.epoch, r.step, split_name(r.split)).expect("string write");
            for m in METRICS {
                match value(r, m) {
                    Some(v) => write!(text, ",{v}").expect("string write"),
                    None => text.push(','),
                }
            }
            text.push('\n');
        }
        let path = out.join(format!("{}.csv", run_name(dir)));
        std::fs::write(&path, text)?;
        println!("{}", path.display());
    }
    report(skipped);
    Ok(())
}

/// Writes one whitespace-separated `epoch value` file per run, split and
/// metric: `<out>/<run>.<split>.<metric>.dat`.
pub fn plotdata(runs: &[PathBuf], out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let mut skipped = 0;
    for dir in runs {
        let (records, s) = read_run(dir)?;
        skipped += s;
        let mut series: BTreeMap<(&str, &str), String> = BTreeMap::new();
        for r in records.iter().filter(|r| r.split != Split::Final) {
            for m in METRICS {
                if let Some(v) = value(r, m) {
                    let body = series.entry((split_name(r.split), m)).or_default();
                    writeln!(body, "{} {v}", r.epoch + 1).expect("string write");
                }
            }
        }
        let name = run_name(dir);
        for ((split, metric), body) in series {
            let path = out.join(format!("{name}.{split}.{metric}.dat"));
            std::fs::write(&path, format!("# epoch {metric}\n{body}"))?;
        }
    }
    report(skipped);
    Ok(())
}
