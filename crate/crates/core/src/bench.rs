//! Certificate-generation benchmark: key generation plus issuance under a
//! same-scheme CA, timed per iteration on a monotonic clock.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use thiserror::Error;

use crate::pki::{
    generate_keypair_by_id, issue_certificate, registry, scheme_by_name, self_signed_ca,
    CertificateRequest, PkiError, Role, CA_VALIDITY_SECS, DEVICE_VALIDITY_SECS,
};

pub const CSV_HEADER: &str = "scheme,iteration,keygen_ns,issue_ns,total_ns";
pub const DEFAULT_OUTPUT: &str = "results.csv";
const BENCH_SUBJECT: &str = "bench-device";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BenchConfig {
    pub schemes: Vec<String>,
    pub iterations: usize,
    pub output: PathBuf,
    pub warmup: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            schemes: vec!["falcon-1024".into(), "rsa-2048".into()],
            iterations: 25,
            output: PathBuf::from(DEFAULT_OUTPUT),
            warmup: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BenchRecord {
    pub scheme: String,
    /// 1-based.
    pub iteration: usize,
    pub keygen_ns: u64,
    pub issue_ns: u64,
    pub total_ns: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SchemeSummary {
    pub scheme: String,
    pub count: usize,
    pub mean_ns: f64,
    pub median_ns: u64,
    pub stddev_ns: f64,
    pub min_ns: u64,
    pub max_ns: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchSummary {
    pub schemes: Vec<SchemeSummary>,
    /// mean(rsa-2048) / mean(falcon-1024), when both ran.
    pub ratio: Option<f64>,
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid benchmark configuration: {0}")]
    Config(String),
    #[error("no records to summarize")]
    Empty,
    #[error(transparent)]
    Pki(#[from] PkiError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("results file line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

fn io_err(path: &Path, source: std::io::Error) -> BenchError {
    BenchError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn elapsed_ns(start: Instant) -> u64 {
    start.elapsed().as_nanos().min(u64::MAX as u128) as u64
}

/// Runs the benchmark without writing anything.
pub fn measure(config: &BenchConfig) -> Result<Vec<BenchRecord>, BenchError> {
    if config.iterations == 0 {
        return Err(BenchError::Config("iterations must be at least 1".into()));
    }
    if config.schemes.is_empty() {
        return Err(BenchError::Config("no schemes selected".into()));
    }
    let mut records = Vec::with_capacity(config.schemes.len() * config.iterations);
    for name in &config.schemes {
        let scheme = scheme_by_name(name)?;
        let canonical = registry().get(scheme)?.descriptor().name;
        let ca_kp = generate_keypair_by_id(scheme, None)?;
        let ca = self_signed_ca(&ca_kp, "bench-ca", 0, CA_VALIDITY_SECS, 1)?;
        for i in 0..config.warmup + config.iterations {
            let t = Instant::now();
            let kp = generate_keypair_by_id(scheme, None)?;
            let keygen_ns = elapsed_ns(t);
            let t = Instant::now();
            issue_certificate(
                &ca_kp,
                &ca,
                &CertificateRequest {
                    subject: BENCH_SUBJECT,
                    role: Role::Publisher,
                    scheme,
                    public_key: kp.public_key(),
                    not_before: 0,
                    not_after: DEVICE_VALIDITY_SECS,
                    serial: i as u64 + 2,
                },
            )?;
            let issue_ns = elapsed_ns(t);
            if i < config.warmup {
                continue;
            }
            records.push(BenchRecord {
                scheme: canonical.to_owned(),
                iteration: i - config.warmup + 1,
                keygen_ns,
                issue_ns,
                total_ns: keygen_ns + issue_ns,
            });
        }
    }
    Ok(records)
}

/// Runs the benchmark, writes the CSV and summarizes. Nothing is written if
/// any iteration fails.
pub fn bench_certgen(config: &BenchConfig) -> Result<(Vec<BenchRecord>, BenchSummary), BenchError> {
    let records = measure(config)?;
    write_csv(&records, config.warmup, &config.output)?;
    let summary = summarize(&records)?;
    Ok((records, summary))
}

pub fn render_csv(records: &[BenchRecord], warmup: usize) -> String {
    let mut out = format!("# warmup={warmup} clock=monotonic\n{CSV_HEADER}\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.scheme, r.iteration, r.keygen_ns, r.issue_ns, r.total_ns
        );
    }
    out
}

/// Writes via a temporary file in the destination directory and renames it
/// into place.
pub fn write_csv(records: &[BenchRecord], warmup: usize, path: &Path) -> Result<(), BenchError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_err(dir, e))?;
    tmp.write_all(render_csv(records, warmup).as_bytes())
        .map_err(|e| io_err(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| io_err(path, e))?;
    tmp.persist(path).map_err(|e| io_err(path, e.error))?;
    Ok(())
}

pub fn parse_csv(text: &str) -> Result<Vec<BenchRecord>, BenchError> {
    let mut records = Vec::new();
    let mut seen_header = false;
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        if !seen_header {
            if line != CSV_HEADER {
                return Err(BenchError::Parse {
                    line: line_no,
                    reason: format!("expected header {CSV_HEADER:?}"),
                });
            }
            seen_header = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let bad = |reason: &str| BenchError::Parse {
            line: line_no,
            reason: reason.to_owned(),
        };
        let [scheme, iteration, keygen, issue, total] = fields[..] else {
            return Err(bad("expected 5 fields"));
        };
        let num = |s: &str| s.parse::<u64>().map_err(|_| bad("non-numeric field"));
        records.push(BenchRecord {
            scheme: scheme.to_owned(),
            iteration: num(iteration)? as usize,
            keygen_ns: num(keygen)?,
            issue_ns: num(issue)?,
            total_ns: num(total)?,
        });
    }
    if !seen_header {
        return Err(BenchError::Parse {
            line: 0,
            reason: "missing header".into(),
        });
    }
    Ok(records)
}

pub fn read_csv(path: &Path) -> Result<Vec<BenchRecord>, BenchError> {
    parse_csv(&fs::read_to_string(path).map_err(|e| io_err(path, e))?)
}

fn stats(scheme: &str, totals: &mut [u64]) -> SchemeSummary {
    totals.sort_unstable();
    let n = totals.len();
    let mean = totals.iter().map(|&t| t as f64).sum::<f64>() / n as f64;
    let var = if n > 1 {
        totals.iter().map(|&t| (t as f64 - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    SchemeSummary {
        scheme: scheme.to_owned(),
        count: n,
        mean_ns: mean,
        median_ns: totals[(n - 1) / 2],
        stddev_ns: var.sqrt(),
        min_ns: totals[0],
        max_ns: totals[n - 1],
    }
}

/// Per-scheme statistics over `total_ns`, in first-appearance order. The
/// median of an even count is the lower middle value; stddev is the sample
/// standard deviation.
pub fn summarize(records: &[BenchRecord]) -> Result<BenchSummary, BenchError> {
    if records.is_empty() {
        return Err(BenchError::Empty);
    }
    let mut order: Vec<&str> = Vec::new();
    for r in records {
        if !order.contains(&r.scheme.as_str()) {
            order.push(&r.scheme);
        }
    }
    let schemes: Vec<SchemeSummary> = order
        .iter()
        .map(|s| {
            let mut totals: Vec<u64> = records
                .iter()
                .filter(|r| r.scheme == *s)
                .map(|r| r.total_ns)
                .collect();
            stats(s, &mut totals)
        })
        .collect();
    let mean_of = |name: &str| schemes.iter().find(|s| s.scheme == name).map(|s| s.mean_ns);
    let ratio = match (mean_of("rsa-2048"), mean_of("falcon-1024")) {
        (Some(rsa), Some(falcon)) if falcon > 0.0 => Some(rsa / falcon),
        _ => None,
    };
    Ok(BenchSummary { schemes, ratio })
}

pub fn format_ms(ns: f64) -> String {
    format!("{:.3}", ns / 1_000_000.0)
}

/// Text table in milliseconds, one row per scheme, plus the ratio line when
/// both default schemes ran.
pub fn render_report(summary: &BenchSummary) -> String {
    let mut out = format!(
        "{:<14}{:>5}{:>12}{:>12}{:>12}{:>12}{:>12}\n",
        "scheme", "n", "mean_ms", "median_ms", "stddev_ms", "min_ms", "max_ms"
    );
    for s in &summary.schemes {
        let _ = writeln!(
            out,
            "{:<14}{:>5}{:>12}{:>12}{:>12}{:>12}{:>12}",
            s.scheme,
            s.count,
            format_ms(s.mean_ns),
            format_ms(s.median_ns as f64),
            format_ms(s.stddev_ns),
            format_ms(s.min_ns as f64),
            format_ms(s.max_ns as f64),
        );
    }
    if let Some(r) = summary.ratio {
        let _ = writeln!(out, "ratio rsa-2048/falcon-1024 (mean total): {r:.3}");
    }
    out
}
