//! Measurement collection: download times, per-second goodput, kernel and
//! application queue times, with exact-quantile CDFs and deterministic CSV
//! export.

use std::collections::BTreeMap;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::engine::SimTime;

/// Series names created for every run so exported file sets are stable.
pub const STANDARD_SERIES: &[(&str, &str)] = &[
    ("tor_qtime", "ns"),
    ("kernel_qtime", "ns"),
    ("ttfb_web", "ns"),
    ("ttlb_web", "ns"),
    ("ttfb_bulk", "ns"),
    ("ttlb_bulk", "ns"),
    ("ttfb_perf", "ns"),
    ("ttlb_perf", "ns"),
    ("goodput", "bytes_per_sec"),
    ("kist_pending", "count"),
    ("kist_snapshots", "count"),
];

/// One time-ordered series of (SimTime, integer value) samples.
#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub unit: String,
    ts: Vec<u64>,
    vs: Vec<u64>,
}

impl Series {
    fn new(name: &str, unit: &str) -> Series {
        Series {
            name: name.to_owned(),
            unit: unit.to_owned(),
            ts: Vec::new(),
            vs: Vec::new(),
        }
    }

    pub fn push(&mut self, t: SimTime, v: u64) {
        debug_assert!(self.ts.last().is_none_or(|&last| t.as_nanos() >= last), "timestamps must be non-decreasing");
        self.ts.push(t.as_nanos());
        self.vs.push(v);
    }

    pub fn len(&self) -> usize {
        self.vs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vs.is_empty()
    }

    pub fn values(&self) -> &[u64] {
        &self.vs
    }

    pub fn timestamps(&self) -> &[u64] {
        &self.ts
    }

    pub fn sum(&self) -> u128 {
        self.vs.iter().map(|&v| v as u128).sum()
    }
}

/// Empirical CDF over a sample set; quantiles are exact order statistics
/// (no binning), `quantile(q)` = sorted value at index `ceil(q*n) - 1`.
#[derive(Debug, Clone)]
pub struct CdfTable {
    sorted: Vec<u64>,
}

impl CdfTable {
    /// Errors on an empty series.
    pub fn from_series(series: &Series) -> Result<CdfTable, MetricsError> {
        CdfTable::from_values(series.values())
    }

    pub fn from_values(values: &[u64]) -> Result<CdfTable, MetricsError> {
        if values.is_empty() {
            return Err(MetricsError::EmptySeries);
        }
        let mut sorted = values.to_vec();
        sorted.sort_unstable();
        Ok(CdfTable { sorted })
    }

    pub fn n(&self) -> usize {
        self.sorted.len()
    }

    pub fn quantile(&self, q: f64) -> u64 {
        assert!((0.0..=1.0).contains(&q), "quantile out of [0,1]: {q}");
        let n = self.sorted.len();
        let idx = (q * n as f64).ceil() as i64 - 1;
        let idx = idx.clamp(0, n as i64 - 1) as usize;
        self.sorted[idx]
    }

    /// Fraction of samples with value <= threshold.
    pub fn fraction_at_most(&self, threshold: u64) -> f64 {
        let count = self.sorted.partition_point(|&v| v <= threshold);
        count as f64 / self.sorted.len() as f64
    }
}

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("cannot build a CDF from an empty series")]
    EmptySeries,
    #[error("export failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("run at {0} is missing {1}")]
    MissingFile(PathBuf, String),
    #[error("malformed {file}: {message}")]
    Malformed { file: String, message: String },
    #[error("compared runs differ beyond the policy field: {0}")]
    SpecMismatch(String),
}

/// End-of-run scalar counters; exported into the manifest and used by the
/// conservation and overhead checks.
#[derive(Debug, Clone, Default)]
pub struct Counters {
    pub cells_created: u64,
    pub cells_delivered: u64,
    pub cells_dropped: u64,
    pub cells_queued_end: u64,
    pub payload_delivered_bytes: u64,
    pub tcpinfo_calls: u64,
    pub kist_ticks: u64,
    pub limit_violations: u64,
    pub segments_sent: u64,
    pub segments_dropped: u64,
    pub downloads_started: u64,
    pub downloads_completed: u64,
    pub downloads_failed: u64,
    pub events_processed: u64,
    pub final_clock_ns: u64,
}

impl Counters {
    fn manifest_entries(&self) -> Vec<(String, String)> {
        vec![
            ("result.cells_created".into(), self.cells_created.to_string()),
            ("result.cells_delivered".into(), self.cells_delivered.to_string()),
            ("result.cells_dropped".into(), self.cells_dropped.to_string()),
            ("result.cells_queued_end".into(), self.cells_queued_end.to_string()),
            ("result.payload_delivered_bytes".into(), self.payload_delivered_bytes.to_string()),
            ("result.tcpinfo_calls".into(), self.tcpinfo_calls.to_string()),
            ("result.kist_ticks".into(), self.kist_ticks.to_string()),
            ("result.limit_violations".into(), self.limit_violations.to_string()),
            ("result.segments_sent".into(), self.segments_sent.to_string()),
            ("result.segments_dropped".into(), self.segments_dropped.to_string()),
            ("result.downloads_started".into(), self.downloads_started.to_string()),
            ("result.downloads_completed".into(), self.downloads_completed.to_string()),
            ("result.downloads_failed".into(), self.downloads_failed.to_string()),
            ("result.events_processed".into(), self.events_processed.to_string()),
            ("result.final_clock_ns".into(), self.final_clock_ns.to_string()),
        ]
    }
}

/// Per-run metric collector. One per simulation instance; exports happen
/// after the timeline ends.
#[derive(Debug)]
pub struct Collector {
    series: BTreeMap<String, Series>,
    /// 1-in-k cell trace sampling; k=1 records every cell.
    sample_k: u64,
    kernel_sample_counter: u64,
    goodput_buckets: Vec<u64>,
    pub counters: Counters,
}

impl Collector {
    pub fn new(sample_k: u64) -> Collector {
        assert!(sample_k >= 1);
        let mut series = BTreeMap::new();
        for (name, unit) in STANDARD_SERIES {
            series.insert((*name).to_owned(), Series::new(name, unit));
        }
        Collector {
            series,
            sample_k,
            kernel_sample_counter: 0,
            goodput_buckets: Vec::new(),
            counters: Counters::default(),
        }
    }

    pub fn series(&self, name: &str) -> Option<&Series> {
        self.series.get(name)
    }

    fn push(&mut self, name: &str, t: SimTime, v: u64) {
        self.series
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown series {name}"))
            .push(t, v);
    }

    /// Application queue time for one cell at one relay, subject to the
    /// cell-trace sampling knob.
    pub fn record_tor_qtime(&mut self, cell_id: u64, t: SimTime, qtime: SimTime) {
        if cell_id % self.sample_k == 0 {
            self.push("tor_qtime", t, qtime.as_nanos());
        }
    }

    /// Kernel queue time for one segment on a relay host.
    pub fn record_kernel_qtime(&mut self, t: SimTime, qtime: SimTime) {
        self.kernel_sample_counter += 1;
        if self.kernel_sample_counter % self.sample_k == 0 {
            self.push("kernel_qtime", t, qtime.as_nanos());
        }
    }

    pub fn record_ttfb(&mut self, model: &str, t: SimTime, v: SimTime) {
        self.push(&format!("ttfb_{model}"), t, v.as_nanos());
    }

    pub fn record_ttlb(&mut self, model: &str, t: SimTime, v: SimTime) {
        self.push(&format!("ttlb_{model}"), t, v.as_nanos());
    }

    /// Adds delivered client payload bytes into the 1s goodput bucket for `t`.
    pub fn record_goodput(&mut self, t: SimTime, payload_bytes: u64) {
        let bucket = (t.as_nanos() / 1_000_000_000) as usize;
        if self.goodput_buckets.len() <= bucket {
            self.goodput_buckets.resize(bucket + 1, 0);
        }
        self.goodput_buckets[bucket] += payload_bytes;
        self.counters.payload_delivered_bytes += payload_bytes;
    }

    pub fn record_kist_tick(&mut self, t: SimTime, pending: u64, snapshots: u64) {
        self.counters.kist_ticks += 1;
        if pending > 0 || snapshots > 0 {
            self.push("kist_pending", t, pending);
            self.push("kist_snapshots", t, snapshots);
        }
    }

    /// Converts accumulated goodput buckets into the goodput series. Call once
    /// when the run ends.
    pub fn finalize(&mut self) {
        let buckets = std::mem::take(&mut self.goodput_buckets);
        for (sec, bytes) in buckets.into_iter().enumerate() {
            self.push("goodput", SimTime::from_secs(sec as u64), bytes);
        }
    }

    pub fn cdf(&self, name: &str) -> Result<CdfTable, MetricsError> {
        CdfTable::from_series(
            self.series(name)
                .ok_or_else(|| MetricsError::Malformed { file: name.into(), message: "no such series".into() })?,
        )
    }

    /// Writes one CSV per series plus `manifest.txt`; byte-identical for
    /// identical runs of the same spec and seed.
    pub fn export_csv(&self, dir: &Path, spec_entries: &[(String, String)]) -> Result<Vec<PathBuf>, MetricsError> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for series in self.series.values() {
            let path = dir.join(format!("{}.csv", series.name));
            let mut w = BufWriter::new(std::fs::File::create(&path)?);
            writeln!(w, "t_ns,value")?;
            for (t, v) in series.ts.iter().zip(series.vs.iter()) {
                writeln!(w, "{t},{v}")?;
            }
            w.flush()?;
            written.push(path);
        }
        let manifest = dir.join("manifest.txt");
        let mut w = BufWriter::new(std::fs::File::create(&manifest)?);
        let mut entries: Vec<(String, String)> = spec_entries.to_vec();
        entries.extend(self.counters.manifest_entries());
        entries.sort();
        for (k, v) in entries {
            writeln!(w, "{k}={v}")?;
        }
        w.flush()?;
        written.push(manifest);
        Ok(written)
    }
}

/// A run directory loaded back for comparison.
#[derive(Debug)]
pub struct LoadedRun {
    pub dir: PathBuf,
    pub manifest: BTreeMap<String, String>,
    pub series: BTreeMap<String, Vec<u64>>,
}

impl LoadedRun {
    pub fn load(dir: &Path) -> Result<LoadedRun, MetricsError> {
        let manifest_path = dir.join("manifest.txt");
        if !manifest_path.exists() {
            return Err(MetricsError::MissingFile(dir.to_owned(), "manifest.txt".into()));
        }
        let mut manifest = BTreeMap::new();
        for line in std::fs::read_to_string(&manifest_path)?.lines() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| MetricsError::Malformed {
                file: "manifest.txt".into(),
                message: format!("expected key=value, got `{line}`"),
            })?;
            manifest.insert(k.to_owned(), v.to_owned());
        }
        let mut series = BTreeMap::new();
        for (name, _) in STANDARD_SERIES {
            let path = dir.join(format!("{name}.csv"));
            if !path.exists() {
                return Err(MetricsError::MissingFile(dir.to_owned(), format!("{name}.csv")));
            }
            let text = std::fs::read_to_string(&path)?;
            let mut values = Vec::new();
            for (i, line) in text.lines().enumerate() {
                if i == 0 {
                    if line != "t_ns,value" {
                        return Err(MetricsError::Malformed {
                            file: format!("{name}.csv"),
                            message: format!("bad header `{line}`"),
                        });
                    }
                    continue;
                }
                let (_, v) = line.split_once(',').ok_or_else(|| MetricsError::Malformed {
                    file: format!("{name}.csv"),
                    message: format!("bad row `{line}`"),
                })?;
                values.push(v.parse::<u64>().map_err(|e| MetricsError::Malformed {
                    file: format!("{name}.csv"),
                    message: e.to_string(),
                })?);
            }
            series.insert((*name).to_owned(), values);
        }
        Ok(LoadedRun { dir: dir.to_owned(), manifest, series })
    }

    pub fn policy(&self) -> &str {
        self.manifest.get("spec.policy").map(String::as_str).unwrap_or("?")
    }
}

/// Quantile deltas for one series, oriented AMAP-minus-KIST when the pair has
/// one run of each policy.
#[derive(Debug, Clone)]
pub struct MetricDelta {
    pub series: String,
    pub q10: i64,
    pub q50: i64,
    pub q90: i64,
}

#[derive(Debug)]
pub struct CompareReport {
    pub amap_dir: PathBuf,
    pub kist_dir: PathBuf,
    pub deltas: Vec<MetricDelta>,
    pub goodput_sum_delta: i128,
}

impl CompareReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "compare (AMAP minus KIST)\n  amap: {}\n  kist: {}\n",
            self.amap_dir.display(),
            self.kist_dir.display()
        ));
        for d in &self.deltas {
            s.push_str(&format!(
                "  {:<14} q10 {:>15}  q50 {:>15}  q90 {:>15}\n",
                d.series, d.q10, d.q50, d.q90
            ));
        }
        s.push_str(&format!("  goodput_sum_delta_bytes {}\n", self.goodput_sum_delta));
        s
    }
}

/// Compares two exported runs whose specs are identical except for the policy
/// configuration. Deltas are AMAP-minus-KIST when orientable, else a-minus-b.
pub fn compare(a_dir: &Path, b_dir: &Path) -> Result<CompareReport, MetricsError> {
    let a = LoadedRun::load(a_dir)?;
    let b = LoadedRun::load(b_dir)?;
    // Policy (and its interval) is the one field allowed to differ; the spec
    // hash covers the policy so it differs with it.
    let ignored = ["spec.policy", "spec.kist_interval_ms", "spec.hash"];
    let keys: std::collections::BTreeSet<&String> = a
        .manifest
        .keys()
        .chain(b.manifest.keys())
        .filter(|k| k.starts_with("spec.") && !ignored.contains(&k.as_str()))
        .collect();
    for k in keys {
        if a.manifest.get(k) != b.manifest.get(k) {
            return Err(MetricsError::SpecMismatch(format!(
                "{k}: {:?} vs {:?}",
                a.manifest.get(k),
                b.manifest.get(k)
            )));
        }
    }
    let (amap, kist) = if a.policy() == "kist" && b.policy() == "amap" {
        (b, a)
    } else {
        (a, b)
    };
    let mut deltas = Vec::new();
    for (name, _) in STANDARD_SERIES {
        if *name == "goodput" || name.starts_with("kist_") {
            continue;
        }
        let (xa, xk) = (&amap.series[*name], &kist.series[*name]);
        if xa.is_empty() || xk.is_empty() {
            continue;
        }
        let (ca, ck) = (CdfTable::from_values(xa)?, CdfTable::from_values(xk)?);
        deltas.push(MetricDelta {
            series: (*name).to_owned(),
            q10: ca.quantile(0.10) as i64 - ck.quantile(0.10) as i64,
            q50: ca.quantile(0.50) as i64 - ck.quantile(0.50) as i64,
            q90: ca.quantile(0.90) as i64 - ck.quantile(0.90) as i64,
        });
    }
    let gp = |r: &LoadedRun| r.series["goodput"].iter().map(|&v| v as i128).sum::<i128>();
    let goodput_sum_delta = gp(&amap) - gp(&kist);
    Ok(CompareReport {
        amap_dir: amap.dir,
        kist_dir: kist.dir,
        deltas,
        goodput_sum_delta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_uses_ceil_index_rule() {
        let cdf = CdfTable::from_values(&[1, 2, 3, 4]).unwrap();
        assert_eq!(cdf.quantile(0.5), 2);
        assert_eq!(cdf.quantile(0.0), 1);
        assert_eq!(cdf.quantile(1.0), 4);
        assert_eq!(cdf.quantile(0.25), 1);
        assert_eq!(cdf.quantile(0.26), 2);
    }

    #[test]
    fn all_equal_samples_yield_that_value_at_every_quantile() {
        let cdf = CdfTable::from_values(&[7; 13]).unwrap();
        for q in [0.0, 0.1, 0.5, 0.9, 1.0] {
            assert_eq!(cdf.quantile(q), 7);
        }
    }

    #[test]
    fn empty_series_is_an_error() {
        assert!(CdfTable::from_values(&[]).is_err());
    }

    #[test]
    fn quantile_is_monotone_in_q() {
        let values: Vec<u64> = (0..997).map(|i| (i * 7919) % 1000).collect();
        let cdf = CdfTable::from_values(&values).unwrap();
        let mut prev = 0;
        for i in 0..=100 {
            let v = cdf.quantile(i as f64 / 100.0);
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn uniform_draws_hit_analytic_quantile() {
        // 1e4 uniform [0, 1000) draws: q90 within 0.02*1000 of 900.
        let mut rng = crate::engine::derive_rng(3, "cdf");
        use rand::Rng;
        let values: Vec<u64> = (0..10_000).map(|_| rng.gen_range(0u64..1000)).collect();
        let cdf = CdfTable::from_values(&values).unwrap();
        let q90 = cdf.quantile(0.9) as f64 / 1000.0;
        assert!((q90 - 0.9).abs() < 0.02, "q90 {q90}");
    }

    #[test]
    fn goodput_buckets_by_second_and_sums_to_delivered_bytes() {
        let mut c = Collector::new(1);
        c.record_goodput(SimTime::from_millis(100), 10);
        c.record_goodput(SimTime::from_millis(900), 5);
        c.record_goodput(SimTime::from_millis(1500), 7);
        c.finalize();
        let s = c.series("goodput").unwrap();
        assert_eq!(s.values(), &[15, 7]);
        assert_eq!(s.sum(), 22);
        assert_eq!(c.counters.payload_delivered_bytes, 22);
    }

    #[test]
    fn cell_trace_sampling_keeps_one_in_k() {
        let mut c = Collector::new(4);
        for cell_id in 0..16u64 {
            c.record_tor_qtime(cell_id, SimTime::ZERO, SimTime::from_micros(5));
        }
        assert_eq!(c.series("tor_qtime").unwrap().len(), 4);
    }

    #[test]
    fn export_is_deterministic_and_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let make = || {
            let mut c = Collector::new(1);
            c.record_tor_qtime(1, SimTime::from_millis(3), SimTime::from_micros(42));
            c.record_ttlb("web", SimTime::from_secs(2), SimTime::from_millis(800));
            c.record_goodput(SimTime::from_millis(1200), 498);
            c.finalize();
            c
        };
        let spec: Vec<(String, String)> = vec![
            ("spec.policy".into(), "kist".into()),
            ("spec.seed".into(), "42".into()),
        ];
        let d1 = dir.path().join("a");
        let d2 = dir.path().join("b");
        make().export_csv(&d1, &spec).unwrap();
        make().export_csv(&d2, &spec).unwrap();
        for (name, _) in STANDARD_SERIES {
            let f1 = std::fs::read(d1.join(format!("{name}.csv"))).unwrap();
            let f2 = std::fs::read(d2.join(format!("{name}.csv"))).unwrap();
            assert_eq!(f1, f2, "{name}.csv differs");
        }
        assert_eq!(
            std::fs::read(d1.join("manifest.txt")).unwrap(),
            std::fs::read(d2.join("manifest.txt")).unwrap()
        );
        let run = LoadedRun::load(&d1).unwrap();
        assert_eq!(run.policy(), "kist");
        assert_eq!(run.series["ttlb_web"], vec![800_000_000]);
    }

    #[test]
    fn empty_run_exports_manifest_and_header_only_csvs() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = Collector::new(1);
        c.finalize();
        let files = c.export_csv(dir.path(), &[("spec.policy".into(), "amap".into())]).unwrap();
        assert_eq!(files.len(), STANDARD_SERIES.len() + 1);
        let csv = std::fs::read_to_string(dir.path().join("tor_qtime.csv")).unwrap();
        assert_eq!(csv, "t_ns,value\n");
        assert!(dir.path().join("manifest.txt").exists());
    }

    #[test]
    fn compare_of_a_run_with_itself_is_all_zero() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = Collector::new(1);
        for i in 0..100u64 {
            c.record_tor_qtime(i, SimTime::from_millis(i), SimTime::from_micros(i * 3));
            c.record_ttlb("web", SimTime::from_millis(i), SimTime::from_millis(100 + i));
        }
        c.record_goodput(SimTime::from_millis(500), 4980);
        c.finalize();
        let spec: Vec<(String, String)> = vec![("spec.policy".into(), "amap".into())];
        let d1 = dir.path().join("a");
        let d2 = dir.path().join("b");
        c.export_csv(&d1, &spec).unwrap();
        c.export_csv(&d2, &spec).unwrap();
        let report = compare(&d1, &d2).unwrap();
        for d in &report.deltas {
            assert_eq!((d.q10, d.q50, d.q90), (0, 0, 0), "{}", d.series);
        }
        assert_eq!(report.goodput_sum_delta, 0);
    }

    #[test]
    fn compare_rejects_mismatched_specs() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = Collector::new(1);
        c.finalize();
        let d1 = dir.path().join("a");
        let d2 = dir.path().join("b");
        c.export_csv(&d1, &[("spec.loss_model".into(), "base".into()), ("spec.policy".into(), "amap".into())])
            .unwrap();
        c.export_csv(&d2, &[("spec.loss_model".into(), "high".into()), ("spec.policy".into(), "kist".into())])
            .unwrap();
        assert!(matches!(compare(&d1, &d2), Err(MetricsError::SpecMismatch(_))));
    }
}
