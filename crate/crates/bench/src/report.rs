//! Run reports and the files they are written to: JSON, CSV and a gnuplot
//! script for the latency histogram.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::histogram::{LatencyHistogram, Percentiles};
use crate::sweep::{FairnessRow, ScalingRow};
use crate::worker::HostInfo;
use crate::workload::WorkloadSpec;
use crate::BenchError;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClientSummary {
    pub client: u32,
    pub shard: u32,
    pub ops: u64,
    pub errors: u64,
    pub echo_failures: u64,
    pub elapsed_secs: f64,
    pub ops_per_sec: f64,
    pub key_digest: u64,
    pub host: HostInfo,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Report {
    pub spec: WorkloadSpec,
    pub clients: Vec<ClientSummary>,
    pub total_ops: u64,
    /// Longest client run.
    pub wall_secs: f64,
    /// Start barrier to last result, as the coordinator saw it.
    pub coordinator_secs: f64,
    pub aggregate_ops_per_sec: f64,
    pub histogram: LatencyHistogram,
    pub percentiles: Percentiles,
    /// Clients that failed to start or aborted; the rest still report.
    pub failures: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub scaling: Option<Vec<ScalingRow>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fairness: Option<Vec<FairnessRow>>,
}

fn csv_err(e: csv::Error) -> BenchError {
    BenchError::Io(e.to_string())
}

fn io(e: std::io::Error) -> BenchError {
    BenchError::Io(e.to_string())
}

/// `report.json` → `report.<suffix>`.
pub fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "report".into());
    out.with_file_name(format!("{stem}.{suffix}"))
}

#[derive(Serialize)]
struct BinRow {
    bin: usize,
    lo_us: f64,
    hi_us: f64,
    count: u64,
}

#[derive(Serialize)]
struct ClientRow<'a> {
    client: u32,
    shard: u32,
    ops: u64,
    errors: u64,
    ops_per_sec: f64,
    hostname: &'a str,
    pid: u32,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn histogram_csv(&self) -> Result<String, BenchError> {
        let h = &self.histogram;
        let mut w = csv::Writer::from_writer(Vec::new());
        for i in 0..h.bins() {
            let (lo, hi) = h.edges(i);
            w.serialize(BinRow { bin: i, lo_us: lo / 1e3, hi_us: hi / 1e3, count: h.counts[i] }).map_err(csv_err)?;
        }
        // overflow as a trailing open-ended bin
        let top = h.edges(h.bins() - 1).1 / 1e3;
        w.serialize(BinRow { bin: h.bins(), lo_us: top, hi_us: f64::INFINITY, count: h.overflow }).map_err(csv_err)?;
        Ok(String::from_utf8(w.into_inner().map_err(|e| BenchError::Io(e.to_string()))?).expect("utf8"))
    }

    pub fn clients_csv(&self) -> Result<String, BenchError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for c in &self.clients {
            w.serialize(ClientRow {
                client: c.client,
                shard: c.shard,
                ops: c.ops,
                errors: c.errors,
                ops_per_sec: c.ops_per_sec,
                hostname: &c.host.hostname,
                pid: c.host.pid,
            })
            .map_err(csv_err)?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| BenchError::Io(e.to_string()))?).expect("utf8"))
    }

    pub fn scaling_csv(&self) -> Result<Option<String>, BenchError> {
        let Some(rows) = &self.scaling else { return Ok(None) };
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r).map_err(csv_err)?;
        }
        Ok(Some(String::from_utf8(w.into_inner().map_err(|e| BenchError::Io(e.to_string()))?).expect("utf8")))
    }

    /// Gnuplot script plotting the histogram CSV with a log-scale count axis.
    pub fn gnuplot(&self, csv_name: &str, png_name: &str) -> String {
        format!(
            "set terminal pngcairo size 900,500\n\
             set output '{png_name}'\n\
             set datafile separator ','\n\
             set title '{mix}, {k} B key, {v} B value, {c} clients, {s} shards'\n\
             set xlabel 'latency (us)'\n\
             set ylabel 'samples'\n\
             set logscale y\n\
             set style fill solid 0.6\n\
             set boxwidth 0.9 relative\n\
             plot '{csv_name}' every ::1::{bins} using (($2+$3)/2):($4 > 0 ? $4 : 1/0) with boxes notitle\n",
            mix = self.spec.mix,
            k = self.spec.key_len,
            v = self.spec.value_len,
            c = self.spec.clients,
            s = self.spec.shards,
            bins = self.histogram.bins(),
        )
    }

    /// Write `out` (JSON) plus `.hist.csv`, `.clients.csv`, `.gp` and, for
    /// sweeps, `.scaling.csv` next to it. Returns every path written.
    pub fn write_all(&self, out: &Path) -> Result<Vec<PathBuf>, BenchError> {
        let mut written = Vec::new();
        let mut put = |p: PathBuf, body: &str| -> Result<(), BenchError> {
            let mut f = std::fs::File::create(&p).map_err(io)?;
            f.write_all(body.as_bytes()).map_err(io)?;
            written.push(p);
            Ok(())
        };
        put(out.to_path_buf(), &self.to_json())?;
        let hist = sibling(out, "hist.csv");
        put(hist.clone(), &self.histogram_csv()?)?;
        put(sibling(out, "clients.csv"), &self.clients_csv()?)?;
        let png = sibling(out, "hist.png");
        let name = |p: &Path| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        put(sibling(out, "gp"), &self.gnuplot(&name(&hist), &name(&png)))?;
        if let Some(s) = self.scaling_csv()? {
            put(sibling(out, "scaling.csv"), &s)?;
        }
        Ok(written)
    }
}
