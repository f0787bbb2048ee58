//! Comparison of two run directories of the same scenario.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use crate::output::{io_err, Snapshot, Table};
use crate::run::{Manifest, MANIFEST, PARTICLES_FINAL, PROBE_DIR, SNAPSHOT_DIR, TRAJECTORIES};
use crate::BenchError;

/// Difference of one output item.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemDiff {
    pub item: String,
    pub values: usize,
    pub max_abs_diff: f64,
    /// Every value has the same bit pattern.
    pub bitwise: bool,
    /// Structural mismatch (missing file, different shape); always a failure.
    pub mismatch: Option<String>,
}

impl ItemDiff {
    pub fn passes(&self, tol: f64) -> bool {
        self.mismatch.is_none() && if tol == 0.0 { self.bitwise } else { self.max_abs_diff <= tol }
    }
}

#[derive(Clone, Debug)]
pub struct CompareReport {
    pub tolerance: f64,
    pub items: Vec<ItemDiff>,
}

impl CompareReport {
    pub fn passed(&self) -> bool {
        self.items.iter().all(|d| d.passes(self.tolerance))
    }

    pub fn max_abs_diff(&self) -> f64 {
        self.items.iter().map(|d| d.max_abs_diff).fold(0.0, f64::max)
    }
}

impl fmt::Display for CompareReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for d in &self.items {
            let status = if d.passes(self.tolerance) { "ok" } else { "FAIL" };
            match &d.mismatch {
                Some(m) => writeln!(f, "{status:4} {:40} {m}", d.item)?,
                None => writeln!(
                    f,
                    "{status:4} {:40} values={:<9} max|diff|={:.3e}{}",
                    d.item,
                    d.values,
                    d.max_abs_diff,
                    if d.bitwise { " (bitwise)" } else { "" }
                )?,
            }
        }
        write!(
            f,
            "{} at tolerance {:e}: {} items",
            if self.passed() { "PASS" } else { "FAIL" },
            self.tolerance,
            self.items.len()
        )
    }
}

#[derive(Default)]
struct Acc {
    values: usize,
    max: f64,
    bitwise: bool,
}

impl Acc {
    fn new() -> Self {
        Self {
            bitwise: true,
            ..Default::default()
        }
    }

    fn push(&mut self, a: f64, b: f64) {
        self.values += 1;
        if a.to_bits() != b.to_bits() {
            self.bitwise = false;
            let d = (a - b).abs();
            // NaN on either side counts as an infinite difference
            self.max = self.max.max(if d.is_nan() { f64::INFINITY } else { d });
        }
    }

    fn finish(self, item: String) -> ItemDiff {
        ItemDiff {
            item,
            values: self.values,
            max_abs_diff: self.max,
            bitwise: self.bitwise,
            mismatch: None,
        }
    }
}

fn mismatch(item: String, m: impl Into<String>) -> ItemDiff {
    ItemDiff {
        item,
        values: 0,
        max_abs_diff: f64::INFINITY,
        bitwise: false,
        mismatch: Some(m.into()),
    }
}

fn read_manifest(dir: &Path) -> Result<Manifest, BenchError> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| BenchError::Format {
        path,
        message: e.to_string(),
    })
}

/// Compares two CSV tables column by column, ignoring columns in `skip`.
fn compare_table(item: String, a: &Path, b: &Path, skip: &[&str]) -> Result<ItemDiff, BenchError> {
    let (ta, tb) = (Table::read(a)?, Table::read(b)?);
    if ta.header != tb.header {
        return Ok(mismatch(item, "different columns"));
    }
    if ta.rows.len() != tb.rows.len() {
        return Ok(mismatch(item, format!("{} rows vs {}", ta.rows.len(), tb.rows.len())));
    }
    let cols: Vec<usize> = (0..ta.header.len()).filter(|&c| !skip.contains(&ta.header[c].as_str())).collect();
    let mut acc = Acc::new();
    for (ra, rb) in ta.rows.iter().zip(&tb.rows) {
        if ra.len() != ta.header.len() || rb.len() != ta.header.len() {
            return Ok(mismatch(item, "ragged row"));
        }
        for &c in &cols {
            match (ra[c].parse::<f64>(), rb[c].parse::<f64>()) {
                (Ok(x), Ok(y)) => acc.push(x, y),
                _ if ra[c] == rb[c] => {}
                _ => return Ok(mismatch(item, format!("column {} differs: {} vs {}", ta.header[c], ra[c], rb[c]))),
            }
        }
    }
    Ok(acc.finish(item))
}

fn compare_snapshot(item: String, a: &Path, b: &Path) -> Result<ItemDiff, BenchError> {
    let (sa, sb) = (Snapshot::read(a)?, Snapshot::read(b)?);
    if sa.dims != sb.dims || sa.components != sb.components || sa.step != sb.step {
        return Ok(mismatch(item, "different grid, components or step"));
    }
    let mut acc = Acc::new();
    acc.push(sa.time, sb.time);
    for (x, y) in sa.values.iter().zip(&sb.values) {
        acc.push(*x, *y);
    }
    Ok(acc.finish(item))
}

fn files_in(dir: &Path, ext: &str) -> Result<BTreeSet<String>, BenchError> {
    if !dir.exists() {
        return Ok(BTreeSet::new());
    }
    let mut out = BTreeSet::new();
    for e in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let e = e.map_err(io_err(dir))?;
        let name = e.file_name().to_string_lossy().into_owned();
        if name.ends_with(ext) {
            out.insert(name);
        }
    }
    Ok(out)
}

/// Field-by-field and particle-by-particle comparison of two runs.
///
/// Fails with an error when the runs are of different scenarios. A tolerance of
/// zero demands bitwise equality. Counters and timings are not compared: they
/// legitimately differ between rank counts and strategies.
pub fn compare_runs(a: &Path, b: &Path, tolerance: f64) -> Result<CompareReport, BenchError> {
    let (ma, mb) = (read_manifest(a)?, read_manifest(b)?);
    if ma.config_sha256 != mb.config_sha256 {
        return Err(BenchError::ScenarioMismatch {
            a: ma.config_sha256,
            b: mb.config_sha256,
        });
    }
    let mut items = Vec::new();
    for name in [PARTICLES_FINAL, TRAJECTORIES] {
        let (pa, pb) = (a.join(name), b.join(name));
        match (pa.exists(), pb.exists()) {
            (true, true) => items.push(compare_table(name.to_string(), &pa, &pb, &[])?),
            (false, false) => {}
            _ => items.push(mismatch(name.to_string(), "present in only one run")),
        }
    }
    for (sub, ext) in [(PROBE_DIR, ".csv"), (SNAPSHOT_DIR, ".bin")] {
        let (fa, fb) = (files_in(&a.join(sub), ext)?, files_in(&b.join(sub), ext)?);
        for name in fa.union(&fb) {
            let item = format!("{sub}/{name}");
            let (pa, pb) = (a.join(sub).join(name), b.join(sub).join(name));
            if !(fa.contains(name) && fb.contains(name)) {
                items.push(mismatch(item, "present in only one run"));
            } else if ext == ".bin" {
                items.push(compare_snapshot(item, &pa, &pb)?);
            } else {
                // the owning rank legitimately differs between rank counts
                items.push(compare_table(item, &pa, &pb, &["rank"])?);
            }
        }
    }
    Ok(CompareReport { tolerance, items })
}
