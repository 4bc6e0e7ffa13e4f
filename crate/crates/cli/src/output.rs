use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use serde_json::Value;

/// Output directory plus the warnings gathered while a subcommand runs.
pub struct Output {
    dir: PathBuf,
    files: Vec<String>,
    pub warnings: Vec<String>,
}

impl Output {
    pub fn create(dir: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
            warnings: Vec::new(),
        })
    }

    pub fn warn(&mut self, msg: impl Into<String>) {
        self.warnings.push(msg.into());
    }

    /// Create `name` in the output directory and hand a buffered writer to `f`.
    pub fn file<F>(&mut self, name: &str, f: F) -> anyhow::Result<()>
    where
        F: FnOnce(&mut BufWriter<File>) -> anyhow::Result<()>,
    {
        let path = self.dir.join(name);
        let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        let mut w = BufWriter::new(file);
        f(&mut w)?;
        w.flush()?;
        self.files.push(name.to_string());
        Ok(())
    }

    /// Plain CSV from a header and rows of numbers.
    pub fn table(&mut self, name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<f64>>) -> anyhow::Result<()> {
        self.file(name, |w| {
            writeln!(w, "{}", header.join(","))?;
            for row in rows {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
                writeln!(w, "{}", cells.join(","))?;
            }
            Ok(())
        })
    }

    /// Write `report.json` and return the report.
    pub fn finish(mut self, command: &str, seed: u64, results: Value) -> anyhow::Result<Report> {
        self.files.push("report.json".into());
        let report = Report {
            schema: format!("photonsource/{command}/v1"),
            seed,
            files: self.files.clone(),
            warnings: self.warnings.clone(),
            results,
        };
        let text = serde_json::to_string_pretty(&report)?;
        fs::write(self.dir.join("report.json"), text + "\n")?;
        Ok(report)
    }
}

#[derive(Debug, Serialize)]
pub struct Report {
    pub schema: String,
    pub seed: u64,
    pub files: Vec<String>,
    pub warnings: Vec<String>,
    pub results: Value,
}

/// Decorrelated per-task seed.
pub fn sub_seed(seed: u64, k: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k.wrapping_mul(0xBF58_476D_1CE4_E5B9))
}
