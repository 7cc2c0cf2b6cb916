//! CSV artifacts with a manifest header.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::config::Config;
use crate::CliError;

/// What every output file echoes before its data.
#[derive(Debug, Clone)]
pub struct RunManifest {
    pub subcommand: &'static str,
    pub config_path: PathBuf,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub version: &'static str,
}

impl RunManifest {
    pub fn header(&self, cfg: &Config) -> String {
        let mut h = format!(
            "# tweedie {} | subcommand={} | config={} | seed={} | out={}\n",
            self.version,
            self.subcommand,
            self.config_path.display(),
            self.seed,
            self.out_dir.display()
        );
        for (k, v) in cfg.entries() {
            h.push_str(&format!("# {k} = {v}\n"));
        }
        h
    }
}

/// Seventeen significant digits, independent of locale.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub struct CsvOut {
    path: PathBuf,
    inner: csv::Writer<BufWriter<File>>,
}

impl CsvOut {
    pub fn create(dir: &Path, name: &str, header: &str, columns: &[&str]) -> Result<Self, CliError> {
        let path = dir.join(name);
        let io = |e: std::io::Error| CliError::Io(path.clone(), e);
        let mut file = BufWriter::new(File::create(&path).map_err(io)?);
        file.write_all(header.as_bytes()).map_err(io)?;
        let mut inner = csv::Writer::from_writer(file);
        inner.write_record(columns).map_err(|e| csv_err(&path, e))?;
        Ok(Self { path, inner })
    }

    pub fn row<I, S>(&mut self, fields: I) -> Result<(), CliError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.inner.write_record(fields).map_err(|e| csv_err(&self.path, e))
    }

    pub fn finish(mut self) -> Result<PathBuf, CliError> {
        self.inner.flush().map_err(|e| CliError::Io(self.path.clone(), e))?;
        log::info!("wrote {}", self.path.display());
        Ok(self.path)
    }
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    CliError::Io(path.to_path_buf(), std::io::Error::other(e.to_string()))
}

/// A `key = value` sidecar file.
pub fn write_sidecar(dir: &Path, name: &str, header: &str, pairs: &[(&str, String)]) -> Result<(), CliError> {
    let path = dir.join(name);
    let mut text = header.to_string();
    for (k, v) in pairs {
        text.push_str(&format!("{k} = {v}\n"));
    }
    std::fs::write(&path, text).map_err(|e| CliError::Io(path.clone(), e))?;
    log::info!("wrote {}", path.display());
    Ok(())
}
