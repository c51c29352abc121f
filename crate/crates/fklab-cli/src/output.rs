use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

pub enum Cell {
    Int(usize),
    Float(f64),
    Empty,
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Cell::Empty, Cell::Float)
    }
}

/// CSV file with a `#` comment line naming the columns, then a header row.
/// Floats carry 17 significant digits.
pub struct CsvTable {
    out: BufWriter<File>,
    width: usize,
}

impl CsvTable {
    pub fn create(path: &Path, description: &str, columns: &[(&str, &str)]) -> io::Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        let doc: Vec<String> = columns.iter().map(|(c, d)| format!("{c} = {d}")).collect();
        writeln!(out, "# {description}; {}", doc.join("; "))?;
        let names: Vec<&str> = columns.iter().map(|c| c.0).collect();
        writeln!(out, "{}", names.join(","))?;
        Ok(CsvTable {
            out,
            width: columns.len(),
        })
    }

    pub fn row(&mut self, cells: &[Cell]) -> io::Result<()> {
        debug_assert_eq!(cells.len(), self.width);
        let text: Vec<String> = cells
            .iter()
            .map(|c| match c {
                Cell::Int(v) => v.to_string(),
                Cell::Float(v) => format!("{v:.16e}"),
                Cell::Empty => String::new(),
            })
            .collect();
        writeln!(self.out, "{}", text.join(","))
    }

    pub fn finish(mut self) -> io::Result<()> {
        self.out.flush()
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    out.flush()
}

/// Short content hash of the command and its config echo.
pub fn run_id(command: &str, config: &serde_json::Value) -> String {
    let mut h = Sha256::new();
    h.update(command.as_bytes());
    h.update(config.to_string().as_bytes());
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize)]
pub struct Summary<'a, T: Serialize> {
    pub run_id: String,
    pub command: &'a str,
    pub status: &'a str,
    pub config: &'a serde_json::Value,
    pub result: T,
}

pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn create(root: &Path) -> io::Result<Self> {
        std::fs::create_dir_all(root)?;
        Ok(OutDir {
            root: root.to_path_buf(),
        })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}
