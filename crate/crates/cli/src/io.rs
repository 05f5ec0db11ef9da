//! CSV and PGM input/output.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use fbp_core::{Grid, SpaceTimeField};
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat};

use crate::CliError;

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

pub struct CsvOut {
    path: std::path::PathBuf,
    w: csv::Writer<BufWriter<File>>,
}

impl CsvOut {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self, CliError> {
        let file = File::create(path).map_err(|e| io_err(path, e))?;
        let mut w = csv::Writer::from_writer(BufWriter::new(file));
        w.write_record(header).map_err(|e| io_err(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            w,
        })
    }

    pub fn row<I, S>(&mut self, fields: I) -> Result<(), CliError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.w.write_record(fields).map_err(|e| io_err(&self.path, e))
    }

    pub fn finish(mut self) -> Result<(), CliError> {
        self.w.flush().map_err(|e| io_err(&self.path, e))
    }
}

/// Levels written as snapshots: `count` of them spread evenly over `0..=nt`.
pub fn snapshot_levels(nt: usize, count: usize) -> Vec<usize> {
    if count <= 1 || nt == 0 {
        return vec![nt];
    }
    let mut out: Vec<usize> = (0..count).map(|i| (i * nt + (count - 1) / 2) / (count - 1)).collect();
    out.dedup();
    out
}

/// Long-format snapshots `level, t, x[, y], u`.
pub fn write_snapshots(path: &Path, u: &SpaceTimeField, levels: &[usize]) -> Result<(), CliError> {
    let g: &Grid = &u.grid;
    let header: &[&str] = if g.dim == 1 {
        &["level", "t", "x", "u"]
    } else {
        &["level", "t", "x", "y", "u"]
    };
    let mut out = CsvOut::create(path, header)?;
    for &k in levels {
        for (c, &v) in u.slice(k).iter().enumerate() {
            let x = g.cell_center(c);
            let mut rec = vec![k.to_string(), num(g.time(k)), num(x[0])];
            if g.dim == 2 {
                rec.push(num(x[1]));
            }
            rec.push(num(v));
            out.row(rec)?;
        }
    }
    out.finish()
}

/// Values of the last column of a CSV file, header optional.
pub fn read_column(path: &Path) -> Result<Vec<f64>, CliError> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| io_err(path, e))?;
        let Some(last) = rec.iter().next_back() else {
            continue;
        };
        match last.trim().parse::<f64>() {
            Ok(v) => out.push(v),
            Err(_) if i == 0 => {}
            Err(_) => return Err(CliError::Config(format!("{}: row {} is not numeric", path.display(), i + 1))),
        }
    }
    Ok(out)
}

/// Read an 8-bit binary graymap.
pub fn read_pgm(path: &Path) -> Result<(Vec<u8>, usize, usize), CliError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    if !bytes.starts_with(b"P5") {
        return Err(io_err(path, "not a binary graymap (P5)"));
    }
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Pnm).map_err(|e| io_err(path, e))?;
    let image::DynamicImage::ImageLuma8(gray) = img else {
        return Err(io_err(path, "only 8-bit graymaps are supported"));
    };
    let (w, h) = gray.dimensions();
    Ok((gray.into_raw(), w as usize, h as usize))
}

pub fn write_pgm(path: &Path, pixels: &[u8], width: usize, height: usize) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    PnmEncoder::new(BufWriter::new(file))
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(pixels, width as u32, height as u32, ExtendedColorType::L8)
        .map_err(|e| io_err(path, e))
}
