//! File outputs: binary PGM images, numeric CSVs, and history writing with
//! the deterministic single-thread mode (wall-clock column zeroed so repeated
//! runs emit byte-identical files).

use crate::CliResult;
use std::io::Write;
use std::path::Path;
use wdl_core::bcdpr::{write_history_csv, HistoryRow};
use wdl_core::simplex::SimplexStack;
use wdl_core::tensor::Tensor;

/// 8-bit binary PGM (P5), row-major, values rescaled linearly to 0..255 per
/// image.
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> CliResult<()> {
    assert_eq!(values.len(), width * height);
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut bytes = Vec::with_capacity(values.len());
    for &v in values {
        let b = if span > 0.0 {
            ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        };
        bytes.push(b);
    }
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Distribution image: 2-D grids become (height, width) images, 1-D grids a
/// one-row strip.
pub fn write_distribution_pgm(path: &Path, grid: &[usize], values: &[f64]) -> CliResult<()> {
    match grid {
        [w] => write_pgm(path, *w, 1, values),
        [h, w] => write_pgm(path, *w, *h, values),
        other => Err(crate::CliError::Config(format!(
            "PGM export handles 1-D and 2-D grids, got {other:?}"
        ))),
    }
}

/// Writes the run history, zeroing the seconds column in deterministic mode.
pub fn write_history(path: &Path, rows: &[HistoryRow], deterministic: bool) -> CliResult<()> {
    let mut rows = rows.to_vec();
    if deterministic {
        for r in rows.iter_mut() {
            r.seconds = 0.0;
        }
    }
    let mut f = std::fs::File::create(path)?;
    write_history_csv(&rows, &mut f)?;
    Ok(())
}

/// Relative-error table `n,rel_err` with `rel_err = f(n)/f(0)`.
pub fn write_relative_errors(path: &Path, rows: &[HistoryRow]) -> CliResult<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "n,rel_err")?;
    let f0 = rows.first().map(|r| r.f).unwrap_or(1.0);
    for r in rows {
        writeln!(f, "{},{}", r.n, r.f / f0)?;
    }
    Ok(())
}

pub fn write_tensor_csv(path: &Path, t: &Tensor) -> CliResult<()> {
    let mut f = std::fs::File::create(path)?;
    t.write_csv(&mut f)?;
    Ok(())
}

/// Reloads a written distribution file and checks every fiber is a simplex
/// within 1e-7 (the validation contract for all emitted distributions).
pub fn validate_distribution_file(path: &Path, simplex_modes: usize) -> CliResult<SimplexStack> {
    let tensor = if path.extension().and_then(|e| e.to_str()) == Some("tnsr") {
        Tensor::load(path)?
    } else {
        let mut f = std::fs::File::open(path)?;
        Tensor::read_csv(&mut f)?
    };
    Ok(SimplexStack::with_tol(tensor, simplex_modes, 1e-7)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_rescaling() {
        let dir = std::env::temp_dir().join(format!("wdl_pgm_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.pgm");
        write_pgm(&path, 3, 1, &[0.0, 0.5, 1.0]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = b"P5\n3 1\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0u8, 128, 255]);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn constant_image_is_all_zero() {
        let dir = std::env::temp_dir().join(format!("wdl_pgm0_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.pgm");
        write_pgm(&path, 2, 2, &[0.3; 4]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[bytes.len() - 4..], &[0u8, 0, 0, 0]);
        std::fs::remove_dir_all(&dir).ok();
    }
}
