use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::{default_names, RawSeries};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reads a numeric table (rows are time steps, columns are variables).
///
/// `skip_cols` drops that many leading columns, e.g. a timestamp. Row and
/// column numbers in parse errors are 1-based positions in the file.
pub fn load_csv(path: impl AsRef<Path>, has_header: bool, skip_cols: usize) -> Result<RawSeries> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_csv(file, has_header, skip_cols)
}

pub fn parse_csv<R: Read>(reader: R, has_header: bool, skip_cols: usize) -> Result<RawSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut names: Option<Vec<String>> = None;
    let mut width: Option<usize> = None;
    let mut data = Vec::new();
    let mut steps = 0usize;
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Parse {
            row,
            col: 0,
            msg: e.to_string(),
        })?;
        if rec.len() <= skip_cols {
            return Err(Error::Parse {
                row,
                col: rec.len(),
                msg: format!(
                    "row has {} fields, need more than {skip_cols} skipped columns",
                    rec.len()
                ),
            });
        }
        let n = rec.len() - skip_cols;
        match width {
            None => width = Some(n),
            Some(w) if w != n => {
                return Err(Error::Parse {
                    row,
                    col: rec.len().min(w + skip_cols) + 1,
                    msg: format!("ragged row: expected {} fields, found {}", w + skip_cols, rec.len()),
                })
            }
            _ => {}
        }
        if has_header && names.is_none() {
            names = Some(rec.iter().skip(skip_cols).map(str::to_owned).collect());
            continue;
        }
        for (j, cell) in rec.iter().enumerate().skip(skip_cols) {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                col: j + 1,
                msg: format!("non-numeric cell `{cell}`"),
            })?;
            data.push(v);
        }
        steps += 1;
    }
    let n = match width {
        Some(n) if steps > 0 => n,
        _ => {
            return Err(Error::Parse {
                row: 0,
                col: 0,
                msg: "no data rows".into(),
            })
        }
    };
    let values = Tensor::new(&[steps, n], data)?;
    RawSeries::new(values, names.unwrap_or_else(|| default_names(n)), "")
}

/// Writes a series with a header row; values use the shortest round-trip
/// decimal form.
pub fn write_csv(raw: &RawSeries, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut out = std::io::BufWriter::new(File::create(path).map_err(io)?);
    writeln!(out, "{}", raw.variable_names().join(",")).map_err(io)?;
    let n = raw.n_vars();
    for row in raw.values().data().chunks(n) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", line.join(",")).map_err(io)?;
    }
    out.flush().map_err(io)
}
