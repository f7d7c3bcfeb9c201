//! CSV tables, SVG scatter plots and atomic file output.
//!
//! CSV files are comma-delimited with `.` decimals, one sample per row and
//! an optional single header row. A column headed `label` holds class
//! labels. Floats are written in Rust's shortest round-trip form, so a
//! written table reads back bit for bit.

use std::io::Write;
use std::path::Path;

use jkoflow_core::Mat;
use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{CliError, CliResult};

/// Writes `bytes` to a temporary file next to `path` and renames it over
/// `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Option<Vec<String>>,
    /// Feature columns, `label` excluded.
    pub x: Mat,
    pub labels: Option<Vec<usize>>,
}

/// Reads a rectangular numeric table. Errors name the 1-based line.
pub fn load_csv(path: &Path, delimiter: u8, has_header: bool) -> CliResult<Table> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    read_csv(file, delimiter, has_header).map_err(|m| CliError::io(path, m))
}

pub fn read_csv<R: std::io::Read>(reader: R, delimiter: u8, has_header: bool) -> Result<Table, String> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(has_header)
        .flexible(true)
        .from_reader(reader);
    let header: Option<Vec<String>> = if has_header {
        let h = rdr.headers().map_err(|e| e.to_string())?;
        Some(h.iter().map(|s| s.trim().to_string()).collect())
    } else {
        None
    };
    let label_col = header.as_ref().and_then(|h| h.iter().position(|c| c == "label"));
    let mut width = header.as_ref().map(Vec::len);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        let line = rec.position().map_or(0, |p| p.line());
        let w = *width.get_or_insert(rec.len());
        if rec.len() != w {
            return Err(format!("line {line}: expected {w} fields, found {}", rec.len()));
        }
        for (j, cell) in rec.iter().enumerate() {
            let cell = cell.trim();
            if Some(j) == label_col {
                let l = cell
                    .parse::<usize>()
                    .map_err(|_| format!("line {line}: label `{cell}` is not a non-negative integer"))?;
                labels.push(l);
            } else {
                let v = cell
                    .parse::<f64>()
                    .map_err(|_| format!("line {line}, column {}: `{cell}` is not a number", j + 1))?;
                data.push(v);
            }
        }
        rows += 1;
    }
    let cols = width.unwrap_or(0) - usize::from(label_col.is_some());
    let header = header.map(|h| h.into_iter().filter(|c| c != "label").collect());
    Ok(Table {
        header,
        x: Mat::from_vec(rows, cols, data).map_err(|e| e.to_string())?,
        labels: label_col.map(|_| labels),
    })
}

/// `x0,x1,…[,label]` header then one row per sample.
pub fn samples_csv(x: &Mat, labels: Option<&[usize]>) -> String {
    let mut out = String::new();
    let names: Vec<String> = (0..x.cols()).map(|j| format!("x{j}")).collect();
    out.push_str(&names.join(","));
    if labels.is_some() {
        out.push_str(",label");
    }
    out.push('\n');
    for (i, row) in x.iter_rows().enumerate() {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        out.push_str(&cells.join(","));
        if let Some(l) = labels {
            out.push_str(&format!(",{}", l[i]));
        }
        out.push('\n');
    }
    out
}

/// Rows reduced to two coordinates: the columns themselves in 2-D, the
/// first column against zero in 1-D, the two leading principal components
/// above.
pub fn project_2d(x: &Mat) -> Vec<[f64; 2]> {
    match x.cols() {
        0 => vec![[0.0, 0.0]; x.rows()],
        1 => x.iter_rows().map(|r| [r[0], 0.0]).collect(),
        2 => x.iter_rows().map(|r| [r[0], r[1]]).collect(),
        d => {
            let mean = x.col_means();
            let centered = DMatrix::from_fn(x.rows(), d, |i, j| x.get(i, j) - mean[j]);
            let cov = centered.transpose() * &centered / (x.rows().max(2) - 1) as f64;
            let eig = SymmetricEigen::new(cov);
            let mut order: Vec<usize> = (0..d).collect();
            order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
            let (u, v) = (eig.eigenvectors.column(order[0]), eig.eigenvectors.column(order[1]));
            (0..x.rows())
                .map(|i| {
                    let r = centered.row(i);
                    [r.dot(&u.transpose()), r.dot(&v.transpose())]
                })
                .collect()
        }
    }
}

const VIEW: f64 = 500.0;
const MARGIN: f64 = 10.0;

struct Frame {
    lo: [f64; 2],
    scale: f64,
}

impl Frame {
    fn fit(points: &[[f64; 2]]) -> Frame {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in points {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        if points.is_empty() {
            return Frame { lo: [0.0; 2], scale: 1.0 };
        }
        let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-12);
        Frame {
            lo,
            scale: (VIEW - 2.0 * MARGIN) / span,
        }
    }

    fn map(&self, p: [f64; 2]) -> (f64, f64) {
        (
            MARGIN + (p[0] - self.lo[0]) * self.scale,
            VIEW - MARGIN - (p[1] - self.lo[1]) * self.scale,
        )
    }
}

fn svg_open() -> String {
    format!("<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {VIEW} {VIEW}\" width=\"{VIEW}\" height=\"{VIEW}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n")
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// One `<circle>` per sample, colored by label when given.
pub fn scatter_svg(x: &Mat, labels: Option<&[usize]>) -> String {
    let pts = project_2d(x);
    let frame = Frame::fit(&pts);
    let mut out = svg_open();
    for (i, p) in pts.iter().enumerate() {
        let (cx, cy) = frame.map(*p);
        let color = PALETTE[labels.map_or(0, |l| l[i]) % PALETTE.len()];
        out.push_str(&format!("<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"1\" fill=\"{color}\" fill-opacity=\"0.5\"/>\n"));
    }
    out.push_str("</svg>\n");
    out
}

/// A 2-D path drawn as a polyline through its points, with the last point
/// marked separately.
pub fn trajectory_svg(points: &[[f64; 2]], endpoint: [f64; 2]) -> String {
    let mut all = points.to_vec();
    all.push(endpoint);
    let frame = Frame::fit(&all);
    let mut out = svg_open();
    let path: Vec<String> = all
        .iter()
        .map(|p| {
            let (x, y) = frame.map(*p);
            format!("{x:.2},{y:.2}")
        })
        .collect();
    out.push_str(&format!(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"#888\" stroke-width=\"1\"/>\n",
        path.join(" ")
    ));
    for p in points {
        let (cx, cy) = frame.map(*p);
        out.push_str(&format!("<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"4\" fill=\"{}\"/>\n", PALETTE[0]));
    }
    let (cx, cy) = frame.map(endpoint);
    out.push_str(&format!("<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"5\" fill=\"{}\"/>\n", PALETTE[1]));
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_small_tables() {
        let t = read_csv("0,1\n2,3\n".as_bytes(), b',', false).unwrap();
        assert_eq!(t.x, Mat::from_rows(&[[0.0, 1.0], [2.0, 3.0]]).unwrap());
        assert!(t.header.is_none() && t.labels.is_none());
        let t = read_csv("a,b\n0,1\n2,3\n".as_bytes(), b',', true).unwrap();
        assert_eq!(t.x.rows(), 2);
        assert_eq!(t.header.unwrap(), vec!["a", "b"]);
        let t = read_csv("a,b\n0,1\n".as_bytes(), b',', false);
        assert!(t.unwrap_err().contains("line 1"));
        let t = read_csv("0;1\n2;3\n".as_bytes(), b';', false).unwrap();
        assert_eq!(t.x.get(1, 1), 3.0);
    }

    #[test]
    fn errors_name_the_line() {
        let e = read_csv("x0,x1\n0,1\n2\n".as_bytes(), b',', true).unwrap_err();
        assert!(e.contains("line 3"), "{e}");
        let e = read_csv("x0,x1\n0,1\n2,z\n".as_bytes(), b',', true).unwrap_err();
        assert!(e.contains("line 3") && e.contains("column 2"), "{e}");
    }

    #[test]
    fn sample_files_round_trip() {
        let x = Mat::from_rows(&[[0.1, -1.0 / 3.0], [1e-300, 2.5e17]]).unwrap();
        let text = samples_csv(&x, Some(&[1, 0]));
        let t = read_csv(text.as_bytes(), b',', true).unwrap();
        assert_eq!(t.x, x);
        assert_eq!(t.labels, Some(vec![1, 0]));
        assert_eq!(t.header.unwrap(), vec!["x0", "x1"]);
        let empty = samples_csv(&Mat::zeros(0, 2), None);
        assert_eq!(empty, "x0,x1\n");
        assert_eq!(read_csv(empty.as_bytes(), b',', true).unwrap().x.shape(), (0, 2));
    }

    #[test]
    fn projection_finds_the_dominant_axes() {
        // points spread along (1, 1, 0) and weakly along z
        let rows: Vec<[f64; 3]> = (0..20).map(|i| [i as f64, i as f64, 0.1 * ((i % 3) as f64)]).collect();
        let p = project_2d(&Mat::from_rows(&rows).unwrap());
        let spread = |k: usize| p.iter().map(|v| v[k] * v[k]).sum::<f64>();
        assert!(spread(0) > 100.0 * spread(1));
    }

    #[test]
    fn svg_has_one_circle_per_point() {
        let x = Mat::from_rows(&[[0.0, 0.0], [1.0, 2.0], [3.0, -1.0]]).unwrap();
        let s = scatter_svg(&x, None);
        assert_eq!(s.matches("<circle").count(), 3);
        assert!(s.contains("viewBox=\"0 0 500 500\""));
    }

    #[test]
    fn atomic_writes_replace_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/out.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
