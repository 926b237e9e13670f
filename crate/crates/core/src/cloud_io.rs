//! ASCII point cloud files: a count line, then one `x y z` triple per line.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::cloud::{Point, PointCloud};
use crate::error::{Error, Result};

pub fn write_cloud<W: Write>(mut w: W, cloud: &PointCloud) -> Result<()> {
    writeln!(w, "{}", cloud.len())?;
    for p in cloud {
        // `{:?}` prints the shortest string that round-trips exactly.
        writeln!(w, "{:?} {:?} {:?}", p.x, p.y, p.z)?;
    }
    Ok(())
}

pub fn read_cloud<R: BufRead>(r: R) -> Result<PointCloud> {
    let mut lines = r.lines().enumerate().filter_map(|(i, l)| match l {
        Ok(s) if s.trim().is_empty() || s.trim_start().starts_with('#') => None,
        other => Some((i + 1, other)),
    });
    let (line, header) = lines.next().ok_or(Error::EmptyCloud)?;
    let header = header?;
    let count: usize = header.trim().parse().map_err(|_| Error::CloudFormat {
        line,
        reason: format!("expected a point count, found '{}'", header.trim()),
    })?;
    let mut points = Vec::with_capacity(count);
    for (line, text) in lines {
        let text = text?;
        let coords: Vec<f64> = text
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::CloudFormat {
                line,
                reason: e.to_string(),
            })?;
        if coords.len() != 3 {
            return Err(Error::CloudFormat {
                line,
                reason: format!("expected 3 coordinates, found {}", coords.len()),
            });
        }
        points.push(Point::new(coords[0], coords[1], coords[2]));
    }
    if points.len() != count {
        return Err(Error::CloudFormat {
            line,
            reason: format!("header says {count} points, file has {}", points.len()),
        });
    }
    PointCloud::new(points)
}

pub fn save_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_cloud(&mut w, cloud)?;
    w.flush()?;
    Ok(())
}

pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    read_cloud(std::io::BufReader::new(std::fs::File::open(path)?))
}
