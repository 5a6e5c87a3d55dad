//! Compact binary grid format shared by one- and multi-dimensional fields.
//!
//! All numbers are little-endian.
//!
//! ```text
//! magic        8 bytes  "SKGRID\0\0"
//! version      u32      1
//! axis count   u32      A
//! field count  u32      F
//! axes         A x { nodes: u64, min: f64, max: f64 }
//! field names  F x { len: u32, utf8 bytes }
//! field data   F x prod(nodes) f64, row-major (last axis fastest)
//! ```

use std::io::{self, Read, Write};

use crate::error::{validation, Error, Result};
use crate::fluid::{FluidField, GridSpec};

pub const MAGIC: &[u8; 8] = b"SKGRID\0\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Axis {
    pub nodes: u64,
    pub min: f64,
    pub max: f64,
}

/// Axes plus named node-valued fields.
#[derive(Debug, Clone, PartialEq)]
pub struct GridData {
    pub axes: Vec<Axis>,
    pub fields: Vec<(String, Vec<f64>)>,
}

impl GridData {
    pub fn node_count(&self) -> Option<u64> {
        self.axes.iter().try_fold(1u64, |acc, a| acc.checked_mul(a.nodes))
    }

    pub fn field(&self, name: &str) -> Option<&[f64]> {
        self.fields.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    fn check(&self) -> Result<usize> {
        let n = self
            .node_count()
            .ok_or_else(|| validation("grid node count overflows"))? as usize;
        for (name, values) in &self.fields {
            if values.len() != n {
                return Err(validation(format!(
                    "field {name} has {} values, grid has {n} nodes",
                    values.len()
                )));
            }
        }
        Ok(n)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        self.check()?;
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.axes.len() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.fields.len() as u32).to_le_bytes());
        for a in &self.axes {
            buf.extend_from_slice(&a.nodes.to_le_bytes());
            buf.extend_from_slice(&a.min.to_le_bytes());
            buf.extend_from_slice(&a.max.to_le_bytes());
        }
        for (name, _) in &self.fields {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
        }
        for (_, values) in &self.fields {
            for v in values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf).map_err(io_error)
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io_error)?;
        if &magic != MAGIC {
            return Err(validation("not a grid file (bad magic)"));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(validation(format!("unsupported grid version {version}")));
        }
        let n_axes = read_u32(&mut r)? as usize;
        let n_fields = read_u32(&mut r)? as usize;
        if n_axes == 0 || n_axes > 16 {
            return Err(validation(format!("implausible axis count {n_axes}")));
        }
        let mut axes = Vec::with_capacity(n_axes);
        for _ in 0..n_axes {
            let nodes = read_u64(&mut r)?;
            let min = read_f64(&mut r)?;
            let max = read_f64(&mut r)?;
            axes.push(Axis { nodes, min, max });
        }
        let mut names = Vec::with_capacity(n_fields);
        for _ in 0..n_fields {
            let len = read_u32(&mut r)? as usize;
            let mut bytes = vec![0u8; len];
            r.read_exact(&mut bytes).map_err(io_error)?;
            names.push(String::from_utf8(bytes).map_err(|_| validation("field name is not utf-8"))?);
        }
        let mut data = GridData { axes, fields: Vec::new() };
        let n = data
            .node_count()
            .filter(|&n| n <= crate::dp::TABLE_CELL_BUDGET)
            .ok_or_else(|| Error::Resource("grid file node count exceeds budget".into()))?
            as usize;
        for name in names {
            let mut raw = vec![0u8; n * 8];
            r.read_exact(&mut raw).map_err(io_error)?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            data.fields.push((name, values));
        }
        Ok(data)
    }
}

fn io_error(e: io::Error) -> Error {
    Error::Io(e.to_string())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(io_error)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(io_error)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(io_error)?;
    Ok(f64::from_le_bytes(b))
}

impl FluidField {
    pub fn to_grid_data(&self) -> GridData {
        GridData {
            axes: vec![
                Axis { nodes: self.grid.nx as u64 + 1, min: 0.0, max: self.grid.x_max },
                Axis { nodes: self.grid.ny as u64 + 1, min: 0.0, max: self.grid.y_max },
            ],
            fields: vec![
                ("u".into(), self.u.clone()),
                ("u_x".into(), self.u_x.clone()),
                ("u_y".into(), self.u_y.clone()),
            ],
        }
    }

    pub fn from_grid_data(data: &GridData) -> Result<Self> {
        data.check()?;
        if data.axes.len() != 2 {
            return Err(validation(format!("expected 2 axes, found {}", data.axes.len())));
        }
        let (ax, ay) = (data.axes[0], data.axes[1]);
        if ax.min != 0.0 || ay.min != 0.0 || ax.nodes < 2 || ay.nodes < 2 {
            return Err(validation("fluid grids start at the origin with >= 2 nodes per axis"));
        }
        let get = |name: &str| {
            data.field(name)
                .map(<[f64]>::to_vec)
                .ok_or_else(|| validation(format!("missing field {name}")))
        };
        Ok(FluidField {
            grid: GridSpec::new(ax.max, ay.max, ax.nodes as usize - 1, ay.nodes as usize - 1),
            u: get("u")?,
            u_x: get("u_x")?,
            u_y: get("u_y")?,
        })
    }

    pub fn write_binary<W: Write>(&self, w: W) -> Result<()> {
        self.to_grid_data().write(w)
    }

    pub fn read_binary<R: Read>(r: R) -> Result<Self> {
        Self::from_grid_data(&GridData::read(r)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fluid_field_round_trip() {
        let f = FluidField::from_fn(GridSpec::new(1.5, 2.0, 7, 5), |x, y| x * y - y.sin()).unwrap();
        let mut buf = Vec::new();
        f.write_binary(&mut buf).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        let header = 8 + 12 + 2 * 24 + (4 + 1) + 2 * (4 + 3);
        assert_eq!(buf.len(), header + 3 * 8 * 6 * 8);
        assert_eq!(FluidField::read_binary(buf.as_slice()).unwrap(), f);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        assert!(GridData::read(&b"NOTAGRID"[..]).is_err());
        let f = FluidField::from_fn(GridSpec::new(1.0, 1.0, 3, 3), |x, _| x).unwrap();
        let mut buf = Vec::new();
        f.write_binary(&mut buf).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(matches!(FluidField::read_binary(buf.as_slice()), Err(Error::Io(_))));
    }
}
